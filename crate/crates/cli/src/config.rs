//! The resolved run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use hgn::model::ModelConfig;
use hgn::selector::SelectionMode;
use hgn::synthgen::SynthConfig;
use hgn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// File locations. Unset paths default to fixed names under `out_dir`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Optional `{"dim": k, "vectors": {token: [..]}}` file used to
    /// initialise the embedding table before training.
    pub embeddings: Option<PathBuf>,
    /// Optional `{qid: {title: score}}` file replacing the lexical ranker.
    pub ranker_scores: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// `first-hop`, `top<N>` or `threshold`.
    pub mode: String,
    /// Second-hop score threshold for `threshold` mode.
    pub tau: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { mode: "top4".into(), tau: 0.5 }
    }
}

impl SelectionConfig {
    pub fn mode(&self) -> Result<SelectionMode, CliError> {
        if !self.tau.is_finite() {
            return Err(CliError::Invalid(format!("tau must be finite, got {}", self.tau)));
        }
        Ok(self.mode.parse::<SelectionMode>()?.with_tau(self.tau))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random stream; copied into `synth.seed` and `train.seed`.
    pub seed: u64,
    /// Worker threads for per-example stages; 0 uses every core.
    pub jobs: usize,
    pub out_dir: PathBuf,
    pub paths: Paths,
    pub synth: SynthConfig,
    /// Generated examples held out for the dev split.
    pub dev_examples: usize,
    pub selection: SelectionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            jobs: 0,
            out_dir: PathBuf::from("."),
            paths: Paths::default(),
            synth: SynthConfig::default(),
            dev_examples: 200,
            selection: SelectionConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    }

    /// Propagates the shared settings, fills default paths and checks every
    /// module config.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.train.jobs = self.jobs;
        let out = self.out_dir.clone();
        let fill = |p: &mut Option<PathBuf>, name: &str| {
            p.get_or_insert_with(|| out.join(name));
        };
        fill(&mut self.paths.corpus, "corpus.json");
        fill(&mut self.paths.train, "train.json");
        fill(&mut self.paths.dev, "dev.json");
        fill(&mut self.paths.checkpoint, "model.ckpt");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.selection.mode()?;
        if self.dev_examples >= self.synth.num_examples {
            return Err(CliError::Invalid(format!(
                "dev_examples ({}) must be smaller than synth.num_examples ({})",
                self.dev_examples, self.synth.num_examples
            )));
        }
        Ok(())
    }

    /// A path filled in by [`RunConfig::resolve`].
    pub fn path(p: &Option<PathBuf>) -> &Path {
        p.as_deref().expect("resolved config has every path")
    }
}

//! The full network: encoder, graph reasoning, gated fusion and heads, plus
//! per-example inputs prepared ahead of training.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QaExample};
use crate::encoder::{Encoder, EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::graph::{build_graph, Caps, HierGraph};
use crate::numerics::{BoundParams, ParamRegistry, Tape, Var};
use crate::predictor::{
    decode, gold_labels, joint_loss, load_params, save_params, Checkpoint, Decoded, Gold, HeadLogits, HeadVars, Heads,
    LossParts, LossWeights, Masks, YesNoSpan,
};
use crate::reasoner::{gated_attention, reason, split, GatParams, GateParams};
use crate::selector::{select_paragraphs, Ranker, SelectionMode, SelectionResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub model_dim: usize,
    pub lstm_dropout: f64,
    pub gnn_dropout: f64,
    pub gat_layers: usize,
    /// When false the graph reasoning step is the identity.
    pub use_graph: bool,
    pub caps: Caps,
    pub max_answer_len: usize,
    pub loss_weights: LossWeights,
    pub yes_no_span: YesNoSpan,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            model_dim: 32,
            lstm_dropout: 0.3,
            gnn_dropout: 0.3,
            gat_layers: 1,
            use_graph: true,
            caps: Caps::default(),
            max_answer_len: 30,
            loss_weights: LossWeights::default(),
            yes_no_span: YesNoSpan::default(),
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            model_dim: self.model_dim,
            dropout: self.lstm_dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder(2).validate()?;
        self.caps.validate()?;
        self.loss_weights.validate()?;
        if !(0.0..1.0).contains(&self.gnn_dropout) {
            return Err(Error::Config(format!("gnn_dropout must lie in [0, 1), got {}", self.gnn_dropout)));
        }
        if self.gat_layers == 0 {
            return Err(Error::Config("gat_layers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything the network needs for one example, computed once.
#[derive(Clone, Debug)]
pub struct Instance {
    pub id: String,
    pub selection: SelectionResult,
    pub graph: HierGraph,
    pub question_ids: Vec<usize>,
    pub context_ids: Vec<usize>,
    pub gold: Gold,
    pub masks: Masks,
}

impl Instance {
    pub fn new(example: &QaExample, selection: SelectionResult, corpus: &Corpus, vocab: &Vocab, config: &ModelConfig) -> Result<Self> {
        let graph = build_graph(example, &selection, corpus, config.caps)?;
        let gold = gold_labels(example, &graph, config.yes_no_span);
        let masks = Masks::from_graph(&graph);
        Ok(Self {
            id: example.id.clone(),
            question_ids: vocab.ids(&example.question),
            context_ids: vocab.ids(&graph.context),
            selection,
            graph,
            gold,
            masks,
        })
    }
}

/// Selects paragraphs and builds an [`Instance`] per example.
pub fn prepare(
    examples: &[QaExample],
    corpus: &Corpus,
    ranker: &dyn Ranker,
    mode: SelectionMode,
    vocab: &Vocab,
    config: &ModelConfig,
) -> Result<Vec<Instance>> {
    use rayon::prelude::*;
    examples
        .par_iter()
        .map(|ex| Instance::new(ex, select_paragraphs(ex, corpus, ranker, mode), corpus, vocab, config))
        .collect()
}

/// Vocabulary over the corpus and the questions of `examples`.
pub fn build_vocab(corpus: &Corpus, examples: &[QaExample]) -> Vocab {
    let mut v = Vocab::default();
    for p in corpus.paragraphs() {
        v.extend(p.title.split_whitespace());
        for s in &p.sentences {
            v.extend(s.iter().map(String::as_str));
        }
    }
    for ex in examples {
        v.extend(ex.question.iter().map(String::as_str));
    }
    v
}

/// Tape vars produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub heads: HeadVars,
    pub node_features: Var,
    pub reasoned: Var,
    pub gated: Var,
    /// Per graph-attention layer, the var carrying attention weights.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamRegistry,
    pub encoder: Encoder,
    pub gat: GatParams,
    pub gate: GateParams,
    pub heads: Heads,
}

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    model: ModelConfig,
    vocab_size: usize,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamRegistry::new();
        let encoder = Encoder::new(&mut params, config.encoder(vocab.len()), &mut rng)?;
        let dn = encoder.config.node_dim();
        let gat = GatParams::new(&mut params, dn, config.gat_layers, config.gnn_dropout, &mut rng)?;
        let gate = GateParams::new(&mut params, config.model_dim, dn, &mut rng)?;
        let heads = Heads::new(&mut params, dn, 2 * config.model_dim + dn, &mut rng)?;
        Ok(Self { config, vocab, params, encoder, gat, gate, heads })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let stored = StoredConfig { model: self.config.clone(), vocab_size: self.vocab.len() };
        Checkpoint {
            config: serde_json::to_value(stored).expect("config serializes"),
            vocab: self.vocab.tokens().to_vec(),
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_params(path, &self.checkpoint())
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let stored: StoredConfig =
            serde_json::from_value(ckpt.config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let vocab = Vocab::from_tokens(ckpt.vocab)?;
        if vocab.len() != stored.vocab_size {
            return Err(Error::Checkpoint("vocabulary size disagrees with config".into()));
        }
        let mut model = Model::new(stored.model, vocab, 0)?;
        if model.params.len() != ckpt.params.len() {
            return Err(Error::Checkpoint("parameter list does not match the architecture".into()));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let t = ckpt
                .params
                .by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has the wrong shape")));
            }
            *model.params.get_mut(id) = t.clone();
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(load_params(path)?)
    }

    /// Forward pass. Dropout is active only when `rng` is given.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, inst: &Instance, mut rng: Option<&mut ChaCha8Rng>) -> Result<Forward> {
        let enc = self
            .encoder
            .encode(tape, p, &inst.question_ids, &inst.context_ids, rng.as_deref_mut())?;
        let h = self.encoder.extract_node_reps(tape, p, &enc, &inst.graph)?;
        let (nodes, attention) = if self.config.use_graph {
            reason(tape, p, &self.gat, h, &inst.graph, rng)?
        } else {
            (split(tape, h, &inst.graph)?, Vec::new())
        };
        let gated = gated_attention(tape, p, &self.gate, enc.m, nodes.h, &inst.graph.mask)?;
        let heads = self.heads.forward(tape, p, &nodes, gated)?;
        Ok(Forward { heads, node_features: h, reasoned: nodes.h, gated, attention })
    }

    pub fn loss(&self, tape: &mut Tape, p: &BoundParams, inst: &Instance, rng: Option<&mut ChaCha8Rng>) -> Result<LossParts> {
        let f = self.forward(tape, p, inst, rng)?;
        joint_loss(tape, &f.heads, &inst.gold, &self.config.loss_weights, &inst.masks)
    }

    pub fn logits(&self, inst: &Instance) -> Result<HeadLogits> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let f = self.forward(&mut tape, &p, inst, None)?;
        Ok(HeadLogits::read(&tape, &f.heads))
    }

    pub fn predict(&self, inst: &Instance) -> Result<Decoded> {
        Ok(decode(&self.logits(inst)?, &inst.graph, self.config.max_answer_len))
    }
}

//! Output heads, the joint training loss, decoding and checkpoint files.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::{normalize_title, Answer, QaExample};
use crate::error::{Error, Result};
use crate::graph::{HierGraph, NodeKind};
use crate::nn::Mlp;
use crate::numerics::{BoundParams, ParamRegistry, Tape, Tensor, Var};
use crate::reasoner::Reasoned;

/// Weights of the paragraph, sentence, entity and answer-type losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub para: f64,
    pub sent: f64,
    pub entity: f64,
    pub answer_type: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { para: 1.0, sent: 5.0, entity: 1.0, answer_type: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.para, self.sent, self.entity, self.answer_type].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// How span labels are set for yes/no answers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YesNoSpan {
    /// Start and end both point at the sentinel.
    #[default]
    Sentinel,
    /// Start and end losses are skipped.
    Masked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerKind {
    Span = 0,
    Yes = 1,
    No = 2,
}

impl AnswerKind {
    pub const ALL: [AnswerKind; 3] = [AnswerKind::Span, AnswerKind::Yes, AnswerKind::No];

    pub fn of(answer: &Answer) -> Self {
        match answer {
            Answer::Yes => AnswerKind::Yes,
            Answer::No => AnswerKind::No,
            Answer::Span(_) => AnswerKind::Span,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub sent: Mlp,
    pub para: Mlp,
    pub entity: Mlp,
    pub start: Mlp,
    pub end: Mlp,
    pub answer_type: Mlp,
}

/// Logit vars: column vectors for the node and token heads, `1 x 3` for the
/// answer type.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub sent: Var,
    pub para: Var,
    pub entity: Var,
    pub start: Var,
    pub end: Var,
    pub answer_type: Var,
}

impl Heads {
    pub fn new(reg: &mut ParamRegistry, node_dim: usize, token_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            sent: Mlp::new(reg, "heads.sent", node_dim, node_dim, 1, rng)?,
            para: Mlp::new(reg, "heads.para", node_dim, node_dim, 1, rng)?,
            entity: Mlp::new(reg, "heads.entity", node_dim, node_dim, 1, rng)?,
            start: Mlp::new(reg, "heads.start", token_dim, node_dim, 1, rng)?,
            end: Mlp::new(reg, "heads.end", token_dim, node_dim, 1, rng)?,
            answer_type: Mlp::new(reg, "heads.type", token_dim, node_dim, 3, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, nodes: &Reasoned, g: Var) -> Result<HeadVars> {
        let first = tape.slice_rows(g, 0, 1)?;
        Ok(HeadVars {
            sent: self.sent.forward(tape, p, nodes.sentences)?,
            para: self.para.forward(tape, p, nodes.paragraphs)?,
            entity: self.entity.forward(tape, p, nodes.entities)?,
            start: self.start.forward(tape, p, g)?,
            end: self.end.forward(tape, p, g)?,
            answer_type: self.answer_type.forward(tape, p, first)?,
        })
    }
}

/// Plain logit values, read off a tape or built by hand.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLogits {
    pub sent: Vec<f64>,
    pub para: Vec<f64>,
    pub entity: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub answer_type: [f64; 3],
}

impl HeadLogits {
    pub fn read(tape: &Tape, v: &HeadVars) -> Self {
        let t = tape.value(v.answer_type).data();
        Self {
            sent: tape.value(v.sent).data().to_vec(),
            para: tape.value(v.para).data().to_vec(),
            entity: tape.value(v.entity).data().to_vec(),
            start: tape.value(v.start).data().to_vec(),
            end: tape.value(v.end).data().to_vec(),
            answer_type: [t[0], t[1], t[2]],
        }
    }
}

/// Which positions and nodes take part in losses and decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Masks {
    pub context: Vec<bool>,
    pub sent: Vec<bool>,
    pub para: Vec<bool>,
    pub entity: Vec<bool>,
}

impl Masks {
    pub fn from_graph(graph: &HierGraph) -> Self {
        let c = graph.caps;
        let real = |a: usize, b: usize| graph.mask[a..b].to_vec();
        Self {
            context: vec![true; graph.context.len()],
            sent: real(c.sentence_offset(), c.entity_offset()),
            para: real(c.paragraph_offset(), c.sentence_offset()),
            entity: graph.nodes[c.entity_offset()..].iter().map(|n| n.is_real && n.answer_candidate).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gold {
    pub kind: AnswerKind,
    /// Inclusive context span; `None` when the answer is not in the context.
    pub span: Option<(usize, usize)>,
    pub sent: Vec<f64>,
    pub para: Vec<f64>,
    /// Index among entity slots, when the answer is an entity node.
    pub entity: Option<usize>,
}

fn fold(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Training targets for `example` on `graph`. Span answers point at their
/// first occurrence in the context.
pub fn gold_labels(example: &QaExample, graph: &HierGraph, yes_no: YesNoSpan) -> Gold {
    let c = graph.caps;
    let kind = AnswerKind::of(&example.answer);
    let span = match (&example.answer, yes_no) {
        (Answer::Span(text), _) => {
            let want = fold(text);
            let ctx: Vec<String> = graph.context.iter().map(|t| t.to_lowercase()).collect();
            (!want.is_empty() && want.len() < ctx.len())
                .then(|| (1..=ctx.len() - want.len()).find(|&s| ctx[s..s + want.len()] == want[..]))
                .flatten()
                .map(|s| (s, s + want.len() - 1))
        }
        (_, YesNoSpan::Sentinel) => Some((0, 0)),
        (_, YesNoSpan::Masked) => None,
    };
    let sup: BTreeSet<(String, usize)> = example
        .supporting_facts
        .iter()
        .map(|(t, i)| (normalize_title(t), *i))
        .collect();
    let mut gold_titles: BTreeSet<String> = example.gold_titles.iter().map(|t| normalize_title(t)).collect();
    if gold_titles.is_empty() {
        gold_titles = sup.iter().map(|(t, _)| t.clone()).collect();
    }
    let title_of = |i: usize| graph.nodes[i].source.title.as_deref().map(normalize_title);
    let sent = (c.sentence_offset()..c.entity_offset())
        .map(|i| {
            let n = &graph.nodes[i];
            let hit = n.is_real && n.source.sentence.is_some_and(|s| title_of(i).is_some_and(|t| sup.contains(&(t, s))));
            f64::from(u8::from(hit))
        })
        .collect();
    let para = (c.paragraph_offset()..c.sentence_offset())
        .map(|i| f64::from(u8::from(graph.nodes[i].is_real && title_of(i).is_some_and(|t| gold_titles.contains(&t)))))
        .collect();
    let entity = match &example.answer {
        Answer::Span(text) => {
            let want = fold(text);
            graph.nodes[c.entity_offset()..]
                .iter()
                .position(|n| n.is_real && n.answer_candidate && n.source.surface.as_deref().map(fold) == Some(want.clone()))
        }
        _ => None,
    };
    Gold { kind, span, sent, para, entity }
}

/// Individual loss terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub start: Option<Var>,
    pub end: Option<Var>,
    pub para: Var,
    pub sent: Var,
    pub entity: Option<Var>,
    pub answer_type: Var,
}

pub fn joint_loss(tape: &mut Tape, heads: &HeadVars, gold: &Gold, weights: &LossWeights, masks: &Masks) -> Result<LossParts> {
    let (mut start, mut end) = (None, None);
    if let Some((s, e)) = gold.span {
        if s >= masks.context.len() || e >= masks.context.len() || !masks.context[s] || !masks.context[e] {
            return Err(Error::Label(format!("gold span ({s}, {e}) falls outside the real context")));
        }
        start = Some(tape.cross_entropy_with_logits(heads.start, s, &masks.context)?);
        end = Some(tape.cross_entropy_with_logits(heads.end, e, &masks.context)?);
    }
    let para = tape.bce_with_logits(heads.para, &gold.para, &masks.para)?;
    let sent = tape.bce_with_logits(heads.sent, &gold.sent, &masks.sent)?;
    let entity = match gold.entity {
        Some(i) if masks.entity.get(i) == Some(&true) => Some(tape.cross_entropy_with_logits(heads.entity, i, &masks.entity)?),
        Some(i) => return Err(Error::Label(format!("gold entity slot {i} is not an answer candidate"))),
        None => None,
    };
    let answer_type = tape.cross_entropy_with_logits(heads.answer_type, gold.kind as usize, &[true; 3])?;

    let mut total = tape.scale(para, weights.para)?;
    let terms = [
        (start, 1.0),
        (end, 1.0),
        (Some(sent), weights.sent),
        (entity, weights.entity),
        (Some(answer_type), weights.answer_type),
    ];
    for (term, w) in terms {
        if let Some(v) = term {
            let v = tape.scale(v, w)?;
            total = tape.add(total, v)?;
        }
    }
    Ok(LossParts { total, start, end, para, sent, entity, answer_type })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub answer: Answer,
    pub span: Option<(usize, usize)>,
    pub supporting_facts: BTreeSet<(String, usize)>,
    pub paragraphs: BTreeSet<String>,
}

fn argmax(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Best `(s, e)` with `1 <= s <= e <= s + max_len` by `start[s] + end[e]`,
/// earliest on ties.
pub fn best_span(start: &[f64], end: &[f64], max_len: usize) -> Option<(usize, usize)> {
    let n = start.len().min(end.len());
    let mut best: Option<((usize, usize), f64)> = None;
    for s in 1..n {
        for e in s..n.min(s + max_len + 1) {
            let v = start[s] + end[e];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some(((s, e), v));
            }
        }
    }
    best.map(|(p, _)| p)
}

pub fn decode(logits: &HeadLogits, graph: &HierGraph, max_answer_len: usize) -> Decoded {
    let c = graph.caps;
    let kind = AnswerKind::ALL[argmax(logits.answer_type).unwrap_or(0)];
    let (answer, span) = match kind {
        AnswerKind::Yes => (Answer::Yes, None),
        AnswerKind::No => (Answer::No, None),
        AnswerKind::Span => match best_span(&logits.start, &logits.end, max_answer_len) {
            Some((s, e)) => (Answer::Span(graph.context[s..=e].join(" ")), Some((s, e))),
            None => (Answer::Span(String::new()), None),
        },
    };
    let key = |i: usize| {
        let n = &graph.nodes[i];
        (n.source.title.clone().unwrap_or_default(), n.source.sentence.unwrap_or(0))
    };
    let real_sent: Vec<usize> = (0..c.n_s).filter(|&k| graph.mask[c.sentence_offset() + k]).collect();
    let mut supporting_facts: BTreeSet<(String, usize)> = real_sent
        .iter()
        .filter(|&&k| logits.sent[k] > 0.0)
        .map(|&k| key(c.sentence_offset() + k))
        .collect();
    if supporting_facts.is_empty() {
        if let Some(best) = argmax(real_sent.iter().map(|&k| logits.sent[k])) {
            supporting_facts.insert(key(c.sentence_offset() + real_sent[best]));
        }
    }
    let paragraphs = (0..c.n_p)
        .filter(|&k| graph.mask[c.paragraph_offset() + k] && logits.para[k] > 0.0)
        .map(|k| key(c.paragraph_offset() + k).0)
        .collect();
    Decoded { answer, span, supporting_facts, paragraphs }
}

impl HierGraph {
    /// Real sentence nodes in slot order, for inspection.
    pub fn sentence_keys(&self) -> Vec<(String, usize)> {
        self.nodes_of(NodeKind::Sentence)
            .map(|n| (n.source.title.clone().unwrap_or_default(), n.source.sentence.unwrap_or(0)))
            .collect()
    }
}

const MAGIC: &str = "HGNCKPT1";

/// Trained weights with the configuration and vocabulary they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub vocab: Vec<String>,
    pub params: ParamRegistry,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Value,
    config_hash: String,
    vocab: Vec<String>,
    params: Vec<ParamHeader>,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical JSON form of `config`.
pub fn config_hash(config: &Value) -> String {
    hex(&Sha256::digest(config.to_string().as_bytes()))
}

/// Writes a magic line, a JSON header line and the little-endian `f64`
/// payload.
pub fn save_params(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::with_capacity(ckpt.params.num_scalars() * 8);
    for t in ckpt.params.tensors() {
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header {
        config: ckpt.config.clone(),
        config_hash: config_hash(&ckpt.config),
        vocab: ckpt.vocab.clone(),
        params: ckpt
            .params
            .iter()
            .map(|(name, t)| ParamHeader { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let mut out = Vec::with_capacity(payload.len() + 4096);
    writeln!(out, "{MAGIC}").expect("writing to memory");
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if line.trim_end() != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    line.clear();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&line).map_err(|e| bad(&format!("corrupt header: {e}")))?;
    if config_hash(&header.config) != header.config_hash {
        return Err(bad("config hash mismatch"));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if hex(&Sha256::digest(&payload)) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch"));
    }
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(bad("payload size does not match parameter shapes"));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let mut params = ParamRegistry::new();
    for p in header.params {
        let n = p.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        params.register(p.name, Tensor::new(p.shape, data)?)?;
    }
    Ok(Checkpoint { config: header.config, vocab: header.vocab, params })
}

//! Token encoder and initial node features.
//!
//! A trainable embedding feeds a shared bidirectional LSTM run separately
//! over the question and the context. Bi-attention mixes the question into
//! the context, a second BiLSTM produces `M`, and node features are read off
//! span boundaries of `M`.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HierGraph, NodeKind, TokenSpan};
use crate::nn::{dropout, BiLstm, Mlp};
use crate::numerics::{BoundParams, ParamId, ParamRegistry, Tape, Tensor, Var};

pub const UNK: &str = "[UNK]";
pub const UNK_ID: usize = 0;
pub const SENTINEL_ID: usize = 1;

/// Case-folded token vocabulary. Ids 0 and 1 are the unknown and sentinel
/// tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(vec![UNK.into(), crate::graph::SENTINEL.into()]).expect("reserved tokens are distinct")
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) || tokens.get(1).map(String::as_str) != Some(crate::graph::SENTINEL) {
            return Err(Error::Encoder("vocabulary must start with the unknown and sentinel tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Encoder(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Adds every unseen token in first-seen order.
    pub fn extend<'a>(&mut self, tokens: impl IntoIterator<Item = &'a str>) {
        for t in tokens {
            let t = t.to_lowercase();
            if !self.index.contains_key(&t) {
                self.index.insert(t.clone(), self.tokens.len());
                self.tokens.push(t);
            }
        }
    }

    pub fn id(&self, token: &str) -> usize {
        if token == crate::graph::SENTINEL {
            return SENTINEL_ID;
        }
        self.index.get(&token.to_lowercase()).copied().unwrap_or(UNK_ID)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub model_dim: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("model_dim must be positive and even, got {}", self.model_dim)));
        }
        if self.embed_dim == 0 || self.vocab_size < 2 {
            return Err(Error::Config("embed_dim and vocab_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Width of node features: twice the model dimension.
    pub fn node_dim(&self) -> usize {
        2 * self.model_dim
    }
}

/// Question and context after bi-attention, plus the BiLSTM states.
#[derive(Clone, Copy, Debug)]
pub struct ContextEncoding {
    /// `m x d`.
    pub q: Var,
    /// `n x d`.
    pub c: Var,
    /// `n x 2d`.
    pub m: Var,
    /// `m x 2d`, the same BiLSTM applied to the question.
    pub mq: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embed: ParamId,
    pub backbone: BiLstm,
    pub w_c: ParamId,
    pub w_q: ParamId,
    pub w_cq: ParamId,
    pub proj: crate::nn::Linear,
    pub main: BiLstm,
    pub mlp_q: Mlp,
    pub mlp_p: Mlp,
    pub mlp_s: Mlp,
    pub mlp_e: Mlp,
}

impl Encoder {
    pub fn new(reg: &mut ParamRegistry, config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (d, dn) = (config.model_dim, config.node_dim());
        // Unit-variance rows. Smaller tables leave the recurrent outputs too
        // weak for the similarity to separate matching tokens.
        let bound = 3f64.sqrt();
        let table = crate::nn::uniform(config.vocab_size, config.embed_dim, bound, rng);
        let embed = reg.register("encoder.embed", table)?;
        Ok(Self {
            config,
            embed,
            backbone: BiLstm::new(reg, "encoder.backbone", config.embed_dim, d / 2, rng)?,
            w_c: reg.register("encoder.att.w_c", crate::nn::xavier(d, 1, rng))?,
            w_q: reg.register("encoder.att.w_q", crate::nn::xavier(d, 1, rng))?,
            w_cq: reg.register("encoder.att.w_cq", crate::nn::xavier(1, d, rng))?,
            proj: crate::nn::Linear::new(reg, "encoder.att.proj", 4 * d, d, true, rng)?,
            main: BiLstm::new(reg, "encoder.main", d, d, rng)?,
            mlp_q: Mlp::new(reg, "encoder.mlp_q", d, dn, dn, rng)?,
            mlp_p: Mlp::new(reg, "encoder.mlp_p", 2 * d, dn, dn, rng)?,
            mlp_s: Mlp::new(reg, "encoder.mlp_s", 2 * d, dn, dn, rng)?,
            mlp_e: Mlp::new(reg, "encoder.mlp_e", 2 * d, dn, dn, rng)?,
        })
    }

    pub fn embed_ids(&self, tape: &mut Tape, p: &BoundParams, ids: &[usize], what: &str) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Encoder(format!("empty {what}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Encoder(format!("{what} token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(tape.gather_rows(p.var(self.embed), ids)?)
    }

    /// Similarity `s_ij = w_c . c_i + w_q . q_j + w_cq . (c_i * q_j)`, `n x m`.
    pub fn similarity(&self, tape: &mut Tape, p: &BoundParams, cb: Var, qb: Var) -> Result<Var> {
        let cw = tape.mul_row(cb, p.var(self.w_cq))?;
        let qt = tape.transpose(qb)?;
        let s = tape.matmul(cw, qt)?;
        let sc = tape.matmul(cb, p.var(self.w_c))?;
        let s = tape.add_col(s, sc)?;
        let sq = tape.matmul(qb, p.var(self.w_q))?;
        let sq = tape.transpose(sq)?;
        Ok(tape.add_row(s, sq)?)
    }

    /// Backbone plus bi-attention: returns `(Q, C)`.
    pub fn encode_tokens(&self, tape: &mut Tape, p: &BoundParams, question: &[usize], context: &[usize]) -> Result<(Var, Var)> {
        let qe = self.embed_ids(tape, p, question, "question")?;
        let ce = self.embed_ids(tape, p, context, "context")?;
        let qb = self.backbone.forward(tape, p, qe)?;
        let cb = self.backbone.forward(tape, p, ce)?;

        let s = self.similarity(tape, p, cb, qb)?;
        let a = tape.masked_softmax(s, &vec![true; question.len()])?;
        let c2q = tape.matmul(a, qb)?;
        let st = tape.transpose(s)?;
        let best = tape.max_pool_rows(st)?;
        let b = tape.masked_softmax(best, &vec![true; context.len()])?;
        let q2c = tape.matmul(b, cb)?;
        let c_c2q = tape.mul(cb, c2q)?;
        let c_q2c = tape.mul_row(cb, q2c)?;
        let x = tape.concat_cols(&[cb, c2q, c_c2q, c_q2c])?;
        let c = self.proj.forward(tape, p, x)?;
        let c = tape.relu(c)?;
        Ok((qb, c))
    }

    /// Main BiLSTM with dropout on its output (training only).
    pub fn run_bilstm(&self, tape: &mut Tape, p: &BoundParams, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let m = self.main.forward(tape, p, x)?;
        Ok(dropout(tape, m, self.config.dropout, rng)?)
    }

    pub fn encode(&self, tape: &mut Tape, p: &BoundParams, question: &[usize], context: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Result<ContextEncoding> {
        let (q, c) = self.encode_tokens(tape, p, question, context)?;
        let m = self.run_bilstm(tape, p, c, rng.as_deref_mut())?;
        let mq = self.run_bilstm(tape, p, q, rng)?;
        Ok(ContextEncoding { q, c, m, mq })
    }

    /// `[M[start][d:], M[end][:d]]` per span, through `mlp`.
    fn span_reps(&self, tape: &mut Tape, p: &BoundParams, m: Var, spans: &[TokenSpan], mlp: &Mlp) -> Result<Var> {
        let d = self.config.model_dim;
        let len = tape.value(m).rows();
        if let Some(s) = spans.iter().find(|s| s.start > s.end || s.end >= len) {
            return Err(Error::Encoder(format!("span {}..={} out of bounds for {len} tokens", s.start, s.end)));
        }
        let starts: Vec<usize> = spans.iter().map(|s| s.start).collect();
        let ends: Vec<usize> = spans.iter().map(|s| s.end).collect();
        let at_start = tape.gather_rows(m, &starts)?;
        let bwd = tape.slice_cols(at_start, d, 2 * d)?;
        let at_end = tape.gather_rows(m, &ends)?;
        let fwd = tape.slice_cols(at_end, 0, d)?;
        let x = tape.concat_cols(&[bwd, fwd])?;
        Ok(mlp.forward(tape, p, x)?)
    }

    /// Node feature matrix `H` (`g x d_node`) in the graph's layout, with
    /// zero rows for padding nodes.
    pub fn extract_node_reps(&self, tape: &mut Tape, p: &BoundParams, enc: &ContextEncoding, graph: &HierGraph) -> Result<Var> {
        let dn = self.config.node_dim();
        let pooled = tape.max_pool_rows(enc.q)?;
        let mut parts = vec![self.mlp_q.forward(tape, p, pooled)?];
        let caps = graph.caps;
        for (kind, cap, mlp) in [
            (NodeKind::Paragraph, caps.n_p, &self.mlp_p),
            (NodeKind::Sentence, caps.n_s, &self.mlp_s),
            (NodeKind::Entity, caps.n_e, &self.mlp_e),
        ] {
            let mut real = 0;
            // Consecutive runs of nodes read from the same sequence.
            let mut runs: Vec<(bool, Vec<TokenSpan>)> = Vec::new();
            for node in graph.nodes_of(kind) {
                let span = node
                    .source
                    .span
                    .ok_or_else(|| Error::Encoder(format!("node {} has no token span", node.index)))?;
                match runs.last_mut() {
                    Some((q, spans)) if *q == span.in_question => spans.push(span),
                    _ => runs.push((span.in_question, vec![span])),
                }
                real += 1;
            }
            for (in_question, spans) in runs {
                let src = if in_question { enc.mq } else { enc.m };
                parts.push(self.span_reps(tape, p, src, &spans, mlp)?);
            }
            if real < cap {
                parts.push(tape.constant(Tensor::zeros(&[cap - real, dn])));
            }
        }
        Ok(tape.concat_rows(&parts)?)
    }

    /// Overwrites embedding rows from a JSON file of the form
    /// `{"dim": k, "vectors": {token: [..]}}`. Returns the number of rows set.
    pub fn load_embeddings(&self, reg: &mut ParamRegistry, vocab: &Vocab, path: impl AsRef<Path>) -> Result<usize> {
        #[derive(Deserialize)]
        struct EmbeddingFile {
            dim: usize,
            vectors: HashMap<String, Vec<f64>>,
        }
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: EmbeddingFile = serde_json::from_str(&text).map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
        let k = self.config.embed_dim;
        if file.dim != k {
            return Err(Error::schema(path.display().to_string(), format!("dim {} does not match embed_dim {k}", file.dim)));
        }
        let table = reg.get_mut(self.embed);
        let mut set = 0;
        for (token, v) in &file.vectors {
            if v.len() != k || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::schema(format!("{}: vectors[{token}]", path.display()), format!("expected {k} finite values")));
            }
            let id = vocab.id(token);
            if id != UNK_ID || token == UNK {
                table.data_mut()[id * k..(id + 1) * k].copy_from_slice(v);
                set += 1;
            }
        }
        Ok(set)
    }
}

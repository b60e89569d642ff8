//! Edge-typed graph attention over node features and the gated fusion of
//! node features back into the token sequence.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{HierGraph, NUM_EDGE_TYPES};
use crate::nn::{dropout, xavier};
use crate::numerics::{Adjacency, BoundParams, ParamId, ParamRegistry, Tape, Var, LEAKY_SLOPE};

#[derive(Clone, Copy, Debug)]
pub struct GatLayer {
    /// `d_node x d_node`.
    pub w: ParamId,
    /// One row of length `2 d_node` per edge type.
    pub edges: ParamId,
}

#[derive(Clone, Debug)]
pub struct GatParams {
    pub layers: Vec<GatLayer>,
    pub node_dim: usize,
    pub dropout: f64,
}

impl GatParams {
    pub fn new(reg: &mut ParamRegistry, node_dim: usize, layers: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("at least one graph attention layer is required".into()));
        }
        let layers = (0..layers)
            .map(|l| {
                Ok(GatLayer {
                    w: reg.register(format!("gat.{l}.w"), xavier(node_dim, node_dim, rng))?,
                    edges: reg.register(format!("gat.{l}.edges"), xavier(NUM_EDGE_TYPES, 2 * node_dim, rng))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, node_dim, dropout })
    }
}

/// `alpha_ij = softmax_j leaky([h_i; h_j] . w_t(ij))`, `h'_i = leaky(sum_j alpha_ij h_j W)`.
///
/// Returns `h'` and the aggregation var, whose attention weights
/// [`Tape::attention_weights`] exposes.
pub fn gat_layer(tape: &mut Tape, p: &BoundParams, layer: &GatLayer, h: Var, adjacency: &Arc<Adjacency>) -> Result<(Var, Var)> {
    let dn = tape.value(h).cols();
    let e = p.var(layer.edges);
    let e_src = tape.slice_cols(e, 0, dn)?;
    let e_src = tape.transpose(e_src)?;
    let e_dst = tape.slice_cols(e, dn, 2 * dn)?;
    let e_dst = tape.transpose(e_dst)?;
    let src = tape.matmul(h, e_src)?;
    let dst = tape.matmul(h, e_dst)?;
    let values = tape.matmul(h, p.var(layer.w))?;
    let agg = tape.neighbor_attention(src, dst, values, Arc::clone(adjacency), LEAKY_SLOPE)?;
    Ok((tape.leaky_relu(agg, LEAKY_SLOPE)?, agg))
}

/// Node features after every layer, split by kind.
#[derive(Clone, Copy, Debug)]
pub struct Reasoned {
    pub h: Var,
    pub question: Var,
    pub paragraphs: Var,
    pub sentences: Var,
    pub entities: Var,
}

/// Stacked graph attention with dropout between layers. Also returns each
/// layer's aggregation var for inspecting attention weights.
pub fn reason(tape: &mut Tape, p: &BoundParams, params: &GatParams, h: Var, graph: &HierGraph, mut rng: Option<&mut ChaCha8Rng>) -> Result<(Reasoned, Vec<Var>)> {
    if graph.nodes.iter().zip(&graph.neighbors).any(|(n, ns)| n.is_real && ns.is_empty()) {
        return Err(Error::Graph("real node without neighbours".into()));
    }
    let adj = graph.adjacency();
    let mut x = h;
    let mut outputs = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        if l > 0 {
            x = dropout(tape, x, params.dropout, rng.as_deref_mut())?;
        }
        let (next, agg) = gat_layer(tape, p, layer, x, &adj)?;
        x = next;
        outputs.push(agg);
    }
    Ok((split(tape, x, graph)?, outputs))
}

/// Index views of `h` following the fixed layout.
pub fn split(tape: &mut Tape, h: Var, graph: &HierGraph) -> Result<Reasoned> {
    let c = graph.caps;
    Ok(Reasoned {
        h,
        question: tape.slice_rows(h, 0, 1)?,
        paragraphs: tape.slice_rows(h, c.paragraph_offset(), c.sentence_offset())?,
        sentences: tape.slice_rows(h, c.sentence_offset(), c.entity_offset())?,
        entities: tape.slice_rows(h, c.entity_offset(), c.total())?,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    /// `2d x 2d`.
    pub w_m: ParamId,
    /// `d_node x 2d`.
    pub w_m_node: ParamId,
    /// `4d x 4d` each.
    pub w_s: ParamId,
    pub w_t: ParamId,
}

impl GateParams {
    pub fn new(reg: &mut ParamRegistry, model_dim: usize, node_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d2, x) = (2 * model_dim, 2 * model_dim + node_dim);
        Ok(Self {
            w_m: reg.register("gate.w_m", xavier(d2, d2, rng))?,
            w_m_node: reg.register("gate.w_m_node", xavier(node_dim, d2, rng))?,
            w_s: reg.register("gate.w_s", xavier(x, x, rng))?,
            w_t: reg.register("gate.w_t", xavier(x, x, rng))?,
        })
    }
}

/// `G = sigmoid([M; H_bar] W_s) * tanh([M; H_bar] W_t)` where `H_bar` attends
/// from every token over the real nodes.
pub fn gated_attention(tape: &mut Tape, p: &BoundParams, params: &GateParams, m: Var, h: Var, node_mask: &[bool]) -> Result<Var> {
    if !node_mask.iter().any(|&r| r) {
        return Err(Error::Graph("gated attention needs at least one real node".into()));
    }
    let a = tape.matmul(m, p.var(params.w_m))?;
    let a = tape.relu(a)?;
    let b = tape.matmul(h, p.var(params.w_m_node))?;
    let b = tape.relu(b)?;
    let bt = tape.transpose(b)?;
    let c = tape.matmul(a, bt)?;
    let weights = tape.masked_softmax(c, node_mask)?;
    let h_bar = tape.matmul(weights, h)?;
    let x = tape.concat_cols(&[m, h_bar])?;
    let s = tape.matmul(x, p.var(params.w_s))?;
    let s = tape.sigmoid(s)?;
    let t = tape.matmul(x, p.var(params.w_t))?;
    let t = tape.tanh(t)?;
    Ok(tape.mul(s, t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;

    #[test]
    fn self_only_neighbourhood() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reg = ParamRegistry::new();
        let params = GatParams::new(&mut reg, 3, 1, 0.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = reg.bind(&mut tape);
        let h = tape.constant(Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
        let adj = Arc::new(Adjacency { neighbors: vec![vec![(0, 7)]] });
        let (out, agg) = gat_layer(&mut tape, &p, &params.layers[0], h, &adj).unwrap();
        assert_eq!(tape.attention_weights(agg).unwrap(), &[vec![1.0]]);
        let w = reg.get(params.layers[0].w);
        for k in 0..3 {
            let z: f64 = (0..3).map(|j| [0.5, -1.0, 2.0][j] * w.at(j, k)).sum();
            let want = if z > 0.0 { z } else { LEAKY_SLOPE * z };
            assert!((tape.value(out).at(0, k) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_layers_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reg = ParamRegistry::new();
        assert!(GatParams::new(&mut reg, 3, 0, 0.0, &mut rng).is_err());
    }
}

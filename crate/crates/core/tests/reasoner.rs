//! Graph attention and gated fusion against a dense reference.

mod common;

use std::sync::Arc;

use common::random_case;
use hgn::graph::{build_graph, Caps, HierGraph};
use hgn::numerics::{grad_check_report, Adjacency, ParamRegistry, Tape, Tensor, LEAKY_SLOPE};
use hgn::reasoner::{gat_layer, gated_attention, reason, GateParams, GatParams};
use hgn::selector::{select_paragraphs, SelectionMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn random_graph(seed: u64) -> HierGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let (corpus, ex, ranker) = random_case(seed, 5);
    let sel = select_paragraphs(&ex, &corpus, &ranker, SelectionMode::Threshold(-1.0));
    let caps = Caps { n_p: rng.gen_range(1..5), n_s: rng.gen_range(1..10), n_e: rng.gen_range(1..8) };
    build_graph(&ex, &sel, &corpus, caps).unwrap()
}

/// Random features on real rows, zeros on padding rows.
fn features(graph: &HierGraph, dn: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let g = graph.nodes.len();
    let data = (0..g * dn)
        .map(|k| if graph.mask[k / dn] { rng.gen_range(-1.0..1.0) } else { 0.0 })
        .collect();
    Tensor::matrix(g, dn, data).unwrap()
}

/// `O(g^2)` evaluation over the edge list: attention weights per node and `h'`.
fn dense_gat(h: &Tensor, w: &Tensor, edges: &Tensor, graph: &HierGraph) -> (Vec<Vec<(usize, f64)>>, Vec<Vec<f64>>) {
    let (g, dn) = (h.rows(), h.cols());
    let mut etype = vec![vec![0usize; g]; g];
    for e in &graph.edges {
        etype[e.src][e.dst] = e.etype as usize;
    }
    let hw: Vec<Vec<f64>> = (0..g)
        .map(|j| (0..dn).map(|k| (0..dn).map(|l| h.at(j, l) * w.at(l, k)).sum()).collect())
        .collect();
    let mut alphas = Vec::with_capacity(g);
    let mut out = vec![vec![0.0; dn]; g];
    for i in 0..g {
        let scores: Vec<(usize, f64)> = (0..g)
            .filter(|&j| etype[i][j] > 0)
            .map(|j| {
                let t = etype[i][j] - 1;
                let z: f64 = (0..dn).map(|k| h.at(i, k) * edges.at(t, k) + h.at(j, k) * edges.at(t, dn + k)).sum();
                (j, leaky(z))
            })
            .collect();
        if scores.is_empty() {
            alphas.push(vec![]);
            continue;
        }
        let mx = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s.1 - mx).exp()).sum();
        let a: Vec<(usize, f64)> = scores.iter().map(|&(j, s)| (j, (s - mx).exp() / z)).collect();
        for k in 0..dn {
            out[i][k] = leaky(a.iter().map(|&(j, a)| a * hw[j][k]).sum());
        }
        alphas.push(a);
    }
    (alphas, out)
}

fn gat_setup(dn: usize, layers: usize, seed: u64) -> (ParamRegistry, GatParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = ParamRegistry::new();
    let params = GatParams::new(&mut reg, dn, layers, 0.0, &mut rng).unwrap();
    (reg, params)
}

#[test]
fn sparse_layer_matches_dense_reference_on_50_graphs() {
    let dn = 6;
    for seed in 0..50 {
        let graph = random_graph(seed);
        let (reg, params) = gat_setup(dn, 1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let h0 = features(&graph, dn, &mut rng);
        let mut tape = Tape::new();
        let p = reg.bind(&mut tape);
        let h = tape.constant(h0.clone());
        let (out, agg) = gat_layer(&mut tape, &p, &params.layers[0], h, &graph.adjacency()).unwrap();
        let layer = params.layers[0];
        let (alphas, want) = dense_gat(&h0, reg.get(layer.w), reg.get(layer.edges), &graph);
        let got = tape.value(out);
        for i in 0..graph.nodes.len() {
            for k in 0..dn {
                assert!((got.at(i, k) - want[i][k]).abs() <= 1e-12, "seed {seed} node {i}");
            }
        }
        let weights = tape.attention_weights(agg).unwrap();
        let adj = graph.adjacency();
        for i in 0..graph.nodes.len() {
            assert_eq!(weights[i].len(), alphas[i].len());
            for (&(j, _), w) in adj.neighbors[i].iter().zip(&weights[i]) {
                let a = alphas[i].iter().find(|x| x.0 == j).unwrap().1;
                assert!((w - a).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn attention_normalizes_over_real_neighbourhoods() {
    for seed in 0..50 {
        let graph = random_graph(seed);
        let (reg, params) = gat_setup(5, 1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let p = reg.bind(&mut tape);
        let h = tape.constant(features(&graph, 5, &mut rng));
        let adj = graph.adjacency();
        let (_, agg) = gat_layer(&mut tape, &p, &params.layers[0], h, &adj).unwrap();
        let weights = tape.attention_weights(agg).unwrap();
        for (i, row) in weights.iter().enumerate() {
            if graph.mask[i] {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                // Padding nodes never appear as neighbours, so they receive no mass.
                assert!(adj.neighbors[i].iter().all(|&(j, _)| graph.mask[j]));
            } else {
                assert!(row.is_empty());
            }
        }
    }
}

#[test]
fn identical_neighbours_share_attention() {
    let (reg, params) = gat_setup(3, 1, 4);
    let mut tape = Tape::new();
    let p = reg.bind(&mut tape);
    let h = tape.constant(Tensor::from_rows(&[vec![0.3, -0.2, 0.9], vec![1.0, 0.5, -0.4], vec![1.0, 0.5, -0.4]]).unwrap());
    let adj = Arc::new(Adjacency { neighbors: vec![vec![(1, 2), (2, 2)], vec![(1, 7)], vec![(2, 7)]] });
    let (_, agg) = gat_layer(&mut tape, &p, &params.layers[0], h, &adj).unwrap();
    assert_eq!(tape.attention_weights(agg).unwrap()[0], vec![0.5, 0.5]);
}

#[test]
fn four_node_fixture_by_hand() {
    // Star around node 0 with two edge types, plus self-loops.
    let mut reg = ParamRegistry::new();
    let w = reg.register("w", Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.5, 2.0]]).unwrap()).unwrap();
    let mut e = Tensor::zeros(&[8, 4]);
    e.data_mut()[4..8].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]); // type 2
    e.data_mut()[8..12].copy_from_slice(&[0.0, 1.0, -1.0, 0.0]); // type 3
    e.data_mut()[28..32].copy_from_slice(&[0.5, 0.5, 0.5, 0.5]); // self-loop
    let edges = reg.register("e", e).unwrap();
    let layer = hgn::reasoner::GatLayer { w, edges };
    let h0 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 1.0], vec![2.0, -1.0]]).unwrap();
    let adj = Arc::new(Adjacency {
        neighbors: vec![vec![(0, 7), (1, 1), (2, 2), (3, 2)], vec![(0, 1), (1, 7)], vec![(0, 2), (2, 7)], vec![(0, 2), (3, 7)]],
    });
    let mut tape = Tape::new();
    let p = reg.bind(&mut tape);
    let h = tape.constant(h0);
    let (out, agg) = gat_layer(&mut tape, &p, &layer, h, &adj).unwrap();

    // Node 0: raw scores [h0;hj].w_t, then leaky relu.
    // self: 0.5*(1+0) + 0.5*(1+0) = 1; j=1,t=2: 1 + 1 = 2; j=2,t=3: 0 + 1 = 1; j=3,t=3: 0 - 2 = -2 -> -0.4
    let s = [1.0f64, 2.0, 1.0, -0.4];
    let z: f64 = s.iter().map(|x| x.exp()).sum();
    let a: Vec<f64> = s.iter().map(|x| x.exp() / z).collect();
    let got = &tape.attention_weights(agg).unwrap()[0];
    for k in 0..4 {
        assert!((got[k] - a[k]).abs() < 1e-12);
    }
    // h W rows: [1, 0.5], [-0.5, 2], [-1.5, 1.5], [2.5, -1]
    let hw = [[1.0, 0.5], [-0.5, 2.0], [-1.5, 1.5], [2.5, -1.0]];
    for k in 0..2 {
        let v: f64 = (0..4).map(|j| a[j] * hw[j][k]).sum();
        assert!((tape.value(out).at(0, k) - leaky(v)).abs() < 1e-12);
    }
}

#[test]
fn single_layer_reason_equals_gat_layer_and_views_reassemble() {
    let graph = random_graph(3);
    let dn = 4;
    let (reg, params) = gat_setup(dn, 1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h0 = features(&graph, dn, &mut rng);
    let mut tape = Tape::new();
    let p = reg.bind(&mut tape);
    let h = tape.constant(h0);
    let (r, _) = reason(&mut tape, &p, &params, h, &graph, None).unwrap();
    let (single, _) = gat_layer(&mut tape, &p, &params.layers[0], h, &graph.adjacency()).unwrap();
    assert_eq!(tape.value(r.h), tape.value(single));
    let joined = tape.concat_rows(&[r.question, r.paragraphs, r.sentences, r.entities]).unwrap();
    assert_eq!(tape.value(joined), tape.value(r.h));
    for i in 0..graph.nodes.len() {
        if !graph.mask[i] {
            assert!(tape.value(r.h).row_slice(i).iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn stacked_layers_pass_gradient_check() {
    let graph = random_graph(11);
    let dn = 3;
    let (reg, params) = gat_setup(dn, 2, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h0 = features(&graph, dn, &mut rng);
    let r = grad_check_report(
        |tape, p| {
            let h = tape.constant(h0.clone());
            let (r, _) = reason(tape, p, &params, h, &graph, None).map_err(common::numerics)?;
            tape.sum(r.h)
        },
        &reg,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn permuting_edge_vectors_changes_output() {
    let graph = random_graph(5);
    assert!(graph.edges.iter().map(|e| e.etype).collect::<std::collections::BTreeSet<_>>().len() >= 2);
    let dn = 4;
    let (mut reg, params) = gat_setup(dn, 1, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h0 = features(&graph, dn, &mut rng);
    let run = |reg: &ParamRegistry| {
        let mut tape = Tape::new();
        let p = reg.bind(&mut tape);
        let h = tape.constant(h0.clone());
        let (r, _) = reason(&mut tape, &p, &params, h, &graph, None).unwrap();
        tape.value(r.h).clone()
    };
    let before = run(&reg);
    let e = reg.get_mut(params.layers[0].edges);
    let rows: Vec<Vec<f64>> = (0..8).map(|t| e.row_slice(t).to_vec()).collect();
    let width = rows[0].len();
    for t in 0..8 {
        e.data_mut()[t * width..(t + 1) * width].copy_from_slice(&rows[(t + 1) % 8]);
    }
    assert!(run(&reg).max_abs_diff(&before) > 1e-6);
}

#[test]
fn one_layer_only_reads_neighbours() {
    for seed in [1u64, 8, 21] {
        let graph = random_graph(seed);
        let dn = 3;
        let (reg, params) = gat_setup(dn, 1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h0 = features(&graph, dn, &mut rng);
        let run = |h0: &Tensor| {
            let mut tape = Tape::new();
            let p = reg.bind(&mut tape);
            let h = tape.constant(h0.clone());
            let (r, _) = reason(&mut tape, &p, &params, h, &graph, None).unwrap();
            tape.value(r.h).clone()
        };
        let base = run(&h0);
        let adj = graph.adjacency();
        for v in (0..graph.nodes.len()).filter(|&v| graph.mask[v]) {
            let mut h1 = h0.clone();
            for k in 0..dn {
                h1.data_mut()[v * dn + k] += 0.7;
            }
            let out = run(&h1);
            for u in (0..graph.nodes.len()).filter(|&u| graph.mask[u]) {
                let changed = base.row_slice(u) != out.row_slice(u);
                let linked = adj.neighbors[u].iter().any(|&(j, _)| j == v);
                assert!(!changed || linked, "seed {seed}: node {u} moved when {v} changed");
                assert!(changed || !linked, "seed {seed}: node {u} ignored neighbour {v}");
            }
        }
    }
}

fn gate_setup(d: usize, dn: usize, seed: u64) -> (ParamRegistry, GateParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = ParamRegistry::new();
    let gate = GateParams::new(&mut reg, d, dn, &mut rng).unwrap();
    (reg, gate)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn gate_ignores_padding_nodes_and_stays_bounded() {
    let (d, dn, g) = (2, 4, 6);
    let (reg, gate) = gate_setup(d, dn, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m0 = random_matrix(5, 2 * d, &mut rng);
    let mask = [true, true, false, true, false, false];
    let mut h0 = random_matrix(g, dn, &mut rng);
    for i in (0..g).filter(|&i| !mask[i]) {
        h0.data_mut()[i * dn..(i + 1) * dn].fill(0.0);
    }
    let run = |h0: &Tensor| {
        let mut tape = Tape::new();
        let p = reg.bind(&mut tape);
        let m = tape.constant(m0.clone());
        let h = tape.constant(h0.clone());
        let out = gated_attention(&mut tape, &p, &gate, m, h, &mask).unwrap();
        tape.value(out).clone()
    };
    let clean = run(&h0);
    let mut noisy = h0.clone();
    for i in (0..g).filter(|&i| !mask[i]) {
        noisy.data_mut()[i * dn..(i + 1) * dn].fill(37.0);
    }
    // Exactly zero weight on padding nodes: garbage there changes nothing.
    assert_eq!(run(&noisy), clean);
    assert_eq!(clean.dims().unwrap(), (5, 2 * d + dn));
    assert!(clean.data().iter().all(|x| x.abs() < 1.0));
}

#[test]
fn single_real_node_is_copied_to_every_token() {
    let (d, dn) = (2, 4);
    let (mut reg, gate) = gate_setup(d, dn, 9);
    // With W_s = 0 the gate is 1/2 and G = tanh([M; H_bar] W_t) / 2, so the
    // node half of the input can be read back through an identity block.
    let x = 2 * d + dn;
    reg.get_mut(gate.w_s).data_mut().fill(0.0);
    let wt = reg.get_mut(gate.w_t);
    wt.data_mut().fill(0.0);
    for k in 0..x {
        wt.data_mut()[k * x + k] = 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m0 = random_matrix(3, 2 * d, &mut rng);
    let mut h0 = Tensor::zeros(&[3, dn]);
    let node = [0.4, -0.3, 0.8, 0.1];
    h0.data_mut()[dn..2 * dn].copy_from_slice(&node);
    let mut tape = Tape::new();
    let p = reg.bind(&mut tape);
    let m = tape.constant(m0);
    let h = tape.constant(h0);
    let out = gated_attention(&mut tape, &p, &gate, m, h, &[false, true, false]).unwrap();
    let g = tape.value(out);
    for r in 0..3 {
        for k in 0..dn {
            assert!((g.at(r, 2 * d + k) - 0.5 * node[k].tanh()).abs() < 1e-12);
        }
    }
    assert!(gated_attention(&mut tape, &p, &gate, m, h, &[false; 3]).is_err());
}

#[test]
fn gate_gradient_check() {
    let (d, dn) = (2, 4);
    let (reg, gate) = gate_setup(d, dn, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m0 = random_matrix(4, 2 * d, &mut rng);
    let h0 = random_matrix(3, dn, &mut rng);
    let r = grad_check_report(
        |tape, p| {
            let m = tape.constant(m0.clone());
            let h = tape.constant(h0.clone());
            let g = gated_attention(tape, p, &gate, m, h, &[true, true, true]).map_err(common::numerics)?;
            tape.sum(g)
        },
        &reg,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

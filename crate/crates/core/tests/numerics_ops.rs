use std::sync::Arc;

use hgn::numerics::{grad_check, Adjacency, BoundParams, NumericsError, ParamRegistry, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces an arbitrary tensor to a scalar through a fixed random weighting so
/// every output element carries a distinct adjoint.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var, NumericsError> {
    let (r, c) = tape.value(x).dims()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(Tensor::new(shape, rand_tensor(&mut rng, r, c).into_data())?);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn check<F>(seed: u64, shapes: &[(usize, usize)], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = ParamRegistry::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| reg.register(format!("x{i}"), rand_tensor(&mut rng, r, c)).unwrap())
        .collect();
    grad_check(
        |tape: &mut Tape, b: &BoundParams| {
            let xs: Vec<Var> = ids.iter().map(|&id| b.var(id)).collect();
            let y = f(tape, &xs)?;
            weighted_sum(tape, y, seed)
        },
        &reg,
        1e-5,
    )
    .unwrap()
}

const TOL: f64 = 1e-4;

#[test]
fn masked_softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(&[3.0, 3.0, 3.0]));
    let y = tape.masked_softmax(x, &[true, true, true]).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::row(&[5.0, -2.0, 9.0]));
    let y = tape.masked_softmax(x, &[false, false, true]).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn masked_softmax_rejects_all_masked_row() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let err = tape.masked_softmax(x, &[true, false, false, false]).unwrap_err();
    assert_eq!(err, NumericsError::AllMasked { op: "masked_softmax", row: 1 });
}

#[test]
fn leaky_relu_definition() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(&[-1.0, 2.0]));
    let y = tape.leaky_relu(x, 0.2).unwrap();
    assert_eq!(tape.value(y).data(), &[-0.2, 2.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        NumericsError::ShapeMismatch { op: "matmul", left: vec![2, 3], right: vec![2, 3] }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn quadratic_grad_check_is_exact() {
    let mut reg = ParamRegistry::new();
    let x = reg.register("x", Tensor::row(&[1.0, 2.0])).unwrap();
    let err = grad_check(
        |tape: &mut Tape, b: &BoundParams| {
            let xt = tape.transpose(b.var(x))?;
            let xx = tape.matmul(b.var(x), xt)?;
            tape.sum(xx)
        },
        &reg,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_rejects_bad_eps_and_non_finite() {
    let mut reg = ParamRegistry::new();
    let x = reg.register("x", Tensor::row(&[1.0])).unwrap();
    let f = |tape: &mut Tape, b: &BoundParams| tape.sum(b.var(x));
    assert!(grad_check(f, &reg, 0.1).is_err());
    assert!(grad_check(f, &reg, 0.0).is_err());
    let overflow = |tape: &mut Tape, b: &BoundParams| {
        let big = tape.scale(b.var(x), 1e308)?;
        let big = tape.scale(big, 10.0)?;
        tape.sum(big)
    };
    assert!(matches!(grad_check(overflow, &reg, 1e-5), Err(NumericsError::NonFinite { .. })));
}

#[test]
fn ops_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let a = tape.variable(rand_tensor(&mut rng, 5, 4));
        let b = tape.variable(rand_tensor(&mut rng, 4, 8));
        let m = tape.matmul(a, b).unwrap();
        let h = tape.slice_cols(m, 0, 2).unwrap();
        let r = tape.lstm_recurrence(m, h, false);
        assert!(r.is_err());
        let w = tape.variable(rand_tensor(&mut rng, 2, 8));
        let r = tape.lstm_recurrence(m, w, true).unwrap();
        let s = tape.masked_softmax(r, &[true, false]).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.value(r).clone(), g.get(a).cloned(), g.get(w).cloned())
    };
    assert_eq!(run(), run());
}

#[test]
fn masked_softmax_rows_sum_to_one() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.gen_range(1..6), rng.gen_range(1..9));
        let mut mask: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.6)).collect();
        for i in 0..r {
            mask[i * c + rng.gen_range(0..c)] = true;
        }
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, r, c).clone());
        let y = tape.masked_softmax(x, &mask).unwrap();
        let v = tape.value(y);
        for i in 0..r {
            let s: f64 = v.row_slice(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            for j in 0..c {
                if !mask[i * c + j] {
                    assert_eq!(v.at(i, j), 0.0);
                }
            }
        }
    }
}

#[test]
fn op_gradients_match_central_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (r, k, c) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let mask: Vec<bool> = {
            let mut m: Vec<bool> = (0..c).map(|_| rng.gen_bool(0.6)).collect();
            m[rng.gen_range(0..c)] = true;
            m
        };
        let cases: Vec<(&str, f64)> = vec![
            ("matmul", check(seed, &[(r, k), (k, c)], |t, x| t.matmul(x[0], x[1]))),
            ("transpose", check(seed, &[(r, c)], |t, x| t.transpose(x[0]))),
            ("add", check(seed, &[(r, c), (r, c)], |t, x| t.add(x[0], x[1]))),
            ("add_row", check(seed, &[(r, c), (1, c)], |t, x| t.add_row(x[0], x[1]))),
            ("add_col", check(seed, &[(r, c), (r, 1)], |t, x| t.add_col(x[0], x[1]))),
            ("mul", check(seed, &[(r, c), (r, c)], |t, x| t.mul(x[0], x[1]))),
            ("mul_row", check(seed, &[(r, c), (1, c)], |t, x| t.mul_row(x[0], x[1]))),
            ("scale", check(seed, &[(r, c)], |t, x| t.scale(x[0], -1.7))),
            (
                "mul_const",
                check(seed, &[(r, c)], |t, x| t.mul_const(x[0], Tensor::full(&[r, c], 0.5))),
            ),
            ("concat_cols", check(seed, &[(r, k), (r, c)], |t, x| t.concat_cols(&[x[0], x[1], x[0]]))),
            ("concat_rows", check(seed, &[(k, c), (r, c)], |t, x| t.concat_rows(&[x[1], x[0]]))),
            ("slice_cols", check(seed, &[(r, c + 2)], |t, x| t.slice_cols(x[0], 1, c + 1))),
            ("slice_rows", check(seed, &[(r + 2, c)], |t, x| t.slice_rows(x[0], 1, r + 1))),
            ("gather_rows", check(seed, &[(r, c)], |t, x| t.gather_rows(x[0], &[0, r - 1, 0]))),
            ("sigmoid", check(seed, &[(r, c)], |t, x| t.sigmoid(x[0]))),
            ("tanh", check(seed, &[(r, c)], |t, x| t.tanh(x[0]))),
            ("relu", check(seed, &[(r, c)], |t, x| t.relu(x[0]))),
            ("leaky_relu", check(seed, &[(r, c)], |t, x| t.leaky_relu(x[0], 0.2))),
            ("masked_softmax", check(seed, &[(r, c)], |t, x| t.masked_softmax(x[0], &mask))),
            ("max_pool_rows", check(seed, &[(r, c)], |t, x| t.max_pool_rows(x[0]))),
            (
                "cross_entropy",
                check(seed, &[(1, c)], |t, x| {
                    let target = mask.iter().position(|&m| m).unwrap();
                    t.cross_entropy_with_logits(x[0], target, &mask)
                }),
            ),
            (
                "bce_with_logits",
                check(seed, &[(1, c)], |t, x| {
                    let targets: Vec<f64> = (0..c).map(|i| (i % 2) as f64).collect();
                    t.bce_with_logits(x[0], &targets, &mask)
                }),
            ),
            (
                "lstm_forward",
                check(seed, &[(r, 4 * k), (k, 4 * k)], |t, x| t.lstm_recurrence(x[0], x[1], false)),
            ),
            (
                "lstm_reverse",
                check(seed, &[(r, 4 * k), (k, 4 * k)], |t, x| t.lstm_recurrence(x[0], x[1], true)),
            ),
        ];
        for (name, err) in cases {
            assert!(err < TOL, "seed {seed}: {name} rel error {err}");
        }
    }
}

fn random_adjacency(rng: &mut ChaCha8Rng, g: usize, types: usize) -> Adjacency {
    let neighbors = (0..g)
        .map(|i| {
            if rng.gen_bool(0.15) {
                return Vec::new();
            }
            let mut n: Vec<(usize, usize)> = vec![(i, types - 1)];
            for j in 0..g {
                if j != i && rng.gen_bool(0.4) {
                    n.push((j, rng.gen_range(0..types)));
                }
            }
            n
        })
        .collect();
    Adjacency { neighbors }
}

#[test]
fn neighbor_attention_gradients_match_central_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + seed);
        let (g, types, d) = (rng.gen_range(2..7), rng.gen_range(1..4), rng.gen_range(1..4));
        let adj = Arc::new(random_adjacency(&mut rng, g, types));
        let err = check(seed, &[(g, types), (g, types), (g, d)], |t, x| {
            t.neighbor_attention(x[0], x[1], x[2], adj.clone(), 0.2)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lstm_reverse_equals_forward_on_reversed_input(seed in 0u64..10_000, n in 1usize..7, h in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pre = rand_tensor(&mut rng, n, 4 * h);
        let wh = rand_tensor(&mut rng, h, 4 * h);
        let reversed: Vec<Vec<f64>> = (0..n).rev().map(|t| pre.row_slice(t).to_vec()).collect();
        let mut tape = Tape::new();
        let p = tape.constant(pre);
        let pr = tape.constant(Tensor::from_rows(&reversed).unwrap());
        let w = tape.constant(wh);
        let back = tape.lstm_recurrence(p, w, true).unwrap();
        let fwd = tape.lstm_recurrence(pr, w, false).unwrap();
        for t in 0..n {
            prop_assert_eq!(tape.value(back).row_slice(t), tape.value(fwd).row_slice(n - 1 - t));
        }
    }
}

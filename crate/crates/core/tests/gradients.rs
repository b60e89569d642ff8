//! Finite-difference checks of the full model and of each stage.

mod common;

use std::time::Instant;

use common::{fixture_model, numerics, tiny_config};
use hgn::corpus::Answer;
use hgn::numerics::{grad_check_report, GradCheckReport};

fn check_loss(seed: u64) -> GradCheckReport {
    let (model, inst, _) = fixture_model(tiny_config(), Answer::Span("richmond".into()), seed);
    assert!(inst.gold.entity.is_some() && inst.gold.span.is_some());
    grad_check_report(
        |tape, p| model.loss(tape, p, &inst, None).map(|l| l.total).map_err(numerics),
        &model.params,
        1e-5,
    )
    .unwrap()
}

#[test]
fn joint_loss_gradients_all_parameters() {
    let t = Instant::now();
    for seed in 0..10 {
        let r = check_loss(seed);
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
    eprintln!("10 seeds in {:?}", t.elapsed());
}

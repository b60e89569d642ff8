//! Metric aggregation on hand-labelled fixtures and metric properties.

use std::collections::{BTreeMap, BTreeSet};

use hgn::corpus::{Answer, QaExample};
use hgn::eval::{answer_metrics, joint_metrics, score, sp_metrics, Metrics, Predictions, Prf};
use proptest::prelude::*;

fn facts(items: &[(&str, usize)]) -> BTreeSet<(String, usize)> {
    items.iter().map(|(t, i)| (t.to_string(), *i)).collect()
}

fn gold(id: &str, answer: Answer, sp: &[(&str, usize)], kind: &str) -> QaExample {
    QaExample {
        id: id.into(),
        question: vec!["q".into()],
        question_entities: vec![],
        answer,
        supporting_facts: facts(sp),
        gold_titles: BTreeSet::new(),
        kind: Some(kind.into()),
    }
}

fn fixture() -> (Vec<QaExample>, Predictions) {
    let golds = vec![
        gold("q1", Answer::Span("New York City".into()), &[("A", 0), ("B", 1)], "bridge"),
        gold("q2", Answer::Yes, &[("C", 0), ("D", 2)], "comp-yn"),
        gold("q3", Answer::Span("Paris".into()), &[("E", 1)], "bridge"),
    ];
    let answer = BTreeMap::from([
        ("q1".to_string(), "Greenwich Village, New York City".to_string()),
        ("q2".to_string(), "yes".to_string()),
        ("q3".to_string(), "London".to_string()),
    ]);
    let sp = BTreeMap::from([
        ("q1".to_string(), vec![("B".to_string(), 1), ("A".to_string(), 0)]),
        ("q2".to_string(), vec![("C".to_string(), 0)]),
        ("q3".to_string(), vec![("E".to_string(), 1), ("F".to_string(), 0)]),
    ]);
    (golds, Predictions { answer, sp })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn three_example_fixture() {
    // q1: answer P 3/5 R 1 F1 .75, facts exact, joint P 3/5 R 1.
    // q2: answer exact, facts P 1 R 1/2, joint F1 2/3.
    // q3: answer wrong, facts P 1/2 R 1, joint 0.
    let (golds, pred) = fixture();
    let r = score(&pred, &golds);
    let m = r.overall;
    assert!(close(m.ans.em, 1.0 / 3.0));
    assert!(close(m.ans.f1, (0.75 + 1.0) / 3.0));
    assert!(close(m.ans.precision, (0.6 + 1.0) / 3.0));
    assert!(close(m.ans.recall, 2.0 / 3.0));
    assert!(close(m.sp.em, 1.0 / 3.0));
    assert!(close(m.sp.f1, (1.0 + 2.0 / 3.0 + 2.0 / 3.0) / 3.0));
    assert!(close(m.joint.em, 0.0));
    assert!(close(m.joint.f1, (0.75 + 2.0 / 3.0) / 3.0));

    let bridge = r.by_type["bridge"];
    assert!(close(bridge.ans.f1, 0.375));
    assert!(close(bridge.sp.f1, 5.0 / 6.0));
    assert!(close(bridge.joint.f1, 0.375));
    let yn = r.by_type["comp-yn"];
    assert_eq!((yn.ans.em, yn.sp.em), (1.0, 0.0));
    assert!(close(yn.joint.f1, 2.0 / 3.0));
    assert_eq!(r.by_type.len(), 2);
}

#[test]
fn perfect_predictions_score_one() {
    let (golds, _) = fixture();
    let pred = Predictions {
        answer: golds.iter().map(|g| (g.id.clone(), g.answer.as_str().to_string())).collect(),
        sp: golds.iter().map(|g| (g.id.clone(), g.supporting_facts.iter().cloned().collect())).collect(),
    };
    let one = Prf { em: 1.0, f1: 1.0, precision: 1.0, recall: 1.0 };
    let r = score(&pred, &golds);
    assert_eq!(r.overall, Metrics { ans: one, sp: one, joint: one });
    assert!(r.by_type.values().all(|m| *m == Metrics { ans: one, sp: one, joint: one }));
}

#[test]
fn empty_predictions_score_zero() {
    let (golds, _) = fixture();
    let r = score(&Predictions::default(), &golds);
    assert_eq!(r.overall, Metrics::default());
}

#[test]
fn prediction_file_round_trip() {
    let (_, pred) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.json");
    pred.save(&path).unwrap();
    assert_eq!(Predictions::load(&path).unwrap(), pred);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["sp"]["q1"][0], serde_json::json!(["B", 1]));
    std::fs::write(&path, "{\"answer\": 3}").unwrap();
    assert!(matches!(Predictions::load(&path), Err(hgn::Error::Schema { .. })));
}

#[test]
fn answer_special_cases() {
    assert_eq!(answer_metrics("The Yes.", "yes").em, 1.0);
    let a = answer_metrics("noanswer", "no answer");
    assert_eq!((a.em, a.f1), (0.0, 0.0));
    let a = answer_metrics("", "Paris");
    assert_eq!((a.em, a.f1), (0.0, 0.0));
    let j = joint_metrics(&answer_metrics("x", "x"), &sp_metrics(&facts(&[("A", 0)]), &facts(&[("B", 0)])));
    assert_eq!((j.em, j.f1), (0.0, 0.0));
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["the", "a", "red", "Fox", "fox,", "hill", "yes", "no", "river", "7"]).prop_map(String::from)
}

fn phrase() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 0..6).prop_map(|w| w.join(" "))
}

fn fact_set() -> impl Strategy<Value = BTreeSet<(String, usize)>> {
    prop::collection::btree_set((prop::sample::select(vec!["A", "B", "C"]).prop_map(String::from), 0usize..3), 0..6)
}

fn in_unit(p: &Prf) -> bool {
    [p.em, p.f1, p.precision, p.recall].iter().all(|x| (0.0..=1.0).contains(x))
}

proptest! {
    #[test]
    fn answer_metrics_bounded(p in phrase(), g in phrase()) {
        let m = answer_metrics(&p, &g);
        prop_assert!(in_unit(&m));
        prop_assert!(m.em == 0.0 || m.em == 1.0);
    }

    #[test]
    fn sp_metrics_bounded_and_zero_iff_disjoint(p in fact_set(), g in fact_set()) {
        let m = sp_metrics(&p, &g);
        prop_assert!(in_unit(&m));
        prop_assert_eq!(m.f1 == 0.0, p.intersection(&g).next().is_none());
        prop_assert_eq!(m.em == 1.0, p == g);
    }

    #[test]
    fn joint_bounded(p in phrase(), g in phrase(), ps in fact_set(), gs in fact_set()) {
        let j = joint_metrics(&answer_metrics(&p, &g), &sp_metrics(&ps, &gs));
        prop_assert!(in_unit(&j));
    }

    #[test]
    fn score_ignores_fact_order(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let (golds, pred) = fixture();
        let mut shuffled = pred.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for v in shuffled.sp.values_mut() {
            v.shuffle(&mut rng);
        }
        prop_assert_eq!(score(&pred, &golds), score(&shuffled, &golds));
    }
}

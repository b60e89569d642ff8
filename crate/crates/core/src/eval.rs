//! Answer, supporting-fact and joint metrics in the form used by the
//! HotpotQA evaluation script.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::QaExample;
use crate::error::{Error, Result};

/// Lowercase, strip ASCII punctuation, drop the articles a/an/the and
/// collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub em: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn answer_metrics(pred: &str, gold: &str) -> Prf {
    let (p, g) = (normalize_answer(pred), normalize_answer(gold));
    let em = f64::from(u8::from(p == g));
    let special = ["yes", "no", "noanswer"];
    if (special.contains(&p.as_str()) || special.contains(&g.as_str())) && p != g {
        return Prf { em, ..Prf::default() };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in g.split_whitespace() {
        *counts.entry(t).or_default() += 1;
    }
    let mut same = 0;
    for t in p.split_whitespace() {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    if same == 0 {
        return Prf { em, ..Prf::default() };
    }
    let (np, ng) = (p.split_whitespace().count() as f64, g.split_whitespace().count() as f64);
    let same = same as f64;
    // 2PR/(P+R) written over counts, which rounds once.
    Prf { em, f1: 2.0 * same / (np + ng), precision: same / np, recall: same / ng }
}

pub fn sp_metrics(pred: &BTreeSet<(String, usize)>, gold: &BTreeSet<(String, usize)>) -> Prf {
    let tp = pred.intersection(gold).count() as f64;
    let fp = pred.len() as f64 - tp;
    let fn_ = gold.len() as f64 - tp;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
    Prf {
        em: f64::from(u8::from(fp + fn_ == 0.0)),
        f1,
        precision,
        recall,
    }
}

/// Joint precision and recall are products of the per-task values.
pub fn joint_metrics(ans: &Prf, sp: &Prf) -> Prf {
    let precision = ans.precision * sp.precision;
    let recall = ans.recall * sp.recall;
    Prf {
        em: ans.em * sp.em,
        f1: f1_of(precision, recall),
        precision,
        recall,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ans: Prf,
    pub sp: Prf,
    pub joint: Prf,
}

impl Metrics {
    fn add(&mut self, other: &Metrics) {
        for (a, b) in [(&mut self.ans, &other.ans), (&mut self.sp, &other.sp), (&mut self.joint, &other.joint)] {
            a.em += b.em;
            a.f1 += b.f1;
            a.precision += b.precision;
            a.recall += b.recall;
        }
    }

    fn scaled(mut self, k: f64) -> Metrics {
        for a in [&mut self.ans, &mut self.sp, &mut self.joint] {
            a.em *= k;
            a.f1 *= k;
            a.precision *= k;
            a.recall *= k;
        }
        self
    }
}

/// Prediction file: `{"answer": {qid: text}, "sp": {qid: [[title, idx], ..]}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub answer: BTreeMap<String, String>,
    pub sp: BTreeMap<String, Vec<(String, usize)>>,
}

impl Predictions {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::schema(path.display().to_string(), e.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("string keys serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(flatten)]
    pub overall: Metrics,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub by_type: BTreeMap<String, Metrics>,
}

/// Means over the gold examples; a missing prediction scores zero.
pub fn score(pred: &Predictions, gold: &[QaExample]) -> Report {
    let mut total = Metrics::default();
    let mut by_type: BTreeMap<String, (Metrics, usize)> = BTreeMap::new();
    for ex in gold {
        let ans = pred
            .answer
            .get(&ex.id)
            .map(|a| answer_metrics(a, ex.answer.as_str()))
            .unwrap_or_default();
        let sp = pred
            .sp
            .get(&ex.id)
            .map(|facts| sp_metrics(&facts.iter().cloned().collect(), &ex.supporting_facts))
            .unwrap_or_default();
        let m = Metrics { ans, sp, joint: joint_metrics(&ans, &sp) };
        total.add(&m);
        if let Some(kind) = &ex.kind {
            let e = by_type.entry(kind.clone()).or_default();
            e.0.add(&m);
            e.1 += 1;
        }
    }
    let n = gold.len().max(1) as f64;
    Report {
        overall: total.scaled(1.0 / n),
        by_type: by_type.into_iter().map(|(k, (m, c))| (k, m.scaled(1.0 / c as f64))).collect(),
    }
}

//! Two-step paragraph selection: a first hop from title matches (falling back
//! to entity matches, then to the single best-ranked paragraph), a second hop
//! along hyperlinks of the first-hop paragraphs, then a top-N trim.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{find_entity_mentions, find_title_mentions, Corpus, Paragraph, QaExample};
use crate::error::{Error, Result};

/// Most paragraphs the first hop may return.
pub const MAX_FIRST_HOP: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    TitleMatch,
    EntityMatch,
    RankerFallback,
    Hyperlink,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedParagraph {
    pub title: String,
    pub score: f64,
    pub hop: u8,
    pub provenance: Provenance,
}

/// Sentence `sentence` of `source` hyperlinks to paragraph `target`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkEdge {
    pub source: String,
    pub sentence: usize,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub paragraphs: Vec<RankedParagraph>,
    pub link_edges: Vec<LinkEdge>,
}

impl SelectionResult {
    pub fn titles(&self) -> Vec<&str> {
        self.paragraphs.iter().map(|p| p.title.as_str()).collect()
    }
}

/// Second-hop candidates reached through first-hop hyperlinks.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondHop {
    pub candidates: Vec<RankedParagraph>,
    pub link_edges: Vec<LinkEdge>,
    /// Hyperlinks whose target title is not in the corpus.
    pub dangling: usize,
}

/// Scores how likely a paragraph is to hold supporting facts for a question.
pub trait Ranker: Sync {
    /// Score in `[0, 1]`.
    fn score(&self, example: &QaExample, paragraph: &Paragraph) -> f64;
}

/// Lexical overlap: `(2 * title overlap + body overlap) / |question|`, capped
/// at 1, where an overlap counts distinct question tokens found in the title
/// or body (case-insensitive).
#[derive(Clone, Copy, Debug, Default)]
pub struct LexicalRanker;

impl Ranker for LexicalRanker {
    fn score(&self, example: &QaExample, paragraph: &Paragraph) -> f64 {
        if example.question.is_empty() {
            return 0.0;
        }
        let q: HashSet<String> = example.question.iter().map(|t| t.to_lowercase()).collect();
        let title: HashSet<String> = paragraph.title_tokens().into_iter().collect();
        let body: HashSet<String> = paragraph.sentences.iter().flatten().map(|t| t.to_lowercase()).collect();
        let t = q.iter().filter(|w| title.contains(*w)).count();
        let b = q.iter().filter(|w| body.contains(*w)).count();
        ((2 * t + b) as f64 / example.question.len() as f64).min(1.0)
    }
}

/// Scores read from a file of the form `{qid: {title: score}}`; pairs missing
/// from the file fall back to [`LexicalRanker`].
#[derive(Clone, Debug, Default)]
pub struct ScoreFileRanker {
    scores: HashMap<String, HashMap<String, f64>>,
}

impl ScoreFileRanker {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: HashMap<String, HashMap<String, f64>> =
            serde_json::from_str(&text).map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
        Self::from_scores(raw)
    }

    pub fn from_scores(raw: HashMap<String, HashMap<String, f64>>) -> Result<Self> {
        let mut scores = HashMap::new();
        for (qid, m) in raw {
            let mut inner = HashMap::new();
            for (title, s) in m {
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::schema(format!("scores[{qid}][{title}]"), "score outside [0, 1]"));
                }
                inner.insert(crate::corpus::normalize_title(&title), s);
            }
            scores.insert(qid, inner);
        }
        Ok(Self { scores })
    }
}

impl Ranker for ScoreFileRanker {
    fn score(&self, example: &QaExample, paragraph: &Paragraph) -> f64 {
        self.scores
            .get(&example.id)
            .and_then(|m| m.get(&crate::corpus::normalize_title(&paragraph.title)))
            .copied()
            .unwrap_or_else(|| LexicalRanker.score(example, paragraph))
    }
}

/// Scores for `paragraphs` in the given order.
pub fn rank(ranker: &dyn Ranker, example: &QaExample, paragraphs: &[&Paragraph]) -> Vec<f64> {
    paragraphs.iter().map(|p| ranker.score(example, p)).collect()
}

/// Sorts corpus indices by descending score, ties by corpus order, and keeps `k`.
fn top_k(
    ranker: &dyn Ranker,
    example: &QaExample,
    corpus: &Corpus,
    indices: impl IntoIterator<Item = usize>,
    k: usize,
    hop: u8,
    provenance: Provenance,
) -> Vec<RankedParagraph> {
    let mut scored: Vec<(usize, f64)> = indices
        .into_iter()
        .map(|i| (i, ranker.score(example, corpus.paragraph(i))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(k)
        .map(|(i, score)| RankedParagraph {
            title: corpus.paragraph(i).title.clone(),
            score,
            hop,
            provenance,
        })
        .collect()
}

pub fn select_first_hop(example: &QaExample, corpus: &Corpus, ranker: &dyn Ranker) -> Vec<RankedParagraph> {
    let titles = find_title_mentions(&example.question, corpus);
    if !titles.is_empty() {
        let idx = titles.iter().filter_map(|t| corpus.index_of(t));
        return top_k(ranker, example, corpus, idx, MAX_FIRST_HOP, 1, Provenance::TitleMatch);
    }
    let titles = find_entity_mentions(&example.question_entities, corpus);
    if !titles.is_empty() {
        let idx = titles.iter().filter_map(|t| corpus.index_of(t));
        return top_k(ranker, example, corpus, idx, MAX_FIRST_HOP, 1, Provenance::EntityMatch);
    }
    top_k(ranker, example, corpus, 0..corpus.len(), 1, 1, Provenance::RankerFallback)
}

/// Follows the hyperlinks of the first-hop paragraphs. Every resolvable link
/// yields a link edge (self-links excluded); targets outside the first hop
/// become ranked candidates.
pub fn expand_second_hop(
    example: &QaExample,
    first_hop: &[RankedParagraph],
    corpus: &Corpus,
    ranker: &dyn Ranker,
) -> SecondHop {
    let first: HashSet<usize> = first_hop.iter().filter_map(|p| corpus.index_of(&p.title)).collect();
    let mut candidates = Vec::new();
    let mut seen = HashSet::new();
    let mut link_edges = Vec::new();
    let mut edge_set = HashSet::new();
    let mut dangling = 0;
    for p in first_hop {
        let Some(src) = corpus.index_of(&p.title) else { continue };
        let para = corpus.paragraph(src);
        for link in &para.hyperlinks {
            let Some(dst) = corpus.index_of(&link.target) else {
                dangling += 1;
                continue;
            };
            if dst == src {
                continue;
            }
            let edge = LinkEdge {
                source: para.title.clone(),
                sentence: link.sentence,
                target: corpus.paragraph(dst).title.clone(),
            };
            if edge_set.insert(edge.clone()) {
                link_edges.push(edge);
            }
            if !first.contains(&dst) && seen.insert(dst) {
                candidates.push(dst);
            }
        }
    }
    let n = candidates.len();
    SecondHop {
        candidates: top_k(ranker, example, corpus, candidates, n, 2, Provenance::Hyperlink),
        link_edges,
        dangling,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// First-hop paragraphs only.
    FirstHop,
    /// First hop, filled with the best second-hop candidates up to `n` total.
    Top(usize),
    /// First hop plus every second-hop candidate scoring above the threshold.
    Threshold(f64),
}

impl Default for SelectionMode {
    fn default() -> Self {
        SelectionMode::Top(4)
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionMode::FirstHop => write!(f, "first-hop"),
            SelectionMode::Top(n) => write!(f, "top{n}"),
            SelectionMode::Threshold(t) => write!(f, "threshold({t})"),
        }
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    /// Accepts `first-hop`, `top<N>` and `threshold` (tau 0; see
    /// [`SelectionMode::with_tau`]).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first-hop" | "first_hop" => Ok(SelectionMode::FirstHop),
            "threshold" => Ok(SelectionMode::Threshold(0.0)),
            _ => s
                .strip_prefix("top")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n > 0)
                .map(SelectionMode::Top)
                .ok_or_else(|| Error::Config(format!("unknown selection mode `{s}`"))),
        }
    }
}

impl SelectionMode {
    pub fn with_tau(self, tau: f64) -> Self {
        match self {
            SelectionMode::Threshold(_) => SelectionMode::Threshold(tau),
            other => other,
        }
    }
}

pub fn select_paragraphs(
    example: &QaExample,
    corpus: &Corpus,
    ranker: &dyn Ranker,
    mode: SelectionMode,
) -> SelectionResult {
    let mut paragraphs = select_first_hop(example, corpus, ranker);
    if paragraphs.is_empty() {
        return SelectionResult {
            paragraphs,
            link_edges: Vec::new(),
        };
    }
    let second = expand_second_hop(example, &paragraphs, corpus, ranker);
    match mode {
        SelectionMode::FirstHop => {}
        SelectionMode::Top(n) => {
            let room = n.saturating_sub(paragraphs.len());
            paragraphs.extend(second.candidates.into_iter().take(room));
        }
        SelectionMode::Threshold(tau) => {
            paragraphs.extend(second.candidates.into_iter().filter(|c| c.score > tau));
        }
    }
    let chosen: HashSet<&str> = paragraphs.iter().map(|p| p.title.as_str()).collect();
    let link_edges = second
        .link_edges
        .into_iter()
        .filter(|e| chosen.contains(e.target.as_str()))
        .collect();
    SelectionResult { paragraphs, link_edges }
}

/// Micro-averaged selection quality against gold titles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub precision: f64,
    pub recall: f64,
    pub mean_paragraphs: f64,
}

/// `results[i]` is scored against `gold[i]`; counts are pooled over examples.
pub fn selection_stats(results: &[SelectionResult], gold: &[BTreeSet<String>]) -> SelectionStats {
    let (mut hit, mut selected, mut relevant) = (0usize, 0usize, 0usize);
    for (r, g) in results.iter().zip(gold) {
        let g: HashSet<String> = g.iter().map(|t| crate::corpus::normalize_title(t)).collect();
        hit += r
            .paragraphs
            .iter()
            .filter(|p| g.contains(&crate::corpus::normalize_title(&p.title)))
            .count();
        selected += r.paragraphs.len();
        relevant += g.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    SelectionStats {
        precision: ratio(hit, selected),
        recall: ratio(hit, relevant),
        mean_paragraphs: ratio(selected, results.len()),
    }
}

/// Plain-text table with one row per method: precision and recall as
/// percentages, then the mean number of selected paragraphs.
pub fn stats_table(rows: &[(String, SelectionStats)]) -> String {
    use std::fmt::Write;
    let mut out = format!("{:<24} {:>9} {:>9} {:>8}\n", "Method", "Precision", "Recall", "#Para.");
    for (name, s) in rows {
        let _ = writeln!(out, "{:<24} {:>9.2} {:>9.2} {:>8.2}", name, 100.0 * s.precision, 100.0 * s.recall, s.mean_paragraphs);
    }
    out
}

//! Annotated paragraphs and QA examples, loaded from pre-tokenized JSON.
//!
//! All spans are token offsets. Titles are matched case-insensitively and
//! must be unique after case folding.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hyperlink {
    pub sentence: usize,
    pub target: String,
}

/// Entity mention inside one sentence; `end` is exclusive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityMention {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Paragraph {
    pub title: String,
    pub sentences: Vec<Vec<String>>,
    pub hyperlinks: Vec<Hyperlink>,
    pub entities: Vec<EntityMention>,
}

impl Paragraph {
    pub fn title_tokens(&self) -> Vec<String> {
        tokenize_surface(&self.title)
    }
}

/// Entity span over the question tokens; `end` is exclusive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionEntity {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum Answer {
    Yes,
    No,
    Span(String),
}

impl From<String> for Answer {
    fn from(s: String) -> Self {
        match s.as_str() {
            "yes" => Answer::Yes,
            "no" => Answer::No,
            _ => Answer::Span(s),
        }
    }
}

impl From<Answer> for String {
    fn from(a: Answer) -> Self {
        a.as_str().to_string()
    }
}

impl Answer {
    pub fn as_str(&self) -> &str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
            Answer::Span(s) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaExample {
    pub id: String,
    pub question: Vec<String>,
    pub question_entities: Vec<QuestionEntity>,
    pub answer: Answer,
    pub supporting_facts: BTreeSet<(String, usize)>,
    pub gold_titles: BTreeSet<String>,
    /// Optional reasoning-type tag used for per-type score breakdowns.
    pub kind: Option<String>,
}

/// Case-folded key used for every title lookup.
pub fn normalize_title(title: &str) -> String {
    title.trim().to_lowercase()
}

/// Splits a surface string into case-folded tokens.
pub fn tokenize_surface(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn fold(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

/// Immutable, validated paragraph collection indexed by title.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    paragraphs: Vec<Paragraph>,
    by_title: HashMap<String, usize>,
    by_title_tokens: HashMap<Vec<String>, Vec<usize>>,
    max_title_len: usize,
    /// Case-folded body token -> paragraphs containing it (ascending, unique).
    postings: HashMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawDocument {
    title: String,
    sentences: Vec<Vec<String>>,
    #[serde(default)]
    hyperlinks: Vec<(usize, String)>,
    #[serde(default)]
    entities: Vec<(usize, usize, usize, String)>,
}

#[derive(Serialize, Deserialize)]
struct RawExample {
    id: String,
    question: Vec<String>,
    #[serde(default)]
    question_entities: Vec<(usize, usize, String)>,
    answer: String,
    #[serde(default)]
    supporting_facts: Vec<(String, usize)>,
    #[serde(default)]
    gold_titles: Vec<String>,
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path.display().to_string(), e.to_string()))
}

fn records<'a>(root: &'a Value, key: &str, ctx: &str) -> Result<&'a Vec<Value>> {
    root.get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::schema(ctx, format!("missing array field `{key}`")))
}

impl Paragraph {
    fn validate(&self, ctx: &str) -> Result<()> {
        if self.title.trim().is_empty() {
            return Err(Error::schema(ctx, "field `title` is empty"));
        }
        if self.sentences.is_empty() {
            return Err(Error::schema(ctx, "field `sentences` is empty"));
        }
        if let Some(i) = self.sentences.iter().position(Vec::is_empty) {
            return Err(Error::schema(ctx, format!("field `sentences`[{i}] has no tokens")));
        }
        for (k, link) in self.hyperlinks.iter().enumerate() {
            if link.sentence >= self.sentences.len() {
                return Err(Error::schema(
                    ctx,
                    format!("field `hyperlinks`[{k}]: sentence index {} out of range", link.sentence),
                ));
            }
        }
        for (k, e) in self.entities.iter().enumerate() {
            let Some(sent) = self.sentences.get(e.sentence) else {
                return Err(Error::schema(
                    ctx,
                    format!("field `entities`[{k}]: sentence index {} out of range", e.sentence),
                ));
            };
            if e.end <= e.start || e.end > sent.len() {
                return Err(Error::schema(
                    ctx,
                    format!("field `entities`[{k}]: span {}..{} invalid for sentence of {} tokens", e.start, e.end, sent.len()),
                ));
            }
        }
        Ok(())
    }

    fn to_raw(&self) -> RawDocument {
        RawDocument {
            title: self.title.clone(),
            sentences: self.sentences.clone(),
            hyperlinks: self.hyperlinks.iter().map(|h| (h.sentence, h.target.clone())).collect(),
            entities: self
                .entities
                .iter()
                .map(|e| (e.sentence, e.start, e.end, e.surface.clone()))
                .collect(),
        }
    }
}

impl Corpus {
    /// Validates and indexes `paragraphs`.
    pub fn new(paragraphs: Vec<Paragraph>) -> Result<Self> {
        let mut corpus = Corpus::default();
        for (i, p) in paragraphs.iter().enumerate() {
            p.validate(&format!("documents[{i}] ({})", p.title))?;
            let key = normalize_title(&p.title);
            if corpus.by_title.insert(key, i).is_some() {
                return Err(Error::DuplicateTitle(p.title.clone()));
            }
            let tt = p.title_tokens();
            corpus.max_title_len = corpus.max_title_len.max(tt.len());
            corpus.by_title_tokens.entry(tt).or_default().push(i);
            for tok in p.sentences.iter().flatten() {
                let list = corpus.postings.entry(tok.to_lowercase()).or_default();
                if list.last() != Some(&i) {
                    list.push(i);
                }
            }
        }
        corpus.paragraphs = paragraphs;
        Ok(corpus)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::schema("corpus", e.to_string()))?;
        Self::from_value(&root)
    }

    fn from_value(root: &Value) -> Result<Self> {
        let docs = records(root, "documents", "corpus")?;
        let mut paragraphs = Vec::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            let raw: RawDocument = serde_json::from_value(d.clone())
                .map_err(|e| Error::schema(format!("documents[{i}]"), e.to_string()))?;
            paragraphs.push(Paragraph {
                title: raw.title,
                sentences: raw.sentences,
                hyperlinks: raw
                    .hyperlinks
                    .into_iter()
                    .map(|(sentence, target)| Hyperlink { sentence, target })
                    .collect(),
                entities: raw
                    .entities
                    .into_iter()
                    .map(|(sentence, start, end, surface)| EntityMention {
                        sentence,
                        start,
                        end,
                        surface,
                    })
                    .collect(),
            });
        }
        Self::new(paragraphs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_value(&read_json(path)?).map_err(|e| match e {
            Error::Schema { context, message } => Error::schema(format!("{}: {context}", path.display()), message),
            other => other,
        })
    }

    pub fn to_json(&self) -> Value {
        let docs: Vec<RawDocument> = self.paragraphs.iter().map(Paragraph::to_raw).collect();
        serde_json::json!({ "documents": docs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_json()).expect("corpus serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    pub fn paragraphs(&self) -> &[Paragraph] {
        &self.paragraphs
    }

    pub fn paragraph(&self, index: usize) -> &Paragraph {
        &self.paragraphs[index]
    }

    /// Corpus position of a title (case-insensitive).
    pub fn index_of(&self, title: &str) -> Option<usize> {
        self.by_title.get(&normalize_title(title)).copied()
    }

    pub fn get(&self, title: &str) -> Option<&Paragraph> {
        self.index_of(title).map(|i| &self.paragraphs[i])
    }

    pub fn num_hyperlinks(&self) -> usize {
        self.paragraphs.iter().map(|p| p.hyperlinks.len()).sum()
    }

    /// Paragraphs whose body holds `tokens` contiguously inside one sentence.
    fn body_contains(&self, index: usize, tokens: &[String]) -> bool {
        self.paragraphs[index].sentences.iter().any(|s| {
            s.len() >= tokens.len()
                && s.windows(tokens.len())
                    .any(|w| w.iter().zip(tokens).all(|(a, b)| a.to_lowercase() == *b))
        })
    }
}

/// Titles whose token sequence occurs contiguously (case-insensitively) in the
/// question. A title occurrence lying inside an occurrence of a longer
/// matching title is ignored. Results are ordered by first occurrence, then
/// corpus order, without duplicates.
pub fn find_title_mentions(question: &[String], corpus: &Corpus) -> Vec<String> {
    let q = fold(question);
    // (start, len, corpus index)
    let mut hits: Vec<(usize, usize, usize)> = Vec::new();
    for start in 0..q.len() {
        let longest = corpus.max_title_len.min(q.len() - start);
        for len in 1..=longest {
            if let Some(ids) = corpus.by_title_tokens.get(&q[start..start + len]) {
                hits.extend(ids.iter().map(|&i| (start, len, i)));
            }
        }
    }
    let covered = |&(s, l, _): &(usize, usize, usize)| {
        hits.iter()
            .any(|&(s2, l2, _)| l2 > l && s2 <= s && s + l <= s2 + l2)
    };
    let mut kept: Vec<(usize, usize)> = hits
        .iter()
        .filter(|h| !covered(h))
        .map(|&(s, _, i)| (s, i))
        .collect();
    kept.sort_unstable();
    let mut seen = BTreeSet::new();
    kept.into_iter()
        .filter(|&(_, i)| seen.insert(i))
        .map(|(_, i)| corpus.paragraphs[i].title.clone())
        .collect()
}

/// Titles of paragraphs whose sentences contain any question-entity surface,
/// in corpus order without duplicates.
pub fn find_entity_mentions(entities: &[QuestionEntity], corpus: &Corpus) -> Vec<String> {
    let mut found = BTreeSet::new();
    for e in entities {
        let toks = tokenize_surface(&e.surface);
        let Some(first) = toks.first() else { continue };
        for &i in corpus.postings.get(first).map_or(&[][..], Vec::as_slice) {
            if !found.contains(&i) && corpus.body_contains(i, &toks) {
                found.insert(i);
            }
        }
    }
    found.into_iter().map(|i| corpus.paragraphs[i].title.clone()).collect()
}

impl QaExample {
    fn validate(&self, ctx: &str, corpus: Option<&Corpus>) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::schema(ctx, "field `id` is empty"));
        }
        if self.question.is_empty() {
            return Err(Error::schema(ctx, "field `question` is empty"));
        }
        if self.answer.as_str().trim().is_empty() {
            return Err(Error::schema(ctx, "field `answer` is empty"));
        }
        for (k, e) in self.question_entities.iter().enumerate() {
            if e.end <= e.start || e.end > self.question.len() {
                return Err(Error::schema(
                    ctx,
                    format!("field `question_entities`[{k}]: span {}..{} invalid", e.start, e.end),
                ));
            }
        }
        if let Some(corpus) = corpus {
            for (title, idx) in &self.supporting_facts {
                if let Some(p) = corpus.get(title) {
                    if *idx >= p.sentences.len() {
                        return Err(Error::schema(
                            ctx,
                            format!("field `supporting_facts`: `{title}` has no sentence {idx}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn to_raw(&self) -> RawExample {
        RawExample {
            id: self.id.clone(),
            question: self.question.clone(),
            question_entities: self
                .question_entities
                .iter()
                .map(|e| (e.start, e.end, e.surface.clone()))
                .collect(),
            answer: self.answer.as_str().to_string(),
            supporting_facts: self.supporting_facts.iter().cloned().collect(),
            gold_titles: self.gold_titles.iter().cloned().collect(),
            kind: self.kind.clone(),
        }
    }
}

fn examples_from_value(root: &Value, corpus: Option<&Corpus>) -> Result<Vec<QaExample>> {
    let recs = records(root, "examples", "qa")?;
    let mut out = Vec::with_capacity(recs.len());
    let mut ids = BTreeSet::new();
    for (i, r) in recs.iter().enumerate() {
        let ctx = format!("examples[{i}]");
        let raw: RawExample = serde_json::from_value(r.clone()).map_err(|e| Error::schema(&ctx, e.to_string()))?;
        let ex = QaExample {
            id: raw.id,
            question: raw.question,
            question_entities: raw
                .question_entities
                .into_iter()
                .map(|(start, end, surface)| QuestionEntity { start, end, surface })
                .collect(),
            answer: Answer::from(raw.answer),
            supporting_facts: raw.supporting_facts.into_iter().collect(),
            gold_titles: raw.gold_titles.into_iter().collect(),
            kind: raw.kind,
        };
        ex.validate(&format!("{ctx} ({})", ex.id), corpus)?;
        if !ids.insert(ex.id.clone()) {
            return Err(Error::schema(ctx, format!("duplicate id `{}`", ex.id)));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn examples_from_json_str(text: &str, corpus: Option<&Corpus>) -> Result<Vec<QaExample>> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::schema("qa", e.to_string()))?;
    examples_from_value(&root, corpus)
}

/// Loads HotpotQA-shaped examples, checking supporting facts against `corpus`
/// when one is given.
pub fn load_examples(path: impl AsRef<Path>, corpus: Option<&Corpus>) -> Result<Vec<QaExample>> {
    let path = path.as_ref();
    examples_from_value(&read_json(path)?, corpus).map_err(|e| match e {
        Error::Schema { context, message } => Error::schema(format!("{}: {context}", path.display()), message),
        other => other,
    })
}

pub fn examples_to_json(examples: &[QaExample]) -> Value {
    let raw: Vec<RawExample> = examples.iter().map(QaExample::to_raw).collect();
    serde_json::json!({ "examples": raw })
}

pub fn save_examples(path: impl AsRef<Path>, examples: &[QaExample]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&examples_to_json(examples)).expect("examples serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

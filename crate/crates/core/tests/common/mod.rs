//! Shared fixtures for integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use hgn::corpus::{Answer, Corpus, EntityMention, Hyperlink, Paragraph, QaExample, QuestionEntity};
use hgn::graph::{Caps, TypedEdge};
use hgn::model::{build_vocab, Instance, Model, ModelConfig};
use hgn::numerics::NumericsError;
use hgn::selector::{select_paragraphs, LexicalRanker, ScoreFileRanker, SelectionMode, SelectionResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Two linked paragraphs; the answer is an entity of the second.
pub fn two_paragraphs(answer: Answer) -> (Corpus, QaExample) {
    let p1 = Paragraph {
        title: "Big Stone Gap".into(),
        sentences: vec![toks("big stone gap is a film"), toks("it was shot in virginia")],
        hyperlinks: vec![Hyperlink { sentence: 1, target: "Virginia".into() }],
        entities: vec![
            EntityMention { sentence: 0, start: 0, end: 3, surface: "big stone gap".into() },
            EntityMention { sentence: 1, start: 4, end: 5, surface: "virginia".into() },
        ],
    };
    let p2 = Paragraph {
        title: "Virginia".into(),
        sentences: vec![toks("virginia is a state"), toks("its capital is richmond")],
        hyperlinks: vec![],
        entities: vec![
            EntityMention { sentence: 0, start: 0, end: 1, surface: "virginia".into() },
            EntityMention { sentence: 1, start: 3, end: 4, surface: "richmond".into() },
        ],
    };
    let corpus = Corpus::new(vec![p1, p2]).unwrap();
    let ex = QaExample {
        id: "fixture".into(),
        question: toks("capital of the state where big stone gap was shot"),
        question_entities: vec![QuestionEntity { start: 5, end: 8, surface: "big stone gap".into() }],
        answer,
        supporting_facts: BTreeSet::from([("Big Stone Gap".to_string(), 1), ("Virginia".to_string(), 1)]),
        gold_titles: BTreeSet::from(["Big Stone Gap".to_string(), "Virginia".to_string()]),
        kind: Some("bridge".into()),
    };
    (corpus, ex)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 3,
        model_dim: 4,
        lstm_dropout: 0.0,
        gnn_dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn fixture_model(config: ModelConfig, answer: Answer, seed: u64) -> (Model, Instance, QaExample) {
    let (corpus, ex) = two_paragraphs(answer);
    let vocab = build_vocab(&corpus, std::slice::from_ref(&ex));
    let sel = select_paragraphs(&ex, &corpus, &LexicalRanker, SelectionMode::Top(4));
    let inst = Instance::new(&ex, sel, &corpus, &vocab, &config).unwrap();
    (Model::new(config, vocab, seed).unwrap(), inst, ex)
}

pub fn numerics(e: hgn::Error) -> NumericsError {
    match e {
        hgn::Error::Numerics(n) => n,
        other => NumericsError::InvalidArgument(other.to_string()),
    }
}

pub const WORDS: [&str; 8] = ["red", "fox", "blue", "hill", "gap", "stone", "river", "oak"];

pub fn example(id: &str, q: &str) -> QaExample {
    QaExample {
        id: id.into(),
        question: toks(q),
        question_entities: vec![],
        answer: Answer::Span("x".into()),
        supporting_facts: BTreeSet::new(),
        gold_titles: BTreeSet::new(),
        kind: None,
    }
}

pub fn para(title: &str, sentences: &[&str]) -> Paragraph {
    Paragraph {
        title: title.into(),
        sentences: sentences.iter().map(|s| toks(s)).collect(),
        hyperlinks: vec![],
        entities: vec![],
    }
}

pub fn random_case(seed: u64, max_paragraphs: usize) -> (Corpus, QaExample, ScoreFileRanker) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word = |rng: &mut ChaCha8Rng| WORDS[rng.gen_range(0..WORDS.len())].to_string();
    let n = rng.gen_range(1..=max_paragraphs);
    let mut titles: Vec<String> = Vec::new();
    while titles.len() < n {
        let len = rng.gen_range(1..=2);
        let t: Vec<String> = (0..len).map(|_| word(&mut rng)).collect();
        let t = t.join(" ");
        let t = if rng.gen_bool(0.5) { t.to_uppercase() } else { t };
        if !titles.iter().any(|x| x.eq_ignore_ascii_case(&t)) {
            titles.push(t);
        }
    }
    let mut paragraphs = Vec::new();
    for title in &titles {
        let sentences: Vec<Vec<String>> = (0..rng.gen_range(1..=3))
            .map(|_| (0..rng.gen_range(1..=5)).map(|_| word(&mut rng)).collect())
            .collect();
        let mut hyperlinks = Vec::new();
        for _ in 0..rng.gen_range(0..=3) {
            let target = if rng.gen_bool(0.15) {
                "Nowhere".to_string()
            } else {
                titles[rng.gen_range(0..n)].clone()
            };
            hyperlinks.push(Hyperlink { sentence: rng.gen_range(0..sentences.len()), target });
        }
        let mut entities = Vec::new();
        for _ in 0..rng.gen_range(0..=3) {
            let s = rng.gen_range(0..sentences.len());
            let start = rng.gen_range(0..sentences[s].len());
            let end = rng.gen_range(start + 1..=sentences[s].len());
            entities.push(EntityMention { sentence: s, start, end, surface: sentences[s][start..end].join(" ") });
        }
        paragraphs.push(Paragraph { title: title.clone(), sentences, hyperlinks, entities });
    }
    let corpus = Corpus::new(paragraphs).unwrap();
    let question: Vec<String> = (0..rng.gen_range(2..=7)).map(|_| word(&mut rng)).collect();
    let mut ex = example("q", "x");
    ex.question = question;
    for _ in 0..rng.gen_range(0..=2) {
        let start = rng.gen_range(0..ex.question.len());
        let end = rng.gen_range(start + 1..=ex.question.len().min(start + 2));
        ex.question_entities.push(QuestionEntity { start, end, surface: ex.question[start..end].join(" ") });
    }
    let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
    let scores: HashMap<String, f64> = titles
        .iter()
        .map(|t| (t.clone(), levels[rng.gen_range(0..levels.len())]))
        .collect();
    let ranker = ScoreFileRanker::from_scores(HashMap::from([("q".to_string(), scores)])).unwrap();
    (corpus, ex, ranker)
}

#[derive(Clone, Debug, PartialEq)]
pub enum RefNode {
    Question,
    Paragraph(String),
    Sentence(String, usize),
    QuestionEntity,
    Entity(String, usize),
}

/// Edges of the hierarchical graph enumerated pairwise from node descriptions.
pub fn brute_edges(ex: &QaExample, sel: &SelectionResult, corpus: &Corpus, caps: Caps) -> BTreeSet<TypedEdge> {
    let mut slots: Vec<Option<RefNode>> = vec![None; caps.total()];
    slots[0] = Some(RefNode::Question);
    let kept: Vec<&str> = sel.paragraphs.iter().take(caps.n_p).map(|p| p.title.as_str()).collect();
    for (k, t) in kept.iter().enumerate() {
        slots[1 + k] = Some(RefNode::Paragraph(t.to_string()));
    }
    let mut sentences = Vec::new();
    for t in &kept {
        for si in 0..corpus.get(t).unwrap().sentences.len() {
            sentences.push((t.to_string(), si));
        }
    }
    sentences.truncate(caps.n_s);
    let mut ents: Vec<RefNode> = ex.question_entities.iter().map(|_| RefNode::QuestionEntity).collect();
    for (t, si) in &sentences {
        let mut m: Vec<(usize, usize)> = corpus
            .get(t)
            .unwrap()
            .entities
            .iter()
            .filter(|e| e.sentence == *si)
            .map(|e| (e.start, e.end))
            .collect();
        m.sort();
        ents.extend(m.into_iter().map(|_| RefNode::Entity(t.clone(), *si)));
    }
    for (k, (t, si)) in sentences.iter().enumerate() {
        slots[caps.sentence_offset() + k] = Some(RefNode::Sentence(t.clone(), *si));
    }
    for (k, e) in ents.into_iter().take(caps.n_e).enumerate() {
        slots[caps.entity_offset() + k] = Some(e);
    }
    let linked = |t: &str, si: usize, p: &str| {
        sel.link_edges.iter().any(|l| l.source == t && l.sentence == si && l.target == p)
    };
    let mut out = BTreeSet::new();
    for (u, a) in slots.iter().enumerate() {
        for (v, b) in slots.iter().enumerate() {
            let (Some(a), Some(b)) = (a, b) else { continue };
            use RefNode::*;
            let mut types = vec![];
            if u == v {
                types.push(8);
            }
            match (a, b) {
                (Question, Paragraph(_)) | (Paragraph(_), Question) => types.push(1),
                (Question, QuestionEntity) | (QuestionEntity, Question) => types.push(2),
                (Paragraph(p), Sentence(t, si)) | (Sentence(t, si), Paragraph(p)) => {
                    if p == t {
                        types.push(3);
                    }
                    if linked(t, *si, p) {
                        types.push(4);
                    }
                }
                (Paragraph(_), Paragraph(_)) if u != v => types.push(6),
                (Sentence(t1, s1), Sentence(t2, s2)) if t1 == t2 && s1.abs_diff(*s2) == 1 => types.push(7),
                _ => {}
            }
            if let (Sentence(t1, s1), Entity(t2, s2)) | (Entity(t2, s2), Sentence(t1, s1)) = (a, b) {
                if t1 == t2 && s1 == s2 {
                    types.push(5);
                }
            }
            out.extend(types.into_iter().map(|etype| TypedEdge { src: u, dst: v, etype }));
        }
    }
    out
}

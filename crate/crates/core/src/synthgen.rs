//! Deterministic generator of bridge-style multi-hop corpora.
//!
//! Each example owns a bridge paragraph A, whose title appears in the
//! question, and an answer paragraph B reached through a hyperlink in one of
//! A's sentences. B holds the answer next to the question's relation word.
//! The remaining paragraphs are distractors.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Answer, Corpus, EntityMention, Hyperlink, Paragraph, QaExample, QuestionEntity};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStyle {
    Span,
    YesNoMix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// Number of generated content words, split into title, entity,
    /// relation and filler pools.
    pub vocab_size: usize,
    pub num_examples: usize,
    pub docs_per_example: usize,
    pub sentences_per_doc: usize,
    pub entities_per_sentence: usize,
    pub answer_style: AnswerStyle,
    /// Share of yes/no questions under [`AnswerStyle::YesNoMix`].
    pub yes_no_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            vocab_size: 800,
            num_examples: 2200,
            docs_per_example: 10,
            sentences_per_doc: 3,
            entities_per_sentence: 1,
            answer_style: AnswerStyle::Span,
            yes_no_fraction: 0.2,
        }
    }
}

struct Pools {
    titles: Vec<String>,
    entities: Vec<String>,
    relations: Vec<String>,
    filler: Vec<String>,
}

const CONSONANTS: &[u8] = b"bdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

/// Distinct pronounceable four-letter word for each index.
fn word(i: usize) -> String {
    let syl = |k: usize| {
        let c = CONSONANTS[k / VOWELS.len() % CONSONANTS.len()] as char;
        let v = VOWELS[k % VOWELS.len()] as char;
        format!("{c}{v}")
    };
    let n = CONSONANTS.len() * VOWELS.len();
    let mut w = syl(i % n) + &syl(i / n % n);
    if i >= n * n {
        w.push_str(&syl(i / (n * n)));
    }
    w
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.docs_per_example < 2 {
            return bad(format!("docs_per_example must be at least 2, got {}", self.docs_per_example));
        }
        if self.sentences_per_doc == 0 || self.entities_per_sentence == 0 {
            return bad("sentences_per_doc and entities_per_sentence must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.yes_no_fraction) {
            return bad(format!("yes_no_fraction must lie in [0, 1], got {}", self.yes_no_fraction));
        }
        let p = self.pools();
        let titles = p.titles.len() * p.titles.len().saturating_sub(1);
        if p.relations.len() < 2 || p.entities.len() < 4 || p.filler.is_empty() || titles < 2 * self.num_examples * self.docs_per_example {
            return bad(format!(
                "vocab_size {} is too small for {} examples of {} documents",
                self.vocab_size, self.num_examples, self.docs_per_example
            ));
        }
        Ok(())
    }

    fn pools(&self) -> Pools {
        let v = self.vocab_size;
        let n_rel = (v / 20).max(4);
        let n_title = 3 * v / 8;
        let n_ent = v / 4;
        let words: Vec<String> = (0..v).map(word).collect();
        let (rel, rest) = words.split_at(n_rel.min(v));
        let (title, rest) = rest.split_at(n_title.min(rest.len()));
        let (ent, fill) = rest.split_at(n_ent.min(rest.len()));
        Pools {
            titles: title.to_vec(),
            entities: ent.to_vec(),
            relations: rel.to_vec(),
            filler: fill.to_vec(),
        }
    }
}

struct Gen<'a> {
    cfg: &'a SynthConfig,
    pools: Pools,
    rng: ChaCha8Rng,
    used_titles: HashSet<(usize, usize)>,
    used_answers: HashSet<(usize, usize)>,
}

impl Gen<'_> {
    fn pick<'p>(&mut self, pool: &'p [String]) -> &'p str {
        &pool[self.rng.gen_range(0..pool.len())]
    }

    fn pair(&mut self, n: usize) -> (usize, usize) {
        let a = self.rng.gen_range(0..n);
        let mut b = self.rng.gen_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        (a, b)
    }

    fn fresh_title(&mut self, avoid: &[usize]) -> (usize, usize) {
        loop {
            let t = self.pair(self.pools.titles.len());
            if !avoid.contains(&t.0) && !avoid.contains(&t.1) && self.used_titles.insert(t) {
                return t;
            }
        }
    }

    fn title(&self, t: (usize, usize)) -> [String; 2] {
        [self.pools.titles[t.0].clone(), self.pools.titles[t.1].clone()]
    }

    fn relation_except(&mut self, rel: usize) -> String {
        loop {
            let r = self.rng.gen_range(0..self.pools.relations.len());
            if r != rel {
                return self.pools.relations[r].clone();
            }
        }
    }

    fn entity_except(&mut self, avoid: (usize, usize)) -> [String; 2] {
        loop {
            let e = self.pair(self.pools.entities.len());
            if e != avoid && !self.used_answers.contains(&e) {
                return [self.pools.entities[e.0].clone(), self.pools.entities[e.1].clone()];
            }
        }
    }

    /// `[filler, relation, e1, e2, filler]`, then `[e1, e2, filler]` for each
    /// further entity. Entity mentions are added to `entities`.
    fn sentence(&mut self, relation: String, first: [String; 2], answer: (usize, usize), index: usize, entities: &mut Vec<EntityMention>) -> Vec<String> {
        let filler = self.pools.filler.clone();
        let mut s = vec![self.pick(&filler).to_string(), relation];
        let mut ents = vec![first];
        for _ in 1..self.cfg.entities_per_sentence {
            ents.push(self.entity_except(answer));
        }
        for e in ents {
            entities.push(EntityMention { sentence: index, start: s.len(), end: s.len() + 2, surface: e.join(" ") });
            s.extend(e);
            s.push(self.pick(&filler).to_string());
        }
        s
    }

    fn paragraph(&mut self, title: [String; 2], rel: usize, answer: (usize, usize), special: Option<(usize, Vec<String>, [String; 2])>, links: &[(usize, [String; 2])]) -> Paragraph {
        let mut sentences = Vec::new();
        let mut entities = Vec::new();
        let mut hyperlinks = Vec::new();
        for j in 0..self.cfg.sentences_per_doc {
            let link = links.iter().find(|(k, _)| *k == j);
            let s = match (&special, link) {
                (Some((k, r, e)), _) if *k == j => self.sentence(r[0].clone(), e.clone(), answer, j, &mut entities),
                (_, Some((_, target))) => {
                    hyperlinks.push(Hyperlink { sentence: j, target: target.join(" ") });
                    let r = self.relation_except(rel);
                    self.sentence(r, target.clone(), answer, j, &mut entities)
                }
                _ => {
                    let r = self.relation_except(rel);
                    let e = self.entity_except(answer);
                    self.sentence(r, e, answer, j, &mut entities)
                }
            };
            sentences.push(s);
        }
        Paragraph { title: title.join(" "), sentences, hyperlinks, entities }
    }
}

/// Generates the corpus and one question per example, fully determined by
/// the config.
pub fn generate(cfg: &SynthConfig) -> Result<(Corpus, Vec<QaExample>)> {
    cfg.validate()?;
    let mut g = Gen {
        cfg,
        pools: cfg.pools(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        used_titles: HashSet::new(),
        used_answers: HashSet::new(),
    };
    let mut paragraphs = Vec::with_capacity(cfg.num_examples * cfg.docs_per_example);
    let mut examples = Vec::with_capacity(cfg.num_examples);
    let yes_no_share = match cfg.answer_style {
        AnswerStyle::Span => 0.0,
        AnswerStyle::YesNoMix => cfg.yes_no_fraction,
    };
    for i in 0..cfg.num_examples {
        let a = g.fresh_title(&[]);
        let b = g.fresh_title(&[a.0, a.1]);
        let distractors: Vec<(usize, usize)> = (2..cfg.docs_per_example).map(|_| g.fresh_title(&[a.0, a.1])).collect();
        let rel = g.rng.gen_range(0..g.pools.relations.len());
        let answer = loop {
            let e = g.pair(g.pools.entities.len());
            if g.used_answers.insert(e) {
                break e;
            }
        };
        let answer_words = [g.pools.entities[answer.0].clone(), g.pools.entities[answer.1].clone()];

        let bridge_sentence = g.rng.gen_range(0..cfg.sentences_per_doc);
        let links = [(bridge_sentence, g.title(b))];
        let doc_a = g.paragraph(g.title(a), rel, answer, None, &links);

        let answer_sentence = g.rng.gen_range(0..cfg.sentences_per_doc);
        let relation = g.pools.relations[rel].clone();
        let doc_b = g.paragraph(g.title(b), rel, answer, Some((answer_sentence, vec![relation.clone()], answer_words.clone())), &[]);

        let yes_no = ((i + 1) as f64 * yes_no_share).floor() > (i as f64 * yes_no_share).floor();
        let a_title = g.title(a);
        let (question, question_entities, ans, kind) = if yes_no {
            let yes = g.rng.gen_bool(0.5);
            let cand: Vec<String> = if yes {
                answer_words.to_vec()
            } else {
                let others: Vec<&EntityMention> = doc_b.entities.iter().filter(|e| e.sentence != answer_sentence).collect();
                match others.choose(&mut g.rng) {
                    Some(e) => e.surface.split(' ').map(String::from).collect(),
                    None => g.entity_except(answer).to_vec(),
                }
            };
            let mut q = vec!["is".to_string()];
            q.extend(cand.iter().cloned());
            q.extend([relation.clone(), "of".into(), a_title[0].clone(), a_title[1].clone(), "?".into()]);
            let ents = vec![
                QuestionEntity { start: 1, end: 3, surface: cand.join(" ") },
                QuestionEntity { start: 5, end: 7, surface: a_title.join(" ") },
            ];
            (q, ents, if yes { Answer::Yes } else { Answer::No }, "bridge-yn")
        } else {
            let q = vec!["which".into(), relation.clone(), "of".into(), a_title[0].clone(), a_title[1].clone(), "?".into()];
            let ents = vec![QuestionEntity { start: 3, end: 5, surface: a_title.join(" ") }];
            (q, ents, Answer::Span(answer_words.join(" ")), "bridge")
        };

        let supporting_facts = BTreeSet::from([(doc_a.title.clone(), bridge_sentence), (doc_b.title.clone(), answer_sentence)]);
        let gold_titles = BTreeSet::from([doc_a.title.clone(), doc_b.title.clone()]);
        paragraphs.push(doc_a);
        paragraphs.push(doc_b);
        for d in distractors {
            let t = g.title(d);
            let p = g.paragraph(t, rel, answer, None, &[]);
            paragraphs.push(p);
        }
        examples.push(QaExample {
            id: format!("syn-{i:05}"),
            question,
            question_entities,
            answer: ans,
            supporting_facts,
            gold_titles,
            kind: Some(kind.to_string()),
        });
    }
    Ok((Corpus::new(paragraphs)?, examples))
}

/// The first `len - n_dev` examples for training, the rest for development.
pub fn split_dev(mut examples: Vec<QaExample>, n_dev: usize) -> (Vec<QaExample>, Vec<QaExample>) {
    let dev = examples.split_off(examples.len().saturating_sub(n_dev));
    (examples, dev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_distinct() {
        let w: HashSet<String> = (0..10_000).map(word).collect();
        assert_eq!(w.len(), 10_000);
    }

    #[test]
    fn small_vocab_rejected() {
        let cfg = SynthConfig { vocab_size: 40, ..SynthConfig::default() };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig { docs_per_example: 1, ..SynthConfig::default() };
        assert!(cfg.validate().is_err());
    }
}

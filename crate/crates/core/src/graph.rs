//! The hierarchical graph: one question node, paragraph, sentence and entity
//! nodes in a fixed padded layout, and typed bidirectional edges.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{Corpus, QaExample};
use crate::error::{Error, Result};
use crate::numerics::Adjacency;
use crate::selector::SelectionResult;

/// Edge types `1..=7` plus the self-loop type.
pub const NUM_EDGE_TYPES: usize = 8;
pub const SELF_LOOP: u8 = 8;

/// Placeholder token at context position 0. Yes/no answers point their span
/// labels here.
pub const SENTINEL: &str = "[SENT]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Question,
    Paragraph,
    Sentence,
    Entity,
}

/// Why two nodes are connected; combined with the endpoint kinds it fixes
/// the edge type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    /// Question to a selected paragraph.
    Selected,
    /// Question to an entity it mentions.
    Mention,
    /// Paragraph to its sentence, or sentence to its entity.
    Contains,
    /// Sentence to the paragraph it links to.
    Hyperlink,
    /// Paragraph to paragraph.
    Peer,
    /// Neighbouring sentences of one paragraph.
    Adjacent,
    SelfLoop,
}

/// Edge type for a relation between two node kinds. Symmetric in the kinds.
pub fn edge_type_of(src: NodeKind, dst: NodeKind, relation: Relation) -> Result<u8> {
    use NodeKind::*;
    use Relation::*;
    let t = match (src, dst, relation) {
        (Question, Paragraph, Selected) | (Paragraph, Question, Selected) => 1,
        (Question, Entity, Mention) | (Entity, Question, Mention) => 2,
        (Paragraph, Sentence, Contains) | (Sentence, Paragraph, Contains) => 3,
        (Sentence, Paragraph, Hyperlink) | (Paragraph, Sentence, Hyperlink) => 4,
        (Sentence, Entity, Contains) | (Entity, Sentence, Contains) => 5,
        (Paragraph, Paragraph, Peer) => 6,
        (Sentence, Sentence, Adjacent) => 7,
        (a, b, SelfLoop) if a == b => SELF_LOOP,
        _ => return Err(Error::IllegalEdge { src, dst, relation }),
    };
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caps {
    pub n_p: usize,
    pub n_s: usize,
    pub n_e: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps { n_p: 4, n_s: 40, n_e: 60 }
    }
}

impl Caps {
    /// Total node count including the question node.
    pub fn total(&self) -> usize {
        1 + self.n_p + self.n_s + self.n_e
    }

    pub fn paragraph_offset(&self) -> usize {
        1
    }

    pub fn sentence_offset(&self) -> usize {
        1 + self.n_p
    }

    pub fn entity_offset(&self) -> usize {
        1 + self.n_p + self.n_s
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_p == 0 || self.n_s == 0 || self.n_e == 0 {
            return Err(Error::Config(format!("graph caps must be positive, got {self:?}")));
        }
        Ok(())
    }
}

/// Inclusive token span, either in the question or in the graph's context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
    pub in_question: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeSource {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentence: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span: Option<TokenSpan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surface: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeSpec {
    pub kind: NodeKind,
    pub index: usize,
    pub source: NodeSource,
    pub is_real: bool,
    pub answer_candidate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TypedEdge {
    pub src: usize,
    pub dst: usize,
    pub etype: u8,
}

/// Items dropped because a cap was reached.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub paragraphs: usize,
    pub sentences: usize,
    pub entities: usize,
}

#[derive(Clone, Debug)]
pub struct HierGraph {
    pub caps: Caps,
    pub nodes: Vec<NodeSpec>,
    /// Sorted by `(src, etype, dst)`.
    pub edges: Vec<TypedEdge>,
    /// Per node, `(etype, dst)` sorted.
    pub neighbors: Vec<Vec<(u8, usize)>>,
    pub mask: Vec<bool>,
    /// Sentinel followed by title and sentence tokens of each kept paragraph.
    pub context: Vec<String>,
    pub question: Vec<String>,
    pub truncated: Truncation,
}

impl HierGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes_of(&self, kind: NodeKind) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(move |n| n.kind == kind && n.is_real)
    }

    pub fn num_real(&self, kind: NodeKind) -> usize {
        self.nodes_of(kind).count()
    }

    /// Global index of the sentence node for `(title, sentence)`, if kept.
    pub fn sentence_node(&self, title: &str, sentence: usize) -> Option<usize> {
        let key = crate::corpus::normalize_title(title);
        self.nodes_of(NodeKind::Sentence)
            .find(|n| {
                n.source.sentence == Some(sentence)
                    && n.source.title.as_deref().map(crate::corpus::normalize_title).as_deref() == Some(key.as_str())
            })
            .map(|n| n.index)
    }

    /// Neighbourhoods in the form the sparse attention op consumes, with
    /// edge types shifted to start at zero.
    pub fn adjacency(&self) -> Arc<Adjacency> {
        Arc::new(Adjacency {
            neighbors: self
                .neighbors
                .iter()
                .map(|ns| ns.iter().map(|&(t, j)| (j, t as usize - 1)).collect())
                .collect(),
        })
    }

    pub fn to_json(&self) -> Value {
        let nodes: Vec<Value> = self
            .nodes
            .iter()
            .map(|n| {
                json!({
                    "kind": n.kind,
                    "index": n.index,
                    "source": n.source,
                    "real": n.is_real,
                })
            })
            .collect();
        let edges: Vec<Value> = self.edges.iter().map(|e| json!([e.src, e.dst, e.etype])).collect();
        json!({ "nodes": nodes, "edges": edges, "truncated": self.truncated })
    }
}

struct Builder {
    kinds: Vec<NodeKind>,
    edges: BTreeSet<TypedEdge>,
}

impl Builder {
    fn connect(&mut self, a: usize, b: usize, relation: Relation) -> Result<()> {
        let t = edge_type_of(self.kinds[a], self.kinds[b], relation)?;
        self.edges.insert(TypedEdge { src: a, dst: b, etype: t });
        self.edges.insert(TypedEdge { src: b, dst: a, etype: t });
        Ok(())
    }
}

pub fn build_graph(example: &QaExample, selection: &SelectionResult, corpus: &Corpus, caps: Caps) -> Result<HierGraph> {
    caps.validate()?;
    if selection.paragraphs.is_empty() {
        return Err(Error::Graph(format!("example `{}` has no selected paragraphs", example.id)));
    }
    let g = caps.total();
    let mut nodes: Vec<NodeSpec> = (0..g)
        .map(|i| NodeSpec {
            kind: if i == 0 {
                NodeKind::Question
            } else if i < caps.sentence_offset() {
                NodeKind::Paragraph
            } else if i < caps.entity_offset() {
                NodeKind::Sentence
            } else {
                NodeKind::Entity
            },
            index: i,
            source: NodeSource::default(),
            is_real: false,
            answer_candidate: false,
        })
        .collect();
    let mut truncated = Truncation::default();

    nodes[0].is_real = true;
    nodes[0].source.span = (!example.question.is_empty()).then(|| TokenSpan {
        start: 0,
        end: example.question.len() - 1,
        in_question: true,
    });

    let mut context = vec![SENTINEL.to_string()];
    // (paragraph node, corpus index, kept sentence nodes by sentence index)
    let mut kept: Vec<(usize, usize, HashMap<usize, usize>)> = Vec::new();
    let mut n_sent = 0;
    let mut entities: Vec<NodeSource> = Vec::new();
    let mut entity_sentence: Vec<Option<usize>> = Vec::new();

    for qe in &example.question_entities {
        entities.push(NodeSource {
            span: Some(TokenSpan { start: qe.start, end: qe.end - 1, in_question: true }),
            surface: Some(qe.surface.clone()),
            ..NodeSource::default()
        });
        entity_sentence.push(None);
    }

    for rp in &selection.paragraphs {
        let pi = corpus
            .index_of(&rp.title)
            .ok_or_else(|| Error::Graph(format!("selected title `{}` is not in the corpus", rp.title)))?;
        if kept.len() == caps.n_p {
            truncated.paragraphs += 1;
            continue;
        }
        let para = corpus.paragraph(pi);
        let node = caps.paragraph_offset() + kept.len();
        let p_start = context.len();
        context.extend(para.title.split_whitespace().map(str::to_string));
        let mut sents = HashMap::new();
        for (si, sentence) in para.sentences.iter().enumerate() {
            if n_sent == caps.n_s {
                truncated.sentences += 1;
                continue;
            }
            let s_node = caps.sentence_offset() + n_sent;
            n_sent += 1;
            let s_start = context.len();
            context.extend(sentence.iter().cloned());
            nodes[s_node].is_real = true;
            nodes[s_node].source = NodeSource {
                title: Some(para.title.clone()),
                sentence: Some(si),
                span: (!sentence.is_empty()).then(|| TokenSpan {
                    start: s_start,
                    end: s_start + sentence.len() - 1,
                    in_question: false,
                }),
                surface: None,
            };
            sents.insert(si, s_node);
            let mut mentions: Vec<_> = para.entities.iter().filter(|m| m.sentence == si).collect();
            mentions.sort_by_key(|m| (m.start, m.end));
            for m in mentions {
                entities.push(NodeSource {
                    title: Some(para.title.clone()),
                    sentence: Some(si),
                    span: Some(TokenSpan {
                        start: s_start + m.start,
                        end: s_start + m.end - 1,
                        in_question: false,
                    }),
                    surface: Some(m.surface.clone()),
                });
                entity_sentence.push(Some(s_node));
            }
        }
        nodes[node].is_real = true;
        nodes[node].source = NodeSource {
            title: Some(para.title.clone()),
            sentence: None,
            span: Some(TokenSpan { start: p_start, end: context.len() - 1, in_question: false }),
            surface: None,
        };
        kept.push((node, pi, sents));
    }

    let mut ent_nodes = Vec::new();
    for (k, (src, sent)) in entities.into_iter().zip(entity_sentence).enumerate() {
        if k >= caps.n_e {
            truncated.entities += 1;
            continue;
        }
        let idx = caps.entity_offset() + k;
        nodes[idx].is_real = true;
        nodes[idx].answer_candidate = true;
        nodes[idx].source = src;
        ent_nodes.push((idx, sent));
    }

    let mut b = Builder {
        kinds: nodes.iter().map(|n| n.kind).collect(),
        edges: BTreeSet::new(),
    };
    for (i, (p, _, _)) in kept.iter().enumerate() {
        b.connect(0, *p, Relation::Selected)?;
        for (q, _, _) in &kept[i + 1..] {
            b.connect(*p, *q, Relation::Peer)?;
        }
    }
    for &(e, sent) in &ent_nodes {
        match sent {
            None => b.connect(0, e, Relation::Mention)?,
            Some(s) => b.connect(s, e, Relation::Contains)?,
        }
    }
    let by_title: HashMap<String, usize> = kept
        .iter()
        .map(|(p, pi, _)| (crate::corpus::normalize_title(&corpus.paragraph(*pi).title), *p))
        .collect();
    for (p, _, sents) in &kept {
        let mut order: Vec<(usize, usize)> = sents.iter().map(|(&si, &node)| (si, node)).collect();
        order.sort_unstable();
        for &(_, s) in &order {
            b.connect(*p, s, Relation::Contains)?;
        }
        for w in order.windows(2) {
            if w[1].0 == w[0].0 + 1 {
                b.connect(w[0].1, w[1].1, Relation::Adjacent)?;
            }
        }
    }
    for link in &selection.link_edges {
        let src = by_title
            .get(&crate::corpus::normalize_title(&link.source))
            .and_then(|p| kept.iter().find(|k| k.0 == *p))
            .and_then(|k| k.2.get(&link.sentence));
        let dst = by_title.get(&crate::corpus::normalize_title(&link.target));
        if let (Some(&s), Some(&p)) = (src, dst) {
            b.connect(s, p, Relation::Hyperlink)?;
        }
    }
    for n in nodes.iter().filter(|n| n.is_real) {
        b.edges.insert(TypedEdge { src: n.index, dst: n.index, etype: SELF_LOOP });
    }

    let edges: Vec<TypedEdge> = b.edges.into_iter().collect();
    let mut neighbors = vec![Vec::new(); g];
    for e in &edges {
        neighbors[e.src].push((e.etype, e.dst));
    }
    for ns in &mut neighbors {
        ns.sort_unstable();
    }
    let mask = nodes.iter().map(|n| n.is_real).collect();
    Ok(HierGraph {
        caps,
        nodes,
        edges,
        neighbors,
        mask,
        context,
        question: example.question.clone(),
        truncated,
    })
}

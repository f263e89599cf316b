//! Triplet-enhanced query construction and subgraph retrieval.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentModel;
use crate::encoders::{cosine, TextEmbedder};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, NodeId, Triple, TripleIndex};
use crate::textualize::textualize_triple;
use crate::vectordb::{Hit, VectorDatabase};

/// Number of fact triplets appended to a query by default.
pub const DEFAULT_TRIPLETS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    #[serde(default, rename = "answer", skip_serializing_if = "Option::is_none")]
    pub answer_index: Option<usize>,
}

impl QAInstance {
    pub fn validate(&self) -> Result<()> {
        if self.choices.len() < 2 {
            return Err(Error::Config(format!(
                "instance `{}` needs at least 2 choices",
                self.id
            )));
        }
        if self.choices.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::Config(format!("instance `{}` has an empty choice", self.id)));
        }
        if let Some(a) = self.answer_index {
            if a >= self.choices.len() {
                return Err(Error::OutOfRange {
                    what: "answer index",
                    index: a,
                    len: self.choices.len(),
                });
            }
        }
        Ok(())
    }
}

pub fn read_qa(path: &Path) -> Result<Vec<QAInstance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: QAInstance = serde_json::from_str(line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_qa(path: &Path, instances: &[QAInstance]) -> Result<()> {
    let mut out = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTriplet {
    pub index: TripleIndex,
    pub triple: Triple,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedQuery {
    /// `question + " " + choice`.
    pub qa_text: String,
    pub question_entities: BTreeSet<NodeId>,
    pub choice_entities: BTreeSet<NodeId>,
    pub selected: Vec<ScoredTriplet>,
    /// `qa_text` followed by the selected triplet sentences.
    pub text: String,
    /// Projected text embedding of `text`.
    pub embedding: Array1<f64>,
}

pub fn qa_text(question: &str, choice: &str) -> String {
    format!("{question} {choice}")
}

/// All triples incident to an entity linked in the question or the choice.
pub fn gather_candidate_triplets(graph: &KnowledgeGraph, question: &str, choice: &str) -> Vec<TripleIndex> {
    let mut entities = graph.link_entities(question);
    entities.extend(graph.link_entities(choice));
    graph.triples_touching(&entities)
}

/// Scores candidates by cosine between the projected embeddings of
/// `qa_text` and of each rendered triple, keeping the best `limit`.
/// Ties go to the lower triple index.
pub fn rank_triplets(
    model: &AlignmentModel,
    embedder: &dyn TextEmbedder,
    graph: &KnowledgeGraph,
    qa_text: &str,
    candidates: &[TripleIndex],
    limit: usize,
) -> Result<Vec<ScoredTriplet>> {
    if limit == 0 || candidates.is_empty() {
        return Ok(Vec::new());
    }
    let anchor = model.embed_text(embedder, qa_text)?;
    let mut scored = candidates
        .iter()
        .map(|&index| {
            let triple = graph.triple(index);
            let text = textualize_triple(graph, triple);
            let emb = model.embed_text(embedder, &text)?;
            Ok(ScoredTriplet {
                index,
                triple,
                score: cosine(anchor.view(), emb.view()).value,
                text,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    scored.truncate(limit);
    Ok(scored)
}

pub fn build_enhanced_query(
    graph: &KnowledgeGraph,
    embedder: &dyn TextEmbedder,
    model: &AlignmentModel,
    question: &str,
    choice: &str,
    triplets: usize,
) -> Result<EnhancedQuery> {
    let qa = qa_text(question, choice);
    let question_entities = graph.link_entities(question);
    let choice_entities = graph.link_entities(choice);
    let mut all = question_entities.clone();
    all.extend(choice_entities.iter().copied());
    let candidates = graph.triples_touching(&all);
    let selected = rank_triplets(model, embedder, graph, &qa, &candidates, triplets)?;
    let mut text = qa.clone();
    if !selected.is_empty() {
        text.push(' ');
        for s in &selected {
            text.push_str(&s.text);
        }
    }
    let embedding = model.embed_text(embedder, &text)?;
    Ok(EnhancedQuery {
        qa_text: qa,
        question_entities,
        choice_entities,
        selected,
        text,
        embedding,
    })
}

/// Retrieved subgraph vectors, one row per hit in similarity order.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub vectors: Array2<f64>,
    pub hits: Vec<Hit>,
    pub centers: Vec<NodeId>,
}

pub fn retrieve_subgraphs(db: &VectorDatabase, query: &EnhancedQuery, k: usize) -> Result<Retrieved> {
    let q = query
        .embedding
        .as_slice()
        .ok_or(Error::Format("query embedding layout".into()))?;
    let hits = db.top_k(q, k)?;
    let mut vectors = Array2::zeros((hits.len(), db.dim()));
    let mut centers = Vec::with_capacity(hits.len());
    for (row, hit) in hits.iter().enumerate() {
        let rec = db.record(hit.index);
        for (j, &x) in rec.vector.iter().enumerate() {
            vectors[[row, j]] = x as f64;
        }
        centers.push(rec.center);
    }
    Ok(Retrieved {
        vectors,
        hits,
        centers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qa_validation() {
        let mut q = QAInstance {
            id: "a".into(),
            question: "q".into(),
            choices: vec!["x".into(), "y".into()],
            answer_index: Some(1),
        };
        q.validate().unwrap();
        q.answer_index = Some(2);
        assert!(q.validate().is_err());
        q.answer_index = None;
        q.choices = vec!["x".into()];
        assert!(q.validate().is_err());
    }

    #[test]
    fn qa_json_field_names() {
        let line = r#"{"id":"1","question":"q?","choices":["a","b"],"answer":0}"#;
        let q: QAInstance = serde_json::from_str(line).unwrap();
        assert_eq!(q.answer_index, Some(0));
        assert_eq!(serde_json::to_string(&q).unwrap(), line);
        let unlabeled: QAInstance =
            serde_json::from_str(r#"{"id":"1","question":"q?","choices":["a","b"]}"#).unwrap();
        assert_eq!(unlabeled.answer_index, None);
    }

    #[test]
    fn gather_dedups_across_union() {
        let g = KnowledgeGraph::from_records(
            &[("house", "MadeOf", "wood"), ("sun", "HasProperty", "hot")],
            &[
                ("MadeOf", "{head} is made of {tail}"),
                ("HasProperty", "{head} has property {tail}"),
            ],
        )
        .unwrap();
        assert_eq!(
            gather_candidate_triplets(&g, "what is a house built from?", "wood"),
            vec![0]
        );
        assert!(gather_candidate_triplets(&g, "unrelated words", "none").is_empty());
    }
}

//! Templated rendering of triples and subgraphs into plain sentences.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, NodeId, Triple, TripleIndex};
use crate::sampler::{bfs_sample, SamplerConfig, Subgraph};

/// Terminator appended to every rendered triple.
pub const SENTENCE_END: &str = ". ";

/// Default relation templates for common ConceptNet relations.
pub const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.tsv");

#[derive(Debug, Clone, PartialEq)]
pub struct GraphTextPair {
    pub subgraph: Subgraph,
    pub description: String,
}

pub fn textualize_triple(graph: &KnowledgeGraph, triple: Triple) -> String {
    let rel = graph.relation(triple.relation);
    let mut s = rel
        .template
        .render(&graph.node(triple.head).surface, &graph.node(triple.tail).surface);
    s.push_str(SENTENCE_END);
    s
}

/// Concatenates the rendered edges in ascending triple-index order.
pub fn textualize_subgraph(graph: &KnowledgeGraph, subgraph: &Subgraph) -> String {
    textualize_edges(graph, &subgraph.edges, None)
}

/// Like [`textualize_subgraph`] but stops after `max_sentences` edges.
pub fn textualize_subgraph_capped(
    graph: &KnowledgeGraph,
    subgraph: &Subgraph,
    max_sentences: Option<usize>,
) -> String {
    textualize_edges(graph, &subgraph.edges, max_sentences)
}

fn textualize_edges(
    graph: &KnowledgeGraph,
    edges: &[TripleIndex],
    max_sentences: Option<usize>,
) -> String {
    let mut sorted = edges.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let cap = max_sentences.unwrap_or(usize::MAX);
    sorted
        .into_iter()
        .take(cap)
        .map(|e| textualize_triple(graph, graph.triple(e)))
        .collect()
}

/// Samples `count` centers uniformly with replacement and pairs each sampled
/// subgraph with its description.
pub fn build_pair_dataset(
    graph: &KnowledgeGraph,
    config: &SamplerConfig,
    count: usize,
    seed: u64,
    max_sentences: Option<usize>,
) -> Result<Vec<GraphTextPair>> {
    if graph.num_nodes() == 0 {
        return Err(Error::EmptyGraph);
    }
    if count == 0 {
        return Err(Error::Config("pair count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let center = rng.gen_range(0..graph.num_nodes());
            let subgraph = bfs_sample(graph, center, config, &mut rng)?;
            let description = textualize_subgraph_capped(graph, &subgraph, max_sentences);
            Ok(GraphTextPair {
                subgraph,
                description,
            })
        })
        .collect()
}

/// One line of the pair dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub center: NodeId,
    pub nodes: Vec<NodeId>,
    pub edges: Vec<TripleIndex>,
    pub text: String,
}

impl From<&GraphTextPair> for PairRecord {
    fn from(p: &GraphTextPair) -> Self {
        Self {
            center: p.subgraph.center,
            nodes: p.subgraph.nodes.clone(),
            edges: p.subgraph.edges.clone(),
            text: p.description.clone(),
        }
    }
}

pub fn write_pairs(path: &Path, pairs: &[GraphTextPair]) -> Result<()> {
    let mut out = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut out, &PairRecord::from(p))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a pair file and rebuilds each subgraph against `graph`.
pub fn read_pairs(path: &Path, graph: &KnowledgeGraph) -> Result<Vec<GraphTextPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        let mut subgraph = Subgraph::induced(graph, rec.nodes)?;
        if subgraph.center != rec.center {
            return Err(Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                reason: "center must be the first node".into(),
            });
        }
        subgraph.edges = rec.edges;
        pairs.push(GraphTextPair {
            subgraph,
            description: rec.text,
        });
    }
    Ok(pairs)
}

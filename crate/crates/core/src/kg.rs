//! Immutable multi-relational knowledge graph with surface-form indexing.
//!
//! Triples are stored once with their direction intact; the neighbor lists
//! index every triple under both endpoints so traversal is undirected.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoders::TextEmbedder;
use crate::error::{Error, Result};

pub type NodeId = usize;
pub type RelationId = usize;
pub type TripleIndex = usize;

/// Longest n-gram considered by [`KnowledgeGraph::link_entities`].
pub const MAX_LINK_NGRAM: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptNode {
    pub id: NodeId,
    pub uri: String,
    pub surface: String,
}

/// Relation template split around its two placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    raw: String,
    parts: [String; 3],
    head_first: bool,
}

impl Template {
    pub const HEAD: &'static str = "{head}";
    pub const TAIL: &'static str = "{tail}";

    pub fn parse(relation: &str, raw: &str) -> Result<Self> {
        let invalid = |reason: &str| Error::InvalidTemplate {
            relation: relation.to_string(),
            reason: reason.to_string(),
        };
        if raw.matches(Self::HEAD).count() != 1 {
            return Err(invalid("expected exactly one {head} placeholder"));
        }
        if raw.matches(Self::TAIL).count() != 1 {
            return Err(invalid("expected exactly one {tail} placeholder"));
        }
        let h = raw.find(Self::HEAD).unwrap();
        let t = raw.find(Self::TAIL).unwrap();
        let (first, second, head_first) = if h < t {
            (h, t, true)
        } else {
            (t, h, false)
        };
        // both placeholders are 6 bytes long
        let parts = [
            raw[..first].to_string(),
            raw[first + 6..second].to_string(),
            raw[second + 6..].to_string(),
        ];
        Ok(Self {
            raw: raw.to_string(),
            parts,
            head_first,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    /// Substitutes both placeholders in a single pass.
    pub fn render(&self, head: &str, tail: &str) -> String {
        let (a, b) = if self.head_first {
            (head, tail)
        } else {
            (tail, head)
        };
        let mut out = String::with_capacity(self.raw.len() + a.len() + b.len());
        out.push_str(&self.parts[0]);
        out.push_str(a);
        out.push_str(&self.parts[1]);
        out.push_str(b);
        out.push_str(&self.parts[2]);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationType {
    pub id: RelationId,
    pub name: String,
    pub template: Template,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: NodeId,
    pub relation: RelationId,
    pub tail: NodeId,
}

/// One entry of a node's adjacency list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub triple: TripleIndex,
    pub node: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub nodes: usize,
    pub relations: usize,
    pub triples: usize,
}

impl fmt::Display for GraphSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "nodes={} relations={} triples={}",
            self.nodes, self.relations, self.triples
        )
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    nodes: Vec<ConceptNode>,
    relations: Vec<RelationType>,
    triples: Vec<Triple>,
    neighbors: Vec<Vec<Neighbor>>,
    surface_index: HashMap<String, Vec<NodeId>>,
    uri_index: HashMap<String, NodeId>,
    features: Option<Array2<f64>>,
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Surface form of a node URI. ConceptNet URIs (`/c/<lang>/<term>/...`)
/// reduce to their term segment.
pub fn surface_of_uri(uri: &str) -> String {
    let term = match uri.strip_prefix("/c/") {
        Some(rest) => rest.split('/').nth(1).unwrap_or(rest),
        None => uri,
    };
    term.replace('_', " ").to_lowercase()
}

/// Parses a templates file: `relation \t template` per line.
pub fn parse_templates(text: &str, file: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                file: file.to_string(),
                line: i + 1,
                reason: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        out.push((fields[0].trim().to_string(), fields[1].trim().to_string()));
    }
    Ok(out)
}

/// Parses a triples file: `head \t relation \t tail` per line.
pub fn parse_triples(text: &str, file: &str) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                file: file.to_string(),
                line: i + 1,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        out.push((
            fields[0].trim().to_string(),
            fields[1].trim().to_string(),
            fields[2].trim().to_string(),
        ));
    }
    Ok(out)
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads and indexes a graph from a triples file and a templates file.
pub fn load_graph(triples_path: &Path, templates_path: &Path) -> Result<KnowledgeGraph> {
    let templates = parse_templates(
        &read_file(templates_path)?,
        &templates_path.display().to_string(),
    )?;
    let triples = parse_triples(
        &read_file(triples_path)?,
        &triples_path.display().to_string(),
    )?;
    KnowledgeGraph::from_records(&triples, &templates)
}

impl KnowledgeGraph {
    /// Builds a graph from raw `(head, relation, tail)` records and
    /// `(relation, template)` pairs. Node and relation ids follow first
    /// appearance in `triples`; duplicate triples are dropped.
    pub fn from_records<S: AsRef<str>>(
        triples: &[(S, S, S)],
        templates: &[(S, S)],
    ) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut template_map: HashMap<&str, Template> = HashMap::new();
        for (rel, raw) in templates {
            template_map.insert(rel.as_ref(), Template::parse(rel.as_ref(), raw.as_ref())?);
        }

        let mut nodes: Vec<ConceptNode> = Vec::new();
        let mut uri_index: HashMap<String, NodeId> = HashMap::new();
        let mut relations: Vec<RelationType> = Vec::new();
        let mut rel_index: HashMap<String, RelationId> = HashMap::new();
        let mut seen: HashSet<Triple> = HashSet::new();
        let mut stored = Vec::new();

        let mut node_id = |uri: &str, nodes: &mut Vec<ConceptNode>| -> Result<NodeId> {
            if let Some(&id) = uri_index.get(uri) {
                return Ok(id);
            }
            let surface = surface_of_uri(uri);
            if normalize_tokens(&surface).is_empty() {
                return Err(Error::Format(format!(
                    "node `{uri}` has no linkable surface form"
                )));
            }
            let id = nodes.len();
            nodes.push(ConceptNode {
                id,
                uri: uri.to_string(),
                surface,
            });
            uri_index.insert(uri.to_string(), id);
            Ok(id)
        };

        for (h, r, t) in triples {
            let (h, r, t) = (h.as_ref(), r.as_ref(), t.as_ref());
            let relation = match rel_index.get(r) {
                Some(&id) => id,
                None => {
                    let template = template_map
                        .get(r)
                        .cloned()
                        .ok_or_else(|| Error::MissingTemplate(r.to_string()))?;
                    let id = relations.len();
                    relations.push(RelationType {
                        id,
                        name: r.to_string(),
                        template,
                    });
                    rel_index.insert(r.to_string(), id);
                    id
                }
            };
            let head = node_id(h, &mut nodes)?;
            let tail = node_id(t, &mut nodes)?;
            let triple = Triple {
                head,
                relation,
                tail,
            };
            if seen.insert(triple) {
                stored.push(triple);
            }
        }

        let mut neighbors = vec![Vec::new(); nodes.len()];
        for (i, t) in stored.iter().enumerate() {
            neighbors[t.head].push(Neighbor {
                triple: i,
                node: t.tail,
            });
            if t.head != t.tail {
                neighbors[t.tail].push(Neighbor {
                    triple: i,
                    node: t.head,
                });
            }
        }

        let mut surface_index: HashMap<String, Vec<NodeId>> = HashMap::new();
        for n in &nodes {
            surface_index
                .entry(normalize_tokens(&n.surface).join(" "))
                .or_default()
                .push(n.id);
        }

        let uri_index = nodes.iter().map(|n| (n.uri.clone(), n.id)).collect();
        Ok(Self {
            nodes,
            relations,
            triples: stored,
            neighbors,
            surface_index,
            uri_index,
            features: None,
        })
    }

    /// Attaches explicit initial node features (one row per node).
    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.nodes.len() {
            return Err(Error::Shape {
                context: "node features rows",
                expected: self.nodes.len(),
                got: features.nrows(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("node features"));
        }
        self.features = Some(features);
        Ok(self)
    }

    /// Attaches features computed by embedding every node's surface form.
    pub fn with_embedded_features(self, embedder: &dyn TextEmbedder) -> Self {
        let mut features = Array2::zeros((self.nodes.len(), embedder.dim()));
        for (i, node) in self.nodes.iter().enumerate() {
            features.row_mut(i).assign(&embedder.embed(&node.surface));
        }
        Self {
            features: Some(features),
            ..self
        }
    }

    pub fn summary(&self) -> GraphSummary {
        GraphSummary {
            nodes: self.nodes.len(),
            relations: self.relations.len(),
            triples: self.triples.len(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &ConceptNode {
        &self.nodes[id]
    }

    pub fn relations(&self) -> &[RelationType] {
        &self.relations
    }

    pub fn relation(&self, id: RelationId) -> &RelationType {
        &self.relations[id]
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, index: TripleIndex) -> Triple {
        self.triples[index]
    }

    /// Adjacency of `node`, ordered by triple index.
    pub fn neighbors(&self, node: NodeId) -> &[Neighbor] {
        &self.neighbors[node]
    }

    pub fn features(&self) -> Option<&Array2<f64>> {
        self.features.as_ref()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.as_ref().map_or(0, |f| f.ncols())
    }

    pub fn node_by_uri(&self, uri: &str) -> Option<NodeId> {
        self.uri_index.get(uri).copied()
    }

    /// Node ids whose normalized surface equals `surface`.
    pub fn nodes_by_surface(&self, surface: &str) -> &[NodeId] {
        self.surface_index
            .get(&normalize_tokens(surface).join(" "))
            .map_or(&[], Vec::as_slice)
    }

    pub fn check_node(&self, id: NodeId) -> Result<()> {
        if id < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                what: "node id",
                index: id,
                len: self.nodes.len(),
            })
        }
    }

    /// Longest-match-first n-gram entity linking. Matched spans are consumed,
    /// so a shorter surface nested inside a longer match is not reported.
    pub fn link_entities(&self, text: &str) -> BTreeSet<NodeId> {
        let tokens = normalize_tokens(text);
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = MAX_LINK_NGRAM.min(tokens.len() - i);
            let mut advanced = false;
            for len in (1..=longest).rev() {
                let key = tokens[i..i + len].join(" ");
                if let Some(ids) = self.surface_index.get(&key) {
                    found.extend(ids.iter().copied());
                    i += len;
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                i += 1;
            }
        }
        found
    }

    /// Indices of all triples with head or tail in `entities`, ascending.
    pub fn triples_touching(&self, entities: &BTreeSet<NodeId>) -> Vec<TripleIndex> {
        let mut out: BTreeSet<TripleIndex> = BTreeSet::new();
        for &e in entities {
            if let Some(adj) = self.neighbors.get(e) {
                out.extend(adj.iter().map(|n| n.triple));
            }
        }
        out.into_iter().collect()
    }

    /// Writes the triples back out in the on-disk format.
    pub fn write_triples(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for t in &self.triples {
            writeln!(
                out,
                "{}\t{}\t{}",
                self.nodes[t.head].uri, self.relations[t.relation].name, self.nodes[t.tail].uri
            )
            .expect("write to vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Writes the templates of every relation in use.
    pub fn write_templates(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.relations {
            out.push_str(&format!("{}\t{}\n", r.name, r.template.as_str()));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

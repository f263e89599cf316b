//! Layer-wise stochastic BFS sampling of subgraphs around a center node.

use std::collections::HashSet;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, NodeId, TripleIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Probability of keeping each unvisited neighbor of a frontier node.
    pub p: f64,
    /// Maximum hop distance from the center.
    pub depth: usize,
    /// Maximum number of nodes, center included.
    pub max_nodes: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            p: 0.5,
            depth: 2,
            max_nodes: 32,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("p must be in [0, 1], got {}", self.p)));
        }
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.max_nodes < 1 {
            return Err(Error::Config("max_nodes must be >= 1".into()));
        }
        Ok(())
    }

    /// Seeded generator for the subgraph centered at `center`.
    pub fn rng_for_center(&self, center: NodeId) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ center as u64)
    }
}

/// Connected node-induced subgraph around `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub center: NodeId,
    /// Discovery order, center first.
    pub nodes: Vec<NodeId>,
    /// Hop distance of `nodes[i]` from the center.
    pub depth_of: Vec<usize>,
    /// Induced triples, ascending triple index.
    pub edges: Vec<TripleIndex>,
    /// Rows aligned with `nodes`; zero columns when the graph carries no features.
    pub features: Array2<f64>,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Builds the node-induced subgraph over `nodes` (first entry is the
    /// center). Depths are recomputed by BFS within the induced edges.
    pub fn induced(graph: &KnowledgeGraph, nodes: Vec<NodeId>) -> Result<Self> {
        let center = *nodes.first().ok_or(Error::Empty("subgraph nodes"))?;
        for &n in &nodes {
            graph.check_node(n)?;
        }
        let edges = induced_edges(graph, &nodes);
        let depth_of = local_depths(graph, &nodes, &edges);
        let features = copy_features(graph, &nodes);
        Ok(Self {
            center,
            nodes,
            depth_of,
            edges,
            features,
        })
    }

    /// Human-readable listing of center, nodes with depths and induced triples.
    pub fn dump(&self, graph: &KnowledgeGraph) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "center\t{}\t{}",
            self.center,
            graph.node(self.center).uri
        )
        .unwrap();
        for (n, d) in self.nodes.iter().zip(&self.depth_of) {
            writeln!(out, "node\t{}\t{}\tdepth={}", n, graph.node(*n).uri, d).unwrap();
        }
        for &e in &self.edges {
            let t = graph.triple(e);
            writeln!(
                out,
                "edge\t{}\t{}\t{}\t{}",
                e,
                graph.node(t.head).uri,
                graph.relation(t.relation).name,
                graph.node(t.tail).uri
            )
            .unwrap();
        }
        out
    }
}

fn induced_edges(graph: &KnowledgeGraph, nodes: &[NodeId]) -> Vec<TripleIndex> {
    let members: HashSet<NodeId> = nodes.iter().copied().collect();
    let mut edges: Vec<TripleIndex> = nodes
        .iter()
        .flat_map(|&u| graph.neighbors(u).iter())
        .filter(|nb| members.contains(&nb.node))
        .map(|nb| nb.triple)
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

fn local_depths(graph: &KnowledgeGraph, nodes: &[NodeId], edges: &[TripleIndex]) -> Vec<usize> {
    let pos: std::collections::HashMap<NodeId, usize> =
        nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut adj = vec![Vec::new(); nodes.len()];
    for &e in edges {
        let t = graph.triple(e);
        let (a, b) = (pos[&t.head], pos[&t.tail]);
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut depth = vec![usize::MAX; nodes.len()];
    depth[0] = 0;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if depth[v] == usize::MAX {
                depth[v] = depth[u] + 1;
                queue.push_back(v);
            }
        }
    }
    depth
}

fn copy_features(graph: &KnowledgeGraph, nodes: &[NodeId]) -> Array2<f64> {
    match graph.features() {
        Some(f) => {
            let mut out = Array2::zeros((nodes.len(), f.ncols()));
            for (i, &n) in nodes.iter().enumerate() {
                out.row_mut(i).assign(&f.row(n));
            }
            out
        }
        None => Array2::zeros((nodes.len(), 0)),
    }
}

/// Samples a subgraph layer by layer: every unvisited neighbor of a frontier
/// node is kept with probability `p`, until `depth` layers are expanded or
/// `max_nodes` nodes are collected. The edge set is node-induced.
pub fn bfs_sample<R: Rng + ?Sized>(
    graph: &KnowledgeGraph,
    center: NodeId,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Subgraph> {
    graph.check_node(center)?;
    config.validate()?;

    let mut visited: HashSet<NodeId> = HashSet::from([center]);
    let mut nodes = vec![center];
    let mut depth_of = vec![0];
    let mut frontier = vec![center];

    'layers: for layer in 1..=config.depth {
        if nodes.len() >= config.max_nodes {
            break;
        }
        let mut next = Vec::new();
        for &u in &frontier {
            // one trial per distinct unvisited neighbor of u
            let mut tried: HashSet<NodeId> = HashSet::new();
            for nb in graph.neighbors(u) {
                let v = nb.node;
                if visited.contains(&v) || !tried.insert(v) {
                    continue;
                }
                if config.p >= 1.0 || (config.p > 0.0 && rng.gen_bool(config.p)) {
                    visited.insert(v);
                    nodes.push(v);
                    depth_of.push(layer);
                    next.push(v);
                    if nodes.len() >= config.max_nodes {
                        break 'layers;
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }

    let edges = induced_edges(graph, &nodes);
    let features = copy_features(graph, &nodes);
    Ok(Subgraph {
        center,
        nodes,
        depth_of,
        edges,
        features,
    })
}

/// One subgraph per node, in node-id order. Each center uses the generator
/// seeded with `config.seed ^ center`.
pub fn sample_all_centers(graph: &KnowledgeGraph, config: &SamplerConfig) -> Result<Vec<Subgraph>> {
    config.validate()?;
    (0..graph.num_nodes())
        .into_par_iter()
        .map(|c| bfs_sample(graph, c, config, &mut config.rng_for_center(c)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star() -> KnowledgeGraph {
        let triples: Vec<(String, String, String)> = (1..=5)
            .map(|i| ("c".to_string(), "R".to_string(), format!("l{i}")))
            .collect();
        KnowledgeGraph::from_records(&triples, &[("R".to_string(), "{head} r {tail}".to_string())])
            .unwrap()
    }

    fn triangle() -> KnowledgeGraph {
        KnowledgeGraph::from_records(
            &[("a", "R", "b"), ("a", "R", "c"), ("b", "R", "c")],
            &[("R", "{head} r {tail}")],
        )
        .unwrap()
    }

    fn cfg(p: f64, depth: usize, max_nodes: usize) -> SamplerConfig {
        SamplerConfig {
            p,
            depth,
            max_nodes,
            seed: 7,
        }
    }

    #[test]
    fn star_full_neighborhood() {
        let g = star();
        let c = g.node_by_uri("c").unwrap();
        let sg = bfs_sample(&g, c, &cfg(1.0, 1, 100), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(sg.nodes.len(), 6);
        assert_eq!(sg.edges.len(), 5);
        assert_eq!(sg.nodes[0], c);
    }

    #[test]
    fn size_one_is_center_only() {
        let g = star();
        let sg = bfs_sample(&g, 0, &cfg(1.0, 3, 1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(sg.nodes, vec![0]);
        assert!(sg.edges.is_empty());
    }

    #[test]
    fn triangle_keeps_induced_edge() {
        let g = triangle();
        let a = g.node_by_uri("a").unwrap();
        let sg = bfs_sample(&g, a, &cfg(1.0, 1, 3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // brute force: every triple whose endpoints are both sampled
        let want: Vec<usize> = g
            .triples()
            .iter()
            .enumerate()
            .filter(|(_, t)| sg.nodes.contains(&t.head) && sg.nodes.contains(&t.tail))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(sg.edges, want);
        assert_eq!(sg.edges.len(), 3);
    }

    #[test]
    fn truncates_in_discovery_order() {
        let g = star();
        let sg = bfs_sample(&g, 0, &cfg(1.0, 1, 3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let l1 = g.node_by_uri("l1").unwrap();
        let l2 = g.node_by_uri("l2").unwrap();
        assert_eq!(sg.nodes, vec![0, l1, l2]);
    }

    #[test]
    fn p_zero_is_center_only() {
        let g = star();
        let sg = bfs_sample(&g, 0, &cfg(0.0, 4, 100), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(sg.nodes, vec![0]);
    }

    #[test]
    fn invalid_center() {
        let g = star();
        let err = bfs_sample(&g, 99, &cfg(1.0, 1, 3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { .. }));
    }

    #[test]
    fn invalid_config() {
        assert!(cfg(1.5, 1, 1).validate().is_err());
        assert!(cfg(0.5, 0, 1).validate().is_err());
        assert!(cfg(0.5, 1, 0).validate().is_err());
    }

    #[test]
    fn all_centers_in_order() {
        let g = star();
        let all = sample_all_centers(&g, &SamplerConfig::default()).unwrap();
        assert_eq!(all.len(), 6);
        for (i, sg) in all.iter().enumerate() {
            assert_eq!(sg.center, i);
            assert_eq!(sg.depth_of[0], 0);
        }
    }

    #[test]
    fn induced_recomputes_depths() {
        let g = triangle();
        let sg = Subgraph::induced(&g, vec![1, 0, 2]).unwrap();
        assert_eq!(sg.depth_of, vec![0, 1, 1]);
        assert_eq!(sg.edges.len(), 3);
    }
}

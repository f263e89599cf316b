#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use septa_core::KnowledgeGraph;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random multigraph with `nodes` nodes named `n0..`, relations `R0..`
/// and `edges` triples (duplicates collapse, self-loops allowed).
pub fn random_graph(seed: u64, nodes: usize, relations: usize, edges: usize) -> KnowledgeGraph {
    let mut r = rng(seed);
    let mut triples = Vec::with_capacity(edges + nodes);
    for _ in 0..edges {
        let h = r.gen_range(0..nodes);
        let t = r.gen_range(0..nodes);
        let rel = r.gen_range(0..relations);
        triples.push((format!("n{h}"), format!("R{rel}"), format!("n{t}")));
    }
    // make sure every node exists
    for i in 0..nodes {
        if !triples.iter().any(|(h, _, t)| *h == format!("n{i}") || *t == format!("n{i}")) {
            triples.push((format!("n{i}"), "R0".to_string(), format!("n{i}")));
        }
    }
    let templates: Vec<(String, String)> = (0..relations)
        .map(|j| (format!("R{j}"), format!("{{head}} rel{j} {{tail}}")))
        .collect();
    KnowledgeGraph::from_records(&triples, &templates).unwrap()
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.gen_range(-1.0..1.0))
}

pub fn random_vector(r: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| r.gen_range(-1.0..1.0))
}

/// Central-difference check: passes when the absolute error is under
/// `floor` or the relative error is under `rel`.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, floor: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= floor || err / analytic.abs().max(numeric.abs()) <= rel
}

use std::collections::{BTreeSet, HashMap, VecDeque};

use septa_core::sampler::{bfs_sample, SamplerConfig, Subgraph};

/// Plain queue BFS over `neighbors` order, `depth` hops, first `cap` nodes.
pub fn bfs_order(graph: &KnowledgeGraph, center: usize, depth: usize, cap: usize) -> Vec<usize> {
    let mut seen = BTreeSet::from([center]);
    let mut out = vec![center];
    let mut queue = VecDeque::from([(center, 0)]);
    while let Some((u, du)) = queue.pop_front() {
        if du == depth {
            continue;
        }
        for nb in graph.neighbors(u) {
            if out.len() >= cap {
                return out;
            }
            if seen.insert(nb.node) {
                out.push(nb.node);
                queue.push_back((nb.node, du + 1));
            }
        }
    }
    out.truncate(cap);
    out
}

/// Triples whose endpoints both lie in `nodes`, ascending.
pub fn induced_brute_force(graph: &KnowledgeGraph, nodes: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = nodes.iter().copied().collect();
    graph
        .triples()
        .iter()
        .enumerate()
        .filter(|(_, t)| set.contains(&t.head) && set.contains(&t.tail))
        .map(|(i, _)| i)
        .collect()
}

/// Structural invariants of one sample; returns a description of the
/// first violation.
pub fn check_sample(
    graph: &KnowledgeGraph,
    s: &Subgraph,
    center: usize,
    config: &SamplerConfig,
) -> Result<(), String> {
    if s.center != center || s.nodes.first() != Some(&center) {
        return Err("center is not first".into());
    }
    if s.nodes.len() > config.max_nodes {
        return Err(format!("{} nodes over cap {}", s.nodes.len(), config.max_nodes));
    }
    if s.nodes.len() != s.depth_of.len() {
        return Err("depth list length".into());
    }
    let unique: BTreeSet<usize> = s.nodes.iter().copied().collect();
    if unique.len() != s.nodes.len() {
        return Err("repeated node".into());
    }
    let depth: HashMap<usize, usize> = s.nodes.iter().copied().zip(s.depth_of.iter().copied()).collect();
    for (i, &v) in s.nodes.iter().enumerate().skip(1) {
        let dv = s.depth_of[i];
        if dv == 0 || dv > config.depth {
            return Err(format!("node {v} at depth {dv}"));
        }
        // every non-center node hangs off a node one layer up
        let parent = graph
            .neighbors(v)
            .iter()
            .any(|nb| depth.get(&nb.node) == Some(&(dv - 1)));
        if !parent {
            return Err(format!("node {v} has no parent in the sample"));
        }
    }
    if s.edges != induced_brute_force(graph, &s.nodes) {
        return Err("edge set is not the induced set".into());
    }
    // connectivity of the induced subgraph from the center
    let mut reach = BTreeSet::from([center]);
    let mut queue = VecDeque::from([center]);
    while let Some(u) = queue.pop_front() {
        for nb in graph.neighbors(u) {
            if unique.contains(&nb.node) && reach.insert(nb.node) {
                queue.push_back(nb.node);
            }
        }
    }
    if reach != unique {
        return Err("sample is not connected".into());
    }
    let again = bfs_sample(graph, center, config, &mut config.rng_for_center(center))
        .map_err(|e| e.to_string())?;
    if again != *s {
        return Err("resampling with the same seed differs".into());
    }
    Ok(())
}

use septa_core::alignment::{loss_gradients, AlignmentModel, ModelDims};
use septa_core::encoders::HashTextEmbedder;
use septa_core::fusion::{ChoiceFeatures, FusionHead, HeadLayout, InstanceFeatures};
use septa_core::textualize::{build_pair_dataset, GraphTextPair};

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL: f64 = 1e-4;
pub const FD_FLOOR: f64 = 1e-8;

/// Outcome of comparing every parameter gradient against central differences.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub failures: usize,
    pub worst_rel: f64,
}

fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> FdReport {
    let mut report = FdReport {
        checked: 0,
        failures: 0,
        worst_rel: 0.0,
    };
    for (a, n) in analytic.iter().zip(numeric) {
        for (&a, &n) in a.iter().zip(n) {
            report.checked += 1;
            let scale = a.abs().max(n.abs());
            if scale > 1e-6 {
                report.worst_rel = report.worst_rel.max((a - n).abs() / scale);
            }
            if !grad_close(a, n, FD_REL, FD_FLOOR) {
                report.failures += 1;
            }
        }
    }
    report
}

/// Small alignment problem: a random graph with random node features and
/// `batch` sampled graph/text pairs.
pub struct AlignmentProblem {
    pub graph: KnowledgeGraph,
    pub embedder: HashTextEmbedder,
    pub model: AlignmentModel,
    pub pairs: Vec<GraphTextPair>,
}

pub fn alignment_problem(seed: u64, d: usize, batch: usize, tau: f64) -> AlignmentProblem {
    let mut r = rng(seed);
    let relations = 3;
    let graph = random_graph(seed, 12, relations, 30);
    let features = random_matrix(&mut r, graph.num_nodes(), d);
    let graph = graph.with_features(features).unwrap();
    let embedder = HashTextEmbedder::new(d, seed);
    let dims = ModelDims {
        d_in: d,
        d_t: d,
        d_g: d,
        d,
        layers: 2,
        relations,
    };
    let model = AlignmentModel::init(&dims, tau, seed);
    let sampler = SamplerConfig {
        seed,
        ..SamplerConfig::default()
    };
    let pairs = build_pair_dataset(&graph, &sampler, batch, seed, None).unwrap();
    AlignmentProblem {
        graph,
        embedder,
        model,
        pairs,
    }
}

impl AlignmentProblem {
    /// Smallest pre-activation magnitude over the batch.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for p in &self.pairs {
            let fwd = self.model.params.encoder.forward(&self.graph, &p.subgraph).unwrap();
            for z in fwd.pre_activations() {
                margin = z.iter().fold(margin, |m, x| m.min(x.abs()));
            }
        }
        margin
    }

    fn loss(&self, model: &AlignmentModel) -> f64 {
        loss_gradients(model, &self.embedder, &self.graph, &self.pairs).unwrap().0
    }

    pub fn finite_difference_check(&self) -> FdReport {
        let (_, grads) = loss_gradients(&self.model, &self.embedder, &self.graph, &self.pairs).unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        let mut numeric = Vec::new();
        let mut probe = self.model.clone();
        for (ti, len) in analytic.iter().map(Vec::len).enumerate() {
            let mut col = Vec::with_capacity(len);
            for j in 0..len {
                let orig = probe.params.tensors_mut()[ti][j];
                probe.params.tensors_mut()[ti][j] = orig + FD_STEP;
                let up = self.loss(&probe);
                probe.params.tensors_mut()[ti][j] = orig - FD_STEP;
                let down = self.loss(&probe);
                probe.params.tensors_mut()[ti][j] = orig;
                col.push((up - down) / (2.0 * FD_STEP));
            }
            numeric.push(col);
        }
        compare(&analytic, &numeric)
    }
}

/// Draws alignment problems from successive seeds, skipping any whose
/// rectifier inputs come within `margin` of zero, until `count` are found.
pub fn smooth_alignment_problems(count: usize, d: usize, batch: usize, tau: f64, margin: f64) -> Vec<AlignmentProblem> {
    let mut out = Vec::with_capacity(count);
    let mut seed = 0u64;
    while out.len() < count {
        let p = alignment_problem(seed, d, batch, tau);
        if p.kink_margin() > margin {
            out.push(p);
        }
        seed += 1;
        assert!(seed < 100_000, "no smooth problems found");
    }
    out
}

/// Random fusion instance with `choices` choices and `k` retrieved rows each.
pub fn fusion_instance(r: &mut ChaCha8Rng, d: usize, choices: usize, k: usize) -> InstanceFeatures {
    InstanceFeatures {
        id: "x".into(),
        choices: (0..choices)
            .map(|_| ChoiceFeatures {
                query: random_vector(r, d),
                retrieved: Some(random_matrix(r, k, d)),
                context: random_vector(r, d),
            })
            .collect(),
        answer: Some(r.gen_range(0..choices)),
    }
}

pub fn fusion_fd_check(seed: u64, d: usize, choices: usize, layout: HeadLayout) -> FdReport {
    let mut r = rng(seed);
    let lambda = r.gen_range(0.1..0.9);
    let mut head = FusionHead::init(d, 2, layout, lambda, seed).unwrap();
    // weights well away from the small init so attention is far from uniform
    for t in head.tensors_mut() {
        for x in t.iter_mut() {
            *x = r.gen_range(-1.0..1.0);
        }
    }
    let inst = fusion_instance(&mut r, d, choices, 3);
    let answer = inst.answer.unwrap();
    let mut grads = head.zeros_like();
    head.loss_and_grad(&inst, answer, &mut grads, 1.0).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let loss = |h: &FusionHead| {
        let mut scratch = h.zeros_like();
        h.loss_and_grad(&inst, answer, &mut scratch, 0.0).unwrap()
    };
    let mut numeric = Vec::new();
    for (ti, len) in analytic.iter().map(Vec::len).enumerate() {
        let mut col = Vec::with_capacity(len);
        for j in 0..len {
            let orig = head.tensors_mut()[ti][j];
            head.tensors_mut()[ti][j] = orig + FD_STEP;
            let up = loss(&head);
            head.tensors_mut()[ti][j] = orig - FD_STEP;
            let down = loss(&head);
            head.tensors_mut()[ti][j] = orig;
            col.push((up - down) / (2.0 * FD_STEP));
        }
        numeric.push(col);
    }
    compare(&analytic, &numeric)
}

use septa_core::vectordb::{cosine_to_record, DbMetadata, Hit, SubgraphVectorRecord, VectorDatabase};

/// Random database; roughly a quarter of the rows duplicate an earlier row
/// so that exact ties occur.
pub fn random_database(r: &mut ChaCha8Rng, len: usize, dim: usize) -> VectorDatabase {
    let mut vectors: Vec<Vec<f32>> = Vec::with_capacity(len);
    for i in 0..len {
        if i > 0 && r.gen_bool(0.25) {
            let j = r.gen_range(0..i);
            vectors.push(vectors[j].clone());
        } else {
            vectors.push((0..dim).map(|_| r.gen_range(-1.0f32..1.0)).collect());
        }
    }
    let records = vectors
        .into_iter()
        .enumerate()
        .map(|(center, vector)| SubgraphVectorRecord {
            center,
            node_count: 1,
            vector,
        })
        .collect();
    let metadata = DbMetadata {
        sampler: SamplerConfig::default(),
        model_hash: "test".into(),
        seed: 0,
    };
    VectorDatabase::new(dim, records, metadata).unwrap()
}

/// Single-threaded scan: score everything, stable sort by descending
/// similarity, keep the first `k`.
pub fn naive_top_k(db: &VectorDatabase, query: &[f64], k: usize) -> Vec<Hit> {
    let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut hits: Vec<Hit> = db
        .records()
        .iter()
        .enumerate()
        .map(|(index, rec)| Hit {
            index,
            similarity: cosine_to_record(query, norm, &rec.vector),
        })
        .collect();
    hits.sort_by(|a, b| b.similarity.partial_cmp(&a.similarity).unwrap());
    hits.truncate(k);
    hits
}

/// A query that is either random or a copy of a stored (possibly
/// duplicated) row.
pub fn random_query(r: &mut ChaCha8Rng, db: &VectorDatabase) -> Vec<f64> {
    if r.gen_bool(0.5) {
        let i = r.gen_range(0..db.len());
        db.record(i).vector.iter().map(|&x| x as f64).collect()
    } else {
        (0..db.dim()).map(|_| r.gen_range(-1.0..1.0)).collect()
    }
}

//! Text and graph encoders plus the affine projections into the shared space.
//!
//! All arithmetic is `f64`. Parameters are initialised from single-precision
//! draws so they survive the 4-byte on-disk format unchanged.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{normalize_tokens, KnowledgeGraph};
use crate::sampler::Subgraph;

/// Frozen sentence encoder. Implementations take `&self` only, so nothing
/// downstream can mutate them.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Pooled representation of `text`; the empty string maps to zeros.
    fn embed(&self, text: &str) -> Array1<f64>;
}

/// Signed feature hashing over the set of word uni- and bigrams,
/// L2-normalised. Each distinct n-gram counts once, so template words that
/// repeat across many sentences do not swamp the entity words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashTextEmbedder {
    pub dim: usize,
    pub max_order: usize,
    pub seed: u64,
}

impl HashTextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            max_order: 2,
            seed,
        }
    }

    fn hash(&self, gram: &[String]) -> u64 {
        // FNV-1a, keyed by the seed so different seeds give different buckets
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for (i, tok) in gram.iter().enumerate() {
            if i > 0 {
                h ^= 0x20;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            for b in tok.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        // final avalanche (splitmix64 finaliser)
        h ^= h >> 30;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^ (h >> 31)
    }
}

impl TextEmbedder for HashTextEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Array1<f64> {
        let tokens = normalize_tokens(text);
        let mut v = Array1::zeros(self.dim);
        if self.dim == 0 {
            return v;
        }
        let mut grams = std::collections::BTreeSet::new();
        for order in 1..=self.max_order {
            grams.extend(tokens.windows(order));
        }
        for gram in grams {
            let h = self.hash(gram);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            v /= norm;
        }
        v
    }
}

/// Cosine similarity with a flag for the zero-vector case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Similarity {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Similarity {
            value: 0.0,
            degenerate: true,
        };
    }
    Similarity {
        value: (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

pub(crate) fn uniform_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound) as f64)
}

pub(crate) fn uniform_vector<R: Rng + ?Sized>(rng: &mut R, len: usize, fan_in: usize) -> Array1<f64> {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    Array1::from_shape_fn(len, |_| rng.gen_range(-bound..=bound) as f64)
}

/// One message-passing layer. Weight matrices are `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnLayer {
    pub w_self: Array2<f64>,
    pub w_neigh: Array2<f64>,
    pub bias: Array1<f64>,
    /// One additive message embedding per relation: `|R| × out`.
    pub relation: Array2<f64>,
}

impl GnnLayer {
    pub fn zeros(input: usize, output: usize, relations: usize) -> Self {
        Self {
            w_self: Array2::zeros((output, input)),
            w_neigh: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
            relation: Array2::zeros((relations, output)),
        }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, relations: usize) -> Self {
        Self {
            w_self: uniform_matrix(rng, output, input, input),
            w_neigh: uniform_matrix(rng, output, input, input),
            bias: uniform_vector(rng, output, input),
            relation: uniform_matrix(rng, relations, output, input),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_self.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w_self.nrows()
    }
}

/// Relation-aware mean-aggregation graph encoder with mean pooling.
///
/// Each layer computes
/// `h_i' = relu(W_s h_i + b + mean_{(j, r) in N(i)} (W_n h_j + rel_r))`;
/// nodes without neighbors keep only the self term.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEncoder {
    pub layers: Vec<GnnLayer>,
}

/// Dense view of a subgraph's neighborhood structure.
#[derive(Debug, Clone)]
pub struct LocalStructure {
    /// Row-normalised neighbor counts, `n × n`.
    pub adjacency: Array2<f64>,
    /// Row-normalised relation counts, `n × |R|`.
    pub relations: Array2<f64>,
}

impl LocalStructure {
    pub fn new(graph: &KnowledgeGraph, subgraph: &Subgraph, num_relations: usize) -> Result<Self> {
        let n = subgraph.nodes.len();
        let pos: std::collections::HashMap<usize, usize> = subgraph
            .nodes
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, i))
            .collect();
        let mut adjacency = Array2::zeros((n, n));
        let mut relations = Array2::zeros((n, num_relations));
        for &e in &subgraph.edges {
            let t = graph.triple(e);
            if t.relation >= num_relations {
                return Err(Error::OutOfRange {
                    what: "relation id",
                    index: t.relation,
                    len: num_relations,
                });
            }
            let (Some(&a), Some(&b)) = (pos.get(&t.head), pos.get(&t.tail)) else {
                return Err(Error::Format(format!(
                    "edge {e} has an endpoint outside the subgraph"
                )));
            };
            adjacency[[a, b]] += 1.0;
            relations[[a, t.relation]] += 1.0;
            if a != b {
                adjacency[[b, a]] += 1.0;
                relations[[b, t.relation]] += 1.0;
            }
        }
        for i in 0..n {
            let deg: f64 = adjacency.row(i).sum();
            if deg > 0.0 {
                adjacency.row_mut(i).mapv_inplace(|x| x / deg);
                relations.row_mut(i).mapv_inplace(|x| x / deg);
            }
        }
        Ok(Self {
            adjacency,
            relations,
        })
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GraphForward {
    pub pooled: Array1<f64>,
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    structure: LocalStructure,
}

impl GraphForward {
    /// Pre-activation values of every layer (used to keep gradient checks
    /// away from the rectifier's kink).
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre_activations
    }
}

impl GraphEncoder {
    pub fn zeros(d_in: usize, d_g: usize, relations: usize, layers: usize) -> Self {
        let layers = (0..layers)
            .map(|l| GnnLayer::zeros(if l == 0 { d_in } else { d_g }, d_g, relations))
            .collect();
        Self { layers }
    }

    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        d_in: usize,
        d_g: usize,
        relations: usize,
        layers: usize,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| GnnLayer::init(rng, if l == 0 { d_in } else { d_g }, d_g, relations))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, GnnLayer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim(), GnnLayer::output_dim)
    }

    pub fn num_relations(&self) -> usize {
        self.layers.first().map_or(0, |l| l.relation.nrows())
    }

    pub fn forward(&self, graph: &KnowledgeGraph, subgraph: &Subgraph) -> Result<GraphForward> {
        if subgraph.is_empty() {
            return Err(Error::Empty("subgraph"));
        }
        if subgraph.features.ncols() != self.input_dim() {
            return Err(Error::Shape {
                context: "graph encoder input features",
                expected: self.input_dim(),
                got: subgraph.features.ncols(),
            });
        }
        let structure = LocalStructure::new(graph, subgraph, self.num_relations())?;
        let mut h = subgraph.features.clone();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut z = h.dot(&layer.w_self.t());
            z += &layer.bias;
            z += &structure.adjacency.dot(&h.dot(&layer.w_neigh.t()));
            z += &structure.relations.dot(&layer.relation);
            inputs.push(h);
            h = z.mapv(|x| x.max(0.0));
            pre_activations.push(z);
        }
        let pooled = h.mean_axis(Axis(0)).expect("non-empty subgraph");
        Ok(GraphForward {
            pooled,
            inputs,
            pre_activations,
            structure,
        })
    }

    /// Pooled subgraph embedding.
    pub fn encode(&self, graph: &KnowledgeGraph, subgraph: &Subgraph) -> Result<Array1<f64>> {
        Ok(self.forward(graph, subgraph)?.pooled)
    }

    /// Accumulates into `grads` the gradient of a scalar loss given its
    /// gradient with respect to the pooled output.
    pub fn backward(&self, cache: &GraphForward, d_pooled: ArrayView1<f64>, grads: &mut GraphEncoder) {
        let n = cache.inputs[0].nrows() as f64;
        let out_dim = self.output_dim();
        let mut dh = Array2::from_shape_fn((cache.inputs[0].nrows(), out_dim), |(_, j)| {
            d_pooled[j] / n
        });
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[l];
            let input = &cache.inputs[l];
            let dz = &dh * &z.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            let g = &mut grads.layers[l];
            g.w_self += &dz.t().dot(input);
            g.bias += &dz.sum_axis(Axis(0));
            let agg = cache.structure.adjacency.dot(input);
            g.w_neigh += &dz.t().dot(&agg);
            g.relation += &cache.structure.relations.t().dot(&dz);
            if l > 0 {
                let adj_t_dz = cache.structure.adjacency.t().dot(&dz);
                dh = dz.dot(&layer.w_self) + adj_t_dz.dot(&layer.w_neigh);
            }
        }
    }
}

/// Affine maps of graph and text embeddings into the shared `d`-space.
/// Matrices are `d × input`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub w_graph: Array2<f64>,
    pub b_graph: Array1<f64>,
    pub w_text: Array2<f64>,
    pub b_text: Array1<f64>,
}

impl ProjectionPair {
    pub fn zeros(d_g: usize, d_t: usize, d: usize) -> Self {
        Self {
            w_graph: Array2::zeros((d, d_g)),
            b_graph: Array1::zeros(d),
            w_text: Array2::zeros((d, d_t)),
            b_text: Array1::zeros(d),
        }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_g: usize, d_t: usize, d: usize) -> Self {
        Self {
            w_graph: uniform_matrix(rng, d, d_g, d_g),
            b_graph: uniform_vector(rng, d, d_g),
            w_text: uniform_matrix(rng, d, d_t, d_t),
            b_text: uniform_vector(rng, d, d_t),
        }
    }

    pub fn dim(&self) -> usize {
        self.b_graph.len()
    }

    pub fn project_graph(&self, pooled: ArrayView1<f64>) -> Result<Array1<f64>> {
        affine(&self.w_graph, &self.b_graph, pooled, "graph projection input")
    }

    pub fn project_text(&self, pooled: ArrayView1<f64>) -> Result<Array1<f64>> {
        affine(&self.w_text, &self.b_text, pooled, "text projection input")
    }
}

fn affine(
    w: &Array2<f64>,
    b: &Array1<f64>,
    x: ArrayView1<f64>,
    context: &'static str,
) -> Result<Array1<f64>> {
    if x.len() != w.ncols() {
        return Err(Error::Shape {
            context,
            expected: w.ncols(),
            got: x.len(),
        });
    }
    Ok(w.dot(&x) + b)
}

pub fn encode_text(embedder: &dyn TextEmbedder, text: &str) -> Array1<f64> {
    embedder.embed(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hash_embedder_contract() {
        let e = HashTextEmbedder::new(64, 1);
        let v = e.embed("house is made of wood. ");
        assert_eq!(v.len(), 64);
        assert!((v.dot(&v).sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(v, e.embed("house is made of wood. "));
        assert_eq!(v, e.embed("  house   is made\tof wood."));
        assert!(e.embed("").iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cosine_cases() {
        let u = array![1.0, 2.0, 3.0];
        assert!((cosine(u.view(), u.view()).value - 1.0).abs() < 1e-15);
        let a = array![1.0, 0.0];
        let b = array![0.0, 1.0];
        assert_eq!(cosine(a.view(), b.view()).value, 0.0);
        let v = array![-1.0, 0.5, 2.0];
        let scaled = &u * 3.5;
        assert!((cosine(scaled.view(), v.view()).value - cosine(u.view(), v.view()).value).abs() < 1e-15);
        let z = array![0.0, 0.0, 0.0];
        let s = cosine(z.view(), u.view());
        assert!(s.degenerate);
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn projection_identity_and_constant() {
        let mut p = ProjectionPair::zeros(3, 3, 3);
        p.w_graph = Array2::eye(3);
        let x = array![0.5, -1.0, 2.0];
        assert_eq!(p.project_graph(x.view()).unwrap(), x);
        p.b_text = array![1.0, 2.0, 3.0];
        assert_eq!(p.project_text(x.view()).unwrap(), p.b_text);
        let bad = array![1.0, 2.0];
        assert!(matches!(p.project_text(bad.view()), Err(Error::Shape { .. })));
    }

    #[test]
    fn projection_matches_naive_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ProjectionPair::init(&mut rng, 6, 5, 4);
        let x = uniform_vector(&mut rng, 6, 1);
        let got = p.project_graph(x.view()).unwrap();
        for i in 0..4 {
            let mut want = p.b_graph[i];
            for j in 0..6 {
                want += p.w_graph[[i, j]] * x[j];
            }
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn init_values_are_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = GraphEncoder::init(&mut rng, 4, 4, 2, 2);
        for x in enc.layers[0].w_self.iter() {
            assert_eq!(*x, (*x as f32) as f64);
        }
    }
}

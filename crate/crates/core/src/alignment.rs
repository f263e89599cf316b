//! Bidirectional InfoNCE alignment of the graph encoder with the frozen text
//! embedder.
//!
//! Only the graph encoder and the two projections are trainable; text
//! embeddings enter every computation as constants.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{GraphEncoder, GraphForward, ProjectionPair, TextEmbedder};
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::sampler::SamplerConfig;
use crate::textualize::{build_pair_dataset, GraphTextPair};

/// Shape of an alignment model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Node feature width.
    pub d_in: usize,
    /// Text embedder width.
    pub d_t: usize,
    /// Graph encoder hidden width.
    pub d_g: usize,
    /// Shared space width.
    pub d: usize,
    pub layers: usize,
    pub relations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub batch_size: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub pairs: usize,
    pub holdout_fraction: f64,
    /// Cut-off for the top-k retrieval accuracy in the training log.
    pub eval_k: usize,
    /// Optional cap on sentences per description.
    pub max_sentences: Option<usize>,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            temperature: 0.07,
            learning_rate: 1e-3,
            epochs: 30,
            pairs: 2000,
            holdout_fraction: 0.1,
            eval_k: 10,
            max_sentences: None,
            seed: 0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("held-out fraction must be in [0, 1)".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// The trainable half of the alignment model.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentParams {
    pub encoder: GraphEncoder,
    pub projection: ProjectionPair,
}

impl AlignmentParams {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            encoder: GraphEncoder::zeros(dims.d_in, dims.d_g, dims.relations, dims.layers),
            projection: ProjectionPair::zeros(dims.d_g, dims.d_t, dims.d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|x| *x = 0.0);
        z
    }

    /// Names of the trainable tensors, in storage order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.encoder.layers.len() {
            for t in ["w_self", "w_neigh", "bias", "relation"] {
                names.push(format!("gnn.{l}.{t}"));
            }
        }
        names.extend(["proj.w_graph", "proj.b_graph", "proj.w_text", "proj.b_text"].map(String::from));
        names
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.encoder.layers {
            out.push(l.w_self.as_slice().expect("standard layout"));
            out.push(l.w_neigh.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
            out.push(l.relation.as_slice().expect("standard layout"));
        }
        let p = &self.projection;
        out.push(p.w_graph.as_slice().expect("standard layout"));
        out.push(p.b_graph.as_slice().expect("standard layout"));
        out.push(p.w_text.as_slice().expect("standard layout"));
        out.push(p.b_text.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(l.w_self.as_slice_mut().expect("standard layout"));
            out.push(l.w_neigh.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
            out.push(l.relation.as_slice_mut().expect("standard layout"));
        }
        let p = &mut self.projection;
        out.push(p.w_graph.as_slice_mut().expect("standard layout"));
        out.push(p.b_graph.as_slice_mut().expect("standard layout"));
        out.push(p.w_text.as_slice_mut().expect("standard layout"));
        out.push(p.b_text.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(&mut f);
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub params: AlignmentParams,
    pub temperature: f64,
}

impl AlignmentModel {
    /// Fresh model with parameters drawn uniformly in `±1/sqrt(fan_in)`.
    pub fn init(dims: &ModelDims, temperature: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = GraphEncoder::init(&mut rng, dims.d_in, dims.d_g, dims.relations, dims.layers);
        let projection = ProjectionPair::init(&mut rng, dims.d_g, dims.d_t, dims.d);
        Self {
            params: AlignmentParams {
                encoder,
                projection,
            },
            temperature,
        }
    }

    pub fn dims(&self) -> ModelDims {
        let p = &self.params;
        ModelDims {
            d_in: p.encoder.input_dim(),
            d_t: p.projection.w_text.ncols(),
            d_g: p.encoder.output_dim(),
            d: p.projection.dim(),
            layers: p.encoder.layers.len(),
            relations: p.encoder.num_relations(),
        }
    }

    pub fn dim(&self) -> usize {
        self.params.projection.dim()
    }

    /// Projected graph embedding `e` of a subgraph.
    pub fn embed_graph(
        &self,
        graph: &KnowledgeGraph,
        subgraph: &crate::sampler::Subgraph,
    ) -> Result<Array1<f64>> {
        let pooled = self.params.encoder.encode(graph, subgraph)?;
        self.params.projection.project_graph(pooled.view())
    }

    /// Projected text embedding `h` of a string.
    pub fn embed_text(&self, embedder: &dyn TextEmbedder, text: &str) -> Result<Array1<f64>> {
        self.params
            .projection
            .project_text(embedder.embed(text).view())
    }

    /// Rounds every parameter to single precision, the on-disk precision.
    pub fn snap_to_f32(&mut self) {
        self.params.for_each_mut(|x| *x = (*x as f32) as f64);
        self.temperature = (self.temperature as f32) as f64;
    }
}

fn check_finite(m: ArrayView2<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_pair_shapes(e: ArrayView2<f64>, h: ArrayView2<f64>, tau: f64) -> Result<()> {
    if e.nrows() == 0 {
        return Err(Error::Empty("embedding batch"));
    }
    if e.dim() != h.dim() {
        return Err(Error::Shape {
            context: "contrastive batch",
            expected: e.len(),
            got: h.len(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be > 0".into()));
    }
    check_finite(e, "graph embeddings")?;
    check_finite(h, "text embeddings")
}

fn unit_rows(m: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut unit = m.to_owned();
    for (mut row, &n) in unit.rows_mut().into_iter().zip(norms.iter()) {
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    (unit, norms)
}

/// Cosine similarity matrix `S[i, j] = sim(a_i, b_j)`; zero rows give 0.
pub fn similarity_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (ua, _) = unit_rows(a);
    let (ub, _) = unit_rows(b);
    ua.dot(&ub.t()).mapv(|x| x.clamp(-1.0, 1.0))
}

/// Row-wise `-mean_i log softmax_j(S[i, :] / tau)[i]` and the softmax rows.
fn row_nce(s: ArrayView2<f64>, tau: f64) -> (f64, Array2<f64>) {
    let n = s.nrows();
    let mut probs = Array2::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        let row = s.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / tau));
        let mut denom = 0.0;
        for j in 0..n {
            let w = (row[j] / tau - max).exp();
            probs[[i, j]] = w;
            denom += w;
        }
        probs.row_mut(i).mapv_inplace(|w| w / denom);
        total += -(row[i] / tau - max - denom.ln());
    }
    (total / n as f64, probs)
}

/// Graph-to-text InfoNCE with in-batch negatives.
pub fn info_nce_g2t(e: ArrayView2<f64>, h: ArrayView2<f64>, tau: f64) -> Result<f64> {
    check_pair_shapes(e, h, tau)?;
    Ok(row_nce(similarity_matrix(e, h).view(), tau).0)
}

/// Text-to-graph InfoNCE: negatives are drawn over graph rows.
pub fn info_nce_t2g(e: ArrayView2<f64>, h: ArrayView2<f64>, tau: f64) -> Result<f64> {
    check_pair_shapes(e, h, tau)?;
    Ok(row_nce(similarity_matrix(h, e).view(), tau).0)
}

/// Mean of the two directional losses.
pub fn alignment_loss(e: ArrayView2<f64>, h: ArrayView2<f64>, tau: f64) -> Result<f64> {
    Ok(0.5 * (info_nce_g2t(e, h, tau)? + info_nce_t2g(e, h, tau)?))
}

/// Alignment loss with its gradients with respect to `E` and `H`.
pub fn alignment_loss_grad(
    e: ArrayView2<f64>,
    h: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_pair_shapes(e, h, tau)?;
    let n = e.nrows();
    let (ue, ne) = unit_rows(e);
    let (uh, nh) = unit_rows(h);
    let s = ue.dot(&uh.t()).mapv(|x| x.clamp(-1.0, 1.0));
    let st = s.t().to_owned();
    let (l1, p) = row_nce(s.view(), tau);
    let (l2, q) = row_nce(st.view(), tau);

    let eye = Array2::<f64>::eye(n);
    let scale = 0.5 / (n as f64 * tau);
    // dL/dS: g2t term plus the transposed t2g term
    let ds = (&p - &eye) * scale + (&q - &eye).t().to_owned() * scale;

    let du_e = ds.dot(&uh);
    let du_h = ds.t().dot(&ue);
    let de = unit_backward(&ue, &ne, &du_e);
    let dh = unit_backward(&uh, &nh, &du_h);
    Ok((0.5 * (l1 + l2), de, dh))
}

/// Pulls a gradient on unit rows back through `x -> x / |x|`.
fn unit_backward(unit: &Array2<f64>, norms: &Array1<f64>, du: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(du.dim());
    for i in 0..unit.nrows() {
        if norms[i] == 0.0 {
            continue;
        }
        let u = unit.row(i);
        let g = du.row(i);
        let radial = g.dot(&u);
        let mut row = out.row_mut(i);
        row.assign(&((&g - &(&u * radial)) / norms[i]));
    }
    out
}

/// Projected embeddings for a batch: row `i` of `E` is `e_i`, of `H` is `h_i`.
pub fn batch_embed(
    model: &AlignmentModel,
    embedder: &dyn TextEmbedder,
    graph: &KnowledgeGraph,
    pairs: &[GraphTextPair],
) -> Result<(Array2<f64>, Array2<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("pair batch"));
    }
    let d = model.dim();
    let rows: Vec<(Array1<f64>, Array1<f64>)> = pairs
        .par_iter()
        .map(|p| {
            Ok((
                model.embed_graph(graph, &p.subgraph)?,
                model.embed_text(embedder, &p.description)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut e = Array2::zeros((pairs.len(), d));
    let mut h = Array2::zeros((pairs.len(), d));
    for (i, (ei, hi)) in rows.into_iter().enumerate() {
        e.row_mut(i).assign(&ei);
        h.row_mut(i).assign(&hi);
    }
    Ok((e, h))
}

/// Loss and exact gradients for one batch given precomputed text embeddings.
fn batch_gradients(
    params: &AlignmentParams,
    tau: f64,
    graph: &KnowledgeGraph,
    pairs: &[&GraphTextPair],
    text: &[ArrayView1<f64>],
) -> Result<(f64, AlignmentParams)> {
    let n = pairs.len();
    let d = params.projection.dim();
    let forwards: Vec<GraphForward> = pairs
        .par_iter()
        .map(|p| params.encoder.forward(graph, &p.subgraph))
        .collect::<Result<_>>()?;
    let mut e = Array2::zeros((n, d));
    let mut h = Array2::zeros((n, d));
    for i in 0..n {
        e.row_mut(i)
            .assign(&params.projection.project_graph(forwards[i].pooled.view())?);
        h.row_mut(i).assign(&params.projection.project_text(text[i])?);
    }
    let (loss, de, dh) = alignment_loss_grad(e.view(), h.view(), tau)?;

    let mut grads = params.zeros_like();
    let proj = &params.projection;
    let pooled_grads: Vec<Array1<f64>> = (0..n).map(|i| proj.w_graph.t().dot(&de.row(i))).collect();
    for i in 0..n {
        let dei = de.row(i);
        let dhi = dh.row(i);
        let g = &mut grads.projection;
        g.w_graph += &outer(dei, forwards[i].pooled.view());
        g.b_graph += &dei;
        g.w_text += &outer(dhi, text[i]);
        g.b_text += &dhi;
    }
    let encoder_grads: Vec<GraphEncoder> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = grads.encoder.clone();
            params
                .encoder
                .backward(&forwards[i], pooled_grads[i].view(), &mut g);
            g
        })
        .collect();
    // sequential sum keeps the result independent of thread scheduling
    for g in &encoder_grads {
        for (dst, src) in grads.encoder.layers.iter_mut().zip(&g.layers) {
            dst.w_self += &src.w_self;
            dst.w_neigh += &src.w_neigh;
            dst.bias += &src.bias;
            dst.relation += &src.relation;
        }
    }
    Ok((loss, grads))
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Alignment loss of a batch and its exact gradient with respect to every
/// trainable parameter. The text embedder contributes constants only.
pub fn loss_gradients(
    model: &AlignmentModel,
    embedder: &dyn TextEmbedder,
    graph: &KnowledgeGraph,
    pairs: &[GraphTextPair],
) -> Result<(f64, AlignmentParams)> {
    if pairs.is_empty() {
        return Err(Error::Empty("pair batch"));
    }
    let text: Vec<Array1<f64>> = pairs.iter().map(|p| embedder.embed(&p.description)).collect();
    let views: Vec<ArrayView1<f64>> = text.iter().map(|t| t.view()).collect();
    let refs: Vec<&GraphTextPair> = pairs.iter().collect();
    batch_gradients(&model.params, model.temperature, graph, &refs, &views)
}

/// Top-1 and top-k retrieval accuracy between matched rows, both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalAccuracy {
    pub k: usize,
    pub candidates: usize,
    pub g2t_top1: f64,
    pub g2t_topk: f64,
    pub t2g_top1: f64,
    pub t2g_topk: f64,
}

/// Rank (0-based) of the true partner in each row of `s`. Ties go to the
/// lower column index.
pub fn partner_ranks(s: ArrayView2<f64>) -> Vec<usize> {
    (0..s.nrows())
        .map(|i| {
            let own = s[[i, i]];
            (0..s.ncols())
                .filter(|&j| j != i && (s[[i, j]] > own || (s[[i, j]] == own && j < i)))
                .count()
        })
        .collect()
}

pub fn retrieval_accuracy(e: ArrayView2<f64>, h: ArrayView2<f64>, k: usize) -> RetrievalAccuracy {
    let n = e.nrows();
    let s = similarity_matrix(e, h);
    let g2t = partner_ranks(s.view());
    let t2g = partner_ranks(s.t());
    let frac = |ranks: &[usize], cut: usize| {
        if n == 0 {
            0.0
        } else {
            ranks.iter().filter(|&&r| r < cut).count() as f64 / n as f64
        }
    };
    RetrievalAccuracy {
        k,
        candidates: n,
        g2t_top1: frac(&g2t, 1),
        g2t_topk: frac(&g2t, k),
        t2g_top1: frac(&t2g, 1),
        t2g_topk: frac(&t2g, k),
    }
}

pub fn eval_retrieval_accuracy(
    model: &AlignmentModel,
    embedder: &dyn TextEmbedder,
    graph: &KnowledgeGraph,
    pairs: &[GraphTextPair],
    k: usize,
) -> Result<RetrievalAccuracy> {
    let (e, h) = batch_embed(model, embedder, graph, pairs)?;
    Ok(retrieval_accuracy(e.view(), h.view(), k))
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub g2t_top1: f64,
    pub g2t_topk: f64,
    pub t2g_top1: f64,
    pub t2g_topk: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AlignmentModel,
    /// Entry 0 describes the initial model; entry `i` the state after epoch `i`.
    pub log: Vec<EpochLog>,
    pub train_pairs: Vec<GraphTextPair>,
    pub heldout_pairs: Vec<GraphTextPair>,
}

fn chunked_loss(
    params: &AlignmentParams,
    tau: f64,
    graph: &KnowledgeGraph,
    pairs: &[GraphTextPair],
    text: &[Array1<f64>],
    chunk: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (ps, ts) in pairs.chunks(chunk.max(1)).zip(text.chunks(chunk.max(1))) {
        let d = params.projection.dim();
        let mut e = Array2::zeros((ps.len(), d));
        let mut h = Array2::zeros((ps.len(), d));
        for (i, (p, t)) in ps.iter().zip(ts).enumerate() {
            let pooled = params.encoder.encode(graph, &p.subgraph)?;
            e.row_mut(i).assign(&params.projection.project_graph(pooled.view())?);
            h.row_mut(i).assign(&params.projection.project_text(t.view())?);
        }
        total += alignment_loss(e.view(), h.view(), tau)? * ps.len() as f64;
        count += ps.len();
    }
    Ok(total / count as f64)
}

fn epoch_report(
    model: &AlignmentModel,
    embedder: &dyn TextEmbedder,
    graph: &KnowledgeGraph,
    heldout: &[GraphTextPair],
    heldout_text: &[Array1<f64>],
    config: &AlignmentConfig,
    epoch: usize,
    train_loss: f64,
) -> Result<EpochLog> {
    let heldout_loss = chunked_loss(
        &model.params,
        model.temperature,
        graph,
        heldout,
        heldout_text,
        config.batch_size,
    )?;
    let acc = if heldout.is_empty() {
        RetrievalAccuracy {
            k: config.eval_k,
            candidates: 0,
            g2t_top1: 0.0,
            g2t_topk: 0.0,
            t2g_top1: 0.0,
            t2g_topk: 0.0,
        }
    } else {
        eval_retrieval_accuracy(model, embedder, graph, heldout, config.eval_k)?
    };
    Ok(EpochLog {
        epoch,
        train_loss,
        heldout_loss,
        g2t_top1: acc.g2t_top1,
        g2t_topk: acc.g2t_topk,
        t2g_top1: acc.t2g_top1,
        t2g_topk: acc.t2g_topk,
    })
}

/// Trains the graph encoder and projections with plain mini-batch SGD.
///
/// The pair dataset is built from `sampler`; the last `holdout_fraction` of
/// it is held out for evaluation. Returned parameters are rounded to single
/// precision.
pub fn train_alignment(
    graph: &KnowledgeGraph,
    embedder: &dyn TextEmbedder,
    dims: &ModelDims,
    config: &AlignmentConfig,
    sampler: &SamplerConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    sampler.validate()?;
    if graph.num_nodes() == 0 {
        return Err(Error::EmptyGraph);
    }
    if dims.d_t != embedder.dim() {
        return Err(Error::Shape {
            context: "text embedder width",
            expected: dims.d_t,
            got: embedder.dim(),
        });
    }
    if dims.d_in != graph.feature_dim() {
        return Err(Error::Shape {
            context: "node feature width",
            expected: dims.d_in,
            got: graph.feature_dim(),
        });
    }
    let pairs = build_pair_dataset(
        graph,
        sampler,
        config.pairs,
        config.seed,
        config.max_sentences,
    )?;
    let heldout_len = ((pairs.len() as f64) * config.holdout_fraction).round() as usize;
    let split = pairs.len() - heldout_len.min(pairs.len().saturating_sub(1));
    let (train, heldout) = pairs.split_at(split);
    let (train, heldout) = (train.to_vec(), heldout.to_vec());

    let train_text: Vec<Array1<f64>> = train.iter().map(|p| embedder.embed(&p.description)).collect();
    let heldout_text: Vec<Array1<f64>> =
        heldout.iter().map(|p| embedder.embed(&p.description)).collect();

    let mut model = AlignmentModel::init(dims, config.temperature, config.seed);
    let initial_loss = chunked_loss(
        &model.params,
        model.temperature,
        graph,
        &train,
        &train_text,
        config.batch_size,
    )?;
    let mut log = vec![epoch_report(
        &model,
        embedder,
        graph,
        &heldout,
        &heldout_text,
        config,
        0,
        initial_loss,
    )?];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            if batch.len() < 2 && config.batch_size >= 2 {
                continue;
            }
            let ps: Vec<&GraphTextPair> = batch.iter().map(|&i| &train[i]).collect();
            let ts: Vec<ArrayView1<f64>> = batch.iter().map(|&i| train_text[i].view()).collect();
            let (loss, grads) = batch_gradients(&model.params, model.temperature, graph, &ps, &ts)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            model.params.add_scaled(&grads, -config.learning_rate);
            if !model.params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = if batches > 0 {
            epoch_loss / batches as f64
        } else {
            0.0
        };
        log.push(epoch_report(
            &model,
            embedder,
            graph,
            &heldout,
            &heldout_text,
            config,
            epoch,
            train_loss,
        )?);
    }
    model.snap_to_f32();
    Ok(TrainOutcome {
        model,
        log,
        train_pairs: train,
        heldout_pairs: heldout,
    })
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = Vec::new();
    for entry in log {
        serde_json::to_writer(&mut out, entry)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

const MODEL_MAGIC: &[u8; 4] = b"SGAM";
const MODEL_VERSION: u32 = 1;

/// Serialises the model: a header of `u32` fields (magic, version, d_in, d_g,
/// d, layers, relations, d_t), the temperature as `f32`, then every tensor
/// row-major as little-endian `f32` in [`AlignmentParams::tensor_names`] order.
pub fn model_to_bytes(model: &AlignmentModel) -> Vec<u8> {
    let dims = model.dims();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    for v in [
        MODEL_VERSION,
        dims.d_in as u32,
        dims.d_g as u32,
        dims.d as u32,
        dims.layers as u32,
        dims.relations as u32,
        dims.d_t as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(model.temperature as f32).to_le_bytes());
    for t in model.params.tensors() {
        for &x in t {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<AlignmentModel> {
    let mut r = crate::binio::Reader::new(bytes, "model file");
    r.magic(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "model file version {version}, expected {MODEL_VERSION}"
        )));
    }
    let d_in = r.u32()? as usize;
    let d_g = r.u32()? as usize;
    let d = r.u32()? as usize;
    let layers = r.u32()? as usize;
    let relations = r.u32()? as usize;
    let d_t = r.u32()? as usize;
    let temperature = r.f32()? as f64;
    let dims = ModelDims {
        d_in,
        d_t,
        d_g,
        d,
        layers,
        relations,
    };
    let mut params = AlignmentParams::zeros(&dims);
    let expected: usize = params.num_params();
    if r.remaining() != expected * 4 {
        return Err(Error::Format(format!(
            "model file payload is {} bytes, expected {}",
            r.remaining(),
            expected * 4
        )));
    }
    for t in params.tensors_mut() {
        for x in t.iter_mut() {
            *x = r.f32()? as f64;
        }
    }
    Ok(AlignmentModel {
        params,
        temperature,
    })
}

pub fn save_model(model: &AlignmentModel, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&model_to_bytes(model))
        .map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<AlignmentModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

//! Attention-based knowledge fusion and answer scoring.
//!
//! For a query embedding `t`, retrieved subgraph vectors `G` (`k × d`) and the
//! bare question/choice embedding `v`:
//!
//! ```text
//! alpha_h = (t W_Q^h)(G W_K^h)^T / sqrt(d_h)
//! r       = concat_h(softmax(alpha_h) G W_V^h) W_O
//! p_hat   = w1 . (t + r) + b1
//! p_tilde = w2 . v + b2
//! p       = lambda p_hat + (1 - lambda) p_tilde
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{uniform_matrix, uniform_vector};
use crate::error::{Error, Result};
use crate::optim::RAdam;

/// How the per-head projection width relates to `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadLayout {
    /// `d_h = d / H`.
    Split,
    /// `d_h = d` for every head; the concatenation is `H * d` wide.
    FullWidth,
}

impl std::str::FromStr for HeadLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(Self::Split),
            "full-width" | "full" => Ok(Self::FullWidth),
            other => Err(Error::Config(format!("unknown head layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub layout: HeadLayout,
    pub w_query: Vec<Array2<f64>>,
    pub w_key: Vec<Array2<f64>>,
    pub w_value: Vec<Array2<f64>>,
    /// `(H * d_h) × d`.
    pub w_out: Array2<f64>,
    pub w_knowledge: Array1<f64>,
    /// Length-1 so it can be handled like any other tensor.
    pub b_knowledge: Array1<f64>,
    pub w_context: Array1<f64>,
    pub b_context: Array1<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub output: Array1<f64>,
    /// `H × k`, each row a softmax distribution.
    pub weights: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceScore {
    pub p_hat: f64,
    pub p_tilde: f64,
    pub p: f64,
    /// Empty when the knowledge path ran without retrieved vectors.
    pub attention: Array2<f64>,
}

fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exp = logits.mapv(|x| (x - max).exp());
    let sum = exp.sum();
    exp / sum
}

impl FusionHead {
    pub fn init(d: usize, heads: usize, layout: HeadLayout, lambda: f64, seed: u64) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("head count must be >= 1".into()));
        }
        if layout == HeadLayout::Split && d % heads != 0 {
            return Err(Error::Config(format!(
                "head count {heads} does not divide d = {d}"
            )));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {lambda}")));
        }
        let dh = match layout {
            HeadLayout::Split => d / heads,
            HeadLayout::FullWidth => d,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mats = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Array2<f64>> {
            (0..n).map(|_| uniform_matrix(rng, d, dh, d)).collect()
        };
        let w_query = mats(heads, &mut rng);
        let w_key = mats(heads, &mut rng);
        let w_value = mats(heads, &mut rng);
        let w_out = uniform_matrix(&mut rng, heads * dh, d, heads * dh);
        let w_knowledge = uniform_vector(&mut rng, d, d);
        let w_context = uniform_vector(&mut rng, d, d);
        Ok(Self {
            layout,
            w_query,
            w_key,
            w_value,
            w_out,
            w_knowledge,
            b_knowledge: Array1::zeros(1),
            w_context,
            b_context: Array1::zeros(1),
            lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_knowledge.len()
    }

    pub fn heads(&self) -> usize {
        self.w_query.len()
    }

    pub fn head_dim(&self) -> usize {
        self.w_query.first().map_or(0, |m| m.ncols())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for kind in ["w_query", "w_key", "w_value"] {
            for h in 0..self.heads() {
                names.push(format!("{kind}.{h}"));
            }
        }
        names.extend(
            ["w_out", "w_knowledge", "b_knowledge", "w_context", "b_context"].map(String::from),
        );
        names
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for group in [&self.w_query, &self.w_key, &self.w_value] {
            for m in group {
                out.push(m.as_slice().expect("standard layout"));
            }
        }
        out.push(self.w_out.as_slice().expect("standard layout"));
        out.push(self.w_knowledge.as_slice().expect("standard layout"));
        out.push(self.b_knowledge.as_slice().expect("standard layout"));
        out.push(self.w_context.as_slice().expect("standard layout"));
        out.push(self.b_context.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for group in [&mut self.w_query, &mut self.w_key, &mut self.w_value] {
            for m in group.iter_mut() {
                out.push(m.as_slice_mut().expect("standard layout"));
            }
        }
        out.push(self.w_out.as_slice_mut().expect("standard layout"));
        out.push(self.w_knowledge.as_slice_mut().expect("standard layout"));
        out.push(self.b_knowledge.as_slice_mut().expect("standard layout"));
        out.push(self.w_context.as_slice_mut().expect("standard layout"));
        out.push(self.b_context.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn snap_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = (*x as f32) as f64);
        }
    }

    fn check_dims(&self, t: ArrayView1<f64>, g: Option<ArrayView2<f64>>) -> Result<()> {
        let d = self.dim();
        if t.len() != d {
            return Err(Error::Shape {
                context: "fusion query",
                expected: d,
                got: t.len(),
            });
        }
        if let Some(g) = g {
            if g.nrows() == 0 {
                return Err(Error::Empty("retrieved subgraph vectors"));
            }
            if g.ncols() != d {
                return Err(Error::Shape {
                    context: "retrieved subgraph vectors",
                    expected: d,
                    got: g.ncols(),
                });
            }
        }
        Ok(())
    }

    /// Multi-head attention with `t` as the single query over the rows of `g`.
    pub fn attend(&self, t: ArrayView1<f64>, g: ArrayView2<f64>) -> Result<Attention> {
        self.check_dims(t, Some(g))?;
        Ok(self.attend_cached(t, g).into_attention())
    }

    fn attend_cached(&self, t: ArrayView1<f64>, g: ArrayView2<f64>) -> AttentionCache {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let heads = self.heads();
        let mut weights = Array2::zeros((heads, g.nrows()));
        let mut concat = Array1::zeros(heads * dh);
        let mut queries = Vec::with_capacity(heads);
        let mut keys = Vec::with_capacity(heads);
        let mut values = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = self.w_query[h].t().dot(&t);
            let k = g.dot(&self.w_key[h]);
            let v = g.dot(&self.w_value[h]);
            let w = softmax((k.dot(&q) * scale).view());
            concat
                .slice_mut(ndarray::s![h * dh..(h + 1) * dh])
                .assign(&v.t().dot(&w));
            weights.row_mut(h).assign(&w);
            queries.push(q);
            keys.push(k);
            values.push(v);
        }
        let output = self.w_out.t().dot(&concat);
        AttentionCache {
            output,
            weights,
            concat,
            queries,
            keys,
            values,
        }
    }

    /// Knowledge score, context score and their `lambda` blend.
    pub fn score_choice(
        &self,
        t: ArrayView1<f64>,
        r: ArrayView1<f64>,
        v: ArrayView1<f64>,
    ) -> Result<ChoiceScore> {
        let d = self.dim();
        for (x, ctx) in [(t, "fusion query"), (r, "attention output"), (v, "context embedding")] {
            if x.len() != d {
                return Err(Error::Shape {
                    context: ctx,
                    expected: d,
                    got: x.len(),
                });
            }
        }
        let p_hat = self.w_knowledge.dot(&(&t + &r)) + self.b_knowledge[0];
        let p_tilde = self.w_context.dot(&v) + self.b_context[0];
        Ok(ChoiceScore {
            p_hat,
            p_tilde,
            p: self.lambda * p_hat + (1.0 - self.lambda) * p_tilde,
            attention: Array2::zeros((0, 0)),
        })
    }

    /// Scores one choice. Without retrieved vectors the attention output is
    /// taken as zero.
    pub fn score(&self, features: &ChoiceFeatures) -> Result<ChoiceScore> {
        let t = features.query.view();
        self.check_dims(t, features.retrieved.as_ref().map(|g| g.view()))?;
        match &features.retrieved {
            Some(g) => {
                let att = self.attend_cached(t, g.view());
                let mut s = self.score_choice(t, att.output.view(), features.context.view())?;
                s.attention = att.weights;
                Ok(s)
            }
            None => self.score_choice(
                t,
                Array1::zeros(self.dim()).view(),
                features.context.view(),
            ),
        }
    }

    /// Cross-entropy of the softmax over choices against `answer`, with its
    /// gradient accumulated (scaled by `weight`) into `grads`.
    pub fn loss_and_grad(
        &self,
        instance: &InstanceFeatures,
        answer: usize,
        grads: &mut FusionHead,
        weight: f64,
    ) -> Result<f64> {
        let mut caches = Vec::with_capacity(instance.choices.len());
        let mut scores = Vec::with_capacity(instance.choices.len());
        for c in &instance.choices {
            let t = c.query.view();
            self.check_dims(t, c.retrieved.as_ref().map(|g| g.view()))?;
            let cache = c.retrieved.as_ref().map(|g| self.attend_cached(t, g.view()));
            let r = cache
                .as_ref()
                .map_or_else(|| Array1::zeros(self.dim()), |a| a.output.clone());
            let s = self.score_choice(t, r.view(), c.context.view())?;
            scores.push(s.p);
            caches.push((cache, r));
        }
        let scores = Array1::from(scores);
        let probs = softmax(scores.view());
        let loss = -probs[answer].ln();

        let lambda = self.lambda;
        for (ci, c) in instance.choices.iter().enumerate() {
            let dp = weight * (probs[ci] - if ci == answer { 1.0 } else { 0.0 });
            let d_hat = lambda * dp;
            let d_tilde = (1.0 - lambda) * dp;
            let (cache, r) = &caches[ci];
            grads.w_knowledge.scaled_add(d_hat, &(&c.query + r));
            grads.b_knowledge[0] += d_hat;
            grads.w_context.scaled_add(d_tilde, &c.context);
            grads.b_context[0] += d_tilde;
            if let (Some(cache), Some(g)) = (cache, &c.retrieved) {
                let dr = &self.w_knowledge * d_hat;
                self.attention_backward(c.query.view(), g.view(), cache, dr.view(), grads);
            }
        }
        Ok(loss)
    }

    fn attention_backward(
        &self,
        t: ArrayView1<f64>,
        g: ArrayView2<f64>,
        cache: &AttentionCache,
        dr: ArrayView1<f64>,
        grads: &mut FusionHead,
    ) {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        grads.w_out += &outer(cache.concat.view(), dr);
        let dconcat = self.w_out.dot(&dr);
        for h in 0..self.heads() {
            let drh = dconcat.slice(ndarray::s![h * dh..(h + 1) * dh]);
            let w = cache.weights.row(h);
            let v = &cache.values[h];
            let dv = outer(w, drh);
            let dw = v.dot(&drh);
            let dot = w.dot(&dw);
            let dlogits = &w * &(&dw - dot);
            let dk = outer(dlogits.view(), cache.queries[h].view()) * scale;
            let dq = cache.keys[h].t().dot(&dlogits) * scale;
            grads.w_query[h] += &outer(t, dq.view());
            grads.w_key[h] += &g.t().dot(&dk);
            grads.w_value[h] += &g.t().dot(&dv);
        }
    }

    /// Mean cross-entropy over labelled instances.
    pub fn mean_loss(&self, instances: &[InstanceFeatures]) -> Result<f64> {
        let mut scratch = self.zeros_like();
        let mut total = 0.0;
        let mut n = 0usize;
        for inst in instances {
            let answer = inst.answer.ok_or_else(|| Error::MissingLabel(inst.id.clone()))?;
            total += self.loss_and_grad(inst, answer, &mut scratch, 0.0)?;
            n += 1;
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }

    /// Index of the highest combined score; ties go to the lowest index.
    pub fn predict(&self, instance: &InstanceFeatures) -> Result<(usize, Vec<ChoiceScore>)> {
        let scores = instance
            .choices
            .iter()
            .map(|c| self.score(c))
            .collect::<Result<Vec<_>>>()?;
        Ok((argmax(scores.iter().map(|s| s.p)), scores))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(HEAD_MAGIC);
        for v in [
            HEAD_VERSION,
            self.dim() as u32,
            self.heads() as u32,
            self.head_dim() as u32,
            match self.layout {
                HeadLayout::Split => 0,
                HeadLayout::FullWidth => 1,
            },
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.lambda.to_le_bytes());
        for t in self.tensors() {
            for &x in t {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::binio::Reader::new(bytes, "fusion head file");
        r.magic(HEAD_MAGIC)?;
        let version = r.u32()?;
        if version != HEAD_VERSION {
            return Err(Error::Format(format!(
                "fusion head version {version}, expected {HEAD_VERSION}"
            )));
        }
        let d = r.u32()? as usize;
        let heads = r.u32()? as usize;
        let dh = r.u32()? as usize;
        let layout = match r.u32()? {
            0 => HeadLayout::Split,
            1 => HeadLayout::FullWidth,
            other => return Err(Error::Format(format!("unknown head layout tag {other}"))),
        };
        let lambda = r.f64()?;
        let mut head = FusionHead::init(d, heads, layout, lambda, 0)?;
        if head.head_dim() != dh {
            return Err(Error::Format("fusion head width disagrees with layout".into()));
        }
        let expected: usize = head.tensors().iter().map(|t| t.len()).sum();
        if r.remaining() != expected * 4 {
            return Err(Error::Format(format!(
                "fusion head payload is {} bytes, expected {}",
                r.remaining(),
                expected * 4
            )));
        }
        for t in head.tensors_mut() {
            for x in t.iter_mut() {
                *x = r.f32()? as f64;
            }
        }
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

const HEAD_MAGIC: &[u8; 4] = b"SGFH";
const HEAD_VERSION: u32 = 1;

struct AttentionCache {
    output: Array1<f64>,
    weights: Array2<f64>,
    concat: Array1<f64>,
    queries: Vec<Array1<f64>>,
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
}

impl AttentionCache {
    fn into_attention(self) -> Attention {
        Attention {
            output: self.output,
            weights: self.weights,
        }
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Frozen upstream inputs for scoring one choice.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceFeatures {
    /// Enhanced query embedding `t`.
    pub query: Array1<f64>,
    /// Retrieved subgraph vectors; `None` disables the attention term.
    pub retrieved: Option<Array2<f64>>,
    /// Bare question/choice embedding `v`.
    pub context: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFeatures {
    pub id: String,
    pub choices: Vec<ChoiceFeatures>,
    pub answer: Option<usize>,
}

/// Dev-set quantity watched by early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopMetric {
    Accuracy,
    Loss,
}

impl std::str::FromStr for StopMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Self::Accuracy),
            "loss" => Ok(Self::Loss),
            other => Err(Error::Config(format!("unknown stop metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub heads: usize,
    pub layout: HeadLayout,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    pub stop_on: StopMetric,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            layout: HeadLayout::Split,
            lambda: 0.5,
            learning_rate: 1e-2,
            epochs: 30,
            patience: 3,
            stop_on: StopMetric::Accuracy,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedFusion {
    pub head: FusionHead,
    pub log: Vec<FusionEpoch>,
    pub best_epoch: usize,
}

pub fn accuracy(head: &FusionHead, instances: &[InstanceFeatures]) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for inst in instances {
        let answer = inst.answer.ok_or_else(|| Error::MissingLabel(inst.id.clone()))?;
        if head.predict(inst)?.0 == answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}

/// Trains a fresh head with RAdam on softmax cross-entropy over choices.
/// Stops after `patience` epochs without dev improvement and returns the
/// best head seen (rounded to single precision).
pub fn train_fusion(
    d: usize,
    train: &[InstanceFeatures],
    dev: &[InstanceFeatures],
    config: &FusionConfig,
) -> Result<TrainedFusion> {
    if train.is_empty() {
        return Err(Error::Empty("fusion training set"));
    }
    for inst in train.iter().chain(dev) {
        if inst.answer.is_none() {
            return Err(Error::MissingLabel(inst.id.clone()));
        }
    }
    let mut head = FusionHead::init(d, config.heads, config.layout, config.lambda, config.seed)?;
    head.snap_to_f32();
    let shapes: Vec<usize> = head.tensors().iter().map(|t| t.len()).collect();
    let mut opt = RAdam::new(config.learning_rate, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xf05e));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let watched = if dev.is_empty() { train } else { dev };
    let evaluate = |h: &FusionHead| -> Result<(f64, f64)> {
        Ok((h.mean_loss(watched)?, accuracy(h, watched)?))
    };
    let score = |(loss, acc): (f64, f64)| match config.stop_on {
        StopMetric::Accuracy => acc,
        StopMetric::Loss => -loss,
    };
    let mut best = head.clone();
    let (dev_loss, dev_accuracy) = evaluate(&head)?;
    let mut best_score = score((dev_loss, dev_accuracy));
    let mut best_epoch = 0;
    let mut log = vec![FusionEpoch {
        epoch: 0,
        train_loss: head.mean_loss(train)?,
        dev_loss,
        dev_accuracy,
    }];
    let mut stale = 0usize;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(config.batch_size.max(1)).enumerate() {
            let mut grads = head.zeros_like();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let answer = train[i].answer.expect("checked above");
                total += head.loss_and_grad(&train[i], answer, &mut grads, w)?;
            }
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: total,
                });
            }
            opt.step(head.tensors_mut(), grads.tensors());
        }
        let (dev_loss, dev_accuracy) = evaluate(&head)?;
        log.push(FusionEpoch {
            epoch,
            train_loss: total / train.len() as f64,
            dev_loss,
            dev_accuracy,
        });
        let s = score((dev_loss, dev_accuracy));
        if s > best_score {
            best_score = s;
            best = head.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    best.snap_to_f32();
    Ok(TrainedFusion {
        head: best,
        log,
        best_epoch,
    })
}

//! End-to-end question answering: feature construction per choice, fusion
//! training, prediction files, ablations and sweeps.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentModel, ModelDims};
use crate::encoders::TextEmbedder;
use crate::error::{Error, Result};
use crate::fusion::{accuracy, train_fusion, ChoiceFeatures, FusionConfig, FusionHead, InstanceFeatures};
use crate::kg::{KnowledgeGraph, NodeId};
use crate::query::{build_enhanced_query, qa_text, retrieve_subgraphs, QAInstance, DEFAULT_TRIPLETS};
use crate::sampler::SamplerConfig;
use crate::vectordb::{build_database, VectorDatabase};

/// Number of subgraph vectors retrieved per query by default.
pub const DEFAULT_RETRIEVED: usize = 10;

/// Frozen upstream artifacts shared by every query.
#[derive(Clone, Copy)]
pub struct Resources<'a> {
    pub graph: &'a KnowledgeGraph,
    pub embedder: &'a dyn TextEmbedder,
    pub model: &'a AlignmentModel,
    pub db: &'a VectorDatabase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySettings {
    /// Retrieved subgraph vectors per choice.
    pub k: usize,
    /// Fact triplets appended to each query.
    pub triplets: usize,
    /// When false the knowledge score runs with a zero attention output.
    pub use_subgraphs: bool,
}

impl Default for QuerySettings {
    fn default() -> Self {
        Self {
            k: DEFAULT_RETRIEVED,
            triplets: DEFAULT_TRIPLETS,
            use_subgraphs: true,
        }
    }
}

/// Features for one instance plus the retrieved centers of each choice.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurized {
    pub features: InstanceFeatures,
    pub retrieved: Vec<Vec<NodeId>>,
}

pub fn choice_features(
    res: &Resources<'_>,
    question: &str,
    choice: &str,
    settings: &QuerySettings,
) -> Result<(ChoiceFeatures, Vec<NodeId>)> {
    let query = build_enhanced_query(
        res.graph,
        res.embedder,
        res.model,
        question,
        choice,
        settings.triplets,
    )?;
    let (retrieved, centers) = if settings.use_subgraphs {
        if settings.k == 0 {
            return Err(Error::Config("k must be >= 1 when subgraphs are used".into()));
        }
        let r = retrieve_subgraphs(res.db, &query, settings.k)?;
        (Some(r.vectors), r.centers)
    } else {
        (None, Vec::new())
    };
    let context = res.model.embed_text(res.embedder, &qa_text(question, choice))?;
    Ok((
        ChoiceFeatures {
            query: query.embedding,
            retrieved,
            context,
        },
        centers,
    ))
}

pub fn instance_features(
    res: &Resources<'_>,
    instance: &QAInstance,
    settings: &QuerySettings,
) -> Result<Featurized> {
    instance.validate()?;
    let mut choices = Vec::with_capacity(instance.choices.len());
    let mut retrieved = Vec::with_capacity(instance.choices.len());
    for choice in &instance.choices {
        let (f, centers) = choice_features(res, &instance.question, choice, settings)?;
        choices.push(f);
        retrieved.push(centers);
    }
    Ok(Featurized {
        features: InstanceFeatures {
            id: instance.id.clone(),
            choices,
            answer: instance.answer_index,
        },
        retrieved,
    })
}

/// Featurizes instances in parallel; output order follows input order.
pub fn featurize(
    res: &Resources<'_>,
    instances: &[QAInstance],
    settings: &QuerySettings,
) -> Result<Vec<Featurized>> {
    instances
        .par_iter()
        .map(|inst| {
            instance_features(res, inst, settings)
                .map_err(|e| e.context(format!("instance `{}`", inst.id)))
        })
        .collect()
}

fn features_of(items: &[Featurized]) -> Vec<InstanceFeatures> {
    items.iter().map(|f| f.features.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub predicted: usize,
    pub p_hat: Vec<f64>,
    pub p_tilde: Vec<f64>,
    pub p: Vec<f64>,
    /// Retrieved center node ids, one list per choice.
    pub retrieved: Vec<Vec<NodeId>>,
}

pub fn predict(head: &FusionHead, item: &Featurized) -> Result<Prediction> {
    let (predicted, scores) = head
        .predict(&item.features)
        .map_err(|e| e.context(format!("instance `{}`", item.features.id)))?;
    Ok(Prediction {
        id: item.features.id.clone(),
        predicted,
        p_hat: scores.iter().map(|s| s.p_hat).collect(),
        p_tilde: scores.iter().map(|s| s.p_tilde).collect(),
        p: scores.iter().map(|s| s.p).collect(),
        retrieved: item.retrieved.clone(),
    })
}

pub fn predict_all(head: &FusionHead, items: &[Featurized]) -> Result<Vec<Prediction>> {
    items.par_iter().map(|item| predict(head, item)).collect()
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut out = Vec::new();
    for p in predictions {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Scores predictions against the labels of `gold`, matched by id. Every
/// gold instance must have a label and a prediction.
pub fn evaluate(predictions: &[Prediction], gold: &[QAInstance]) -> Result<EvalReport> {
    let by_id: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut correct = 0;
    for inst in gold {
        let answer = inst
            .answer_index
            .ok_or_else(|| Error::MissingLabel(inst.id.clone()))?;
        let pred = by_id.get(inst.id.as_str()).ok_or_else(|| {
            Error::Config(format!("no prediction for instance `{}`", inst.id))
        })?;
        if pred.predicted == answer {
            correct += 1;
        }
    }
    Ok(EvalReport {
        correct,
        total: gold.len(),
        accuracy: if gold.is_empty() {
            0.0
        } else {
            correct as f64 / gold.len() as f64
        },
    })
}

/// Labelled splits used to train and score a fusion head.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a [QAInstance],
    pub dev: &'a [QAInstance],
    pub test: &'a [QAInstance],
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub head: FusionHead,
    pub predictions: Vec<Prediction>,
    pub accuracy: f64,
    pub best_epoch: usize,
}

/// Featurizes all splits, trains a head on train/dev and scores test.
pub fn run(
    res: &Resources<'_>,
    splits: Splits<'_>,
    settings: &QuerySettings,
    fusion: &FusionConfig,
) -> Result<RunOutcome> {
    let train = featurize(res, splits.train, settings)?;
    let dev = featurize(res, splits.dev, settings)?;
    let test = featurize(res, splits.test, settings)?;
    let trained = train_fusion(res.model.dim(), &features_of(&train), &features_of(&dev), fusion)?;
    let predictions = predict_all(&trained.head, &test)?;
    let acc = if splits.test.iter().all(|q| q.answer_index.is_some()) {
        accuracy(&trained.head, &features_of(&test))?
    } else {
        f64::NAN
    };
    Ok(RunOutcome {
        head: trained.head,
        predictions,
        accuracy: acc,
        best_epoch: trained.best_epoch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    WithoutAlignment,
    WithoutSubgraph,
    WithoutTriplets,
    LambdaOne,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::WithoutAlignment,
        Variant::WithoutSubgraph,
        Variant::WithoutTriplets,
        Variant::LambdaOne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutAlignment => "w/o alignment",
            Variant::WithoutSubgraph => "w/o subgraph",
            Variant::WithoutTriplets => "w/o triplets",
            Variant::LambdaOne => "lambda=1.0",
        }
    }
}

/// Everything needed to rebuild the pipeline for any ablation.
#[derive(Clone, Copy)]
pub struct Experiment<'a> {
    pub graph: &'a KnowledgeGraph,
    pub embedder: &'a dyn TextEmbedder,
    pub model: &'a AlignmentModel,
    pub db: &'a VectorDatabase,
    pub sampler: SamplerConfig,
    /// Seed the alignment model was initialised from.
    pub alignment_seed: u64,
    pub settings: QuerySettings,
    pub fusion: FusionConfig,
}

impl<'a> Experiment<'a> {
    fn resources(&self) -> Resources<'a> {
        Resources {
            graph: self.graph,
            embedder: self.embedder,
            model: self.model,
            db: self.db,
        }
    }

    /// The model an alignment run starts from, before any update.
    pub fn untrained_model(&self) -> AlignmentModel {
        let dims: ModelDims = self.model.dims();
        let mut m = AlignmentModel::init(&dims, self.model.temperature, self.alignment_seed);
        m.snap_to_f32();
        m
    }

    pub fn run_variant(&self, variant: Variant, splits: Splits<'_>) -> Result<RunOutcome> {
        let mut settings = self.settings;
        let mut fusion = self.fusion;
        match variant {
            Variant::Full => {}
            Variant::WithoutAlignment => {
                let model = self.untrained_model();
                let db = build_database(self.graph, self.embedder, &model, &self.sampler)?;
                let res = Resources {
                    model: &model,
                    db: &db,
                    ..self.resources()
                };
                return run(&res, splits, &settings, &fusion);
            }
            Variant::WithoutSubgraph => settings.use_subgraphs = false,
            Variant::WithoutTriplets => settings.triplets = 0,
            Variant::LambdaOne => fusion.lambda = 1.0,
        }
        run(&self.resources(), splits, &settings, &fusion)
    }

    pub fn ablate(&self, splits: Splits<'_>) -> Result<Vec<(Variant, f64)>> {
        Variant::ALL
            .iter()
            .map(|&v| Ok((v, self.run_variant(v, splits)?.accuracy)))
            .collect()
    }

    /// Test accuracy at each value of one hyper-parameter, the others fixed.
    pub fn sweep(&self, param: SweepParam, values: &[f64], splits: Splits<'_>) -> Result<Vec<(f64, f64)>> {
        values
            .iter()
            .map(|&value| {
                let mut settings = self.settings;
                let mut fusion = self.fusion;
                let acc = match param {
                    SweepParam::K => {
                        settings.k = as_count(value, "k")?;
                        run(&self.resources(), splits, &settings, &fusion)?.accuracy
                    }
                    SweepParam::Triplets => {
                        settings.triplets = as_count(value, "triplets")?;
                        run(&self.resources(), splits, &settings, &fusion)?.accuracy
                    }
                    SweepParam::Lambda => {
                        fusion.lambda = value;
                        run(&self.resources(), splits, &settings, &fusion)?.accuracy
                    }
                    SweepParam::N => {
                        let sampler = SamplerConfig {
                            max_nodes: as_count(value, "n")?,
                            ..self.sampler
                        };
                        let db = build_database(self.graph, self.embedder, self.model, &sampler)?;
                        let res = Resources {
                            db: &db,
                            ..self.resources()
                        };
                        run(&res, splits, &settings, &fusion)?.accuracy
                    }
                };
                Ok((value, acc))
            })
            .collect()
    }
}

fn as_count(value: f64, what: &str) -> Result<usize> {
    if value >= 0.0 && value.fract() == 0.0 && value.is_finite() {
        Ok(value as usize)
    } else {
        Err(Error::Config(format!("{what} must be a non-negative integer, got {value}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    K,
    N,
    Lambda,
    Triplets,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(Self::K),
            "n" => Ok(Self::N),
            "lambda" => Ok(Self::Lambda),
            "triplets" | "K" => Ok(Self::Triplets),
            other => Err(Error::Config(format!("unknown sweep parameter `{other}`"))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::K => "k",
            Self::N => "n",
            Self::Lambda => "lambda",
            Self::Triplets => "triplets",
        })
    }
}

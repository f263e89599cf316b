//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Values are applied
//! over the built-in defaults in file order; later keys win. Command-line
//! overrides go through [`PipelineConfig::set`] after the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::alignment::{AlignmentConfig, ModelDims};
use crate::encoders::HashTextEmbedder;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::kg::KnowledgeGraph;
use crate::pipeline::QuerySettings;
use crate::sampler::SamplerConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Paths {
    pub triples: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub db: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub head: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub seed: u64,
    pub threads: Option<usize>,
    pub text_dim: usize,
    pub text_seed: u64,
    pub graph_dim: usize,
    pub dim: usize,
    pub layers: usize,
    pub sampler: SamplerConfig,
    pub alignment: AlignmentConfig,
    pub query: QuerySettings,
    pub fusion: FusionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            seed: 0,
            threads: None,
            text_dim: 64,
            text_seed: 0,
            graph_dim: 64,
            dim: 64,
            layers: 2,
            sampler: SamplerConfig::default(),
            alignment: AlignmentConfig::default(),
            query: QuerySettings::default(),
            fusion: FusionConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

/// Every recognised key, in the order they are documented.
pub const KEYS: &[&str] = &[
    "triples",
    "templates",
    "model",
    "db",
    "train",
    "dev",
    "test",
    "predictions",
    "head",
    "log",
    "seed",
    "threads",
    "text.dim",
    "text.seed",
    "sampler.p",
    "sampler.depth",
    "sampler.n",
    "align.graph-dim",
    "align.dim",
    "align.layers",
    "align.batch",
    "align.tau",
    "align.lr",
    "align.epochs",
    "align.pairs",
    "align.holdout",
    "align.eval-k",
    "align.max-sentences",
    "query.k",
    "query.triplets",
    "fusion.lambda",
    "fusion.heads",
    "fusion.layout",
    "fusion.lr",
    "fusion.epochs",
    "fusion.patience",
    "fusion.stop-on",
    "fusion.batch",
];

impl PipelineConfig {
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(text, origin)?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: origin.to_string(),
                line: i + 1,
                reason: "expected `key = value`".into(),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                file: origin.to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Applies a single `key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "triples" => self.paths.triples = path(),
            "templates" => self.paths.templates = path(),
            "model" => self.paths.model = path(),
            "db" => self.paths.db = path(),
            "train" => self.paths.train = path(),
            "dev" => self.paths.dev = path(),
            "test" => self.paths.test = path(),
            "predictions" => self.paths.predictions = path(),
            "head" => self.paths.head = path(),
            "log" => self.paths.log = path(),
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = Some(parse(key, value)?),
            "text.dim" => self.text_dim = parse(key, value)?,
            "text.seed" => self.text_seed = parse(key, value)?,
            "sampler.p" => self.sampler.p = parse(key, value)?,
            "sampler.depth" => self.sampler.depth = parse(key, value)?,
            "sampler.n" => self.sampler.max_nodes = parse(key, value)?,
            "align.graph-dim" => self.graph_dim = parse(key, value)?,
            "align.dim" => self.dim = parse(key, value)?,
            "align.layers" => self.layers = parse(key, value)?,
            "align.batch" => self.alignment.batch_size = parse(key, value)?,
            "align.tau" => self.alignment.temperature = parse(key, value)?,
            "align.lr" => self.alignment.learning_rate = parse(key, value)?,
            "align.epochs" => self.alignment.epochs = parse(key, value)?,
            "align.pairs" => self.alignment.pairs = parse(key, value)?,
            "align.holdout" => self.alignment.holdout_fraction = parse(key, value)?,
            "align.eval-k" => self.alignment.eval_k = parse(key, value)?,
            "align.max-sentences" => {
                self.alignment.max_sentences = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "query.k" => self.query.k = parse(key, value)?,
            "query.triplets" => self.query.triplets = parse(key, value)?,
            "fusion.lambda" => self.fusion.lambda = parse(key, value)?,
            "fusion.heads" => self.fusion.heads = parse(key, value)?,
            "fusion.layout" => self.fusion.layout = value.parse()?,
            "fusion.lr" => self.fusion.learning_rate = parse(key, value)?,
            "fusion.epochs" => self.fusion.epochs = parse(key, value)?,
            "fusion.patience" => self.fusion.patience = parse(key, value)?,
            "fusion.stop-on" => self.fusion.stop_on = value.parse()?,
            "fusion.batch" => self.fusion.batch_size = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Propagates the global seed into every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.sampler.seed = self.seed;
        c.alignment.seed = self.seed;
        c.fusion.seed = self.seed;
        c
    }

    pub fn embedder(&self) -> HashTextEmbedder {
        HashTextEmbedder::new(self.text_dim, self.text_seed)
    }

    pub fn model_dims(&self, graph: &KnowledgeGraph) -> ModelDims {
        ModelDims {
            d_in: self.text_dim,
            d_t: self.text_dim,
            d_g: self.graph_dim,
            d: self.dim,
            layers: self.layers,
            relations: graph.num_relations(),
        }
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("missing required path `{key}`")))
    }
}

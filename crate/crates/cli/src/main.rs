use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use septa_core::alignment::{load_model, save_model, train_alignment, write_log};
use septa_core::benchmark::{generate_benchmark, BenchmarkConfig};
use septa_core::config::PipelineConfig;
use septa_core::fusion::{train_fusion, FusionHead};
use septa_core::kg::{load_graph, KnowledgeGraph};
use septa_core::pipeline::{
    evaluate, featurize, predict_all, read_predictions, write_predictions, Experiment, Resources,
    Splits, SweepParam, Variant,
};
use septa_core::query::read_qa;
use septa_core::sampler::bfs_sample;
use septa_core::vectordb::{build_database, VectorDatabase};

/// Subgraph retrieval toolkit for multiple-choice question answering.
#[derive(Parser)]
#[command(name = "septa-kit", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice in the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: SEPTA_KIT_THREADS, then available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    triples: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    /// Retrieved subgraph vectors per choice.
    #[arg(long)]
    k: Option<usize>,
    /// Fact triplets appended to each query.
    #[arg(long)]
    triplets: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load a graph and print its size.
    Ingest {
        #[command(flatten)]
        graph: GraphArgs,
    },
    /// Sample the neighbourhood of one center node.
    Sample {
        #[command(flatten)]
        graph: GraphArgs,
        /// Node URI, surface form or numeric id.
        #[arg(long)]
        center: String,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the alignment model.
    Align {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long = "model-out")]
        model_out: Option<PathBuf>,
        #[arg(long = "log-out")]
        log_out: Option<PathBuf>,
    },
    /// Build the subgraph vector database.
    BuildDb {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long = "db-out")]
        db_out: Option<PathBuf>,
    },
    /// Train (or load) a fusion head and write predictions for a QA file.
    Answer {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Instances to answer.
        #[arg(long)]
        qa: Option<PathBuf>,
        /// Load this head instead of training one.
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long = "head-out")]
        head_out: Option<PathBuf>,
        #[arg(long = "predictions-out")]
        predictions_out: Option<PathBuf>,
        #[command(flatten)]
        query: QueryArgs,
    },
    /// Score a predictions file against labelled instances.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        qa: Option<PathBuf>,
    },
    /// Accuracy of the full pipeline and each ablation.
    Ablate {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
        #[command(flatten)]
        splits: SplitArgs,
        #[command(flatten)]
        query: QueryArgs,
    },
    /// Accuracy over a grid of one hyper-parameter, as CSV.
    Sweep {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
        #[command(flatten)]
        splits: SplitArgs,
        #[command(flatten)]
        query: QueryArgs,
        /// One of k, n, lambda, triplets.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Generate a synthetic graph and QA splits.
    GenBenchmark {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        nodes: usize,
        #[arg(long, default_value_t = 5)]
        relations: usize,
        #[arg(long, default_value_t = 900)]
        edges: usize,
        #[arg(long, default_value_t = 4)]
        window: usize,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        dev: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 5)]
        choices: usize,
    },
}

fn pick(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| septa_core::Error::Config(format!("missing required path `{name}`")).into())
}

fn configure(common: &Common) -> Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    for assignment in &common.set {
        config.set_assignment(assignment)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let env_threads = match std::env::var("SEPTA_KIT_THREADS") {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| {
            septa_core::Error::Config(format!("SEPTA_KIT_THREADS must be an integer, got `{v}`"))
        })?),
        Err(_) => None,
    };
    if let Some(n) = common.threads.or(env_threads).or(config.threads) {
        config.threads = Some(n);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(config.resolved())
}

fn apply_query(config: &mut PipelineConfig, q: &QueryArgs) {
    if let Some(k) = q.k {
        config.query.k = k;
    }
    if let Some(t) = q.triplets {
        config.query.triplets = t;
    }
    if let Some(l) = q.lambda {
        config.fusion.lambda = l;
    }
}

fn graph(config: &PipelineConfig, args: &GraphArgs) -> Result<KnowledgeGraph> {
    let triples = pick(&args.triples, &config.paths.triples, "triples")?;
    let templates = pick(&args.templates, &config.paths.templates, "templates")?;
    Ok(load_graph(&triples, &templates)?)
}

fn featured_graph(config: &PipelineConfig, args: &GraphArgs) -> Result<KnowledgeGraph> {
    Ok(graph(config, args)?.with_embedded_features(&config.embedder()))
}

fn resolve_center(graph: &KnowledgeGraph, center: &str) -> Result<usize> {
    if let Some(id) = graph.node_by_uri(center) {
        return Ok(id);
    }
    match graph.nodes_by_surface(center) {
        [id] => return Ok(*id),
        [] => {}
        _ => {
            return Err(septa_core::Error::Config(format!(
                "center `{center}` is ambiguous; pass a URI or id"
            ))
            .into())
        }
    }
    let id: usize = center
        .parse()
        .map_err(|_| septa_core::Error::Config(format!("unknown center `{center}`")))?;
    graph.check_node(id)?;
    Ok(id)
}

struct Loaded {
    graph: KnowledgeGraph,
    model: septa_core::alignment::AlignmentModel,
    db: VectorDatabase,
}

fn load_stack(
    config: &PipelineConfig,
    g: &GraphArgs,
    model: &Option<PathBuf>,
    db: &Option<PathBuf>,
) -> Result<Loaded> {
    let graph = featured_graph(config, g)?;
    let model_path = pick(model, &config.paths.model, "model")?;
    let model = load_model(&model_path)?;
    let db_path = pick(db, &config.paths.db, "db")?;
    let db = VectorDatabase::load(&db_path)?;
    if db.dim() != model.dim() {
        return Err(septa_core::Error::Shape {
            context: "database width vs model width",
            expected: model.dim(),
            got: db.dim(),
        }
        .into());
    }
    Ok(Loaded { graph, model, db })
}

fn read_split(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<Vec<septa_core::query::QAInstance>> {
    Ok(read_qa(&pick(flag, fallback, name)?)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut config = configure(&cli.common)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Ingest { graph: g } => {
            let graph = graph(&config, &g)?;
            writeln!(out, "{}", graph.summary())?;
        }
        Command::Sample {
            graph: g,
            center,
            p,
            depth,
            n,
        } => {
            let graph = graph(&config, &g)?;
            let mut sampler = config.sampler;
            if let Some(p) = p {
                sampler.p = p;
            }
            if let Some(d) = depth {
                sampler.depth = d;
            }
            if let Some(n) = n {
                sampler.max_nodes = n;
            }
            sampler.validate()?;
            let c = resolve_center(&graph, &center)?;
            let sg = bfs_sample(&graph, c, &sampler, &mut sampler.rng_for_center(c))?;
            write!(out, "{}", sg.dump(&graph))?;
        }
        Command::Align {
            graph: g,
            model_out,
            log_out,
        } => {
            let graph = featured_graph(&config, &g)?;
            let embedder = config.embedder();
            let dims = config.model_dims(&graph);
            let outcome = train_alignment(&graph, &embedder, &dims, &config.alignment, &config.sampler)?;
            let model_path = pick(&model_out, &config.paths.model, "model")?;
            save_model(&outcome.model, &model_path)?;
            if let Some(log) = log_out.or(config.paths.log.clone()) {
                write_log(&log, &outcome.log)?;
            }
            let last = outcome.log.last().expect("log has the initial entry");
            writeln!(
                out,
                "epochs={} train_loss={:.6} heldout_loss={:.6} g2t_top1={:.4} t2g_top1={:.4} model={}",
                last.epoch,
                last.train_loss,
                last.heldout_loss,
                last.g2t_top1,
                last.t2g_top1,
                model_path.display()
            )?;
        }
        Command::BuildDb {
            graph: g,
            model,
            db_out,
        } => {
            let graph = featured_graph(&config, &g)?;
            let model = load_model(&pick(&model, &config.paths.model, "model")?)?;
            let db = build_database(&graph, &config.embedder(), &model, &config.sampler)?;
            let path = pick(&db_out, &config.paths.db, "db")?;
            db.save(&path)?;
            writeln!(out, "records={} dim={} db={}", db.len(), db.dim(), path.display())?;
        }
        Command::Answer {
            graph: g,
            model,
            db,
            train,
            dev,
            qa,
            head,
            head_out,
            predictions_out,
            query,
        } => {
            apply_query(&mut config, &query);
            let stack = load_stack(&config, &g, &model, &db)?;
            let embedder = config.embedder();
            let res = Resources {
                graph: &stack.graph,
                embedder: &embedder,
                model: &stack.model,
                db: &stack.db,
            };
            let trained_head = match head {
                Some(path) => FusionHead::load(&path)?,
                None => {
                    let train = read_split(&train, &config.paths.train, "train")?;
                    let dev = match dev.or(config.paths.dev.clone()) {
                        Some(p) => read_qa(&p)?,
                        None => Vec::new(),
                    };
                    let tr: Vec<_> = featurize(&res, &train, &config.query)?
                        .into_iter()
                        .map(|f| f.features)
                        .collect();
                    let dv: Vec<_> = featurize(&res, &dev, &config.query)?
                        .into_iter()
                        .map(|f| f.features)
                        .collect();
                    train_fusion(stack.model.dim(), &tr, &dv, &config.fusion)?.head
                }
            };
            if let Some(path) = head_out.or(config.paths.head.clone()) {
                trained_head.save(&path)?;
            }
            let instances = read_split(&qa, &config.paths.test, "qa")?;
            let items = featurize(&res, &instances, &config.query)?;
            let predictions = predict_all(&trained_head, &items)?;
            let path = pick(&predictions_out, &config.paths.predictions, "predictions")?;
            write_predictions(&path, &predictions)?;
            writeln!(out, "predictions={} path={}", predictions.len(), path.display())?;
        }
        Command::Eval { predictions, qa } => {
            let preds = read_predictions(&pick(&predictions, &config.paths.predictions, "predictions")?)?;
            let gold = read_split(&qa, &config.paths.test, "qa")?;
            let report = evaluate(&preds, &gold)?;
            writeln!(
                out,
                "accuracy={:.6} correct={} total={}",
                report.accuracy, report.correct, report.total
            )?;
        }
        Command::Ablate {
            graph: g,
            model,
            db,
            splits,
            query,
        } => {
            apply_query(&mut config, &query);
            let stack = load_stack(&config, &g, &model, &db)?;
            let embedder = config.embedder();
            let (train, dev, test) = read_splits(&config, &splits)?;
            let exp = experiment(&config, &stack, &embedder);
            writeln!(out, "variant\taccuracy")?;
            for variant in Variant::ALL {
                let acc = exp
                    .run_variant(variant, Splits { train: &train, dev: &dev, test: &test })?
                    .accuracy;
                writeln!(out, "{}\t{:.6}", variant.name(), acc)?;
            }
        }
        Command::Sweep {
            graph: g,
            model,
            db,
            splits,
            query,
            param,
            values,
        } => {
            apply_query(&mut config, &query);
            let stack = load_stack(&config, &g, &model, &db)?;
            let embedder = config.embedder();
            let (train, dev, test) = read_splits(&config, &splits)?;
            let exp = experiment(&config, &stack, &embedder);
            let rows = exp.sweep(param, &values, Splits { train: &train, dev: &dev, test: &test })?;
            writeln!(out, "{param},accuracy")?;
            for (value, acc) in rows {
                writeln!(out, "{value},{acc:.6}")?;
            }
        }
        Command::GenBenchmark {
            out: dir,
            nodes,
            relations,
            edges,
            window,
            train,
            dev,
            test,
            choices,
        } => {
            let bench = generate_benchmark(&BenchmarkConfig {
                nodes,
                relations,
                edges,
                window,
                train,
                dev,
                test,
                choices,
                seed: config.seed,
            })?;
            bench.write(&dir)?;
            writeln!(
                out,
                "{} train={} dev={} test={} dir={}",
                bench.graph.summary(),
                bench.train.len(),
                bench.dev.len(),
                bench.test.len(),
                dir.display()
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

type Split = Vec<septa_core::query::QAInstance>;

fn read_splits(config: &PipelineConfig, s: &SplitArgs) -> Result<(Split, Split, Split)> {
    let train = read_split(&s.train, &config.paths.train, "train")?;
    let dev = match s.dev.clone().or(config.paths.dev.clone()) {
        Some(p) => read_qa(&p)?,
        None => Vec::new(),
    };
    let test = read_split(&s.test, &config.paths.test, "test")?;
    Ok((train, dev, test))
}

fn experiment<'a>(
    config: &PipelineConfig,
    stack: &'a Loaded,
    embedder: &'a septa_core::encoders::HashTextEmbedder,
) -> Experiment<'a> {
    Experiment {
        graph: &stack.graph,
        embedder,
        model: &stack.model,
        db: &stack.db,
        sampler: config.sampler,
        alignment_seed: config.alignment.seed,
        settings: config.query,
        fusion: config.fusion,
    }
}

/// One line, `error kind=<kind> msg=<message>`, with newlines flattened.
fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<septa_core::Error>())
        .map_or("cli", |e| e.kind());
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    let msg = msg.replace(['\n', '\r'], " ");
    format!("error kind={kind} msg={msg}")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage msg={first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

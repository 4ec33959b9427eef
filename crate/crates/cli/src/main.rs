use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use reroute::checkpoint::{self, CheckpointMeta};
use reroute::config::RunConfig;
use reroute::data::{self, Dataset, Normalization};
use reroute::network::{Model, NetworkConfig};
use reroute::reset::RouteRecord;
use reroute::routes::{self, RouteMatrix};
use reroute::selection::{ScorerConfig, ScorerKind};
use reroute::training::{
    evaluate, run_pipeline, DataValidator, Evaluation, MetricsRow, Observer, TrainData, TrainState, METRICS_HEADER,
};
use reroute::{DType, Scalar};

const DETERMINISTIC_ENV: &str = "REROUTE_DETERMINISTIC";

/// Dynamic recurrent routing networks: training, evaluation and route analysis.
#[derive(Parser)]
#[command(name = "reroute", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training pipeline of a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Analyse exported routes.
    #[command(subcommand)]
    Routes(RoutesCommand),
    /// Dataset tooling.
    #[command(subcommand)]
    Data(DataCommand),
    /// Model inspection.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Print an example run config.
    ExampleConfig,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once the global step reaches this value; the run stays resumable.
    #[arg(long)]
    stop_after: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CIFAR-10 directory (its test batch is used) or a raw RIMG file.
    #[arg(long)]
    data: PathBuf,
    /// Write one route record per sample as JSON lines.
    #[arg(long)]
    routes: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct RoutesInput {
    /// JSON-lines route file from `eval --routes` or `train`.
    #[arg(long)]
    routes: PathBuf,
}

#[derive(Args)]
struct NeighborArgs {
    #[command(flatten)]
    input: RoutesInput,
    #[arg(long)]
    image_id: u64,
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Subcommand)]
enum RoutesCommand {
    /// Nearest routes by Manhattan distance.
    Neighbors(NeighborArgs),
    /// Alias of `neighbors`.
    Query(NeighborArgs),
    /// Per-component standard deviation of route scores, as CSV.
    Std {
        #[command(flatten)]
        input: RoutesInput,
    },
    /// Intra- versus inter-class route distance.
    Separation {
        #[command(flatten)]
        input: RoutesInput,
        #[arg(long, default_value_t = routes::SEPARATION_PAIRS)]
        pairs: usize,
        #[arg(long, default_value_t = routes::SEPARATION_SEED)]
        seed: u64,
    },
    /// Mean score per stage, iteration and unit, as CSV.
    Policy {
        #[command(flatten)]
        input: RoutesInput,
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Convert a CIFAR-10 batch file or directory into the raw format.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print record and class counts of a CIFAR-10 batch or raw file.
    Inspect { file: PathBuf },
    /// Generate the procedural toy dataset in the raw format.
    MakeToy {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Per-stage shapes, parameter counts and multiply-accumulates.
    Describe {
        /// Run config whose network to describe.
        #[arg(long, conflicts_with = "arch")]
        config: Option<PathBuf>,
        /// Built-in architecture: reset38 or resnet38.
        #[arg(long)]
        arch: Option<String>,
    },
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(r) = cause.downcast_ref::<reroute::Error>() {
            return if r.is_usage() { 2 } else { 1 };
        }
    }
    1
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            || matches!(c.downcast_ref::<reroute::Error>(), Some(reroute::Error::Io(io)) if io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed downstream pipe is not a failure of the command.
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Routes(c) => routes_cmd(c),
        Command::Data(c) => data_cmd(c),
        Command::Model(ModelCommand::Describe { config, arch }) => describe(config, arch),
        Command::ExampleConfig => {
            print!("{}", RunConfig::example().to_toml()?);
            Ok(())
        }
    }
}

/// Appends metrics rows to a CSV and writes periodic checkpoints.
struct RunObserver {
    metrics: BufWriter<File>,
    checkpoint: PathBuf,
    meta: CheckpointMeta,
}

impl<T: Scalar> Observer<T> for RunObserver {
    fn on_metrics(&mut self, row: &MetricsRow) -> reroute::Result<()> {
        writeln!(self.metrics, "{}", row.csv_line())?;
        Ok(())
    }

    fn on_checkpoint(&mut self, model: &Model<T>, state: &TrainState<T>) -> reroute::Result<()> {
        self.metrics.flush()?;
        checkpoint::save(&self.checkpoint, self.meta.clone(), model, Some(state))
    }
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    if !a.config.is_file() {
        return Err(usage(format!("config file {} does not exist", a.config.display())));
    }
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = a.out {
        cfg.out_dir = out;
    }
    if let Some(t) = a.threads {
        cfg.eval.threads = t.max(1);
    }
    if deterministic() {
        cfg.dtype = DType::F64;
        cfg.eval.threads = 1;
    }
    let base = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let (train_set, val_set) = cfg.data.load(&base)?;
    match cfg.dtype {
        DType::F32 => train_typed::<f32>(cfg, &train_set, &val_set, a.resume, a.stop_after),
        DType::F64 => train_typed::<f64>(cfg, &train_set, &val_set, a.resume, a.stop_after),
    }
}

fn write_summary(path: &Path, ev: &Evaluation, step: u64) -> anyhow::Result<()> {
    let summary = serde_json::json!({
        "step": step,
        "accuracy": ev.accuracy,
        "skip_fraction": ev.skip_fraction,
        "relative_time": ev.cost.relative_time,
        "mac_count": ev.cost.mac_count,
    });
    fs::write(path, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

fn print_eval(ev: &Evaluation) {
    println!("accuracy {:.6}", ev.accuracy);
    println!("skip_fraction {:.6}", ev.skip_fraction);
    println!("relative_time {:.6}", ev.cost.relative_time);
}

fn train_typed<T: Scalar>(
    mut cfg: RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    resume: Option<PathBuf>,
    stop_after: Option<u64>,
) -> anyhow::Result<()> {
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (mut model, mut state, norm) = match &resume {
        Some(path) => {
            let ck = checkpoint::load::<T>(path)?;
            let state = ck
                .state
                .ok_or_else(|| usage(format!("{} holds no training state", path.display())))?;
            let norm = ck.meta.normalization.unwrap_or(Normalization::compute(train_set)?);
            (ck.model, state, norm)
        }
        None => {
            let norm = match cfg.normalization {
                Some(n) => n,
                None => Normalization::compute(train_set)?,
            };
            let model = Model::<T>::build(&cfg.network, cfg.seed)?;
            (model, TrainState::new(cfg.train.seed), norm)
        }
    };
    cfg.normalization = Some(norm);
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let metrics_path = out.join("metrics.csv");
    let metrics = if resume.is_some() && metrics_path.exists() {
        fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };
    let meta = CheckpointMeta {
        network: cfg.network.clone(),
        train: None,
        normalization: Some(norm),
        extra: serde_json::json!({ "config": cfg.to_toml()? }),
    };
    let ckpt_path = out.join("checkpoint.rrt");
    let mut observer = RunObserver {
        metrics: BufWriter::new(metrics),
        checkpoint: ckpt_path.clone(),
        meta: meta.clone(),
    };
    let mut validator = DataValidator {
        data: val_set,
        norm,
        batch: cfg.eval.batch_size,
        threads: cfg.eval.threads,
    };
    let data = TrainData { train: train_set, norm };
    let history = run_pipeline(
        &mut model,
        &cfg.pipeline,
        &cfg.train,
        &data,
        &mut validator,
        &mut observer,
        &mut state,
        stop_after,
    )?;
    observer.metrics.flush()?;
    checkpoint::save(&ckpt_path, meta, &model, Some(&state))?;

    let policy_path = out.join("policy.csv");
    let mut policy = if resume.is_some() && policy_path.exists() {
        BufWriter::new(fs::OpenOptions::new().append(true).open(&policy_path)?)
    } else {
        let mut f = BufWriter::new(File::create(&policy_path)?);
        writeln!(f, "step,stage,iteration,unit,mean_score")?;
        f
    };
    for r in &history.policy {
        writeln!(policy, "{},{},{},{},{}", r.step, r.stage, r.iteration, r.unit, r.mean_score)?;
    }
    policy.flush()?;

    let ev = evaluate(&model, val_set, &norm, cfg.eval.batch_size, cfg.eval.threads)?;
    let mut routes_out = BufWriter::new(File::create(out.join("routes.jsonl"))?);
    routes::write_records_jsonl(&ev.records, &mut routes_out)?;
    routes_out.flush()?;
    write_summary(&out.join("summary.json"), &ev, state.step)?;
    println!("step {}", state.step);
    print_eval(&ev);
    Ok(())
}

fn load_eval_data(path: &Path) -> anyhow::Result<Dataset> {
    if path.is_dir() {
        let file = path.join(data::CIFAR_TEST_FILE);
        if !file.is_file() {
            return Err(usage(format!("{} has no {}", path.display(), data::CIFAR_TEST_FILE)));
        }
        Ok(Dataset {
            images: data::load_cifar10_file(&file)?,
            classes: data::CIFAR_CLASSES,
        })
    } else if path.is_file() {
        Ok(data::load_raw_labeled(path)?)
    } else {
        Err(usage(format!("data path {} does not exist", path.display())))
    }
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    if !a.checkpoint.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let data = load_eval_data(&a.data)?;
    let threads = if deterministic() { 1 } else { a.threads.max(1) };
    let bytes = fs::read(&a.checkpoint)?;
    let (manifest, _) = checkpoint::read_manifest(&bytes)?;
    let stored = manifest.entries.first().map(|e| e.dtype).unwrap_or_default();
    let dtype = if deterministic() { DType::F64 } else { stored };
    let ev = match dtype {
        DType::F32 => eval_typed::<f32>(&bytes, &data, a.batch, threads)?,
        DType::F64 => eval_typed::<f64>(&bytes, &data, a.batch, threads)?,
    };
    print_eval(&ev);
    if let Some(path) = a.routes {
        let mut out = BufWriter::new(File::create(&path)?);
        routes::write_records_jsonl(&ev.records, &mut out)?;
        out.flush()?;
    }
    Ok(())
}

fn eval_typed<T: Scalar>(bytes: &[u8], data: &Dataset, batch: usize, threads: usize) -> anyhow::Result<Evaluation> {
    let ck = checkpoint::decode::<T>(bytes)?;
    if data.classes > ck.model.config().classes {
        return Err(usage(format!(
            "dataset has {} classes, model predicts {}",
            data.classes,
            ck.model.config().classes
        )));
    }
    let norm = ck.meta.normalization.unwrap_or_default();
    Ok(evaluate(&ck.model, data, &norm, batch, threads)?)
}

fn read_routes(input: &RoutesInput) -> anyhow::Result<Vec<RouteRecord>> {
    let f = File::open(&input.routes).map_err(|e| usage(format!("{}: {e}", input.routes.display())))?;
    let records = routes::read_records_jsonl(BufReader::new(f))?;
    if records.is_empty() {
        return Err(anyhow!("{} holds no route records", input.routes.display()));
    }
    Ok(records)
}

fn routes_cmd(c: RoutesCommand) -> anyhow::Result<()> {
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match c {
        RoutesCommand::Neighbors(a) | RoutesCommand::Query(a) => {
            let m = RouteMatrix::from_records(&read_routes(&a.input)?)?;
            for (id, d) in routes::manhattan_neighbors(&m, a.image_id, a.top)? {
                writeln!(out, "{id} {d:.6}")?;
            }
        }
        RoutesCommand::Std { input } => {
            let m = RouteMatrix::from_records(&read_routes(&input)?)?;
            writeln!(out, "component,std")?;
            for (i, s) in routes::score_std(&m).iter().enumerate() {
                writeln!(out, "{i},{s}")?;
            }
        }
        RoutesCommand::Separation { input, pairs, seed } => {
            let m = RouteMatrix::from_records(&read_routes(&input)?)?;
            let s = routes::class_route_separation(&m, pairs.max(1), seed)?;
            writeln!(out, "{}", serde_json::to_string(&s)?)?;
        }
        RoutesCommand::Policy { input, step } => {
            let rows = routes::policy_means(&read_routes(&input)?, step);
            routes::write_policy_csv(&rows, &mut out)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_cifar_input(input: &Path) -> anyhow::Result<Dataset> {
    let images = if input.is_dir() {
        let (mut train, test) = data::load_cifar10_binary(input)?;
        train.images.extend(test.images);
        train.images
    } else if input.is_file() {
        data::load_cifar10_file(input)?
    } else {
        return Err(usage(format!("input {} does not exist", input.display())));
    };
    Ok(Dataset {
        images,
        classes: data::CIFAR_CLASSES,
    })
}

fn data_cmd(c: DataCommand) -> anyhow::Result<()> {
    match c {
        DataCommand::Convert { input, output } => {
            let d = read_cifar_input(&input)?;
            data::write_raw_labeled(&output, &d)?;
            println!("{} records, {} classes", d.len(), d.classes);
        }
        DataCommand::Inspect { file } => {
            if !file.is_file() {
                return Err(usage(format!("{} does not exist", file.display())));
            }
            let mut magic = [0u8; 4];
            let n = std::io::Read::read(&mut File::open(&file)?, &mut magic)?;
            let d = if n == 4 && &magic == data::RAW_MAGIC {
                data::load_raw_labeled(&file)?
            } else {
                Dataset {
                    images: data::load_cifar10_file(&file)?,
                    classes: data::CIFAR_CLASSES,
                }
            };
            let present = d.class_histogram().iter().filter(|&&c| c > 0).count();
            println!("{} records, {} classes", d.len(), present);
            println!("histogram {:?}", d.class_histogram());
        }
        DataCommand::MakeToy {
            classes,
            per_class,
            seed,
            output,
        } => {
            let d = data::make_toy_dataset(classes, per_class, seed)?;
            data::write_raw_labeled(&output, &d)?;
            println!("{} records, {} classes", d.len(), d.classes);
        }
    }
    Ok(())
}

fn describe(config: Option<PathBuf>, arch: Option<String>) -> anyhow::Result<()> {
    let net = match (config, arch.as_deref()) {
        (Some(path), _) => RunConfig::load(&path)?.network,
        (None, Some("reset38") | None) => NetworkConfig::reset38(ScorerConfig::new(ScorerKind::Softmax)),
        (None, Some("resnet38")) => NetworkConfig::resnet(16, [reroute::network::RESET38_ITERATIONS; 3]),
        (None, Some(other)) => return Err(usage(format!("unknown architecture {other}; use reset38 or resnet38"))),
    };
    let model = Model::<f32>::build(&net, 0)?;
    print!("{}", model.describe());
    Ok(())
}

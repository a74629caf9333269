mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fhproxy::bench::{
    build_corpus, desk_space, ranking_eval, CorpusSettings, LoadedCorpus, TabularExecutor,
};
use fhproxy::feature_store::{read_history, HistoryWriter};
use fhproxy::numkit::{Rng, SgdConfig};
use fhproxy::proxy::{estimate, ProxyConfig};
use fhproxy::report::{csv_string, write_csv, EpochLogWriter, EstimateRow};
use fhproxy::search::{
    bohb, hyperband, random_search, read_space, BohbConfig, Executor, HyperBandConfig, Metric,
    ParamSpec, SearchOutcome, TrainingExecutor, TruthTable,
};
use fhproxy::trainer::{
    gen_dataset, read_dataset, write_dataset, DatasetSpec, FeatureCapture, ModelSpec, TrainConfig,
    Trainer,
};

use manifest::{manifest_path, ManifestGuard};

/// Early accuracy estimates from feature histories, and searches that use them.
#[derive(Parser, Debug)]
#[command(name = "fhproxy", version)]
struct Cli {
    /// Log progress (repeat for more detail). RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic classification dataset (FHDS file).
    GenData(GenDataArgs),
    /// Train an MLP and record its feature history (FHST file).
    Train(TrainArgs),
    /// Estimate converged accuracy from a feature history.
    Estimate(EstimateArgs),
    /// Run random search, HyperBand or BOHB.
    Search(SearchArgs),
    /// Compare raw and proxy estimates against a corpus' true performance.
    RankEval(RankEvalArgs),
    /// Train a corpus of configurations to completion.
    BuildCorpus(BuildCorpusArgs),
}

#[derive(Args, Debug, Serialize)]
struct DataFlags {
    #[arg(long, default_value_t = 2048)]
    n_train: usize,
    #[arg(long, default_value_t = 512)]
    n_val: usize,
    #[arg(long, default_value_t = 16)]
    input_dim: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Standard deviation of each cluster.
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    /// Standard deviation of the class centres.
    #[arg(long, default_value_t = 1.0)]
    center_scale: f64,
    #[arg(long, default_value_t = 0.85)]
    warp: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Seed of the generator; fixes centres, warp and samples.
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

impl DataFlags {
    fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_train: self.n_train,
            n_val: self.n_val,
            input_dim: self.input_dim,
            classes: self.classes,
            cluster_spread: self.spread,
            center_scale: self.center_scale,
            warp_strength: self.warp,
            warp_seed: self.seed,
            noise: self.noise,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    /// Output FHDS file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Capture {
    InPass,
    EndOfEpoch,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Dataset written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output FHST file.
    #[arg(long)]
    history: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Save the final trainer state here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    /// Train this fraction of --epochs, fitting the schedule to the shorter run.
    #[arg(long)]
    budget_fraction: Option<f64>,
    /// Hidden units.
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.05)]
    lr0: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Capture::InPass)]
    capture: Capture,
}

#[derive(Args, Debug, Serialize)]
struct ProxyFlags {
    /// Trailing epochs in the ensemble.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Refit passes over the train features.
    #[arg(long, default_value_t = 5)]
    refit_epochs: usize,
    #[arg(long, default_value_t = 1024)]
    refit_batch: usize,
    #[arg(long, default_value_t = 0.05)]
    refit_lr0: f64,
}

impl ProxyFlags {
    fn config(&self) -> ProxyConfig {
        ProxyConfig {
            k: self.k,
            refit_epochs: self.refit_epochs,
            refit_batch: self.refit_batch,
            refit_lr0: self.refit_lr0,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct EstimateArgs {
    #[arg(long)]
    history: PathBuf,
    /// Last epoch the estimate may use.
    #[arg(long)]
    epoch: u32,
    #[command(flatten)]
    proxy: ProxyFlags,
    /// Seed of the refit shuffles.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Label of the row; defaults to the history file stem.
    #[arg(long)]
    trial_id: Option<String>,
    /// CSV output; the row goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Algo {
    Random,
    Hyperband,
    Bohb,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MetricArg {
    Raw,
    Proxy,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Metric {
        match m {
            MetricArg::Raw => Metric::Raw,
            MetricArg::Proxy => Metric::Proxy,
        }
    }
}

#[derive(Args, Debug, Serialize)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["data", "corpus"])))]
struct SearchArgs {
    #[arg(long, value_enum, default_value_t = Algo::Hyperband)]
    algo: Algo,
    #[arg(long, value_enum, default_value_t = MetricArg::Proxy)]
    metric: MetricArg,
    #[arg(long, default_value_t = 2)]
    eta: usize,
    /// Largest budget R in epochs.
    #[arg(long, default_value_t = 60)]
    max_budget: usize,
    /// Concurrent trials. FH_THREADS overrides this.
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON search space; defaults to width, lr0 and weight_decay.
    #[arg(long, conflicts_with = "corpus")]
    space: Option<PathBuf>,
    /// Train real models on this dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Replay histories from this corpus instead of training.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Keep each trial's FHST here (training mode).
    #[arg(long)]
    history_dir: Option<PathBuf>,
    /// Random search: number of configurations.
    #[arg(long, default_value_t = 32)]
    pool: usize,
    /// Random search: epochs per configuration; defaults to --max-budget.
    #[arg(long)]
    budget: Option<usize>,
    /// BOHB: share of uniform draws.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    random_fraction: f64,
    /// BOHB: share of observations counted as good.
    #[arg(long, default_value_t = 0.15)]
    gamma: f64,
    /// BOHB: candidates scored per proposal.
    #[arg(long, default_value_t = 24)]
    candidates: usize,
    #[command(flatten)]
    proxy: ProxyFlags,
}

#[derive(Args, Debug, Serialize)]
struct RankEvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Epochs at which to compare.
    #[arg(long, value_delimiter = ',', default_value = "15,30,45,60")]
    epochs: Vec<u32>,
    /// Seeds of the proxy refits; results are averaged.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    eval_seeds: Vec<u64>,
    #[command(flatten)]
    proxy: ProxyFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BuildCorpusArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    configs: usize,
    /// Training seeds per configuration.
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    seeds: Vec<u64>,
    /// Seed of the configuration draws.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 2048)]
    n_train: usize,
    #[arg(long, default_value_t = 512)]
    n_val: usize,
}

fn workers(flag: usize) -> Result<usize> {
    match std::env::var("FH_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("FH_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(flag),
    }
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut m = ManifestGuard::start(
        manifest_path(&args.out),
        "gen-data",
        args,
        args.data.seed,
        vec![args.out.clone()],
    )?;
    let t = Instant::now();
    let data = gen_dataset(&args.data.spec())?;
    write_dataset(&args.out, &data).with_context(|| format!("writing {}", args.out.display()))?;
    m.time("generate", t.elapsed().as_secs_f64());
    m.finish()
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut outputs = vec![args.history.clone()];
    outputs.extend(args.log.iter().cloned());
    outputs.extend(args.checkpoint.iter().cloned());
    let mut m = ManifestGuard::start(
        manifest_path(&args.history),
        "train",
        args,
        args.seed,
        outputs,
    )?;
    let data =
        read_dataset(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let spec = ModelSpec {
        input_dim: data.input_dim(),
        hidden_dims: vec![args.width],
        feature_dim: args.feature_dim,
        classes: data.classes,
    };
    let mut cfg = TrainConfig {
        epochs: args.epochs,
        schedule_epochs: None,
        batch: args.batch,
        sgd: SgdConfig {
            learning_rate: args.lr0,
            momentum: args.momentum,
            weight_decay: args.weight_decay,
        },
        seed: args.seed,
    };
    if let Some(f) = args.budget_fraction {
        cfg = cfg.scaled(f)?;
    }
    m.note("epochs", cfg.epochs)?;
    let capture = match args.capture {
        Capture::InPass => FeatureCapture::InPass,
        Capture::EndOfEpoch => FeatureCapture::EndOfEpoch,
    };
    let t = Instant::now();
    let mut trainer = Trainer::new(spec, &data, cfg)?;
    let mut writer = HistoryWriter::create(&args.history, &trainer.history_meta())?;
    let mut log = args.log.as_ref().map(EpochLogWriter::create).transpose()?;
    let mut last = None;
    for _ in 0..cfg.epochs {
        let (rec, row) = trainer.run_epoch(capture)?;
        writer.append(&rec)?;
        if let Some(l) = log.as_mut() {
            l.write(&row)?;
        }
        log::info!(
            "epoch {} loss {:.4} val_acc {:.4}",
            row.epoch,
            row.train_loss,
            row.val_acc
        );
        last = Some(row);
    }
    writer.finish()?;
    if let Some(l) = log {
        l.finish()?;
    }
    if let Some(ckpt) = &args.checkpoint {
        trainer.state().save(ckpt)?;
    }
    m.time("train", t.elapsed().as_secs_f64());
    if let Some(row) = last {
        println!("epochs {} val_acc {:.4}", row.epoch, row.val_acc);
    }
    m.finish()
}

fn estimate_cmd(args: &EstimateArgs) -> Result<()> {
    let mut m = match &args.out {
        Some(out) => Some(ManifestGuard::start(
            manifest_path(out),
            "estimate",
            args,
            args.seed,
            vec![out.clone()],
        )?),
        None => None,
    };
    let history = read_history(&args.history)
        .with_context(|| format!("reading {}", args.history.display()))?;
    let raw = history
        .record(args.epoch)
        .with_context(|| format!("{} has no epoch {}", args.history.display(), args.epoch))?
        .raw_val_accuracy as f64;
    let t = Instant::now();
    let est = estimate(
        &history,
        args.epoch,
        &args.proxy.config(),
        &mut Rng::new(args.seed),
    )?;
    let secs = t.elapsed().as_secs_f64();
    let row = EstimateRow {
        trial_id: args.trial_id.clone().unwrap_or_else(|| {
            args.history
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        }),
        end_epoch: args.epoch,
        raw_acc: raw,
        proxy_acc: est.accuracy,
        wall_ms_overhead: secs * 1e3,
    };
    match &args.out {
        Some(out) => write_csv(out, &[row])?,
        None => print!("{}", csv_string(&[row])?),
    }
    if let Some(m) = m.as_mut() {
        m.time("estimate", secs);
    }
    m.map_or(Ok(()), ManifestGuard::finish)
}

fn run_search(
    args: &SearchArgs,
    space: &[ParamSpec],
    executor: &dyn Executor,
    workers: usize,
) -> Result<SearchOutcome> {
    let hb = HyperBandConfig {
        max_budget: args.max_budget,
        eta: args.eta,
        metric: args.metric.into(),
        workers,
    };
    let mut rng = Rng::new(args.seed);
    Ok(match args.algo {
        Algo::Random => random_search(
            space,
            args.pool,
            args.budget.unwrap_or(args.max_budget),
            executor,
            hb.metric,
            workers,
            &mut rng,
        )?,
        Algo::Hyperband => hyperband(space, &hb, executor, &mut rng)?,
        Algo::Bohb => {
            let cfg = BohbConfig {
                hyperband: hb,
                random_fraction: args.random_fraction,
                gamma: args.gamma,
                candidates: args.candidates,
                ..Default::default()
            };
            bohb(space, &cfg, executor, &mut rng)?
        }
    })
}

fn search(args: &SearchArgs) -> Result<()> {
    let workers = workers(args.workers)?;
    let mut outputs = vec![args.out.clone()];
    outputs.extend(args.history_dir.iter().cloned());
    let mut m = ManifestGuard::start(manifest_path(&args.out), "search", args, args.seed, outputs)?;
    m.note("workers", workers)?;
    let proxy = args.proxy.config();
    let t = Instant::now();
    let (outcome, truth): (SearchOutcome, Option<TruthTable>) = match (&args.corpus, &args.data) {
        (Some(dir), _) => {
            let corpus = LoadedCorpus::load(dir)
                .with_context(|| format!("loading corpus {}", dir.display()))?;
            let ex = TabularExecutor {
                corpus: &corpus,
                proxy,
            };
            let space = corpus.corpus.entry_space();
            let out = run_search(args, &space, &ex, workers)?;
            (out, Some(corpus.corpus.entry_truth_table()))
        }
        (None, Some(path)) => {
            let data = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
            let space = match &args.space {
                Some(p) => {
                    read_space(p).with_context(|| format!("reading space {}", p.display()))?
                }
                None => desk_space(),
            };
            if let Some(dir) = &args.history_dir {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
            }
            let model = ModelSpec {
                input_dim: data.input_dim(),
                classes: data.classes,
                ..ModelSpec::default()
            };
            let ex = TrainingExecutor {
                data,
                model,
                train: TrainConfig::default(),
                max_budget: args.max_budget,
                proxy,
                history_dir: args.history_dir.clone(),
            };
            (run_search(args, &space, &ex, workers)?, None)
        }
        (None, None) => unreachable!("clap requires --data or --corpus"),
    };
    m.time("search", t.elapsed().as_secs_f64());
    outcome.write_report(&args.out, truth.as_ref())?;
    let summary = outcome.summary_row(truth.as_ref())?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "winner {} {} raw {} proxy {} regret {} epochs {}",
        summary.id,
        summary.config,
        fmt(summary.raw_acc),
        fmt(summary.proxy_acc),
        fmt(summary.regret),
        outcome.epochs_used
    );
    m.finish()
}

fn rank_eval(args: &RankEvalArgs) -> Result<()> {
    let mut m = ManifestGuard::start(
        manifest_path(&args.out),
        "rank-eval",
        args,
        0,
        vec![args.out.clone()],
    )?;
    let corpus = LoadedCorpus::load(&args.corpus)
        .with_context(|| format!("loading corpus {}", args.corpus.display()))?;
    let t = Instant::now();
    let report = ranking_eval(
        &corpus,
        &args.proxy.config(),
        &args.epochs,
        &args.eval_seeds,
    )?;
    m.time("rank", t.elapsed().as_secs_f64());
    report.write(&args.out)?;
    for r in &report.rows {
        println!(
            "epoch {:>3} err raw {:.4} proxy {:.4} tau raw {:.3} proxy {:.3}",
            r.epoch, r.abs_err_raw, r.abs_err_proxy, r.tau_raw, r.tau_proxy
        );
    }
    m.finish()
}

fn build_corpus_cmd(args: &BuildCorpusArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut m = ManifestGuard::start(
        args.out.join("manifest.json"),
        "build-corpus",
        args,
        args.seed,
        vec![args.out.clone()],
    )?;
    let space = match &args.space {
        Some(p) => read_space(p).with_context(|| format!("reading space {}", p.display()))?,
        None => desk_space(),
    };
    let defaults = CorpusSettings::default();
    let settings = CorpusSettings {
        data: DatasetSpec {
            n_train: args.n_train,
            n_val: args.n_val,
            ..defaults.data
        },
        train: TrainConfig {
            epochs: args.epochs,
            ..defaults.train
        },
        ..defaults
    };
    let t = Instant::now();
    let corpus = build_corpus(
        &space,
        args.configs,
        &args.seeds,
        &settings,
        &args.out,
        &mut Rng::new(args.seed),
    )?;
    m.time("build", t.elapsed().as_secs_f64());
    println!("{} entries in {}", corpus.entries.len(), args.out.display());
    m.finish()
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Search(a) => search(a),
        Command::RankEval(a) => rank_eval(a),
        Command::BuildCorpus(a) => build_corpus_cmd(a),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

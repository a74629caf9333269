//! Desk-scale ranking benchmark: a corpus of fully trained configurations
//! with known final accuracy, and error/rank-correlation curves of raw and
//! proxy estimates against it.
//!
//! A corpus directory holds `corpus.json` (entries and settings), `truth.csv`,
//! `timings.csv` and one FHST history per entry and seed.

mod kendall;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{read_history, FeatureHistory};
use crate::numkit::Rng;
use crate::proxy::{estimate, ProxyConfig};
use crate::report::{read_csv, write_atomic, write_csv};
use crate::search::{
    config_json, proxy_at_budget, proxy_rng, sample_config, Config, Executor, Metric, Outcome,
    ParamSpec, ParamValue, TrainingExecutor, TruthTable, WorkItem,
};
use crate::trainer::{
    gen_dataset, train_with_history, DatasetSpec, FeatureCapture, ModelSpec, TrainConfig,
    TrainOutputs,
};

pub use kendall::{kendall_tau, tau_b_from_counts};

/// Hidden width, initial learning rate and weight decay.
pub fn desk_space() -> Vec<ParamSpec> {
    vec![
        ParamSpec::categorical("width", [16, 32, 64, 128].map(ParamValue::Int).to_vec()),
        ParamSpec::continuous("lr0", 1e-2, 2e-1, true),
        ParamSpec::categorical(
            "weight_decay",
            [0.0, 5e-4, 5e-3].map(ParamValue::Float).to_vec(),
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: usize,
    pub config: Config,
    pub seeds: Vec<u64>,
    /// Relative to the corpus directory, one per seed.
    pub history_paths: Vec<PathBuf>,
    /// Mean final raw val accuracy over seeds.
    pub true_perf: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSettings {
    pub data: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub settings: CorpusSettings,
    pub entries: Vec<CorpusEntry>,
}

/// One row of `truth.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub id: usize,
    pub config: String,
    pub seeds: String,
    pub true_perf: f64,
}

/// One row of `timings.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub id: usize,
    pub seed: u64,
    pub epoch_ms: f64,
}

/// Samples `n_configs` configurations and trains each once per seed for the
/// full `settings.train.epochs`. Runs that fail are logged and their entry is
/// dropped.
pub fn build_corpus(
    space: &[ParamSpec],
    n_configs: usize,
    seeds: &[u64],
    settings: &CorpusSettings,
    dir: impl AsRef<Path>,
    rng: &mut Rng,
) -> Result<Corpus> {
    if n_configs < 2 {
        return Err(Error::invalid("a corpus needs at least two configurations"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("a corpus needs at least one seed"));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let configs = (0..n_configs)
        .map(|_| sample_config(space, rng))
        .collect::<Result<Vec<_>>>()?;
    let data = gen_dataset(&settings.data)?;
    let resolver = TrainingExecutor {
        data: data.clone(),
        model: settings.model.clone(),
        train: settings.train,
        max_budget: settings.train.epochs,
        proxy: ProxyConfig::default(),
        history_dir: None,
    };

    let jobs: Vec<(usize, u64)> = (0..n_configs)
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let runs: Vec<Result<(PathBuf, f64, f64)>> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let (spec, mut cfg) = resolver.resolve(&configs[i], seed)?;
            cfg.schedule_epochs = None;
            let rel = PathBuf::from(format!("entry-{i:03}-seed-{seed}.fhst"));
            let t = Instant::now();
            let h = train_with_history(
                &spec,
                &data,
                &cfg,
                FeatureCapture::InPass,
                TrainOutputs {
                    history: Some(&dir.join(&rel)),
                    epoch_log: None,
                },
            )?;
            let epoch_ms = t.elapsed().as_secs_f64() * 1e3 / cfg.epochs as f64;
            let last = h
                .epochs
                .last()
                .map(|r| r.raw_val_accuracy as f64)
                .unwrap_or(0.0);
            Ok((rel, last, epoch_ms))
        })
        .collect();

    let mut entries = Vec::new();
    let mut timings = Vec::new();
    let mut runs = runs.into_iter();
    for (i, config) in configs.into_iter().enumerate() {
        let mut paths = Vec::new();
        let mut finals = Vec::new();
        let mut failed = None;
        for &seed in seeds {
            match runs.next().expect("one run per job") {
                Ok((p, acc, ms)) => {
                    paths.push(p);
                    finals.push(acc);
                    timings.push(TimingRow {
                        id: i,
                        seed,
                        epoch_ms: ms,
                    });
                }
                Err(e) => failed = Some(e),
            }
        }
        if let Some(e) = failed {
            log::warn!("dropping corpus entry {i} ({}): {e}", config_json(&config));
            continue;
        }
        entries.push(CorpusEntry {
            id: i,
            config,
            seeds: seeds.to_vec(),
            history_paths: paths,
            true_perf: finals.iter().sum::<f64>() / finals.len() as f64,
        });
    }
    if entries.len() < 2 {
        return Err(Error::invalid("fewer than two corpus entries trained"));
    }
    let corpus = Corpus {
        settings: settings.clone(),
        entries,
    };
    write_csv(dir.join("truth.csv"), &corpus.truth_rows())?;
    write_csv(dir.join("timings.csv"), &timings)?;
    write_atomic(
        dir.join("corpus.json"),
        serde_json::to_string_pretty(&corpus)?.as_bytes(),
    )?;
    Ok(corpus)
}

impl Corpus {
    pub fn load(dir: impl AsRef<Path>) -> Result<Corpus> {
        let p = dir.as_ref().join("corpus.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::storage(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn truth_rows(&self) -> Vec<TruthRow> {
        self.entries
            .iter()
            .map(|e| TruthRow {
                id: e.id,
                config: config_json(&e.config),
                seeds: e
                    .seeds
                    .iter()
                    .map(u64::to_string)
                    .collect::<Vec<_>>()
                    .join(";"),
                true_perf: e.true_perf,
            })
            .collect()
    }

    /// Truth keyed by the entries' own configurations.
    pub fn truth_table(&self) -> TruthTable {
        let mut t = TruthTable::default();
        for e in &self.entries {
            t.insert(&e.config, e.true_perf);
        }
        t
    }

    /// Truth keyed by `{"entry": index}`, for searches over [`Self::entry_space`].
    pub fn entry_truth_table(&self) -> TruthTable {
        let mut t = TruthTable::default();
        for (i, e) in self.entries.iter().enumerate() {
            t.insert(&entry_config(i), e.true_perf);
        }
        t
    }

    /// One categorical parameter over the entries: a tabular benchmark.
    pub fn entry_space(&self) -> Vec<ParamSpec> {
        vec![ParamSpec::categorical(
            "entry",
            (0..self.entries.len() as i64)
                .map(ParamValue::Int)
                .collect(),
        )]
    }
}

pub fn entry_config(i: usize) -> Config {
    [("entry".to_string(), ParamValue::Int(i as i64))]
        .into_iter()
        .collect()
}

/// A corpus with every history in memory.
pub struct LoadedCorpus {
    pub corpus: Corpus,
    /// `histories[entry][seed]`.
    pub histories: Vec<Vec<FeatureHistory>>,
    pub timings: Vec<TimingRow>,
}

impl LoadedCorpus {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let corpus = Corpus::load(dir)?;
        let histories = corpus
            .entries
            .iter()
            .map(|e| {
                e.history_paths
                    .iter()
                    .map(|p| read_history(dir.join(p)))
                    .collect()
            })
            .collect::<Result<Vec<Vec<_>>>>()?;
        let timings = read_csv(dir.join("timings.csv")).unwrap_or_default();
        Ok(LoadedCorpus {
            corpus,
            histories,
            timings,
        })
    }

    pub fn mean_epoch_ms(&self) -> Option<f64> {
        (!self.timings.is_empty()).then(|| {
            self.timings.iter().map(|t| t.epoch_ms).sum::<f64>() / self.timings.len() as f64
        })
    }
}

/// Replays stored histories: a trial's result at budget `b` is what its
/// history shows after `b` epochs. The history is chosen by the trial seed.
/// Since corpus runs used a schedule of full length, this equals resuming
/// training under a schedule fixed to the maximum budget.
pub struct TabularExecutor<'c> {
    pub corpus: &'c LoadedCorpus,
    pub proxy: ProxyConfig,
}

impl Executor for TabularExecutor<'_> {
    fn execute(&self, item: WorkItem) -> Result<Outcome> {
        let entry = item
            .config
            .get("entry")
            .and_then(ParamValue::as_i64)
            .filter(|&e| e >= 0 && (e as usize) < self.corpus.histories.len())
            .ok_or_else(|| Error::invalid("tabular config needs a valid \"entry\""))?
            as usize;
        let runs = &self.corpus.histories[entry];
        let h = &runs[(item.seed % runs.len() as u64) as usize];
        let end = u32::try_from(item.budget).map_err(|_| Error::invalid("budget too large"))?;
        let raw = h
            .record(end)
            .ok_or_else(|| Error::invalid(format!("history has no epoch {end}")))?
            .raw_val_accuracy as f64;
        let proxy = match item.metric {
            Metric::Raw => None,
            Metric::Proxy => {
                let cfg = proxy_at_budget(&self.proxy, item.budget);
                Some(estimate(h, end, &cfg, &mut proxy_rng(item.seed, item.budget))?.accuracy)
            }
        };
        Ok(Outcome {
            raw,
            proxy,
            resume: None,
            history_path: None,
        })
    }
}

/// One row of a ranking report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub epoch: u32,
    pub abs_err_raw: f64,
    pub abs_err_proxy: f64,
    pub tau_raw: f64,
    pub tau_proxy: f64,
    /// Measured estimate cost in epochs of training; the proxy point is
    /// plotted at `epoch + proxy_offset_epochs`. A timing column.
    pub proxy_offset_epochs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    pub rows: Vec<RankingRow>,
}

impl RankingReport {
    pub fn row(&self, epoch: u32) -> Option<&RankingRow> {
        self.rows.iter().find(|r| r.epoch == epoch)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_csv(path, &self.rows)
    }
}

fn eval_rng(eval_seed: u64, entry: usize, run: usize, epoch: u32) -> Rng {
    Rng::new(eval_seed).derive(((entry as u64) << 40) ^ ((run as u64) << 20) ^ epoch as u64)
}

/// Error and rank correlation of raw and proxy estimates at each grid epoch.
/// An entry's estimate is the mean over its seeds; proxy figures are averaged
/// over `eval_seeds`.
pub fn ranking_eval(
    corpus: &LoadedCorpus,
    proxy: &ProxyConfig,
    epoch_grid: &[u32],
    eval_seeds: &[u64],
) -> Result<RankingReport> {
    let entries = &corpus.corpus.entries;
    if entries.len() < 2 {
        return Err(Error::invalid("ranking needs at least two corpus entries"));
    }
    if eval_seeds.is_empty() {
        return Err(Error::invalid("need at least one evaluation seed"));
    }
    let truth: Vec<f64> = entries.iter().map(|e| e.true_perf).collect();
    let mean_abs_err = |est: &[f64]| {
        est.iter()
            .zip(&truth)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / truth.len() as f64
    };
    let epoch_ms = corpus.mean_epoch_ms();

    let mut rows = Vec::with_capacity(epoch_grid.len());
    for &t in epoch_grid {
        let raw: Vec<f64> = corpus
            .histories
            .iter()
            .map(|runs| {
                runs.iter()
                    .map(|h| {
                        h.record(t)
                            .map(|r| r.raw_val_accuracy as f64)
                            .ok_or_else(|| Error::invalid(format!("history has no epoch {t}")))
                    })
                    .sum::<Result<f64>>()
                    .map(|s| s / runs.len() as f64)
            })
            .collect::<Result<_>>()?;
        let cfg = proxy_at_budget(proxy, t as usize);
        let (mut err_p, mut tau_p, mut est_secs, mut n_est) = (0.0, 0.0, 0.0, 0usize);
        for &es in eval_seeds {
            let timed: Vec<(f64, f64, usize)> = corpus
                .histories
                .par_iter()
                .enumerate()
                .map(|(i, runs)| {
                    let mut sum = 0.0;
                    let mut secs = 0.0;
                    for (j, h) in runs.iter().enumerate() {
                        let start = Instant::now();
                        sum += estimate(h, t, &cfg, &mut eval_rng(es, i, j, t))?.accuracy;
                        secs += start.elapsed().as_secs_f64();
                    }
                    Ok((sum / runs.len() as f64, secs, runs.len()))
                })
                .collect::<Result<_>>()?;
            let est: Vec<f64> = timed.iter().map(|x| x.0).collect();
            est_secs += timed.iter().map(|x| x.1).sum::<f64>();
            n_est += timed.iter().map(|x| x.2).sum::<usize>();
            err_p += mean_abs_err(&est);
            tau_p += kendall_tau(&est, &truth)?;
        }
        let k = eval_seeds.len() as f64;
        rows.push(RankingRow {
            epoch: t,
            abs_err_raw: mean_abs_err(&raw),
            abs_err_proxy: err_p / k,
            tau_raw: kendall_tau(&raw, &truth)?,
            tau_proxy: tau_p / k,
            proxy_offset_epochs: epoch_ms.map_or(0.0, |ms| est_secs * 1e3 / n_est as f64 / ms),
        });
    }
    Ok(RankingReport { rows })
}

//! Random search, HyperBand and BOHB over a generic space, driven by either
//! the raw accuracy or the proxy estimate.
//!
//! A coordinator owns every [`Trial`]. Workers receive [`WorkItem`]s and send
//! back [`Outcome`]s; outcomes are applied in trial-id order, so the result of
//! a search does not depend on the worker count.

mod bohb;
mod executor;
mod hyperband;
mod space;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Rng;
use crate::report::write_csv;

pub use bohb::{bohb, BohbConfig, DensityRatioSampler};
pub use executor::{
    proxy_at_budget, proxy_rng, Executor, Metric, Outcome, Resume, StubExecutor, TrainingExecutor,
    WorkItem,
};
pub use hyperband::{hyperband, hyperband_schedule, s_max, Bracket, HyperBandConfig, Rung};
pub use space::{config_json, read_space, sample_config, Config, ParamKind, ParamSpec, ParamValue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Pending,
    Running,
    Paused,
    Done,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub id: usize,
    pub config: Config,
    pub seed: u64,
    pub budget_used: usize,
    pub history_path: Option<PathBuf>,
    pub metric_raw: Option<f64>,
    pub metric_proxy: Option<f64>,
    pub status: TrialStatus,
}

impl Trial {
    pub fn score(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Raw => self.metric_raw,
            Metric::Proxy => self.metric_proxy,
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self.status, TrialStatus::Failed(_))
    }
}

/// One line of a search report. Trial rows record a single rung result; the
/// summary row names the winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub kind: String,
    pub id: usize,
    pub config: String,
    pub bracket: Option<usize>,
    pub rung: Option<usize>,
    pub budget: usize,
    pub status: String,
    pub raw_acc: Option<f64>,
    pub proxy_acc: Option<f64>,
    pub wall_ms: Option<f64>,
    pub regret: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub metric: Metric,
    pub trials: Vec<Trial>,
    pub winner: usize,
    /// Epochs actually trained, summed over trials.
    pub epochs_used: usize,
    pub rows: Vec<SearchRow>,
}

impl SearchOutcome {
    pub fn best(&self) -> &Trial {
        &self.trials[self.winner]
    }

    pub fn summary_row(&self, truth: Option<&TruthTable>) -> Result<SearchRow> {
        let t = self.best();
        Ok(SearchRow {
            kind: "summary".into(),
            id: t.id,
            config: config_json(&t.config),
            bracket: None,
            rung: None,
            budget: t.budget_used,
            status: "done".into(),
            raw_acc: t.metric_raw,
            proxy_acc: t.metric_proxy,
            wall_ms: None,
            regret: truth.map(|tt| tt.regret(&t.config)).transpose()?,
        })
    }

    /// Trial rows followed by the summary row.
    pub fn report_rows(&self, truth: Option<&TruthTable>) -> Result<Vec<SearchRow>> {
        let mut rows = self.rows.clone();
        rows.push(self.summary_row(truth)?);
        Ok(rows)
    }

    pub fn write_report(&self, path: impl AsRef<Path>, truth: Option<&TruthTable>) -> Result<()> {
        write_csv(path, &self.report_rows(truth)?)
    }
}

/// True final performance per configuration, keyed by canonical JSON.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TruthTable {
    pub entries: BTreeMap<String, f64>,
}

impl TruthTable {
    pub fn insert(&mut self, config: &Config, truth: f64) {
        self.entries.insert(config_json(config), truth);
    }

    pub fn best(&self) -> Option<f64> {
        self.entries.values().copied().reduce(f64::max)
    }

    pub fn truth(&self, config: &Config) -> Result<f64> {
        self.entries
            .get(&config_json(config))
            .copied()
            .ok_or_else(|| {
                Error::invalid(format!("config {} not in truth table", config_json(config)))
            })
    }

    /// `true(best) - true(selected)`.
    pub fn regret(&self, config: &Config) -> Result<f64> {
        let t = self.truth(config)?;
        Ok(self.best().unwrap_or(t) - t)
    }
}

/// Outcome of one work item and its wall time in ms.
type Timed = (Result<Outcome>, f64);

/// Runs `items` on up to `workers` threads. Panics become errors. Results
/// come back in input order with their wall time in milliseconds.
pub fn run_pool(executor: &dyn Executor, items: Vec<WorkItem>, workers: usize) -> Vec<Timed> {
    let n = items.len();
    let run = |item: WorkItem| {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(|| executor.execute(item))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            Err(Error::Search(format!("worker panicked: {msg}")))
        });
        (r, t.elapsed().as_secs_f64() * 1e3)
    };
    let threads = workers.max(1).min(n);
    if threads <= 1 {
        return items.into_iter().map(run).collect();
    }
    let queue: Vec<Mutex<Option<WorkItem>>> =
        items.into_iter().map(|i| Mutex::new(Some(i))).collect();
    let slots: Vec<Mutex<Option<Timed>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let item = queue[i].lock().unwrap().take().unwrap();
                let out = run(item);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}

/// Owns the trial table while a search runs.
pub(crate) struct Coordinator<'e> {
    executor: &'e dyn Executor,
    metric: Metric,
    workers: usize,
    trials: Vec<Trial>,
    resumes: Vec<Option<Resume>>,
    rows: Vec<SearchRow>,
    epochs_used: usize,
}

impl<'e> Coordinator<'e> {
    pub(crate) fn new(executor: &'e dyn Executor, metric: Metric, workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::invalid("need at least one worker"));
        }
        Ok(Coordinator {
            executor,
            metric,
            workers,
            trials: Vec::new(),
            resumes: Vec::new(),
            rows: Vec::new(),
            epochs_used: 0,
        })
    }

    pub(crate) fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub(crate) fn add_trial(&mut self, config: Config, seed: u64) -> usize {
        let id = self.trials.len();
        self.trials.push(Trial {
            id,
            config,
            seed,
            budget_used: 0,
            history_path: None,
            metric_raw: None,
            metric_proxy: None,
            status: TrialStatus::Pending,
        });
        self.resumes.push(None);
        id
    }

    /// Brings every listed trial to `budget`, resuming where possible.
    pub(crate) fn run_rung(
        &mut self,
        ids: &[usize],
        budget: usize,
        bracket: Option<usize>,
        rung: Option<usize>,
    ) {
        let mut items = Vec::with_capacity(ids.len());
        for &id in ids {
            let t = &mut self.trials[id];
            t.status = TrialStatus::Running;
            self.epochs_used += budget.saturating_sub(t.budget_used);
            items.push(WorkItem {
                trial_id: id,
                config: t.config.clone(),
                seed: t.seed,
                budget,
                metric: self.metric,
                resume: self.resumes[id].take(),
            });
        }
        let results = run_pool(self.executor, items, self.workers);
        for (&id, (res, ms)) in ids.iter().zip(results) {
            let t = &mut self.trials[id];
            match res {
                Ok(out) => {
                    t.budget_used = budget;
                    t.metric_raw = Some(out.raw);
                    t.metric_proxy = out.proxy;
                    if out.history_path.is_some() {
                        t.history_path = out.history_path;
                    }
                    t.status = TrialStatus::Paused;
                    self.resumes[id] = out.resume;
                    if self.metric == Metric::Proxy && t.metric_proxy.is_none() {
                        t.status =
                            TrialStatus::Failed("executor returned no proxy estimate".into());
                        self.resumes[id] = None;
                    }
                }
                Err(e) => {
                    log::warn!("trial {id} failed at budget {budget}: {e}");
                    t.status = TrialStatus::Failed(e.to_string());
                    t.metric_raw = None;
                    t.metric_proxy = None;
                }
            }
            self.rows.push(SearchRow {
                kind: "trial".into(),
                id,
                config: config_json(&t.config),
                bracket,
                rung,
                budget,
                status: match &t.status {
                    TrialStatus::Failed(_) => "failed".into(),
                    _ => "ok".into(),
                },
                raw_acc: t.metric_raw,
                proxy_acc: t.metric_proxy,
                wall_ms: Some(ms),
                regret: None,
            });
        }
    }

    /// Surviving ids ordered best first; ties go to the lower id.
    pub(crate) fn ranked(&self, ids: &[usize]) -> Vec<usize> {
        let mut live: Vec<(f64, usize)> = ids
            .iter()
            .filter_map(|&id| {
                let t = &self.trials[id];
                (!t.is_failed())
                    .then(|| t.score(self.metric))
                    .flatten()
                    .map(|s| (s, id))
            })
            .collect();
        live.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        live.into_iter().map(|(_, id)| id).collect()
    }

    pub(crate) fn retire(&mut self, ids: &[usize]) {
        for &id in ids {
            if !self.trials[id].is_failed() {
                self.trials[id].status = TrialStatus::Done;
            }
            self.resumes[id] = None;
        }
    }

    pub(crate) fn finish(mut self, finalists: &[usize]) -> Result<SearchOutcome> {
        let all: Vec<usize> = (0..self.trials.len()).collect();
        self.retire(&all);
        let winner = *self
            .ranked(finalists)
            .first()
            .ok_or_else(|| Error::Search("every trial failed".into()))?;
        Ok(SearchOutcome {
            metric: self.metric,
            trials: self.trials,
            winner,
            epochs_used: self.epochs_used,
            rows: self.rows,
        })
    }
}

/// Draws a configuration and a trial seed, in that order.
pub(crate) fn draw_trial(space: &[ParamSpec], rng: &mut Rng) -> Result<(Config, u64)> {
    let config = sample_config(space, rng)?;
    Ok((config, rng.next_u64()))
}

/// Trains `pool_size` sampled configurations to `budget` and keeps the best.
pub fn random_search(
    space: &[ParamSpec],
    pool_size: usize,
    budget: usize,
    executor: &dyn Executor,
    metric: Metric,
    workers: usize,
    rng: &mut Rng,
) -> Result<SearchOutcome> {
    if pool_size == 0 || budget == 0 {
        return Err(Error::invalid("random search needs a pool and a budget"));
    }
    let mut co = Coordinator::new(executor, metric, workers)?;
    let mut ids = Vec::with_capacity(pool_size);
    for _ in 0..pool_size {
        let (c, s) = draw_trial(space, rng)?;
        ids.push(co.add_trial(c, s));
    }
    co.run_rung(&ids, budget, None, Some(0));
    co.finish(&ids)
}

use std::any::Any;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::space::Config;
use crate::error::{Error, Result};
use crate::feature_store::{write_history, FeatureHistory};
use crate::numkit::Rng;
use crate::proxy::{estimate, ProxyConfig};
use crate::trainer::{Dataset, FeatureCapture, ModelSpec, TrainConfig, Trainer, TrainerState};

/// Which number drives selection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Latest raw val accuracy.
    Raw,
    /// Proxy estimate at the latest epoch.
    #[default]
    Proxy,
}

/// Opaque executor state carried between rungs.
pub type Resume = Box<dyn Any + Send>;

/// A request to bring one trial up to `budget` epochs.
pub struct WorkItem {
    pub trial_id: usize,
    pub config: Config,
    pub seed: u64,
    pub budget: usize,
    pub metric: Metric,
    pub resume: Option<Resume>,
}

pub struct Outcome {
    pub raw: f64,
    /// Only computed when the item asked for [`Metric::Proxy`].
    pub proxy: Option<f64>,
    pub resume: Option<Resume>,
    pub history_path: Option<PathBuf>,
}

/// Runs trials. Implementations must be deterministic in the work item.
pub trait Executor: Sync {
    fn execute(&self, item: WorkItem) -> Result<Outcome>;
}

/// Executor backed by a closure of `(config, budget)`; raw and proxy share
/// its value.
pub struct StubExecutor<F>(pub F);

impl<F> Executor for StubExecutor<F>
where
    F: Fn(&Config, usize) -> Result<f64> + Sync,
{
    fn execute(&self, item: WorkItem) -> Result<Outcome> {
        let v = (self.0)(&item.config, item.budget)?;
        Ok(Outcome {
            raw: v,
            proxy: (item.metric == Metric::Proxy).then_some(v),
            resume: None,
            history_path: None,
        })
    }
}

/// Proxy settings for a trial at `budget` epochs: the window shrinks to the
/// available history.
pub fn proxy_at_budget(base: &ProxyConfig, budget: usize) -> ProxyConfig {
    ProxyConfig {
        k: base.k.min(budget).max(1),
        ..*base
    }
}

/// Generator for the refits of one trial at one budget.
pub fn proxy_rng(seed: u64, budget: usize) -> Rng {
    Rng::new(seed).derive(0x5052_4f58_0000_0000 ^ budget as u64)
}

/// Trains real MLPs on a shared dataset. Config keys: `width` (hidden units),
/// `lr0`, `weight_decay`; missing keys keep the base values.
pub struct TrainingExecutor {
    pub data: Dataset,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Length of every trial's learning-rate schedule.
    pub max_budget: usize,
    pub proxy: ProxyConfig,
    pub history_dir: Option<PathBuf>,
}

struct TrainingResume {
    state: TrainerState,
    history: FeatureHistory,
}

impl TrainingExecutor {
    pub fn resolve(&self, config: &Config, seed: u64) -> Result<(ModelSpec, TrainConfig)> {
        let mut spec = self.model.clone();
        let mut cfg = self.train;
        cfg.seed = seed;
        cfg.schedule_epochs = Some(self.max_budget);
        for (k, v) in config {
            let bad = || Error::invalid(format!("bad value {v:?} for {k}"));
            match k.as_str() {
                "width" => {
                    let w = v.as_i64().filter(|&w| w > 0).ok_or_else(bad)?;
                    spec.hidden_dims = vec![w as usize];
                }
                "lr0" => cfg.sgd.learning_rate = v.as_f64().ok_or_else(bad)?,
                "weight_decay" => cfg.sgd.weight_decay = v.as_f64().ok_or_else(bad)?,
                _ => return Err(Error::invalid(format!("unknown parameter {k}"))),
            }
        }
        Ok((spec, cfg))
    }
}

impl Executor for TrainingExecutor {
    fn execute(&self, item: WorkItem) -> Result<Outcome> {
        if item.budget == 0 || item.budget > self.max_budget {
            return Err(Error::invalid(format!(
                "budget {} outside [1, {}]",
                item.budget, self.max_budget
            )));
        }
        let (spec, mut cfg) = self.resolve(&item.config, item.seed)?;
        cfg.epochs = item.budget;
        let prior = match item.resume {
            Some(r) => Some(
                *r.downcast::<TrainingResume>()
                    .map_err(|_| Error::invalid("resume state from a different executor"))?,
            ),
            None => None,
        };
        let (mut trainer, mut history) = match prior {
            Some(p) => (
                Trainer::from_state(spec, &self.data, cfg, p.state)?,
                p.history,
            ),
            None => {
                let t = Trainer::new(spec, &self.data, cfg)?;
                let h = FeatureHistory::new(t.history_meta())?;
                (t, h)
            }
        };
        while (trainer.epochs_done() as usize) < item.budget {
            let (rec, _) = trainer.run_epoch(FeatureCapture::InPass)?;
            history.push(rec)?;
        }
        let end = trainer.epochs_done();
        let raw = history
            .record(end)
            .map(|r| r.raw_val_accuracy as f64)
            .ok_or_else(|| Error::invalid("trial has no epochs"))?;
        let proxy = match item.metric {
            Metric::Raw => None,
            Metric::Proxy => {
                let cfg = proxy_at_budget(&self.proxy, item.budget);
                Some(
                    estimate(&history, end, &cfg, &mut proxy_rng(item.seed, item.budget))?.accuracy,
                )
            }
        };
        let history_path = match &self.history_dir {
            Some(dir) => {
                let p = dir.join(format!("trial-{:04}.fhst", item.trial_id));
                write_history(&p, &history)?;
                Some(p)
            }
            None => None,
        };
        Ok(Outcome {
            raw,
            proxy,
            resume: Some(Box::new(TrainingResume {
                state: trainer.state(),
                history,
            })),
            history_path,
        })
    }
}

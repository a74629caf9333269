//! Resumable MLP training that records a feature history.
//!
//! Each epoch runs shuffled mini-batch SGD under a linear learning-rate decay,
//! keeps the penultimate features each train sample produced during its
//! forward pass, then computes val features with the end-of-epoch weights and
//! saves an [`EpochRecord`].

mod data;
mod mlp;
mod state;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{EpochRecord, FeatureHistory, HistoryMeta, HistoryWriter};
use crate::numkit::{linear_lr, sgd_update, Matrix, Rng, SgdConfig};
use crate::report::EpochLogWriter;

pub use data::{
    gen_dataset, gen_dataset_with_latent, read_dataset, write_dataset, Dataset, DatasetSpec,
    LatentData,
};
pub use mlp::{Dense, ForwardCache, Mlp, ModelSpec};
pub use state::TrainerState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Epoch budget of this run.
    pub epochs: usize,
    /// Length of the learning-rate schedule in epochs. Defaults to `epochs`;
    /// resumable search trials set it to the maximum budget.
    pub schedule_epochs: Option<usize>,
    pub batch: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            schedule_epochs: None,
            batch: 32,
            sgd: SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epoch budget must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.schedule_epochs.is_some_and(|s| s < self.epochs) {
            return Err(Error::invalid("schedule shorter than the epoch budget"));
        }
        self.sgd.validate()
    }

    pub fn schedule_len(&self) -> usize {
        self.schedule_epochs.unwrap_or(self.epochs)
    }

    /// Shrinks the budget to `fraction` of `epochs` (at least one epoch) and
    /// fits the schedule to the shorter run.
    pub fn scaled(&self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "budget fraction {fraction} outside (0, 1]"
            )));
        }
        let epochs = ((self.epochs as f64 * fraction).round() as usize).max(1);
        Ok(TrainConfig {
            epochs,
            schedule_epochs: None,
            ..*self
        })
    }
}

/// Where stored train features come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureCapture {
    /// Features each sample produced in its own training forward pass.
    #[default]
    InPass,
    /// Features recomputed from the end-of-epoch weights.
    EndOfEpoch,
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Rate used for the epoch's last step.
    pub lr: f64,
}

/// A training run that can stop after any epoch and continue from its state.
pub struct Trainer<'a> {
    spec: ModelSpec,
    data: &'a Dataset,
    cfg: TrainConfig,
    model: Mlp,
    velocity: Vec<Matrix>,
    epochs_done: u32,
    step: u64,
    rng: Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(spec: ModelSpec, data: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        check_compat(&spec, data)?;
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let model = Mlp::init(&spec, &mut rng.fork())?;
        let velocity = model
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Ok(Trainer {
            spec,
            data,
            cfg,
            model,
            velocity,
            epochs_done: 0,
            step: 0,
            rng,
        })
    }

    pub fn from_state(
        spec: ModelSpec,
        data: &'a Dataset,
        cfg: TrainConfig,
        state: TrainerState,
    ) -> Result<Self> {
        check_compat(&spec, data)?;
        cfg.validate()?;
        let n_params = spec.layer_shapes().len() * 2;
        if state.params.len() != n_params || state.velocity.len() != n_params {
            return Err(Error::invalid(
                "trainer state does not match the model spec",
            ));
        }
        for (p, v) in state.params.iter().zip(&state.velocity) {
            if p.shape() != v.shape() {
                return Err(Error::invalid("velocity shape differs from its parameter"));
            }
        }
        let model = Mlp::from_params(&spec, state.params)?;
        Ok(Trainer {
            spec,
            data,
            cfg,
            model,
            velocity: state.velocity,
            epochs_done: state.epochs_done,
            step: state.step,
            rng: Rng::from_state(state.rng),
        })
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            epochs_done: self.epochs_done,
            step: self.step,
            rng: self.rng.state(),
            params: self.model.params().into_iter().cloned().collect(),
            velocity: self.velocity.clone(),
        }
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn epochs_done(&self) -> u32 {
        self.epochs_done
    }

    pub fn history_meta(&self) -> HistoryMeta {
        HistoryMeta {
            n_train: self.data.x_train.rows(),
            n_val: self.data.x_val.rows(),
            d: self.spec.feature_dim,
            c: self.spec.classes,
            y_train: self.data.y_train.clone(),
            y_val: self.data.y_val.clone(),
        }
    }

    fn steps_per_epoch(&self) -> usize {
        self.data.x_train.rows().div_ceil(self.cfg.batch)
    }

    /// Runs one epoch and returns its record and log row.
    pub fn run_epoch(&mut self, capture: FeatureCapture) -> Result<(EpochRecord, EpochLog)> {
        let sched = self.cfg.schedule_len();
        if self.epochs_done as usize >= sched {
            return Err(Error::invalid(format!(
                "schedule of {sched} epochs is already complete"
            )));
        }
        let n = self.data.x_train.rows();
        let d = self.spec.feature_dim;
        let total_steps = sched * self.steps_per_epoch();
        let mut epoch_rng = self.rng.fork();
        let mut order: Vec<usize> = (0..n).collect();
        epoch_rng.shuffle(&mut order);

        let mut h_train = Matrix::zeros(n, d);
        let mut loss_sum = 0f64;
        let mut lr = 0.0;
        for idx in order.chunks(self.cfg.batch) {
            let xb = self.data.x_train.gather_rows(idx);
            let yb: Vec<u32> = idx.iter().map(|&i| self.data.y_train[i]).collect();
            let cache = self.model.forward(&xb)?;
            if capture == FeatureCapture::InPass {
                let feats = cache.features();
                for (r, &i) in idx.iter().enumerate() {
                    h_train.row_mut(i).copy_from_slice(feats.row(r));
                }
            }
            let (loss, grads) = self.model.backward(&cache, &yb)?;
            loss_sum += loss * idx.len() as f64;
            lr = linear_lr(self.step as usize, total_steps, self.cfg.sgd.learning_rate)?;
            for ((p, g), v) in self
                .model
                .params_mut()
                .into_iter()
                .zip(&grads)
                .zip(self.velocity.iter_mut())
            {
                sgd_update(p.data_mut(), g.data(), v.data_mut(), &self.cfg.sgd, lr);
            }
            self.step += 1;
        }
        for p in self.model.params() {
            p.ensure_finite("model parameters after an epoch")?;
        }
        if capture == FeatureCapture::EndOfEpoch {
            h_train = self.model.features(&self.data.x_train)?;
        }
        let h_val = self.model.features(&self.data.x_val)?;
        let head = self.model.head();
        let val_acc = head.accuracy(&h_val, &self.data.y_val)?;
        self.epochs_done += 1;
        let rec = EpochRecord {
            epoch: self.epochs_done,
            h_train,
            h_val,
            cls_weight: head.weight,
            cls_bias: head.bias,
            raw_val_accuracy: val_acc as f32,
        };
        let log = EpochLog {
            epoch: self.epochs_done,
            train_loss: loss_sum / n as f64,
            val_acc,
            lr,
        };
        Ok((rec, log))
    }
}

fn check_compat(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    spec.validate()?;
    if spec.input_dim != data.input_dim() || spec.classes != data.classes {
        return Err(Error::invalid(format!(
            "model ({} inputs, {} classes) does not fit data ({} inputs, {} classes)",
            spec.input_dim,
            spec.classes,
            data.input_dim(),
            data.classes
        )));
    }
    Ok(())
}

/// Output locations for [`train_with_history`].
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOutputs<'p> {
    pub history: Option<&'p Path>,
    pub epoch_log: Option<&'p Path>,
}

/// Trains for `cfg.epochs` epochs from scratch, persisting each epoch's record
/// as it completes.
pub fn train_with_history(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    capture: FeatureCapture,
    out: TrainOutputs<'_>,
) -> Result<FeatureHistory> {
    let mut trainer = Trainer::new(spec.clone(), data, *cfg)?;
    let mut history = FeatureHistory::new(trainer.history_meta())?;
    let mut writer = match out.history {
        Some(p) => Some(HistoryWriter::create(p, &history.meta)?),
        None => None,
    };
    let mut log = match out.epoch_log {
        Some(p) => Some(EpochLogWriter::create(p)?),
        None => None,
    };
    for _ in 0..cfg.epochs {
        let (rec, row) = trainer.run_epoch(capture)?;
        if let Some(w) = writer.as_mut() {
            w.append(&rec)?;
        }
        if let Some(l) = log.as_mut() {
            l.write(&row)?;
        }
        log::debug!(
            "epoch {} loss {:.4} val_acc {:.4} lr {:.5}",
            row.epoch,
            row.train_loss,
            row.val_acc,
            row.lr
        );
        history.push(rec)?;
    }
    if let Some(w) = writer {
        w.finish()?;
    }
    if let Some(l) = log {
        l.finish()?;
    }
    Ok(history)
}

/// Top-1 accuracy of a checkpointed model on `(x, y)`.
pub fn evaluate(model: &Mlp, x: &Matrix, y: &[u32]) -> Result<f64> {
    model.evaluate(x, y)
}

//! Accuracy estimation from a feature history.
//!
//! For each of the last `k` epochs the saved head is refit on that epoch's
//! train features, applied to the same epoch's val features, and the softmax
//! outputs of all `k` refit heads are averaged. The ensemble's top-1 accuracy
//! is the estimate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{window, EpochRecord, FeatureHistory};
use crate::numkit::{
    accuracy, argmax, dot64, linear_lr, sgd_update, softmax, softmax_row_in_place, Matrix, Rng,
    SgdConfig,
};

/// `c x d` weight plus a `1 x c` bias mapping features to logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearClassifier {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        bias.ensure_shape(1, weight.rows(), "classifier bias")?;
        weight.ensure_finite("classifier weight")?;
        bias.ensure_finite("classifier bias")?;
        Ok(LinearClassifier { weight, bias })
    }

    pub fn zeros(c: usize, d: usize) -> Self {
        LinearClassifier {
            weight: Matrix::zeros(c, d),
            bias: Matrix::zeros(1, c),
        }
    }

    /// The head saved with an epoch record.
    pub fn from_record(rec: &EpochRecord) -> Self {
        LinearClassifier {
            weight: rec.cls_weight.clone(),
            bias: rec.cls_bias.clone(),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.dim() {
            return Err(Error::invalid(format!(
                "features have {} columns, classifier expects {}",
                features.cols(),
                self.dim()
            )));
        }
        let mut z = features.matmul_t(&self.weight)?;
        z.add_row(self.bias.data())?;
        Ok(z)
    }

    pub fn predict_proba(&self, features: &Matrix) -> Result<Matrix> {
        softmax(&self.logits(features)?)
    }

    /// Top-1 accuracy of the softmax output, ties to the lowest class.
    pub fn accuracy(&self, features: &Matrix, labels: &[u32]) -> Result<f64> {
        accuracy(&self.predict_proba(features)?, labels)
    }

    /// Mean cross-entropy on `(features, labels)`.
    pub fn loss(&self, features: &Matrix, labels: &[u32]) -> Result<f64> {
        crate::numkit::cross_entropy(&self.predict_proba(features)?, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    /// Number of trailing epochs in the ensemble.
    pub k: usize,
    pub refit_epochs: usize,
    /// Clipped to `n_train`.
    pub refit_batch: usize,
    pub refit_lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            k: 10,
            refit_epochs: 5,
            refit_batch: 1024,
            refit_lr0: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl ProxyConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.refit_lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("window size k must be at least 1"));
        }
        if self.refit_batch == 0 {
            return Err(Error::invalid("refit batch must be at least 1"));
        }
        self.sgd().validate()
    }
}

/// Refits the record's saved head on its train features with shuffled
/// mini-batch SGD, decaying the rate linearly from `refit_lr0` to zero over
/// all refit steps.
pub fn refit_classifier(
    record: &EpochRecord,
    y_train: &[u32],
    cfg: &ProxyConfig,
    rng: &mut Rng,
) -> Result<LinearClassifier> {
    cfg.validate()?;
    let init = LinearClassifier::from_record(record);
    refit_from(init, &record.h_train, y_train, cfg, rng)
}

/// Same as [`refit_classifier`] with an explicit starting head.
pub fn refit_from(
    init: LinearClassifier,
    features: &Matrix,
    labels: &[u32],
    cfg: &ProxyConfig,
    rng: &mut Rng,
) -> Result<LinearClassifier> {
    let (n, d) = features.shape();
    let c = init.classes();
    if init.dim() != d {
        return Err(Error::invalid(format!(
            "classifier dimension {} does not match feature dimension {d}",
            init.dim()
        )));
    }
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{n} feature rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= c) {
        return Err(Error::invalid(format!(
            "label {y} out of range for {c} classes"
        )));
    }
    if cfg.refit_epochs == 0 || n == 0 {
        return Ok(init);
    }

    let sgd = cfg.sgd();
    let batch = cfg.refit_batch.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total = cfg.refit_epochs * steps_per_epoch;

    let LinearClassifier {
        mut weight,
        mut bias,
    } = init;
    let mut v_w = Matrix::zeros(c, d);
    let mut v_b = Matrix::zeros(1, c);
    let feats: Vec<f64> = features.data().iter().map(|&v| v as f64).collect();
    let mut w64 = vec![0f64; c * d];
    let mut g_w = vec![0f64; c * d];
    let mut g_b = vec![0f64; c];
    let mut g_w32 = vec![0f32; c * d];
    let mut g_b32 = vec![0f32; c];
    let mut z = vec![0f32; c];
    let mut order: Vec<usize> = (0..n).collect();

    let mut step = 0;
    for _ in 0..cfg.refit_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            for (dst, &src) in w64.iter_mut().zip(weight.data()) {
                *dst = src as f64;
            }
            g_w.iter_mut().for_each(|v| *v = 0.0);
            g_b.iter_mut().for_each(|v| *v = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let h = &feats[i * d..(i + 1) * d];
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = (bias.data()[j] as f64 + dot64(&w64[j * d..(j + 1) * d], h)) as f32;
                }
                softmax_row_in_place(&mut z);
                z[labels[i] as usize] -= 1.0;
                for (j, &delta) in z.iter().enumerate() {
                    let delta = delta as f64 * scale;
                    g_b[j] += delta;
                    for (g, &hv) in g_w[j * d..(j + 1) * d].iter_mut().zip(h) {
                        *g += delta * hv;
                    }
                }
            }
            for (dst, &src) in g_w32.iter_mut().zip(&g_w) {
                *dst = src as f32;
            }
            for (dst, &src) in g_b32.iter_mut().zip(&g_b) {
                *dst = src as f32;
            }
            let lr = linear_lr(step, total, cfg.refit_lr0)?;
            sgd_update(weight.data_mut(), &g_w32, v_w.data_mut(), &sgd, lr);
            sgd_update(bias.data_mut(), &g_b32, v_b.data_mut(), &sgd, lr);
            step += 1;
        }
    }
    weight.ensure_finite("refit weight")?;
    bias.ensure_finite("refit bias")?;
    Ok(LinearClassifier { weight, bias })
}

/// Mean of `softmax(h_val · Wᵀ + b)` over members, each head paired with its
/// own epoch's val features.
pub fn ensemble_predict(members: &[(LinearClassifier, &Matrix)]) -> Result<Matrix> {
    let Some((first, first_h)) = members.first() else {
        return Err(Error::invalid("ensemble needs at least one member"));
    };
    let (n, c) = (first_h.rows(), first.classes());
    let mut acc = vec![0f64; n * c];
    for (clf, h) in members {
        if h.rows() != n || clf.classes() != c {
            return Err(Error::invalid(format!(
                "ensemble member shape ({}, {}) differs from ({n}, {c})",
                h.rows(),
                clf.classes()
            )));
        }
        let p = clf.predict_proba(h)?;
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += v as f64;
        }
    }
    let k = members.len() as f64;
    Matrix::new(n, c, acc.into_iter().map(|v| (v / k) as f32).collect())
}

/// Result of one estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyEstimate {
    pub estimate_epoch: u32,
    pub accuracy: f64,
    pub mean_probs: Matrix,
    /// Val accuracy of each refit head alone, oldest epoch first.
    pub per_member_accuracy: Vec<f64>,
}

/// Refits every record in `records` with its own child generator, forked from
/// `rng` in epoch order. Work may run in parallel; results keep epoch order.
pub fn refit_window(
    records: &[EpochRecord],
    y_train: &[u32],
    cfg: &ProxyConfig,
    rng: &mut Rng,
) -> Result<Vec<LinearClassifier>> {
    let rngs: Vec<Rng> = records.iter().map(|_| rng.fork()).collect();
    records
        .par_iter()
        .zip(rngs)
        .map(|(rec, mut r)| refit_classifier(rec, y_train, cfg, &mut r))
        .collect()
}

/// Estimate of the converged accuracy from the history up to `end_epoch`.
pub fn estimate(
    history: &FeatureHistory,
    end_epoch: u32,
    cfg: &ProxyConfig,
    rng: &mut Rng,
) -> Result<ProxyEstimate> {
    cfg.validate()?;
    let records = window(history, end_epoch, cfg.k)?;
    let heads = refit_window(records, &history.meta.y_train, cfg, rng)?;
    let members: Vec<(LinearClassifier, &Matrix)> = heads
        .into_iter()
        .zip(records)
        .map(|(h, r)| (h, &r.h_val))
        .collect();
    let per_member_accuracy = members
        .iter()
        .map(|(clf, h)| clf.accuracy(h, &history.meta.y_val))
        .collect::<Result<Vec<_>>>()?;
    let mean_probs = ensemble_predict(&members)?;
    let accuracy = accuracy(&mean_probs, &history.meta.y_val)?;
    Ok(ProxyEstimate {
        estimate_epoch: end_epoch,
        accuracy,
        mean_probs,
        per_member_accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierMode {
    /// The head saved at each epoch.
    Original,
    /// The saved head refit on that epoch's features.
    Optimized,
    /// Trailing-`k` ensemble of optimized heads ending at each epoch.
    Ensemble,
}

/// Per-epoch correctness of every val sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectnessTimeline {
    pub epochs: Vec<u32>,
    /// `columns[t][i]` is true when val sample `i` is correct at `epochs[t]`.
    pub columns: Vec<Vec<bool>>,
}

impl CorrectnessTimeline {
    pub fn n_val(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column_mean(&self, t: usize) -> f64 {
        let col = &self.columns[t];
        col.iter().filter(|&&b| b).count() as f64 / col.len() as f64
    }

    pub fn row(&self, i: usize) -> Vec<bool> {
        self.columns.iter().map(|col| col[i]).collect()
    }

    /// Number of correct/incorrect switches between consecutive epochs,
    /// summed over all samples.
    pub fn flips(&self) -> usize {
        self.columns
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).filter(|(a, b)| a != b).count())
            .sum()
    }
}

fn correct_flags(scores: &Matrix, labels: &[u32]) -> Vec<bool> {
    scores
        .row_iter()
        .zip(labels)
        .map(|(row, &y)| argmax(row) == y as usize)
        .collect()
}

/// Correctness of each val sample at each epoch under the chosen classifier.
///
/// Optimized and ensemble modes refit every epoch once, each with a child
/// generator forked from `rng` in epoch order.
pub fn correctness_timeline(
    history: &FeatureHistory,
    cfg: &ProxyConfig,
    rng: &mut Rng,
    mode: ClassifierMode,
) -> Result<CorrectnessTimeline> {
    if history.epochs.is_empty() {
        return Err(Error::invalid("timeline of an empty history"));
    }
    cfg.validate()?;
    let y_val = &history.meta.y_val;
    let epochs: Vec<u32> = history.epochs.iter().map(|r| r.epoch).collect();
    let columns = match mode {
        ClassifierMode::Original => history
            .epochs
            .iter()
            .map(|r| {
                let p = LinearClassifier::from_record(r).predict_proba(&r.h_val)?;
                Ok(correct_flags(&p, y_val))
            })
            .collect::<Result<Vec<_>>>()?,
        ClassifierMode::Optimized | ClassifierMode::Ensemble => {
            let heads = refit_window(&history.epochs, &history.meta.y_train, cfg, rng)?;
            let probs = heads
                .iter()
                .zip(&history.epochs)
                .map(|(h, r)| h.predict_proba(&r.h_val))
                .collect::<Result<Vec<_>>>()?;
            if mode == ClassifierMode::Optimized {
                probs.iter().map(|p| correct_flags(p, y_val)).collect()
            } else {
                let mut cols = Vec::with_capacity(probs.len());
                for (t, rec) in history.epochs.iter().enumerate() {
                    let members = window(history, rec.epoch, cfg.k)?.len();
                    let span = &probs[t + 1 - members..=t];
                    let (n, c) = span[0].shape();
                    let mut acc = vec![0f64; n * c];
                    for p in span {
                        for (a, &v) in acc.iter_mut().zip(p.data()) {
                            *a += v as f64;
                        }
                    }
                    let k = span.len() as f64;
                    let mean =
                        Matrix::new(n, c, acc.into_iter().map(|v| (v / k) as f32).collect())?;
                    cols.push(correct_flags(&mean, y_val));
                }
                cols
            }
        }
    };
    Ok(CorrectnessTimeline { epochs, columns })
}

/// Agreement of a current classifier with the final model, sample by sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agreement {
    /// Both correct.
    pub tp: usize,
    /// Both wrong.
    pub tn: usize,
    /// Current correct, final wrong.
    pub fp: usize,
    /// Current wrong, final correct.
    pub fn_: usize,
}

pub fn agreement_breakdown(current: &[bool], final_correct: &[bool]) -> Result<Agreement> {
    if current.len() != final_correct.len() {
        return Err(Error::invalid(format!(
            "breakdown lengths differ: {} vs {}",
            current.len(),
            final_correct.len()
        )));
    }
    let mut out = Agreement::default();
    for (&cur, &fin) in current.iter().zip(final_correct) {
        match (cur, fin) {
            (true, true) => out.tp += 1,
            (false, false) => out.tn += 1,
            (true, false) => out.fp += 1,
            (false, true) => out.fn_ += 1,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::HistoryMeta;

    fn one_hot_record(c: usize, per_class: usize) -> (EpochRecord, Vec<u32>) {
        let n = c * per_class;
        let labels: Vec<u32> = (0..n).map(|i| (i % c) as u32).collect();
        let h = Matrix::from_fn(n, c, |i, j| if labels[i] as usize == j { 1.0 } else { 0.0 });
        let rec = EpochRecord {
            epoch: 1,
            h_train: h.clone(),
            h_val: h,
            cls_weight: Matrix::zeros(c, c),
            cls_bias: Matrix::zeros(1, c),
            raw_val_accuracy: 0.0,
        };
        (rec, labels)
    }

    #[test]
    fn zero_refit_epochs_returns_saved_head() {
        let (mut rec, y) = one_hot_record(3, 4);
        rec.cls_weight = Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f32 * 0.1);
        let cfg = ProxyConfig {
            refit_epochs: 0,
            ..Default::default()
        };
        let clf = refit_classifier(&rec, &y, &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(clf, LinearClassifier::from_record(&rec));
    }

    #[test]
    fn separable_one_hot_features_fit_perfectly() {
        let (rec, y) = one_hot_record(5, 20);
        let clf = refit_classifier(&rec, &y, &ProxyConfig::default(), &mut Rng::new(1)).unwrap();
        assert_eq!(clf.accuracy(&rec.h_train, &y).unwrap(), 1.0);
    }

    #[test]
    fn xor_is_not_linearly_separable() {
        let h = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ])
        .unwrap();
        let y = [0, 0, 1, 1];
        let rec = EpochRecord {
            epoch: 1,
            h_train: h.clone(),
            h_val: h,
            cls_weight: Matrix::from_rows(&[vec![0.3, -0.2], vec![-0.1, 0.4]]).unwrap(),
            cls_bias: Matrix::zeros(1, 2),
            raw_val_accuracy: 0.0,
        };
        let cfg = ProxyConfig {
            refit_epochs: 200,
            ..Default::default()
        };
        let clf = refit_classifier(&rec, &y, &cfg, &mut Rng::new(2)).unwrap();
        assert!(clf.accuracy(&rec.h_train, &y).unwrap() <= 0.75);
    }

    #[test]
    fn refit_rejects_dimension_mismatch() {
        let (mut rec, y) = one_hot_record(3, 2);
        rec.cls_weight = Matrix::zeros(3, 4);
        assert!(refit_classifier(&rec, &y, &ProxyConfig::default(), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn ensemble_of_one_is_softmax() {
        let h = Matrix::from_fn(4, 3, |i, j| (i as f32 - j as f32) * 0.3);
        let clf = LinearClassifier::new(
            Matrix::from_fn(2, 3, |i, j| (i + j) as f32 * 0.2 - 0.3),
            Matrix::new(1, 2, vec![0.1, -0.1]).unwrap(),
        )
        .unwrap();
        let single = ensemble_predict(&[(clf.clone(), &h)]).unwrap();
        assert_eq!(single, clf.predict_proba(&h).unwrap());
    }

    #[test]
    fn ensemble_of_two_is_mean() {
        let h = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f32 * 0.25);
        let a = LinearClassifier::new(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            Matrix::zeros(1, 2),
        )
        .unwrap();
        let b = LinearClassifier::new(
            Matrix::from_rows(&[vec![-0.5, 2.0], vec![0.3, 0.1]]).unwrap(),
            Matrix::new(1, 2, vec![0.2, 0.0]).unwrap(),
        )
        .unwrap();
        let p = a.predict_proba(&h).unwrap();
        let q = b.predict_proba(&h).unwrap();
        let m = ensemble_predict(&[(a, &h), (b, &h)]).unwrap();
        for ((&x, &y), &z) in p.data().iter().zip(q.data()).zip(m.data()) {
            assert!((z - (x + y) / 2.0).abs() < 1e-7);
        }
        assert!(ensemble_predict(&[]).is_err());
    }

    #[test]
    fn breakdown_counts() {
        let a = [true, true, false, false];
        assert_eq!(
            agreement_breakdown(&a, &a).unwrap(),
            Agreement {
                tp: 2,
                tn: 2,
                fp: 0,
                fn_: 0
            }
        );
        let all = [true; 5];
        let none = [false; 5];
        assert_eq!(agreement_breakdown(&all, &none).unwrap().fp, 5);
        assert!(agreement_breakdown(&all, &a).is_err());

        let mut rng = Rng::new(8);
        let cur: Vec<bool> = (0..8).map(|_| rng.below(2) == 1).collect();
        let fin: Vec<bool> = (0..8).map(|_| rng.below(2) == 1).collect();
        let mut want = [0usize; 4];
        for i in 0..8 {
            let slot = match (cur[i], fin[i]) {
                (true, true) => 0,
                (false, false) => 1,
                (true, false) => 2,
                (false, true) => 3,
            };
            want[slot] += 1;
        }
        let got = agreement_breakdown(&cur, &fin).unwrap();
        assert_eq!([got.tp, got.tn, got.fp, got.fn_], want);
        assert_eq!(want.iter().sum::<usize>(), 8);
    }

    fn constant_history(epochs: u32) -> FeatureHistory {
        let (rec, y) = one_hot_record(3, 3);
        let mut rec = rec;
        rec.cls_weight = Matrix::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.0 });
        rec.raw_val_accuracy = rec.recompute_val_accuracy(&y).unwrap() as f32;
        let meta = HistoryMeta {
            n_train: y.len(),
            n_val: y.len(),
            d: 3,
            c: 3,
            y_train: y.clone(),
            y_val: y,
        };
        let mut h = FeatureHistory::new(meta).unwrap();
        for e in 1..=epochs {
            let mut r = rec.clone();
            r.epoch = e;
            h.push(r).unwrap();
        }
        h
    }

    #[test]
    fn perfect_history_estimates_one() {
        let h = constant_history(4);
        let est = estimate(&h, 4, &ProxyConfig::default(), &mut Rng::new(0)).unwrap();
        assert_eq!(est.accuracy, 1.0);
        assert_eq!(est.per_member_accuracy.len(), 4);
    }

    #[test]
    fn constant_history_gives_identical_columns() {
        let h = constant_history(5);
        for mode in [ClassifierMode::Original, ClassifierMode::Ensemble] {
            let tl =
                correctness_timeline(&h, &ProxyConfig::default(), &mut Rng::new(0), mode).unwrap();
            assert!(tl.columns.windows(2).all(|w| w[0] == w[1]));
            assert_eq!(tl.flips(), 0);
        }
    }
}

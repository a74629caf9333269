use std::sync::OnceLock;

use fhproxy::feature_store::{window, FeatureHistory};
use fhproxy::numkit::{accuracy, Matrix, Rng};
use fhproxy::proxy::*;
use fhproxy::trainer::*;

fn history() -> &'static FeatureHistory {
    static H: OnceLock<FeatureHistory> = OnceLock::new();
    H.get_or_init(|| {
        let data = gen_dataset(&DatasetSpec {
            n_train: 512,
            n_val: 256,
            ..Default::default()
        })
        .unwrap();
        train_with_history(
            &ModelSpec::with_width(64),
            &data,
            &TrainConfig {
                epochs: 16,
                seed: 11,
                ..Default::default()
            },
            FeatureCapture::InPass,
            TrainOutputs::default(),
        )
        .unwrap()
    })
}

#[test]
fn estimate_is_deterministic() {
    let h = history();
    let cfg = ProxyConfig::default();
    let a = estimate(h, 12, &cfg, &mut Rng::new(5)).unwrap();
    let b = estimate(h, 12, &cfg, &mut Rng::new(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_member_accuracy.len(), 10);
    assert_eq!(a.estimate_epoch, 12);
}

#[test]
fn estimate_does_not_depend_on_thread_count() {
    let h = history();
    let cfg = ProxyConfig::default();
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let wide = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    let a = serial.install(|| estimate(h, 16, &cfg, &mut Rng::new(8)).unwrap());
    let b = wide.install(|| estimate(h, 16, &cfg, &mut Rng::new(8)).unwrap());
    assert_eq!(a, b);
}

#[test]
fn degeneracy_chain() {
    let h = history();
    for rec in &h.epochs {
        let original = ProxyConfig {
            k: 1,
            refit_epochs: 0,
            ..Default::default()
        };
        let e = estimate(h, rec.epoch, &original, &mut Rng::new(1)).unwrap();
        assert_eq!(e.accuracy as f32, rec.raw_val_accuracy);
        assert_eq!(
            e.accuracy,
            rec.recompute_val_accuracy(&h.meta.y_val).unwrap()
        );

        let optimized = ProxyConfig {
            k: 1,
            ..Default::default()
        };
        let e = estimate(h, rec.epoch, &optimized, &mut Rng::new(2)).unwrap();
        let head =
            refit_classifier(rec, &h.meta.y_train, &optimized, &mut Rng::new(2).fork()).unwrap();
        assert_eq!(
            e.accuracy,
            head.accuracy(&rec.h_val, &h.meta.y_val).unwrap()
        );
    }
}

#[test]
fn ensemble_mean_lies_within_member_range() {
    let h = history();
    let cfg = ProxyConfig {
        k: 4,
        ..Default::default()
    };
    let recs = window(h, 10, 4).unwrap();
    let heads = refit_window(recs, &h.meta.y_train, &cfg, &mut Rng::new(3)).unwrap();
    let probs: Vec<Matrix> = heads
        .iter()
        .zip(recs)
        .map(|(c, r)| c.predict_proba(&r.h_val).unwrap())
        .collect();
    let est = estimate(h, 10, &cfg, &mut Rng::new(3)).unwrap();
    for (i, &m) in est.mean_probs.data().iter().enumerate() {
        let lo = probs
            .iter()
            .map(|p| p.data()[i])
            .fold(f32::INFINITY, f32::min);
        let hi = probs
            .iter()
            .map(|p| p.data()[i])
            .fold(f32::NEG_INFINITY, f32::max);
        assert!(m >= lo - 1e-7 && m <= hi + 1e-7);
    }
    for row in est.mean_probs.row_iter() {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
    assert_eq!(
        est.accuracy,
        accuracy(&est.mean_probs, &h.meta.y_val).unwrap()
    );
    let mut scaled = est.mean_probs.clone();
    scaled.map_in_place(|v| v * 3.5);
    assert_eq!(accuracy(&scaled, &h.meta.y_val).unwrap(), est.accuracy);
}

#[test]
fn refit_does_not_degrade_train_fit() {
    let h = history();
    let cfg = ProxyConfig::default();
    for rec in &h.epochs {
        let init = LinearClassifier::from_record(rec)
            .loss(&rec.h_train, &h.meta.y_train)
            .unwrap();
        let head =
            refit_classifier(rec, &h.meta.y_train, &cfg, &mut Rng::new(rec.epoch as u64)).unwrap();
        let after = head.loss(&rec.h_train, &h.meta.y_train).unwrap();
        assert!(
            after <= init + 1e-3,
            "epoch {}: {init} -> {after}",
            rec.epoch
        );
    }
}

#[test]
fn ensemble_oscillates_less_than_single_heads() {
    let h = history();
    let cfg = ProxyConfig::default();
    let opt = correctness_timeline(h, &cfg, &mut Rng::new(4), ClassifierMode::Optimized).unwrap();
    let ens = correctness_timeline(h, &cfg, &mut Rng::new(4), ClassifierMode::Ensemble).unwrap();
    assert_eq!(opt.columns.len(), h.epochs.len());
    assert!(
        ens.flips() <= opt.flips(),
        "{} vs {}",
        ens.flips(),
        opt.flips()
    );
}

#[test]
fn original_timeline_reproduces_raw_accuracy() {
    let h = history();
    let tl = correctness_timeline(
        h,
        &ProxyConfig::default(),
        &mut Rng::new(0),
        ClassifierMode::Original,
    )
    .unwrap();
    for (t, rec) in h.epochs.iter().enumerate() {
        assert_eq!(tl.column_mean(t) as f32, rec.raw_val_accuracy);
    }
    assert_eq!(tl.n_val(), h.meta.n_val);
}

#[test]
fn agreement_matches_a_pair_walk() {
    let mut rng = Rng::new(12);
    for _ in 0..200 {
        let cur: Vec<bool> = (0..8).map(|_| rng.below(2) == 1).collect();
        let fin: Vec<bool> = (0..8).map(|_| rng.below(2) == 1).collect();
        let a = agreement_breakdown(&cur, &fin).unwrap();
        let mut want = [0usize; 4];
        for i in 0..8 {
            want[(cur[i] as usize) * 2 + fin[i] as usize] += 1;
        }
        assert_eq!([a.tn, a.fn_, a.fp, a.tp], want);
        assert_eq!(a.tp + a.tn + a.fp + a.fn_, 8);
    }
    let all = agreement_breakdown(&[true; 5], &[false; 5]).unwrap();
    assert_eq!(all.fp, 5);
    assert!(agreement_breakdown(&[true], &[true, false]).is_err());
}

#[test]
fn estimate_rejects_missing_epoch() {
    let h = history();
    assert!(estimate(h, 17, &ProxyConfig::default(), &mut Rng::new(0)).is_err());
    assert!(estimate(h, 0, &ProxyConfig::default(), &mut Rng::new(0)).is_err());
}

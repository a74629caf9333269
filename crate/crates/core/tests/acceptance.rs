//! Acceptance run. Prints one PASS/FAIL line per criterion and exits nonzero
//! when any criterion fails. Built with `harness = false`.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use fhproxy::bench::{
    build_corpus, desk_space, kendall_tau, ranking_eval, CorpusSettings, LoadedCorpus,
    TabularExecutor,
};
use fhproxy::feature_store::{read_history, write_history, FeatureHistory};
use fhproxy::numkit::Rng;
use fhproxy::proxy::{
    correctness_timeline, estimate, refit_classifier, ClassifierMode, ProxyConfig,
};
use fhproxy::report::{write_csv, EstimateRow};
use fhproxy::search::{
    hyperband, hyperband_schedule, HyperBandConfig, Metric, Rung, TrainingExecutor,
};
use fhproxy::trainer::*;

const CORPUS_CONFIGS: usize = 24;
const CORPUS_SEEDS: [u64; 2] = [0, 1];
const CORPUS_RNG: u64 = 7;
const EVAL_SEEDS: [u64; 3] = [0, 1, 2];
const SEARCH_SEEDS: std::ops::Range<u64> = 0..5;

const TAU_MARGIN: f64 = 0.05;
const GRAD_TOL: f64 = 1e-3;
const OVERHEAD_GATE: f64 = 1.0;
const OVERHEAD_TARGET: f64 = 0.5;
const FLIP_RATIO: f64 = 0.8;

/// Columns holding wall-clock measurements; excluded from determinism checks.
const TIMING_COLUMNS: [&str; 4] = [
    "wall_ms",
    "wall_ms_overhead",
    "epoch_ms",
    "proxy_offset_epochs",
];

struct Verdict {
    id: usize,
    ok: bool,
    detail: String,
    secs: f64,
}

fn run(id: usize, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let start = Instant::now();
    let (ok, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let v = Verdict {
        id,
        ok,
        detail,
        secs: start.elapsed().as_secs_f64(),
    };
    println!(
        "{} [{:>2}] {} ({:.1} s)",
        if v.ok { "PASS" } else { "FAIL" },
        v.id,
        v.detail,
        v.secs
    );
    v
}

fn kendall_oracle() -> (bool, String) {
    let mut rng = Rng::new(1);
    let mut mismatches = 0;
    let start = Instant::now();
    for _ in 0..1000 {
        let n = 2 + rng.below(49) as usize;
        let levels = 1 + rng.below(8);
        let a: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64).collect();
        let fast = kendall_tau(&a, &b).unwrap();
        if fast.to_bits() != common::tau_brute(&a, &b).to_bits() {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        mismatches == 0 && secs < 5.0,
        format!("kendall tau-b vs O(n^2) oracle: {mismatches} mismatches in 1000 tied sequences, {secs:.2} s (limit 5 s)"),
    )
}

fn degeneracy(corpus: &LoadedCorpus) -> (bool, String) {
    let start = Instant::now();
    let raw_cfg = ProxyConfig {
        k: 1,
        refit_epochs: 0,
        ..Default::default()
    };
    let opt_cfg = ProxyConfig {
        k: 1,
        refit_epochs: 5,
        ..Default::default()
    };
    let (mut checked, mut raw_bad, mut opt_bad) = (0, 0, 0);
    for (i, runs) in corpus.histories.iter().enumerate() {
        for (j, h) in runs.iter().enumerate() {
            for rec in &h.epochs {
                let seed = ((i as u64) << 32) ^ ((j as u64) << 16) ^ rec.epoch as u64;
                let est = estimate(h, rec.epoch, &raw_cfg, &mut Rng::new(seed)).unwrap();
                if (est.accuracy as f32).to_bits() != rec.raw_val_accuracy.to_bits() {
                    raw_bad += 1;
                }
                let est = estimate(h, rec.epoch, &opt_cfg, &mut Rng::new(seed)).unwrap();
                let mut child = Rng::new(seed).fork();
                let clf = refit_classifier(rec, &h.meta.y_train, &opt_cfg, &mut child).unwrap();
                let single = clf.accuracy(&rec.h_val, &h.meta.y_val).unwrap();
                if est.accuracy.to_bits() != single.to_bits() {
                    opt_bad += 1;
                }
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        raw_bad == 0 && opt_bad == 0 && secs < 60.0,
        format!(
            "degeneracy chain on {checked} corpus epochs: {raw_bad} raw mismatches, {opt_bad} optimized mismatches, {secs:.1} s (limit 60 s)"
        ),
    )
}

fn gradients() -> (bool, String) {
    let start = Instant::now();
    let worst = (0..20u64).map(common::gradient_check).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    (
        worst < GRAD_TOL && secs < 10.0,
        format!("gradient check on 20 instances: worst relative error {worst:.2e} (limit {GRAD_TOL:.0e})"),
    )
}

fn estimation_quality(report: &fhproxy::bench::RankingReport) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for e in [15, 30] {
        let r = report.row(e).unwrap();
        ok &= r.abs_err_proxy < r.abs_err_raw;
        parts.push(format!(
            "epoch {e}: |proxy-true| {:.4} vs |raw-true| {:.4}",
            r.abs_err_proxy, r.abs_err_raw
        ));
    }
    (ok, format!("estimation error, {}", parts.join("; ")))
}

fn ranking(report: &fhproxy::bench::RankingReport) -> (bool, String) {
    let r = report.row(15).unwrap();
    (
        r.tau_proxy >= r.tau_raw + TAU_MARGIN,
        format!(
            "kendall tau at epoch 15: proxy {:.3} vs raw {:.3} (needs margin {TAU_MARGIN})",
            r.tau_proxy, r.tau_raw
        ),
    )
}

fn overhead() -> (bool, String) {
    let data = gen_dataset(&DatasetSpec::default()).unwrap();
    let cfg = TrainConfig::default();
    let mut trainer = Trainer::new(ModelSpec::default(), &data, cfg).unwrap();
    let mut history = FeatureHistory::new(trainer.history_meta()).unwrap();
    let start = Instant::now();
    for _ in 0..cfg.epochs {
        let (rec, _) = trainer.run_epoch(FeatureCapture::InPass).unwrap();
        history.push(rec).unwrap();
    }
    let epoch_secs = start.elapsed().as_secs_f64() / cfg.epochs as f64;
    let proxy = ProxyConfig::default();
    let points = [15u32, 30, 45, 60];
    let start = Instant::now();
    for &e in &points {
        estimate(&history, e, &proxy, &mut Rng::new(e as u64)).unwrap();
    }
    let est_secs = start.elapsed().as_secs_f64() / points.len() as f64;
    let ratio = est_secs / epoch_secs;
    let target = if ratio <= OVERHEAD_TARGET {
        "met"
    } else {
        "missed"
    };
    (
        ratio <= OVERHEAD_GATE,
        format!(
            "estimate {:.1} ms vs epoch {:.1} ms: ratio {ratio:.2} (gate {OVERHEAD_GATE}, target {OVERHEAD_TARGET} {target})",
            est_secs * 1e3,
            epoch_secs * 1e3
        ),
    )
}

fn oscillation(corpus: &LoadedCorpus) -> (bool, String) {
    let proxy = ProxyConfig::default();
    let (mut ens, mut opt) = (0usize, 0usize);
    for (i, runs) in corpus.histories.iter().enumerate() {
        for (j, h) in runs.iter().enumerate() {
            let seed = ((i as u64) << 8) ^ j as u64;
            opt += correctness_timeline(h, &proxy, &mut Rng::new(seed), ClassifierMode::Optimized)
                .unwrap()
                .flips();
            ens += correctness_timeline(h, &proxy, &mut Rng::new(seed), ClassifierMode::Ensemble)
                .unwrap()
                .flips();
        }
    }
    let ratio = ens as f64 / opt as f64;
    (
        ratio <= FLIP_RATIO,
        format!("flips ensemble {ens} vs optimized {opt}: ratio {ratio:.3} (limit {FLIP_RATIO})"),
    )
}

/// Winner id and true accuracy of tabular HyperBand for each search seed.
fn search_runs(corpus: &LoadedCorpus, metric: Metric, workers: usize) -> Vec<(usize, f64)> {
    let truth = corpus.corpus.entry_truth_table();
    let space = corpus.corpus.entry_space();
    let ex = TabularExecutor {
        corpus,
        proxy: ProxyConfig::default(),
    };
    SEARCH_SEEDS
        .map(|seed| {
            let cfg = HyperBandConfig {
                max_budget: 60,
                eta: 2,
                metric,
                workers,
            };
            let out = hyperband(&space, &cfg, &ex, &mut Rng::new(seed)).unwrap();
            (out.winner, truth.truth(&out.best().config).unwrap())
        })
        .collect()
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (
        m,
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt(),
    )
}

fn search_improvement(raw: &[(usize, f64)], proxy: &[(usize, f64)]) -> (bool, String) {
    let (mr, sr) = mean_sd(&raw.iter().map(|r| r.1).collect::<Vec<_>>());
    let (mp, sp) = mean_sd(&proxy.iter().map(|r| r.1).collect::<Vec<_>>());
    (
        mp >= mr && sp <= sr,
        format!("HyperBand R=60 winners over 5 seeds: proxy {mp:.4} +- {sp:.4} vs raw {mr:.4} +- {sr:.4}"),
    )
}

fn schedule_structure() -> (bool, String) {
    let cfg = HyperBandConfig {
        max_budget: 128,
        eta: 2,
        ..Default::default()
    };
    let got = hyperband_schedule(&cfg).unwrap();
    let expected: [(usize, &[(usize, usize)]); 8] = [
        (
            7,
            &[
                (128, 1),
                (64, 2),
                (32, 4),
                (16, 8),
                (8, 16),
                (4, 32),
                (2, 64),
                (1, 128),
            ],
        ),
        (
            6,
            &[
                (74, 2),
                (37, 4),
                (18, 8),
                (9, 16),
                (4, 32),
                (2, 64),
                (1, 128),
            ],
        ),
        (5, &[(43, 4), (21, 8), (10, 16), (5, 32), (2, 64), (1, 128)]),
        (4, &[(26, 8), (13, 16), (6, 32), (3, 64), (1, 128)]),
        (3, &[(16, 16), (8, 32), (4, 64), (2, 128)]),
        (2, &[(11, 32), (5, 64), (2, 128)]),
        (1, &[(8, 64), (4, 128)]),
        (0, &[(8, 128)]),
    ];
    let ok = got.len() == expected.len()
        && got.iter().zip(&expected).all(|(b, (s, rungs))| {
            b.s == *s
                && b.rungs
                    == rungs
                        .iter()
                        .map(|&(n, budget)| Rung { n, budget })
                        .collect::<Vec<_>>()
        });
    (
        ok,
        format!(
            "R=128 eta=2 schedule: {} brackets, equal to the hand table: {ok}",
            got.len()
        ),
    )
}

fn parallel_equivalence(
    raw1: &[(usize, f64)],
    raw4: &[(usize, f64)],
    prox1: &[(usize, f64)],
    prox4: &[(usize, f64)],
) -> (bool, String) {
    let same = |a: &[(usize, f64)], b: &[(usize, f64)]| {
        a.iter().zip(b).filter(|(x, y)| x.0 == y.0).count()
    };
    let (r, p) = (same(raw1, raw4), same(prox1, prox4));
    (
        r == raw1.len() && p == prox1.len(),
        format!(
            "same winner with 4 and 1 workers: raw {r}/{}, proxy {p}/{}",
            raw1.len(),
            prox1.len()
        ),
    )
}

/// Small end-to-end pipeline: data, one tracked run, estimates, a corpus,
/// a ranking report and two searches.
fn pipeline(dir: &Path, seed: u64) {
    let data_spec = DatasetSpec {
        n_train: 512,
        n_val: 128,
        ..Default::default()
    };
    let data = gen_dataset(&data_spec).unwrap();
    write_dataset(dir.join("data.fhds"), &data).unwrap();
    let data = read_dataset(dir.join("data.fhds")).unwrap();

    let model = ModelSpec::with_width(32);
    let train = TrainConfig {
        epochs: 12,
        seed,
        ..Default::default()
    };
    let h = train_with_history(
        &model,
        &data,
        &train,
        FeatureCapture::InPass,
        TrainOutputs {
            history: Some(&dir.join("run.fhst")),
            epoch_log: Some(&dir.join("run.csv")),
        },
    )
    .unwrap();
    let proxy = ProxyConfig::default();
    let rows: Vec<EstimateRow> = [3u32, 6, 9, 12]
        .iter()
        .map(|&e| {
            let start = Instant::now();
            let est = estimate(&h, e, &proxy, &mut Rng::new(seed).derive(e as u64)).unwrap();
            EstimateRow {
                trial_id: "run".into(),
                end_epoch: e,
                raw_acc: h.record(e).unwrap().raw_val_accuracy as f64,
                proxy_acc: est.accuracy,
                wall_ms_overhead: start.elapsed().as_secs_f64() * 1e3,
            }
        })
        .collect();
    write_csv(dir.join("estimates.csv"), &rows).unwrap();

    let settings = CorpusSettings {
        data: data_spec,
        model: model.clone(),
        train: TrainConfig {
            epochs: 12,
            ..Default::default()
        },
    };
    let corpus_dir = dir.join("corpus");
    build_corpus(
        &desk_space(),
        4,
        &[0],
        &settings,
        &corpus_dir,
        &mut Rng::new(seed),
    )
    .unwrap();
    let lc = LoadedCorpus::load(&corpus_dir).unwrap();
    ranking_eval(&lc, &proxy, &[3, 6], &[0])
        .unwrap()
        .write(dir.join("ranking.csv"))
        .unwrap();

    let hb = HyperBandConfig {
        max_budget: 8,
        eta: 2,
        metric: Metric::Proxy,
        workers: 2,
    };
    let tab = TabularExecutor { corpus: &lc, proxy };
    hyperband(&lc.corpus.entry_space(), &hb, &tab, &mut Rng::new(seed))
        .unwrap()
        .write_report(
            dir.join("search_tabular.csv"),
            Some(&lc.corpus.entry_truth_table()),
        )
        .unwrap();

    let ex = TrainingExecutor {
        data,
        model,
        train,
        max_budget: hb.max_budget,
        proxy,
        history_dir: Some(dir.join("trials")),
    };
    std::fs::create_dir_all(dir.join("trials")).unwrap();
    hyperband(&desk_space(), &hb, &ex, &mut Rng::new(seed))
        .unwrap()
        .write_report(dir.join("search_train.csv"), None)
        .unwrap();
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, PathBuf> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), p);
            }
        }
    }
    out
}

fn csv_without_timing(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    let keep: Vec<usize> = (0..headers.len())
        .filter(|&i| !TIMING_COLUMNS.contains(&&headers[i]))
        .collect();
    let mut rows = vec![keep.iter().map(|&i| headers[i].to_string()).collect()];
    for rec in r.records() {
        let rec = rec.unwrap();
        rows.push(keep.iter().map(|&i| rec[i].to_string()).collect());
    }
    rows
}

fn determinism() -> (bool, String) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), 11);
    pipeline(b.path(), 11);
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    let mut problems = Vec::new();
    if fa.keys().ne(fb.keys()) {
        problems.push("file sets differ".to_string());
    }
    let (mut fhst, mut csvs) = (0, 0);
    for (rel, pa) in &fa {
        let Some(pb) = fb.get(rel) else { continue };
        let same = if rel.extension().is_some_and(|e| e == "csv") {
            csvs += 1;
            csv_without_timing(pa) == csv_without_timing(pb)
        } else {
            fhst += rel.extension().is_some_and(|e| e == "fhst") as usize;
            std::fs::read(pa).unwrap() == std::fs::read(pb).unwrap()
        };
        if !same {
            problems.push(format!("{} differs", rel.display()));
        }
    }
    let scratch = tempfile::tempdir().unwrap();
    for (rel, pa) in fa
        .iter()
        .filter(|(r, _)| r.extension().is_some_and(|e| e == "fhst"))
    {
        let h = read_history(pa).unwrap();
        let copy = scratch.path().join("copy.fhst");
        write_history(&copy, &h).unwrap();
        if std::fs::read(&copy).unwrap() != std::fs::read(pa).unwrap()
            || read_history(&copy).unwrap() != h
        {
            problems.push(format!("{} round trip differs", rel.display()));
        }
    }
    (
        problems.is_empty(),
        if problems.is_empty() {
            format!("two pipeline runs identical: {fhst} FHST files, {csvs} CSV reports; FHST round trips bit-exact")
        } else {
            format!("determinism broken: {}", problems.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let mut verdicts = Vec::new();
    verdicts.push(run(1, kendall_oracle));

    let corpus_dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    build_corpus(
        &desk_space(),
        CORPUS_CONFIGS,
        &CORPUS_SEEDS,
        &CorpusSettings::default(),
        corpus_dir.path(),
        &mut Rng::new(CORPUS_RNG),
    )
    .unwrap();
    let corpus = LoadedCorpus::load(corpus_dir.path()).unwrap();
    let report = ranking_eval(&corpus, &ProxyConfig::default(), &[15, 30], &EVAL_SEEDS).unwrap();
    println!(
        "     corpus of {} configs x {} seeds built and ranked in {:.1} s",
        corpus.corpus.entries.len(),
        CORPUS_SEEDS.len(),
        start.elapsed().as_secs_f64()
    );

    verdicts.push(run(2, || degeneracy(&corpus)));
    verdicts.push(run(3, gradients));
    verdicts.push(run(4, || estimation_quality(&report)));
    verdicts.push(run(5, || ranking(&report)));
    verdicts.push(run(6, overhead));
    verdicts.push(run(7, || oscillation(&corpus)));

    let start = Instant::now();
    let raw4 = search_runs(&corpus, Metric::Raw, 4);
    let prox4 = search_runs(&corpus, Metric::Proxy, 4);
    let raw1 = search_runs(&corpus, Metric::Raw, 1);
    let prox1 = search_runs(&corpus, Metric::Proxy, 1);
    println!(
        "     20 tabular searches in {:.1} s",
        start.elapsed().as_secs_f64()
    );
    verdicts.push(run(8, || search_improvement(&raw4, &prox4)));
    verdicts.push(run(9, schedule_structure));
    verdicts.push(run(10, determinism));
    verdicts.push(run(11, || {
        parallel_equivalence(&raw1, &raw4, &prox1, &prox4)
    }));

    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.ok).map(|v| v.id).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        verdicts.len() - failed.len(),
        verdicts.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}

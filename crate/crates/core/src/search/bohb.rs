//! BOHB: HyperBand whose new trials come, with probability `1 - rho`, from a
//! density-ratio model fit on earlier results.
//!
//! The model uses the largest budget with at least `min_points` results. The
//! top `gamma` fraction by metric forms the "good" set, the rest the "bad"
//! set. Each set gets a product kernel density: a Gaussian on the unit-scaled
//! axis for numeric parameters, with Scott's-rule bandwidth
//! `sd * n^(-1/(dim+4))` floored at `1e-3`, and for categorical parameters a
//! kernel that keeps the value with probability `1 - b` and spreads `b`
//! evenly over the other choices, with `b = n^(-1/(dim+4)) / 2`. Of
//! `candidates` draws from the good density, the one with the highest
//! good/bad ratio is proposed.

use serde::{Deserialize, Serialize};

use super::hyperband::{run_hyperband, HyperBandConfig};
use super::space::{Config, ParamKind, ParamSpec, ParamValue};
use super::{draw_trial, Coordinator, Executor, SearchOutcome};
use crate::error::{Error, Result};
use crate::numkit::Rng;

const COIN_TAG: u64 = 0xB0B0_C014_0000_0000;
const MODEL_TAG: u64 = 0xB0B0_3D31_0000_0000;
const MIN_BANDWIDTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BohbConfig {
    pub hyperband: HyperBandConfig,
    /// Probability of a uniform draw even when the model is available.
    pub random_fraction: f64,
    /// Results needed at one budget before the model is used; `None` means
    /// `dim + 2`.
    pub min_points: Option<usize>,
    pub gamma: f64,
    pub candidates: usize,
}

impl Default for BohbConfig {
    fn default() -> Self {
        BohbConfig {
            hyperband: HyperBandConfig::default(),
            random_fraction: 1.0 / 3.0,
            min_points: None,
            gamma: 0.15,
            candidates: 24,
        }
    }
}

impl BohbConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyperband.validate()?;
        if !(0.0..=1.0).contains(&self.random_fraction) {
            return Err(Error::invalid("random fraction outside [0, 1]"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid("gamma outside (0, 1)"));
        }
        if self.candidates == 0 {
            return Err(Error::invalid("need at least one candidate"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Kde {
    points: Vec<Vec<f64>>,
    bandwidth: Vec<f64>,
}

/// Good/bad density pair over a space.
#[derive(Debug, Clone)]
pub struct DensityRatioSampler {
    space: Vec<ParamSpec>,
    good: Kde,
    bad: Kde,
}

fn choices_len(p: &ParamSpec) -> Option<usize> {
    match &p.kind {
        ParamKind::Categorical { choices } => Some(choices.len()),
        _ => None,
    }
}

fn encode(space: &[ParamSpec], config: &Config) -> Result<Vec<f64>> {
    space
        .iter()
        .map(|p| {
            let v = config
                .get(&p.name)
                .ok_or_else(|| Error::invalid(format!("config lacks {}", p.name)))?;
            let bad = || Error::invalid(format!("value {v:?} does not fit {}", p.name));
            Ok(match &p.kind {
                ParamKind::Categorical { choices } => {
                    choices.iter().position(|c| c == v).ok_or_else(bad)? as f64
                }
                ParamKind::Integer { lo, hi } => {
                    let x = v.as_i64().ok_or_else(bad)?;
                    ((x - lo) as f64 + 0.5) / (hi - lo + 1) as f64
                }
                ParamKind::Continuous { lo, hi, log } => {
                    let x = v.as_f64().ok_or_else(bad)?;
                    if *log {
                        (x.ln() - lo.ln()) / (hi.ln() - lo.ln())
                    } else {
                        (x - lo) / (hi - lo)
                    }
                }
            })
        })
        .collect()
}

fn decode(space: &[ParamSpec], u: &[f64]) -> Config {
    space
        .iter()
        .zip(u)
        .map(|(p, &x)| {
            let v = match &p.kind {
                ParamKind::Categorical { choices } => choices[x as usize].clone(),
                ParamKind::Integer { lo, hi } => {
                    let span = (hi - lo + 1) as f64;
                    ParamValue::Int((lo + (x.clamp(0.0, 1.0) * span).floor() as i64).min(*hi))
                }
                ParamKind::Continuous { lo, hi, log } => {
                    let x = x.clamp(0.0, 1.0);
                    ParamValue::Float(if *log {
                        (lo.ln() + x * (hi.ln() - lo.ln())).exp()
                    } else {
                        lo + x * (hi - lo)
                    })
                }
            };
            (p.name.clone(), v)
        })
        .collect()
}

impl Kde {
    fn fit(space: &[ParamSpec], points: Vec<Vec<f64>>) -> Kde {
        let n = points.len() as f64;
        let factor = n.powf(-1.0 / (space.len() as f64 + 4.0));
        let bandwidth = space
            .iter()
            .enumerate()
            .map(|(j, p)| match choices_len(p) {
                Some(m) => (factor / 2.0).clamp(MIN_BANDWIDTH, (m as f64 - 1.0) / m as f64),
                None => {
                    let mean = points.iter().map(|x| x[j]).sum::<f64>() / n;
                    let var = points.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
                    (var.sqrt() * factor).max(MIN_BANDWIDTH)
                }
            })
            .collect();
        Kde { points, bandwidth }
    }

    fn density(&self, space: &[ParamSpec], x: &[f64]) -> f64 {
        let mut total = 0.0;
        for p in &self.points {
            let mut k = 1.0;
            for (j, spec) in space.iter().enumerate() {
                let b = self.bandwidth[j];
                k *= match choices_len(spec) {
                    Some(m) => {
                        if p[j] == x[j] {
                            1.0 - b
                        } else {
                            b / (m as f64 - 1.0)
                        }
                    }
                    None => {
                        let z = (x[j] - p[j]) / b;
                        (-0.5 * z * z).exp() / b
                    }
                };
            }
            total += k;
        }
        total / self.points.len() as f64
    }

    fn sample(&self, space: &[ParamSpec], rng: &mut Rng) -> Vec<f64> {
        let centre = &self.points[rng.below(self.points.len() as u64) as usize];
        space
            .iter()
            .enumerate()
            .map(|(j, spec)| {
                let b = self.bandwidth[j];
                match choices_len(spec) {
                    Some(m) => {
                        if m > 1 && rng.next_f64() < b {
                            let other = rng.below(m as u64 - 1) as f64;
                            if other >= centre[j] {
                                other + 1.0
                            } else {
                                other
                            }
                        } else {
                            centre[j]
                        }
                    }
                    None => {
                        for _ in 0..16 {
                            let v = centre[j] + b * rng.normal();
                            if (0.0..=1.0).contains(&v) {
                                return v;
                            }
                        }
                        centre[j].clamp(0.0, 1.0)
                    }
                }
            })
            .collect()
    }
}

impl DensityRatioSampler {
    /// Fits on `(config, metric)` pairs; higher metric is better. Needs at
    /// least two observations.
    pub fn fit(space: &[ParamSpec], observations: &[(Config, f64)], gamma: f64) -> Result<Self> {
        if observations.len() < 2 {
            return Err(Error::invalid(
                "density model needs at least two observations",
            ));
        }
        let mut ranked: Vec<(f64, usize)> = observations
            .iter()
            .enumerate()
            .map(|(i, o)| (o.1, i))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let n = ranked.len();
        let n_good = ((gamma * n as f64).ceil() as usize).clamp(1, n - 1);
        let enc = |idx: &[(f64, usize)]| -> Result<Vec<Vec<f64>>> {
            idx.iter()
                .map(|&(_, i)| encode(space, &observations[i].0))
                .collect()
        };
        Ok(DensityRatioSampler {
            space: space.to_vec(),
            good: Kde::fit(space, enc(&ranked[..n_good])?),
            bad: Kde::fit(space, enc(&ranked[n_good..])?),
        })
    }

    /// Best of `candidates` draws from the good density by good/bad ratio.
    pub fn propose(&self, rng: &mut Rng, candidates: usize) -> Config {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..candidates.max(1) {
            let x = self.good.sample(&self.space, rng);
            let ratio =
                self.good.density(&self.space, &x) / self.bad.density(&self.space, &x).max(1e-300);
            if best.as_ref().is_none_or(|(r, _)| ratio > *r) {
                best = Some((ratio, x));
            }
        }
        decode(&self.space, &best.expect("at least one candidate").1)
    }
}

/// Results at the largest budget that has at least `min_points` of them.
fn model_data(co: &Coordinator<'_>, min_points: usize) -> Option<Vec<(Config, f64)>> {
    let mut by_budget: std::collections::BTreeMap<usize, Vec<(Config, f64)>> = Default::default();
    for row in co.rows.iter().filter(|r| r.status == "ok") {
        let t = &co.trials()[row.id];
        let score = match co.metric {
            super::Metric::Raw => row.raw_acc,
            super::Metric::Proxy => row.proxy_acc,
        };
        if let Some(s) = score {
            by_budget
                .entry(row.budget)
                .or_default()
                .push((t.config.clone(), s));
        }
    }
    by_budget
        .into_iter()
        .rev()
        .find(|(_, obs)| obs.len() >= min_points.max(2))
        .map(|(_, obs)| obs)
}

pub fn bohb(
    space: &[ParamSpec],
    cfg: &BohbConfig,
    executor: &dyn Executor,
    rng: &mut Rng,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let min_points = cfg.min_points.unwrap_or(space.len() + 2);
    let mut sampler = |co: &Coordinator<'_>, rng: &mut Rng| -> Result<(Config, u64)> {
        let id = co.trials().len() as u64;
        let coin = rng.derive(COIN_TAG ^ id).next_f64();
        let (config, seed) = draw_trial(space, rng)?;
        if coin < cfg.random_fraction {
            return Ok((config, seed));
        }
        match model_data(co, min_points) {
            Some(obs) => {
                let model = DensityRatioSampler::fit(space, &obs, cfg.gamma)?;
                Ok((
                    model.propose(&mut rng.derive(MODEL_TAG ^ id), cfg.candidates),
                    seed,
                ))
            }
            None => Ok((config, seed)),
        }
    };
    run_hyperband(&cfg.hyperband, executor, rng, &mut sampler)
}

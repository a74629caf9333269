use serde::{Deserialize, Serialize};

use super::executor::{Executor, Metric};
use super::space::{Config, ParamSpec};
use super::{draw_trial, Coordinator, SearchOutcome};
use crate::error::{Error, Result};
use crate::numkit::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperBandConfig {
    /// Largest budget `R`, in epochs.
    pub max_budget: usize,
    pub eta: usize,
    pub metric: Metric,
    pub workers: usize,
}

impl Default for HyperBandConfig {
    fn default() -> Self {
        HyperBandConfig {
            max_budget: 60,
            eta: 2,
            metric: Metric::Proxy,
            workers: 4,
        }
    }
}

impl HyperBandConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 2 {
            return Err(Error::invalid("eta must be at least 2"));
        }
        if self.max_budget < self.eta {
            return Err(Error::invalid(format!(
                "max budget {} is below eta {}",
                self.max_budget, self.eta
            )));
        }
        if self.workers == 0 {
            return Err(Error::invalid("need at least one worker"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rung {
    pub n: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: usize,
    pub rungs: Vec<Rung>,
}

impl Bracket {
    /// Epochs trained when every rung is full and promoted trials resume.
    pub fn epochs(&self) -> usize {
        let mut prev = 0;
        let mut total = 0;
        for r in &self.rungs {
            total += r.n * (r.budget - prev);
            prev = r.budget;
        }
        total
    }
}

/// `floor(log_eta(r))`, in exact integer arithmetic.
pub fn s_max(r: usize, eta: usize) -> usize {
    let mut s = 0;
    let mut p = eta;
    while p <= r {
        s += 1;
        p = match p.checked_mul(eta) {
            Some(v) => v,
            None => break,
        };
    }
    s
}

/// Brackets `s = s_max ..= 0`. Bracket `s` starts
/// `ceil((s_max + 1) eta^s / (s + 1))` trials at `R eta^-s` epochs (rounded,
/// at least 1); each rung keeps `floor(n / eta)` and multiplies the budget by
/// `eta`.
pub fn hyperband_schedule(cfg: &HyperBandConfig) -> Result<Vec<Bracket>> {
    cfg.validate()?;
    let (r, eta) = (cfg.max_budget, cfg.eta);
    let sm = s_max(r, eta);
    Ok((0..=sm)
        .rev()
        .map(|s| {
            let es = eta.pow(s as u32);
            let n = ((sm + 1) * es).div_ceil(s + 1);
            let rungs = (0..=s)
                .map(|i| {
                    let div = eta.pow((s - i) as u32);
                    Rung {
                        n: n / eta.pow(i as u32),
                        budget: ((2 * r + div) / (2 * div)).max(1),
                    }
                })
                .collect();
            Bracket { s, rungs }
        })
        .collect())
}

pub(crate) type Sampler<'a> = dyn FnMut(&Coordinator<'_>, &mut Rng) -> Result<(Config, u64)> + 'a;

pub(crate) fn run_hyperband(
    cfg: &HyperBandConfig,
    executor: &dyn Executor,
    rng: &mut Rng,
    sampler: &mut Sampler<'_>,
) -> Result<SearchOutcome> {
    let schedule = hyperband_schedule(cfg)?;
    let mut co = Coordinator::new(executor, cfg.metric, cfg.workers)?;
    let mut finalists = Vec::new();
    for bracket in &schedule {
        let mut ids = Vec::with_capacity(bracket.rungs[0].n);
        for _ in 0..bracket.rungs[0].n {
            let (c, seed) = sampler(&co, rng)?;
            ids.push(co.add_trial(c, seed));
        }
        for (i, rung) in bracket.rungs.iter().enumerate() {
            co.run_rung(&ids, rung.budget, Some(bracket.s), Some(i));
            let ranked = co.ranked(&ids);
            match bracket.rungs.get(i + 1) {
                Some(next) => {
                    let keep: Vec<usize> = ranked.iter().copied().take(next.n).collect();
                    let dropped: Vec<usize> = ids
                        .iter()
                        .copied()
                        .filter(|id| !keep.contains(id))
                        .collect();
                    co.retire(&dropped);
                    let mut keep = keep;
                    keep.sort_unstable();
                    ids = keep;
                }
                None => finalists.extend(ranked),
            }
            if ids.is_empty() {
                break;
            }
        }
        log::info!(
            "bracket {} done, {} trials so far",
            bracket.s,
            co.trials().len()
        );
    }
    co.finish(&finalists)
}

/// HyperBand with uniform sampling.
pub fn hyperband(
    space: &[ParamSpec],
    cfg: &HyperBandConfig,
    executor: &dyn Executor,
    rng: &mut Rng,
) -> Result<SearchOutcome> {
    run_hyperband(cfg, executor, rng, &mut |_, rng| draw_trial(space, rng))
}

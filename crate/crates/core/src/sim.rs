//! Seeded Monte Carlo simulation of the embedded jump chain under a fixed
//! policy.
//!
//! Trajectory `t` of a run draws from a ChaCha8 stream selected by `t` under
//! the run's master seed, so estimates do not depend on thread count or
//! scheduling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ActionId, CbpModel};
use crate::solver::Policy;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SimCaps {
    pub max_jumps: u64,
    pub max_pop: u64,
    /// Also sample exponential holding times.
    pub track_time: bool,
}

impl Default for SimCaps {
    fn default() -> Self {
        SimCaps {
            max_jumps: 1_000_000,
            max_pop: 1_000_000,
            track_time: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SimResult {
    Extinct,
    CensoredPopulation,
    CensoredJumps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimOutcome {
    pub result: SimResult,
    pub jumps: u64,
    pub peak_population: u64,
    /// Total holding time, when tracked.
    pub time: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpEstimate {
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: u64,
    pub extinct: u64,
    pub censored: u64,
}

impl EpEstimate {
    /// Binomial standard error `sqrt(p (1 - p) / n)`.
    pub fn std_error(&self) -> f64 {
        (self.p_hat * (1.0 - self.p_hat) / self.n as f64).sqrt()
    }
}

/// Cumulative jump distribution `(population change, cdf)` of one action.
#[derive(Debug, Clone)]
struct JumpTable {
    steps: Vec<(i64, f64)>,
    exit_rate: f64,
}

impl JumpTable {
    fn new(model: &CbpModel, action: &ActionId) -> Self {
        let mech = model.mechanism(action);
        let exit = mech.exit_rate();
        let mut cdf = 0.0;
        let mut steps: Vec<(i64, f64)> = mech
            .support()
            .map(|(k, b)| {
                cdf += b / exit;
                (k as i64 - 1, cdf)
            })
            .collect();
        if let Some(last) = steps.last_mut() {
            last.1 = 1.0;
        }
        JumpTable {
            steps,
            exit_rate: exit,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> i64 {
        let u: f64 = rng.gen();
        self.steps
            .iter()
            .find(|(_, c)| u < *c)
            .unwrap_or_else(|| self.steps.last().unwrap())
            .0
    }
}

/// Per-policy sampling tables: one per head state, one for the tail.
struct PolicySampler {
    head: Vec<JumpTable>,
    tail: JumpTable,
}

impl PolicySampler {
    fn new(model: &CbpModel, f: &Policy) -> Result<Self> {
        f.check(model)?;
        Ok(PolicySampler {
            head: f.head().iter().map(|a| JumpTable::new(model, a)).collect(),
            tail: JumpTable::new(model, f.tail()),
        })
    }

    fn table(&self, i: u64) -> &JumpTable {
        self.head.get(i as usize - 1).unwrap_or(&self.tail)
    }

    fn run<R: Rng>(&self, i0: u64, caps: SimCaps, rng: &mut R) -> SimOutcome {
        let mut state = i0;
        let mut jumps = 0;
        let mut peak = i0;
        let mut time = caps.track_time.then_some(0.0);
        let result = loop {
            if state == 0 {
                break SimResult::Extinct;
            }
            if state > caps.max_pop {
                break SimResult::CensoredPopulation;
            }
            if jumps >= caps.max_jumps {
                break SimResult::CensoredJumps;
            }
            let table = self.table(state);
            if let Some(t) = time.as_mut() {
                let u: f64 = rng.gen();
                *t += -(1.0 - u).ln() / (state as f64 * table.exit_rate);
            }
            state = state.saturating_add_signed(table.sample(rng));
            jumps += 1;
            peak = peak.max(state);
        };
        SimOutcome {
            result,
            jumps,
            peak_population: peak,
            time,
        }
    }
}

fn trajectory_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// One trajectory from `i0` until extinction or a cap trips.
pub fn simulate_trajectory(
    model: &CbpModel,
    f: &Policy,
    i0: u64,
    caps: SimCaps,
    seed: u64,
) -> Result<SimOutcome> {
    if i0 < 1 {
        return Err(Error::InvalidArgument(
            "start state must be at least 1".into(),
        ));
    }
    let sampler = PolicySampler::new(model, f)?;
    Ok(sampler.run(i0, caps, &mut trajectory_rng(seed, 0)))
}

/// Runs `n` trajectories, trajectory `t` seeded by `(master_seed, t)`.
pub fn simulate_many(
    model: &CbpModel,
    f: &Policy,
    i0: u64,
    n: u64,
    caps: SimCaps,
    master_seed: u64,
) -> Result<Vec<SimOutcome>> {
    if i0 < 1 {
        return Err(Error::InvalidArgument(
            "start state must be at least 1".into(),
        ));
    }
    let sampler = PolicySampler::new(model, f)?;
    Ok((0..n)
        .into_par_iter()
        .map(|t| sampler.run(i0, caps, &mut trajectory_rng(master_seed, t)))
        .collect())
}

/// Aggregates outcomes; censored trajectories count as non-extinct.
pub fn aggregate(outcomes: &[SimOutcome]) -> Result<EpEstimate> {
    let n = outcomes.len() as u64;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "at least one trajectory is required".into(),
        ));
    }
    let extinct = outcomes
        .iter()
        .filter(|o| o.result == SimResult::Extinct)
        .count() as u64;
    let (ci_low, ci_high) = wilson_interval(extinct, n);
    Ok(EpEstimate {
        p_hat: extinct as f64 / n as f64,
        ci_low,
        ci_high,
        n,
        extinct,
        censored: n - extinct,
    })
}

pub fn estimate_ep(
    model: &CbpModel,
    f: &Policy,
    i0: u64,
    n: u64,
    caps: SimCaps,
    master_seed: u64,
) -> Result<EpEstimate> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "at least one trajectory is required".into(),
        ));
    }
    aggregate(&simulate_many(model, f, i0, n, caps, master_seed)?)
}

/// 95% Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: u64, n: u64) -> (f64, f64) {
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z95 / denom * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    let low = (center - half).clamp(0.0, 1.0).min(p);
    let high = (center + half).clamp(0.0, 1.0).max(p);
    (low, high)
}

/// Counts of each outcome kind, for reports.
pub fn outcome_counts(outcomes: &[SimOutcome]) -> BTreeMap<&'static str, u64> {
    let mut counts = BTreeMap::new();
    for o in outcomes {
        let key = match o.result {
            SimResult::Extinct => "extinct",
            SimResult::CensoredPopulation => "censored_population",
            SimResult::CensoredJumps => "censored_jumps",
        };
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

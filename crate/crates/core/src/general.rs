//! Minimal hitting probabilities of a finite controlled Markov system by
//! monotone value iteration from zero.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ActionId, CbpModel, GeneralModel, RateRow};
use crate::solver::Policy;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 10_000_000;
pub const CEMETERY: &str = "cemetery";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HittingSolution {
    /// `h_i` per state index, 1 on the target, 0 at the cemetery.
    pub h: Vec<f64>,
    /// Minimizing action per state, `None` for absorbing states.
    pub policy: Vec<Option<ActionId>>,
    pub iterations: usize,
    /// Sup-norm change of the last sweep.
    pub delta: f64,
}

fn rhs(model: &GeneralModel, i: usize, row: &RateRow, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (j, rate) in &row.entries {
        if model.is_target(*j) {
            acc += rate;
        } else {
            acc += rate * x[*j];
        }
    }
    debug_assert!(row.entries.iter().all(|(j, _)| *j != i));
    acc / row.exit_rate
}

/// Minimum of the optimality right-hand side at `i`, with its smallest-id
/// minimizer. Rows are stored sorted by id.
fn best_action<'m>(model: &'m GeneralModel, i: usize, x: &[f64]) -> (f64, &'m ActionId) {
    let mut best: Option<(f64, &ActionId)> = None;
    for row in model.rows(i) {
        let v = rhs(model, i, row, x);
        if best.is_none_or(|(b, _)| v < b) {
            best = Some((v, &row.action));
        }
    }
    best.expect("non-absorbing states have actions")
}

/// Initial iterate: 1 on the target, 0 elsewhere.
pub fn initial_values(model: &GeneralModel) -> Vec<f64> {
    (0..model.len())
        .map(|i| if model.is_target(i) { 1.0 } else { 0.0 })
        .collect()
}

/// One Jacobi sweep of the optimality operator against the frozen iterate.
pub fn bellman_sweep(model: &GeneralModel, x: &[f64]) -> Vec<f64> {
    (0..model.len())
        .map(|i| {
            if model.is_absorbing(i) {
                x[i]
            } else {
                best_action(model, i, x).0.clamp(0.0, 1.0)
            }
        })
        .collect()
}

pub fn value_iterate(model: &GeneralModel, tol: f64, max_iter: usize) -> Result<HittingSolution> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "tolerance {tol} must be positive"
        )));
    }
    let mut x = initial_values(model);
    let mut iterations = 0;
    loop {
        if iterations >= max_iter {
            return Err(Error::NoConvergence {
                what: "value iteration".into(),
                iterations,
            });
        }
        let next = bellman_sweep(model, &x);
        iterations += 1;
        let delta = next
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        x = next;
        if delta < tol {
            let policy = extract_policy(model, &x);
            return Ok(HittingSolution {
                h: x,
                policy,
                iterations,
                delta,
            });
        }
    }
}

/// Per-state argmin of the optimality right-hand side at `h`.
pub fn extract_policy(model: &GeneralModel, h: &[f64]) -> Vec<Option<ActionId>> {
    (0..model.len())
        .map(|i| {
            if model.is_absorbing(i) {
                None
            } else {
                Some(best_action(model, i, h).1.clone())
            }
        })
        .collect()
}

/// Which actions a truncation keeps.
#[derive(Debug, Clone, Copy)]
pub enum Truncation<'p> {
    /// Every admissible action.
    Full,
    /// Only the policy's action at each state.
    Policy(&'p Policy),
}

/// States `0..=n` plus a cemetery; jumps beyond `n` go to the cemetery, so
/// truncated values are lower bounds that increase with `n`.
pub fn cbp_truncate(model: &CbpModel, which: Truncation<'_>, n: usize) -> Result<GeneralModel> {
    if n <= model.m() + model.max_offspring() {
        return Err(Error::InvalidArgument(format!(
            "truncation level {n} must exceed m + max offspring = {}",
            model.m() + model.max_offspring()
        )));
    }
    if let Truncation::Policy(p) = which {
        p.check(model)?;
    }
    let cemetery = n + 1;
    let mut states: Vec<String> = (0..=n).map(|i| i.to_string()).collect();
    states.push(CEMETERY.to_string());
    let mut target = vec![false; n + 2];
    target[0] = true;
    let mut rows = vec![Vec::new(); n + 2];
    for i in 1..=n {
        let actions: Vec<ActionId> = match which {
            Truncation::Full => {
                let mut a = model.actions_at(i).to_vec();
                a.sort();
                a
            }
            Truncation::Policy(p) => vec![p.action_at(i).clone()],
        };
        for action in actions {
            let mech = model.mechanism(&action);
            let mut entries: Vec<(usize, f64)> = Vec::new();
            let mut overflow = 0.0;
            for (k, b) in mech.support() {
                let j = i + k - 1;
                let rate = i as f64 * b;
                if j > n {
                    overflow += rate;
                } else {
                    entries.push((j, rate));
                }
            }
            if overflow > 0.0 {
                entries.push((cemetery, overflow));
            }
            let exit_rate = entries.iter().map(|(_, r)| r).sum();
            rows[i].push(RateRow {
                action,
                entries,
                exit_rate,
            });
        }
    }
    Ok(GeneralModel::from_parts(
        states,
        target,
        Some(cemetery),
        rows,
    ))
}

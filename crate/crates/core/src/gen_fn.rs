//! Generating function `B(a; v) = sum_k b_k(a) v^k` and its smallest
//! nonnegative root.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ActionId, BranchingMechanism, CbpModel};

pub const DEFAULT_TOL: f64 = 1e-13;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;
/// Absolute tolerance under which two roots count as tied.
pub const TIE_TOL: f64 = 1e-9;
/// Drift below this multiple of `|b_1|` is classified as critical.
pub const CRITICAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Criticality {
    Subcritical,
    Critical,
    Supercritical,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhoResult {
    pub rho: f64,
    pub iterations: usize,
    /// `|B(a; rho)|`.
    pub residual: f64,
    pub criticality: Criticality,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhoStarResult {
    pub rho_star: f64,
    pub a_star: ActionId,
    pub tied: Vec<ActionId>,
    pub per_action: Vec<(ActionId, RhoResult)>,
}

/// `B(a; v)` by Horner's rule over the dense rates.
pub fn eval_b(mech: &BranchingMechanism, v: f64) -> f64 {
    mech.rates().iter().rev().fold(0.0, |acc, b| acc * v + b)
}

/// Derivative `B'(a; v)`.
pub fn eval_b_prime(mech: &BranchingMechanism, v: f64) -> f64 {
    mech.rates()
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, b)| acc * v + k as f64 * b)
}

/// Offspring generating function of the embedded jump chain,
/// `g(v) = sum_{k != 1} (b_k / |b_1|) v^k`. Its fixed points are the roots
/// of `B(a; v) = 0`.
pub fn offspring_pgf(mech: &BranchingMechanism, v: f64) -> f64 {
    let exit = mech.exit_rate();
    let mut acc = 0.0;
    for (k, b) in mech.rates().iter().enumerate().rev() {
        acc *= v;
        if k != 1 {
            acc += b / exit;
        }
    }
    acc
}

pub fn criticality(mech: &BranchingMechanism) -> Criticality {
    let drift = mech.drift();
    if drift.abs() <= CRITICAL_TOL * mech.exit_rate() {
        Criticality::Critical
    } else if drift > 0.0 {
        Criticality::Supercritical
    } else {
        Criticality::Subcritical
    }
}

/// Smallest nonnegative root of `B(a; v) = 0`.
///
/// Non-supercritical mechanisms have root exactly 1. Otherwise the
/// offspring generating function is iterated from `v_0 = 0`; the iterates
/// increase to the minimal fixed point. Once the step falls below `tol` (or
/// `max_iter` sweeps are spent, as happens close to criticality) the estimate
/// is polished with Newton steps taken from below, which stay below the
/// minimal root because `g(v) - v` is convex and decreasing there. The result
/// must satisfy `|B(a; rho)| <= 10 * tol * |b_1|`.
// Negated comparisons reject NaN as well.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn rho(mech: &BranchingMechanism, tol: f64, max_iter: usize) -> Result<RhoResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance {tol} must be positive"
        )));
    }
    let class = criticality(mech);
    if class != Criticality::Supercritical {
        return Ok(RhoResult {
            rho: 1.0,
            iterations: 0,
            residual: eval_b(mech, 1.0).abs(),
            criticality: class,
        });
    }

    let mut v = 0.0;
    let mut iterations = 0;
    while iterations < max_iter {
        let next = offspring_pgf(mech, v);
        iterations += 1;
        let step = next - v;
        if next > v {
            v = next;
        }
        if step < tol {
            break;
        }
    }

    let exit = mech.exit_rate();
    for _ in 0..200 {
        iterations += 1;
        let phi = offspring_pgf(mech, v) - v;
        let slope = eval_b_prime(mech, v) / exit;
        if !(phi > 0.0) || !(slope < 0.0) {
            break;
        }
        let next = v - phi / slope;
        if !(next > v) || offspring_pgf(mech, next) - next < 0.0 {
            break;
        }
        v = next;
    }

    let rho = v.clamp(0.0, 1.0);
    let residual = eval_b(mech, rho).abs();
    if residual > 10.0 * tol * exit {
        return Err(Error::NoConvergence {
            what: "generating-function root".into(),
            iterations,
        });
    }
    Ok(RhoResult {
        rho,
        iterations,
        residual,
        criticality: class,
    })
}

/// `rho_* = min_{a in tail} rho(a)` and the selected `a_*`, the smallest id
/// among actions within [`TIE_TOL`] of the minimum.
pub fn rho_star(model: &CbpModel, tol: f64) -> Result<RhoStarResult> {
    let mut per_action = Vec::new();
    for id in model.tail_actions() {
        let r = rho(model.mechanism(id), tol, DEFAULT_MAX_ITER).map_err(|e| match e {
            Error::NoConvergence { what, iterations } => Error::NoConvergence {
                what: format!("{what} of action `{id}`"),
                iterations,
            },
            other => other,
        })?;
        per_action.push((id.clone(), r));
    }
    let rho_star = per_action
        .iter()
        .map(|(_, r)| r.rho)
        .fold(f64::INFINITY, f64::min);
    let mut tied: Vec<ActionId> = per_action
        .iter()
        .filter(|(_, r)| r.rho - rho_star <= TIE_TOL)
        .map(|(id, _)| id.clone())
        .collect();
    tied.sort();
    Ok(RhoStarResult {
        rho_star,
        a_star: tied[0].clone(),
        tied,
        per_action,
    })
}

//! Exact minimal extinction probabilities by improved policy iteration.
//!
//! Only policies that play the selected root-minimizing tail action `a_*` at
//! every state above `m` are considered; within that finite class a policy
//! is evaluated by an `m`-dimensional (or smaller) linear system whose tail
//! is closed with the geometric weight `L(i,a)`.
//!
//! Two regimes are distinguished by `m_*`, the smallest head state offering a
//! death-free action (`b_0 = 0`):
//!
//! * `m_* = m + 1`: every head action can die, the extinction profile has a
//!   geometric tail `ep_i = rho_*^{i-m} ep_m` and the `m`-dimensional
//!   optimality equation applies.
//! * `m_* <= m`: parking the population at `m_*` with a death-free action
//!   makes `ep_i = 0` for all `i >= m_*`; only states below `m_*` remain.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::embedded::{embedded_prob, tail_weight_l};
use crate::error::{Error, Result};
use crate::gen_fn::{self, RhoStarResult};
use crate::linsys::{solve_unit, UnitSystem};
use crate::model::{ActionId, CbpModel};

/// An action enters an improvement set only if it beats the current value by
/// more than this relative margin.
pub const IMPROVE_TOL: f64 = 1e-12;
pub const DEFAULT_BRUTE_CAP: u128 = 100_000;

/// Deterministic stationary policy: explicit choices on `1..=m`, one action
/// for every state above `m`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Policy {
    head: Vec<ActionId>,
    tail: ActionId,
}

impl Policy {
    pub fn new(head: Vec<ActionId>, tail: ActionId) -> Self {
        Policy { head, tail }
    }

    /// `f(i)` for `i >= 1`.
    pub fn action_at(&self, i: usize) -> &ActionId {
        assert!(i >= 1);
        self.head.get(i - 1).unwrap_or(&self.tail)
    }

    pub fn head(&self) -> &[ActionId] {
        &self.head
    }

    pub fn tail(&self) -> &ActionId {
        &self.tail
    }

    /// Head choices must be admissible and the tail action must belong to
    /// the shared tail set.
    pub fn check(&self, model: &CbpModel) -> Result<()> {
        if self.head.len() != model.m() {
            return Err(Error::PolicyShape {
                expected: model.m(),
                got: self.head.len(),
            });
        }
        for (idx, a) in self.head.iter().enumerate() {
            if !model.is_admissible(idx + 1, a) {
                return Err(Error::InadmissibleAction {
                    state: (idx + 1).to_string(),
                    action: a.clone(),
                });
            }
        }
        if !model.tail_actions().contains(&self.tail) {
            return Err(Error::InadmissibleAction {
                state: format!(">{}", model.m()),
                action: self.tail.clone(),
            });
        }
        Ok(())
    }

    /// Parses head assignments written as `1:a2,2:a1`. Unlisted head states
    /// take their smallest admissible id.
    pub fn parse_assignments(model: &CbpModel, text: &str, tail: ActionId) -> Result<Policy> {
        let mut head: Vec<ActionId> = (1..=model.m())
            .map(|i| smallest(model.actions_at(i)).clone())
            .collect();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (state, action) = part.split_once(':').ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "policy entry `{part}` is not of the form state:action"
                ))
            })?;
            let i: usize = state.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("policy state `{state}` is not a positive integer"))
            })?;
            let action = ActionId::new(action.trim());
            if i < 1 || i > model.m() {
                return Err(Error::StateOutOfRange(i));
            }
            if !model.is_admissible(i, &action) {
                return Err(Error::InadmissibleAction {
                    state: i.to_string(),
                    action,
                });
            }
            head[i - 1] = action;
        }
        let policy = Policy { head, tail };
        policy.check(model)?;
        Ok(policy)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (idx, a) in self.head.iter().enumerate() {
            if idx > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}:{}", idx + 1, a)?;
        }
        write!(f, ";tail:{}", self.tail)
    }
}

fn smallest(ids: &[ActionId]) -> &ActionId {
    ids.iter()
        .min()
        .expect("validated action sets are nonempty")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TailKind {
    /// `ep_i = rho_*^{i-m} ep_m` for `i > m`.
    Geometric { rho_star: f64 },
    /// `ep_i = 0` for all `i >= from`.
    Zero { from: usize },
}

/// Extinction probabilities `ep_i`, `i >= 1`: explicit on `1..=m`, closed
/// form above.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtinctionProfile {
    head: Vec<f64>,
    tail: TailKind,
    /// Residual of the linear system the head values came from.
    system_residual: f64,
}

impl ExtinctionProfile {
    pub fn new(head: Vec<f64>, tail: TailKind, system_residual: f64) -> Self {
        ExtinctionProfile {
            head,
            tail,
            system_residual,
        }
    }

    pub fn m(&self) -> usize {
        self.head.len()
    }

    /// `ep_i`; `ep_0 = 1`.
    pub fn ep(&self, i: usize) -> f64 {
        if i == 0 {
            return 1.0;
        }
        if let TailKind::Zero { from } = self.tail {
            if i >= from {
                return 0.0;
            }
        }
        let m = self.m();
        if i <= m {
            return self.head[i - 1];
        }
        match self.tail {
            TailKind::Geometric { rho_star } => {
                let exp = i - m;
                let ep_m = self.head[m - 1];
                if exp > i32::MAX as usize {
                    0.0
                } else {
                    rho_star.powi(exp as i32) * ep_m
                }
            }
            TailKind::Zero { .. } => 0.0,
        }
    }

    pub fn head(&self) -> &[f64] {
        &self.head
    }

    pub fn tail(&self) -> TailKind {
        self.tail
    }

    pub fn system_residual(&self) -> f64 {
        self.system_residual
    }

    /// Zero cutoff `i_0`, if the tail is identically zero.
    pub fn zero_from(&self) -> Option<usize> {
        match self.tail {
            TailKind::Zero { from } => Some(from),
            TailKind::Geometric { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub policy: Policy,
    pub profile: ExtinctionProfile,
    /// Head states whose action changes in the next policy.
    pub improved_states: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub optimal_policy: Policy,
    pub optimal_profile: ExtinctionProfile,
    pub m_star: usize,
    pub rho_star: f64,
    pub a_star: ActionId,
    pub tied: Vec<ActionId>,
    pub iterations: Vec<IterationRecord>,
    pub oe_residual: f64,
    /// Head states above `m_*` whose action never matters.
    pub dont_care: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteReport {
    pub profile: ExtinctionProfile,
    pub table: Vec<(Policy, ExtinctionProfile)>,
}

/// `m_* = min { i <= m : min_{a in A(i)} b_0(a) = 0 }`, or `m + 1`.
pub fn m_star(model: &CbpModel) -> usize {
    (1..=model.m())
        .find(|&i| {
            model
                .actions_at(i)
                .iter()
                .any(|a| model.mechanism(a).b0() == 0.0)
        })
        .unwrap_or(model.m() + 1)
}

/// Policy iteration over the class of policies that play a fixed `a_*`
/// above `m`.
#[derive(Debug, Clone)]
pub struct CbpSolver<'a> {
    model: &'a CbpModel,
    roots: RhoStarResult,
    a_star: ActionId,
    m_star: usize,
}

impl<'a> CbpSolver<'a> {
    /// Computes `rho(a)` over the tail set with root tolerance `tol` and
    /// selects `a_*` as the smallest tied id.
    pub fn new(model: &'a CbpModel, tol: f64) -> Result<Self> {
        let roots = gen_fn::rho_star(model, tol)?;
        let a_star = roots.a_star.clone();
        Ok(CbpSolver {
            model,
            roots,
            a_star,
            m_star: m_star(model),
        })
    }

    /// Same as [`CbpSolver::new`] with an explicit choice among the tied
    /// root-minimizing actions.
    pub fn with_a_star(model: &'a CbpModel, tol: f64, a_star: ActionId) -> Result<Self> {
        let mut solver = CbpSolver::new(model, tol)?;
        if !solver.roots.tied.contains(&a_star) {
            return Err(Error::InvalidArgument(format!(
                "action `{a_star}` does not attain rho_* = {}",
                solver.roots.rho_star
            )));
        }
        solver.a_star = a_star;
        Ok(solver)
    }

    pub fn model(&self) -> &CbpModel {
        self.model
    }

    pub fn roots(&self) -> &RhoStarResult {
        &self.roots
    }

    pub fn rho_star(&self) -> f64 {
        self.roots.rho_star
    }

    pub fn a_star(&self) -> &ActionId {
        &self.a_star
    }

    pub fn m_star(&self) -> usize {
        self.m_star
    }

    fn death_free_regime(&self) -> bool {
        self.m_star <= self.model.m()
    }

    /// Smallest admissible id at every head state, `a_*` above `m`.
    pub fn default_policy(&self) -> Policy {
        Policy {
            head: (1..=self.model.m())
                .map(|i| smallest(self.model.actions_at(i)).clone())
                .collect(),
            tail: self.a_star.clone(),
        }
    }

    /// Policy with the given head and tail `a_*`.
    pub fn policy(&self, head: Vec<ActionId>) -> Result<Policy> {
        let p = Policy {
            head,
            tail: self.a_star.clone(),
        };
        p.check(self.model)?;
        Ok(p)
    }

    fn check_member(&self, f: &Policy) -> Result<()> {
        f.check(self.model)?;
        if !self.roots.tied.contains(f.tail()) {
            return Err(Error::InvalidArgument(format!(
                "tail action `{}` does not attain rho_* = {}",
                f.tail(),
                self.roots.rho_star
            )));
        }
        Ok(())
    }

    /// Bracketed right-hand side of the optimality equation at state `i`
    /// under action `a`, given values `x(j)`. In the geometric regime:
    /// `p(0|i,a) + sum_{j<m} p(j|i,a) x_j + L(i,a) x_m`; in the death-free
    /// regime: `p(0|i,a) + sum_{j<m_*} p(j|i,a) x_j`.
    pub fn q_value(&self, i: usize, a: &ActionId, x: impl Fn(usize) -> f64) -> f64 {
        let mech = self.model.mechanism(a);
        let m = self.model.m();
        let cutoff = if self.death_free_regime() {
            self.m_star
        } else {
            m
        };
        let exit = mech.exit_rate();
        let mut v = 0.0;
        for (k, b) in mech.support() {
            let j = i + k - 1;
            if j == 0 {
                v += b / exit;
            } else if j < cutoff {
                v += b / exit * x(j);
            }
        }
        if !self.death_free_regime() {
            v += tail_weight_l(mech, i, m, self.roots.rho_star) * x(m);
        }
        v
    }

    /// Extinction probabilities of `f` from the linear system of the
    /// applicable case: the `m`-dimensional system closed by `L` when every
    /// head action can die, otherwise the `(i_0 - 1)`-dimensional system with
    /// `ep_i = 0` for `i >= i_0`.
    pub fn evaluate_policy(&self, f: &Policy) -> Result<ExtinctionProfile> {
        self.check_member(f)?;
        let m = self.model.m();
        let rho_star = self.roots.rho_star;
        let i0 = (1..=m).find(|&i| self.model.mechanism(f.action_at(i)).b0() == 0.0);
        let n = i0.map_or(m, |i0| i0 - 1);

        let mut u = vec![vec![0.0; n]; n];
        let mut c = vec![0.0; n];
        for i in 1..=n {
            let mech = self.model.mechanism(f.action_at(i));
            c[i - 1] = embedded_prob(mech, i, 0);
            for (k, _) in mech.support() {
                let j = i + k - 1;
                if j >= 1 && j <= n && (i0.is_some() || j < m) {
                    u[i - 1][j - 1] = embedded_prob(mech, i, j);
                }
            }
            if i0.is_none() {
                u[i - 1][m - 1] += tail_weight_l(mech, i, m, rho_star);
            }
        }
        let sys = UnitSystem::new(u, c)?;
        let case = if i0.is_none() { "i" } else { "ii" };
        let x = solve_unit(&sys).map_err(|e| match e {
            Error::SingularSystem { context } => Error::SingularSystem {
                context: format!("evaluation of policy {f}, case ({case}): {context}"),
            },
            other => other,
        })?;
        let residual = sys.residual(&x);
        let mut head: Vec<f64> = x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let tail = match i0 {
            Some(i0) => {
                head.resize(m, 0.0);
                TailKind::Zero { from: i0 }
            }
            None => TailKind::Geometric { rho_star },
        };
        Ok(ExtinctionProfile::new(head, tail, residual))
    }

    /// One improvement step. Returns the improved policy and the head states
    /// whose action changed.
    pub fn improve_policy(&self, f: &Policy, profile: &ExtinctionProfile) -> (Policy, Vec<usize>) {
        let limit = if self.death_free_regime() {
            self.m_star
        } else {
            self.model.m()
        };
        let mut next = f.clone();
        let mut changed = Vec::new();
        for i in 1..=limit {
            let current = profile.ep(i);
            let scored: Vec<(f64, &ActionId)> = self
                .model
                .actions_at(i)
                .iter()
                .map(|a| (self.q_value(i, a, |j| profile.ep(j)), a))
                .filter(|(v, _)| current - v > IMPROVE_TOL * current.max(*v))
                .collect();
            let Some(best) = scored.iter().map(|(v, _)| *v).reduce(f64::min) else {
                continue;
            };
            let choice = scored
                .iter()
                .filter(|(v, _)| *v - best <= IMPROVE_TOL * best)
                .map(|(_, a)| *a)
                .min()
                .expect("nonempty improvement set");
            if choice != f.action_at(i) {
                next.head[i - 1] = choice.clone();
                changed.push(i);
            }
        }
        (next, changed)
    }

    pub fn solve(&self) -> Result<SolveReport> {
        self.solve_from(self.default_policy())
    }

    /// Alternates evaluation and improvement from `start` until the policy
    /// is stable.
    pub fn solve_from(&self, start: Policy) -> Result<SolveReport> {
        self.check_member(&start)?;
        let bound = usize::try_from(self.model.head_policy_count()).unwrap_or(usize::MAX);
        let mut f = start;
        let mut iterations = Vec::new();
        let last_profile = loop {
            if iterations.len() >= bound {
                return Err(Error::IterationBound { bound });
            }
            let profile = self.evaluate_policy(&f)?;
            let (next, changed) = self.improve_policy(&f, &profile);
            iterations.push(IterationRecord {
                policy: f.clone(),
                profile: profile.clone(),
                improved_states: changed.clone(),
            });
            if changed.is_empty() {
                break profile;
            }
            f = next;
        };

        let m = self.model.m();
        let optimal_profile = if self.death_free_regime() {
            let head = (1..=m)
                .map(|i| {
                    if i < self.m_star {
                        last_profile.ep(i)
                    } else {
                        0.0
                    }
                })
                .collect();
            ExtinctionProfile::new(
                head,
                TailKind::Zero { from: self.m_star },
                last_profile.system_residual,
            )
        } else {
            last_profile
        };
        let oe_residual = self.verify_oe(&optimal_profile);
        Ok(SolveReport {
            optimal_policy: f,
            optimal_profile,
            m_star: self.m_star,
            rho_star: self.roots.rho_star,
            a_star: self.a_star.clone(),
            tied: self.roots.tied.clone(),
            iterations,
            oe_residual,
            dont_care: if self.death_free_regime() {
                (self.m_star + 1..=m).collect()
            } else {
                Vec::new()
            },
        })
    }

    /// Sup-norm residual of the optimality equation at `profile`. In the
    /// death-free regime the states `m_*..=m` must additionally be zero and
    /// contribute `|x_i|`.
    pub fn verify_oe(&self, profile: &ExtinctionProfile) -> f64 {
        let m = self.model.m();
        let eq_states = if self.death_free_regime() {
            self.m_star - 1
        } else {
            m
        };
        let mut residual = 0.0f64;
        for i in 1..=eq_states {
            let best = self
                .model
                .actions_at(i)
                .iter()
                .map(|a| self.q_value(i, a, |j| profile.ep(j)))
                .fold(f64::INFINITY, f64::min);
            residual = residual.max((profile.ep(i) - best).abs());
        }
        for i in eq_states + 1..=m {
            residual = residual.max(profile.ep(i).abs());
        }
        residual
    }

    /// Every head policy, in mixed-radix order over the admissible lists.
    pub fn enumerate_policies(&self, cap: u128) -> Result<Vec<Policy>> {
        let count = self.model.head_policy_count();
        if count > cap {
            return Err(Error::TooManyPolicies { count, cap });
        }
        let m = self.model.m();
        let lists: Vec<&[ActionId]> = (1..=m).map(|i| self.model.actions_at(i)).collect();
        let mut out = Vec::with_capacity(count as usize);
        let mut digits = vec![0usize; m];
        loop {
            out.push(Policy {
                head: digits
                    .iter()
                    .zip(&lists)
                    .map(|(d, l)| l[*d].clone())
                    .collect(),
                tail: self.a_star.clone(),
            });
            let mut pos = 0;
            loop {
                if pos == m {
                    return Ok(out);
                }
                digits[pos] += 1;
                if digits[pos] < lists[pos].len() {
                    break;
                }
                digits[pos] = 0;
                pos += 1;
            }
        }
    }

    /// Componentwise minimum of the extinction profile over every head
    /// policy.
    pub fn brute_force(&self, cap: u128) -> Result<BruteReport> {
        let policies = self.enumerate_policies(cap)?;
        let table: Vec<(Policy, ExtinctionProfile)> = policies
            .into_par_iter()
            .map(|p| self.evaluate_policy(&p).map(|e| (p, e)))
            .collect::<Result<_>>()?;
        let m = self.model.m();
        let head: Vec<f64> = (1..=m)
            .map(|i| {
                table
                    .iter()
                    .map(|(_, e)| e.ep(i))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let residual = table
            .iter()
            .map(|(_, e)| e.system_residual())
            .fold(0.0, f64::max);
        let tail = if self.death_free_regime() {
            TailKind::Zero { from: self.m_star }
        } else {
            TailKind::Geometric {
                rho_star: self.roots.rho_star,
            }
        };
        Ok(BruteReport {
            profile: ExtinctionProfile::new(head, tail, residual),
            table,
        })
    }
}

/// Solves once per tied root-minimizing tail action.
pub fn solve_exhaustive_ties(model: &CbpModel, tol: f64) -> Result<Vec<SolveReport>> {
    let base = CbpSolver::new(model, tol)?;
    base.roots()
        .tied
        .iter()
        .map(|a| CbpSolver::with_a_star(model, tol, a.clone())?.solve())
        .collect()
}

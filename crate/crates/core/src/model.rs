//! Branching mechanisms, controlled branching process models and general
//! controlled Markov system models, together with their validation.
//!
//! Models are immutable once validated. Rates of a controlled branching
//! process are never stored per state: `q(j|i,a) = i * b_{j-i+1}(a)` is
//! materialized on demand from the per-action mechanism.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of an action. Ordering is lexicographic on the string and is
/// used for every "smallest id" tie-break.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub String);

impl ActionId {
    pub fn new(id: impl Into<String>) -> Self {
        ActionId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ActionId {
    fn from(s: &str) -> Self {
        ActionId(s.to_string())
    }
}

/// Finite-support per-particle rates `{b_k}` of one action.
///
/// `b_1` is always derived as `-sum_{k != 1} b_k`, so the mechanism is
/// conservative by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchingMechanism {
    /// Dense rates indexed by offspring count, `rates[1] = b_1`.
    rates: Vec<f64>,
}

impl BranchingMechanism {
    /// Validates sparse entries `k -> b_k` (with `k != 1`) and derives `b_1`.
    pub fn from_entries<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, f64)>,
    {
        let mut sparse = BTreeMap::new();
        for (k, rate) in entries {
            if k == 1 {
                return Err(Error::EntryForKEqualsOne);
            }
            if !rate.is_finite() {
                return Err(Error::NonFiniteRate(k));
            }
            if rate < 0.0 {
                return Err(Error::NegativeRate(k));
            }
            *sparse.entry(k).or_insert(0.0) += rate;
        }
        let offspring: f64 = sparse.range(2..).map(|(_, b)| *b).sum();
        if offspring <= 0.0 {
            return Err(Error::TrivialMechanism);
        }
        let max_k = sparse
            .iter()
            .rev()
            .find(|(_, b)| **b > 0.0)
            .map(|(k, _)| *k)
            .unwrap_or(0);
        let mut rates = vec![0.0; max_k.max(1) + 1];
        for (k, b) in sparse.range(..=max_k) {
            rates[*k] = *b;
        }
        let exit: f64 = rates
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != 1)
            .map(|(_, b)| *b)
            .sum();
        rates[1] = -exit;
        Ok(BranchingMechanism { rates })
    }

    /// `b_k`, zero outside the support.
    pub fn b(&self, k: usize) -> f64 {
        self.rates.get(k).copied().unwrap_or(0.0)
    }

    pub fn b1(&self) -> f64 {
        self.rates[1]
    }

    /// `b_0`, the per-particle death rate.
    pub fn b0(&self) -> f64 {
        self.rates[0]
    }

    /// `|b_1|`, the per-particle jump rate.
    pub fn exit_rate(&self) -> f64 {
        -self.rates[1]
    }

    /// Largest `k` with `b_k > 0`.
    pub fn max_k(&self) -> usize {
        (0..self.rates.len())
            .rev()
            .find(|&k| k != 1 && self.rates[k] > 0.0)
            .unwrap_or(0)
    }

    /// Dense rates `b_0, b_1, ..., b_{max_k}`.
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Nonzero entries with `k != 1`, ascending in `k`.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rates
            .iter()
            .enumerate()
            .filter(|(k, b)| *k != 1 && **b > 0.0)
            .map(|(k, b)| (k, *b))
    }

    /// Entries with `k != 1` as stored, including explicit zeros.
    pub fn entries(&self) -> BTreeMap<usize, f64> {
        self.rates
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != 1)
            .map(|(k, b)| (k, *b))
            .collect()
    }

    /// Offspring-rate drift `sum_k k * b_k`, the slope of the generating
    /// function at `v = 1`.
    pub fn drift(&self) -> f64 {
        self.rates
            .iter()
            .enumerate()
            .map(|(k, b)| k as f64 * b)
            .sum()
    }

    /// Same mechanism with every rate multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale factor {c} must be positive"
            )));
        }
        BranchingMechanism::from_entries(self.entries().into_iter().map(|(k, b)| (k, b * c)))
    }

    /// Rate `q(j|i) = i * b_{j-i+1}` of the population process.
    pub fn population_rate(&self, i: usize, j: usize) -> f64 {
        if i == 0 || j + 1 < i {
            return 0.0;
        }
        i as f64 * self.b(j + 1 - i)
    }
}

/// Action definition as it appears in a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAction {
    pub id: ActionId,
    pub b: BTreeMap<usize, f64>,
}

/// Unvalidated controlled branching process description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCbp {
    pub m: usize,
    pub actions: Vec<RawAction>,
    pub admissible: BTreeMap<usize, Vec<ActionId>>,
    pub tail: Vec<ActionId>,
}

/// Validated controlled branching process on `S = {0, 1, 2, ...}` with
/// target `B = {0}`.
///
/// States `1..=m` carry their own admissible sets; every state above `m`
/// uses the shared tail set.
#[derive(Debug, Clone, PartialEq)]
pub struct CbpModel {
    m: usize,
    mechanisms: BTreeMap<ActionId, BranchingMechanism>,
    admissible: Vec<Vec<ActionId>>,
    tail: Vec<ActionId>,
}

fn check_action_list(
    ids: &[ActionId],
    defined: &BTreeMap<ActionId, BranchingMechanism>,
) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !defined.contains_key(id) {
            return Err(Error::UnknownActionId(id.clone()));
        }
        if !seen.insert(id) {
            return Err(Error::DuplicateActionId(id.clone()));
        }
    }
    Ok(())
}

impl CbpModel {
    pub fn validate(raw: &RawCbp) -> Result<Self> {
        if raw.m < 1 {
            return Err(Error::MZero);
        }
        let mut mechanisms = BTreeMap::new();
        for action in &raw.actions {
            if mechanisms.contains_key(&action.id) {
                return Err(Error::DuplicateActionId(action.id.clone()));
            }
            let mech = BranchingMechanism::from_entries(action.b.iter().map(|(k, b)| (*k, *b)))
                .map_err(|e| Error::InvalidMechanism {
                    action: action.id.clone(),
                    source: Box::new(e),
                })?;
            mechanisms.insert(action.id.clone(), mech);
        }
        if let Some((&i, _)) = raw.admissible.iter().find(|(i, _)| **i < 1 || **i > raw.m) {
            return Err(Error::StateOutOfRange(i));
        }
        let mut admissible = Vec::with_capacity(raw.m);
        for i in 1..=raw.m {
            let ids = raw.admissible.get(&i).cloned().unwrap_or_default();
            if ids.is_empty() {
                return Err(Error::EmptyActionSet(i));
            }
            check_action_list(&ids, &mechanisms)?;
            admissible.push(ids);
        }
        if raw.tail.is_empty() {
            return Err(Error::EmptyActionSet(raw.m + 1));
        }
        check_action_list(&raw.tail, &mechanisms)?;
        Ok(CbpModel {
            m: raw.m,
            mechanisms,
            admissible,
            tail: raw.tail.clone(),
        })
    }

    pub fn to_raw(&self) -> RawCbp {
        RawCbp {
            m: self.m,
            actions: self
                .mechanisms
                .iter()
                .map(|(id, mech)| RawAction {
                    id: id.clone(),
                    b: mech.entries(),
                })
                .collect(),
            admissible: self
                .admissible
                .iter()
                .enumerate()
                .map(|(idx, ids)| (idx + 1, ids.clone()))
                .collect(),
            tail: self.tail.clone(),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Admissible actions at state `i >= 1`: the head set for `i <= m`, the
    /// tail set above.
    pub fn actions_at(&self, i: usize) -> &[ActionId] {
        assert!(i >= 1, "state 0 is absorbing and has no actions");
        if i <= self.m {
            &self.admissible[i - 1]
        } else {
            &self.tail
        }
    }

    pub fn tail_actions(&self) -> &[ActionId] {
        &self.tail
    }

    pub fn is_admissible(&self, i: usize, action: &ActionId) -> bool {
        i >= 1 && self.actions_at(i).contains(action)
    }

    pub fn mechanism(&self, action: &ActionId) -> &BranchingMechanism {
        self.mechanisms
            .get(action)
            .unwrap_or_else(|| panic!("action `{action}` not defined in validated model"))
    }

    pub fn mechanisms(&self) -> &BTreeMap<ActionId, BranchingMechanism> {
        &self.mechanisms
    }

    /// Rate `q(j|i,a)`, with the diagonal `q(i|i,a) = i * b_1(a)`.
    pub fn rate(&self, j: usize, i: usize, action: &ActionId) -> f64 {
        self.mechanism(action).population_rate(i, j)
    }

    /// Nonzero entries of the rate row `q(.|i,a)`, diagonal included.
    pub fn rate_row(&self, i: usize, action: &ActionId) -> Vec<(usize, f64)> {
        if i == 0 {
            return Vec::new();
        }
        let mech = self.mechanism(action);
        mech.rates()
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(k, b)| (i + k - 1, i as f64 * b))
            .collect()
    }

    /// Number of head policies `prod_{i <= m} |A(i)|`, saturating.
    pub fn head_policy_count(&self) -> u128 {
        self.admissible
            .iter()
            .fold(1u128, |acc, ids| acc.saturating_mul(ids.len() as u128))
    }

    /// Largest offspring count over all defined actions.
    pub fn max_offspring(&self) -> usize {
        self.mechanisms
            .values()
            .map(|m| m.max_k())
            .max()
            .unwrap_or(0)
    }

    /// Constants `(c0, L0)` of the drift condition with `R(i) = i + 1`:
    /// `sum_j q(j|i,a) R(j) <= c0 R(i)` and `q*(i) <= L0 R(i)`.
    pub fn lyapunov_constants(&self) -> (f64, f64) {
        let c0 = self
            .mechanisms
            .values()
            .map(|m| m.drift())
            .fold(0.0f64, f64::max);
        let l0 = self
            .mechanisms
            .values()
            .map(|m| m.exit_rate())
            .fold(0.0f64, f64::max);
        (c0, l0)
    }
}

/// Unvalidated general model. Rates are keyed state -> action -> target
/// state; an entry for the diagonal is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGeneral {
    pub states: Vec<String>,
    pub target: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cemetery: Option<String>,
    pub rates: BTreeMap<String, BTreeMap<ActionId, BTreeMap<String, f64>>>,
}

/// One action's validated rate row: off-diagonal entries plus exit rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub action: ActionId,
    /// Off-diagonal `(j, q(j|i,a))`, ascending in `j`, zeros dropped.
    pub entries: Vec<(usize, f64)>,
    /// `q_i(a) = -q(i|i,a)`.
    pub exit_rate: f64,
}

/// Validated finite controlled Markov system with target set and optional
/// cemetery state.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralModel {
    states: Vec<String>,
    target: Vec<bool>,
    cemetery: Option<usize>,
    /// Per state, actions sorted by id; empty for absorbing states.
    rows: Vec<Vec<RateRow>>,
}

/// Diagonal entries are reconciled with the off-diagonal sum within this
/// tolerance, scaled by `max(1, exit rate)`.
pub const CONSERVATIVE_TOL: f64 = 1e-9;

impl GeneralModel {
    pub fn validate(raw: &RawGeneral) -> Result<Self> {
        let mut index = HashMap::new();
        for (idx, name) in raw.states.iter().enumerate() {
            if index.insert(name.as_str(), idx).is_some() {
                return Err(Error::DuplicateState(name.clone()));
            }
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::UnknownState(name.to_string()))
        };
        let n = raw.states.len();
        let mut target = vec![false; n];
        for name in &raw.target {
            target[lookup(name)?] = true;
        }
        let cemetery = raw.cemetery.as_deref().map(lookup).transpose()?;
        if let Some(c) = cemetery {
            if target[c] {
                return Err(Error::CemeteryInTarget(raw.states[c].clone()));
            }
        }
        let mut rows: Vec<Vec<RateRow>> = vec![Vec::new(); n];
        for (state, by_action) in &raw.rates {
            let i = lookup(state)?;
            let absorbing = target[i] || cemetery == Some(i);
            for (action, row) in by_action {
                let mut entries = Vec::new();
                let mut diagonal = None;
                for (to, &rate) in row {
                    let j = lookup(to)?;
                    if !rate.is_finite() {
                        return Err(Error::NonConservativeRow {
                            state: state.clone(),
                            action: action.clone(),
                        });
                    }
                    if j == i {
                        diagonal = Some(rate);
                    } else if rate < 0.0 {
                        return Err(Error::NonConservativeRow {
                            state: state.clone(),
                            action: action.clone(),
                        });
                    } else if rate > 0.0 {
                        entries.push((j, rate));
                    }
                }
                entries.sort_by_key(|(j, _)| *j);
                let exit_rate: f64 = entries.iter().map(|(_, r)| r).sum();
                if let Some(d) = diagonal {
                    if (d + exit_rate).abs() > CONSERVATIVE_TOL * exit_rate.max(1.0) {
                        return Err(Error::NonConservativeRow {
                            state: state.clone(),
                            action: action.clone(),
                        });
                    }
                }
                if absorbing {
                    if exit_rate > 0.0 {
                        return Err(Error::TargetNotAbsorbing(state.clone()));
                    }
                    continue;
                }
                if exit_rate <= 0.0 {
                    return Err(Error::ZeroExitRate {
                        state: state.clone(),
                        action: action.clone(),
                    });
                }
                rows[i].push(RateRow {
                    action: action.clone(),
                    entries,
                    exit_rate,
                });
            }
        }
        for (i, acts) in rows.iter().enumerate() {
            if acts.is_empty() && !target[i] && cemetery != Some(i) {
                return Err(Error::NoActions(raw.states[i].clone()));
            }
        }
        Ok(GeneralModel {
            states: raw.states.clone(),
            target,
            cemetery,
            rows,
        })
    }

    pub fn to_raw(&self) -> RawGeneral {
        let mut rates = BTreeMap::new();
        for (i, acts) in self.rows.iter().enumerate() {
            if acts.is_empty() {
                continue;
            }
            let by_action = acts
                .iter()
                .map(|row| {
                    let entries = row
                        .entries
                        .iter()
                        .map(|(j, r)| (self.states[*j].clone(), *r))
                        .collect();
                    (row.action.clone(), entries)
                })
                .collect();
            rates.insert(self.states[i].clone(), by_action);
        }
        RawGeneral {
            states: self.states.clone(),
            target: self
                .states
                .iter()
                .zip(&self.target)
                .filter(|(_, t)| **t)
                .map(|(s, _)| s.clone())
                .collect(),
            cemetery: self.cemetery.map(|c| self.states[c].clone()),
            rates,
        }
    }

    pub(crate) fn from_parts(
        states: Vec<String>,
        target: Vec<bool>,
        cemetery: Option<usize>,
        rows: Vec<Vec<RateRow>>,
    ) -> Self {
        GeneralModel {
            states,
            target,
            cemetery,
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_names(&self) -> &[String] {
        &self.states
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn is_target(&self, i: usize) -> bool {
        self.target[i]
    }

    pub fn cemetery(&self) -> Option<usize> {
        self.cemetery
    }

    /// Target and cemetery states have no actions.
    pub fn is_absorbing(&self, i: usize) -> bool {
        self.target[i] || self.cemetery == Some(i)
    }

    /// Rate rows of state `i`, one per admissible action, sorted by id.
    pub fn rows(&self, i: usize) -> &[RateRow] {
        &self.rows[i]
    }

    pub fn row(&self, i: usize, action: &ActionId) -> Option<&RateRow> {
        self.rows[i].iter().find(|r| &r.action == action)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mech(entries: &[(usize, f64)]) -> Result<BranchingMechanism> {
        BranchingMechanism::from_entries(entries.iter().copied())
    }

    #[test]
    fn b1_is_derived() {
        let m = mech(&[(0, 1.0), (2, 2.0)]).unwrap();
        assert_eq!(m.b1(), -3.0);
        assert_eq!(m.max_k(), 2);
        let m = mech(&[(0, 2.0), (2, 1.0)]).unwrap();
        assert_eq!(m.b1(), -3.0);
    }

    #[test]
    fn mechanism_errors() {
        assert_eq!(mech(&[(0, 1.0)]), Err(Error::TrivialMechanism));
        assert_eq!(mech(&[(0, 1.0), (2, 0.0)]), Err(Error::TrivialMechanism));
        assert_eq!(mech(&[(0, 1.0), (1, -1.0)]), Err(Error::EntryForKEqualsOne));
        assert_eq!(mech(&[(0, -1.0), (2, 1.0)]), Err(Error::NegativeRate(0)));
        assert_eq!(
            mech(&[(0, f64::NAN), (2, 1.0)]),
            Err(Error::NonFiniteRate(0))
        );
    }

    #[test]
    fn zero_death_rate_is_kept() {
        let m = mech(&[(0, 0.0), (2, 1.0)]).unwrap();
        assert_eq!(m.b0(), 0.0);
        assert_eq!(m.b1(), -1.0);
        assert_eq!(m.entries().get(&0), Some(&0.0));
    }

    fn two_action_raw() -> RawCbp {
        RawCbp {
            m: 1,
            actions: vec![
                RawAction {
                    id: "a1".into(),
                    b: [(0, 1.0), (2, 2.0)].into_iter().collect(),
                },
                RawAction {
                    id: "a2".into(),
                    b: [(0, 3.0), (2, 1.0)].into_iter().collect(),
                },
            ],
            admissible: [(1, vec!["a1".into(), "a2".into()])].into_iter().collect(),
            tail: vec!["a1".into()],
        }
    }

    #[test]
    fn cbp_validation() {
        let model = CbpModel::validate(&two_action_raw()).unwrap();
        assert_eq!(model.actions_at(1).len(), 2);
        assert_eq!(model.actions_at(7), &[ActionId::from("a1")]);
        assert_eq!(model.head_policy_count(), 2);
        assert_eq!(CbpModel::validate(&model.to_raw()).unwrap(), model);

        let mut raw = two_action_raw();
        raw.m = 0;
        assert_eq!(CbpModel::validate(&raw), Err(Error::MZero));

        let mut raw = two_action_raw();
        raw.tail = vec!["zz".into()];
        assert_eq!(
            CbpModel::validate(&raw),
            Err(Error::UnknownActionId("zz".into()))
        );

        let mut raw = two_action_raw();
        raw.admissible.insert(1, vec![]);
        assert_eq!(CbpModel::validate(&raw), Err(Error::EmptyActionSet(1)));

        let mut raw = two_action_raw();
        raw.admissible.insert(1, vec!["a1".into(), "a1".into()]);
        assert_eq!(
            CbpModel::validate(&raw),
            Err(Error::DuplicateActionId("a1".into()))
        );

        let mut raw = two_action_raw();
        raw.actions.push(raw.actions[0].clone());
        assert_eq!(
            CbpModel::validate(&raw),
            Err(Error::DuplicateActionId("a1".into()))
        );

        let mut raw = two_action_raw();
        raw.admissible.insert(2, vec!["a1".into()]);
        assert_eq!(CbpModel::validate(&raw), Err(Error::StateOutOfRange(2)));
    }

    #[test]
    fn rate_rows_are_conservative_and_satisfy_drift_bounds() {
        let model = CbpModel::validate(&two_action_raw()).unwrap();
        let (c0, l0) = model.lyapunov_constants();
        for i in 1..40usize {
            for a in model.actions_at(i).iter().chain(model.tail_actions()) {
                let row = model.rate_row(i, a);
                let total: f64 = row.iter().map(|(_, q)| q).sum();
                assert!(total.abs() < 1e-12);
                let r = |j: usize| (j + 1) as f64;
                let lyap: f64 = row.iter().map(|(j, q)| q * r(*j)).sum();
                assert!(lyap <= c0 * r(i) + 1e-9);
                assert!(-model.rate(i, i, a) <= l0 * r(i));
            }
        }
    }

    type Row<'a> = (&'a str, &'a str, &'a [(&'a str, f64)]);

    fn general_raw(rows: &[Row<'_>]) -> RawGeneral {
        let mut rates: BTreeMap<String, BTreeMap<ActionId, BTreeMap<String, f64>>> =
            BTreeMap::new();
        for (state, action, entries) in rows {
            rates.entry(state.to_string()).or_default().insert(
                ActionId::from(*action),
                entries.iter().map(|(j, r)| (j.to_string(), *r)).collect(),
            );
        }
        RawGeneral {
            states: vec!["0".into(), "1".into(), "D".into()],
            target: vec!["0".into()],
            cemetery: Some("D".into()),
            rates,
        }
    }

    #[test]
    fn general_validation() {
        let model =
            GeneralModel::validate(&general_raw(&[("1", "a", &[("0", 1.0), ("D", 3.0)])])).unwrap();
        assert_eq!(model.rows(1)[0].exit_rate, 4.0);
        assert_eq!(GeneralModel::validate(&model.to_raw()).unwrap(), model);

        let with_diag = general_raw(&[("1", "a", &[("0", 1.0), ("D", 3.0), ("1", -4.0 + 1e-12)])]);
        assert!(GeneralModel::validate(&with_diag).is_ok());
        let bad_diag = general_raw(&[("1", "a", &[("0", 1.0), ("D", 3.0), ("1", -3.0)])]);
        assert!(matches!(
            GeneralModel::validate(&bad_diag),
            Err(Error::NonConservativeRow { .. })
        ));

        let zero = general_raw(&[("1", "a", &[("0", 0.0)])]);
        assert!(matches!(
            GeneralModel::validate(&zero),
            Err(Error::ZeroExitRate { .. })
        ));

        let negative = general_raw(&[("1", "a", &[("0", -0.5), ("D", 1.0)])]);
        assert!(matches!(
            GeneralModel::validate(&negative),
            Err(Error::NonConservativeRow { .. })
        ));

        let leaky = general_raw(&[("1", "a", &[("0", 1.0)]), ("0", "a", &[("1", 1.0)])]);
        assert_eq!(
            GeneralModel::validate(&leaky),
            Err(Error::TargetNotAbsorbing("0".into()))
        );

        let missing = general_raw(&[]);
        assert_eq!(
            GeneralModel::validate(&missing),
            Err(Error::NoActions("1".into()))
        );
    }
}

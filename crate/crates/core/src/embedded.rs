//! Embedded jump-chain transition probabilities
//! `p(j|i,a) = q(j|i,a) / q_i(a)` and the geometric tail weight `L(i,a)`.

use crate::error::{Error, Result};
use crate::model::{ActionId, BranchingMechanism, GeneralModel};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedRow {
    pub state: usize,
    /// `(j, p(j|i,a))` ascending in `j`; never contains `j = i`.
    pub entries: Vec<(usize, f64)>,
}

impl EmbeddedRow {
    pub fn prob(&self, j: usize) -> f64 {
        self.entries
            .iter()
            .find(|(k, _)| *k == j)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }
}

/// `p(j|i,a) = b_{j-i+1}(a) / |b_1(a)|` for `j >= i - 1`, `j != i`.
pub fn embedded_prob(mech: &BranchingMechanism, i: usize, j: usize) -> f64 {
    if i == 0 || j == i || j + 1 < i {
        return 0.0;
    }
    mech.b(j + 1 - i) / mech.exit_rate()
}

pub fn embedded_row(mech: &BranchingMechanism, i: usize) -> EmbeddedRow {
    assert!(i >= 1, "state 0 is absorbing");
    let exit = mech.exit_rate();
    let entries = mech.support().map(|(k, b)| (i + k - 1, b / exit)).collect();
    EmbeddedRow { state: i, entries }
}

/// `L(i,a) = sum_{j >= m} p(j|i,a) rho_*^{j-m}` for `1 <= i <= m`.
pub fn tail_weight_l(mech: &BranchingMechanism, i: usize, m: usize, rho_star: f64) -> f64 {
    debug_assert!(i >= 1 && i <= m);
    let exit = mech.exit_rate();
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for (k, b) in mech.support() {
        let j = i + k - 1;
        if j < m {
            continue;
        }
        let term = b / exit * rho_star.powi((j - m) as i32) - carry;
        let t = sum + term;
        carry = (t - sum) - term;
        sum = t;
    }
    sum
}

/// Dense embedded transition matrix of a general model under a stationary
/// policy. Target and cemetery rows are the identity.
pub fn embedded_general(
    model: &GeneralModel,
    policy: &[Option<ActionId>],
) -> Result<Vec<Vec<f64>>> {
    let n = model.len();
    if policy.len() != n {
        return Err(Error::PolicyShape {
            expected: n,
            got: policy.len(),
        });
    }
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        if model.is_absorbing(i) {
            p[i][i] = 1.0;
            continue;
        }
        let name = &model.state_names()[i];
        let action = policy[i]
            .as_ref()
            .ok_or_else(|| Error::MissingAction(name.clone()))?;
        let row = model
            .row(i, action)
            .ok_or_else(|| Error::InadmissibleAction {
                state: name.clone(),
                action: action.clone(),
            })?;
        for (j, rate) in &row.entries {
            p[i][*j] = rate / row.exit_rate;
        }
    }
    Ok(p)
}

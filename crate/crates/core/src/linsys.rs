//! Dense solves of unit-shifted systems `(I - U) x = c`.

use crate::error::{Error, Result};

/// Relative pivot threshold for declaring `I - U` singular.
pub const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct UnitSystem {
    u: Vec<Vec<f64>>,
    c: Vec<f64>,
}

impl UnitSystem {
    /// Requires a square nonnegative `u` and a nonnegative `c` of matching
    /// length.
    pub fn new(u: Vec<Vec<f64>>, c: Vec<f64>) -> Result<Self> {
        let n = c.len();
        if u.len() != n || u.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidArgument(format!(
                "system must be {n}x{n} to match the constant vector"
            )));
        }
        let nonneg = |x: &f64| x.is_finite() && *x >= 0.0;
        if !u.iter().flatten().all(nonneg) || !c.iter().all(nonneg) {
            return Err(Error::InvalidArgument(
                "system entries must be finite and nonnegative".into(),
            ));
        }
        Ok(UnitSystem { u, c })
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn u(&self) -> &[Vec<f64>] {
        &self.u
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    /// `||(I - U) x - c||_inf`.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.u
            .iter()
            .zip(&self.c)
            .enumerate()
            .map(|(i, (row, ci))| {
                let ux: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                (x[i] - ux - ci).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Structural conditions under which `I - U` is guaranteed invertible:
/// zero diagonal and nothing below the subdiagonal, first row sum `< 1` and
/// remaining row sums `<= 1`, strictly positive subdiagonal.
pub fn check_lemma_structure(u: &[Vec<f64>]) -> bool {
    let n = u.len();
    if u.iter().any(|row| row.len() != n) {
        return false;
    }
    if u.iter().flatten().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return false;
    }
    for (i, row) in u.iter().enumerate() {
        if row[i] != 0.0 || row[..i.saturating_sub(1)].iter().any(|x| *x != 0.0) {
            return false;
        }
        let sum: f64 = row.iter().sum();
        if i == 0 {
            if sum >= 1.0 {
                return false;
            }
        } else if sum > 1.0 + 1e-12 || row[i - 1] <= 0.0 {
            return false;
        }
    }
    true
}

/// Gaussian elimination with partial pivoting on `I - U`.
pub fn solve_unit(sys: &UnitSystem) -> Result<Vec<f64>> {
    let n = sys.dim();
    let mut a: Vec<Vec<f64>> = sys
        .u
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, x)| if i == j { 1.0 - x } else { -x })
                .collect()
        })
        .collect();
    let mut b = sys.c.clone();
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |acc, x| acc.max(x.abs()))
        .max(f64::MIN_POSITIVE);

    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < PIVOT_TOL * scale {
            return Err(Error::SingularSystem {
                context: format!("pivot {col} of {n} vanished"),
            });
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let factor = a[r][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= factor * a[col][c];
            }
            b[r] -= factor * b[col];
        }
    }

    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let tail: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - tail) / a[r][r];
    }
    Ok(x)
}

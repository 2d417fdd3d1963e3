//! Two-phase allocation: how many units to measure cheaply (n₁) and how
//! many to validate (n₂) under a budget n₁C₁ + n₂C₂ ≤ C.
//!
//! The fused variance is proportional to `(1 − R²)/n₂ + R²/n₁`. Its
//! continuous minimiser on the budget line has
//! `ρ* = n₂/n₁ = {(1 − R²) C₁ / (R² C₂)}^{1/2}`. The integer allocation is
//! the best pair with n₁ as large as the budget allows, searched over every
//! feasible n₂ (or a wide window around the continuous optimum when that
//! range is huge).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const FULL_SCAN: usize = 1_000_000;
const WINDOW: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub c1: f64,
    pub c2: f64,
    pub budget: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// Continuous optimum ratio after clamping to (0, 1].
    pub rho_star: f64,
    pub n1: usize,
    pub n2: usize,
    /// (1 − R²)/n₂ + R²/n₁ at the returned pair, i.e. the variance in units
    /// of v₂.
    pub objective: f64,
    pub cost: f64,
    pub warnings: Vec<String>,
}

impl AllocationProblem {
    fn check(&self) -> Result<()> {
        let ok = self.c1 > 0.0
            && self.c2 > 0.0
            && self.budget > 0.0
            && (0.0..=1.0).contains(&self.r_squared)
            && self.c1.is_finite()
            && self.c2.is_finite()
            && self.budget.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("need c1, c2, budget > 0 and r_squared in [0,1]".into()))
        }
    }

    /// Variance of the fused estimator relative to v₂.
    pub fn objective(&self, n1: usize, n2: usize) -> f64 {
        (1.0 - self.r_squared) / n2 as f64 + self.r_squared / n1 as f64
    }

    pub fn feasible(&self, n1: usize, n2: usize) -> bool {
        n2 >= 2 && n1 >= n2 && n1 as f64 * self.c1 + n2 as f64 * self.c2 <= self.budget
    }

    /// Largest affordable n₁ for a given n₂.
    fn max_n1(&self, n2: usize) -> usize {
        let left = self.budget - n2 as f64 * self.c2;
        if left <= 0.0 {
            0
        } else {
            (left / self.c1).floor() as usize
        }
    }
}

/// Continuous ratio before clamping; infinite when R² = 0.
pub fn optimal_ratio(p: &AllocationProblem) -> f64 {
    ((1.0 - p.r_squared) * p.c1 / (p.r_squared * p.c2)).sqrt()
}

pub fn optimal_allocation(p: &AllocationProblem) -> Result<Allocation> {
    p.check()?;
    let mut warnings = Vec::new();
    let raw = optimal_ratio(p);
    let rho = if raw > 1.0 {
        warnings.push(format!("optimal ratio {raw:.4} exceeds 1; validating every unit"));
        1.0
    } else if raw == 0.0 {
        warnings.push("R² = 1: validation data carry no extra information under the model; keeping the minimum n₂ = 2".into());
        0.0
    } else {
        raw
    };
    let n1c = p.budget / (p.c1 + rho * p.c2);
    let n2c = (rho * n1c).floor() as usize;
    // n₁ ≥ n₂ caps n₂ at C/(C₁ + C₂)
    let top = (p.budget / (p.c1 + p.c2)).floor() as usize;
    let (lo, hi) = if top <= FULL_SCAN {
        (2, top.max(2))
    } else {
        (n2c.saturating_sub(WINDOW).max(2), (n2c + WINDOW).min(top))
    };
    let best = (lo..=hi)
        .filter_map(|n2| {
            let n1 = p.max_n1(n2);
            p.feasible(n1, n2).then(|| (p.objective(n1, n2), n1, n2))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let (objective, n1, n2) = best.ok_or_else(|| {
        Error::InvalidInput(format!(
            "budget {} cannot fund n₂ ≥ 2 validated units with n₁ ≥ n₂",
            p.budget
        ))
    })?;
    Ok(Allocation {
        rho_star: rho,
        n1,
        n2,
        objective,
        cost: n1 as f64 * p.c1 + n2 as f64 * p.c2,
        warnings,
    })
}

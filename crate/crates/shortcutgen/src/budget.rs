//! Perturbation budget: the l-inf ball every delta must live in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    LInf,
}

/// An l-inf budget `epsilon`, kept as an exact rational `num/den` so that
/// grid alignment with 8-bit pixel values can be checked exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    num: u32,
    den: u32,
    norm: Norm,
}

impl PerturbationBudget {
    /// The conventional pixel-space budget, 8/255.
    pub const DEFAULT_NUM: u32 = 8;
    pub const PIXEL_DEN: u32 = 255;

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num >= den {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be in (0, 1), got {num}/{den}"
            )));
        }
        Ok(Self {
            num,
            den,
            norm: Norm::LInf,
        })
    }

    pub fn default_linf() -> Self {
        Self::new(Self::DEFAULT_NUM, Self::PIXEL_DEN).expect("8/255 is valid")
    }

    pub fn epsilon(&self) -> f32 {
        self.num as f32 / self.den as f32
    }

    pub fn epsilon_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn numerator(&self) -> u32 {
        self.num
    }

    pub fn denominator(&self) -> u32 {
        self.den
    }

    pub fn norm(&self) -> Norm {
        self.norm
    }

    /// True when epsilon sits on the 1/255 pixel grid, which is what makes
    /// 8-bit persistence bound-safe.
    pub fn grid_aligned(&self) -> bool {
        self.den == Self::PIXEL_DEN
    }
}

/// One out-of-budget element.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetViolation {
    pub sample_id: String,
    /// Flat element offset within the delta array.
    pub offset: usize,
    pub value: f32,
}

/// Result of scanning a perturbation set against its budget.
#[derive(Debug, Clone, Default)]
pub struct BudgetReport {
    pub max_abs: f32,
    pub violations: Vec<BudgetViolation>,
}

impl BudgetReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// Scan one delta array, appending violations under `sample_id`.
    pub fn scan(&mut self, sample_id: &str, delta: &[f32], epsilon: f32) {
        for (offset, &value) in delta.iter().enumerate() {
            let abs = value.abs();
            if abs > self.max_abs {
                self.max_abs = abs;
            }
            // Exact comparison: the bound is part of the contract, not a tolerance.
            if !(abs <= epsilon) {
                self.violations.push(BudgetViolation {
                    sample_id: sample_id.to_string(),
                    offset,
                    value,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_epsilon() {
        assert!(PerturbationBudget::new(0, 255).is_err());
        assert!(PerturbationBudget::new(255, 255).is_err());
        assert!(PerturbationBudget::new(256, 255).is_err());
        assert!(PerturbationBudget::new(8, 0).is_err());
    }

    #[test]
    fn default_budget_is_8_255() {
        let b = PerturbationBudget::default_linf();
        assert_eq!(b.numerator(), 8);
        assert_eq!(b.denominator(), 255);
        assert!(b.grid_aligned());
        assert_eq!(b.epsilon(), 8.0f32 / 255.0f32);
    }

    #[test]
    fn scan_flags_out_of_budget_elements() {
        let eps = PerturbationBudget::default_linf().epsilon();
        let mut report = BudgetReport::default();
        report.scan("a", &[0.0, eps, -eps], eps);
        assert!(report.ok());
        assert_eq!(report.max_abs, eps);

        // One element at 9/255 must yield exactly one violation.
        let mut report = BudgetReport::default();
        report.scan("b", &[0.0, 9.0 / 255.0, eps], eps);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].offset, 1);
        assert_eq!(report.violations[0].sample_id, "b");
    }

    #[test]
    fn nan_counts_as_violation() {
        let eps = PerturbationBudget::default_linf().epsilon();
        let mut report = BudgetReport::default();
        report.scan("n", &[f32::NAN], eps);
        assert_eq!(report.violations.len(), 1);
    }
}

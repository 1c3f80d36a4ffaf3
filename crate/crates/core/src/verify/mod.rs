//! Independent reference implementations and the two verification suites.
//!
//! [`oracle_suite`] compares library kernels against [`naive`] loops at
//! float64; [`gradcheck_suite`] compares reverse-mode gradients against
//! central differences.

mod gradient;
pub mod naive;
mod oracle;

use serde::{Deserialize, Serialize};

pub use gradient::{gradcheck_suite, tiny_pipeline, END_TO_END_TOLERANCE, OP_TOLERANCE, STEP};
pub use oracle::{oracle_suite, MAX_EXTENT, ORACLE_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    /// Oracle suite: max absolute error. Gradient suite: max relative error.
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Input or parameter with the largest error, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worst: Option<String>,
}

impl CheckOutcome {
    pub fn new(name: &str, cases: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            cases,
            max_error,
            tolerance,
            passed: max_error.is_finite() && max_error <= tolerance,
            worst: None,
        }
    }

    pub fn with_worst(mut self, worst: impl Into<String>) -> Self {
        self.worst = Some(worst.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
    pub max_error: f64,
    pub passed: bool,
}

impl SuiteReport {
    pub fn new(checks: Vec<CheckOutcome>) -> Self {
        Self {
            max_error: checks.iter().map(|c| c.max_error).fold(0.0, f64::max),
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// One aligned line per check.
    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        self.checks
            .iter()
            .map(|c| {
                let worst = match (&c.worst, c.passed) {
                    (Some(w), false) => format!("  worst {w}"),
                    _ => String::new(),
                };
                format!(
                    "{:<width$}  {}  err {:.3e}  tol {:.0e}  cases {}{worst}\n",
                    c.name,
                    if c.passed { "ok  " } else { "FAIL" },
                    c.max_error,
                    c.tolerance,
                    c.cases
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_suite_passes() {
        let r = oracle_suite(1, 8).unwrap();
        assert!(r.passed, "{}", r.table());
    }

    #[test]
    fn gradcheck_suite_passes() {
        let t = std::time::Instant::now();
        for seed in [1, 2, 3] {
            let r = gradcheck_suite(seed).unwrap();
            eprintln!("{}", r.table());
            assert!(r.passed, "{}", r.table());
        }
        eprintln!("{:?}", t.elapsed());
    }
}

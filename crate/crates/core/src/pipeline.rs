//! End-to-end test: choose the split, fit both predictors, compute the
//! statistic and combine over repeated splits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{tune_one_split, tune_two_split, TuneGrid, TuneResult};
use crate::combine::{combine, CombineMethod};
use crate::data::{Dataset, FeatureSet, Loss};
use crate::error::{Error, Result};
use crate::learners::{fit_pair, LearnerSpec};
use crate::rng::{derive_seed, stream};
use crate::splitting::{inference_size, log_ratio_sizes, random_split};
use crate::stats::{one_split_statistic, two_split_statistic, PerturbSpec, TestResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    OneSplit,
    TwoSplit,
}

/// How the split ratio and perturbation size are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Tuning {
    Adaptive(TuneGrid),
    LogRatio { n0: usize, rho: f64 },
    Fixed { zeta: f64, rho: f64 },
}

impl Tuning {
    pub fn log_ratio_default() -> Self {
        Tuning::LogRatio { n0: 1000, rho: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPlan {
    pub method: TestMethod,
    pub tuning: Tuning,
    /// Number of random splits `U`; 1 disables combining.
    pub splits: usize,
    pub combine: CombineMethod,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TestPlan {
    fn default() -> Self {
        Self {
            method: TestMethod::OneSplit,
            tuning: Tuning::Adaptive(TuneGrid::default()),
            splits: 1,
            combine: CombineMethod::Hommel,
            alpha: 0.05,
            seed: 0,
        }
    }
}

impl TestPlan {
    pub fn validate(&self) -> Result<()> {
        if self.splits == 0 {
            return Err(Error::InvalidConfig("need at least one split".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        match &self.tuning {
            Tuning::Adaptive(grid) => grid.validate(),
            Tuning::LogRatio { rho, .. } | Tuning::Fixed { rho, .. } => PerturbSpec::new(*rho, 0).map(|_| ()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub p_value: f64,
    pub splits: Vec<TestResult>,
    pub tuning: Option<TuneResult>,
    pub zeta: f64,
    pub rho: f64,
    pub n: usize,
    pub m: usize,
    /// `None` when a single split was used.
    pub combine: Option<CombineMethod>,
    pub alpha: f64,
    pub reject: bool,
}

/// Reject when `p <= alpha`; `alpha = 0` never rejects.
pub fn decide(p_value: f64, alpha: f64) -> bool {
    alpha > 0.0 && p_value <= alpha
}

/// Runs the full test of `H0: X_S is irrelevant` on `data`.
pub fn run_test(
    data: &Dataset,
    s: &FeatureSet,
    spec: &LearnerSpec,
    loss: &Loss,
    plan: &TestPlan,
) -> Result<TestOutcome> {
    plan.validate()?;
    spec.validate()?;
    s.check_within(data.n_features())?;
    loss.check_outputs(data.n_outputs())?;
    let total = data.n_rows();

    let (m, rho, tuning) = match &plan.tuning {
        Tuning::Adaptive(grid) => {
            let grid = TuneGrid {
                seed: derive_seed(plan.seed, stream::TUNE, 0),
                ..grid.clone()
            };
            let tuned = match plan.method {
                TestMethod::OneSplit => tune_one_split(data, s, spec, loss, &grid)?,
                TestMethod::TwoSplit => tune_two_split(data, s, spec, loss, &grid)?,
            };
            (inference_size(total, tuned.zeta_hat)?, tuned.rho_hat, Some(tuned))
        }
        Tuning::LogRatio { n0, rho } => (log_ratio_sizes(total, *n0)?.1, *rho, None),
        Tuning::Fixed { zeta, rho } => (inference_size(total, *zeta)?, *rho, None),
    };
    let rho = match plan.method {
        TestMethod::OneSplit => rho,
        TestMethod::TwoSplit => 0.0,
    };

    let splits = (0..plan.splits)
        .into_par_iter()
        .map(|u| {
            let u = u as u64;
            let (estimation, inference) = random_split(data, m, derive_seed(plan.seed, stream::SPLIT, u))?;
            let (f_hat, g_hat) = fit_pair(
                &spec.with_seed(derive_seed(plan.seed, stream::FIT, u)),
                &estimation,
                s,
                loss,
            )?;
            let mut result = match plan.method {
                TestMethod::OneSplit => {
                    let perturb = PerturbSpec::new(rho, derive_seed(plan.seed, stream::NOISE, u))?;
                    one_split_statistic(&f_hat, &g_hat, &inference, s, loss, &perturb)?
                }
                TestMethod::TwoSplit => two_split_statistic(&f_hat, &g_hat, &inference, s, loss)?,
            };
            result.config.zeta = Some(m as f64 / total as f64);
            result.config.n = Some(total - m);
            result.config.split_seed = Some(derive_seed(plan.seed, stream::SPLIT, u));
            Ok(result)
        })
        .collect::<Result<Vec<_>>>()?;

    let (p_value, combine_method) = if splits.len() == 1 {
        (splits[0].p_value, None)
    } else {
        let ps: Vec<f64> = splits.iter().map(|r| r.p_value).collect();
        (combine(&ps, plan.combine)?, Some(plan.combine))
    };
    Ok(TestOutcome {
        p_value,
        splits,
        tuning,
        zeta: m as f64 / total as f64,
        rho,
        n: total - m,
        m,
        combine: combine_method,
        alpha: plan.alpha,
        reject: decide(p_value, plan.alpha),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_rule() {
        assert!(decide(0.05, 0.05));
        assert!(!decide(0.0500001, 0.05));
        assert!(!decide(0.0, 0.0));
        assert!(decide(1.0, 1.0));
    }

    #[test]
    fn plan_validation() {
        assert!(TestPlan::default().validate().is_ok());
        let bad = TestPlan {
            splits: 0,
            ..TestPlan::default()
        };
        assert!(bad.validate().is_err());
        let bad = TestPlan {
            tuning: Tuning::Fixed { zeta: 0.2, rho: -1.0 },
            ..TestPlan::default()
        };
        assert!(bad.validate().is_err());
    }
}

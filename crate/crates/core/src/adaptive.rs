//! Data-adaptive choice of the splitting ratio and perturbation size.
//!
//! For a candidate ratio the hypothesized block is permuted in both the
//! estimation and the inference sample, which makes the null hold by
//! construction. One model pair is fit on the permuted estimation sample and
//! evaluated on `T` independently permuted copies of the inference sample;
//! the share of those statistics that reject at level `alpha` estimates the
//! Type I error of that configuration. Ratios are scanned in ascending order,
//! perturbation sizes in ascending order within each ratio, and the first
//! configuration whose estimate is at most `alpha` wins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSet, Loss};
use crate::error::{Error, Result};
use crate::learners::{fit_pair, LearnerSpec};
use crate::rng::{derive_seed, stream};
use crate::splitting::{inference_size, permute_feature_block, random_split};
use crate::stats::{inference_losses, one_split_from_losses, two_split_from_losses, PerturbSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    /// Candidate inference fractions `m / N`, strictly ascending in (0, 1).
    pub zetas: Vec<f64>,
    /// Candidate perturbation sizes, strictly ascending and positive.
    pub rhos: Vec<f64>,
    /// Number of permuted inference samples per ratio.
    pub permutations: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TuneGrid {
    fn default() -> Self {
        Self {
            zetas: vec![0.2, 0.4, 0.6, 0.8],
            rhos: vec![0.01, 0.05, 0.1, 0.5, 1.0],
            permutations: 100,
            alpha: 0.05,
            seed: 0,
        }
    }
}

fn strictly_ascending(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl TuneGrid {
    pub fn validate(&self) -> Result<()> {
        if self.zetas.is_empty() || !strictly_ascending(&self.zetas) {
            return Err(Error::InvalidConfig(
                "ratio grid must be non-empty and strictly ascending".into(),
            ));
        }
        if self.zetas.iter().any(|&z| !(z > 0.0 && z < 1.0)) {
            return Err(Error::InvalidConfig("ratios must lie in (0, 1)".into()));
        }
        if self.permutations == 0 {
            return Err(Error::InvalidConfig("need at least one permutation".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    fn validate_rhos(&self) -> Result<()> {
        if self.rhos.is_empty() || !strictly_ascending(&self.rhos) {
            return Err(Error::InvalidConfig(
                "perturbation grid must be non-empty and strictly ascending".into(),
            ));
        }
        if self.rhos.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidConfig("perturbation sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub zeta_hat: f64,
    /// Zero for the two-split test.
    pub rho_hat: f64,
    pub estimated_type1: f64,
    /// Number of `(zeta, rho)` cells whose Type I error was estimated.
    pub evaluations: usize,
    /// False when no cell reached `alpha`; the cell with the smallest
    /// estimate is returned instead.
    pub controlled: bool,
}

/// Losses of one permuted fit evaluated on `T` permuted inference samples.
struct PermutedLosses {
    full: Vec<Vec<f64>>,
    masked: Vec<Vec<f64>>,
    seed: u64,
}

impl PermutedLosses {
    fn build(
        data: &Dataset,
        s: &FeatureSet,
        spec: &LearnerSpec,
        loss: &Loss,
        zeta: f64,
        permutations: usize,
        seed: u64,
    ) -> Result<Self> {
        let m = inference_size(data.n_rows(), zeta)?;
        let (estimation, inference) = random_split(data, m, derive_seed(seed, stream::SPLIT, 0))?;
        let estimation = permute_feature_block(&estimation, s, derive_seed(seed, stream::PERMUTE, 0))?;
        let (f_hat, g_hat) = fit_pair(
            &spec.with_seed(derive_seed(seed, stream::FIT, 0)),
            &estimation,
            s,
            loss,
        )?;
        let pairs = (0..permutations)
            .into_par_iter()
            .map(|t| {
                let permuted = permute_feature_block(
                    &inference,
                    s,
                    derive_seed(seed, stream::PERMUTE, t as u64 + 1),
                )?;
                inference_losses(&f_hat, &g_hat, &permuted, s, loss)
            })
            .collect::<Result<Vec<_>>>()?;
        let (full, masked) = pairs.into_iter().unzip();
        Ok(Self { full, masked, seed })
    }

    fn one_split_rate(&self, rho: f64, alpha: f64) -> Result<f64> {
        let mut rejections = 0usize;
        for (t, (full, masked)) in self.full.iter().zip(&self.masked).enumerate() {
            let perturb = PerturbSpec::new(rho, derive_seed(self.seed, stream::NOISE, t as u64))?;
            let r = one_split_from_losses(full, masked, &perturb)?;
            if r.p_value <= alpha {
                rejections += 1;
            }
        }
        Ok(rejections as f64 / self.full.len() as f64)
    }

    fn two_split_rate(&self, alpha: f64) -> Result<f64> {
        let mut rejections = 0usize;
        for (full, masked) in self.full.iter().zip(&self.masked) {
            if two_split_from_losses(full, masked)?.p_value <= alpha {
                rejections += 1;
            }
        }
        Ok(rejections as f64 / self.full.len() as f64)
    }
}

/// Estimated Type I error of the one-split test at `(zeta, rho)` from `T`
/// permuted inference samples.
#[allow(clippy::too_many_arguments)]
pub fn estimate_type1(
    data: &Dataset,
    s: &FeatureSet,
    spec: &LearnerSpec,
    loss: &Loss,
    zeta: f64,
    rho: f64,
    permutations: usize,
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    check_common(permutations, alpha)?;
    PermutedLosses::build(data, s, spec, loss, zeta, permutations, seed)?.one_split_rate(rho, alpha)
}

/// Estimated Type I error of the two-split test at `zeta`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_type1_two_split(
    data: &Dataset,
    s: &FeatureSet,
    spec: &LearnerSpec,
    loss: &Loss,
    zeta: f64,
    permutations: usize,
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    check_common(permutations, alpha)?;
    PermutedLosses::build(data, s, spec, loss, zeta, permutations, seed)?.two_split_rate(alpha)
}

fn check_common(permutations: usize, alpha: f64) -> Result<()> {
    if permutations == 0 {
        return Err(Error::InvalidConfig("need at least one permutation".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Seed used for the `i`-th ratio of a grid.
pub fn ratio_seed(grid_seed: u64, i: usize) -> u64 {
    derive_seed(grid_seed, stream::TUNE, i as u64)
}

/// Picks `(zeta, rho)` for the one-split test.
pub fn tune_one_split(
    data: &Dataset,
    s: &FeatureSet,
    spec: &LearnerSpec,
    loss: &Loss,
    grid: &TuneGrid,
) -> Result<TuneResult> {
    grid.validate()?;
    grid.validate_rhos()?;
    let mut evaluations = 0;
    let mut best: Option<TuneResult> = None;
    for (i, &zeta) in grid.zetas.iter().enumerate() {
        let cell = PermutedLosses::build(data, s, spec, loss, zeta, grid.permutations, ratio_seed(grid.seed, i))?;
        for &rho in &grid.rhos {
            evaluations += 1;
            let err = cell.one_split_rate(rho, grid.alpha)?;
            if err <= grid.alpha {
                return Ok(TuneResult {
                    zeta_hat: zeta,
                    rho_hat: rho,
                    estimated_type1: err,
                    evaluations,
                    controlled: true,
                });
            }
            if best.as_ref().is_none_or(|b| err < b.estimated_type1) {
                best = Some(TuneResult {
                    zeta_hat: zeta,
                    rho_hat: rho,
                    estimated_type1: err,
                    evaluations: 0,
                    controlled: false,
                });
            }
        }
    }
    let mut fallback = best.expect("grid is non-empty");
    fallback.evaluations = evaluations;
    Ok(fallback)
}

/// Picks `zeta` for the two-split test.
pub fn tune_two_split(
    data: &Dataset,
    s: &FeatureSet,
    spec: &LearnerSpec,
    loss: &Loss,
    grid: &TuneGrid,
) -> Result<TuneResult> {
    grid.validate()?;
    let mut evaluations = 0;
    let mut best: Option<TuneResult> = None;
    for (i, &zeta) in grid.zetas.iter().enumerate() {
        let cell = PermutedLosses::build(data, s, spec, loss, zeta, grid.permutations, ratio_seed(grid.seed, i))?;
        evaluations += 1;
        let err = cell.two_split_rate(grid.alpha)?;
        if err <= grid.alpha {
            return Ok(TuneResult {
                zeta_hat: zeta,
                rho_hat: 0.0,
                estimated_type1: err,
                evaluations,
                controlled: true,
            });
        }
        if best.as_ref().is_none_or(|b| err < b.estimated_type1) {
            best = Some(TuneResult {
                zeta_hat: zeta,
                rho_hat: 0.0,
                estimated_type1: err,
                evaluations: 0,
                controlled: false,
            });
        }
    }
    let mut fallback = best.expect("grid is non-empty");
    fallback.evaluations = evaluations;
    Ok(fallback)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        assert!(TuneGrid::default().validate().is_ok());
        let bad = TuneGrid {
            zetas: vec![0.4, 0.2],
            ..TuneGrid::default()
        };
        assert!(bad.validate().is_err());
        let bad = TuneGrid {
            zetas: vec![0.2, 1.0],
            ..TuneGrid::default()
        };
        assert!(bad.validate().is_err());
        let bad = TuneGrid {
            rhos: vec![],
            ..TuneGrid::default()
        };
        assert!(bad.validate_rhos().is_err());
        let bad = TuneGrid {
            permutations: 0,
            ..TuneGrid::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rate_is_count_over_t() {
        // deltas strongly negative in 5 of 100 permuted samples
        let mut full = Vec::new();
        let mut masked = Vec::new();
        for t in 0..100 {
            let shift = if t < 5 { -10.0 } else { 0.0 };
            full.push((0..20).map(|j| shift + (j % 3) as f64).collect::<Vec<_>>());
            masked.push(vec![0.0; 20]);
        }
        let cell = PermutedLosses { full, masked, seed: 3 };
        // the shifted samples give statistic ~ -44 and the others ~ +4.4
        assert_eq!(cell.one_split_rate(0.01, 0.05).unwrap(), 0.05);
        assert_eq!(cell.two_split_rate(0.05).unwrap(), 0.05);
    }

    #[test]
    fn single_permutation_rate_is_indicator() {
        let cell = PermutedLosses {
            full: vec![vec![1.0, 2.0, 3.0, 2.5]],
            masked: vec![vec![0.0; 4]],
            seed: 0,
        };
        let r = cell.one_split_rate(0.01, 0.05).unwrap();
        assert!(r == 0.0 || r == 1.0);
    }
}

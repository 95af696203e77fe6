//! Estimation/inference partitioning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSet};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Sizes of the estimation (`n`) and inference (`m`) samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
}

impl SplitPlan {
    pub fn new(n: usize, m: usize, seed: u64) -> Result<Self> {
        if n < 1 || m < 2 {
            return Err(Error::InvalidSplit(format!(
                "need n >= 1 and m >= 2, got n = {n}, m = {m}"
            )));
        }
        Ok(Self { n, m, seed })
    }

    /// Plan with `m = round(zeta * total)`.
    pub fn from_ratio(total: usize, zeta: f64, seed: u64) -> Result<Self> {
        let m = inference_size(total, zeta)?;
        Self::new(total - m, m, seed)
    }

    /// Inference fraction `m / N`.
    pub fn zeta(&self) -> f64 {
        self.m as f64 / (self.n + self.m) as f64
    }

    pub fn apply(&self, data: &Dataset) -> Result<(Dataset, Dataset)> {
        if data.n_rows() != self.n + self.m {
            return Err(Error::InvalidSplit(format!(
                "plan covers {} rows, dataset has {}",
                self.n + self.m,
                data.n_rows()
            )));
        }
        random_split(data, self.m, self.seed)
    }
}

/// `round(zeta * total)`, required to leave `1 <= n` and `m >= 2`.
pub fn inference_size(total: usize, zeta: f64) -> Result<usize> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::InvalidSplit(format!("ratio {zeta} outside (0, 1)")));
    }
    let m = (zeta * total as f64).round() as usize;
    if m < 2 || m + 1 > total {
        return Err(Error::InvalidSplit(format!(
            "ratio {zeta} on {total} rows gives inference size {m}"
        )));
    }
    Ok(m)
}

/// Root of an increasing function on `[lo, hi]` by bisection, stopping once
/// `|f(x)| <= tol` or the bracket cannot shrink further.
pub fn bisect_increasing<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo > 0.0 || fhi < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "root not bracketed: f({lo}) = {flo}, f({hi}) = {fhi}"
        )));
    }
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() <= tol || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Split sizes from the log-ratio rule: `n = ceil(x0)`, `m = N - n`, where
/// `x0` solves `x + N0 / (2 ln(N0 / 2)) * ln(x) = N`.
pub fn log_ratio_sizes(total: usize, n0: usize) -> Result<(usize, usize)> {
    if n0 < 4 {
        return Err(Error::InvalidConfig(format!("N0 must be >= 4, got {n0}")));
    }
    if total < n0 {
        return Err(Error::SampleTooSmall(format!(
            "log-ratio split needs N >= N0 = {n0}, got {total}"
        )));
    }
    let x0 = log_ratio_root(total, n0)?;
    // Exact integer roots (e.g. N = N0 gives x0 = N0 / 2) must not be pushed
    // up by round-off in the bisection.
    let nearest = x0.round();
    let n = if (x0 - nearest).abs() <= 1e-7 {
        nearest as usize
    } else {
        x0.ceil() as usize
    };
    let m = total - n;
    if n < 1 || m < 2 {
        return Err(Error::SampleTooSmall(format!(
            "log-ratio split of {total} rows leaves n = {n}, m = {m}"
        )));
    }
    Ok((n, m))
}

/// The real root `x0` behind [`log_ratio_sizes`].
pub fn log_ratio_root(total: usize, n0: usize) -> Result<f64> {
    let c = n0 as f64 / (2.0 * (n0 as f64 / 2.0).ln());
    let target = total as f64;
    bisect_increasing(|x| x + c * x.ln() - target, 1.0, target, 1e-9)
}

/// Shuffles rows with a seeded permutation; the last `m` rows form the
/// inference sample.
pub fn random_split(data: &Dataset, m: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let total = data.n_rows();
    if m < 2 || m + 1 > total {
        return Err(Error::InvalidSplit(format!(
            "inference size {m} invalid for {total} rows"
        )));
    }
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let (est, inf) = idx.split_at(total - m);
    Ok((data.select_rows(est), data.select_rows(inf)))
}

/// Row-permutes the columns in `s` jointly with one seeded permutation.
pub fn permute_feature_block(data: &Dataset, s: &FeatureSet, seed: u64) -> Result<Dataset> {
    s.check_within(data.n_features())?;
    let n = data.n_rows();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    let src = data.features();
    let mut features = src.clone();
    for (i, &p) in perm.iter().enumerate() {
        for &j in s.indices() {
            features.set(i, j, src.get(p, j));
        }
    }
    Ok(data.with_features(features))
}

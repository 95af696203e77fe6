//! Test statistics, the Gaussian helpers they rely on, and the limiting
//! power formulas.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::combine::CombineMethod;
use crate::data::{Dataset, FeatureSet, Loss};
use crate::error::{Error, Result};
use crate::learners::Model;
use crate::rng::rng_from_seed;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    let x = Normal::standard().inverse_cdf(p);
    if !x.is_finite() {
        return x;
    }
    // one Newton step against the more accurate CDF
    let density = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    if density > 0.0 {
        x - (normal_cdf(x) - p) / density
    } else {
        x
    }
}

/// `z_alpha = Phi^{-1}(1 - alpha)`.
pub fn z_alpha(alpha: f64) -> f64 {
    -normal_quantile(alpha)
}

const GL_POINTS: usize = 20;

/// Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre() -> &'static ([f64; GL_POINTS], [f64; GL_POINTS]) {
    static TABLE: OnceLock<([f64; GL_POINTS], [f64; GL_POINTS])> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = GL_POINTS;
        let mut x = [0.0; GL_POINTS];
        let mut w = [0.0; GL_POINTS];
        for i in 0..n.div_ceil(2) {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, 0.0);
                for j in 0..n {
                    let p2 = p1;
                    p1 = p0;
                    p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
                }
                dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
                let dz = p0 / dp;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            x[i] = -z;
            x[n - 1 - i] = z;
            w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
            w[n - 1 - i] = w[i];
        }
        (x, w)
    })
}

/// Owen's T function `T(h, a) = 1/(2 pi) * int_0^a exp(-h^2 (1 + x^2) / 2) / (1 + x^2) dx`.
///
/// For `|a| <= 1` the integral is evaluated by composite Gauss-Legendre
/// quadrature with panels no wider than `1/h`; larger `|a|` goes through
/// `T(h, a) = (Phi(h) + Phi(ah)) / 2 - Phi(h) Phi(ah) - T(ah, 1/a)`.
pub fn owens_t(h: f64, a: f64) -> f64 {
    let h = h.abs();
    if a == 0.0 {
        return 0.0;
    }
    if a < 0.0 {
        return -owens_t(h, -a);
    }
    if a > 1.0 {
        let ah = a * h;
        let (ph, pah) = (normal_cdf(h), normal_cdf(ah));
        return 0.5 * (ph + pah) - ph * pah - owens_t(ah, 1.0 / a);
    }
    let outer = (-0.5 * h * h).exp();
    if outer == 0.0 {
        return 0.0;
    }
    let panels = 1 + (h * a).floor() as usize;
    let width = a / panels as f64;
    let (nodes, weights) = gauss_legendre();
    let mut sum = 0.0;
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * width;
        let half = 0.5 * width;
        for (t, w) in nodes.iter().zip(weights) {
            let x = mid + half * t;
            let x2 = x * x;
            sum += w * half * (-0.5 * h * h * x2).exp() / (1.0 + x2);
        }
    }
    outer * sum / (2.0 * PI)
}

/// Perturbation size and the seed of its Gaussian noise stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub rho: f64,
    pub noise_seed: u64,
}

impl PerturbSpec {
    pub fn new(rho: f64, noise_seed: u64) -> Result<Self> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "perturbation size must be finite and >= 0, got {rho}"
            )));
        }
        Ok(Self { rho, noise_seed })
    }

    pub fn none() -> Self {
        Self {
            rho: 0.0,
            noise_seed: 0,
        }
    }
}

/// Configuration that produced a [`TestResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub rho: f64,
    pub zeta: Option<f64>,
    pub n: Option<usize>,
    pub m: usize,
    pub splits: usize,
    pub combine: Option<CombineMethod>,
    pub split_seed: Option<u64>,
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub delta_mean: f64,
    pub delta_sd: f64,
    /// Number of loss differences behind the statistic.
    pub m_used: usize,
    pub config: RunConfig,
}

/// Mean, sample sd (denominator `k - 1`) and standardized sum of a set of
/// loss differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaSummary {
    pub statistic: f64,
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

/// `sum(deltas) / (sqrt(k) * sd)`.
pub fn standardized_sum(deltas: &[f64]) -> Result<DeltaSummary> {
    let k = deltas.len();
    if k < 2 {
        return Err(Error::SampleTooSmall(format!(
            "need at least 2 loss differences, got {k}"
        )));
    }
    if deltas.iter().all(|&d| d == deltas[0]) {
        return Err(Error::DegenerateVariance);
    }
    let mean = deltas.iter().sum::<f64>() / k as f64;
    let ss: f64 = deltas.iter().map(|d| (d - mean) * (d - mean)).sum();
    let sd = (ss / (k - 1) as f64).sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::DegenerateVariance);
    }
    Ok(DeltaSummary {
        statistic: (k as f64).sqrt() * mean / sd,
        mean,
        sd,
        count: k,
    })
}

fn result_from(summary: DeltaSummary, rho: f64, noise_seed: Option<u64>, m: usize) -> TestResult {
    TestResult {
        statistic: summary.statistic,
        p_value: normal_cdf(summary.statistic),
        delta_mean: summary.mean,
        delta_sd: summary.sd,
        m_used: summary.count,
        config: RunConfig {
            rho,
            m,
            splits: 1,
            noise_seed,
            ..RunConfig::default()
        },
    }
}

/// Per-row losses of the full model on `X` and the masked model on `Z`.
pub fn inference_losses(
    f_hat: &dyn Model,
    g_hat: &dyn Model,
    inference: &Dataset,
    s: &FeatureSet,
    loss: &Loss,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let masked = inference.mask(s)?;
    let full = loss.eval_rows(&f_hat.predict(inference.features())?, inference.outcomes())?;
    let reduced = loss.eval_rows(&g_hat.predict(masked.features())?, masked.outcomes())?;
    Ok((full, reduced))
}

/// One-split statistic from precomputed per-row losses.
pub fn one_split_from_losses(full: &[f64], masked: &[f64], perturb: &PerturbSpec) -> Result<TestResult> {
    if full.len() != masked.len() {
        return Err(Error::LossShape(format!(
            "{} full-model losses vs {} masked-model losses",
            full.len(),
            masked.len()
        )));
    }
    let m = full.len();
    if m < 2 {
        return Err(Error::SampleTooSmall(format!("inference sample of {m} rows")));
    }
    let mut deltas: Vec<f64> = full.iter().zip(masked).map(|(a, b)| a - b).collect();
    if perturb.rho > 0.0 {
        let mut rng = rng_from_seed(perturb.noise_seed);
        for d in &mut deltas {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *d += perturb.rho * eps;
        }
    }
    let summary = standardized_sum(&deltas)?;
    Ok(result_from(summary, perturb.rho, Some(perturb.noise_seed), m))
}

/// One-split statistic: loss differences over the whole inference sample
/// plus `rho * N(0, 1)` noise, standardized; `p = Phi(statistic)`.
pub fn one_split_statistic(
    f_hat: &dyn Model,
    g_hat: &dyn Model,
    inference: &Dataset,
    s: &FeatureSet,
    loss: &Loss,
    perturb: &PerturbSpec,
) -> Result<TestResult> {
    if inference.n_rows() < 2 {
        return Err(Error::SampleTooSmall(format!(
            "inference sample of {} rows",
            inference.n_rows()
        )));
    }
    let (full, masked) = inference_losses(f_hat, g_hat, inference, s, loss)?;
    one_split_from_losses(&full, &masked, perturb)
}

/// Two-split statistic from per-row losses over the whole inference sample:
/// full-model losses of the first half against masked-model losses of the
/// second half, paired by position. An odd trailing row is dropped.
pub fn two_split_from_losses(full: &[f64], masked: &[f64]) -> Result<TestResult> {
    if full.len() != masked.len() {
        return Err(Error::LossShape(format!(
            "{} full-model losses vs {} masked-model losses",
            full.len(),
            masked.len()
        )));
    }
    let m = full.len();
    if m < 4 {
        return Err(Error::SampleTooSmall(format!(
            "two-split test needs m >= 4, got {m}"
        )));
    }
    let h = m / 2;
    let deltas: Vec<f64> = full[..h]
        .iter()
        .zip(&masked[h..2 * h])
        .map(|(a, b)| a - b)
        .collect();
    let summary = standardized_sum(&deltas)?;
    Ok(result_from(summary, 0.0, None, m))
}

/// Two-split statistic on an inference sample.
pub fn two_split_statistic(
    f_hat: &dyn Model,
    g_hat: &dyn Model,
    inference: &Dataset,
    s: &FeatureSet,
    loss: &Loss,
) -> Result<TestResult> {
    let m = inference.n_rows();
    if m < 4 {
        return Err(Error::SampleTooSmall(format!(
            "two-split test needs m >= 4, got {m}"
        )));
    }
    let h = m / 2;
    let first: Vec<usize> = (0..h).collect();
    let second: Vec<usize> = (h..2 * h).collect();
    let half1 = inference.select_rows(&first);
    let half2 = inference.select_rows(&second).mask(s)?;
    let full = loss.eval_rows(&f_hat.predict(half1.features())?, half1.outcomes())?;
    let masked = loss.eval_rows(&g_hat.predict(half2.features())?, half2.outcomes())?;
    let deltas: Vec<f64> = full.iter().zip(&masked).map(|(a, b)| a - b).collect();
    let summary = standardized_sum(&deltas)?;
    Ok(result_from(summary, 0.0, None, m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerVariant {
    OneSplit,
    TwoSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMethod {
    QOrder,
    Hommel,
}

fn check_power_args(delta: f64, sigma: f64, alpha: f64) -> Result<()> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidConfig(format!("delta must be finite and >= 0, got {delta}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Local limiting power: `Phi(delta / sigma - z_alpha)` for the one-split
/// test and `Phi(delta / (sqrt(2) sigma) - z_alpha)` for the two-split test.
pub fn theoretical_power(delta: f64, sigma: f64, alpha: f64, variant: PowerVariant) -> Result<f64> {
    check_power_args(delta, sigma, alpha)?;
    if delta == 0.0 {
        return Ok(alpha);
    }
    let scale = match variant {
        PowerVariant::OneSplit => sigma,
        PowerVariant::TwoSplit => SQRT_2 * sigma,
    };
    Ok(normal_cdf(delta / scale - z_alpha(alpha)))
}

/// The `Gamma` term of the combined-test power bound for order `q` of `u`.
pub fn combined_power_gamma(delta: f64, sigma: f64, u: usize, q: usize) -> f64 {
    let x = delta / (SQRT_2 * sigma);
    let px = normal_cdf(x);
    let spread = (px - px * px - 2.0 * owens_t(-x, 3f64.sqrt() / 3.0)).max(0.0);
    let coef = ((q - 1) as f64 / (u - q + 1) as f64).sqrt();
    normal_cdf(-x) + coef * spread.sqrt()
}

/// Lower bound on the limiting power of a combined test over `u` splits.
///
/// `QOrder` evaluates `1 - min(u Gamma_q / (alpha q), 1)` for the given `q`;
/// `Hommel` takes `1 - min_q min(C_u u Gamma_q / (alpha q), 1)` with
/// `C_u = sum_{q=1}^u 1/q`, ignoring the `q` argument.
pub fn combined_power_bound(
    delta: f64,
    sigma: f64,
    alpha: f64,
    u: usize,
    q: usize,
    method: BoundMethod,
) -> Result<f64> {
    check_power_args(delta, sigma, alpha)?;
    if u < 2 {
        return Err(Error::InvalidConfig(format!("need U >= 2 splits, got {u}")));
    }
    if !(1..=u).contains(&q) {
        return Err(Error::InvalidConfig(format!("q = {q} outside [1, {u}]")));
    }
    let bound = match method {
        BoundMethod::QOrder => {
            let g = combined_power_gamma(delta, sigma, u, q);
            1.0 - (u as f64 * g / (alpha * q as f64)).min(1.0)
        }
        BoundMethod::Hommel => {
            let c_u: f64 = (1..=u).map(|k| 1.0 / k as f64).sum();
            let worst = (1..=u)
                .map(|k| {
                    let g = combined_power_gamma(delta, sigma, u, k);
                    (c_u * u as f64 * g / (alpha * k as f64)).min(1.0)
                })
                .fold(f64::INFINITY, f64::min);
            1.0 - worst
        }
    };
    Ok(bound.max(0.0))
}

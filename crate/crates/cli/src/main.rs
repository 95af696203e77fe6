mod output;

use blackbox_sig::sim::{self, preset, write_rows, Simulation, Study, StudyReport};
use blackbox_sig::stats::{combined_power_bound, theoretical_power, BoundMethod, PowerVariant};
use blackbox_sig::*;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use std::path::PathBuf;
use std::process::ExitCode;

/// Sample-splitting significance tests for feature relevance.
#[derive(Parser)]
#[command(name = "blackbox-sig", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test whether a feature set is relevant on a CSV dataset.
    Test(TestArgs),
    /// Estimate Type I error and power on simulated designs.
    Simulate(SimulateArgs),
    /// Evaluate the theoretical power formulas.
    Power(PowerArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    OneSplit,
    TwoSplit,
}

#[derive(Clone, Copy, ValueEnum)]
enum TuningKind {
    Adaptive,
    LogRatio,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    SquaredError,
    CrossEntropy,
    ZeroOne,
}

#[derive(Args)]
struct SeedArg {
    /// Base seed; falls back to BLACKBOX_SIG_SEED, then 0.
    #[arg(long, env = "BLACKBOX_SIG_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct TestArgs {
    /// Input CSV.
    data: PathBuf,
    /// Hypothesized features: indices, inclusive ranges or column names, e.g. "0-4,9".
    #[arg(long)]
    features: String,
    /// Response column (index or name).
    #[arg(long)]
    response: String,
    /// The CSV has no header row.
    #[arg(long)]
    no_header: bool,
    #[arg(long, value_enum, default_value = "one-split")]
    method: Method,
    #[arg(long, value_enum, default_value = "adaptive")]
    tuning: TuningKind,
    /// Number of repeated splits U.
    #[arg(long, short = 'u', default_value_t = 5)]
    splits: usize,
    /// P-value combiner: hommel, bonferroni, median, cauchy, harmonic,
    /// first-quantile, q-order:<q>, quantile:<gamma>.
    #[arg(long, default_value = "hommel")]
    combine: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Candidate inference ratios for adaptive tuning.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8")]
    zetas: Vec<f64>,
    /// Candidate perturbation sizes for adaptive tuning.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1,0.5,1")]
    rhos: Vec<f64>,
    /// Permutations per tuning cell.
    #[arg(long, default_value_t = 100)]
    permutations: usize,
    /// Reference size N0 for log-ratio splitting.
    #[arg(long, default_value_t = 1000)]
    n0: usize,
    /// Perturbation size for log-ratio or fixed tuning.
    #[arg(long, default_value_t = 0.01)]
    rho: f64,
    /// Inference ratio for fixed tuning.
    #[arg(long, default_value_t = 0.2)]
    zeta: f64,
    #[arg(long, value_enum, default_value = "squared-error")]
    loss: LossArg,
    /// Hidden layer widths, e.g. "32,32".
    #[arg(long, value_delimiter = ',', default_value = "32")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct SimulateArgs {
    /// Named design: 1-6, misspecified, perturbation-ablation, permutation.
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    example: Option<String>,
    /// Simulation config JSON (one object or an array).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Paper-scale sizes instead of desk scale.
    #[arg(long)]
    full_scale: bool,
    /// Repetitions per case.
    #[arg(long)]
    reps: Option<usize>,
    /// Sample size N.
    #[arg(long = "n")]
    n_samples: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Repeated splits U.
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    combine: Option<String>,
    /// Permutations per tuning cell.
    #[arg(long)]
    permutations: Option<usize>,
    /// Keep only simulations whose label contains this text.
    #[arg(long)]
    filter: Option<String>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct PowerArgs {
    /// Signal size(s) delta, comma separated.
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    delta: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Add the combined-test lower bounds.
    #[arg(long)]
    combined: bool,
    #[arg(long, short = 'u', default_value_t = 5)]
    splits: usize,
    /// Order q for the combined bounds.
    #[arg(long, default_value_t = 3)]
    q: usize,
}

enum Failure {
    BadInput(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::DegenerateVariance | Error::TrainingDiverged { .. } => Failure::Runtime(e),
            other => Failure::BadInput(other.to_string()),
        }
    }
}

fn bad(msg: impl Into<String>) -> Failure {
    Failure::BadInput(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    let result = match cli.command {
        Command::Test(a) => cmd_test(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Power(a) => cmd_power(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::BadInput(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            let kind = match e {
                Error::DegenerateVariance => "degenerate-variance",
                Error::TrainingDiverged { .. } => "training-diverged",
                _ => "runtime",
            };
            print!("{}", output::to_json(&json!({"schema": "1", "error": {"kind": kind, "message": e.to_string()}})));
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn cmd_test(a: TestArgs) -> std::result::Result<(), Failure> {
    let seed = a.seed.seed.unwrap_or(0);
    let loss = match a.loss {
        LossArg::SquaredError => Loss::squared_error(),
        LossArg::CrossEntropy => Loss::cross_entropy(),
        LossArg::ZeroOne => Loss::zero_one(),
    };
    let opts = CsvOptions {
        response: ColumnRef::parse(&a.response),
        has_header: !a.no_header,
        classification: loss.is_classification(),
    };
    let data = read_csv_path(&a.data, &opts)?;
    let s = FeatureSet::parse(&a.features, data.column_names())?;
    s.check_within(data.n_features())?;
    let combine_method: CombineMethod = a.combine.parse()?;

    let spec = LearnerSpec {
        hidden: a.hidden.clone(),
        output: if loss.is_classification() { OutputActivation::Softmax } else { OutputActivation::Identity },
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        patience: a.patience,
        ..LearnerSpec::default()
    };
    let tuning = match a.tuning {
        TuningKind::Adaptive => Tuning::Adaptive(TuneGrid {
            zetas: a.zetas.clone(),
            rhos: a.rhos.clone(),
            permutations: a.permutations,
            alpha: a.alpha,
            seed: 0,
        }),
        TuningKind::LogRatio => Tuning::LogRatio { n0: a.n0, rho: a.rho },
        TuningKind::Fixed => Tuning::Fixed { zeta: a.zeta, rho: a.rho },
    };
    let plan = TestPlan {
        method: match a.method {
            Method::OneSplit => TestMethod::OneSplit,
            Method::TwoSplit => TestMethod::TwoSplit,
        },
        tuning,
        splits: a.splits,
        combine: combine_method,
        alpha: a.alpha,
        seed,
    };
    let out = run_test(&data, &s, &spec, &loss, &plan)?;

    let mut doc = json!({
        "schema": "1",
        "method": match a.method { Method::OneSplit => "one-split", Method::TwoSplit => "two-split" },
        "tuning": match a.tuning {
            TuningKind::Adaptive => "adaptive",
            TuningKind::LogRatio => "log-ratio",
            TuningKind::Fixed => "fixed",
        },
        "features": s.indices(),
        "p_value": out.p_value,
        "statistics": out.splits.iter().map(|r| r.statistic).collect::<Vec<_>>(),
        "rho": out.rho,
        "zeta": out.zeta,
        "n": out.n,
        "m": out.m,
        "U": out.splits.len(),
        "alpha": out.alpha,
        "reject": out.reject,
        "decision": if out.reject { "reject" } else { "fail to reject" },
        "seed": seed,
    });
    let obj = doc.as_object_mut().unwrap();
    if let Some(c) = out.combine {
        obj.insert("combine".into(), json!(c.to_string()));
        obj.insert("split_p_values".into(), json!(out.splits.iter().map(|r| r.p_value).collect::<Vec<_>>()));
    }
    if let Some(t) = &out.tuning {
        obj.insert(
            "tuning_result".into(),
            json!({
                "zeta": t.zeta_hat,
                "rho": t.rho_hat,
                "estimated_type1": t.estimated_type1,
                "evaluations": t.evaluations,
                "controlled": t.controlled,
            }),
        );
    }
    print!("{}", output::to_json(&doc));
    Ok(())
}

fn load_simulations(a: &SimulateArgs) -> std::result::Result<(String, Vec<Simulation>), Failure> {
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| bad(format!("malformed config: {e}")))?;
        let sims = if value.is_array() {
            serde_json::from_value::<Vec<Simulation>>(value)
        } else {
            serde_json::from_value::<Simulation>(value).map(|s| vec![s])
        }
        .map_err(|e| bad(format!("malformed config: {e}")))?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "config".into());
        return Ok((stem, sims));
    }
    let name = a.example.clone().unwrap();
    Ok((format!("example-{name}"), preset(&name, a.full_scale)?))
}

fn cmd_simulate(a: SimulateArgs) -> std::result::Result<(), Failure> {
    let (stem, mut sims) = load_simulations(&a)?;
    if let Some(f) = &a.filter {
        sims.retain(|s| s.label.contains(f.as_str()));
    }
    if sims.is_empty() {
        return Err(bad("no simulations selected"));
    }
    let combine_method = a.combine.as_deref().map(str::parse::<CombineMethod>).transpose()?;
    if let Some(alpha) = a.alpha {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(bad(format!("alpha must lie in (0, 1), got {alpha}")));
        }
    }
    for s in &mut sims {
        if let Some(r) = a.reps {
            if r == 0 {
                return Err(bad("--reps must be at least 1"));
            }
            s.set_reps(r);
        }
        if let Some(n) = a.n_samples {
            s.set_n_samples(n);
        }
        if let Some(alpha) = a.alpha {
            s.alpha = alpha;
        }
        if let Some(seed) = a.seed.seed {
            s.seed = seed;
        }
        if let Some(plan) = s.plan_mut() {
            if let Some(u) = a.splits {
                plan.splits = u;
            }
            if let Some(c) = combine_method {
                plan.combine = c;
            }
        }
        if let (Some(t), Some(grid)) = (a.permutations, s.grid_mut()) {
            grid.permutations = t;
        }
        if let Study::Permutation { config, .. } = &mut s.study {
            if let Some(t) = a.permutations {
                config.permutations = t;
            }
        }
    }

    std::fs::create_dir_all(&a.out).map_err(|e| bad(format!("{}: {e}", a.out.display())))?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for s in &sims {
        let hash = s.config_hash();
        let report = s.run()?;
        println!("{}", sim::summary_line(s, &report));
        for r in report.rows() {
            rows.push((hash.clone(), s.label.clone(), r));
        }
        reports.push(json!({
            "label": s.label,
            "config_hash": hash,
            "config": serde_json::to_value(s).unwrap(),
            "report": report_value(&report),
        }));
    }
    let csv_path = a.out.join(format!("{stem}.csv"));
    let file = std::fs::File::create(&csv_path).map_err(|e| Failure::Runtime(e.into()))?;
    write_rows(file, &rows, true).map_err(Failure::Runtime)?;
    let json_path = a.out.join(format!("{stem}.json"));
    let doc = json!({"schema": "1", "simulations": reports});
    std::fs::write(&json_path, output::to_json(&doc)).map_err(|e| Failure::Runtime(e.into()))?;
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

fn report_value(report: &StudyReport) -> Value {
    serde_json::to_value(report).unwrap()
}

fn cmd_power(a: PowerArgs) -> std::result::Result<(), Failure> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(bad(format!("alpha must lie in (0, 1), got {}", a.alpha)));
    }
    if !(a.sigma > 0.0) {
        return Err(bad(format!("sigma must be positive, got {}", a.sigma)));
    }
    if let Some(d) = a.delta.iter().find(|d| !(**d >= 0.0)) {
        return Err(bad(format!("delta must be non-negative, got {d}")));
    }
    let mut points = Vec::new();
    for &delta in &a.delta {
        let mut p = json!({
            "delta": delta,
            "one_split": theoretical_power(delta, a.sigma, a.alpha, PowerVariant::OneSplit)?,
            "two_split": theoretical_power(delta, a.sigma, a.alpha, PowerVariant::TwoSplit)?,
        });
        if a.combined {
            p["combined"] = json!({
                "U": a.splits,
                "q": a.q,
                "q_order": combined_power_bound(delta, a.sigma, a.alpha, a.splits, a.q, BoundMethod::QOrder)?,
                "hommel": combined_power_bound(delta, a.sigma, a.alpha, a.splits, a.q, BoundMethod::Hommel)?,
            });
        }
        points.push(p);
    }
    let doc = json!({"schema": "1", "sigma": a.sigma, "alpha": a.alpha, "points": points});
    print!("{}", output::to_json(&doc));
    Ok(())
}

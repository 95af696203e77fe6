//! Model-agnostic significance tests for groups of features.
//!
//! A hypothesized feature set `S` is tested by comparing a predictor trained
//! on all features against one trained with `S` masked to zero, on data held
//! out from training. The one-split test adds a small Gaussian perturbation
//! to each loss difference; the two-split test pairs the halves of the
//! inference sample instead. Repeated splits are merged with order-statistic
//! p-value combiners.
//!
//! ```no_run
//! use blackbox_sig::{run_test, FeatureSet, LearnerSpec, Loss, TestPlan};
//! # fn main() -> blackbox_sig::Result<()> {
//! # let data: blackbox_sig::Dataset = unimplemented!();
//! let s = FeatureSet::parse("0-4", None)?;
//! let outcome = run_test(&data, &s, &LearnerSpec::default(), &Loss::squared_error(), &TestPlan::default())?;
//! println!("p = {}", outcome.p_value);
//! # Ok(())
//! # }
//! ```

pub mod adaptive;
pub mod baselines;
pub mod combine;
pub mod data;
pub mod error;
pub mod learners;
pub mod matrix;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod splitting;
pub mod stats;

pub use adaptive::{estimate_type1, estimate_type1_two_split, tune_one_split, tune_two_split, TuneGrid, TuneResult};
pub use baselines::{holdout_permutation_test, permutation_p_value, permutation_test};
pub use combine::{combine, CombineMethod};
pub use data::{read_csv, read_csv_path, ColumnRef, CsvOptions, Dataset, FeatureSet, Loss, LossKind};
pub use error::{Error, Result};
pub use learners::{fit, fit_pair, LearnerSpec, Model, OutputActivation, Predictor};
pub use matrix::Matrix;
pub use pipeline::{run_test, TestMethod, TestOutcome, TestPlan, Tuning};
pub use splitting::{log_ratio_sizes, random_split, SplitPlan};
pub use stats::{
    combined_power_bound, normal_cdf, one_split_statistic, owens_t, theoretical_power, two_split_statistic,
    BoundMethod, PerturbSpec, PowerVariant, TestResult,
};

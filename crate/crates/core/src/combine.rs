//! Combining p-values from repeated random splits.
//!
//! The order-statistic family scales the `q`-th smallest p-value by `U / q`;
//! Hommel's rule takes the smallest scaled order statistic and multiplies it
//! by `C_U = 1 + 1/2 + ... + 1/U`. None of the rules assume the p-values are
//! independent, except that the Cauchy rule is only approximately valid
//! under dependence.
//!
//! The Cauchy and harmonic-mean rules use their usual definitions:
//! `1/2 - atan(mean tan(pi (1/2 - p_u))) / pi` and
//! `min(e ln(U) U / sum(1 / p_u), 1)`.

use std::f64::consts::{E, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CombineMethod {
    QOrder { q: usize },
    Hommel,
    Bonferroni,
    /// `q = ceil(gamma U)` in the order-statistic family.
    Quantile { gamma: f64 },
    Median,
    Cauchy,
    Harmonic,
}

impl Default for CombineMethod {
    fn default() -> Self {
        CombineMethod::Hommel
    }
}

impl CombineMethod {
    /// The order `q` used for `u` inputs, for the order-statistic family.
    pub fn order(&self, u: usize) -> Option<usize> {
        match *self {
            CombineMethod::QOrder { q } => Some(q),
            CombineMethod::Bonferroni => Some(1),
            CombineMethod::Quantile { gamma } => Some(((gamma * u as f64).ceil() as usize).max(1)),
            CombineMethod::Median => Some(u.div_ceil(2)),
            _ => None,
        }
    }
}

impl fmt::Display for CombineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CombineMethod::QOrder { q } => write!(f, "q-order:{q}"),
            CombineMethod::Hommel => write!(f, "hommel"),
            CombineMethod::Bonferroni => write!(f, "bonferroni"),
            CombineMethod::Quantile { gamma } => write!(f, "quantile:{gamma}"),
            CombineMethod::Median => write!(f, "median"),
            CombineMethod::Cauchy => write!(f, "cauchy"),
            CombineMethod::Harmonic => write!(f, "harmonic"),
        }
    }
}

impl FromStr for CombineMethod {
    type Err = Error;

    /// Accepts `hommel`, `bonferroni`, `median`, `cauchy`, `harmonic`,
    /// `first-quantile`, `q-order:<q>` and `quantile:<gamma>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || Error::InvalidConfig(format!("unknown combine method {s:?}"));
        let method = match s.as_str() {
            "hommel" => CombineMethod::Hommel,
            "bonferroni" => CombineMethod::Bonferroni,
            "median" => CombineMethod::Median,
            "cauchy" => CombineMethod::Cauchy,
            "harmonic" => CombineMethod::Harmonic,
            "first-quantile" | "1st-quantile" => CombineMethod::Quantile { gamma: 0.25 },
            other => match other.split_once(':') {
                Some(("q-order", q)) => CombineMethod::QOrder {
                    q: q.parse().map_err(|_| bad())?,
                },
                Some(("quantile", g)) => {
                    let gamma: f64 = g.parse().map_err(|_| bad())?;
                    if !(gamma > 0.0 && gamma < 1.0) {
                        return Err(Error::InvalidConfig(format!(
                            "quantile level must lie in (0, 1), got {gamma}"
                        )));
                    }
                    CombineMethod::Quantile { gamma }
                }
                _ => return Err(bad()),
            },
        };
        Ok(method)
    }
}

/// `min((U / q) P_(q), 1)` on sorted p-values.
fn q_order_sorted(sorted: &[f64], q: usize) -> f64 {
    let u = sorted.len() as f64;
    (u / q as f64 * sorted[q - 1]).min(1.0)
}

/// Combines `U >= 2` p-values into one.
pub fn combine(pvalues: &[f64], method: CombineMethod) -> Result<f64> {
    let u = pvalues.len();
    if u < 2 {
        return Err(Error::NeedMultiplePValues(u));
    }
    for (index, &value) in pvalues.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidPValue { index, value });
        }
    }
    let mut sorted = pvalues.to_vec();
    sorted.sort_by(f64::total_cmp);

    let combined = match method {
        CombineMethod::Hommel => {
            let c_u: f64 = (1..=u).map(|q| 1.0 / q as f64).sum();
            let best = (1..=u)
                .map(|q| u as f64 / q as f64 * sorted[q - 1])
                .fold(f64::INFINITY, f64::min);
            (c_u * best).min(1.0)
        }
        CombineMethod::Cauchy => cauchy(&sorted),
        CombineMethod::Harmonic => {
            let inv_sum: f64 = sorted.iter().map(|p| 1.0 / p).sum();
            (E * (u as f64).ln() * u as f64 / inv_sum).min(1.0)
        }
        other => {
            let q = other.order(u).expect("order-statistic method");
            if !(1..=u).contains(&q) {
                return Err(Error::InvalidConfig(format!("q = {q} outside [1, {u}]")));
            }
            q_order_sorted(&sorted, q)
        }
    };
    Ok(combined.clamp(0.0, 1.0))
}

fn cauchy(pvalues: &[f64]) -> f64 {
    if pvalues.iter().any(|&p| p == 0.0) {
        return 0.0;
    }
    let u = pvalues.len() as f64;
    let stat: f64 = pvalues
        .iter()
        .map(|&p| {
            if p < 1e-15 {
                // tan(pi (1/2 - p)) ~ 1 / (pi p) without cancellation
                1.0 / (p * PI)
            } else {
                (PI * (0.5 - p)).tan()
            }
        })
        .sum::<f64>()
        / u;
    if stat > 1e15 {
        // upper tail of the standard Cauchy: 1/2 - atan(t)/pi ~ 1 / (pi t)
        return 1.0 / (stat * PI);
    }
    0.5 - stat.atan() / PI
}

//! Data model shared by every test: datasets, hypothesized feature sets,
//! masking and loss functions.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Feature matrix paired with outcomes.
///
/// Regression outcomes have a single column. Classification outcomes are
/// stored one-hot with `K >= 2` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    outcomes: Matrix,
    column_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: Matrix, outcomes: Matrix) -> Result<Self> {
        Self::with_names(features, outcomes, None)
    }

    pub fn with_names(
        features: Matrix,
        outcomes: Matrix,
        column_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if features.rows() != outcomes.rows() {
            return Err(Error::InvalidDataset(format!(
                "{} feature rows but {} outcome rows",
                features.rows(),
                outcomes.rows()
            )));
        }
        if features.rows() < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 rows, got {}",
                features.rows()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::InvalidDataset("no feature columns".into()));
        }
        if outcomes.cols() == 0 {
            return Err(Error::InvalidDataset("no outcome columns".into()));
        }
        if !features.all_finite() || !outcomes.all_finite() {
            return Err(Error::InvalidDataset("non-finite value".into()));
        }
        if let Some(names) = &column_names {
            if names.len() != features.cols() {
                return Err(Error::InvalidDataset(format!(
                    "{} column names for {} features",
                    names.len(),
                    features.cols()
                )));
            }
        }
        Ok(Self {
            features,
            outcomes,
            column_names,
        })
    }

    /// Classification dataset from integer labels in `0..classes`.
    pub fn from_labels(features: Matrix, labels: &[usize], classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidDataset(format!(
                "classification needs at least 2 classes, got {classes}"
            )));
        }
        let mut outcomes = Matrix::zeros(labels.len(), classes);
        for (i, &c) in labels.iter().enumerate() {
            if c >= classes {
                return Err(Error::InvalidDataset(format!(
                    "label {c} at row {i} not below class count {classes}"
                )));
            }
            outcomes.set(i, c, 1.0);
        }
        Self::new(features, outcomes)
    }

    /// Rows-only constructor used internally for subsets, which may hold a
    /// single row (e.g. an estimation sample of size one).
    pub(crate) fn from_parts_unchecked(
        features: Matrix,
        outcomes: Matrix,
        column_names: Option<Vec<String>>,
    ) -> Self {
        debug_assert_eq!(features.rows(), outcomes.rows());
        Self {
            features,
            outcomes,
            column_names,
        }
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }

    #[inline]
    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn n_outputs(&self) -> usize {
        self.outcomes.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn outcomes(&self) -> &Matrix {
        &self.outcomes
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self::from_parts_unchecked(
            self.features.select_rows(idx),
            self.outcomes.select_rows(idx),
            self.column_names.clone(),
        )
    }

    /// Keeps only the first `cols` feature columns.
    pub fn truncate_features(&self, cols: usize) -> Result<Self> {
        if cols == 0 || cols > self.n_features() {
            return Err(Error::InvalidConfig(format!(
                "cannot keep {cols} of {} feature columns",
                self.n_features()
            )));
        }
        let idx: Vec<usize> = (0..cols).collect();
        let names = self
            .column_names
            .as_ref()
            .map(|n| n[..cols].to_vec());
        Ok(Self::from_parts_unchecked(
            self.features.select_columns(&idx),
            self.outcomes.clone(),
            names,
        ))
    }

    pub(crate) fn with_features(&self, features: Matrix) -> Self {
        Self::from_parts_unchecked(features, self.outcomes.clone(), self.column_names.clone())
    }

    /// Returns a copy with the columns in `s` replaced by zero.
    pub fn mask(&self, s: &FeatureSet) -> Result<Self> {
        self.mask_with(s, 0.0)
    }

    /// Returns a copy with the columns in `s` replaced by `value`.
    pub fn mask_with(&self, s: &FeatureSet, value: f64) -> Result<Self> {
        s.check_within(self.n_features())?;
        let mut features = self.features.clone();
        for i in 0..features.rows() {
            let row = features.row_mut(i);
            for &j in s.indices() {
                row[j] = value;
            }
        }
        Ok(self.with_features(features))
    }
}

/// Hypothesized feature indices: non-empty, strictly increasing, 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FeatureSet {
    indices: Vec<usize>,
}

impl FeatureSet {
    /// Accepts any order; rejects duplicates and empty sets.
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidFeatureSet("empty feature set".into()));
        }
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidFeatureSet("duplicate index".into()));
        }
        Ok(Self { indices })
    }

    /// Contiguous range `start..end`.
    pub fn range(start: usize, end: usize) -> Result<Self> {
        Self::new((start..end).collect())
    }

    /// Parses `"0-4,9"` style selections. Tokens that are not numbers or
    /// ranges are looked up in `names`.
    pub fn parse(selection: &str, names: Option<&[String]>) -> Result<Self> {
        let lookup: Option<HashMap<&str, usize>> = names.map(|n| {
            n.iter()
                .enumerate()
                .map(|(i, s)| (s.as_str(), i))
                .collect()
        });
        let mut out = Vec::new();
        for raw in selection.split(',') {
            let tok = raw.trim();
            if tok.is_empty() {
                return Err(Error::InvalidFeatureSet(format!(
                    "empty token in {selection:?}"
                )));
            }
            if let Some((a, b)) = tok.split_once('-') {
                if let (Ok(a), Ok(b)) = (a.trim().parse::<usize>(), b.trim().parse::<usize>()) {
                    if a > b {
                        return Err(Error::InvalidFeatureSet(format!(
                            "descending range {tok:?}"
                        )));
                    }
                    out.extend(a..=b);
                    continue;
                }
            }
            if let Ok(i) = tok.parse::<usize>() {
                out.push(i);
                continue;
            }
            match lookup.as_ref().and_then(|m| m.get(tok)) {
                Some(&i) => out.push(i),
                None => {
                    return Err(Error::InvalidFeatureSet(format!(
                        "unknown feature {tok:?}"
                    )))
                }
            }
        }
        Self::new(out)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    /// Indices in `0..d` not in the set.
    pub fn complement(&self, d: usize) -> Vec<usize> {
        (0..d).filter(|j| !self.contains(*j)).collect()
    }

    pub fn check_within(&self, d: usize) -> Result<()> {
        match self.indices.last() {
            Some(&max) if max >= d => Err(Error::InvalidFeatureSet(format!(
                "index {max} out of range for {d} features"
            ))),
            _ => Ok(()),
        }
    }
}

impl TryFrom<Vec<usize>> for FeatureSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FeatureSet> for Vec<usize> {
    fn from(s: FeatureSet) -> Self {
        s.indices
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
    ZeroOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Loss {
    pub kind: LossKind,
    pub clamp_epsilon: f64,
}

pub const DEFAULT_CLAMP_EPSILON: f64 = 1e-12;

impl Loss {
    pub fn new(kind: LossKind, clamp_epsilon: f64) -> Result<Self> {
        if !(clamp_epsilon > 0.0 && clamp_epsilon <= 1e-6) {
            return Err(Error::InvalidConfig(format!(
                "clamp_epsilon must lie in (0, 1e-6], got {clamp_epsilon}"
            )));
        }
        Ok(Self {
            kind,
            clamp_epsilon,
        })
    }

    pub fn squared_error() -> Self {
        Self {
            kind: LossKind::SquaredError,
            clamp_epsilon: DEFAULT_CLAMP_EPSILON,
        }
    }

    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            clamp_epsilon: DEFAULT_CLAMP_EPSILON,
        }
    }

    pub fn zero_one() -> Self {
        Self {
            kind: LossKind::ZeroOne,
            clamp_epsilon: DEFAULT_CLAMP_EPSILON,
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self.kind, LossKind::SquaredError)
    }

    /// Checks that the loss is usable with `k` outcome columns.
    pub fn check_outputs(&self, k: usize) -> Result<()> {
        match (self.kind, k) {
            (LossKind::SquaredError, 1) => Ok(()),
            (LossKind::SquaredError, _) => Err(Error::LossShape(format!(
                "squared error needs K = 1, got {k}"
            ))),
            (_, k) if k >= 2 => Ok(()),
            (kind, k) => Err(Error::LossShape(format!("{kind:?} needs K >= 2, got {k}"))),
        }
    }

    /// Loss of one prediction against one outcome.
    pub fn eval(&self, prediction: &[f64], outcome: &[f64]) -> Result<f64> {
        if prediction.len() != outcome.len() {
            return Err(Error::LossShape(format!(
                "prediction has {} entries, outcome has {}",
                prediction.len(),
                outcome.len()
            )));
        }
        self.check_outputs(outcome.len())?;
        Ok(self.eval_unchecked(prediction, outcome))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, prediction: &[f64], outcome: &[f64]) -> f64 {
        match self.kind {
            LossKind::SquaredError => {
                let r = prediction[0] - outcome[0];
                r * r
            }
            LossKind::CrossEntropy => {
                let lo = self.clamp_epsilon;
                let hi = 1.0 - self.clamp_epsilon;
                prediction
                    .iter()
                    .zip(outcome)
                    .filter(|(_, &y)| y != 0.0)
                    .map(|(&p, &y)| -y * p.clamp(lo, hi).ln())
                    .sum()
            }
            LossKind::ZeroOne => {
                if argmax(prediction) == argmax(outcome) {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Per-row losses of a prediction matrix.
    pub fn eval_rows(&self, predictions: &Matrix, outcomes: &Matrix) -> Result<Vec<f64>> {
        if predictions.rows() != outcomes.rows() || predictions.cols() != outcomes.cols() {
            return Err(Error::LossShape(format!(
                "predictions {}x{} vs outcomes {}x{}",
                predictions.rows(),
                predictions.cols(),
                outcomes.rows(),
                outcomes.cols()
            )));
        }
        self.check_outputs(outcomes.cols())?;
        Ok(predictions
            .iter_rows()
            .zip(outcomes.iter_rows())
            .map(|(p, y)| self.eval_unchecked(p, y))
            .collect())
    }
}

/// First index of the largest entry.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Which CSV column holds the response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnRef {
    Name(String),
    Index(usize),
}

impl ColumnRef {
    /// Numeric strings are indices, anything else a column name.
    pub fn parse(s: &str) -> Self {
        match s.trim().parse::<usize>() {
            Ok(i) => ColumnRef::Index(i),
            Err(_) => ColumnRef::Name(s.trim().to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub response: ColumnRef,
    pub has_header: bool,
    /// Treat the response as integer class labels and one-hot encode them.
    pub classification: bool,
}

/// Reads a dataset from CSV. Every non-response column must be numeric.
pub fn read_csv_path(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, opts)
}

pub fn read_csv<R: Read>(reader: R, opts: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .from_reader(reader);

    let header: Option<Vec<String>> = if opts.has_header {
        Some(rdr.headers()?.iter().map(|s| s.trim().to_string()).collect())
    } else {
        None
    };

    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?);
    }
    let width = header
        .as_ref()
        .map(|h| h.len())
        .or_else(|| rows.first().map(|r| r.len()))
        .ok_or_else(|| Error::InvalidDataset("empty csv".into()))?;

    let response = match &opts.response {
        ColumnRef::Index(i) if *i < width => *i,
        ColumnRef::Index(i) => {
            return Err(Error::InvalidDataset(format!(
                "response column {i} out of range for {width} columns"
            )))
        }
        ColumnRef::Name(name) => header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| Error::InvalidDataset(format!("no column named {name:?}")))?,
    };
    if width < 2 {
        return Err(Error::InvalidDataset(
            "need a response column and at least one feature".into(),
        ));
    }

    let d = width - 1;
    let mut features = Vec::with_capacity(rows.len() * d);
    let mut response_values = Vec::with_capacity(rows.len());
    for (r, rec) in rows.iter().enumerate() {
        if rec.len() != width {
            return Err(Error::InvalidDataset(format!(
                "row {} has {} fields, expected {width}",
                r + 1,
                rec.len()
            )));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidDataset(format!(
                    "row {}, column {c}: {field:?} is not a number",
                    r + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::InvalidDataset(format!(
                    "row {}, column {c}: non-finite value",
                    r + 1
                )));
            }
            if c == response {
                response_values.push(v);
            } else {
                features.push(v);
            }
        }
    }

    let names = header.map(|h| {
        h.into_iter()
            .enumerate()
            .filter(|(i, _)| *i != response)
            .map(|(_, n)| n)
            .collect::<Vec<_>>()
    });
    let features = Matrix::new(rows.len(), d, features)?;

    if opts.classification {
        let mut labels = Vec::with_capacity(response_values.len());
        for (r, &v) in response_values.iter().enumerate() {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::InvalidDataset(format!(
                    "row {}: class label {v} is not a non-negative integer",
                    r + 1
                )));
            }
            labels.push(v as usize);
        }
        let classes = labels.iter().copied().max().unwrap_or(0) + 1;
        let ds = Dataset::from_labels(features, &labels, classes)?;
        Dataset::with_names(ds.features, ds.outcomes, names)
    } else {
        Dataset::with_names(features, Matrix::column_vector(response_values), names)
    }
}

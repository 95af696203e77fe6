//! Trainable blackbox predictors.
//!
//! A [`LearnerSpec`] with no hidden layers is a linear model; otherwise it is
//! a fully connected ReLU network. Both are trained by plain mini-batch SGD
//! with early stopping on a trailing validation fraction, and the best
//! weights seen are restored at the end.
//!
//! Anything that maps a feature matrix to predictions deterministically can
//! take part in a test through the [`Model`] trait.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSet, Loss, LossKind};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, rng_from_seed, stream};

/// Deterministic features → predictions mapping.
pub trait Model: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn predict(&self, features: &Matrix) -> Result<Matrix>;
}

/// Wraps a row function as a [`Model`].
pub struct FnModel<F> {
    input_dim: usize,
    output_dim: usize,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn new(input_dim: usize, output_dim: usize, f: F) -> Self {
        Self {
            input_dim,
            output_dim,
            f,
        }
    }
}

impl<F> Model for FnModel<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn predict(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.input_dim {
            return Err(Error::PredictShape {
                expected: self.input_dim,
                got: features.cols(),
            });
        }
        let mut out = Vec::with_capacity(features.rows() * self.output_dim);
        for row in features.iter_rows() {
            let y = (self.f)(row);
            if y.len() != self.output_dim {
                return Err(Error::PredictShape {
                    expected: self.output_dim,
                    got: y.len(),
                });
            }
            out.extend(y);
        }
        Matrix::new(features.rows(), self.output_dim, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Softmax,
}

/// Architecture and SGD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    /// Hidden layer widths; empty means a linear model.
    pub hidden: Vec<usize>,
    pub output: OutputActivation,
    pub bias: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_split: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            output: OutputActivation::Identity,
            bias: true,
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.01,
            validation_split: 0.2,
            patience: 10,
            seed: 0,
        }
    }
}

impl LearnerSpec {
    pub fn linear() -> Self {
        Self {
            hidden: Vec::new(),
            ..Self::default()
        }
    }

    pub fn mlp(hidden: Vec<usize>) -> Self {
        Self {
            hidden,
            ..Self::default()
        }
    }

    /// `depth - 1` hidden layers of the same width.
    pub fn uniform_mlp(depth: usize, width: usize) -> Self {
        Self::mlp(vec![width; depth.saturating_sub(1)])
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.validation_split) {
            return Err(Error::InvalidConfig(format!(
                "validation_split must lie in [0, 1), got {}",
                self.validation_split
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }

    fn check_loss(&self, loss: &Loss, k: usize) -> Result<()> {
        loss.check_outputs(k)?;
        match (self.output, loss.kind) {
            (OutputActivation::Identity, LossKind::SquaredError) => Ok(()),
            (OutputActivation::Softmax, LossKind::CrossEntropy | LossKind::ZeroOne) => Ok(()),
            (out, kind) => Err(Error::InvalidConfig(format!(
                "{out:?} output cannot be trained with {kind:?} loss"
            ))),
        }
    }
}

/// Dense layer, weights row-major with shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::InvalidConfig(format!(
                "layer {in_dim}->{out_dim} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    fn glorot<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    fn forward(&self, input: &[f64], out: &mut [f64]) {
        for (o, (w_row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = b + w_row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// A fitted network.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    layers: Vec<Layer>,
    spec: LearnerSpec,
    training_log: Vec<EpochLog>,
    best_epoch: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct PredictorDocument {
    format: String,
    version: u32,
    spec: LearnerSpec,
    layers: Vec<LayerDocument>,
    #[serde(default)]
    training_log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct LayerDocument {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

const DOCUMENT_FORMAT: &str = "blackbox-sig/predictor";

/// Per-sample forward/backward buffers.
struct Workspace {
    /// Post-activation output of every layer.
    outputs: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(layers: &[Layer]) -> Self {
        Self {
            outputs: layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
            deltas: layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
        }
    }
}

struct Gradient {
    weights: Vec<Vec<f64>>,
    bias: Vec<Vec<f64>>,
}

impl Gradient {
    fn zeros(layers: &[Layer]) -> Self {
        Self {
            weights: layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
        }
    }

    fn clear(&mut self) {
        self.weights.iter_mut().for_each(|w| w.fill(0.0));
        self.bias.iter_mut().for_each(|b| b.fill(0.0));
    }
}

impl Predictor {
    /// Builds a predictor from explicit layers; widths must chain and agree
    /// with `spec.hidden`.
    pub fn from_layers(spec: LearnerSpec, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("a predictor needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::InvalidConfig(format!(
                    "layer widths do not chain: {} -> {}",
                    w[0].out_dim, w[1].in_dim
                )));
            }
        }
        let hidden: Vec<usize> = layers[..layers.len() - 1].iter().map(|l| l.out_dim).collect();
        if hidden != spec.hidden {
            return Err(Error::InvalidConfig(format!(
                "hidden widths {hidden:?} disagree with spec {:?}",
                spec.hidden
            )));
        }
        for l in &layers {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::InvalidConfig("layer buffer has wrong length".into()));
            }
        }
        Ok(Self {
            layers,
            spec,
            training_log: Vec::new(),
            best_epoch: None,
        })
    }

    /// Untrained network with seeded Glorot-uniform weights and zero biases.
    pub fn initialize(spec: &LearnerSpec, input_dim: usize, output_dim: usize) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_from_seed(spec.seed);
        Ok(Self::init_with(spec, input_dim, output_dim, &mut rng))
    }

    fn init_with<R: Rng>(spec: &LearnerSpec, input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let mut dims = vec![input_dim];
        dims.extend(&spec.hidden);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .map(|w| Layer::glorot(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            spec: spec.clone(),
            training_log: Vec::new(),
            best_epoch: None,
        }
    }

    pub fn spec(&self) -> &LearnerSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn training_log(&self) -> &[EpochLog] {
        &self.training_log
    }

    /// 1-based epoch whose weights were kept.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    /// Flattened trainable parameters: each layer's weights, then its biases
    /// when the spec has biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            if self.spec.bias {
                out.extend_from_slice(&l.bias);
            }
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let expected = self.parameters().len();
        if params.len() != expected {
            return Err(Error::InvalidConfig(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        let mut at = 0;
        let bias = self.spec.bias;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&params[at..at + n]);
            at += n;
            if bias {
                l.bias.copy_from_slice(&params[at..at + l.out_dim]);
                at += l.out_dim;
            }
        }
        Ok(())
    }

    fn forward_into(&self, x: &[f64], ws: &mut Workspace) {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = ws.outputs.split_at_mut(i);
            let input: &[f64] = if i == 0 { x } else { &done[i - 1] };
            let out = &mut rest[0];
            layer.forward(input, out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            } else if self.spec.output == OutputActivation::Softmax {
                softmax_in_place(out);
            }
        }
    }

    /// Runs one sample forward and backward, adding its gradient to `grad`.
    /// Returns the sample's training loss.
    fn accumulate(
        &self,
        x: &[f64],
        y: &[f64],
        loss: &Loss,
        ws: &mut Workspace,
        grad: &mut Gradient,
    ) -> f64 {
        self.forward_into(x, ws);
        let last = self.layers.len() - 1;
        let pred = &ws.outputs[last];
        let value = training_loss(loss).eval_unchecked(pred, y);

        // d loss / d pre-activation of the output layer
        match self.spec.output {
            OutputActivation::Identity => {
                for ((d, p), t) in ws.deltas[last].iter_mut().zip(pred).zip(y) {
                    *d = 2.0 * (p - t);
                }
            }
            OutputActivation::Softmax => {
                for ((d, p), t) in ws.deltas[last].iter_mut().zip(pred).zip(y) {
                    *d = p - t;
                }
            }
        }

        for i in (0..=last).rev() {
            let layer = &self.layers[i];
            let input: &[f64] = if i == 0 { x } else { &ws.outputs[i - 1] };
            let delta = &ws.deltas[i];
            let gw = &mut grad.weights[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, &xi) in row.iter_mut().zip(input) {
                    *g += d * xi;
                }
                grad.bias[i][o] += d;
            }
            if i > 0 {
                let (lower, upper) = ws.deltas.split_at_mut(i);
                let prev = &mut lower[i - 1];
                let delta = &upper[0];
                prev.fill(0.0);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let w_row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (p, &w) in prev.iter_mut().zip(w_row) {
                        *p += d * w;
                    }
                }
                for (p, &a) in prev.iter_mut().zip(&ws.outputs[i - 1]) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
        }
        value
    }

    /// Mean training loss over all rows and its gradient with respect to
    /// [`Predictor::parameters`].
    pub fn loss_and_gradient(
        &self,
        features: &Matrix,
        outcomes: &Matrix,
        loss: &Loss,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_input(features)?;
        self.spec.check_loss(loss, outcomes.cols())?;
        if features.rows() != outcomes.rows() || features.rows() == 0 {
            return Err(Error::InvalidDataset("features/outcomes row mismatch".into()));
        }
        let mut ws = Workspace::new(&self.layers);
        let mut grad = Gradient::zeros(&self.layers);
        let mut total = 0.0;
        for (x, y) in features.iter_rows().zip(outcomes.iter_rows()) {
            total += self.accumulate(x, y, loss, &mut ws, &mut grad);
        }
        let scale = 1.0 / features.rows() as f64;
        let mut flat = Vec::new();
        for (gw, gb) in grad.weights.iter().zip(&grad.bias) {
            flat.extend(gw.iter().map(|g| g * scale));
            if self.spec.bias {
                flat.extend(gb.iter().map(|g| g * scale));
            }
        }
        Ok((total * scale, flat))
    }

    /// Mean loss over all rows (the training objective).
    pub fn mean_loss(&self, features: &Matrix, outcomes: &Matrix, loss: &Loss) -> Result<f64> {
        let pred = self.predict(features)?;
        let losses = training_loss(loss).eval_rows(&pred, outcomes)?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    fn check_input(&self, features: &Matrix) -> Result<()> {
        let expected = self.layers[0].in_dim;
        if features.cols() != expected {
            return Err(Error::PredictShape {
                expected,
                got: features.cols(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = PredictorDocument {
            format: DOCUMENT_FORMAT.to_string(),
            version: 1,
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerDocument {
                    rows: l.out_dim,
                    cols: l.in_dim,
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
            training_log: self.training_log.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PredictorDocument = serde_json::from_str(text)?;
        if doc.format != DOCUMENT_FORMAT || doc.version != 1 {
            return Err(Error::InvalidConfig(format!(
                "unsupported predictor document {} v{}",
                doc.format, doc.version
            )));
        }
        let layers = doc
            .layers
            .into_iter()
            .map(|l| Layer::new(l.cols, l.rows, l.weights, l.bias))
            .collect::<Result<Vec<_>>>()?;
        let mut p = Self::from_layers(doc.spec, layers)?;
        p.training_log = doc.training_log;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Model for Predictor {
    fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    fn predict(&self, features: &Matrix) -> Result<Matrix> {
        self.check_input(features)?;
        let k = self.output_dim();
        let mut ws = Workspace::new(&self.layers);
        let mut out = Vec::with_capacity(features.rows() * k);
        for x in features.iter_rows() {
            self.forward_into(x, &mut ws);
            out.extend_from_slice(&ws.outputs[self.layers.len() - 1]);
        }
        Matrix::new(features.rows(), k, out)
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// Zero-one loss has no gradient; classifiers train on cross-entropy.
fn training_loss(loss: &Loss) -> Loss {
    match loss.kind {
        LossKind::ZeroOne => Loss {
            kind: LossKind::CrossEntropy,
            clamp_epsilon: loss.clamp_epsilon,
        },
        _ => *loss,
    }
}

/// Fits a predictor by mini-batch SGD.
///
/// The trailing `validation_split` fraction of rows is held out for early
/// stopping; training stops once `patience` consecutive epochs fail to
/// improve the validation loss, and the best weights are restored.
pub fn fit(spec: &LearnerSpec, features: &Matrix, outcomes: &Matrix, loss: &Loss) -> Result<Predictor> {
    spec.validate()?;
    spec.check_loss(loss, outcomes.cols())?;
    let n = features.rows();
    if outcomes.rows() != n {
        return Err(Error::InvalidDataset(format!(
            "{n} feature rows but {} outcome rows",
            outcomes.rows()
        )));
    }
    let n_val = (n as f64 * spec.validation_split).floor() as usize;
    let n_train = n.saturating_sub(n_val);
    if n_train == 0 {
        return Err(Error::SampleTooSmall(format!(
            "no training rows left out of {n} after validation split"
        )));
    }

    let mut rng = rng_from_seed(spec.seed);
    let mut model = Predictor::init_with(spec, features.cols(), outcomes.cols(), &mut rng);
    let objective = training_loss(loss);

    let mut order: Vec<usize> = (0..n_train).collect();
    let mut ws = Workspace::new(&model.layers);
    let mut grad = Gradient::zeros(&model.layers);

    let mut best: Option<(f64, Vec<Layer>, usize)> = None;
    let mut wait = 0usize;
    let mut log = Vec::new();

    for epoch in 1..=spec.epochs {
        order.shuffle(&mut rng);
        let mut running = 0.0;
        for batch in order.chunks(spec.batch_size) {
            grad.clear();
            for &i in batch {
                running += model.accumulate(features.row(i), outcomes.row(i), &objective, &mut ws, &mut grad);
            }
            let step = spec.learning_rate / batch.len() as f64;
            for (layer, (gw, gb)) in model.layers.iter_mut().zip(grad.weights.iter().zip(&grad.bias)) {
                for (w, g) in layer.weights.iter_mut().zip(gw) {
                    *w -= step * g;
                }
                if spec.bias {
                    for (b, g) in layer.bias.iter_mut().zip(gb) {
                        *b -= step * g;
                    }
                }
            }
        }
        let train_loss = running / n_train as f64;

        let val_loss = if n_val > 0 {
            let mut total = 0.0;
            for i in n_train..n {
                model.forward_into(features.row(i), &mut ws);
                total += objective.eval_unchecked(&ws.outputs[model.layers.len() - 1], outcomes.row(i));
            }
            Some(total / n_val as f64)
        } else {
            None
        };

        if !train_loss.is_finite() || val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });

        let monitored = val_loss.unwrap_or(train_loss);
        match &best {
            Some((b, _, _)) if monitored >= *b => {
                wait += 1;
                if wait >= spec.patience {
                    break;
                }
            }
            _ => {
                best = Some((monitored, model.layers.clone(), epoch));
                wait = 0;
            }
        }
    }

    if let Some((_, layers, epoch)) = best {
        model.layers = layers;
        model.best_epoch = Some(epoch);
    }
    model.training_log = log;
    Ok(model)
}

/// Fits on a dataset.
pub fn fit_dataset(spec: &LearnerSpec, data: &Dataset, loss: &Loss) -> Result<Predictor> {
    fit(spec, data.features(), data.outcomes(), loss)
}

/// Fits the full-feature predictor and the masked-feature predictor on an
/// estimation sample. Each uses its own seed derived from `spec.seed`.
pub fn fit_pair(
    spec: &LearnerSpec,
    estimation: &Dataset,
    s: &FeatureSet,
    loss: &Loss,
) -> Result<(Predictor, Predictor)> {
    let masked = estimation.mask(s)?;
    let full_spec = spec.with_seed(derive_seed(spec.seed, stream::FIT_FULL, 0));
    let masked_spec = spec.with_seed(derive_seed(spec.seed, stream::FIT_MASKED, 0));
    let f_hat = fit_dataset(&full_spec, estimation, loss)?;
    let g_hat = fit_dataset(&masked_spec, &masked, loss)?;
    Ok((f_hat, g_hat))
}

/// Convenience: predictions of any model on a dataset.
pub fn predict(model: &dyn Model, features: &Matrix) -> Result<Matrix> {
    model.predict(features)
}

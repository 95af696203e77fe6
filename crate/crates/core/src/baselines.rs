//! Permutation-based baselines.
//!
//! `PT` scores the fitted model by K-fold cross-validation on the original
//! data and on copies with the hypothesized block permuted; `HPT` fits once
//! and permutes the block only in a holdout sample. Both report
//! `(#{s_t <= s_0} + 1) / (T + 1)`.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{Dataset, FeatureSet, Loss};
use crate::error::{Error, Result};
use crate::learners::{fit, LearnerSpec, Model};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::splitting::{inference_size, permute_feature_block, random_split};

pub const DEFAULT_FOLDS: usize = 5;

/// `(#{scores <= s0} + 1) / (T + 1)`.
pub fn permutation_p_value(s0: f64, scores: &[f64]) -> f64 {
    let hits = scores.iter().filter(|&&s| s <= s0).count();
    (hits + 1) as f64 / (scores.len() + 1) as f64
}

/// Shuffled row indices cut into `folds` groups whose sizes differ by at most one.
pub fn kfold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::InvalidConfig(format!(
            "cannot cut {n} rows into {folds} folds"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let mut out = vec![Vec::new(); folds];
    for (i, row) in idx.into_iter().enumerate() {
        out[i % folds].push(row);
    }
    Ok(out)
}

/// Mean over folds of the holdout loss of a model fit on the other folds.
/// Fold `k` trains with seed `derive_seed(spec.seed, FOLDS, k)`.
pub fn cv_score(data: &Dataset, partition: &[Vec<usize>], spec: &LearnerSpec, loss: &Loss) -> Result<f64> {
    let mut total = 0.0;
    for (k, holdout) in partition.iter().enumerate() {
        let train: Vec<usize> = partition
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .flat_map(|(_, rows)| rows.iter().copied())
            .collect();
        let train = data.select_rows(&train);
        let test = data.select_rows(holdout);
        let model = fit(
            &spec.with_seed(derive_seed(spec.seed, stream::FOLDS, k as u64)),
            train.features(),
            train.outcomes(),
            loss,
        )?;
        let losses = loss.eval_rows(&model.predict(test.features())?, test.outcomes())?;
        total += losses.iter().sum::<f64>() / losses.len() as f64;
    }
    Ok(total / partition.len() as f64)
}

/// Cross-validated permutation test. The same folds and training seeds are
/// used for the original and every permuted dataset.
pub fn permutation_test(
    data: &Dataset,
    s: &FeatureSet,
    spec: &LearnerSpec,
    loss: &Loss,
    permutations: usize,
    folds: usize,
    seed: u64,
) -> Result<f64> {
    if permutations == 0 {
        return Err(Error::InvalidConfig("need at least one permutation".into()));
    }
    s.check_within(data.n_features())?;
    let partition = kfold_partition(data.n_rows(), folds, derive_seed(seed, stream::FOLDS, 0))?;
    let spec = spec.with_seed(derive_seed(seed, stream::FIT, 0));
    let s0 = cv_score(data, &partition, &spec, loss)?;
    let scores = (0..permutations)
        .into_par_iter()
        .map(|t| {
            let permuted = permute_feature_block(data, s, derive_seed(seed, stream::PERMUTE, t as u64))?;
            cv_score(&permuted, &partition, &spec, loss)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(permutation_p_value(s0, &scores))
}

/// Holdout permutation p-value of an already fitted model.
pub fn holdout_permutation_p_value(
    model: &dyn Model,
    holdout: &Dataset,
    s: &FeatureSet,
    loss: &Loss,
    permutations: usize,
    seed: u64,
) -> Result<f64> {
    if permutations == 0 {
        return Err(Error::InvalidConfig("need at least one permutation".into()));
    }
    let mean_loss = |d: &Dataset| -> Result<f64> {
        let l = loss.eval_rows(&model.predict(d.features())?, d.outcomes())?;
        Ok(l.iter().sum::<f64>() / l.len() as f64)
    };
    let s0 = mean_loss(holdout)?;
    let scores = (0..permutations)
        .into_par_iter()
        .map(|t| mean_loss(&permute_feature_block(holdout, s, derive_seed(seed, stream::PERMUTE, t as u64))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(permutation_p_value(s0, &scores))
}

/// Holdout permutation test: fit on `N - round(zeta N)` rows, permute in the rest.
#[allow(clippy::too_many_arguments)]
pub fn holdout_permutation_test(
    data: &Dataset,
    s: &FeatureSet,
    spec: &LearnerSpec,
    loss: &Loss,
    zeta: f64,
    permutations: usize,
    seed: u64,
) -> Result<f64> {
    s.check_within(data.n_features())?;
    let m = inference_size(data.n_rows(), zeta)?;
    let (train, holdout) = random_split(data, m, derive_seed(seed, stream::SPLIT, 0))?;
    let model = fit(
        &spec.with_seed(derive_seed(seed, stream::FIT, 0)),
        train.features(),
        train.outcomes(),
        loss,
    )?;
    holdout_permutation_p_value(&model, &holdout, s, loss, permutations, derive_seed(seed, stream::PERMUTE, 0))
}

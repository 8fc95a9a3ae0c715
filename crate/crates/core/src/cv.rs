//! k-fold cross-validation for SKEM and PSKEM.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier;
use crate::em::TrainConfig;
use crate::error::{Error, Result};
use crate::partition::{make_partition, train_pskem, PartitionScheme};
use crate::model::LabeledDataset;
use crate::preprocess::StandardizeTransform;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    /// Shuffle samples before splitting (a fresh shuffle per trial).
    pub randomize: bool,
    pub trials: usize,
    /// Number of feature blocks; 1 trains plain SKEM.
    pub blocks: usize,
    pub scheme: PartitionScheme,
    /// Fit standardization on each training split and apply it to both splits.
    pub standardize: bool,
    pub seed: u64,
    /// Run folds concurrently.
    pub parallel: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            randomize: false,
            trials: 1,
            blocks: 1,
            scheme: PartitionScheme::Sequential,
            standardize: false,
            seed: 0,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: usize,
    pub trials: usize,
    /// Best validation accuracy per fold, indexed `[trial][fold]`.
    pub fold_accuracy: Vec<Vec<f64>>,
    /// Pass (1-based) at which that accuracy was reached.
    pub best_pass: Vec<Vec<usize>>,
    /// Mean over folds, one entry per trial.
    pub trial_mean: Vec<f64>,
    /// Mean over every fold of every trial.
    pub mean: f64,
    /// Sample standard deviation of the trial means (0 for one trial).
    pub std: f64,
    /// Sample standard deviation over all fold accuracies.
    pub fold_std: f64,
}

/// Contiguous fold ranges; the first `n % folds` folds get one extra sample.
pub fn fold_ranges(n: usize, folds: usize) -> Vec<std::ops::Range<usize>> {
    let (base, extra) = (n / folds, n % folds);
    let mut start = 0;
    (0..folds)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// SplitMix64 step, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One fold outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldResult {
    pub accuracy: f64,
    pub best_pass: usize,
}

/// Trains on `train` and keeps the pass with the best accuracy on `test`.
pub fn run_fold<T: Scalar>(
    train: &LabeledDataset<T>,
    test: &LabeledDataset<T>,
    cfg: &TrainConfig,
    cv: &CvConfig,
    partition_seed: u64,
) -> Result<FoldResult> {
    let (train, test) = if cv.standardize {
        let s = StandardizeTransform::fit(train.features())?;
        (
            train.with_features(s.apply(train.features())?)?,
            test.with_features(s.apply(test.features())?)?,
        )
    } else {
        (train.clone(), test.clone())
    };
    let partition = make_partition(train.dim(), cv.blocks, cv.scheme, partition_seed)?;
    let out = train_pskem(&train, &partition, cfg, Some(&test))?;
    match out.best {
        Some(b) => Ok(FoldResult {
            accuracy: b.accuracy,
            best_pass: b.pass,
        }),
        // zero passes: score the initial model
        None => Ok(FoldResult {
            accuracy: classifier::accuracy(&out.model, &test)?,
            best_pass: 0,
        }),
    }
}

/// Runs `cv.trials` repetitions of `cv.folds`-fold cross-validation.
///
/// Trial t uses sub-seed `derive_seed(cv.seed, t)` for its shuffle; fold f of
/// that trial trains with seed `derive_seed(trial_seed, f)` when `cv.trials > 1`
/// or `cv.randomize`, and with `cfg.seed` otherwise.
pub fn cross_validate<T: Scalar>(
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
    cv: &CvConfig,
) -> Result<CvReport> {
    if cv.folds < 2 {
        return Err(Error::InvalidConfig("cross-validation needs at least 2 folds".into()));
    }
    if cv.trials == 0 {
        return Err(Error::InvalidConfig("cross-validation needs at least 1 trial".into()));
    }
    if data.len() < cv.folds {
        return Err(Error::InvalidConfig(format!(
            "{} samples cannot fill {} folds",
            data.len(),
            cv.folds
        )));
    }
    cfg.validate()?;
    let vary_seed = cv.trials > 1 || cv.randomize;

    // build every split up front so missing classes fail before any training
    let mut jobs = Vec::with_capacity(cv.trials * cv.folds);
    for t in 0..cv.trials {
        let trial_seed = derive_seed(cv.seed, t as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        if cv.randomize {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(trial_seed));
        }
        for (f, range) in fold_ranges(data.len(), cv.folds).into_iter().enumerate() {
            let test_idx: Vec<usize> = order[range.clone()].to_vec();
            let train_idx: Vec<usize> = order[..range.start]
                .iter()
                .chain(&order[range.end..])
                .copied()
                .collect();
            let train = data.subset(&train_idx);
            if let Some(c) = train.class_sizes().iter().position(|&s| s == 0) {
                return Err(Error::FoldMissingClass {
                    fold: f + 1,
                    class: c + 1,
                });
            }
            let test = data.subset(&test_idx);
            let fold_cfg = TrainConfig {
                seed: if vary_seed {
                    derive_seed(trial_seed, f as u64)
                } else {
                    cfg.seed
                },
                ..cfg.clone()
            };
            jobs.push((train, test, fold_cfg, trial_seed));
        }
    }

    let run = |(train, test, fold_cfg, pseed): &(LabeledDataset<T>, LabeledDataset<T>, TrainConfig, u64)| {
        run_fold(train, test, fold_cfg, cv, *pseed)
    };
    let results: Vec<Result<FoldResult>> = if cv.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };

    let mut fold_accuracy = vec![Vec::with_capacity(cv.folds); cv.trials];
    let mut best_pass = vec![Vec::with_capacity(cv.folds); cv.trials];
    for (i, r) in results.into_iter().enumerate() {
        let r = r?;
        fold_accuracy[i / cv.folds].push(r.accuracy);
        best_pass[i / cv.folds].push(r.best_pass);
    }
    let trial_mean: Vec<f64> = fold_accuracy.iter().map(|v| mean(v)).collect();
    let all: Vec<f64> = fold_accuracy.iter().flatten().copied().collect();
    Ok(CvReport {
        folds: cv.folds,
        trials: cv.trials,
        mean: mean(&all),
        std: sample_std(&trial_mean),
        fold_std: sample_std(&all),
        fold_accuracy,
        best_pass,
        trial_mean,
    })
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub(crate) fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

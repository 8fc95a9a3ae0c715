//! Feature partitioning and partitioned SKEM (PSKEM).
//!
//! Each block of features gets its own shared-kernel model; the joint class
//! log-likelihood is the sum of the block log-likelihoods.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClassScorer};
use crate::em::{BestSnapshot, SkemTrainer, TrainConfig, TrainHistory, TrainOutcome};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{GaussianComponent, LabeledDataset, MixtureModel, SharedKernelModel};
use crate::scalar::Scalar;

/// Largest K^R that [`expand_joint`] will enumerate.
pub const EXPAND_CAP: f64 = 1e5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionScheme {
    /// Contiguous runs of features.
    #[default]
    Sequential,
    /// Block r takes features r, r+R, r+2R, ...
    Interleaved,
    /// Seeded shuffle, then a sequential split.
    Random,
    /// Blocks given explicitly.
    Custom,
}

/// Disjoint feature blocks covering `0..dim`. Indices are 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
    scheme: PartitionScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl Partition {
    /// Validates that `blocks` are non-empty, disjoint and cover `0..dim`.
    pub fn from_blocks(blocks: Vec<Vec<usize>>, dim: usize) -> Result<Self> {
        let p = Self {
            blocks,
            scheme: PartitionScheme::Custom,
            seed: None,
        };
        p.validate(dim)?;
        Ok(p)
    }

    /// The trivial partition.
    pub fn single(dim: usize) -> Self {
        Self {
            blocks: vec![(0..dim).collect()],
            scheme: PartitionScheme::Sequential,
            seed: None,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("partition has no blocks".into()));
        }
        let mut seen = HashSet::with_capacity(dim);
        for (r, b) in self.blocks.iter().enumerate() {
            if b.is_empty() {
                return Err(Error::InvalidConfig(format!("partition block {} is empty", r + 1)));
            }
            for &i in b {
                if i >= dim {
                    return Err(Error::InvalidConfig(format!(
                        "feature {} out of range for dimension {dim}",
                        i + 1
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::InvalidConfig(format!(
                        "feature {} appears in more than one block",
                        i + 1
                    )));
                }
            }
        }
        if seen.len() != dim {
            return Err(Error::InvalidConfig(format!(
                "partition covers {} of {dim} features",
                seen.len()
            )));
        }
        Ok(())
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block(&self, r: usize) -> &[usize] {
        &self.blocks[r]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn scheme(&self) -> PartitionScheme {
        self.scheme
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

/// Splits `0..dim` into `r` blocks.
///
/// Sequential and random schemes give the first R−1 blocks ⌊M/R⌋ features
/// and the last block the rest. Interleaved strides by R, so leading blocks
/// get one extra feature when R does not divide M.
pub fn make_partition(dim: usize, r: usize, scheme: PartitionScheme, seed: u64) -> Result<Partition> {
    if r == 0 {
        return Err(Error::InvalidConfig("number of blocks must be at least 1".into()));
    }
    if r > dim {
        return Err(Error::InvalidConfig(format!(
            "cannot split {dim} features into {r} blocks"
        )));
    }
    let sequential = |order: &[usize]| {
        let size = dim / r;
        (0..r)
            .map(|b| {
                let end = if b + 1 == r { dim } else { (b + 1) * size };
                order[b * size..end].to_vec()
            })
            .collect::<Vec<_>>()
    };
    let (blocks, seed) = match scheme {
        PartitionScheme::Sequential => (sequential(&(0..dim).collect::<Vec<_>>()), None),
        PartitionScheme::Interleaved => (
            (0..r).map(|b| (b..dim).step_by(r).collect()).collect(),
            None,
        ),
        PartitionScheme::Random => {
            let mut order: Vec<usize> = (0..dim).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            (sequential(&order), Some(seed))
        }
        PartitionScheme::Custom => {
            return Err(Error::InvalidConfig(
                "custom partitions are built with Partition::from_blocks".into(),
            ))
        }
    };
    Ok(Partition {
        blocks,
        scheme,
        seed,
    })
}

/// One shared-kernel model per partition block.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PartitionedModel<T> {
    partition: Partition,
    models: Vec<SharedKernelModel<T>>,
}

impl<T: Scalar> PartitionedModel<T> {
    pub fn new(partition: Partition, models: Vec<SharedKernelModel<T>>) -> Result<Self> {
        let pm = Self { partition, models };
        pm.validate()?;
        Ok(pm)
    }

    /// Wraps an unpartitioned model as a single block.
    pub fn from_single(model: SharedKernelModel<T>) -> Self {
        Self {
            partition: Partition::single(model.dim()),
            models: vec![model],
        }
    }

    /// Checks the partition, the per-block dimensions and shared K and L.
    pub fn validate(&self) -> Result<()> {
        self.partition.validate(self.partition.dim())?;
        if self.models.len() != self.partition.num_blocks() {
            return Err(Error::DimensionMismatch {
                expected: self.partition.num_blocks(),
                found: self.models.len(),
            });
        }
        let (k, l) = (self.models[0].num_components(), self.models[0].num_classes());
        for (r, m) in self.models.iter().enumerate() {
            let wrap = |e: Error| e.at_block(r + 1);
            if m.dim() != self.partition.block(r).len() {
                return Err(wrap(Error::DimensionMismatch {
                    expected: self.partition.block(r).len(),
                    found: m.dim(),
                }));
            }
            if m.num_components() != k {
                return Err(wrap(Error::DimensionMismatch {
                    expected: k,
                    found: m.num_components(),
                }));
            }
            if m.num_classes() != l {
                return Err(wrap(Error::DimensionMismatch {
                    expected: l,
                    found: m.num_classes(),
                }));
            }
            m.validate().map_err(|v| wrap(Error::Invariant(v)))?;
        }
        Ok(())
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn models(&self) -> &[SharedKernelModel<T>] {
        &self.models
    }

    pub fn into_models(self) -> Vec<SharedKernelModel<T>> {
        self.models
    }

    pub fn num_blocks(&self) -> usize {
        self.models.len()
    }

    pub fn num_components(&self) -> usize {
        self.models[0].num_components()
    }

    /// Weight matrices of every block.
    pub fn weights(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.models.iter().map(SharedKernelModel::weights)
    }

    pub fn cast<U: Scalar>(&self) -> PartitionedModel<U> {
        PartitionedModel {
            partition: self.partition.clone(),
            models: self.models.iter().map(SharedKernelModel::cast).collect(),
        }
    }
}

impl<T: Scalar> ClassScorer<T> for PartitionedModel<T> {
    fn num_classes(&self) -> usize {
        self.models[0].num_classes()
    }

    fn dim(&self) -> usize {
        self.partition.dim()
    }

    /// Σ_r ln p(x_r | c = j) over blocks.
    fn class_scores(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let mut total: Option<Vec<T>> = None;
        let mut sub = Vec::new();
        for (block, model) in self.partition.blocks.iter().zip(&self.models) {
            sub.clear();
            sub.extend(block.iter().map(|&i| x[i]));
            let s = model.class_scores(&sub)?;
            match total.as_mut() {
                None => total = Some(s),
                Some(t) => t.iter_mut().zip(s).for_each(|(a, b)| *a += b),
            }
        }
        Ok(total.expect("partition has at least one block"))
    }
}

/// How block trainings are scheduled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockSchedule {
    /// All blocks advance one pass at a time; the joint model is validated after each pass.
    #[default]
    Lockstep,
    /// Each block runs to completion on its own; only the final joint model is validated.
    Independent,
}

/// PSKEM with the default lockstep schedule.
pub fn train_pskem<T: Scalar>(
    data: &LabeledDataset<T>,
    partition: &Partition,
    cfg: &TrainConfig,
    validation: Option<&LabeledDataset<T>>,
) -> Result<TrainOutcome<PartitionedModel<T>>> {
    train_pskem_with(data, partition, cfg, validation, BlockSchedule::Lockstep)
}

/// Trains one SKEM per block on its column slice. Block r draws its initial
/// model from RNG stream r, so a single block reproduces [`crate::em::train_skem`].
///
/// The recorded log-likelihood is the sum over blocks.
pub fn train_pskem_with<T: Scalar>(
    data: &LabeledDataset<T>,
    partition: &Partition,
    cfg: &TrainConfig,
    validation: Option<&LabeledDataset<T>>,
    schedule: BlockSchedule,
) -> Result<TrainOutcome<PartitionedModel<T>>> {
    partition.validate(data.dim())?;
    if let Some(v) = validation {
        if v.dim() != data.dim() {
            return Err(Error::DimensionMismatch {
                expected: data.dim(),
                found: v.dim(),
            });
        }
    }
    let sliced: Vec<LabeledDataset<T>> = partition
        .blocks()
        .iter()
        .map(|b| data.select_features(b))
        .collect();
    let mut trainers = sliced
        .iter()
        .enumerate()
        .map(|(r, d)| SkemTrainer::new(d, cfg, r as u64).map_err(|e| e.at_block(r + 1)))
        .collect::<Result<Vec<_>>>()?;

    let snapshot = |trainers: &[SkemTrainer<'_, T>]| PartitionedModel {
        partition: partition.clone(),
        models: trainers.iter().map(|t| t.model().clone()).collect(),
    };

    let mut accuracy = Vec::new();
    let mut best: Option<BestSnapshot<PartitionedModel<T>>> = None;
    match schedule {
        BlockSchedule::Lockstep => loop {
            let advanced = for_each_block(&mut trainers, cfg.parallel, |t| t.step())?;
            if !advanced.iter().any(|&a| a) {
                break;
            }
            if let Some(v) = validation {
                let joint = snapshot(&trainers);
                let acc = classifier::accuracy(&joint, v)?;
                accuracy.push(acc);
                if best.as_ref().map_or(true, |b| acc > b.accuracy) {
                    let pass = trainers.iter().map(SkemTrainer::passes).max().unwrap_or(0);
                    best = Some(BestSnapshot {
                        model: joint,
                        pass,
                        accuracy: acc,
                    });
                }
            }
        },
        BlockSchedule::Independent => {
            for_each_block(&mut trainers, cfg.parallel, |t| {
                while t.step()? {}
                Ok(())
            })?;
            if let Some(v) = validation {
                let joint = snapshot(&trainers);
                let acc = classifier::accuracy(&joint, v)?;
                let pass = trainers.iter().map(SkemTrainer::passes).max().unwrap_or(0);
                accuracy.push(acc);
                best = Some(BestSnapshot {
                    model: joint,
                    pass,
                    accuracy: acc,
                });
            }
        }
    }

    let mut models = Vec::with_capacity(trainers.len());
    let mut histories = Vec::with_capacity(trainers.len());
    for (r, t) in trainers.into_iter().enumerate() {
        let (m, h) = t.finish().map_err(|e| e.at_block(r + 1))?;
        models.push(m);
        histories.push(h);
    }
    let mut history = sum_histories(&histories);
    history.accuracy = accuracy;
    Ok(TrainOutcome {
        model: PartitionedModel {
            partition: partition.clone(),
            models,
        },
        history,
        best,
    })
}

/// Applies `f` to every trainer, concurrently when asked; the first failing
/// block (by index) determines the error.
fn for_each_block<T, R, F>(trainers: &mut [SkemTrainer<'_, T>], parallel: bool, f: F) -> Result<Vec<R>>
where
    T: Scalar,
    R: Send,
    F: Fn(&mut SkemTrainer<'_, T>) -> Result<R> + Sync + Send,
{
    let results: Vec<Result<R>> = if parallel && trainers.len() > 1 {
        trainers.par_iter_mut().map(&f).collect()
    } else {
        trainers.iter_mut().map(&f).collect()
    };
    results
        .into_iter()
        .enumerate()
        .map(|(r, res)| res.map_err(|e| e.at_block(r + 1)))
        .collect()
}

/// Sums per-block likelihood traces. A block that stopped early contributes
/// its last value to later passes.
fn sum_histories(histories: &[TrainHistory]) -> TrainHistory {
    let passes = histories.iter().map(TrainHistory::passes).max().unwrap_or(0);
    let at = |h: &TrainHistory, p: usize| -> f64 {
        if p == 0 {
            h.initial_log_likelihood
        } else {
            h.log_likelihood
                .get(p - 1)
                .or(h.log_likelihood.last())
                .copied()
                .unwrap_or(h.initial_log_likelihood)
        }
    };
    let total = |p: usize| -> f64 {
        let mut it = histories.iter();
        let first = at(it.next().expect("at least one block"), p);
        it.fold(first, |acc, h| acc + at(h, p))
    };
    TrainHistory {
        initial_log_likelihood: total(0),
        log_likelihood: (1..=passes).map(total).collect(),
        accuracy: Vec::new(),
    }
}

/// Expands class `class` of a partitioned model into an ordinary mixture
/// over all M features with K^R components.
///
/// Tuples (k_1, .., k_R) are enumerated lexicographically with block 0 most
/// significant. Each component's weight is Π_r π^{(r)}_{k_r, class}, its mean
/// the block means placed at their feature indices and its covariance the
/// block covariances placed on the matching block-diagonal positions.
pub fn expand_joint<T: Scalar>(pm: &PartitionedModel<T>, class: usize) -> Result<MixtureModel<T>> {
    let l = ClassScorer::num_classes(pm);
    if class >= l {
        return Err(Error::LabelOutOfRange {
            label: class + 1,
            num_classes: l,
        });
    }
    let k = pm.num_components();
    let r = pm.num_blocks();
    let terms = (k as f64).powi(r as i32);
    if terms > EXPAND_CAP {
        return Err(Error::InstanceTooLarge {
            terms,
            cap: EXPAND_CAP,
        });
    }
    let dim = pm.partition.dim();
    let mut components = Vec::with_capacity(terms as usize);
    let mut weights = Vec::with_capacity(terms as usize);
    let mut tuple = vec![0usize; r];
    loop {
        let mut w = T::one();
        let mut mean = vec![T::zero(); dim];
        let mut cov = Matrix::zeros(dim, dim);
        for (b, &kb) in tuple.iter().enumerate() {
            let model = &pm.models[b];
            let idx = pm.partition.block(b);
            let comp = &model.components()[kb];
            w *= model.weights().get(class, kb);
            for (a, &i) in idx.iter().enumerate() {
                mean[i] = comp.mean()[a];
                for (c, &j) in idx.iter().enumerate() {
                    cov.set(i, j, comp.covariance().get(a, c));
                }
            }
        }
        components.push(GaussianComponent::new(mean, cov)?);
        weights.push(w);

        // odometer, last block fastest
        let mut pos = r;
        loop {
            if pos == 0 {
                return Ok(MixtureModel {
                    components,
                    weights,
                });
            }
            pos -= 1;
            tuple[pos] += 1;
            if tuple[pos] < k {
                break;
            }
            tuple[pos] = 0;
        }
    }
}

/// Operation count N_P·K·N·(2 + m + m² + m³) summed over blocks of size m.
pub fn complexity_estimate(n: usize, block_dims: &[usize], k: usize, passes: usize) -> f64 {
    let scale = passes as f64 * k as f64 * n as f64;
    block_dims
        .iter()
        .map(|&m| {
            let m = m as f64;
            scale * (2.0 + m + m * m + m * m * m)
        })
        .sum()
}

//! Maximum-likelihood shared-kernel classification and its metrics.
//!
//! Classes are assumed equally likely a priori, so the MAP decision is the
//! argmax of the class-conditional log-likelihoods.

use serde::{Deserialize, Serialize};

use crate::em::map_chunks;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{LabeledDataset, MixtureModel, SharedKernelModel};
use crate::scalar::Scalar;

/// Anything producing per-class log-likelihood scores.
pub trait ClassScorer<T: Scalar>: Sync {
    fn num_classes(&self) -> usize;

    fn dim(&self) -> usize;

    /// ln p(x | c = j) for j = 0..L.
    fn class_scores(&self, x: &[T]) -> Result<Vec<T>>;
}

impl<T: Scalar> ClassScorer<T> for SharedKernelModel<T> {
    fn num_classes(&self) -> usize {
        SharedKernelModel::num_classes(self)
    }

    fn dim(&self) -> usize {
        SharedKernelModel::dim(self)
    }

    fn class_scores(&self, x: &[T]) -> Result<Vec<T>> {
        SharedKernelModel::class_scores(self, x)
    }
}

/// A single unlabeled mixture scores as a one-class model.
impl<T: Scalar> ClassScorer<T> for MixtureModel<T> {
    fn num_classes(&self) -> usize {
        1
    }

    fn dim(&self) -> usize {
        MixtureModel::dim(self)
    }

    fn class_scores(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(vec![self.log_density(x)?])
    }
}

/// Per-class log-likelihood scores.
pub fn class_scores<T: Scalar, M: ClassScorer<T> + ?Sized>(model: &M, x: &[T]) -> Result<Vec<T>> {
    model.class_scores(x)
}

/// Index of the largest score; ties go to the smallest index. NaN is an error.
pub fn argmax_scores<T: Scalar>(scores: &[T]) -> Result<usize> {
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            return Err(Error::NanScore);
        }
        if s > scores[best] {
            best = j;
        }
    }
    Ok(best)
}

/// ML class (0-based).
pub fn classify<T: Scalar, M: ClassScorer<T> + ?Sized>(model: &M, x: &[T]) -> Result<usize> {
    argmax_scores(&model.class_scores(x)?)
}

/// L×L counts, rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// trace / total; zero for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.correct() as f64 / total as f64
        }
    }

    fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

fn check_test<T: Scalar, M: ClassScorer<T> + ?Sized>(
    model: &M,
    test: &LabeledDataset<T>,
) -> Result<()> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if test.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: test.dim(),
        });
    }
    if test.num_classes() != model.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: model.num_classes(),
            found: test.num_classes(),
        });
    }
    Ok(())
}

/// Classifies every test sample; returns the confusion matrix and accuracy.
pub fn evaluate<T: Scalar, M: ClassScorer<T> + ?Sized>(
    model: &M,
    test: &LabeledDataset<T>,
) -> Result<(ConfusionMatrix, f64)> {
    check_test(model, test)?;
    let l = model.num_classes();
    let parts = map_chunks(test.len(), true, |rows| -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::new(l);
        for i in rows {
            let predicted = classify(model, test.features().row(i))?;
            cm.record(test.labels()[i], predicted);
        }
        Ok(cm)
    });
    let mut cm = ConfusionMatrix::new(l);
    for p in parts {
        cm.merge(&p?);
    }
    let acc = cm.accuracy();
    Ok((cm, acc))
}

pub fn accuracy<T: Scalar, M: ClassScorer<T> + ?Sized>(
    model: &M,
    test: &LabeledDataset<T>,
) -> Result<f64> {
    evaluate(model, test).map(|(_, a)| a)
}

/// (N_S, N_T) for one L×K weight matrix: entries ≥ τ are counted per
/// component; N_T sums all counts and N_S the counts of components used by
/// two or more classes.
pub fn shared_counts<T: Scalar>(weights: &Matrix<T>, tau: f64) -> (usize, usize) {
    let tau = T::lit(tau);
    let (mut shared, mut total) = (0, 0);
    for k in 0..weights.cols() {
        let a = (0..weights.rows())
            .filter(|&j| weights.get(j, k) >= tau)
            .count();
        total += a;
        if a > 1 {
            shared += a;
        }
    }
    (shared, total)
}

/// N_S / N_T, with counts summed over every weight matrix given (one per partition block).
pub fn shared_proportion<'a, T: Scalar + 'a>(
    blocks: impl IntoIterator<Item = &'a Matrix<T>>,
    tau: f64,
) -> Result<f64> {
    let (mut shared, mut total) = (0, 0);
    for w in blocks {
        let (s, t) = shared_counts(w, tau);
        shared += s;
        total += t;
    }
    if total == 0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(shared as f64 / total as f64)
}

/// Significance threshold used for the shared-proportion metric.
pub const SHARED_THRESHOLD: f64 = 0.01;

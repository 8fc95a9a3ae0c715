//! Mixture-model data types and log-domain Gaussian evaluation.
//!
//! Class labels are 0-based everywhere inside the crate; the 1-based
//! convention only appears in user-facing text (error messages, violation
//! reports) and at the file/CLI boundary.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{factor_with_repair, CholeskyFactor, Matrix};
use crate::scalar::Scalar;

/// Tolerance on Π row sums: 1e-12, widened for low-precision scalars.
pub fn weight_tolerance<T: Scalar>() -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(64.0))
}

/// One Gaussian kernel N(μ, P) with a cached Cholesky factor of P.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(
    bound = "T: Scalar",
    from = "ComponentParts<T>",
    into = "ComponentParts<T>"
)]
pub struct GaussianComponent<T> {
    mean: Vec<T>,
    covariance: Matrix<T>,
    factor: Option<CholeskyFactor<T>>,
    jitter: T,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ComponentParts<T> {
    mean: Vec<T>,
    covariance: Matrix<T>,
}

impl<T: Scalar> From<ComponentParts<T>> for GaussianComponent<T> {
    fn from(p: ComponentParts<T>) -> Self {
        GaussianComponent::from_parts_unchecked(p.mean, p.covariance)
    }
}

impl<T: Scalar> From<GaussianComponent<T>> for ComponentParts<T> {
    fn from(c: GaussianComponent<T>) -> Self {
        ComponentParts {
            mean: c.mean,
            covariance: c.covariance,
        }
    }
}

impl<T: Scalar> GaussianComponent<T> {
    /// Symmetrizes the covariance and factors it, applying diagonal jitter
    /// if the plain factorization fails.
    pub fn new(mean: Vec<T>, covariance: Matrix<T>) -> Result<Self> {
        check_square(&mean, &covariance)?;
        let repaired = factor_with_repair(covariance)?;
        Ok(Self {
            mean,
            covariance: repaired.covariance,
            factor: Some(repaired.factor),
            jitter: repaired.jitter,
        })
    }

    /// Stores the parts as given. The factor is absent when `covariance` is
    /// not SPD; [`SharedKernelModel::validate`] reports such components and
    /// density evaluation on them fails.
    pub fn from_parts_unchecked(mean: Vec<T>, covariance: Matrix<T>) -> Self {
        let factor = if covariance.rows() == mean.len() && covariance.cols() == mean.len() {
            CholeskyFactor::new(&covariance)
        } else {
            None
        };
        Self {
            mean,
            covariance,
            factor,
            jitter: T::zero(),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix<T> {
        &self.covariance
    }

    /// Diagonal jitter added during construction (zero if none was needed).
    pub fn jitter(&self) -> T {
        self.jitter
    }

    pub fn factor(&self) -> Option<&CholeskyFactor<T>> {
        self.factor.as_ref()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.factor.is_some()
    }

    /// ln N(x; μ, P) = −½(M ln 2π + ln det P + ‖L⁻¹(x−μ)‖²).
    pub fn log_density(&self, x: &[T]) -> Result<T> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        if self.factor.is_none() {
            return Err(Error::NotPositiveDefinite);
        }
        let mut scratch = Vec::with_capacity(self.dim());
        Ok(self.log_density_with(x, &mut scratch))
    }

    /// Unchecked hot-path variant; `scratch` is reused across calls.
    #[inline]
    pub(crate) fn log_density_with(&self, x: &[T], scratch: &mut Vec<T>) -> T {
        let factor = self
            .factor
            .as_ref()
            .expect("density evaluated on a component without a factor");
        scratch.clear();
        scratch.extend(x.iter().zip(&self.mean).map(|(&a, &b)| a - b));
        let quad = factor.mahalanobis_sq(scratch);
        let m = T::from_usize_lossy(self.dim());
        -T::lit(0.5) * (m * T::LN_2PI + factor.log_det() + quad)
    }

    pub fn cast<U: Scalar>(&self) -> GaussianComponent<U> {
        GaussianComponent::from_parts_unchecked(
            self.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
            self.covariance.cast(),
        )
    }
}

fn check_square<T: Scalar>(mean: &[T], cov: &Matrix<T>) -> Result<()> {
    if cov.rows() != mean.len() || cov.cols() != mean.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            found: if cov.rows() != mean.len() {
                cov.rows()
            } else {
                cov.cols()
            },
        });
    }
    Ok(())
}

/// First invariant violation found by [`SharedKernelModel::validate`].
///
/// Row, class and component numbers are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NoComponents,
    WeightShape {
        rows: usize,
        cols: usize,
        classes: usize,
        components: usize,
    },
    NonFiniteWeight { row: usize, component: usize },
    NegativeWeight { row: usize, component: usize },
    WeightRowSum { row: usize, sum: f64 },
    ComponentDimension {
        component: usize,
        expected: usize,
        found: usize,
    },
    NonFiniteParameters { component: usize },
    AsymmetricCovariance { component: usize, deviation: f64 },
    NotPositiveDefinite { component: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoComponents => write!(f, "model has no components"),
            Violation::WeightShape {
                rows,
                cols,
                classes,
                components,
            } => write!(
                f,
                "weights matrix is {rows}x{cols}, expected {classes}x{components}"
            ),
            Violation::NonFiniteWeight { row, component } => {
                write!(f, "weights row {row} entry {component} is not finite")
            }
            Violation::NegativeWeight { row, component } => {
                write!(f, "weights row {row} entry {component} is negative")
            }
            Violation::WeightRowSum { row, sum } => write!(f, "weights row {row} sums to {sum}"),
            Violation::ComponentDimension {
                component,
                expected,
                found,
            } => write!(
                f,
                "component {component} has dimension {found}, expected {expected}"
            ),
            Violation::NonFiniteParameters { component } => {
                write!(f, "component {component} has non-finite parameters")
            }
            Violation::AsymmetricCovariance {
                component,
                deviation,
            } => write!(
                f,
                "component {component} covariance asymmetric by {deviation:e}"
            ),
            Violation::NotPositiveDefinite { component } => {
                write!(f, "component {component} not positive definite")
            }
        }
    }
}

/// Gaussian kernels shared by all classes plus an L×K matrix of
/// class-conditional mixing weights, row j holding Pr(z = k | c = j).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SharedKernelModel<T> {
    components: Vec<GaussianComponent<T>>,
    weights: Matrix<T>,
}

impl<T: Scalar> SharedKernelModel<T> {
    /// Checked constructor; fails with the first invariant violation.
    pub fn new(components: Vec<GaussianComponent<T>>, weights: Matrix<T>) -> Result<Self> {
        let model = Self::from_parts_unchecked(components, weights);
        model.validate().map_err(Error::Invariant)?;
        Ok(model)
    }

    pub fn from_parts_unchecked(components: Vec<GaussianComponent<T>>, weights: Matrix<T>) -> Self {
        Self {
            components,
            weights,
        }
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.dim())
    }

    pub fn components(&self) -> &[GaussianComponent<T>] {
        &self.components
    }

    /// L×K, row = class.
    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn into_parts(self) -> (Vec<GaussianComponent<T>>, Matrix<T>) {
        (self.components, self.weights)
    }

    pub fn validate(&self) -> std::result::Result<(), Violation> {
        let k = self.components.len();
        if k == 0 {
            return Err(Violation::NoComponents);
        }
        if self.weights.cols() != k || self.weights.rows() == 0 {
            return Err(Violation::WeightShape {
                rows: self.weights.rows(),
                cols: self.weights.cols(),
                classes: self.weights.rows().max(1),
                components: k,
            });
        }
        let tol = weight_tolerance::<T>();
        for j in 0..self.weights.rows() {
            let row = self.weights.row(j);
            for (c, &w) in row.iter().enumerate() {
                if !w.is_finite() {
                    return Err(Violation::NonFiniteWeight {
                        row: j + 1,
                        component: c + 1,
                    });
                }
                if w < T::zero() {
                    return Err(Violation::NegativeWeight {
                        row: j + 1,
                        component: c + 1,
                    });
                }
            }
            let sum: T = row.iter().copied().sum();
            if (sum - T::one()).abs() > tol {
                return Err(Violation::WeightRowSum {
                    row: j + 1,
                    sum: sum.as_f64(),
                });
            }
        }
        let dim = self.dim();
        for (i, c) in self.components.iter().enumerate() {
            let cov = c.covariance();
            if c.dim() != dim || cov.rows() != dim || cov.cols() != dim {
                return Err(Violation::ComponentDimension {
                    component: i + 1,
                    expected: dim,
                    found: if c.dim() != dim { c.dim() } else { cov.rows() },
                });
            }
            if !cov.is_finite() || c.mean().iter().any(|v| !v.is_finite()) {
                return Err(Violation::NonFiniteParameters { component: i + 1 });
            }
            let asym = cov.max_asymmetry();
            if asym > T::zero() {
                return Err(Violation::AsymmetricCovariance {
                    component: i + 1,
                    deviation: asym.as_f64(),
                });
            }
            if !c.is_positive_definite() {
                return Err(Violation::NotPositiveDefinite { component: i + 1 });
            }
        }
        Ok(())
    }

    /// ln p(x | c = class) = ln Σ_k π_{k,class} N(x; μ_k, P_k), `class` 0-based.
    pub fn class_log_density(&self, x: &[T], class: usize) -> Result<T> {
        self.check_input(x, class)?;
        let mut scratch = Vec::with_capacity(x.len());
        let mut comp_ld = vec![T::zero(); self.num_components()];
        self.component_log_densities(x, &mut scratch, &mut comp_ld);
        Ok(mix_log_density(self.weights.row(class), &comp_ld))
    }

    /// Per-class scores ln p(x | c = j) for all j.
    pub fn class_scores(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x, 0)?;
        let mut scratch = Vec::with_capacity(x.len());
        let mut comp_ld = vec![T::zero(); self.num_components()];
        self.component_log_densities(x, &mut scratch, &mut comp_ld);
        Ok((0..self.num_classes())
            .map(|j| mix_log_density(self.weights.row(j), &comp_ld))
            .collect())
    }

    fn check_input(&self, x: &[T], class: usize) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        if class >= self.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: class + 1,
                num_classes: self.num_classes(),
            });
        }
        if let Some(i) = self.components.iter().position(|c| !c.is_positive_definite()) {
            return Err(Error::Invariant(Violation::NotPositiveDefinite {
                component: i + 1,
            }));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn component_log_densities(&self, x: &[T], scratch: &mut Vec<T>, out: &mut [T]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.log_density_with(x, scratch);
        }
    }

    pub fn cast<U: Scalar>(&self) -> SharedKernelModel<U> {
        SharedKernelModel::from_parts_unchecked(
            self.components.iter().map(|c| c.cast()).collect(),
            self.weights.cast(),
        )
    }
}

/// ln Σ_k w_k exp(ld_k), max-shifted. Zero weights contribute nothing.
#[inline]
pub(crate) fn mix_log_density<T: Scalar>(weights: &[T], comp_ld: &[T]) -> T {
    let mut max = T::neg_infinity();
    for (&w, &ld) in weights.iter().zip(comp_ld) {
        if w > T::zero() {
            max = max.max(w.ln() + ld);
        }
    }
    if max == T::neg_infinity() || !max.is_finite() {
        return max;
    }
    let mut sum = T::zero();
    for (&w, &ld) in weights.iter().zip(comp_ld) {
        if w > T::zero() {
            sum += (w.ln() + ld - max).exp();
        }
    }
    max + sum.ln()
}

/// Unlabeled Gaussian mixture Σ_k π_k N(x; μ_k, P_k).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MixtureModel<T> {
    pub components: Vec<GaussianComponent<T>>,
    pub weights: Vec<T>,
}

impl<T: Scalar> MixtureModel<T> {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.dim())
    }

    pub fn log_density(&self, x: &[T]) -> Result<T> {
        let mut lds = Vec::with_capacity(self.components.len());
        for c in &self.components {
            lds.push(c.log_density(x)?);
        }
        Ok(mix_log_density(&self.weights, &lds))
    }

    /// Views the mixture as a one-class shared-kernel model.
    pub fn as_shared_kernel(&self) -> SharedKernelModel<T> {
        SharedKernelModel::from_parts_unchecked(
            self.components.clone(),
            Matrix::from_vec(1, self.weights.len(), self.weights.clone())
                .expect("1×K weights"),
        )
    }
}

/// N samples in R^M with 0-based class labels and the per-class index sets.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "DatasetParts<T>")]
pub struct LabeledDataset<T> {
    features: Matrix<T>,
    labels: Vec<usize>,
    num_classes: usize,
    #[serde(skip_serializing)]
    class_indices: Vec<Vec<usize>>,
    label_names: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(bound = "T: Scalar")]
struct DatasetParts<T> {
    features: Matrix<T>,
    labels: Vec<usize>,
    num_classes: usize,
    label_names: Option<Vec<String>>,
}

impl<T: Scalar> TryFrom<DatasetParts<T>> for LabeledDataset<T> {
    type Error = Error;

    fn try_from(p: DatasetParts<T>) -> Result<Self> {
        let d = LabeledDataset::new(p.features, p.labels, p.num_classes)?;
        match p.label_names {
            Some(n) => d.with_label_names(n),
            None => Ok(d),
        }
    }
}

impl<T: Scalar> LabeledDataset<T> {
    /// `labels` are 0-based and must be `< num_classes`.
    pub fn new(features: Matrix<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad + 1,
                num_classes,
            });
        }
        let class_indices = index_sets(&labels, num_classes);
        Ok(Self {
            features,
            labels,
            num_classes,
            class_indices,
            label_names: None,
        })
    }

    /// Labels numbered 1..=L, as they appear in files and on the command line.
    pub fn from_one_based(features: Matrix<T>, labels: &[usize], num_classes: usize) -> Result<Self> {
        let zero_based = labels
            .iter()
            .map(|&l| {
                l.checked_sub(1).ok_or(Error::LabelOutOfRange {
                    label: 0,
                    num_classes,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(features, zero_based, num_classes)
    }

    pub fn with_label_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes,
                found: names.len(),
            });
        }
        self.label_names = Some(names);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_names(&self) -> Option<&[String]> {
        self.label_names.as_deref()
    }

    /// Γ_j: indices of the samples in class `j`.
    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.class_indices[class]
    }

    /// l(j) for every class.
    pub fn class_sizes(&self) -> Vec<usize> {
        self.class_indices.iter().map(Vec::len).collect()
    }

    /// Rejects datasets with an empty class; required before training.
    pub fn check_trainable(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(j) = self.class_indices.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass { class: j + 1 });
        }
        Ok(())
    }

    /// Samples at `indices`, in that order, keeping L and the label names.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        Self {
            features: self.features.select_rows(indices),
            class_indices: index_sets(&labels, self.num_classes),
            labels,
            num_classes: self.num_classes,
            label_names: self.label_names.clone(),
        }
    }

    /// Same samples restricted to feature columns `cols`.
    pub fn select_features(&self, cols: &[usize]) -> Self {
        Self {
            features: self.features.select_columns(cols),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            class_indices: self.class_indices.clone(),
            label_names: self.label_names.clone(),
        }
    }

    /// Replaces the features, keeping labels. Row count must match.
    pub fn with_features(&self, features: Matrix<T>) -> Result<Self> {
        if features.rows() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: features.rows(),
            });
        }
        Ok(Self {
            features,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            class_indices: self.class_indices.clone(),
            label_names: self.label_names.clone(),
        })
    }

}

fn index_sets(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); num_classes];
    for (n, &l) in labels.iter().enumerate() {
        sets[l].push(n);
    }
    sets
}

/// N×K posterior association weights, rows summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponsibilityMatrix<T>(pub(crate) Matrix<T>);

impl<T: Scalar> ResponsibilityMatrix<T> {
    /// Wraps an N×K matrix after checking entries lie in [0,1] and rows sum to 1 within 1e-10.
    pub fn new(values: Matrix<T>) -> Result<Self> {
        let tol = T::lit(1e-10).max(T::epsilon() * T::lit(64.0));
        for (n, row) in values.row_iter().enumerate() {
            let sum: T = row.iter().copied().sum();
            let in_range = row.iter().all(|&w| w >= T::zero() && w <= T::one());
            if !in_range || (sum - T::one()).abs() > tol {
                return Err(Error::DegenerateResponsibility { row: n });
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn num_samples(&self) -> usize {
        self.0.rows()
    }

    pub fn num_components(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, n: usize) -> &[T] {
        self.0.row(n)
    }

    /// Σ_n w_nk per component.
    pub fn column_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.0.cols()];
        for row in self.0.row_iter() {
            for (s, &w) in sums.iter_mut().zip(row) {
                *s += w;
            }
        }
        sums
    }
}

/// ln N(x; comp) via the cached factor.
pub fn gaussian_log_density<T: Scalar>(x: &[T], comp: &GaussianComponent<T>) -> Result<T> {
    comp.log_density(x)
}

/// ln p(x | c = class, Θ), `class` 0-based.
pub fn class_conditional_log_density<T: Scalar>(
    x: &[T],
    model: &SharedKernelModel<T>,
    class: usize,
) -> Result<T> {
    model.class_log_density(x, class)
}

//! Supervised shared-kernel EM (SKEM), its pooled-covariance MDA variant,
//! standard unsupervised EM, and the auxiliary-function evaluators.
//!
//! One pass is an E-step with the previous-pass parameters followed by the
//! weight, mean and covariance updates, in that order. Means are updated
//! before covariances so the covariance update centres on the new means.
//!
//! Every reduction over samples is split into fixed [`CHUNK`]-row blocks whose
//! partial sums are combined in block order, so serial and parallel runs
//! produce bit-identical models.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier;
use crate::error::{Error, Result};
use crate::linalg::{factor_with_repair, Matrix};
use crate::model::{
    mix_log_density, GaussianComponent, LabeledDataset, MixtureModel, ResponsibilityMatrix,
    SharedKernelModel,
};
use crate::scalar::Scalar;

/// Rows per reduction block.
pub const CHUNK: usize = 256;

/// A component whose responsibility mass falls below this fraction of N is dead.
pub const DEAD_COMPONENT_FRACTION: f64 = 1e-10;

/// Largest K^N the enumeration oracle accepts.
pub const BRUTEFORCE_CAP: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceMode {
    /// One covariance per component.
    #[default]
    PerComponent,
    /// One covariance shared by every component (MDA).
    Pooled,
}

/// EM settings. Initialization draws every mean coordinate iid uniform on
/// `init_mean_range`, sets each covariance to σ²I and every Π row uniform.
///
/// Randomness comes from a ChaCha8 generator seeded with `seed`; stream 0 is
/// used for an unpartitioned model and stream r for partition block r.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub num_components: usize,
    pub max_passes: usize,
    pub init_mean_range: (f64, f64),
    pub init_sigma: f64,
    pub seed: u64,
    pub covariance_mode: CovarianceMode,
    /// Lower bound applied to Π entries after each weight update (rows renormalized). 0 disables.
    pub min_weight: f64,
    /// Stop once the relative log-likelihood gain of a pass drops below this. Off when `None`.
    pub early_stop: Option<f64>,
    /// Spread E- and M-step work over the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_components: 12,
            max_passes: 30,
            init_mean_range: (-2.0, 2.0),
            init_sigma: 2.0,
            seed: 0,
            covariance_mode: CovarianceMode::PerComponent,
            min_weight: 0.0,
            early_stop: None,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_components == 0 {
            return bad("number of components must be at least 1");
        }
        if self.max_passes == 0 {
            return bad("number of passes must be at least 1");
        }
        let (a, b) = self.init_mean_range;
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return bad("initial mean range must satisfy a < b");
        }
        if !(self.init_sigma > 0.0) || !self.init_sigma.is_finite() {
            return bad("initial sigma must be positive");
        }
        if !(0.0..1.0).contains(&self.min_weight)
            || self.min_weight * self.num_components as f64 >= 1.0
        {
            return bad("min_weight must lie in [0, 1/K)");
        }
        if let Some(tol) = self.early_stop {
            if !(tol >= 0.0) {
                return bad("early-stop tolerance must be non-negative");
            }
        }
        Ok(())
    }
}

/// Per-pass record of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// ln p(X|C,Θ₀) of the initial model.
    pub initial_log_likelihood: f64,
    /// ln p(X|C,Θ_p) for p = 1..=passes run.
    pub log_likelihood: Vec<f64>,
    /// Held-out accuracy after each pass, when a validation set was given.
    pub accuracy: Vec<f64>,
}

impl TrainHistory {
    pub fn passes(&self) -> usize {
        self.log_likelihood.len()
    }

    /// First pass (1-based) reaching the maximum accuracy.
    pub fn best_pass(&self) -> Option<usize> {
        first_max(&self.accuracy).map(|i| i + 1)
    }
}

pub(crate) fn first_max(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Model snapshot retained for the best validation accuracy.
#[derive(Clone, Debug)]
pub struct BestSnapshot<M> {
    pub model: M,
    /// 1-based pass index.
    pub pass: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Model after the last pass.
    pub model: M,
    pub history: TrainHistory,
    /// Present when validation data was supplied.
    pub best: Option<BestSnapshot<M>>,
}

/// Generator for block `stream` of a run seeded with `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random initial model: means uniform on the configured range (component
/// by component, coordinate by coordinate), covariances σ²I, uniform Π.
pub fn initial_model<T: Scalar>(
    dim: usize,
    num_classes: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<SharedKernelModel<T>> {
    cfg.validate()?;
    let k = cfg.num_components;
    let (a, b) = cfg.init_mean_range;
    let var = T::lit(cfg.init_sigma * cfg.init_sigma);
    let mut components = Vec::with_capacity(k);
    for _ in 0..k {
        let mean: Vec<T> = (0..dim).map(|_| T::lit(rng.gen_range(a..b))).collect();
        components.push(GaussianComponent::new(mean, Matrix::scaled_identity(dim, var))?);
    }
    let uniform = T::one() / T::from_usize_lossy(k);
    let weights = Matrix::from_vec(num_classes, k, vec![uniform; num_classes * k])?;
    Ok(SharedKernelModel::from_parts_unchecked(components, weights))
}

/// Runs `f` over fixed row blocks of `0..n`, returning results in block order.
pub(crate) fn map_chunks<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
{
    let blocks = n.div_ceil(CHUNK);
    let range = |b: usize| b * CHUNK..((b + 1) * CHUNK).min(n);
    if parallel {
        (0..blocks).into_par_iter().map(|b| f(range(b))).collect()
    } else {
        (0..blocks).map(|b| f(range(b))).collect()
    }
}

fn check_compatible<T: Scalar>(model: &SharedKernelModel<T>, data: &LabeledDataset<T>) -> Result<()> {
    if model.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: data.dim(),
        });
    }
    if model.num_classes() != data.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: model.num_classes(),
            found: data.num_classes(),
        });
    }
    model.validate().map_err(Error::Invariant)
}

/// E-step: w_nk ∝ π_{k,c_n} N(x_n; μ_k, P_k), normalized per row in the log domain.
pub fn e_step<T: Scalar>(
    model: &SharedKernelModel<T>,
    data: &LabeledDataset<T>,
) -> Result<ResponsibilityMatrix<T>> {
    e_step_with_ll(model, data, true).map(|(w, _)| w)
}

/// E-step that also returns ln p(X|C,Θ) = Σ_n ln Σ_k π_{k,c_n} N(x_n; k).
pub(crate) fn e_step_with_ll<T: Scalar>(
    model: &SharedKernelModel<T>,
    data: &LabeledDataset<T>,
    parallel: bool,
) -> Result<(ResponsibilityMatrix<T>, T)> {
    check_compatible(model, data)?;
    let k = model.num_components();
    let n = data.len();
    let log_weights: Vec<T> = model.weights().as_slice().iter().map(|w| w.ln()).collect();
    let x = data.features();
    let labels = data.labels();

    let blocks = map_chunks(n, parallel, |rows| -> Result<(Vec<T>, T)> {
        let mut out = vec![T::zero(); rows.len() * k];
        let mut scratch = Vec::with_capacity(x.cols());
        let mut ll = T::zero();
        for (local, i) in rows.enumerate() {
            let terms = &mut out[local * k..(local + 1) * k];
            model.component_log_densities(x.row(i), &mut scratch, terms);
            let lw = &log_weights[labels[i] * k..(labels[i] + 1) * k];
            for (t, &l) in terms.iter_mut().zip(lw) {
                *t += l;
            }
            let max = terms.iter().copied().fold(T::neg_infinity(), T::max);
            if !max.is_finite() {
                return Err(Error::DegenerateResponsibility { row: i });
            }
            let mut sum = T::zero();
            for t in terms.iter_mut() {
                *t = (*t - max).exp();
                sum += *t;
            }
            for t in terms.iter_mut() {
                *t /= sum;
            }
            ll += max + sum.ln();
        }
        Ok((out, ll))
    });

    let mut values = Vec::with_capacity(n * k);
    let mut ll = T::zero();
    for block in blocks {
        let (v, l) = block?;
        values.extend(v);
        ll += l;
    }
    Ok((ResponsibilityMatrix(Matrix::from_vec(n, k, values)?), ll))
}

/// π_{ki} = (1/l(i)) Σ_{n∈Γ_i} w_nk, returned as an L×K matrix.
pub fn update_weights<T: Scalar>(
    w: &ResponsibilityMatrix<T>,
    data: &LabeledDataset<T>,
) -> Result<Matrix<T>> {
    if w.num_samples() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            found: w.num_samples(),
        });
    }
    let k = w.num_components();
    let mut pi = Matrix::zeros(data.num_classes(), k);
    for class in 0..data.num_classes() {
        let members = data.class_indices(class);
        if members.is_empty() {
            return Err(Error::EmptyClass { class: class + 1 });
        }
        let row = pi.row_mut(class);
        for &n in members {
            for (p, &v) in row.iter_mut().zip(w.row(n)) {
                *p += v;
            }
        }
        let count = T::from_usize_lossy(members.len());
        for p in row.iter_mut() {
            *p /= count;
        }
    }
    Ok(pi)
}

fn apply_weight_floor<T: Scalar>(pi: &mut Matrix<T>, floor: f64) {
    if floor <= 0.0 {
        return;
    }
    let floor = T::lit(floor);
    for j in 0..pi.rows() {
        let row = pi.row_mut(j);
        for p in row.iter_mut() {
            *p = p.max(floor);
        }
        let s: T = row.iter().copied().sum();
        for p in row.iter_mut() {
            *p /= s;
        }
    }
}

fn column_masses<T: Scalar>(w: &ResponsibilityMatrix<T>, parallel: bool) -> Result<Vec<T>> {
    let k = w.num_components();
    let n = w.num_samples();
    let partials = map_chunks(n, parallel, |rows| {
        let mut s = vec![T::zero(); k];
        for i in rows {
            for (a, &v) in s.iter_mut().zip(w.row(i)) {
                *a += v;
            }
        }
        s
    });
    let mut mass = vec![T::zero(); k];
    for p in partials {
        for (a, v) in mass.iter_mut().zip(p) {
            *a += v;
        }
    }
    let threshold = T::lit(DEAD_COMPONENT_FRACTION) * T::from_usize_lossy(n);
    if let Some(c) = mass.iter().position(|&m| !(m >= threshold) || m == T::zero()) {
        return Err(Error::DeadComponent {
            component: c + 1,
            mass: mass[c].as_f64(),
        });
    }
    Ok(mass)
}

fn check_rows<T: Scalar>(w: &ResponsibilityMatrix<T>, x: &Matrix<T>) -> Result<()> {
    if w.num_samples() != x.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            found: w.num_samples(),
        });
    }
    if x.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// μ_k = Σ_n w_nk x_n / Σ_n w_nk over all samples, regardless of class.
pub fn update_means<T: Scalar>(w: &ResponsibilityMatrix<T>, x: &Matrix<T>) -> Result<Vec<Vec<T>>> {
    update_means_impl(w, x, true)
}

fn update_means_impl<T: Scalar>(
    w: &ResponsibilityMatrix<T>,
    x: &Matrix<T>,
    parallel: bool,
) -> Result<Vec<Vec<T>>> {
    check_rows(w, x)?;
    let mass = column_masses(w, parallel)?;
    let (k, m) = (w.num_components(), x.cols());
    let partials = map_chunks(x.rows(), parallel, |rows| {
        let mut s = vec![T::zero(); k * m];
        for i in rows {
            let xi = x.row(i);
            for (c, &wik) in w.row(i).iter().enumerate() {
                for (a, &v) in s[c * m..(c + 1) * m].iter_mut().zip(xi) {
                    *a += wik * v;
                }
            }
        }
        s
    });
    let mut sums = vec![T::zero(); k * m];
    for p in partials {
        for (a, v) in sums.iter_mut().zip(p) {
            *a += v;
        }
    }
    Ok((0..k)
        .map(|c| sums[c * m..(c + 1) * m].iter().map(|&v| v / mass[c]).collect())
        .collect())
}

/// Σ_n w_nk (x_n−μ_k)(x_n−μ_k)ᵀ for every k, upper triangles mirrored.
fn scatter_sums<T: Scalar>(
    w: &ResponsibilityMatrix<T>,
    x: &Matrix<T>,
    means: &[Vec<T>],
    parallel: bool,
) -> Vec<Matrix<T>> {
    let (k, m) = (w.num_components(), x.cols());
    let partials = map_chunks(x.rows(), parallel, |rows| {
        let mut s = vec![T::zero(); k * m * m];
        let mut d = vec![T::zero(); m];
        for i in rows {
            let xi = x.row(i);
            for (c, &wik) in w.row(i).iter().enumerate() {
                if wik == T::zero() {
                    continue;
                }
                for ((dj, &xv), &mv) in d.iter_mut().zip(xi).zip(&means[c]) {
                    *dj = xv - mv;
                }
                let block = &mut s[c * m * m..(c + 1) * m * m];
                for a in 0..m {
                    let wa = wik * d[a];
                    let row = &mut block[a * m..(a + 1) * m];
                    for b in a..m {
                        row[b] += wa * d[b];
                    }
                }
            }
        }
        s
    });
    let mut sums = vec![T::zero(); k * m * m];
    for p in partials {
        for (a, v) in sums.iter_mut().zip(p) {
            *a += v;
        }
    }
    (0..k)
        .map(|c| {
            let mut mat = Matrix::zeros(m, m);
            let block = &sums[c * m * m..(c + 1) * m * m];
            for a in 0..m {
                for b in a..m {
                    mat.set(a, b, block[a * m + b]);
                    mat.set(b, a, block[a * m + b]);
                }
            }
            mat
        })
        .collect()
}

fn check_means<T: Scalar>(w: &ResponsibilityMatrix<T>, x: &Matrix<T>, means: &[Vec<T>]) -> Result<()> {
    if means.len() != w.num_components() {
        return Err(Error::DimensionMismatch {
            expected: w.num_components(),
            found: means.len(),
        });
    }
    if let Some(bad) = means.iter().find(|mu| mu.len() != x.cols()) {
        return Err(Error::DimensionMismatch {
            expected: x.cols(),
            found: bad.len(),
        });
    }
    Ok(())
}

/// P_k = Σ_n w_nk (x_n−μ_k)(x_n−μ_k)ᵀ / Σ_n w_nk, symmetrized and jitter-repaired.
pub fn update_covariances<T: Scalar>(
    w: &ResponsibilityMatrix<T>,
    x: &Matrix<T>,
    means: &[Vec<T>],
) -> Result<Vec<Matrix<T>>> {
    update_covariances_impl(w, x, means, true)
}

fn update_covariances_impl<T: Scalar>(
    w: &ResponsibilityMatrix<T>,
    x: &Matrix<T>,
    means: &[Vec<T>],
    parallel: bool,
) -> Result<Vec<Matrix<T>>> {
    check_rows(w, x)?;
    check_means(w, x, means)?;
    let mass = column_masses(w, parallel)?;
    scatter_sums(w, x, means, parallel)
        .into_iter()
        .zip(mass)
        .map(|(mut s, mk)| {
            for v in s.as_mut_slice() {
                *v /= mk;
            }
            factor_with_repair(s).map(|r| r.covariance)
        })
        .collect()
}

/// Pooled MDA covariance (1/N) Σ_k Σ_n w_nk (x_n−μ_k)(x_n−μ_k)ᵀ.
pub fn update_covariance_mda<T: Scalar>(
    w: &ResponsibilityMatrix<T>,
    x: &Matrix<T>,
    means: &[Vec<T>],
) -> Result<Matrix<T>> {
    update_covariance_mda_impl(w, x, means, true)
}

fn update_covariance_mda_impl<T: Scalar>(
    w: &ResponsibilityMatrix<T>,
    x: &Matrix<T>,
    means: &[Vec<T>],
    parallel: bool,
) -> Result<Matrix<T>> {
    check_rows(w, x)?;
    check_means(w, x, means)?;
    column_masses(w, parallel)?;
    let m = x.cols();
    let mut pooled = Matrix::zeros(m, m);
    for s in scatter_sums(w, x, means, parallel) {
        for (a, v) in pooled.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *a += *v;
        }
    }
    let n = T::from_usize_lossy(x.rows());
    for v in pooled.as_mut_slice() {
        *v /= n;
    }
    Ok(factor_with_repair(pooled)?.covariance)
}

/// M-step: weights, then means, then covariances from the new means.
fn m_step<T: Scalar>(
    w: &ResponsibilityMatrix<T>,
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
) -> Result<SharedKernelModel<T>> {
    let mut pi = update_weights(w, data)?;
    apply_weight_floor(&mut pi, cfg.min_weight);
    let x = data.features();
    let means = update_means_impl(w, x, cfg.parallel)?;
    let covs = match cfg.covariance_mode {
        CovarianceMode::PerComponent => update_covariances_impl(w, x, &means, cfg.parallel)?,
        CovarianceMode::Pooled => {
            vec![update_covariance_mda_impl(w, x, &means, cfg.parallel)?; means.len()]
        }
    };
    let components = means
        .into_iter()
        .zip(covs)
        .map(|(mu, p)| GaussianComponent::new(mu, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(SharedKernelModel::from_parts_unchecked(components, pi))
}

/// ln p(X|C,Θ) = Σ_n ln p(x_n | c_n, Θ).
pub fn incomplete_log_likelihood<T: Scalar>(
    model: &SharedKernelModel<T>,
    data: &LabeledDataset<T>,
) -> Result<T> {
    check_compatible(model, data)?;
    let x = data.features();
    let labels = data.labels();
    let k = model.num_components();
    let parts = map_chunks(data.len(), true, |rows| {
        let mut scratch = Vec::with_capacity(x.cols());
        let mut ld = vec![T::zero(); k];
        let mut s = T::zero();
        for i in rows {
            model.component_log_densities(x.row(i), &mut scratch, &mut ld);
            s += mix_log_density(model.weights().row(labels[i]), &ld);
        }
        s
    });
    Ok(parts.into_iter().fold(T::zero(), |a, b| a + b))
}

/// Stateful SKEM run that advances one pass at a time.
///
/// Used directly by [`train_skem`] and in lockstep by the partitioned trainer.
pub struct SkemTrainer<'a, T: Scalar> {
    data: &'a LabeledDataset<T>,
    cfg: TrainConfig,
    model: SharedKernelModel<T>,
    /// ln p(X|C,Θ_i) for i = 0.. as they become known.
    lls: Vec<T>,
    passes: usize,
    stopped: bool,
}

impl<'a, T: Scalar> SkemTrainer<'a, T> {
    /// Fresh run from a random initial model drawn from `rng_for(cfg.seed, stream)`.
    pub fn new(data: &'a LabeledDataset<T>, cfg: &TrainConfig, stream: u64) -> Result<Self> {
        cfg.validate()?;
        data.check_trainable()?;
        let mut rng = rng_for(cfg.seed, stream);
        let model = initial_model(data.dim(), data.num_classes(), cfg, &mut rng)?;
        Self::from_model(data, cfg, model)
    }

    pub fn from_model(
        data: &'a LabeledDataset<T>,
        cfg: &TrainConfig,
        model: SharedKernelModel<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        data.check_trainable()?;
        check_compatible(&model, data)?;
        if model.num_components() != cfg.num_components {
            return Err(Error::InvalidConfig(format!(
                "initial model has {} components, config asks for {}",
                model.num_components(),
                cfg.num_components
            )));
        }
        Ok(Self {
            data,
            cfg: cfg.clone(),
            model,
            lls: Vec::new(),
            passes: 0,
            stopped: false,
        })
    }

    pub fn model(&self) -> &SharedKernelModel<T> {
        &self.model
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    /// True once the pass budget is spent or early stopping fired.
    pub fn is_done(&self) -> bool {
        self.stopped || self.passes >= self.cfg.max_passes
    }

    /// One E-step + M-step. Returns `false` without changing the model when already done.
    pub fn step(&mut self) -> Result<bool> {
        if self.is_done() {
            return Ok(false);
        }
        let pass = self.passes + 1;
        let (w, ll) =
            e_step_with_ll(&self.model, self.data, self.cfg.parallel).map_err(|e| e.at_pass(pass))?;
        self.lls.push(ll);
        if let (Some(tol), [.., prev, cur]) = (self.cfg.early_stop, self.lls.as_slice()) {
            let gain = (*cur - *prev).as_f64();
            if gain <= tol * cur.as_f64().abs() {
                self.stopped = true;
                return Ok(false);
            }
        }
        self.model = m_step(&w, self.data, &self.cfg).map_err(|e| e.at_pass(pass))?;
        self.passes = pass;
        Ok(true)
    }

    /// Completes the likelihood trace with the current model and returns it.
    pub fn finish(mut self) -> Result<(SharedKernelModel<T>, TrainHistory)> {
        if self.lls.len() <= self.passes {
            let ll = incomplete_log_likelihood(&self.model, self.data)?;
            self.lls.push(ll);
        }
        let lls: Vec<f64> = self.lls.iter().map(|v| v.as_f64()).collect();
        let history = TrainHistory {
            initial_log_likelihood: lls[0],
            log_likelihood: lls[1..=self.passes].to_vec(),
            accuracy: Vec::new(),
        };
        Ok((self.model, history))
    }
}

/// Trains a shared-kernel model (or MDA when `cfg.covariance_mode` is pooled).
///
/// With `validation`, held-out accuracy is recorded after every pass and the
/// first model reaching the best accuracy is returned in `best`.
pub fn train_skem<T: Scalar>(
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
    validation: Option<&LabeledDataset<T>>,
) -> Result<TrainOutcome<SharedKernelModel<T>>> {
    let trainer = SkemTrainer::new(data, cfg, 0)?;
    run_trainer(trainer, validation)
}

/// Same as [`train_skem`] from a caller-supplied initial model.
pub fn train_skem_from<T: Scalar>(
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
    initial: SharedKernelModel<T>,
    validation: Option<&LabeledDataset<T>>,
) -> Result<TrainOutcome<SharedKernelModel<T>>> {
    let trainer = SkemTrainer::from_model(data, cfg, initial)?;
    run_trainer(trainer, validation)
}

fn run_trainer<T: Scalar>(
    mut trainer: SkemTrainer<'_, T>,
    validation: Option<&LabeledDataset<T>>,
) -> Result<TrainOutcome<SharedKernelModel<T>>> {
    let mut accuracy = Vec::new();
    let mut best: Option<BestSnapshot<SharedKernelModel<T>>> = None;
    while trainer.step()? {
        if let Some(v) = validation {
            let acc = classifier::accuracy(trainer.model(), v)?;
            accuracy.push(acc);
            if best.as_ref().map_or(true, |b| acc > b.accuracy) {
                best = Some(BestSnapshot {
                    model: trainer.model().clone(),
                    pass: trainer.passes(),
                    accuracy: acc,
                });
            }
        }
    }
    let (model, mut history) = trainer.finish()?;
    history.accuracy = accuracy;
    Ok(TrainOutcome {
        model,
        history,
        best,
    })
}

/// Unsupervised EM on unlabeled features.
///
/// Initialization matches a one-class [`train_skem`] run with the same config.
pub fn train_standard_em<T: Scalar>(
    x: &Matrix<T>,
    cfg: &TrainConfig,
) -> Result<(MixtureModel<T>, TrainHistory)> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = rng_for(cfg.seed, 0);
    let init = initial_model::<T>(x.cols(), 1, cfg, &mut rng)?;
    let (mut components, weights) = init.into_parts();
    let mut pi: Vec<T> = weights.row(0).to_vec();
    let (n, k) = (x.rows(), cfg.num_components);
    let mut lls = Vec::with_capacity(cfg.max_passes + 1);

    let mut pass = 0;
    while pass < cfg.max_passes {
        pass += 1;
        // w_nk = π_k N(x_n; k) / Σ_k' π_k' N(x_n; k')
        let log_pi: Vec<T> = pi.iter().map(|p| p.ln()).collect();
        let mut values = vec![T::zero(); n * k];
        let mut ll = T::zero();
        let mut scratch = Vec::with_capacity(x.cols());
        let mut block_ll = T::zero();
        for i in 0..n {
            let row = &mut values[i * k..(i + 1) * k];
            for ((r, c), &lp) in row.iter_mut().zip(&components).zip(&log_pi) {
                *r = lp + c.log_density_with(x.row(i), &mut scratch);
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            if !max.is_finite() {
                return Err(Error::DegenerateResponsibility { row: i }.at_pass(pass));
            }
            let mut s = T::zero();
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                s += *r;
            }
            for r in row.iter_mut() {
                *r /= s;
            }
            block_ll += max + s.ln();
            if (i + 1) % CHUNK == 0 || i + 1 == n {
                ll += block_ll;
                block_ll = T::zero();
            }
        }
        lls.push(ll);
        let w = ResponsibilityMatrix(Matrix::from_vec(n, k, values)?);
        let mass = column_masses(&w, false).map_err(|e| e.at_pass(pass))?;
        let total = T::from_usize_lossy(n);
        pi = mass.iter().map(|&m| m / total).collect();
        let means = update_means_impl(&w, x, false).map_err(|e| e.at_pass(pass))?;
        let covs = match cfg.covariance_mode {
            CovarianceMode::PerComponent => update_covariances_impl(&w, x, &means, false),
            CovarianceMode::Pooled => {
                update_covariance_mda_impl(&w, x, &means, false).map(|p| vec![p; k])
            }
        }
        .map_err(|e| e.at_pass(pass))?;
        components = means
            .into_iter()
            .zip(covs)
            .map(|(mu, p)| GaussianComponent::new(mu, p))
            .collect::<Result<Vec<_>>>()?;
    }
    let model = MixtureModel {
        components,
        weights: pi,
    };
    let mut final_ll = T::zero();
    for i in 0..n {
        final_ll += model.log_density(x.row(i))?;
    }
    lls.push(final_ll);
    let lls: Vec<f64> = lls.iter().map(|v| v.as_f64()).collect();
    let history = TrainHistory {
        initial_log_likelihood: lls[0],
        log_likelihood: lls[1..].to_vec(),
        accuracy: Vec::new(),
    };
    Ok((model, history))
}

/// Baum auxiliary function in its simplified triple-sum form:
/// Σ_n Σ_k w_nk (ln π_{k,c_n} + ln N(x_n; μ_k, P_k)), with w from `e_step(old)`.
///
/// Terms with w_nk = 0 contribute nothing even when ln π_{k,c_n} = −∞.
pub fn q_function<T: Scalar>(
    new: &SharedKernelModel<T>,
    old: &SharedKernelModel<T>,
    data: &LabeledDataset<T>,
) -> Result<T> {
    check_compatible(new, data)?;
    if new.num_components() != old.num_components() {
        return Err(Error::DimensionMismatch {
            expected: old.num_components(),
            found: new.num_components(),
        });
    }
    let w = e_step_with_ll(old, data, false)?.0;
    let k = new.num_components();
    let mut scratch = Vec::new();
    let mut ld = vec![T::zero(); k];
    let mut q = T::zero();
    for (n, x) in data.features().row_iter().enumerate() {
        new.component_log_densities(x, &mut scratch, &mut ld);
        let pi = new.weights().row(data.labels()[n]);
        for c in 0..k {
            let wnk = w.row(n)[c];
            if wnk > T::zero() {
                q += wnk * (pi[c].ln() + ld[c]);
            }
        }
    }
    Ok(q)
}

/// Baum auxiliary function by direct enumeration of all K^N association
/// sequences Z: Σ_Z ln p(X,Z|C,Θ) Pr(Z|X,Θ₀), where ln p(X,Z|C,Θ) = Σ_n g(z_n, x_n)
/// and Pr(Z|X,Θ₀) = Π_n h(z_n | x_n).
///
/// Exponential in N; refuses instances with K^N above [`BRUTEFORCE_CAP`].
pub fn q_bruteforce<T: Scalar>(
    new: &SharedKernelModel<T>,
    old: &SharedKernelModel<T>,
    data: &LabeledDataset<T>,
) -> Result<f64> {
    check_compatible(new, data)?;
    check_compatible(old, data)?;
    let (k, n) = (new.num_components(), data.len());
    let terms = (k as f64).powi(n as i32);
    if terms > BRUTEFORCE_CAP {
        return Err(Error::InstanceTooLarge {
            terms,
            cap: BRUTEFORCE_CAP,
        });
    }
    // g[n][k] = ln Pr(k | c_n, Θ) + ln p(x_n | θ_k)
    // h[n][k] = Pr(k | x_n, c_n, Θ₀) by Bayes' rule in the linear domain
    let mut g = vec![vec![0.0f64; k]; n];
    let mut h = vec![vec![0.0f64; k]; n];
    for (i, x) in data.features().row_iter().enumerate() {
        let c = data.labels()[i];
        let mut denom = 0.0;
        for comp in 0..k {
            let pi_new = new.weights().get(c, comp).as_f64();
            g[i][comp] = pi_new.ln() + new.components()[comp].log_density(x)?.as_f64();
            let joint = old.weights().get(c, comp).as_f64()
                * old.components()[comp].log_density(x)?.as_f64().exp();
            h[i][comp] = joint;
            denom += joint;
        }
        if !(denom > 0.0) {
            return Err(Error::DegenerateResponsibility { row: i });
        }
        for v in h[i].iter_mut() {
            *v /= denom;
        }
    }

    let mut z = vec![0usize; n];
    let mut total = Neumaier::default();
    loop {
        let mut log_joint = 0.0;
        let mut post = 1.0;
        for (i, &zi) in z.iter().enumerate() {
            post *= h[i][zi];
            if post == 0.0 {
                break;
            }
            log_joint += g[i][zi];
        }
        if post != 0.0 {
            total.add(log_joint * post);
        }
        // odometer increment over {0..K}^N
        let mut pos = 0;
        loop {
            if pos == n {
                return Ok(total.sum());
            }
            z[pos] += 1;
            if z[pos] < k {
                break;
            }
            z[pos] = 0;
            pos += 1;
        }
    }
}

/// Neumaier compensated summation.
#[derive(Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn sum(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(points: &[f64], labels: &[usize], classes: usize) -> LabeledDataset<f64> {
        let rows: Vec<[f64; 1]> = points.iter().map(|&p| [p]).collect();
        LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), labels.to_vec(), classes).unwrap()
    }

    fn comp1(mu: f64, var: f64) -> GaussianComponent<f64> {
        GaussianComponent::new(vec![mu], Matrix::from_rows(&[[var]]).unwrap()).unwrap()
    }

    #[test]
    fn e_step_single_component() {
        let d = one_d(&[0.0, 1.0, -3.0], &[0, 1, 0], 2);
        let m = SharedKernelModel::new(vec![comp1(0.5, 2.0)], Matrix::from_rows(&[[1.0], [1.0]]).unwrap())
            .unwrap();
        let w = e_step(&m, &d).unwrap();
        assert!(w.values().as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn e_step_identical_components_uniform() {
        let d = one_d(&[0.0, 1.0, -3.0], &[0, 1, 0], 2);
        let c = comp1(0.5, 2.0);
        let m = SharedKernelModel::new(
            vec![c.clone(), c.clone(), c],
            Matrix::from_rows(&[[1.0 / 3.0; 3], [1.0 / 3.0; 3]]).unwrap(),
        )
        .unwrap();
        let w = e_step(&m, &d).unwrap();
        for v in w.values().as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn e_step_two_component_ratio() {
        // log N(0;0,1) − log N(0;4,1) = 8, so w₁ = 1/(1+e^{−8})
        let d = one_d(&[0.0], &[0], 1);
        let m = SharedKernelModel::new(
            vec![comp1(0.0, 1.0), comp1(4.0, 1.0)],
            Matrix::from_rows(&[[0.5, 0.5]]).unwrap(),
        )
        .unwrap();
        let w = e_step(&m, &d).unwrap();
        let want = 1.0 / (1.0 + (-8.0f64).exp());
        assert!((w.row(0)[0] - want).abs() < 1e-15);
        assert!((want - 0.999_664_649_869_533_9).abs() < 1e-15);
    }

    #[test]
    fn e_step_degenerate_row() {
        // class 1 puts all weight on a component; class row then kills it via zero weight
        let d = one_d(&[0.0], &[0], 1);
        let m = SharedKernelModel::from_parts_unchecked(
            vec![comp1(0.0, 1.0), comp1(1.0, 1.0)],
            Matrix::from_rows(&[[0.0, 0.0]]).unwrap(),
        );
        // invalid weights are rejected up front
        assert!(e_step(&m, &d).is_err());

        let far = SharedKernelModel::new(
            vec![comp1(0.0, 1e-300)],
            Matrix::from_rows(&[[1.0]]).unwrap(),
        )
        .unwrap();
        let d = one_d(&[1e200], &[0], 1);
        assert!(matches!(
            e_step(&far, &d),
            Err(Error::DegenerateResponsibility { row: 0 })
        ));
    }

    #[test]
    fn weights_update_example() {
        let d = one_d(&[0.0, 1.0], &[0, 0], 1);
        let w = ResponsibilityMatrix::new(Matrix::from_rows(&[[0.2, 0.8], [0.4, 0.6]]).unwrap())
            .unwrap();
        let pi = update_weights(&w, &d).unwrap();
        assert!((pi.get(0, 0) - 0.3).abs() < 1e-15);
        assert!((pi.get(0, 1) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn weights_update_rejects_empty_class() {
        let d = one_d(&[0.0, 1.0], &[0, 0], 2);
        let w = ResponsibilityMatrix::new(Matrix::from_rows(&[[1.0], [1.0]]).unwrap()).unwrap();
        assert!(matches!(update_weights(&w, &d), Err(Error::EmptyClass { class: 2 })));
    }

    #[test]
    fn weight_floor_renormalizes() {
        let mut pi = Matrix::<f64>::from_rows(&[[1.0, 0.0]]).unwrap();
        apply_weight_floor(&mut pi, 0.1);
        assert!((pi.get(0, 0) - 1.0 / 1.1).abs() < 1e-15);
        assert!((pi.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dead_component_is_reported() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let w = ResponsibilityMatrix::new(Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap())
            .unwrap();
        assert!(matches!(
            update_means(&w, &x),
            Err(Error::DeadComponent { component: 2, .. })
        ));
    }

    #[test]
    fn equal_points_trigger_covariance_repair() {
        let x = Matrix::from_rows(&[[2.0, 2.0], [2.0, 2.0], [2.0, 2.0]]).unwrap();
        let w = ResponsibilityMatrix::new(Matrix::from_rows(&[[1.0], [1.0], [1.0]]).unwrap())
            .unwrap();
        let means = update_means(&w, &x).unwrap();
        assert_eq!(means[0], vec![2.0, 2.0]);
        let p = update_covariances(&w, &x, &means).unwrap();
        assert_eq!(p[0].get(0, 0), 1e-8);
        assert_eq!(p[0].get(0, 1), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { num_components: 0, ..Default::default() },
            TrainConfig { max_passes: 0, ..Default::default() },
            TrainConfig { init_sigma: 0.0, ..Default::default() },
            TrainConfig { init_mean_range: (1.0, 1.0), ..Default::default() },
            TrainConfig { min_weight: 0.5, num_components: 4, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn first_max_prefers_earliest() {
        assert_eq!(first_max(&[0.5, 0.9, 0.9, 0.1]), Some(1));
        assert_eq!(first_max(&[]), None);
    }

    #[test]
    fn bruteforce_cap() {
        let d = one_d(&[0.0; 13], &[0; 13], 1);
        let c = comp1(0.0, 1.0);
        let m = SharedKernelModel::new(
            vec![c.clone(), c.clone(), c.clone()],
            Matrix::from_rows(&[[1.0 / 3.0; 3]]).unwrap(),
        )
        .unwrap();
        // 3^13 > 1e6
        let err = q_bruteforce(&m, &m, &d).unwrap_err();
        assert!(err.to_string().contains("instance too large for enumeration oracle"));
    }

    #[test]
    fn rng_streams_differ() {
        let a: u64 = rng_for(7, 0).gen();
        let b: u64 = rng_for(7, 1).gen();
        let a2: u64 = rng_for(7, 0).gen();
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }
}

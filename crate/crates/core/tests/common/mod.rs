//! Fixtures and invariant checks shared by the property and acceptance suites.
//!
//! Every `check_*` function draws one random instance from `seed` and returns
//! a description of the first violation it finds.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use skem::classifier::{argmax_scores, ClassScorer};
use skem::em::CovarianceMode;
use skem::io::{self, DelimitedSchema, ModelBundle, ModelKind};
use skem::preprocess::{deskew, GrayImage, PcaTransform, StandardizeTransform};
use skem::*;

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<V, E: std::fmt::Display>(r: std::result::Result<V, E>) -> std::result::Result<V, String> {
    r.map_err(|e| e.to_string())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// A Aᵀ + 0.5 I with A uniform on [-1, 1].
pub fn random_spd(m: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let a: Vec<f64> = (0..m * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut p = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let v: f64 = (0..m).map(|t| a[i * m + t] * a[j * m + t]).sum();
            p.set(i, j, v + if i == j { 0.5 } else { 0.0 });
        }
    }
    p
}

/// Rows drawn uniformly on [0.05, 1) and normalized.
pub fn random_weights(l: usize, k: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let mut w = Matrix::zeros(l, k);
    for j in 0..l {
        let row: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        for (kk, v) in row.into_iter().enumerate() {
            w.set(j, kk, v / s);
        }
    }
    w
}

pub fn random_model(m: usize, k: usize, l: usize, rng: &mut impl Rng) -> SharedKernelModel<f64> {
    let comps = (0..k)
        .map(|_| {
            let mean = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            GaussianComponent::new(mean, random_spd(m, rng)).unwrap()
        })
        .collect();
    SharedKernelModel::new(comps, random_weights(l, k, rng)).unwrap()
}

/// Lower Cholesky factor, computed independently of the library.
fn cholesky(p: &Matrix<f64>) -> Vec<f64> {
    let m = p.rows();
    let mut l = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let s: f64 = (0..j).map(|t| l[i * m + t] * l[j * m + t]).sum();
            if i == j {
                l[i * m + i] = (p.get(i, i) - s).sqrt();
            } else {
                l[i * m + j] = (p.get(i, j) - s) / l[j * m + j];
            }
        }
    }
    l
}

/// N samples from `model`. The first L samples cover every class; the rest
/// draw their class uniformly.
pub fn sample_skm(model: &SharedKernelModel<f64>, n: usize, rng: &mut impl Rng) -> LabeledDataset<f64> {
    let (m, l) = (model.dim(), model.num_classes());
    let factors: Vec<Vec<f64>> = model
        .components()
        .iter()
        .map(|c| cholesky(c.covariance()))
        .collect();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let j = if i < l { i } else { rng.gen_range(0..l) };
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = model.num_components() - 1;
        for (kk, &w) in model.weights().row(j).iter().enumerate() {
            acc += w;
            if u < acc {
                k = kk;
                break;
            }
        }
        let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        let mu = model.components()[k].mean();
        let x: Vec<f64> = (0..m)
            .map(|r| mu[r] + (0..=r).map(|t| factors[k][r * m + t] * z[t]).sum::<f64>())
            .collect();
        rows.push(x);
        labels.push(j);
    }
    LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), labels, l).unwrap()
}

/// Data sampled from a random SKM with the given shape.
pub fn synthetic(n: usize, m: usize, l: usize, k: usize, seed: u64) -> LabeledDataset<f64> {
    let mut r = rng(seed);
    let model = random_model(m, k, l, &mut r);
    sample_skm(&model, n, &mut r)
}

pub fn cfg(k: usize, passes: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        num_components: k,
        max_passes: passes,
        seed,
        ..TrainConfig::default()
    }
}

/// Largest absolute difference over means, covariances and weights.
pub fn model_diff(a: &SharedKernelModel<f64>, b: &SharedKernelModel<f64>) -> f64 {
    let mut d: f64 = 0.0;
    for (x, y) in a.components().iter().zip(b.components()) {
        for (u, v) in x.mean().iter().zip(y.mean()) {
            d = d.max((u - v).abs());
        }
        for (u, v) in x.covariance().as_slice().iter().zip(y.covariance().as_slice()) {
            d = d.max((u - v).abs());
        }
    }
    for (u, v) in a.weights().as_slice().iter().zip(b.weights().as_slice()) {
        d = d.max((u - v).abs());
    }
    d
}

fn ln_normal_1d(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mu) * (x - mu) / var)
}

// ---------------------------------------------------------------- model core

/// ln N is unchanged when x, μ and P are permuted jointly.
pub fn check_density_permutation(seed: u64) -> Check {
    let mut r = rng(seed);
    let m = r.gen_range(1..=5);
    let mean: Vec<f64> = (0..m).map(|_| r.gen_range(-2.0..2.0)).collect();
    let p = random_spd(m, &mut r);
    let x: Vec<f64> = (0..m).map(|_| r.gen_range(-3.0..3.0)).collect();
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut r);
    let mut pp = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            pp.set(i, j, p.get(perm[i], perm[j]));
        }
    }
    let a = ok(gaussian_log_density(&x, &ok(GaussianComponent::new(mean.clone(), p))?))?;
    let xp: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
    let mp: Vec<f64> = perm.iter().map(|&i| mean[i]).collect();
    let b = ok(gaussian_log_density(&xp, &ok(GaussianComponent::new(mp, pp))?))?;
    ensure!((a - b).abs() <= 1e-12, "permuted density {b} vs {a}");
    Ok(())
}

/// Diagonal P: ln N equals the sum of 1-D log densities.
pub fn check_diagonal_density(seed: u64) -> Check {
    let mut r = rng(seed);
    let m = r.gen_range(1..=6);
    let mean: Vec<f64> = (0..m).map(|_| r.gen_range(-2.0..2.0)).collect();
    let var: Vec<f64> = (0..m).map(|_| r.gen_range(0.1..4.0)).collect();
    let mut p = Matrix::zeros(m, m);
    for i in 0..m {
        p.set(i, i, var[i]);
    }
    let x: Vec<f64> = (0..m).map(|_| r.gen_range(-3.0..3.0)).collect();
    let got = ok(gaussian_log_density(&x, &ok(GaussianComponent::new(mean.clone(), p))?))?;
    let want: f64 = (0..m).map(|i| ln_normal_1d(x[i], mean[i], var[i])).sum();
    ensure!((got - want).abs() <= 1e-12, "diagonal density {got} vs {want}");
    Ok(())
}

/// Scaling x, μ by s and P by s² shifts every component log density by
/// c = −M ln s; the class-conditional density must shift by exactly c.
pub fn check_class_density_shift(seed: u64) -> Check {
    let mut r = rng(seed);
    let (m, k, l) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=3));
    let model = random_model(m, k, l, &mut r);
    let s: f64 = r.gen_range(0.3..3.0);
    let c = -(m as f64) * s.ln();
    let comps = model
        .components()
        .iter()
        .map(|g| {
            let mean = g.mean().iter().map(|v| v * s).collect();
            let mut p = g.covariance().clone();
            p.as_mut_slice().iter_mut().for_each(|v| *v *= s * s);
            GaussianComponent::new(mean, p).unwrap()
        })
        .collect();
    let scaled = ok(SharedKernelModel::new(comps, model.weights().clone()))?;
    let x: Vec<f64> = (0..m).map(|_| r.gen_range(-3.0..3.0)).collect();
    let xs: Vec<f64> = x.iter().map(|v| v * s).collect();
    for j in 0..l {
        let a = ok(class_conditional_log_density(&x, &model, j))?;
        let b = ok(class_conditional_log_density(&xs, &scaled, j))?;
        ensure!(close(b, a + c, 1e-12), "class {j}: {b} vs {a} + {c}");
    }
    Ok(())
}

// ---------------------------------------------------------------- EM engine

/// Log-likelihood never decreases over 30 passes (slack 1e-8).
pub fn check_monotone(seed: u64) -> Check {
    let data = synthetic(500, 2, 2, 3, seed);
    let out = ok(train_skem(&data, &cfg(3, 30, seed), None))?;
    let h = &out.history;
    let mut prev = h.initial_log_likelihood;
    for (p, &ll) in h.log_likelihood.iter().enumerate() {
        ensure!(ll >= prev - 1e-8, "pass {}: {ll} < {prev}", p + 1);
        prev = ll;
    }
    Ok(())
}

/// E-step rows sum to 1; weight rows sum to 1 after the update.
pub fn check_normalization(seed: u64) -> Check {
    let mut r = rng(seed);
    let (m, k, l) = (r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=4));
    let model = random_model(m, k, l, &mut r);
    let data = sample_skm(&model, r.gen_range(l..60), &mut r);
    let w = ok(e_step(&model, &data))?;
    for n in 0..data.len() {
        let s: f64 = w.row(n).iter().sum();
        ensure!((s - 1.0).abs() <= 1e-10, "responsibility row {n} sums to {s}");
    }
    let pi = ok(update_weights(&w, &data))?;
    for j in 0..l {
        let s: f64 = pi.row(j).iter().sum();
        ensure!((s - 1.0).abs() <= 1e-12, "weight row {j} sums to {s}");
    }
    Ok(())
}

/// Simplified Q equals the K^N expectation (N ≤ 6, K ≤ 3, L ≤ 3, M ≤ 3).
pub fn check_q_oracle(seed: u64) -> Check {
    let mut r = rng(seed);
    let (k, l, m) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3));
    let n = r.gen_range(l..=6);
    let old = random_model(m, k, l, &mut r);
    let new = random_model(m, k, l, &mut r);
    let data = sample_skm(&old, n, &mut r);
    let q = ok(q_function(&new, &old, &data))?;
    let brute = ok(q_bruteforce(&new, &old, &data))?;
    ensure!(close(q, brute, 1e-9), "N={n} K={k} L={l} M={m}: {q} vs {brute}");
    Ok(())
}

/// One class: SKEM follows standard EM pass for pass.
pub fn check_single_class_reduction(seed: u64) -> Check {
    let mut r = rng(seed);
    let (m, k) = (r.gen_range(1..=3), r.gen_range(1..=4));
    let data = synthetic(r.gen_range(100..300), m, 1, k, seed);
    let c = cfg(k, 15, seed);
    let skem = ok(train_skem(&data, &c, None))?;
    let (gmm, hist) = ok(train_standard_em(data.features(), &c))?;
    let a = &skem.history;
    ensure!(
        close(a.initial_log_likelihood, hist.initial_log_likelihood, 1e-12),
        "initial {} vs {}",
        a.initial_log_likelihood,
        hist.initial_log_likelihood
    );
    for (p, (x, y)) in a.log_likelihood.iter().zip(&hist.log_likelihood).enumerate() {
        ensure!(close(*x, *y, 1e-12), "pass {}: {x} vs {y}", p + 1);
    }
    let d = model_diff(&skem.model, &gmm.as_shared_kernel());
    ensure!(d <= 1e-9, "final models differ by {d}");
    Ok(())
}

/// K = 1: pooled and per-component covariances give the same model.
pub fn check_mda_single_component(seed: u64) -> Check {
    let mut r = rng(seed);
    let (m, l) = (r.gen_range(1..=4), r.gen_range(1..=3));
    let data = synthetic(r.gen_range(50..200), m, l, 2, seed);
    let full = ok(train_skem(&data, &cfg(1, 10, seed), None))?;
    let pooled = TrainConfig {
        covariance_mode: CovarianceMode::Pooled,
        ..cfg(1, 10, seed)
    };
    let mda = ok(train_skem(&data, &pooled, None))?;
    let d = model_diff(&full.model, &mda.model);
    ensure!(d <= 1e-12, "models differ by {d}");
    Ok(())
}

/// Reordering the samples leaves the trained model unchanged.
pub fn check_permutation_equivariance(seed: u64) -> Check {
    let mut r = rng(seed);
    let (m, k, l) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=3));
    let data = synthetic(r.gen_range(50..400), m, l, k, seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut r);
    let shuffled = data.subset(&order);
    let c = cfg(k, 5, seed);
    let a = ok(train_skem(&data, &c, None))?;
    let b = ok(train_skem(&shuffled, &c, None))?;
    let d = model_diff(&a.model, &b.model);
    ensure!(d <= 1e-12, "models differ by {d}");
    Ok(())
}

/// Serial and parallel training agree.
pub fn check_serial_parallel_em(seed: u64) -> Check {
    let data = synthetic(700, 3, 3, 4, seed);
    let c = cfg(4, 8, seed);
    let a = ok(train_skem(&data, &c, None))?;
    let b = ok(train_skem(&data, &TrainConfig { parallel: false, ..c }, None))?;
    let d = model_diff(&a.model, &b.model);
    ensure!(d <= 1e-12, "models differ by {d}");
    Ok(())
}

// ---------------------------------------------------------------- partitioner

fn random_scheme(r: &mut impl Rng) -> PartitionScheme {
    [PartitionScheme::Sequential, PartitionScheme::Interleaved, PartitionScheme::Random][r.gen_range(0..3)]
}

/// Blocks are disjoint, non-empty and cover 0..M.
pub fn check_partition_cover(seed: u64) -> Check {
    let mut r = rng(seed);
    let m = r.gen_range(1..=60);
    let blocks = r.gen_range(1..=m);
    let scheme = random_scheme(&mut r);
    let p = ok(make_partition(m, blocks, scheme, seed))?;
    ensure!(p.num_blocks() == blocks, "{} blocks, wanted {blocks}", p.num_blocks());
    let mut seen = vec![false; m];
    for b in p.blocks() {
        ensure!(!b.is_empty(), "empty block in {scheme:?}");
        for &i in b {
            ensure!(i < m && !seen[i], "index {i} repeated or out of range");
            seen[i] = true;
        }
    }
    ensure!(seen.iter().all(|&s| s), "{scheme:?} misses an index");
    Ok(())
}

/// One block reproduces SKEM exactly.
pub fn check_single_block(seed: u64) -> Check {
    let data = synthetic(200, 3, 2, 3, seed);
    let c = cfg(3, 6, seed);
    let s = ok(train_skem(&data, &c, None))?;
    let p = ok(train_pskem(&data, &Partition::single(3), &c, None))?;
    ensure!(s.history == p.history, "histories differ");
    ensure!(model_diff(&s.model, &p.model.models()[0]) == 0.0, "models differ");
    Ok(())
}

pub fn random_partitioned(seed: u64) -> PartitionedModel<f64> {
    let mut r = rng(seed);
    let blocks = r.gen_range(1..=3);
    let dim = blocks + r.gen_range(0..=3);
    let (k, l) = (r.gen_range(1..=4), r.gen_range(1..=3));
    let p = make_partition(dim, blocks, random_scheme(&mut r), seed).unwrap();
    let models = p
        .block_sizes()
        .into_iter()
        .map(|m| random_model(m, k, l, &mut r))
        .collect();
    PartitionedModel::new(p, models).unwrap()
}

/// Expanded joint mixture: weights sum to one, density equals the block sum,
/// and labels agree wherever the score gap exceeds 1e-7.
pub fn check_expansion(seed: u64) -> Check {
    let pm = random_partitioned(seed);
    let mut r = rng(seed ^ 0xA5A5);
    let l = pm.num_classes();
    let joints: Vec<MixtureModel<f64>> = (0..l).map(|j| expand_joint(&pm, j).unwrap()).collect();
    for (j, g) in joints.iter().enumerate() {
        let s: f64 = g.weights.iter().sum();
        ensure!((s - 1.0).abs() <= 1e-12, "class {j} joint weights sum to {s}");
    }
    for _ in 0..100 {
        let x: Vec<f64> = (0..pm.dim()).map(|_| r.gen_range(-3.0..3.0)).collect();
        let block = ok(pm.class_scores(&x))?;
        let joint: Vec<f64> = joints.iter().map(|g| g.log_density(&x).unwrap()).collect();
        for j in 0..l {
            ensure!(close(block[j], joint[j], 1e-9), "class {j}: {} vs {}", block[j], joint[j]);
        }
        let mut sorted = block.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted.len() < 2 || sorted[0] - sorted[1] > 1e-7 {
            ensure!(
                ok(argmax_scores(&block))? == ok(argmax_scores(&joint))?,
                "labels differ at {x:?}"
            );
        }
    }
    Ok(())
}

/// Serial and parallel PSKEM agree.
pub fn check_serial_parallel_pskem(seed: u64) -> Check {
    let data = synthetic(400, 6, 3, 3, seed);
    let p = ok(make_partition(6, 3, PartitionScheme::Interleaved, seed))?;
    let c = cfg(3, 5, seed);
    let a = ok(train_pskem(&data, &p, &c, Some(&data)))?;
    let b = ok(train_pskem(&data, &p, &TrainConfig { parallel: false, ..c }, Some(&data)))?;
    ensure!(a.history == b.history, "histories differ");
    for (x, y) in a.model.models().iter().zip(b.model.models()) {
        let d = model_diff(x, y);
        ensure!(d <= 1e-12, "block models differ by {d}");
    }
    Ok(())
}

// ---------------------------------------------------------------- classifier

/// argmax is unchanged by an additive constant or a strictly increasing map.
pub fn check_argmax_invariance(seed: u64) -> Check {
    let mut r = rng(seed);
    let l = r.gen_range(1..=8);
    // coarse grid so ties actually occur
    let scores: Vec<f64> = (0..l).map(|_| f64::from(r.gen_range(-5..5)) * 0.5).collect();
    let c: f64 = r.gen_range(-100.0..100.0);
    let base = ok(argmax_scores(&scores))?;
    let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
    let cubed: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
    ensure!(ok(argmax_scores(&shifted))? == base, "shift by {c} changed the label");
    ensure!(ok(argmax_scores(&cubed))? == base, "cubing changed the label");
    let first = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ensure!(scores.iter().position(|&s| s == first) == Some(base), "tie not broken low");
    Ok(())
}

/// `evaluate` agrees with labels recounted one sample at a time.
pub fn check_evaluate(seed: u64) -> Check {
    let mut r = rng(seed);
    let (m, k, l) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(2..=4));
    let model = random_model(m, k, l, &mut r);
    let other = random_model(m, k, l, &mut r);
    let data = sample_skm(&other, r.gen_range(l..300), &mut r);
    let (cm, acc) = ok(evaluate(&model, &data))?;
    let mut hits = 0;
    for n in 0..data.len() {
        let s = ok(model.class_scores(data.features().row(n)))?;
        let best = (0..l).fold(0, |b, j| if s[j] > s[b] { j } else { b });
        hits += usize::from(best == data.labels()[n]);
    }
    let want = hits as f64 / data.len() as f64;
    ensure!(acc == want, "accuracy {acc} vs recount {want}");
    ensure!(cm.total() as usize == data.len() && cm.correct() as usize == hits, "confusion totals");
    Ok(())
}

/// Shared proportion lies in [0, 1] and is 0 exactly when no component has
/// two supra-threshold classes.
pub fn check_shared_proportion(seed: u64) -> Check {
    let mut r = rng(seed);
    let blocks = r.gen_range(1..=3);
    let mats: Vec<Matrix<f64>> = (0..blocks)
        .map(|_| {
            let (l, k) = (r.gen_range(1..=4), r.gen_range(1..=6));
            let mut w = Matrix::zeros(l, k);
            for v in w.as_mut_slice() {
                *v = if r.gen_bool(0.5) { 0.0 } else { r.gen_range(0.0..0.05) };
            }
            w
        })
        .collect();
    let tau = SHARED_THRESHOLD;
    let mut any_shared = false;
    let mut total = 0;
    for w in &mats {
        for k in 0..w.cols() {
            let a = (0..w.rows()).filter(|&j| w.get(j, k) >= tau).count();
            total += a;
            any_shared |= a > 1;
        }
    }
    match shared_proportion(mats.iter(), tau) {
        Ok(p) => {
            ensure!((0.0..=1.0).contains(&p), "proportion {p} outside [0, 1]");
            ensure!((p == 0.0) == !any_shared, "proportion {p} but shared={any_shared}");
        }
        Err(Error::DegenerateWeights) => ensure!(total == 0, "degenerate with {total} entries"),
        Err(e) => return Err(e.to_string()),
    }
    Ok(())
}

// ---------------------------------------------------------------- preprocess

/// PCA axes are orthonormal and projection preserves inner products of
/// vectors inside the retained subspace.
pub fn check_pca(seed: u64) -> Check {
    let mut r = rng(seed);
    let (dim, n) = (r.gen_range(2..=8), r.gen_range(10..60));
    let rank = r.gen_range(1..=dim);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|d| r.gen_range(-1.0..1.0) * (d + 1) as f64).collect())
        .collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let pca = ok(PcaTransform::fit(&x, rank))?;
    let v = &pca.components;
    for a in 0..rank {
        for b in 0..rank {
            let dot: f64 = (0..dim).map(|i| v.get(i, a) * v.get(i, b)).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            ensure!((dot - want).abs() <= 1e-9, "axes {a},{b}: {dot}");
        }
    }
    let mut pts = Vec::new();
    let mut coords = Vec::new();
    for _ in 0..2 {
        let c: Vec<f64> = (0..rank).map(|_| r.gen_range(-2.0..2.0)).collect();
        let p: Vec<f64> = (0..dim)
            .map(|i| pca.mean[i] + (0..rank).map(|a| v.get(i, a) * c[a]).sum::<f64>())
            .collect();
        pts.push(p);
        coords.push(c);
    }
    let z = ok(pca.project(&Matrix::from_rows(&pts).unwrap()))?;
    let centred: Vec<Vec<f64>> = pts
        .iter()
        .map(|p| p.iter().zip(&pca.mean).map(|(a, b)| a - b).collect())
        .collect();
    let before: f64 = centred[0].iter().zip(&centred[1]).map(|(a, b)| a * b).sum();
    let after: f64 = z.row(0).iter().zip(z.row(1)).map(|(a, b)| a * b).sum();
    ensure!((before - after).abs() <= 1e-9, "inner product {after} vs {before}");
    for (i, c) in coords.iter().enumerate() {
        for a in 0..rank {
            ensure!((z.get(i, a) - c[a]).abs() <= 1e-9, "coordinate {a} of point {i}");
        }
    }
    Ok(())
}

/// A slanted stroke with a soft edge, sheared by a random amount.
pub fn slanted_blob(seed: u64, size: usize) -> GrayImage<f64> {
    let mut r = rng(seed);
    let slant: f64 = r.gen_range(-0.6..0.6);
    let (cy, cx) = (size as f64 / 2.0 + r.gen_range(-1.0..1.0), size as f64 / 2.0 + r.gen_range(-1.0..1.0));
    let (ry, rx) = (size as f64 * r.gen_range(0.25..0.35), size as f64 * r.gen_range(0.08..0.15));
    let mut px = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx - slant * (y as f64 - cy)) / rx;
            let d = dy * dy + dx * dx;
            px[y * size + x] = (255.0 * (1.5 - d)).clamp(0.0, 255.0);
        }
    }
    GrayImage::new(size, size, px).unwrap()
}

fn image_change(a: &GrayImage<f64>, b: &GrayImage<f64>) -> f64 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Deskewing twice changes the image by under a tenth of the first change.
pub fn check_deskew_idempotent(seed: u64) -> Check {
    let img = slanted_blob(seed, 28);
    let once = ok(deskew(&img))?;
    let twice = ok(deskew(&once))?;
    let (first, second) = (image_change(&img, &once), image_change(&once, &twice));
    ensure!(
        second < 0.1 * first || first < 1e-9,
        "second pass moved {second}, first {first}"
    );
    Ok(())
}

/// Standardized fit data has column means 0 and sample stds 1.
pub fn check_standardize(seed: u64) -> Check {
    let mut r = rng(seed);
    let (n, dim) = (r.gen_range(2..80), r.gen_range(1..6));
    let scale: Vec<f64> = (0..dim).map(|_| r.gen_range(0.01..100.0)).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|d| r.gen_range(-1.0..1.0) * scale[d] + 7.0).collect())
        .collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let z = ok(ok(StandardizeTransform::fit(&x))?.apply(&x))?;
    for d in 0..dim {
        let col: Vec<f64> = (0..n).map(|i| z.get(i, d)).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        ensure!(mean.abs() <= 1e-10, "column {d} mean {mean}");
        ensure!((var.sqrt() - 1.0).abs() <= 1e-10, "column {d} std {}", var.sqrt());
    }
    Ok(())
}

// ---------------------------------------------------------------- data io

/// A saved and reloaded bundle scores every input bit for bit alike.
pub fn check_bundle_roundtrip(seed: u64) -> Check {
    let pm = random_partitioned(seed);
    let mut bundle = ModelBundle::new(ModelKind::Pskem, pm, TrainConfig::default());
    bundle.label_names = Some((0..bundle.model.num_classes()).map(|j| format!("c{j}")).collect());
    let mut bytes = Vec::new();
    ok(serde_json::to_writer(&mut bytes, &bundle))?;
    let text = ok(String::from_utf8(bytes))?;
    let back: ModelBundle<f64> = ok(io::model_from_str(&text, Path::new("mem")))?;
    let mut r = rng(seed ^ 0x5A5A);
    for _ in 0..50 {
        let x: Vec<f64> = (0..bundle.model.dim())
            .map(|_| r.gen_range(-1e3..1e3) * r.gen::<f64>().powi(3))
            .collect();
        let a = ok(bundle.model.class_scores(&x))?;
        let b = ok(back.model.class_scores(&x))?;
        ensure!(
            a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()),
            "scores differ at {x:?}"
        );
    }
    ensure!(back.label_names == bundle.label_names, "label names lost");
    Ok(())
}

/// Parsing the same bytes twice yields identical datasets.
pub fn check_loader_determinism(seed: u64) -> Check {
    let mut r = rng(seed);
    let (n, dim) = (r.gen_range(1..30), r.gen_range(1..5));
    let mut text = String::new();
    for _ in 0..n {
        for _ in 0..dim {
            text.push_str(&format!("{},", r.gen_range(-1e6..1e6)));
        }
        text.push_str(["a", "b", "c"][r.gen_range(0..3)]);
        text.push('\n');
    }
    let schema = DelimitedSchema::default();
    let a: LabeledDataset<f64> = ok(io::parse_delimited(text.as_bytes(), Path::new("m"), &schema))?;
    let b: LabeledDataset<f64> = ok(io::parse_delimited(text.as_bytes(), Path::new("m"), &schema))?;
    ensure!(
        a.features().as_slice().iter().zip(b.features().as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()),
        "features differ"
    );
    ensure!(a.labels() == b.labels() && a.label_names() == b.label_names(), "labels differ");
    // every written value parses back exactly
    let first: Vec<f64> = text
        .lines()
        .next()
        .unwrap()
        .split(',')
        .take(dim)
        .map(|v| v.parse().unwrap())
        .collect();
    ensure!(a.features().row(0) == first.as_slice(), "row 0 not exact");

    let count = r.gen_range(1..5);
    let (h, w) = (r.gen_range(1..6), r.gen_range(1..6));
    let pixels: Vec<u8> = (0..count * h * w).map(|_| r.gen()).collect();
    let mut bytes = Vec::new();
    for v in [io::IDX_IMAGES_MAGIC, count as u32, h as u32, w as u32] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.extend_from_slice(&pixels);
    let x = ok(io::parse_idx_images(&bytes, Path::new("i")))?;
    let y = ok(io::parse_idx_images(&bytes, Path::new("i")))?;
    ensure!(x.pixels == y.pixels && x.pixels == pixels, "IDX pixels differ");
    Ok(())
}

/// Name and function of every invariant check.
pub const INVARIANTS: &[(&str, fn(u64) -> Check)] = &[
    ("density permutation invariance", check_density_permutation),
    ("diagonal density factorizes", check_diagonal_density),
    ("class density shift", check_class_density_shift),
    ("monotone likelihood", check_monotone),
    ("responsibility and weight normalization", check_normalization),
    ("Q-function oracle", check_q_oracle),
    ("single-class reduction", check_single_class_reduction),
    ("MDA with one component", check_mda_single_component),
    ("sample permutation equivariance", check_permutation_equivariance),
    ("serial vs parallel EM", check_serial_parallel_em),
    ("partition cover", check_partition_cover),
    ("single block equals SKEM", check_single_block),
    ("joint expansion", check_expansion),
    ("serial vs parallel PSKEM", check_serial_parallel_pskem),
    ("argmax invariance", check_argmax_invariance),
    ("evaluate recount", check_evaluate),
    ("shared proportion range", check_shared_proportion),
    ("PCA orthonormality", check_pca),
    ("deskew idempotence", check_deskew_idempotent),
    ("standardization", check_standardize),
    ("bundle round trip", check_bundle_roundtrip),
    ("loader determinism", check_loader_determinism),
];

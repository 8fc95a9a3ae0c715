use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use skem::cv::derive_seed;
use skem::em::CovarianceMode;
use skem::io::{self, ModelBundle, ModelKind};
use skem::{
    complexity_estimate, cross_validate, evaluate, make_partition, shared_proportion, train_pskem,
    ClassScorer, ConfusionMatrix, CvConfig, CvReport, LabeledDataset, PartitionedModel,
    StandardizeTransform, TrainConfig, SHARED_THRESHOLD,
};

use crate::data::{self, feature_standardize, Prepared};
use crate::settings::{parse_arrangement, SelectArg, Settings};

/// Prints the resolved settings on one line and, with an output directory,
/// saves them as `config.json` (loadable with `--config`).
pub fn echo_config(s: &Settings, out: Option<&Path>) -> Result<()> {
    println!("config: {}", serde_json::to_string(s)?);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        io::write_json(s, &dir.join("config.json"))?;
    }
    Ok(())
}

fn out_dir(s: &Settings, default: &str) -> Result<PathBuf> {
    let dir = s.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn model_kind(cfg: &TrainConfig, blocks: usize) -> ModelKind {
    match (cfg.covariance_mode, blocks) {
        (CovarianceMode::Pooled, _) => ModelKind::Mda,
        (_, 1) => ModelKind::Skem,
        _ => ModelKind::Pskem,
    }
}

pub fn confusion_tsv(cm: &ConfusionMatrix, names: &[String]) -> String {
    let mut out = String::from("true\\predicted");
    for n in names {
        let _ = write!(out, "\t{n}");
    }
    out.push('\n');
    for (n, row) in names.iter().zip(&cm.counts) {
        out.push_str(n);
        for c in row {
            let _ = write!(out, "\t{c}");
        }
        out.push('\n');
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn names_of(d: &LabeledDataset<f64>) -> Vec<String> {
    d.label_names()
        .map(<[String]>::to_vec)
        .unwrap_or_else(|| (1..=d.num_classes()).map(|j| j.to_string()).collect())
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub kind: ModelKind,
    pub samples: usize,
    pub dim: usize,
    pub block_sizes: Vec<usize>,
    pub passes_run: usize,
    pub final_log_likelihood: Option<f64>,
    pub selected_pass: Option<usize>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub shared_proportion: Option<f64>,
    pub op_estimate: f64,
}

pub fn train(s: &Settings) -> Result<TrainReport> {
    s.require_data()?;
    let dir = out_dir(s, "skem-out")?;
    echo_config(s, Some(&dir))?;
    let Prepared {
        train,
        test,
        pipeline,
    } = data::prepare(s, false)?;
    if s.select == SelectArg::Best && test.is_none() {
        eprintln!("note: no --test data, keeping the final model");
    }
    let dim = train.dim();
    let partition = make_partition(dim, s.num_blocks(dim)?, s.scheme.into(), s.partition_seed())?;
    let cfg = s.train_config();
    let started = Instant::now();
    let outcome = train_pskem(&train, &partition, &cfg, test.as_ref())?;
    eprintln!("trained in {:.2?}", started.elapsed());

    let (model, selected_pass) = match (s.select, outcome.best) {
        (SelectArg::Best, Some(b)) => (b.model, Some(b.pass)),
        _ => (outcome.model, None),
    };
    let (_, train_accuracy) = evaluate(&model, &train)?;
    let test_eval = test.as_ref().map(|t| evaluate(&model, t)).transpose()?;
    let report = TrainReport {
        kind: model_kind(&cfg, partition.num_blocks()),
        samples: train.len(),
        dim,
        block_sizes: partition.block_sizes(),
        passes_run: outcome.history.log_likelihood.len(),
        final_log_likelihood: outcome.history.log_likelihood.last().copied(),
        selected_pass,
        train_accuracy,
        test_accuracy: test_eval.as_ref().map(|(_, a)| *a),
        shared_proportion: shared_proportion(model.weights(), SHARED_THRESHOLD).ok(),
        op_estimate: complexity_estimate(train.len(), &partition.block_sizes(), cfg.num_components, cfg.max_passes),
    };

    let mut bundle = ModelBundle::new(report.kind, model, cfg);
    bundle.pipeline = pipeline;
    bundle.label_names = Some(names_of(&train));
    bundle.history = Some(outcome.history.clone());
    bundle.selected_pass = selected_pass;
    io::save_model(&bundle, &dir.join("model.json"))?;
    write_text(&dir.join("history.tsv"), &io::history_tsv(&outcome.history))?;
    if let (Some((cm, _)), Some(t)) = (&test_eval, &test) {
        write_text(&dir.join("confusion.tsv"), &confusion_tsv(cm, &names_of(t)))?;
    }
    io::write_json(&report, &dir.join("report.json"))?;

    println!("model: {}", dir.join("model.json").display());
    println!("train accuracy: {:.4}", report.train_accuracy);
    if let Some(a) = report.test_accuracy {
        match selected_pass {
            Some(p) => println!("test accuracy: {a:.4} (pass {p})"),
            None => println!("test accuracy: {a:.4}"),
        }
    }
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
}

pub fn eval(s: &Settings, model_path: &Path) -> Result<EvalReport> {
    echo_config(s, None)?;
    let bundle: ModelBundle<f64> = io::load_model(model_path)
        .with_context(|| format!("loading {}", model_path.display()))?;
    let path = s
        .test
        .as_ref()
        .or(s.data.as_ref())
        .context("missing --test (or --data)")?;
    let names = bundle
        .label_names
        .clone()
        .unwrap_or_else(|| (1..=bundle.model.num_classes()).map(|j| j.to_string()).collect());
    let raw = data::load_raw(path, s, s.test_limit.or(s.limit), Some(&names))?;
    let test = raw.transform(&bundle.pipeline)?;
    let (cm, accuracy) = evaluate(&bundle.model, &test)?;
    if let Some(dir) = &s.out {
        std::fs::create_dir_all(dir)?;
        write_text(&dir.join("confusion.tsv"), &confusion_tsv(&cm, &names))?;
    }
    let report = EvalReport {
        samples: test.len(),
        accuracy,
        confusion: cm.counts,
    };
    if let Some(dir) = &s.out {
        io::write_json(&report, &dir.join("report.json"))?;
    }
    println!("samples: {}", report.samples);
    println!("accuracy: {accuracy:.4}");
    Ok(report)
}

fn cv_config(s: &Settings, dim: usize) -> Result<CvConfig> {
    Ok(CvConfig {
        folds: s.folds,
        randomize: s.randomize_folds,
        trials: s.trials,
        blocks: s.num_blocks(dim)?,
        scheme: s.scheme.into(),
        standardize: feature_standardize(s),
        seed: s.seed,
        parallel: true,
    })
}

pub fn folds_tsv(r: &CvReport) -> String {
    let mut out = String::from("trial\tfold\taccuracy\tbest_pass\n");
    for (t, (accs, passes)) in r.fold_accuracy.iter().zip(&r.best_pass).enumerate() {
        for (f, (a, p)) in accs.iter().zip(passes).enumerate() {
            let _ = writeln!(out, "{}\t{}\t{a}\t{p}", t + 1, f + 1);
        }
    }
    out
}

pub fn cv(s: &Settings) -> Result<CvReport> {
    echo_config(s, s.out.as_deref())?;
    if s.test.is_some() {
        bail!("cv splits --data into folds and does not take --test");
    }
    let p = data::prepare(s, true)?;
    let cv = cv_config(s, p.train.dim())?;
    let started = Instant::now();
    let report = cross_validate(&p.train, &s.train_config(), &cv)?;
    eprintln!("cross-validated in {:.2?}", started.elapsed());
    if let Some(dir) = &s.out {
        std::fs::create_dir_all(dir)?;
        io::write_json(&report, &dir.join("report.json"))?;
        write_text(&dir.join("folds.tsv"), &folds_tsv(&report))?;
    }
    println!(
        "accuracy: {:.4} ± {:.4} over {} trial(s) of {} folds (fold std {:.4})",
        report.mean, report.std, report.trials, report.folds, report.fold_std
    );
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub blocks: usize,
    pub block_dim: usize,
    pub scheme: crate::settings::SchemeArg,
    pub trials: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub shared_mean: f64,
    pub shared_std: f64,
    pub op_estimate: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "k\tblocks\tblock_dim\tscheme\ttrials\tacc_mean\tacc_std\tshared_mean\tshared_std\top_estimate\n",
    );
    for r in rows {
        let scheme = serde_json::to_value(r.scheme).ok();
        let scheme = scheme.as_ref().and_then(|v| v.as_str()).unwrap_or("?");
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{scheme}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}",
            r.k, r.blocks, r.block_dim, r.trials, r.acc_mean, r.acc_std, r.shared_mean, r.shared_std,
            r.op_estimate
        );
    }
    out
}

/// Accuracy and shared proportion of one grid run.
fn sweep_run(
    s: &Settings,
    p: &Prepared,
    cfg: &TrainConfig,
    blocks: usize,
    scheme: crate::settings::SchemeArg,
) -> Result<(f64, f64)> {
    let partition = make_partition(p.train.dim(), blocks, scheme.into(), cfg.seed)?;
    let shared = |m: &PartitionedModel<f64>| shared_proportion(m.weights(), SHARED_THRESHOLD);
    match &p.test {
        Some(test) => {
            let out = train_pskem(&p.train, &partition, cfg, Some(test))?;
            match (s.select, out.best) {
                (SelectArg::Best, Some(b)) => Ok((b.accuracy, shared(&b.model)?)),
                _ => Ok((evaluate(&out.model, test)?.1, shared(&out.model)?)),
            }
        }
        None => {
            let cv = CvConfig {
                trials: 1,
                blocks,
                seed: cfg.seed,
                ..cv_config(s, p.train.dim())?
            };
            let acc = cross_validate(&p.train, cfg, &cv)?.mean;
            let full = if cv.standardize {
                let st = StandardizeTransform::fit(p.train.features())?;
                p.train.with_features(st.apply(p.train.features())?)?
            } else {
                p.train.clone()
            };
            let out = train_pskem(&full, &partition, cfg, None)?;
            Ok((acc, shared(&out.model)?))
        }
    }
}

/// Grid over K × arrangement × scheme, `trials` seeded runs per point.
///
/// Trial t trains with seed `derive_seed(seed, t)`, which also seeds the
/// random partition scheme. Without `--test` accuracy comes from
/// cross-validation and the shared proportion from a fit on all of `--data`.
pub fn sweep(s: &Settings) -> Result<Vec<SweepRow>> {
    echo_config(s, s.out.as_deref())?;
    let p = data::prepare(s, s.test.is_none())?;
    let dim = p.train.dim();
    let mut points = Vec::new();
    for &k in &s.ks {
        for a in &s.arrangements {
            let (r, m) = parse_arrangement(a)?;
            if r * m != dim {
                bail!("arrangement {a} covers {} features but the data has {dim}", r * m);
            }
            for &scheme in &s.schemes {
                points.push((k, r, m, scheme));
            }
        }
    }
    if points.is_empty() {
        bail!("empty sweep grid");
    }
    let runs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|i| (0..s.trials).map(move |t| (i, derive_seed(s.seed, t as u64))))
        .collect();
    let started = Instant::now();
    let results: Vec<(f64, f64)> = runs
        .par_iter()
        .map(|&(i, seed)| {
            let (k, r, _, scheme) = points[i];
            let cfg = TrainConfig {
                num_components: k,
                seed,
                ..s.train_config()
            };
            sweep_run(s, &p, &cfg, r, scheme)
        })
        .collect::<Result<_>>()?;
    eprintln!("swept {} runs in {:.2?}", runs.len(), started.elapsed());

    let rows: Vec<SweepRow> = points
        .iter()
        .enumerate()
        .map(|(i, &(k, r, m, scheme))| {
            let chunk = &results[i * s.trials..(i + 1) * s.trials];
            let (acc_mean, acc_std) = mean_std(&chunk.iter().map(|c| c.0).collect::<Vec<_>>());
            let (shared_mean, shared_std) = mean_std(&chunk.iter().map(|c| c.1).collect::<Vec<_>>());
            let block_sizes = make_partition(dim, r, scheme.into(), 0)
                .map(|p| p.block_sizes())
                .unwrap_or_else(|_| vec![m; r]);
            SweepRow {
                k,
                blocks: r,
                block_dim: m,
                scheme,
                trials: s.trials,
                acc_mean,
                acc_std,
                shared_mean,
                shared_std,
                op_estimate: complexity_estimate(p.train.len(), &block_sizes, k, s.passes),
            }
        })
        .collect();
    let table = sweep_tsv(&rows);
    if let Some(dir) = &s.out {
        std::fs::create_dir_all(dir)?;
        write_text(&dir.join("sweep.tsv"), &table)?;
        io::write_json(&rows, &dir.join("sweep.json"))?;
    }
    print!("{table}");
    Ok(rows)
}

//! Loading delimited or IDX data and fitting the feature pipeline.

use std::path::Path;

use anyhow::{bail, Context, Result};
use skem::io::{self, DelimitedSchema, LabelColumn};
use skem::preprocess::ImageSteps;
use skem::{FeaturePipeline, GrayImage, LabeledDataset, Matrix};

use crate::settings::{parse_columns, Settings, StandardizeArg};

/// Features as read from disk, before any fitted transform.
pub enum RawFeatures {
    Table(Matrix<f64>),
    Images(Vec<GrayImage<f64>>),
}

pub struct RawData {
    pub features: RawFeatures,
    pub labels: Vec<usize>,
    pub names: Vec<String>,
}

impl RawData {
    pub fn is_images(&self) -> bool {
        matches!(self.features, RawFeatures::Images(_))
    }

    fn dataset(&self, features: Matrix<f64>) -> Result<LabeledDataset<f64>> {
        Ok(LabeledDataset::new(features, self.labels.clone(), self.names.len())?
            .with_label_names(self.names.clone())?)
    }

    /// Applies a fitted pipeline, image steps included.
    pub fn transform(&self, pipeline: &FeaturePipeline<f64>) -> Result<LabeledDataset<f64>> {
        let x = match &self.features {
            RawFeatures::Table(x) => {
                if pipeline.image.is_some() {
                    bail!("model expects image input but the data is a table");
                }
                pipeline.transform(x)?
            }
            RawFeatures::Images(imgs) => pipeline.transform_images(imgs)?,
        };
        self.dataset(x)
    }
}

fn is_idx(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.contains("images-idx3"))
}

fn label_column(spec: &str) -> Result<LabelColumn> {
    Ok(match spec {
        "first" => LabelColumn::First,
        "last" => LabelColumn::Last,
        n => {
            let i: usize = n
                .parse()
                .with_context(|| format!("--labels-col expects first, last or a number, got {n:?}"))?;
            if i == 0 {
                bail!("--labels-col is 1-based");
            }
            LabelColumn::Index(i - 1)
        }
    })
}

/// Reads `path`; `dictionary` fixes the label set (e.g. from training data).
pub fn load_raw(
    path: &Path,
    s: &Settings,
    limit: Option<usize>,
    dictionary: Option<&[String]>,
) -> Result<RawData> {
    if is_idx(path) {
        let labels_path = io::idx_labels_path(path)
            .with_context(|| format!("no label file name for {}", path.display()))?;
        let (images, labels) = io::load_idx_images::<f64>(path, &labels_path, limit)
            .with_context(|| format!("reading {}", path.display()))?;
        if images.is_empty() {
            bail!("{}: no images", path.display());
        }
        let names: Vec<String> = match dictionary {
            Some(d) => d.to_vec(),
            None => {
                let max = labels.iter().copied().max().unwrap_or(0) as usize;
                (0..=max).map(|l| l.to_string()).collect()
            }
        };
        let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l >= names.len()) {
            bail!("{}: label {bad} outside the {} known classes", labels_path.display(), names.len());
        }
        return Ok(RawData {
            features: RawFeatures::Images(images),
            labels,
            names,
        });
    }
    if !s.delimiter.is_ascii() {
        bail!("--delimiter must be an ASCII character");
    }
    let mut schema = DelimitedSchema {
        delimiter: s.delimiter as u8,
        header: s.header.into(),
        label: label_column(&s.labels_col)?,
        dictionary: None,
    };
    if let Some(d) = dictionary {
        schema = schema.with_dictionary(d.to_vec());
    }
    let mut data = io::load_delimited::<f64>(path, &schema)
        .with_context(|| format!("reading {}", path.display()))?;
    if data.is_empty() {
        bail!("{}: no samples", path.display());
    }
    if let Some(l) = limit {
        if l < data.len() {
            let idx: Vec<usize> = (0..l).collect();
            data = data.subset(&idx);
        }
    }
    let names = data
        .label_names()
        .map(<[String]>::to_vec)
        .unwrap_or_else(|| (1..=data.num_classes()).map(|j| j.to_string()).collect());
    Ok(RawData {
        labels: data.labels().to_vec(),
        features: RawFeatures::Table(data.features().clone()),
        names,
    })
}

/// Training (and optional test) sets after the fitted pipeline.
pub struct Prepared {
    pub train: LabeledDataset<f64>,
    pub test: Option<LabeledDataset<f64>>,
    pub pipeline: FeaturePipeline<f64>,
}

/// Loads `--data` (and `--test`), then fits column selection, image steps,
/// standardization and PCA on the training rows.
///
/// With `per_fold_standardize` the per-feature standardization is left to the
/// caller (cross-validation fits it on each training split).
pub fn prepare(s: &Settings, per_fold_standardize: bool) -> Result<Prepared> {
    let raw = load_raw(s.require_data()?, s, s.limit, None)?;
    let test = match &s.test {
        Some(p) => Some(load_raw(p, s, s.test_limit, Some(&raw.names))?),
        None => None,
    };
    if let Some(t) = &test {
        if t.is_images() != raw.is_images() {
            bail!("--data and --test have different formats");
        }
    }
    let pipeline = fit_pipeline(&raw, s, per_fold_standardize)?;
    let train = raw.transform(&pipeline)?;
    let test = test.map(|t| t.transform(&pipeline)).transpose()?;
    Ok(Prepared {
        train,
        test,
        pipeline,
    })
}

/// Whether per-feature standardization is requested for this data.
pub fn feature_standardize(s: &Settings) -> bool {
    s.standardize == StandardizeArg::Feature
}

fn fit_pipeline(raw: &RawData, s: &Settings, per_fold_standardize: bool) -> Result<FeaturePipeline<f64>> {
    let standardize = feature_standardize(s) && !per_fold_standardize;
    match &raw.features {
        RawFeatures::Images(imgs) => {
            if s.features.is_some() {
                bail!("--features applies to delimited data only");
            }
            let steps = ImageSteps {
                deskew: s.deskew,
                downsample: s.half,
                range_scale: true,
                normalize: matches!(s.standardize, StandardizeArg::Auto | StandardizeArg::Image),
            };
            let x = steps.apply_all(imgs)?;
            check_rank(s, x.cols())?;
            Ok(FeaturePipeline::fit(&x, Some(steps), standardize, s.pca)?)
        }
        RawFeatures::Table(x) => {
            if s.deskew || s.half {
                bail!("--deskew and --half apply to image data only");
            }
            if s.standardize == StandardizeArg::Image {
                bail!("--standardize image applies to image data only");
            }
            let columns = s.features.as_deref().map(parse_columns).transpose()?;
            let selected = match &columns {
                Some(c) => {
                    if let Some(&bad) = c.iter().find(|&&i| i >= x.cols()) {
                        bail!("--features column {} exceeds the {} feature columns", bad + 1, x.cols());
                    }
                    x.select_columns(c)
                }
                None => x.clone(),
            };
            check_rank(s, selected.cols())?;
            let mut p = FeaturePipeline::fit(&selected, None, standardize, s.pca)?;
            p.columns = columns;
            Ok(p)
        }
    }
}

fn check_rank(s: &Settings, dim: usize) -> Result<()> {
    if let Some(r) = s.pca {
        if r == 0 || r > dim {
            bail!("--pca {r} must lie in 1..={dim}");
        }
    }
    Ok(())
}

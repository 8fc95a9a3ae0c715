//! Dataset loaders (delimited text, IDX) and model bundle persistence.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::em::{TrainConfig, TrainHistory};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::LabeledDataset;
use crate::partition::PartitionedModel;
use crate::preprocess::{FeaturePipeline, GrayImage};
use crate::scalar::Scalar;

/// Which column holds the class label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelColumn {
    First,
    #[default]
    Last,
    /// 0-based column index.
    Index(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Header {
    /// The first row is a header when any of its feature cells is not numeric.
    #[default]
    Auto,
    Present,
    Absent,
}

/// Layout of a delimited text file.
///
/// Blank lines and lines starting with `#`, `%` or `@` are skipped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelimitedSchema {
    pub delimiter: u8,
    pub header: Header,
    pub label: LabelColumn,
    /// Known label strings; unseen labels are then an error. Without it the
    /// sorted set of labels in the file is used.
    pub dictionary: Option<Vec<String>>,
}

impl Default for DelimitedSchema {
    fn default() -> Self {
        Self {
            delimiter: b',',
            header: Header::Auto,
            label: LabelColumn::Last,
            dictionary: None,
        }
    }
}

impl DelimitedSchema {
    pub fn with_dictionary(mut self, names: Vec<String>) -> Self {
        self.dictionary = Some(names);
        self
    }
}

/// Sorts label strings numerically when they all parse as numbers, else lexically.
pub fn sort_labels(labels: &mut [String]) {
    let numeric: Option<Vec<f64>> = labels.iter().map(|s| s.parse::<f64>().ok()).collect();
    if numeric.is_some() {
        labels.sort_by(|a, b| {
            let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.cmp(b))
        });
    } else {
        labels.sort();
    }
}

/// Distinct labels in [`sort_labels`] order.
pub fn label_dictionary<'a>(labels: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen: Vec<String> = labels
        .into_iter()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect();
    sort_labels(&mut seen);
    seen
}

/// Reads features and labels from delimited text, preserving row order.
///
/// Labels are numbered by their position in the dictionary; the dictionary is
/// kept as the dataset's label names.
pub fn load_delimited<T: Scalar>(path: &Path, schema: &DelimitedSchema) -> Result<LabeledDataset<T>> {
    let file = File::open(path)?;
    parse_delimited(BufReader::new(file), path, schema)
}

pub fn parse_delimited<T: Scalar, R: Read>(
    reader: R,
    path: &Path,
    schema: &DelimitedSchema,
) -> Result<LabeledDataset<T>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut width: Option<usize> = None;
    let mut label_col = 0;
    let mut features: Vec<T> = Vec::new();
    let mut raw_labels: Vec<(String, usize)> = Vec::new();
    let mut first = true;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let lead = rec.get(0).unwrap_or("");
        if rec.iter().all(str::is_empty) || lead.starts_with(['#', '%', '@']) {
            continue;
        }
        let cols = rec.len();
        match width {
            None => {
                if cols < 2 {
                    return Err(parse_err(line, format!("expected a label and at least one feature, found {cols} column(s)")));
                }
                label_col = match schema.label {
                    LabelColumn::First => 0,
                    LabelColumn::Last => cols - 1,
                    LabelColumn::Index(i) if i < cols => i,
                    LabelColumn::Index(i) => {
                        return Err(parse_err(line, format!("label column {} beyond {cols} columns", i + 1)))
                    }
                };
                width = Some(cols);
            }
            Some(w) if w != cols => {
                return Err(parse_err(line, format!("ragged row: expected {w} columns, found {cols}")));
            }
            Some(_) => {}
        }
        let parsed: Vec<std::result::Result<f64, &str>> = rec
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != label_col)
            .map(|(_, s)| s.parse::<f64>().map_err(|_| s))
            .collect();
        let is_header = first
            && match schema.header {
                Header::Present => true,
                Header::Absent => false,
                Header::Auto => parsed.iter().any(|p| p.is_err()),
            };
        first = false;
        if is_header {
            continue;
        }
        for p in parsed {
            match p {
                Ok(v) => features.push(T::lit(v)),
                Err(cell) => return Err(parse_err(line, format!("non-numeric feature value {cell:?}"))),
            }
        }
        raw_labels.push((rec[label_col].to_string(), line));
    }
    if raw_labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let names = match &schema.dictionary {
        Some(d) => d.clone(),
        None => label_dictionary(raw_labels.iter().map(|(s, _)| s.as_str())),
    };
    let lookup: HashMap<&str, usize> = names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let labels = raw_labels
        .iter()
        .map(|(s, line)| {
            lookup
                .get(s.as_str())
                .copied()
                .ok_or_else(|| parse_err(*line, format!("unknown label {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = labels.len();
    let m = features.len() / n;
    LabeledDataset::new(Matrix::from_vec(n, m, features)?, labels, names.len())?.with_label_names(names)
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Unsigned-byte image tensor from an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.height * self.width;
        &self.pixels[i * sz..(i + 1) * sz]
    }

    pub fn to_gray<T: Scalar>(&self, i: usize) -> GrayImage<T> {
        GrayImage::from_bytes(self.height, self.width, self.image(i)).expect("consistent image size")
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "truncated header".into(),
        })
}

fn format_err(path: &Path, message: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message,
    }
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(path, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let height = be_u32(bytes, 8, path)? as usize;
    let width = be_u32(bytes, 12, path)? as usize;
    let need = count * height * width;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(format_err(path, format!("truncated: expected {need} pixel bytes, found {}", body.len())));
    }
    Ok(IdxImages {
        count,
        height,
        width,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(path, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(format_err(path, format!("truncated: expected {count} labels, found {}", body.len())));
    }
    Ok(body[..count].to_vec())
}

/// Reads an IDX image file and its label file; counts must agree.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(IdxImages, Vec<u8>)> {
    let img = parse_idx_images(&read_all(images)?, images)?;
    let lab = parse_idx_labels(&read_all(labels)?, labels)?;
    if img.count != lab.len() {
        return Err(format_err(
            labels,
            format!("{} labels for {} images", lab.len(), img.count),
        ));
    }
    Ok((img, lab))
}

/// Label file conventionally paired with an image file
/// (`*-images-idx3-ubyte` → `*-labels-idx1-ubyte`).
pub fn idx_labels_path(images: &Path) -> Option<std::path::PathBuf> {
    let name = images.file_name()?.to_str()?;
    name.contains("images-idx3")
        .then(|| images.with_file_name(name.replace("images-idx3", "labels-idx1")))
}

/// First `limit` images (all when `None`) of an IDX pair with their labels.
pub fn load_idx_images<T: Scalar>(
    images: &Path,
    labels: &Path,
    limit: Option<usize>,
) -> Result<(Vec<GrayImage<T>>, Vec<u8>)> {
    let (img, lab) = load_idx(images, labels)?;
    let n = limit.map_or(img.count, |l| l.min(img.count));
    let out = (0..n).map(|i| img.to_gray(i)).collect();
    Ok((out, lab[..n].to_vec()))
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.height as u32, images.width as u32] {
        w.write_all(&v.to_be_bytes())?;
    }
    w.write_all(&images.pixels)?;
    w.flush()?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}

/// Current bundle format.
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Skem,
    Pskem,
    Mda,
    StandardEm,
}

/// Everything needed to classify raw inputs: model, fitted transforms and
/// label dictionary, plus the training settings and trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModelBundle<T> {
    pub format_version: u32,
    pub kind: ModelKind,
    pub model: PartitionedModel<T>,
    #[serde(default)]
    pub pipeline: FeaturePipeline<T>,
    #[serde(default)]
    pub label_names: Option<Vec<String>>,
    pub config: TrainConfig,
    #[serde(default)]
    pub history: Option<TrainHistory>,
    /// Pass whose model was kept, when selected on validation accuracy.
    #[serde(default)]
    pub selected_pass: Option<usize>,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(kind: ModelKind, model: PartitionedModel<T>, config: TrainConfig) -> Self {
        Self {
            format_version: BUNDLE_VERSION,
            kind,
            model,
            pipeline: FeaturePipeline::default(),
            label_names: None,
            config,
            history: None,
            selected_pass: None,
        }
    }

    /// Model invariants plus consistency of labels and transforms.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != BUNDLE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.format_version,
                supported: BUNDLE_VERSION,
            });
        }
        self.model.validate()?;
        use crate::classifier::ClassScorer;
        if let Some(names) = &self.label_names {
            if names.len() != self.model.num_classes() {
                return Err(Error::DimensionMismatch {
                    expected: self.model.num_classes(),
                    found: names.len(),
                });
            }
        }
        if let Some(p) = &self.pipeline.pca {
            if p.rank() != self.model.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.model.dim(),
                    found: p.rank(),
                });
            }
        } else if let Some(s) = &self.pipeline.standardize {
            if s.dim() != self.model.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.model.dim(),
                    found: s.dim(),
                });
            }
        }
        Ok(())
    }
}

/// Writes the bundle as JSON. Floats use the shortest round-trip decimal
/// form, so loading reproduces every value exactly.
pub fn save_model<T: Scalar>(bundle: &ModelBundle<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, bundle)?;
    w.flush()?;
    Ok(())
}

/// Reads and validates a bundle. The version is checked before the rest of
/// the document is interpreted.
pub fn load_model<T: Scalar>(path: &Path) -> Result<ModelBundle<T>> {
    let text = std::fs::read_to_string(path)?;
    model_from_str(&text, path)
}

pub fn model_from_str<T: Scalar>(text: &str, path: &Path) -> Result<ModelBundle<T>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| format_err(path, "missing format_version".into()))?;
    if version != u64::from(BUNDLE_VERSION) {
        return Err(Error::UnsupportedVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: BUNDLE_VERSION,
        });
    }
    let bundle: ModelBundle<T> = serde_json::from_value(value)?;
    bundle.validate()?;
    Ok(bundle)
}

/// Pretty JSON for reports and configs.
pub fn write_json<S: Serialize + ?Sized>(value: &S, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Per-pass table: pass, log-likelihood and (when recorded) accuracy.
pub fn history_tsv(history: &TrainHistory) -> String {
    let mut out = String::from("pass\tlog_likelihood\taccuracy\n");
    out.push_str(&format!("0\t{}\t\n", history.initial_log_likelihood));
    for (i, ll) in history.log_likelihood.iter().enumerate() {
        let acc = history
            .accuracy
            .get(i)
            .map_or(String::new(), |a| a.to_string());
        out.push_str(&format!("{}\t{ll}\t{acc}\n", i + 1));
    }
    out
}

/// Class counts keyed by label name, for summaries.
pub fn label_histogram<T: Scalar>(data: &LabeledDataset<T>) -> BTreeMap<String, usize> {
    let sizes = data.class_sizes();
    (0..data.num_classes())
        .map(|j| {
            let name = data
                .label_names()
                .map_or_else(|| (j + 1).to_string(), |n| n[j].clone());
            (name, sizes[j])
        })
        .collect()
}

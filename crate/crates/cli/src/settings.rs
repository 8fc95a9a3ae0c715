//! Resolved run settings: defaults, then a JSON config file, then flags.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use skem::em::CovarianceMode;
use skem::io::Header;
use skem::PartitionScheme;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeArg {
    Seq,
    Inter,
    Rand,
}

impl From<SchemeArg> for PartitionScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Seq => PartitionScheme::Sequential,
            SchemeArg::Inter => PartitionScheme::Interleaved,
            SchemeArg::Rand => PartitionScheme::Random,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CovArg {
    Full,
    Mda,
}

impl From<CovArg> for CovarianceMode {
    fn from(c: CovArg) -> Self {
        match c {
            CovArg::Full => CovarianceMode::PerComponent,
            CovArg::Mda => CovarianceMode::Pooled,
        }
    }
}

/// How features are standardized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StandardizeArg {
    /// Images: per image; tables: none.
    Auto,
    None,
    /// Per feature, fitted on the training data.
    Feature,
    /// Per image (zero mean, unit deviation over its pixels).
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum HeaderArg {
    Auto,
    Yes,
    No,
}

impl From<HeaderArg> for Header {
    fn from(h: HeaderArg) -> Self {
        match h {
            HeaderArg::Auto => Header::Auto,
            HeaderArg::Yes => Header::Present,
            HeaderArg::No => Header::Absent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SelectArg {
    /// Keep the model after the last pass.
    Final,
    /// Keep the pass with the best test accuracy.
    Best,
}

/// Every knob of every subcommand, fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub data: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// "first", "last" or a 1-based column number.
    pub labels_col: String,
    pub delimiter: char,
    pub header: HeaderArg,
    /// 1-based inclusive feature columns, e.g. "3-34" or "1,4,7-9".
    pub features: Option<String>,
    pub limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub deskew: bool,
    pub half: bool,
    pub standardize: StandardizeArg,
    pub pca: Option<usize>,
    pub k: usize,
    pub passes: usize,
    pub init_range: (f64, f64),
    pub sigma: f64,
    pub cov: CovArg,
    pub min_weight: f64,
    pub early_stop: Option<f64>,
    pub blocks: Option<usize>,
    pub block_dim: Option<usize>,
    pub scheme: SchemeArg,
    pub partition_seed: Option<u64>,
    pub select: SelectArg,
    pub folds: usize,
    pub randomize_folds: bool,
    pub trials: usize,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub ks: Vec<usize>,
    pub arrangements: Vec<String>,
    pub schemes: Vec<SchemeArg>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            data: None,
            test: None,
            labels_col: "last".into(),
            delimiter: ',',
            header: HeaderArg::Auto,
            features: None,
            limit: None,
            test_limit: None,
            deskew: false,
            half: false,
            standardize: StandardizeArg::Auto,
            pca: None,
            k: 12,
            passes: 30,
            init_range: (-2.0, 2.0),
            sigma: 2.0,
            cov: CovArg::Full,
            min_weight: 0.0,
            early_stop: None,
            blocks: None,
            block_dim: None,
            scheme: SchemeArg::Seq,
            partition_seed: None,
            select: SelectArg::Best,
            folds: 10,
            randomize_folds: false,
            trials: 1,
            seed: 0,
            jobs: None,
            out: None,
            ks: vec![4, 12, 40],
            arrangements: vec!["12x3".into(), "6x6".into(), "3x12".into(), "2x18".into(), "1x36".into()],
            schemes: vec![SchemeArg::Seq],
        }
    }
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .or_else(|| s.split_once(':'))
        .ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
    let a: f64 = a.trim().parse().map_err(|_| format!("bad number {a:?}"))?;
    let b: f64 = b.trim().parse().map_err(|_| format!("bad number {b:?}"))?;
    Ok((a, b))
}

/// Flags shared by every data-driven subcommand. Unset flags leave the
/// config-file or default value alone.
#[derive(Args, Debug, Default, Clone)]
pub struct CommonArgs {
    /// JSON settings file; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Training data: delimited text, or an IDX image file (labels file found by name).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Test data in the same format.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Label column: first, last or a 1-based index.
    #[arg(long)]
    pub labels_col: Option<String>,
    #[arg(long)]
    pub delimiter: Option<char>,
    #[arg(long, value_enum)]
    pub header: Option<HeaderArg>,
    /// 1-based feature columns to keep, e.g. 3-34.
    #[arg(long)]
    pub features: Option<String>,
    /// Use only the first N training samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Deskew images.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub deskew: Option<bool>,
    /// Halve images with a 2x2 box average.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub half: Option<bool>,
    #[arg(long, value_enum)]
    pub standardize: Option<StandardizeArg>,
    /// Number of PCA features.
    #[arg(long)]
    pub pca: Option<usize>,
    /// Mixture components per block.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub passes: Option<usize>,
    /// Initial mean range LO,HI.
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
    pub init_range: Option<(f64, f64)>,
    /// Initial covariance is sigma² I.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_enum)]
    pub cov: Option<CovArg>,
    #[arg(long)]
    pub min_weight: Option<f64>,
    /// Stop when the relative likelihood gain falls to this value.
    #[arg(long)]
    pub early_stop: Option<f64>,
    /// Number of feature blocks R.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Block dimension m (R = M / m).
    #[arg(long)]
    pub block_dim: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Seed for the random partition scheme (defaults to --seed).
    #[arg(long)]
    pub partition_seed: Option<u64>,
    /// Which model to keep when test data is given.
    #[arg(long, value_enum)]
    pub select: Option<SelectArg>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub randomize_folds: Option<bool>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sweep: component counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Sweep: arrangements RxM, comma separated (e.g. 12x3,1x36).
    #[arg(long, value_delimiter = ',')]
    pub arrangements: Option<Vec<String>>,
    /// Sweep: partition schemes, comma separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub schemes: Option<Vec<SchemeArg>>,
}

macro_rules! overlay {
    ($s:ident, $a:ident; $($f:ident),* ; $($o:ident),*) => {
        $( if let Some(v) = $a.$f.clone() { $s.$f = v; } )*
        $( if $a.$o.is_some() { $s.$o = $a.$o.clone(); } )*
    };
}

impl Settings {
    /// `base` (defaults or a preset), then the config file, then the flags.
    pub fn resolve(base: Settings, args: &CommonArgs) -> Result<Settings> {
        let mut s = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let mut value = serde_json::to_value(&base)?;
                let patch: serde_json::Value = serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?;
                merge(&mut value, patch);
                serde_json::from_value(value)
                    .with_context(|| format!("invalid config {}", path.display()))?
            }
            None => base,
        };
        overlay!(s, args;
            labels_col, delimiter, header, deskew, half, standardize, k, passes, init_range, sigma,
            cov, min_weight, scheme, select, folds, randomize_folds, trials, seed, ks, arrangements,
            schemes;
            data, test, features, limit, test_limit, pca, early_stop, blocks, block_dim,
            partition_seed, jobs, out);
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if self.k == 0 {
            bail!("--k must be at least 1");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            bail!("--sigma must be positive");
        }
        if !(self.init_range.0 < self.init_range.1) {
            bail!("--init-range needs LO < HI");
        }
        if self.trials == 0 {
            bail!("--trials must be at least 1");
        }
        if self.blocks == Some(0) || self.block_dim == Some(0) {
            bail!("--blocks and --block-dim must be at least 1");
        }
        if self.jobs == Some(0) {
            bail!("--jobs must be at least 1");
        }
        Ok(())
    }

    pub fn train_config(&self) -> skem::TrainConfig {
        skem::TrainConfig {
            num_components: self.k,
            max_passes: self.passes,
            init_mean_range: self.init_range,
            init_sigma: self.sigma,
            seed: self.seed,
            covariance_mode: self.cov.into(),
            min_weight: self.min_weight,
            early_stop: self.early_stop,
            parallel: true,
        }
    }

    /// Number of blocks for `dim` features.
    pub fn num_blocks(&self, dim: usize) -> Result<usize> {
        match (self.blocks, self.block_dim) {
            (Some(r), Some(m)) if r * m != dim => {
                bail!("--blocks {r} x --block-dim {m} does not match {dim} features")
            }
            (Some(r), _) => Ok(r),
            (None, Some(m)) => {
                if m > dim {
                    bail!("--block-dim {m} exceeds {dim} features");
                }
                Ok(dim / m)
            }
            (None, None) => Ok(1),
        }
    }

    pub fn partition_seed(&self) -> u64 {
        self.partition_seed.unwrap_or(self.seed)
    }

    pub fn require_data(&self) -> Result<&PathBuf> {
        self.data.as_ref().context("missing --data")
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Parses "3-34" or "1,4,7-9" (1-based, inclusive) into 0-based indices.
pub fn parse_columns(spec: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (a, b) = match part.split_once('-') {
            Some((a, b)) => (a.trim().parse::<usize>()?, b.trim().parse::<usize>()?),
            None => {
                let v = part.parse::<usize>()?;
                (v, v)
            }
        };
        if a == 0 || b < a {
            bail!("bad column range {part:?}");
        }
        out.extend(a - 1..b);
    }
    if out.is_empty() {
        bail!("empty column list {spec:?}");
    }
    Ok(out)
}

/// Parses "12x3" as (R blocks, m dims).
pub fn parse_arrangement(s: &str) -> Result<(usize, usize)> {
    let (r, m) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("arrangement {s:?} is not RxM"))?;
    let (r, m) = (r.trim().parse::<usize>()?, m.trim().parse::<usize>()?);
    if r == 0 || m == 0 {
        bail!("arrangement {s:?} has a zero factor");
    }
    Ok((r, m))
}

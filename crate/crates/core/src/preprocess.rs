//! Image and feature preprocessing: deskew, downsampling, range scaling,
//! standardization and PCA.
//!
//! Transforms are fitted on training data only and stored, so test data is
//! mapped with the training statistics.

use nalgebra::{DMatrix, RealField};
use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Row-major grayscale image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GrayImage<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
}

impl<T: Scalar> GrayImage<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        if height * width != pixels.len() {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                found: pixels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| T::lit(b as f64)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.pixels[y * self.width + x]
    }

    /// Value at integer coordinates, zero outside the frame.
    fn get_or_zero(&self, y: isize, x: isize) -> T {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            T::zero()
        } else {
            self.get(y as usize, x as usize)
        }
    }

    /// Bilinear sample with zero padding.
    pub fn sample(&self, y: T, x: T) -> T {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (yi, xi) = (y0.to_isize().unwrap_or(isize::MIN / 2), x0.to_isize().unwrap_or(isize::MIN / 2));
        let one = T::one();
        let top = self.get_or_zero(yi, xi) * (one - fx) + self.get_or_zero(yi, xi + 1) * fx;
        let bottom = self.get_or_zero(yi + 1, xi) * (one - fx) + self.get_or_zero(yi + 1, xi + 1) * fx;
        top * (one - fy) + bottom * fy
    }

    /// Centroid (ȳ, x̄) and central moments (μ₁₁, μ₀₂, μ₂₀) normalized by the
    /// total intensity. x is the column index, y the row index.
    pub fn moments(&self) -> Result<Moments<T>> {
        let total: T = self.pixels.iter().copied().sum();
        if total == T::zero() || !total.is_finite() {
            return Err(Error::ZeroIntensity);
        }
        let (mut sy, mut sx) = (T::zero(), T::zero());
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(y, x);
                sy += T::from_usize_lossy(y) * v;
                sx += T::from_usize_lossy(x) * v;
            }
        }
        let (cy, cx) = (sy / total, sx / total);
        let (mut m11, mut m02, mut m20) = (T::zero(), T::zero(), T::zero());
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(y, x);
                let (dy, dx) = (T::from_usize_lossy(y) - cy, T::from_usize_lossy(x) - cx);
                m11 += dx * dy * v;
                m02 += dy * dy * v;
                m20 += dx * dx * v;
            }
        }
        Ok(Moments {
            centroid_y: cy,
            centroid_x: cx,
            mu11: m11 / total,
            mu02: m02 / total,
            mu20: m20 / total,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments<T> {
    pub centroid_y: T,
    pub centroid_x: T,
    pub mu11: T,
    pub mu02: T,
    pub mu20: T,
}

/// Removes slant with the shear x' = x − (μ₁₁/μ₀₂)(y − ȳ), resampled
/// bilinearly with zero padding. The image is not recentred.
pub fn deskew<T: Scalar>(image: &GrayImage<T>) -> Result<GrayImage<T>> {
    let m = image.moments()?;
    if m.mu02 <= T::zero() {
        return Ok(image.clone());
    }
    let alpha = m.mu11 / m.mu02;
    let mut out = Vec::with_capacity(image.pixels.len());
    for y in 0..image.height {
        let yt = T::from_usize_lossy(y);
        let shift = alpha * (yt - m.centroid_y);
        for x in 0..image.width {
            out.push(image.sample(yt, T::from_usize_lossy(x) + shift));
        }
    }
    GrayImage::new(image.height, image.width, out)
}

/// 2×2 box average. Odd trailing rows or columns are dropped.
pub fn downsample2<T: Scalar>(image: &GrayImage<T>) -> Result<GrayImage<T>> {
    let (h, w) = (image.height / 2, image.width / 2);
    if h == 0 || w == 0 {
        return Err(Error::InvalidConfig(format!(
            "cannot halve a {}x{} image",
            image.height, image.width
        )));
    }
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s = image.get(2 * y, 2 * x)
                + image.get(2 * y, 2 * x + 1)
                + image.get(2 * y + 1, 2 * x)
                + image.get(2 * y + 1, 2 * x + 1);
            out.push(s * quarter);
        }
    }
    GrayImage::new(h, w, out)
}

/// (v − min)/(max − min); a constant image maps to zeros.
pub fn range_scale<T: Scalar>(image: &GrayImage<T>) -> GrayImage<T> {
    let lo = image.pixels.iter().copied().fold(T::infinity(), T::min);
    let hi = image.pixels.iter().copied().fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    let pixels = if span > T::zero() {
        image.pixels.iter().map(|&v| (v - lo) / span).collect()
    } else {
        vec![T::zero(); image.pixels.len()]
    };
    GrayImage {
        height: image.height,
        width: image.width,
        pixels,
    }
}

/// Subtracts the image's own mean and divides by its sample standard
/// deviation; a constant image maps to zeros.
pub fn normalize_image<T: Scalar>(image: &GrayImage<T>) -> GrayImage<T> {
    let n = image.pixels.len();
    let mean = image.pixels.iter().copied().sum::<T>() / T::from_usize_lossy(n.max(1));
    let ss: T = image.pixels.iter().map(|&v| (v - mean) * (v - mean)).sum();
    let sd = (ss / T::from_usize_lossy(n.saturating_sub(1).max(1))).sqrt();
    let pixels = if sd > T::zero() {
        image.pixels.iter().map(|&v| (v - mean) / sd).collect()
    } else {
        vec![T::zero(); n]
    };
    GrayImage {
        height: image.height,
        width: image.width,
        pixels,
    }
}

/// Per-image steps applied before any fitted transform, in field order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageSteps {
    pub deskew: bool,
    pub downsample: bool,
    pub range_scale: bool,
    /// Per-image zero mean, unit standard deviation.
    pub normalize: bool,
}

impl ImageSteps {
    pub fn apply<T: Scalar>(&self, image: &GrayImage<T>) -> Result<GrayImage<T>> {
        let mut img = if self.deskew {
            deskew(image)?
        } else {
            image.clone()
        };
        if self.downsample {
            img = downsample2(&img)?;
        }
        if self.range_scale {
            img = range_scale(&img);
        }
        if self.normalize {
            img = normalize_image(&img);
        }
        Ok(img)
    }

    /// Applies the steps to every image and stacks the results as rows.
    pub fn apply_all<T: Scalar>(&self, images: &[GrayImage<T>]) -> Result<Matrix<T>> {
        let rows = images
            .par_iter()
            .map(|img| self.apply(img).map(GrayImage::into_pixels))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Matrix::from_rows(&rows)
    }
}

/// Per-feature mean and standard deviation (N − 1 denominator).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StandardizeTransform<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> StandardizeTransform<T> {
    /// Zero-variance features get std 1.
    pub fn fit(x: &Matrix<T>) -> Result<Self> {
        let (n, m) = (x.rows(), x.cols());
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let nt = T::from_usize_lossy(n);
        let mut mean = vec![T::zero(); m];
        for row in x.row_iter() {
            for (a, &v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= nt);
        let mut ss = vec![T::zero(); m];
        for row in x.row_iter() {
            for ((s, &v), &mu) in ss.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let denom = T::from_usize_lossy(n.saturating_sub(1).max(1));
        let std = ss
            .into_iter()
            .map(|s| {
                let sd = (s / denom).sqrt();
                if sd > T::zero() && sd.is_finite() {
                    sd
                } else {
                    T::one()
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_cols(x, self.dim())?;
        let mut out = x.clone();
        let m = self.dim().max(1);
        out.as_mut_slice().par_chunks_mut(m).for_each(|row| {
            for ((v, &mu), &sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        });
        Ok(out)
    }
}

fn check_cols<T: Scalar>(x: &Matrix<T>, expected: usize) -> Result<()> {
    if x.cols() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: x.cols(),
        });
    }
    Ok(())
}

/// Projection onto the leading principal directions of the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PcaTransform<T> {
    pub mean: Vec<T>,
    /// M_raw × r, orthonormal columns in descending singular-value order.
    pub components: Matrix<T>,
    /// Singular values of the centred training matrix for the kept directions.
    pub singular_values: Vec<T>,
    pub num_samples: usize,
}

impl<T: Scalar + RealField> PcaTransform<T> {
    /// Thin SVD of the centred training matrix. Each direction is signed so
    /// its largest-magnitude entry is positive.
    pub fn fit(x: &Matrix<T>, rank: usize) -> Result<Self> {
        let (n, m) = (x.rows(), x.cols());
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let max = n.min(m);
        if rank == 0 || rank > max {
            return Err(Error::PcaRank {
                requested: rank,
                max,
            });
        }
        let nt = T::from_usize_lossy(n);
        let mut mean = vec![T::zero(); m];
        for row in x.row_iter() {
            for (a, &v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= nt);
        let centred = DMatrix::from_fn(n, m, |i, j| x.get(i, j) - mean[j]);
        let svd = centred.svd(false, true);
        let v_t = svd.v_t.expect("right singular vectors requested");
        let sv = svd.singular_values;

        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap_or(std::cmp::Ordering::Equal));
        let mut components = Matrix::zeros(m, rank);
        let mut singular_values = Vec::with_capacity(rank);
        for (c, &idx) in order.iter().take(rank).enumerate() {
            let dir: Vec<T> = (0..m).map(|j| v_t[(idx, j)]).collect();
            let pivot = dir
                .iter()
                .copied()
                .fold(T::zero(), |best, v| {
                    if Float::abs(v) > Float::abs(best) {
                        v
                    } else {
                        best
                    }
                });
            let sign = if pivot < T::zero() { -T::one() } else { T::one() };
            for (j, &v) in dir.iter().enumerate() {
                components.set(j, c, sign * v);
            }
            singular_values.push(sv[idx]);
        }
        Ok(Self {
            mean,
            components,
            singular_values,
            num_samples: n,
        })
    }
}

impl<T: Scalar> PcaTransform<T> {
    pub fn input_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn rank(&self) -> usize {
        self.components.cols()
    }

    /// Variance along each kept direction, s²/(N − 1).
    pub fn explained_variance(&self) -> Vec<T> {
        let denom = T::from_usize_lossy(self.num_samples.saturating_sub(1).max(1));
        self.singular_values.iter().map(|&s| s * s / denom).collect()
    }

    /// (x − mean) V for every row.
    pub fn project(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_cols(x, self.input_dim())?;
        let (m, r) = (self.input_dim(), self.rank());
        let mut out = Matrix::zeros(x.rows(), r);
        let comps = self.components.as_slice();
        out.as_mut_slice()
            .par_chunks_mut(r)
            .zip(x.as_slice().par_chunks(m.max(1)))
            .for_each(|(dst, src)| {
                for (j, (&v, &mu)) in src.iter().zip(&self.mean).enumerate() {
                    let d = v - mu;
                    for (o, &c) in dst.iter_mut().zip(&comps[j * r..(j + 1) * r]) {
                        *o += d * c;
                    }
                }
            });
        Ok(out)
    }

    /// Maps projected features back to the input space.
    pub fn reconstruct(&self, z: &Matrix<T>) -> Result<Matrix<T>> {
        check_cols(z, self.rank())?;
        let (m, r) = (self.input_dim(), self.rank());
        let mut out = Matrix::zeros(z.rows(), m);
        for i in 0..z.rows() {
            for j in 0..m {
                let mut s = self.mean[j];
                for c in 0..r {
                    s += z.get(i, c) * self.components.get(j, c);
                }
                out.set(i, j, s);
            }
        }
        Ok(out)
    }
}

/// Fitted feature pipeline: optional per-image steps, then standardization,
/// then PCA.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FeaturePipeline<T> {
    /// Input columns kept, in order (0-based); applied before any transform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageSteps>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardize: Option<StandardizeTransform<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca: Option<PcaTransform<T>>,
}

impl<T: Scalar + RealField> FeaturePipeline<T> {
    /// Fits standardization and/or PCA on already image-processed training rows.
    pub fn fit(
        x: &Matrix<T>,
        image: Option<ImageSteps>,
        standardize: bool,
        pca_rank: Option<usize>,
    ) -> Result<Self> {
        let standardize = if standardize {
            Some(StandardizeTransform::fit(x)?)
        } else {
            None
        };
        let pca = match pca_rank {
            Some(r) => {
                let z = match &standardize {
                    Some(s) => s.apply(x)?,
                    None => x.clone(),
                };
                Some(PcaTransform::fit(&z, r)?)
            }
            None => None,
        };
        Ok(Self {
            columns: None,
            image,
            standardize,
            pca,
        })
    }
}

impl<T: Scalar> FeaturePipeline<T> {
    pub fn is_identity(&self) -> bool {
        self.columns.is_none() && self.image.is_none() && self.standardize.is_none() && self.pca.is_none()
    }

    /// Column selection, then the fitted transforms (not the image steps).
    pub fn transform(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let selected;
        let x = match &self.columns {
            Some(cols) => {
                if let Some(&bad) = cols.iter().find(|&&c| c >= x.cols()) {
                    return Err(Error::DimensionMismatch {
                        expected: bad + 1,
                        found: x.cols(),
                    });
                }
                selected = x.select_columns(cols);
                &selected
            }
            None => x,
        };
        let mut z = match &self.standardize {
            Some(s) => s.apply(x)?,
            None => x.clone(),
        };
        if let Some(p) = &self.pca {
            z = p.project(&z)?;
        }
        Ok(z)
    }

    /// Image steps followed by [`FeaturePipeline::transform`].
    pub fn transform_images(&self, images: &[GrayImage<T>]) -> Result<Matrix<T>> {
        let raw = self.image.unwrap_or_default().apply_all(images)?;
        self.transform(&raw)
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        let selected = self.columns.as_ref().map_or(input_dim, Vec::len);
        self.pca.as_ref().map_or(selected, PcaTransform::rank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(h: usize, w: usize, shear: f64) -> GrayImage<f64> {
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx - shear * dy;
                px.push((-(dx * dx) / 4.0 - (dy * dy) / 18.0).exp());
            }
        }
        GrayImage::new(h, w, px).unwrap()
    }

    #[test]
    fn symmetric_blob_unchanged() {
        let img = blob(21, 21, 0.0);
        assert!(img.moments().unwrap().mu11.abs() < 1e-12);
        let out = deskew(&img).unwrap();
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_image_unchanged() {
        let img = GrayImage::new(5, 7, vec![3.0; 35]).unwrap();
        assert_eq!(deskew(&img).unwrap(), img);
    }

    #[test]
    fn zero_image_rejected() {
        let img = GrayImage::new(3, 3, vec![0.0; 9]).unwrap();
        assert!(matches!(deskew(&img), Err(Error::ZeroIntensity)));
    }

    #[test]
    fn shear_is_removed() {
        let img = blob(28, 28, 0.4);
        let before = img.moments().unwrap().mu11.abs();
        let once = deskew(&img).unwrap();
        let after = once.moments().unwrap().mu11.abs();
        assert!(after * 10.0 <= before, "{before} -> {after}");
        let twice = deskew(&once).unwrap();
        let first: f64 = img.pixels().iter().zip(once.pixels()).map(|(a, b)| (a - b).abs()).sum();
        let second: f64 = once.pixels().iter().zip(twice.pixels()).map(|(a, b)| (a - b).abs()).sum();
        assert!(second < 0.1 * first, "{first} then {second}");
    }

    #[test]
    fn range_scaling() {
        let img = GrayImage::new(1, 3, vec![0.0, 127.5, 255.0]).unwrap();
        assert_eq!(range_scale(&img).pixels(), &[0.0, 0.5, 1.0]);
        let flat = GrayImage::new(2, 2, vec![9.0; 4]).unwrap();
        assert_eq!(range_scale(&flat).pixels(), &[0.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rnd = GrayImage::new(4, 4, (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let s = range_scale(&rnd);
        let lo = s.pixels().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.pixels().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn per_image_normalization() {
        let img = GrayImage::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = normalize_image(&img);
        let sd = (5.0f64 / 3.0).sqrt();
        for (a, b) in z.pixels().iter().zip([-1.5, -0.5, 0.5, 1.5]) {
            assert!((a - b / sd).abs() < 1e-15);
        }
        let flat = GrayImage::new(2, 2, vec![0.3; 4]).unwrap();
        assert_eq!(normalize_image(&flat).pixels(), &[0.0; 4]);
    }

    #[test]
    fn box_downsample() {
        let img = GrayImage::new(2, 4, vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 4.0, 8.0]).unwrap();
        let d = downsample2(&img).unwrap();
        assert_eq!((d.height(), d.width()), (1, 2));
        assert_eq!(d.pixels(), &[4.0, 3.0]);
    }

    #[test]
    fn constant_column_standardizes_to_zero() {
        let x = Matrix::from_rows(&[[1.0, 5.0], [3.0, 5.0], [8.0, 5.0]]).unwrap();
        let t = StandardizeTransform::fit(&x).unwrap();
        assert_eq!(t.std[1], 1.0);
        let z = t.apply(&x).unwrap();
        assert!((0..3).all(|i| z.get(i, 1) == 0.0));
    }

    #[test]
    fn pca_on_a_line() {
        let dir = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        let ts = [-2.0, -0.5, 0.0, 1.0, 1.5];
        let rows: Vec<Vec<f64>> = ts
            .iter()
            .map(|t| dir.iter().map(|d| 1.0 + t * d).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let p = PcaTransform::fit(&x, 1).unwrap();
        let z = p.project(&x).unwrap();
        let tbar = ts.iter().sum::<f64>() / 5.0;
        for (i, t) in ts.iter().enumerate() {
            assert!((z.get(i, 0) - (t - tbar)).abs() < 1e-10);
        }
        let back = p.reconstruct(&z).unwrap();
        for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn pca_rank_checked() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert!(matches!(PcaTransform::fit(&x, 3), Err(Error::PcaRank { .. })));
    }

    #[test]
    fn pipeline_roundtrips_through_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| rng.gen()).collect()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let p = FeaturePipeline::fit(&x, None, true, Some(3)).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let q: FeaturePipeline<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.transform(&x).unwrap(), q.transform(&x).unwrap());
    }
}

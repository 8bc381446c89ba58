//! Image quality metrics: MSE, PSNR, SSIM and the Fréchet distance between
//! Gaussian fits of feature sets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::container::{Container, TensorData};
use crate::error::{Error, Result};
use crate::imgcore::{resize, to_gray, RasterImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Negative eigenvalues above this floor are rounding noise and clamped to 0.
const EIGEN_FAIL: f64 = -1e-6;

fn check_same_shape(a: &RasterImage, b: &RasterImage) -> Result<()> {
    if (a.width(), a.height(), a.channels()) != (b.width(), b.height(), b.channels()) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// Mean squared difference over every stored value.
pub fn mse(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(1 / mse)` for images in `[0, 1]`; `+∞` when `mse = 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn gray_plane(img: &RasterImage) -> Result<Vec<f64>> {
    Ok(if img.channels() == 1 {
        img.data().to_vec()
    } else {
        to_gray(img)?.into_data()
    })
}

/// Mean structural similarity over every fully contained 11×11 Gaussian window
/// of the grayscale images, with dynamic range 1.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_same_shape(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let (pa, pb) = (gray_plane(a)?, gray_plane(b)?);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, ty) in taps.iter().enumerate() {
                let row = (oy + dy) * w + ox;
                for (dx, tx) in taps.iter().enumerate() {
                    let wgt = ty * tx;
                    let (x, y) = (pa[row + dx], pb[row + dx]);
                    ma += wgt * x;
                    mb += wgt * y;
                    saa += wgt * x * x;
                    sbb += wgt * y * y;
                    sab += wgt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

/// Sample mean and unbiased covariance of feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

/// Statistics of an `n×d` feature matrix; needs `n ≥ 2`.
pub fn feature_stats(features: &DMatrix<f64>) -> Result<FeatureStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::DataEmpty(format!(
            "covariance needs at least 2 feature rows, got {n}"
        )));
    }
    let mean = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(FeatureStats { mean, cov, n })
}

fn clamped_eigenvalues(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter_mut() {
        if *v < EIGEN_FAIL {
            return Err(Error::NumericalFailure(format!(
                "{what} has eigenvalue {v:e}, not positive semidefinite"
            )));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = clamped_eigenvalues(m, what)?;
    let roots = eig.eigenvalues.map(f64::sqrt);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μ1 - μ2‖² + Tr(Σ1 + Σ2 - 2(Σ1Σ2)^{1/2})`, floored at 0.
///
/// `Tr (Σ1Σ2)^{1/2}` is evaluated as `Tr (Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2}`, whose
/// argument is symmetric positive semidefinite.
pub fn fid(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    let d = s1.mean.len();
    if s2.mean.len() != d {
        return Err(Error::DimensionMismatch(d, s2.mean.len()));
    }
    let diff = &s1.mean - &s2.mean;
    let root1 = psd_sqrt(&s1.cov, "first covariance")?;
    let inner = &root1 * &s2.cov * &root1;
    let cross: f64 = clamped_eigenvalues(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let value = diff.norm_squared() + s1.cov.trace() + s2.cov.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Source of per-image feature vectors for FID.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Extractor {
    /// 16×16 grayscale thumbnail, flattened (d = 256).
    FlattenGray16,
    /// Precomputed `n×d` tensor named `features` in a container file.
    File(PathBuf),
}

impl FromStr for Extractor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "flatten-gray-16" {
            Ok(Extractor::FlattenGray16)
        } else if let Some(path) = s.strip_prefix("file:") {
            Ok(Extractor::File(PathBuf::from(path)))
        } else {
            Err(Error::InvalidConfig(format!(
                "extractor '{s}' (expected flatten-gray-16 or file:<path>)"
            )))
        }
    }
}

impl fmt::Display for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extractor::FlattenGray16 => f.write_str("flatten-gray-16"),
            Extractor::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

pub const FEATURES_TENSOR: &str = "features";
const THUMB: usize = 16;

/// One feature row per image.
pub fn extract_features(images: &[RasterImage], extractor: &Extractor) -> Result<DMatrix<f64>> {
    match extractor {
        Extractor::FlattenGray16 => {
            let rows = images
                .iter()
                .map(|img| Ok(gray_plane(&resize(img, THUMB, THUMB)?)?))
                .collect::<Result<Vec<_>>>()?;
            Ok(DMatrix::from_fn(rows.len(), THUMB * THUMB, |i, j| rows[i][j]))
        }
        Extractor::File(path) => {
            let m = read_features(path)?;
            if m.nrows() != images.len() {
                return Err(Error::DimensionMismatch(images.len(), m.nrows()));
            }
            Ok(m)
        }
    }
}

pub fn write_features(path: &Path, features: &DMatrix<f64>) -> Result<()> {
    let mut c = Container::new();
    let (n, d) = features.shape();
    let row_major = (0..n).flat_map(|i| (0..d).map(move |j| features[(i, j)])).collect();
    c.push(FEATURES_TENSOR, vec![n, d], TensorData::F64(row_major))?;
    c.save(path)
}

pub fn read_features(path: &Path) -> Result<DMatrix<f64>> {
    let t = Container::load(path)?.tensor::<f64>(FEATURES_TENSOR)?;
    let &[n, d] = t.shape() else {
        return Err(Error::MalformedContainer(format!(
            "features tensor must be 2-D, got {:?}",
            t.shape()
        )));
    };
    Ok(DMatrix::from_row_slice(n, d, t.data()))
}

/// One evaluated translation task.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub task: String,
    pub n: usize,
    /// Mean over image pairs.
    pub mse: f64,
    /// PSNR of the mean MSE.
    pub psnr: f64,
    /// Mean over image pairs.
    pub ssim: f64,
    /// Between the generated set and the reference set.
    pub fid: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "task,n,mse,psnr,ssim,fid";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.task, self.n, self.mse, self.psnr, self.ssim, self.fid
        )
    }
}

/// Scores `generated[i]` against `reference[i]` for every `i`.
pub fn evaluate(task: &str, generated: &[RasterImage], reference: &[RasterImage], extractor: &Extractor) -> Result<MetricReport> {
    if generated.len() != reference.len() {
        return Err(Error::DimensionMismatch(generated.len(), reference.len()));
    }
    if generated.is_empty() {
        return Err(Error::DataEmpty(format!("no images to evaluate for task '{task}'")));
    }
    let n = generated.len();
    let mut mse_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (g, r) in generated.iter().zip(reference) {
        mse_sum += mse(g, r)?;
        ssim_sum += ssim(g, r)?;
    }
    let mean_mse = mse_sum / n as f64;
    let (fg, fr) = match extractor {
        Extractor::File(_) => {
            return Err(Error::InvalidConfig(
                "file features need separate generated and reference files".into(),
            ))
        }
        _ => (extract_features(generated, extractor)?, extract_features(reference, extractor)?),
    };
    Ok(MetricReport {
        task: task.to_string(),
        n,
        mse: mean_mse,
        psnr: psnr_from_mse(mean_mse),
        ssim: ssim_sum / n as f64,
        fid: fid(&feature_stats(&fg)?, &feature_stats(&fr)?)?,
    })
}

//! Evaluation metrics. Everything here is a pure function of its inputs.

pub mod report;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::geometry::Mask;
use crate::graph::{ConvGeom, Graph};
use crate::tensor::Tensor;

fn check_maps(a: &LabelMap, b: &LabelMap, mask: &Mask) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) || (a.height(), a.width()) != (mask.height(), mask.width()) {
        return Err(Error::shape(format!(
            "maps {}x{} / {}x{} with mask {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Intersection over union of `target` inside the mask; 1 when neither map
/// has the target there.
pub fn tiou(predicted: &LabelMap, truth: &LabelMap, mask: &Mask, target: u8) -> Result<f64> {
    check_maps(predicted, truth, mask)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for ((&p, &t), &m) in predicted.data().iter().zip(truth.data()).zip(mask.data()) {
        if m {
            let (a, b) = (p == target, t == target);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of mask pixels whose label matches the truth.
pub fn hamm(predicted: &LabelMap, truth: &LabelMap, mask: &Mask) -> Result<f64> {
    check_maps(predicted, truth, mask)?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let same = predicted
        .data()
        .iter()
        .zip(truth.data())
        .zip(mask.data())
        .filter(|((p, t), &m)| m && p == t)
        .count();
    Ok(same as f64 / n as f64)
}

/// Mean absolute difference over all pixels and channels.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "l1")?;
    if a.is_empty() {
        return Err(Error::Empty("image"));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

pub const SSIM_WINDOW: usize = 8;
/// Luma weights (ITU-R BT.601) used to reduce 3-channel images to grayscale.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Single-channel luma of a 1- or 3-channel image.
pub fn luma(image: &Tensor) -> Result<Tensor> {
    match image.channels() {
        1 => Ok(image.clone()),
        3 => Ok(Tensor::from_fn(1, image.height(), image.width(), |_, r, c| {
            (0..3).map(|k| LUMA[k] * image.at(k, r, c)).sum()
        })),
        n => Err(Error::shape(format!("ssim needs 1 or 3 channels, got {n}"))),
    }
}

/// Structural similarity with a uniform 8×8 window (stride 1), population
/// statistics and constants `C1 = (0.01·L)²`, `C2 = (0.03·L)²`, where `L` is
/// the dynamic range of the inputs (2 for images in `[-1, 1]`). Color inputs
/// are reduced to luma first. The result is the mean over windows.
pub fn ssim_with_range(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let (x, y) = (luma(a)?, luma(b)?);
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for top in 0..=h - SSIM_WINDOW {
        for left in 0..=w - SSIM_WINDOW {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in top..top + SSIM_WINDOW {
                for c in left..left + SSIM_WINDOW {
                    let (u, v) = (x.at(0, r, c), y.at(0, r, c));
                    sx += u;
                    sy += v;
                    sxx += u * u;
                    syy += v * v;
                    sxy += u * v;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// [`ssim_with_range`] for images in `[-1, 1]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with_range(a, b, 2.0)
}

/// Maps an image to a fixed-length feature vector for FID.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, image: &Tensor) -> Result<Vec<f64>>;
}

/// Fixed-seed random convolutional embedding: two stride-2 3×3 conv + ReLU
/// layers followed by global average pooling.
#[derive(Debug, Clone)]
pub struct RandomConvEmbedding {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl RandomConvEmbedding {
    pub const SEED: u64 = 0xf1d0;

    pub fn new(in_channels: usize, dim: usize, seed: u64) -> Self {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = 2 * dim;
        let n1 = Normal::new(0.0, (2.0 / (in_channels * 9) as f64).sqrt()).expect("std");
        let n2 = Normal::new(0.0, (2.0 / (hidden * 9) as f64).sqrt()).expect("std");
        Self {
            w1: Tensor::from_fn(hidden, 1, in_channels * 9, |_, _, _| n1.sample(&mut rng)),
            b1: Tensor::from_fn(hidden, 1, 1, |_, _, _| n1.sample(&mut rng) * 0.1),
            w2: Tensor::from_fn(dim, 1, hidden * 9, |_, _, _| n2.sample(&mut rng)),
            b2: Tensor::from_fn(dim, 1, 1, |_, _, _| n2.sample(&mut rng) * 0.1),
        }
    }
}

impl Default for RandomConvEmbedding {
    fn default() -> Self {
        Self::new(3, 8, Self::SEED)
    }
}

impl Embedder for RandomConvEmbedding {
    fn dim(&self) -> usize {
        self.w2.channels()
    }

    fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        let cin = self.w1.width() / 9;
        if image.channels() != cin {
            return Err(Error::shape(format!("embedding expects {cin} channels, got {}", image.channels())));
        }
        let geom = ConvGeom {
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let (w1, b1, w2, b2) = (
            g.constant(self.w1.clone()),
            g.constant(self.b1.clone()),
            g.constant(self.w2.clone()),
            g.constant(self.b2.clone()),
        );
        let y = g.conv2d(x, w1, b1, geom);
        let y = g.relu(y);
        let y = g.conv2d(y, w2, b2, geom);
        let y = g.relu(y);
        let v = g.value(y);
        Ok((0..v.channels()).map(|c| v.plane(c).iter().sum::<f64>() / v.plane_len() as f64).collect())
    }
}

fn gaussian_fit(features: &[Vec<f64>], shrinkage: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    let d = features.first().map(Vec::len).ok_or(Error::Empty("feature set"))?;
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::shape("feature vectors of different lengths".to_string()));
    }
    if shrinkage == 0.0 && n < d + 1 {
        return Err(Error::DegenerateCovariance { samples: n, dim: d });
    }
    if n < 2 {
        return Err(Error::DegenerateCovariance { samples: n, dim: d });
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        let m = mu[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += shrinkage;
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `‖μa − μb‖² + tr(Σa + Σb − 2(ΣaΣb)^{1/2})`.
///
/// The trace of the product root is taken as `Σ √λ` over the eigenvalues of
/// the symmetric matrix `Σa^{1/2} Σb Σa^{1/2}`, which has the same spectrum
/// as `ΣaΣb`. Eigenvalues above −1e−6 are clipped to 0; anything more
/// negative indicates a broken covariance and is reported as degenerate.
/// `shrinkage` is added to both covariance diagonals.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>], shrinkage: f64) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_fit(a, shrinkage)?;
    let (mu_b, cov_b) = gaussian_fit(b, shrinkage)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::shape("feature sets of different dimension".to_string()));
    }
    let root_a = sym_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner).eigenvalues;
    if eig.iter().any(|&v| v < -1e-6) {
        return Err(Error::DegenerateCovariance {
            samples: a.len().min(b.len()),
            dim: mu_a.len(),
        });
    }
    let tr_root: f64 = eig.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let diff = &mu_a - &mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_root;
    Ok(value.max(0.0))
}

/// FID between two image sets under `embed`.
pub fn fid(set_a: &[Tensor], set_b: &[Tensor], embed: &dyn Embedder, shrinkage: f64) -> Result<f64> {
    let fa = set_a.iter().map(|t| embed.embed(t)).collect::<Result<Vec<_>>>()?;
    let fb = set_b.iter().map(|t| embed.embed(t)).collect::<Result<Vec<_>>>()?;
    frechet_distance(&fa, &fb, shrinkage)
}

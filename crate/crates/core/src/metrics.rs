//! Image-set and image-pair quality metrics: FID, KID, PSNR, SSIM.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backends::{Backend, BackendRole};
use crate::data::{load_domain_folder, load_image, normalize, Domain, Split};
use crate::error::{Error, Result};
use crate::par;

/// Gaussian statistics of pooled feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub n_samples: usize,
}

impl ActivationStats {
    /// Sample mean and unbiased covariance of the rows of `features`.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "activation statistics need at least 2 samples, got {n}"
            )));
        }
        let d = features[0].len();
        if let Some(bad) = features.iter().find(|f| f.len() != d) {
            return Err(Error::ShapeMismatch(format!(
                "feature vectors of length {d} and {}",
                bad.len()
            )));
        }
        let m = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let mut covariance = centered.transpose() * &centered / (n - 1) as f64;
        // Exact symmetry regardless of summation order.
        covariance = (&covariance + covariance.transpose()) * 0.5;
        Ok(Self {
            mean,
            covariance,
            n_samples: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// One globally averaged feature vector per image, in input order.
pub fn feature_vectors(images: &[crate::Tensor], backend: &Backend) -> Result<Vec<Vec<f64>>> {
    if backend.kind().role() != BackendRole::Feature {
        return Err(Error::WrongBackend {
            expected: "feature",
            actual: backend.kind().to_string(),
        });
    }
    let pooled = |img: &crate::Tensor| -> Result<Vec<f64>> {
        let x = if img.shape().len() == 3 {
            img.clone().reshape([vec![1], img.shape().to_vec()].concat())
        } else {
            img.clone()
        };
        let f = backend.extract_features(&x)?.data;
        let (n, c, h, w) = f.dims4();
        if n != 1 {
            return Err(Error::InvalidInput("feature_vectors takes single images".into()));
        }
        Ok(f.data().chunks(h * w).take(c).map(|p| p.iter().sum::<f64>() / p.len() as f64).collect())
    };
    par::map_range(images.len(), |i| pooled(&images[i]))
        .into_iter()
        .collect()
}

pub fn compute_activation_stats(images: &[crate::Tensor], backend: &Backend) -> Result<ActivationStats> {
    if images.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "activation statistics need at least 2 images, got {}",
            images.len()
        )));
    }
    ActivationStats::from_features(&feature_vectors(images, backend)?)
}

/// Eigen-decomposition of a symmetric PSD matrix with tiny negative
/// eigenvalues (within `1e-6·trace`) clamped to zero.
fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let tol = 1e-6 * sym.trace().abs().max(f64::MIN_POSITIVE);
    let mut eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min < -tol {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    eig.eigenvalues.apply(|v| *v = v.max(0.0));
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m)?;
    let root = eig.eigenvalues.map(f64::sqrt);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `‖μa−μb‖² + tr(Σa) + tr(Σb) − 2·tr((Σa Σb)^½)`.
///
/// The trace term is taken as `tr((√Σa Σb √Σa)^½)`, which has the same
/// eigenvalues as `Σa Σb` but is symmetric, so no complex parts arise.
pub fn frechet_distance(a: &ActivationStats, b: &ActivationStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "activation statistics of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let root_a = psd_sqrt(&a.covariance)?;
    let inner = &root_a * &b.covariance * &root_a;
    let cross: f64 = psd_eigen(&inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    Ok(diff + a.covariance.trace() + b.covariance.trace() - 2.0 * cross)
}

fn poly_kernel(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / u.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² between two sets with the cubic polynomial kernel.
///
/// The three weighted sums have weights adding to zero, so every kernel
/// value is taken relative to `k(a₀, b₀)`: equal sets of one repeated
/// vector then give exactly 0 and cancellation error shrinks.
pub fn mmd2_unbiased(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let (m, n) = (a.len() as f64, b.len() as f64);
    let base = poly_kernel(a[0], b[0]);
    let k = |u: &[f64], v: &[f64]| poly_kernel(u, v) - base;
    let within = |s: &[&[f64]]| -> f64 {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += k(s[i], s[j]);
                }
            }
        }
        t
    };
    let mut cross = 0.0;
    for u in a {
        for v in b {
            cross += k(u, v);
        }
    }
    within(a) / (m * (m - 1.0)) + within(b) / (n * (n - 1.0)) - 2.0 * cross / (m * n)
}

pub const KID_SUBSET_SIZE: usize = 1000;
pub const KID_SUBSETS: usize = 100;
const KID_SEED: u64 = 0;

/// Kernel inception distance. Sets larger than the subset size are
/// block-averaged over seeded random subsets.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "KID needs at least 2 vectors per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch("KID feature vectors differ in length".into()));
    }
    let ra: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
    let rb: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
    if a.len() <= KID_SUBSET_SIZE && b.len() <= KID_SUBSET_SIZE {
        return Ok(mmd2_unbiased(&ra, &rb));
    }
    let m = KID_SUBSET_SIZE.min(a.len()).min(b.len());
    let mut rng = ChaCha8Rng::seed_from_u64(KID_SEED);
    let subsets: Vec<(Vec<usize>, Vec<usize>)> = (0..KID_SUBSETS)
        .map(|_| {
            (
                sample(&mut rng, a.len(), m).into_vec(),
                sample(&mut rng, b.len(), m).into_vec(),
            )
        })
        .collect();
    let vals = par::map_range(subsets.len(), |s| {
        let (ia, ib) = &subsets[s];
        let sa: Vec<&[f64]> = ia.iter().map(|&i| ra[i]).collect();
        let sb: Vec<&[f64]> = ib.iter().map(|&i| rb[i]).collect();
        mmd2_unbiased(&sa, &sb)
    });
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() == b.dimensions() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "images of size {:?} and {:?}",
            a.dimensions(),
            b.dimensions()
        )))
    }
}

/// Peak signal-to-noise ratio in dB for 8-bit images; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.as_raw().len() as f64;
    let mse = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// ITU-R 601 luma as f64, row-major.
pub fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM of two luma planes of size `w×h`.
pub fn ssim_planes(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {w}×{h}"
        )));
    }
    let k = gaussian_window();
    let f = |x: &[f64]| filter_valid(x, w, h, &k);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (mu_a, mu_b) = (f(a), f(b));
    let (e_aa, e_bb, e_ab) = (f(&prod(a, a)), f(&prod(b, b)), f(&prod(a, b)));
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Mean structural similarity on luma, Gaussian 11×11 window (σ 1.5).
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = a.dimensions();
    ssim_planes(&luma(a), &luma(b), w as usize, h as usize)
}

/// How generated images are matched for PSNR and SSIM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pairing {
    /// Against the reference image with the same file name.
    Paired,
    /// Against the source image with the same file name, resized to the
    /// generated image's size.
    Unpaired { sources: PathBuf },
}

impl Pairing {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Paired => "paired",
            Self::Unpaired { .. } => "unpaired",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub fid: f64,
    pub kid: f64,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    /// Image pairs behind the PSNR and SSIM means.
    pub n_pairs: usize,
    pub pairing: String,
    /// FID and KID are only comparable under the same backend.
    pub backend_id: String,
}

impl MetricReport {
    const KEYS: [&'static str; 9] = [
        "fid",
        "kid",
        "psnr_mean",
        "ssim_mean",
        "n_generated",
        "n_reference",
        "n_pairs",
        "pairing",
        "backend_id",
    ];

    /// `key=value` lines; floats use the shortest exact representation and
    /// infinity is written `inf`.
    pub fn to_text(&self) -> String {
        let vals = [
            self.fid.to_string(),
            self.kid.to_string(),
            self.psnr_mean.to_string(),
            self.ssim_mean.to_string(),
            self.n_generated.to_string(),
            self.n_reference.to_string(),
            self.n_pairs.to_string(),
            self.pairing.clone(),
            self.backend_id.clone(),
        ];
        Self::KEYS
            .iter()
            .zip(vals)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Aligned two-column table for terminals.
    pub fn to_table(&self) -> String {
        self.to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| format!("{k:<12} {v}\n"))
            .collect()
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

impl FromStr for MetricReport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::InvalidInput(format!("malformed report line `{l}`")))
            })
            .collect::<Result<_>>()?;
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("report is missing `{k}`")))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidInput(format!("report value `{k}` is not a number")))
        };
        let count = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidInput(format!("report value `{k}` is not a count")))
        };
        Ok(Self {
            fid: real("fid")?,
            kid: real("kid")?,
            psnr_mean: real("psnr_mean")?,
            ssim_mean: real("ssim_mean")?,
            n_generated: count("n_generated")?,
            n_reference: count("n_reference")?,
            n_pairs: count("n_pairs")?,
            pairing: get("pairing")?.to_string(),
            backend_id: get("backend_id")?.to_string(),
        })
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Computes every metric between two folders of images.
pub fn evaluate_folder(
    generated_dir: &Path,
    reference_dir: &Path,
    backend: &Backend,
    pairing: &Pairing,
) -> Result<MetricReport> {
    let gen = load_domain_folder(generated_dir, Domain::Y, Split::Test)?;
    let refs = load_domain_folder(reference_dir, Domain::Y, Split::Test)?;
    let load_all = |paths: &[PathBuf]| -> Result<Vec<RgbImage>> {
        par::map_range(paths.len(), |i| load_image(&paths[i]))
            .into_iter()
            .collect()
    };
    let gen_imgs = load_all(&gen.image_paths)?;
    let ref_imgs = load_all(&refs.image_paths)?;
    let to_tensors = |imgs: &[RgbImage]| imgs.iter().map(normalize).collect::<Vec<_>>();
    let fa = feature_vectors(&to_tensors(&gen_imgs), backend)?;
    let fb = feature_vectors(&to_tensors(&ref_imgs), backend)?;
    let fid = frechet_distance(
        &ActivationStats::from_features(&fa)?,
        &ActivationStats::from_features(&fb)?,
    )?;
    let kid = kid(&fa, &fb)?;

    let partners: BTreeMap<String, PathBuf> = match pairing {
        Pairing::Paired => refs
            .image_paths
            .iter()
            .map(|p| (file_name(p), p.clone()))
            .collect(),
        Pairing::Unpaired { sources } => load_domain_folder(sources, Domain::X, Split::Test)?
            .image_paths
            .iter()
            .map(|p| (file_name(p), p.clone()))
            .collect(),
    };
    let pairs: Vec<(usize, PathBuf)> = gen
        .image_paths
        .iter()
        .enumerate()
        .filter_map(|(i, p)| partners.get(&file_name(p)).map(|q| (i, q.clone())))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no generated file name in {} has a {} counterpart",
            generated_dir.display(),
            pairing.name()
        )));
    }
    let scores = par::map_range(pairs.len(), |k| -> Result<(f64, f64)> {
        let (i, q) = &pairs[k];
        let g = &gen_imgs[*i];
        let mut other = load_image(q)?;
        if matches!(pairing, Pairing::Unpaired { .. }) && other.dimensions() != g.dimensions() {
            other = image::imageops::resize(&other, g.width(), g.height(), FilterType::Triangle);
        }
        Ok((psnr(g, &other)?, ssim(g, &other)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    Ok(MetricReport {
        fid,
        kid,
        psnr_mean: scores.iter().map(|s| s.0).sum::<f64>() / n,
        ssim_mean: scores.iter().map(|s| s.1).sum::<f64>() / n,
        n_generated: gen.len(),
        n_reference: refs.len(),
        n_pairs: scores.len(),
        pairing: pairing.name().into(),
        backend_id: backend.id(),
    })
}

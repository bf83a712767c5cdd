//! Synthetic data: phantoms on the scanner disc, the mixed Poisson plus
//! Gaussian noise model, image-quality metrics, and dataset assembly with a
//! reproducibility manifest.
//!
//! Images are row-major `h x w` slices in normalized coordinates: pixel
//! `(i, j)` sits at `u = 2 (j + 0.5) / w - 1`, `v = 1 - 2 (i + 0.5) / h`,
//! and the support disc is `u^2 + v^2 <= 1`. Row 0 is the top of the image,
//! matching the operator grid convention.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::operator::{ImageGrid, OperatorError, SparseOperator};
use crate::parallel;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {got} values vs {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("image {h}x{w} too small, need at least {min}x{min}")]
    TooSmall { h: usize, w: usize, min: usize },
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("manifest serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimulateError + '_ {
    move |source| SimulateError::Io { path: path.to_path_buf(), source }
}

/// `(amplitude, semi-axis a, semi-axis b, centre x, centre y, angle in
/// degrees)` of the standard ten-ellipse head phantom on the unit disc.
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

fn pixel_uv(h: usize, w: usize, i: usize, j: usize) -> (f64, f64) {
    let u = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
    let v = 1.0 - 2.0 * (i as f64 + 0.5) / h as f64;
    (u, v)
}

/// Sums ellipse amplitudes at the pixel centres, zeroing outside the unit
/// disc and clamping into `[0, 1]`.
fn rasterize_ellipses(
    h: usize,
    w: usize,
    ellipses: &[(f64, f64, f64, f64, f64, f64)],
) -> Vec<f64> {
    let mut img = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (u, v) = pixel_uv(h, w, i, j);
            if u * u + v * v > 1.0 {
                continue;
            }
            let mut acc = 0.0;
            for &(amp, a, b, x0, y0, deg) in ellipses {
                let (s, c) = deg.to_radians().sin_cos();
                let dx = u - x0;
                let dy = v - y0;
                let xr = dx * c + dy * s;
                let yr = -dx * s + dy * c;
                if (xr / a).powi(2) + (yr / b).powi(2) <= 1.0 {
                    acc += amp;
                }
            }
            img[i * w + j] = acc.clamp(0.0, 1.0);
        }
    }
    img
}

/// Standard head phantom sampled at pixel centres.
pub fn shepp_logan(h: usize, w: usize) -> Result<Vec<f64>, SimulateError> {
    if h < 16 || w < 16 {
        return Err(SimulateError::TooSmall { h, w, min: 16 });
    }
    Ok(rasterize_ellipses(h, w, &SHEPP_LOGAN))
}

fn draw_ellipses<R: Rng>(rng: &mut R, n: usize) -> Vec<(f64, f64, f64, f64, f64, f64)> {
    (0..n)
        .map(|_| {
            // Centres stay well inside the disc so most of each ellipse
            // survives the support clip.
            let r = 0.6 * rng.gen::<f64>().sqrt();
            let phi = rng.gen::<f64>() * std::f64::consts::TAU;
            let amp = rng.gen_range(0.15..0.6);
            let a = rng.gen_range(0.1..0.45);
            let b = rng.gen_range(0.1..0.45);
            let deg = rng.gen_range(0.0..180.0);
            (amp, a, b, r * phi.cos(), r * phi.sin(), deg)
        })
        .collect()
}

/// Seeded random superposition of `n_ellipses` ellipses on the unit disc.
pub fn random_ellipse_phantom(
    h: usize,
    w: usize,
    seed: u64,
    n_ellipses: usize,
) -> Result<Vec<f64>, SimulateError> {
    if h < 16 || w < 16 {
        return Err(SimulateError::TooSmall { h, w, min: 16 });
    }
    if !(1..=12).contains(&n_ellipses) {
        return Err(SimulateError::Invalid(format!(
            "ellipse count must be in 1..=12, got {n_ellipses}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rasterize_ellipses(h, w, &draw_ellipses(&mut rng, n_ellipses)))
}

/// Training-set phantom: the ellipse count itself is drawn from the seed,
/// so one integer in the manifest regenerates the image.
pub fn dataset_phantom(h: usize, w: usize, seed: u64) -> Result<Vec<f64>, SimulateError> {
    if h < 16 || w < 16 {
        return Err(SimulateError::TooSmall { h, w, min: 16 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=8);
    Ok(rasterize_ellipses(h, w, &draw_ellipses(&mut rng, n)))
}

/// Mixed-noise parameters: Poisson counts first, then additive Gaussian at
/// a fraction of the mean positive signal.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSpec {
    pub gaussian_fraction: f64,
    pub poisson_intensity: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { gaussian_fraction: 0.05, poisson_intensity: 1e6, seed: 0 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), SimulateError> {
        if !(self.gaussian_fraction >= 0.0) || !self.gaussian_fraction.is_finite() {
            return Err(SimulateError::Invalid(format!(
                "gaussian fraction must be non-negative, got {}",
                self.gaussian_fraction
            )));
        }
        if !(self.poisson_intensity > 0.0) {
            return Err(SimulateError::Invalid(format!(
                "poisson intensity must be positive, got {}",
                self.poisson_intensity
            )));
        }
        Ok(())
    }
}

/// Applies Poisson counting noise scaled to `poisson_intensity` expected
/// total counts, then Gaussian noise with deviation `gaussian_fraction`
/// times the mean positive post-count signal.
///
/// Every element draws from its own counter-indexed stream, so the result
/// is independent of evaluation order and thread count. An all-zero input
/// skips the Poisson stage (its scale would be undefined) and degenerates
/// to the zero image, since the Gaussian level is measured from the signal.
pub fn add_mixed_noise(y: &[f64], spec: &NoiseSpec) -> Result<Vec<f64>, SimulateError> {
    spec.validate()?;
    if let Some(bad) = y.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(SimulateError::Invalid(format!(
            "sinogram must be non-negative and finite, got {bad}"
        )));
    }
    let total: f64 = y.iter().sum();
    let counted: Vec<f64> = if total > 0.0 {
        let s = spec.poisson_intensity / total;
        parallel::indexed_map(y.len(), |i| {
            if y[i] <= 0.0 {
                return 0.0;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(2 * i as u64);
            let lambda = s * y[i];
            Poisson::new(lambda).expect("positive rate").sample(&mut rng) / s
        })
    } else {
        y.to_vec()
    };

    let positive: Vec<f64> = counted.iter().copied().filter(|&v| v > 0.0).collect();
    let sigma = if positive.is_empty() {
        0.0
    } else {
        spec.gaussian_fraction * positive.iter().sum::<f64>() / positive.len() as f64
    };
    if sigma == 0.0 {
        return Ok(counted);
    }
    let noisy = parallel::indexed_map(counted.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(2 * i as u64 + 1);
        counted[i] + Normal::new(0.0, sigma).expect("positive deviation").sample(&mut rng)
    });
    Ok(noisy)
}

/// Peak signal-to-noise ratio in dB against `reference`; infinite when the
/// images are identical.
pub fn psnr(x: &[f64], reference: &[f64], data_range: f64) -> Result<f64, SimulateError> {
    if x.len() != reference.len() {
        return Err(SimulateError::ShapeMismatch { got: x.len(), want: reference.len() });
    }
    if !(data_range > 0.0) {
        return Err(SimulateError::Invalid(format!(
            "data range must be positive, got {data_range}"
        )));
    }
    if x.is_empty() {
        return Err(SimulateError::Invalid("empty image".into()));
    }
    let mse = x
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

const SSIM_WINDOW: usize = 11;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let sigma = 1.5;
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut total = 0.0;
    for (idx, val) in w.iter_mut().enumerate() {
        let dy = (idx / SSIM_WINDOW) as f64 - half;
        let dx = (idx % SSIM_WINDOW) as f64 - half;
        *val = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        total += *val;
    }
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean structural similarity over all fully interior 11x11 Gaussian
/// windows (deviation 1.5, stabilizers K1 = 0.01 and K2 = 0.03).
pub fn ssim(
    x: &[f64],
    reference: &[f64],
    h: usize,
    w: usize,
    data_range: f64,
) -> Result<f64, SimulateError> {
    if x.len() != reference.len() || x.len() != h * w {
        return Err(SimulateError::ShapeMismatch { got: x.len(), want: h * w });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(SimulateError::TooSmall { h, w, min: SSIM_WINDOW });
    }
    if !(data_range > 0.0) {
        return Err(SimulateError::Invalid(format!(
            "data range must be positive, got {data_range}"
        )));
    }
    let win = gaussian_window();
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for top in 0..=h - SSIM_WINDOW {
        for left in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let g = win[dy * SSIM_WINDOW + dx];
                    let a = x[(top + dy) * w + left + dx];
                    let b = reference[(top + dy) * w + left + dx];
                    mx += g * a;
                    my += g * b;
                    mxx += g * a * a;
                    myy += g * b * b;
                    mxy += g * a * b;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

const IMAGE_MAGIC: &[u8; 8] = b"CSTI\0\0\0\0";
const SINO_MAGIC: &[u8; 8] = b"CSTS\0\0\0\0";

fn write_raw(
    path: &Path,
    magic: &[u8; 8],
    dims: (u32, u32),
    values: &[f64],
) -> Result<(), SimulateError> {
    let mut bytes = Vec::with_capacity(16 + 4 * values.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&dims.0.to_le_bytes());
    bytes.extend_from_slice(&dims.1.to_le_bytes());
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_raw(path: &Path, magic: &[u8; 8]) -> Result<(u32, u32, Vec<f64>), SimulateError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |reason: &str| SimulateError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(bad("missing or wrong magic"));
    }
    let d0 = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let d1 = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let want = 16 + 4 * (d0 as usize) * (d1 as usize);
    if bytes.len() != want {
        return Err(bad("payload length disagrees with header"));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((d0, d1, values))
}

/// Writes an `h x w` image as magic + dims + 32-bit little-endian samples.
pub fn write_image(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<(), SimulateError> {
    if values.len() != h * w {
        return Err(SimulateError::ShapeMismatch { got: values.len(), want: h * w });
    }
    write_raw(path, IMAGE_MAGIC, (h as u32, w as u32), values)
}

pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f64>), SimulateError> {
    let (h, w, values) = read_raw(path, IMAGE_MAGIC)?;
    Ok((h as usize, w as usize, values))
}

/// Writes a `k x n_e` sinogram in the same raw layout as images.
pub fn write_sinogram(
    path: &Path,
    k: usize,
    n_e: usize,
    values: &[f64],
) -> Result<(), SimulateError> {
    if values.len() != k * n_e {
        return Err(SimulateError::ShapeMismatch { got: values.len(), want: k * n_e });
    }
    write_raw(path, SINO_MAGIC, (k as u32, n_e as u32), values)
}

pub fn read_sinogram(path: &Path) -> Result<(usize, usize, Vec<f64>), SimulateError> {
    let (k, n_e, values) = read_raw(path, SINO_MAGIC)?;
    Ok((k as usize, n_e as usize, values))
}

/// 16-bit binary PGM export for human viewing; values are clamped to
/// `[0, data_range]` and scaled to the full sample range.
pub fn write_pgm16(
    path: &Path,
    h: usize,
    w: usize,
    values: &[f64],
    data_range: f64,
) -> Result<(), SimulateError> {
    if values.len() != h * w {
        return Err(SimulateError::ShapeMismatch { got: values.len(), want: h * w });
    }
    if !(data_range > 0.0) {
        return Err(SimulateError::Invalid(format!(
            "data range must be positive, got {data_range}"
        )));
    }
    let mut bytes = Vec::with_capacity(32 + 2 * values.len());
    write!(&mut bytes, "P5\n{w} {h}\n65535\n").expect("in-memory write");
    for &v in values {
        let q = ((v / data_range).clamp(0.0, 1.0) * 65535.0).round() as u16;
        // PGM multi-byte samples are most-significant byte first.
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// One dataset sample: the phantom seed plus the files derived from it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestSample {
    pub role: String,
    pub index: usize,
    pub seed: u64,
    pub image: String,
    pub clean: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noisy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
}

/// Reproducibility record for a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    /// Fingerprint of the operator the sinograms were made with.
    pub operator_hash: String,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub n_e: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub base_seed: u64,
    pub noise: Option<NoiseSpec>,
    pub samples: Vec<ManifestSample>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// FNV-1a over the operator's structure and weights; cheap, stable, and
/// sensitive to any geometry or sampling change.
pub fn operator_fingerprint(op: &SparseOperator) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    eat(&(op.m as u64).to_le_bytes());
    eat(&(op.n as u64).to_le_bytes());
    for &p in &op.row_ptr {
        eat(&(p as u64).to_le_bytes());
    }
    for &c in &op.cols {
        eat(&(c as u64).to_le_bytes());
    }
    for &v in &op.weights {
        eat(&v.to_bits().to_le_bytes());
    }
    format!("{hash:016x}")
}

/// Generates phantoms and sinograms for a train/validation split into
/// `out_dir`, returning the manifest it also writes there.
///
/// Sample seeds are `base_seed + index` with indices continuing from the
/// training split into validation, so the splits never share a seed.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    op: &SparseOperator,
    img: &ImageGrid,
    k: usize,
    n_e: usize,
    n_train: usize,
    n_val: usize,
    base_seed: u64,
    noise: Option<&NoiseSpec>,
    out_dir: &Path,
) -> Result<Manifest, SimulateError> {
    if op.n != img.h * img.w {
        return Err(SimulateError::ShapeMismatch { got: op.n, want: img.h * img.w });
    }
    if op.m != k * n_e {
        return Err(SimulateError::ShapeMismatch { got: op.m, want: k * n_e });
    }
    if let Some(spec) = noise {
        spec.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut samples = Vec::with_capacity(n_train + n_val);
    for idx in 0..n_train + n_val {
        let (role, local) =
            if idx < n_train { ("train", idx) } else { ("val", idx - n_train) };
        let seed = base_seed + idx as u64;
        let phantom = dataset_phantom(img.h, img.w, seed)?;
        let sino = op.apply(&phantom)?;

        let image_name = format!("{role}_{local:04}.img");
        let clean_name = format!("{role}_{local:04}_clean.sino");
        write_image(&out_dir.join(&image_name), img.h, img.w, &phantom)?;
        write_sinogram(&out_dir.join(&clean_name), k, n_e, &sino)?;

        let (noisy, noise_seed) = match noise {
            Some(spec) => {
                let noise_seed = spec.seed.wrapping_add(idx as u64);
                let noisy_sino =
                    add_mixed_noise(&sino, &NoiseSpec { seed: noise_seed, ..spec.clone() })?;
                let noisy_name = format!("{role}_{local:04}_noisy.sino");
                write_sinogram(&out_dir.join(&noisy_name), k, n_e, &noisy_sino)?;
                (Some(noisy_name), Some(noise_seed))
            }
            None => (None, None),
        };
        samples.push(ManifestSample {
            role: role.to_string(),
            index: local,
            seed,
            image: image_name,
            clean: clean_name,
            noisy,
            noise_seed,
        });
    }

    let manifest = Manifest {
        operator_hash: operator_fingerprint(op),
        h: img.h,
        w: img.w,
        k,
        n_e,
        n_train,
        n_val,
        base_seed,
        noise: noise.cloned(),
        samples,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, SimulateError> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

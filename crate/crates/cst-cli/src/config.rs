//! Run configuration: strict JSON with unknown keys rejected, so a typo
//! fails loudly instead of silently falling back to a default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_ctx, CliError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    /// Ring diameter.
    pub p: f64,
    /// Detector count.
    pub k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySection {
    /// Source energy in MeV.
    pub e0: f64,
    /// Detector bin width in MeV.
    pub delta_e: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSection {
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSection {
    pub samples_per_pixel: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub max_iters: usize,
    /// Data-fidelity weight for the TV solver.
    pub lambda: f64,
    /// Step size where one applies; 0 selects the automatic stable step.
    pub step: f64,
    /// Tikhonov weight for the pseudo-inverse, dual damping for TV.
    pub tau: f64,
    /// Early-stop threshold; 0 disables.
    pub tol: f64,
    /// Retained singular values for the truncated-SVD method.
    pub rank: usize,
    /// Kaczmarz relaxation factor in (0, 2).
    pub relaxation: f64,
    /// Kaczmarz sweep count.
    pub sweeps: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            max_iters: 200,
            lambda: 5.0,
            step: 0.0,
            tau: 1e-3,
            tol: 0.0,
            rank: 64,
            relaxation: 1.0,
            sweeps: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// Unrolled iteration count.
    pub t: usize,
    /// Feature channels in the regularizer blocks.
    pub c: usize,
    pub window: usize,
    pub heads: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Data operator in the unrolled iteration: auto, pinv, or adjoint.
    /// Auto picks pinv at desk scale and the scaled adjoint above it.
    pub data_term: String,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            t: 4,
            c: 8,
            window: 8,
            heads: 2,
            epochs: 20,
            lr: 1e-4,
            weight_decay: 1e-2,
            data_term: "auto".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub poisson_intensity: f64,
    pub gaussian_fraction: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { poisson_intensity: 1e6, gaussian_fraction: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { n_train: 200, n_val: 20 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometrySection,
    pub energy: EnergySection,
    pub image: ImageSection,
    pub operator: OperatorSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub noise: Option<NoiseSection>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Field-level sanity checks with field names in every message, before
    /// any compute starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if !(self.geometry.p > 0.0) || !self.geometry.p.is_finite() {
            return bad(format!("geometry.p must be positive, got {}", self.geometry.p));
        }
        if self.geometry.k == 0 {
            return bad("geometry.k must be at least 1".into());
        }
        if !(self.energy.e0 > 0.0) || !self.energy.e0.is_finite() {
            return bad(format!("energy.e0 must be positive, got {}", self.energy.e0));
        }
        if !(self.energy.delta_e > 0.0) || !self.energy.delta_e.is_finite() {
            return bad(format!(
                "energy.delta_e must be positive, got {}",
                self.energy.delta_e
            ));
        }
        if self.image.h == 0 || self.image.w == 0 {
            return bad(format!(
                "image.h and image.w must be positive, got {}x{}",
                self.image.h, self.image.w
            ));
        }
        if self.operator.samples_per_pixel < 2 {
            return bad(format!(
                "operator.samples_per_pixel must be at least 2, got {}",
                self.operator.samples_per_pixel
            ));
        }
        if let Some(noise) = &self.noise {
            if !(noise.poisson_intensity > 0.0) {
                return bad(format!(
                    "noise.poisson_intensity must be positive, got {}",
                    noise.poisson_intensity
                ));
            }
            if !(0.0..1.0).contains(&noise.gaussian_fraction) {
                return bad(format!(
                    "noise.gaussian_fraction must lie in [0, 1), got {}",
                    noise.gaussian_fraction
                ));
            }
        }
        Ok(())
    }
}

/// Reads, env-resolves, and validates a configuration file. JSON errors
/// surface with serde's line and column.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_ctx(path))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Ok(dir) = std::env::var("CST_OUTPUT_DIR") {
        if !dir.is_empty() {
            cfg.output_dir = PathBuf::from(dir);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the full resolved configuration.
pub fn config_hash(cfg: &RunConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

/// Hash of only the subsections that determine the assembled operator.
pub fn operator_hash(cfg: &RunConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        geometry: &'a GeometrySection,
        energy: &'a EnergySection,
        image: &'a ImageSection,
        operator: &'a OperatorSection,
    }
    let key = Key {
        geometry: &cfg.geometry,
        energy: &cfg.energy,
        image: &cfg.image,
        operator: &cfg.operator,
    };
    sha256_hex(serde_json::to_string(&key).expect("key serializes").as_bytes())
}

/// Drops the resolved configuration and its hash into the output
/// directory, so every artifact tree records what produced it.
pub fn persist_resolved(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(io_ctx(&cfg.output_dir))?;
    let json = serde_json::to_string_pretty(cfg)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let cfg_path = cfg.output_dir.join("config.json");
    fs::write(&cfg_path, format!("{json}\n")).map_err(io_ctx(&cfg_path))?;
    let hash_path = cfg.output_dir.join("config.sha256");
    fs::write(&hash_path, format!("{}\n", config_hash(cfg))).map_err(io_ctx(&hash_path))?;
    Ok(())
}

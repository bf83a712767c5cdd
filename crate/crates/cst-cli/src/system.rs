//! Shared system assembly: geometry, energy grid, image grid, and the
//! scatter operator, with a disk cache keyed by the operator-relevant
//! configuration subsections.

use std::fs;
use std::path::PathBuf;

use cst_core::geometry::{build_energy_grid, ComptonSpec, EnergyGrid, SystemGeometry};
use cst_core::operator::{assemble, op_norm, pinv_dense, ImageGrid, SparseOperator};
use cst_core::solvers::DataTerm;
use cst_core::unwavenet::NetConfig;

use crate::config::{operator_hash, RunConfig};
use crate::error::{io_ctx, CliError};

/// Above this pixel count the dense pseudo-inverse stops being a desk-side
/// default and the scaled adjoint takes over.
pub const DESK_SCALE_PIXELS: usize = 4096;

pub struct System {
    pub geom: SystemGeometry,
    pub energies: EnergyGrid,
    pub img: ImageGrid,
    pub a: SparseOperator,
}

/// Builds (or reloads from cache) everything derived from the geometry,
/// energy, image, and sampling sections.
pub fn build_system(cfg: &RunConfig) -> Result<System, CliError> {
    let spec = ComptonSpec::new(cfg.energy.e0)?;
    let geom = SystemGeometry::new(cfg.geometry.p, cfg.geometry.k)?;
    let energies = build_energy_grid(&spec, cfg.energy.delta_e)?;
    let img = ImageGrid::new(cfg.image.h, cfg.image.w, cfg.geometry.p)?;

    let cache = cache_path(cfg);
    if cache.exists() {
        if let Ok(a) = SparseOperator::load(&cache) {
            if a.m == geom.k * energies.n_e && a.n == img.h * img.w {
                println!("reusing cached operator {}", cache.display());
                return Ok(System { geom, energies, img, a });
            }
        }
        // A stale or corrupt cache entry falls through to reassembly.
    }

    let a = assemble(&geom, &energies, &img, cfg.operator.samples_per_pixel)?;
    if let Some(dir) = cache.parent() {
        fs::create_dir_all(dir).map_err(io_ctx(dir))?;
    }
    a.save(&cache)?;
    println!(
        "assembled operator {} x {} ({} entries), cached at {}",
        a.m,
        a.n,
        a.weights.len(),
        cache.display()
    );
    Ok(System { geom, energies, img, a })
}

fn cache_path(cfg: &RunConfig) -> PathBuf {
    let hash = operator_hash(cfg);
    cfg.output_dir.join("cache").join(format!("op-{}.csta", &hash[..16]))
}

/// The network architecture implied by the configuration.
pub fn net_config(cfg: &RunConfig) -> Result<NetConfig, CliError> {
    let net = NetConfig {
        t: cfg.network.t,
        c: cfg.network.c,
        window: cfg.network.window,
        heads: cfg.network.heads,
        h: cfg.image.h,
        w: cfg.image.w,
    };
    net.validate()?;
    Ok(net)
}

/// Chooses the fixed data operator for a fresh training run according to
/// the `network.data_term` setting.
pub fn data_term_for_training(
    cfg: &RunConfig,
    a: &SparseOperator,
) -> Result<DataTerm, CliError> {
    let adjoint = |a: &SparseOperator| {
        let norm = op_norm(a, 50);
        DataTerm::Adjoint { scale: 1.0 / (norm * norm) }
    };
    match cfg.network.data_term.as_str() {
        "pinv" => Ok(DataTerm::Pinv(pinv_dense(a, cfg.solver.tau)?)),
        "adjoint" => Ok(adjoint(a)),
        "auto" => {
            if a.n <= DESK_SCALE_PIXELS {
                Ok(DataTerm::Pinv(pinv_dense(a, cfg.solver.tau)?))
            } else {
                Ok(adjoint(a))
            }
        }
        other => Err(CliError::Config(format!(
            "network.data_term must be auto, pinv, or adjoint, got {other}"
        ))),
    }
}

/// Rebuilds the data operator a checkpoint was trained with from its
/// recorded label.
pub fn data_term_from_label(
    label: &str,
    a: &SparseOperator,
    tau: f64,
) -> Result<DataTerm, CliError> {
    if label == "pinv" {
        return Ok(DataTerm::Pinv(pinv_dense(a, tau)?));
    }
    if let Some(scale) = label.strip_prefix("adjoint:") {
        let scale: f64 = scale.parse().map_err(|_| {
            CliError::Incompatible(format!("unparseable data term label {label}"))
        })?;
        return Ok(DataTerm::Adjoint { scale });
    }
    if let Some(rest) = label.strip_prefix("cgls:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if let [steps, tau] = parts[..] {
            if let (Ok(steps), Ok(tau)) = (steps.parse(), tau.parse()) {
                return Ok(DataTerm::CglsSteps { steps, tau });
            }
        }
        return Err(CliError::Incompatible(format!(
            "unparseable data term label {label}"
        )));
    }
    Err(CliError::Incompatible(format!(
        "checkpoint records unknown data term {label}"
    )))
}

//! Compton physics and the circular scanning geometry.
//!
//! A monochromatic source sits at the origin on a ring of diameter `P` whose
//! centre is `O = (0, -P/2)`. Energy-resolved detectors sit on the same ring.
//! A photon that scatters once by angle `omega` arrives with a fixed energy
//! given by the Compton relation, so each detector energy bin selects the set
//! of scattering sites lying on two mirrored circular arcs through the source
//! and the detector. This module converts energies to angles, places the
//! detectors, and parametrizes those arcs.

use thiserror::Error;

/// Electron rest energy in MeV.
pub const MC2_MEV: f64 = 0.511;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("scattering angle {0} rad outside [0, pi]")]
    AngleOutOfRange(f64),
    #[error("energy {e} MeV outside the reachable band [{lo}, {hi}] MeV")]
    EnergyOutOfRange { e: f64, lo: f64, hi: f64 },
    #[error("bin width {delta_e} MeV outside (0, {max}) MeV")]
    BadBinWidth { delta_e: f64, max: f64 },
    #[error("scanning arcs degenerate at omega = {0} rad (sin omega = 0)")]
    SingularArc(f64),
    #[error("detector angle {0} rad outside the open interval (-pi, 0)")]
    BetaOutOfRange(f64),
    #[error("invalid geometry: {0}")]
    Invalid(String),
}

/// Source energy together with the fixed electron rest energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComptonSpec {
    /// Source energy E0 in MeV.
    pub e0: f64,
    /// Electron rest energy in MeV, always [`MC2_MEV`].
    pub mc2: f64,
}

impl ComptonSpec {
    pub fn new(e0: f64) -> Result<Self, GeometryError> {
        if !(e0 > 0.0) || !e0.is_finite() {
            return Err(GeometryError::Invalid(format!(
                "source energy must be positive and finite, got {e0}"
            )));
        }
        Ok(Self { e0, mc2: MC2_MEV })
    }

    /// Lowest reachable scattered energy, attained at backscatter (omega = pi).
    pub fn e_min(&self) -> f64 {
        energy_of_angle(self, std::f64::consts::PI).expect("pi is in range")
    }
}

/// Scattered photon energy after a single scatter by `omega` radians.
pub fn energy_of_angle(spec: &ComptonSpec, omega: f64) -> Result<f64, GeometryError> {
    if !(0.0..=std::f64::consts::PI).contains(&omega) {
        return Err(GeometryError::AngleOutOfRange(omega));
    }
    Ok(spec.e0 / (1.0 + (spec.e0 / spec.mc2) * (1.0 - omega.cos())))
}

/// Scattering angle producing energy `e`; inverse of [`energy_of_angle`].
pub fn angle_of_energy(spec: &ComptonSpec, e: f64) -> Result<f64, GeometryError> {
    let lo = spec.e_min();
    if !(e >= lo && e <= spec.e0) {
        return Err(GeometryError::EnergyOutOfRange { e, lo, hi: spec.e0 });
    }
    let cos_omega = 1.0 - spec.mc2 * (1.0 / e - 1.0 / spec.e0);
    // Rounding in the line above can push the value a hair outside [-1, 1].
    Ok(cos_omega.clamp(-1.0, 1.0).acos())
}

/// Uniform energy bins covering the reachable band, each tied to its angle.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGrid {
    pub n_e: usize,
    pub delta_e: f64,
    /// Bin-centre energies in MeV, strictly increasing.
    pub centers: Vec<f64>,
    /// Scattering angle per bin in radians, strictly decreasing.
    pub omegas: Vec<f64>,
}

/// Splits `[E(pi), E0)` into `floor(span / delta_e)` bins and maps each bin
/// centre to its scattering angle. Centres rather than edges keep every omega
/// strictly inside `(0, pi)`.
pub fn build_energy_grid(spec: &ComptonSpec, delta_e: f64) -> Result<EnergyGrid, GeometryError> {
    let e_min = spec.e_min();
    let span = spec.e0 - e_min;
    if !(delta_e > 0.0 && delta_e < span) {
        return Err(GeometryError::BadBinWidth { delta_e, max: span });
    }
    let n_e = (span / delta_e).floor() as usize;
    let mut centers = Vec::with_capacity(n_e);
    let mut omegas = Vec::with_capacity(n_e);
    for j in 0..n_e {
        let e = e_min + (j as f64 + 0.5) * delta_e;
        centers.push(e);
        omegas.push(angle_of_energy(spec, e)?);
    }
    Ok(EnergyGrid { n_e, delta_e, centers, omegas })
}

/// Ring diameter and detector placement. The source is pinned at the origin
/// and the ring centre at `(0, -P/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemGeometry {
    /// Ring diameter P.
    pub p: f64,
    /// Detector count K.
    pub k: usize,
    /// Detector angles beta_k, strictly increasing inside (-pi, 0).
    pub betas: Vec<f64>,
}

impl SystemGeometry {
    /// Places `k` detectors uniformly at beta_i = -pi + i*pi/(K+1), i = 1..K.
    /// The interval endpoints are excluded so no detector coincides with the
    /// source and every arc diameter stays finite.
    pub fn new(p: f64, k: usize) -> Result<Self, GeometryError> {
        if !(p > 0.0) || !p.is_finite() {
            return Err(GeometryError::Invalid(format!("ring diameter must be positive, got {p}")));
        }
        if k == 0 {
            return Err(GeometryError::Invalid("detector count must be at least 1".into()));
        }
        let betas = (1..=k)
            .map(|i| -std::f64::consts::PI + i as f64 * std::f64::consts::PI / (k + 1) as f64)
            .collect();
        Ok(Self { p, k, betas })
    }

    pub fn source(&self) -> [f64; 2] {
        [0.0, 0.0]
    }

    pub fn ring_center(&self) -> [f64; 2] {
        [0.0, -0.5 * self.p]
    }

    /// Cartesian position of detector `i` (0-based): the second intersection
    /// of the ray at polar angle beta_i from the source with the ring, at
    /// distance -P sin(beta_i) from the source.
    pub fn detector_position(&self, i: usize) -> [f64; 2] {
        let beta = self.betas[i];
        let r = -self.p * beta.sin();
        [r * beta.cos(), r * beta.sin()]
    }
}

/// The two scanning arcs selected by one (detector, scattering angle) pair.
///
/// Both arcs lie on circles of diameter `rho` through the source. The first
/// spans `theta in [beta, beta + omega]` around the centre direction
/// `phi_plus`; the second is its mirror image across the source-detector
/// chord, spanning `[beta - omega, beta]` around `phi_minus + pi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcPair {
    /// Circle diameter rho(beta, omega), always positive here.
    pub rho: f64,
    /// Relative angle phi(beta, omega) = beta + omega - pi/2.
    pub phi_plus: f64,
    /// Relative angle phi(beta, -omega) = beta - omega - pi/2.
    pub phi_minus: f64,
    pub theta_range_plus: [f64; 2],
    pub theta_range_minus: [f64; 2],
}

impl ArcPair {
    /// Centre direction of the first arc's circle as seen from the source.
    pub fn center_angle_plus(&self) -> f64 {
        self.phi_plus
    }

    /// Centre direction of the second arc's circle. The mirrored circle sits
    /// opposite `phi_minus`, which corresponds to the negative diameter
    /// rho(beta, -omega) = -rho of the signed parametrization.
    pub fn center_angle_minus(&self) -> f64 {
        self.phi_minus + std::f64::consts::PI
    }

    /// Point on the first arc at polar angle `theta` (radius r = rho cos(theta - phi_plus)).
    pub fn point_plus(&self, theta: f64) -> [f64; 2] {
        let r = self.rho * (theta - self.center_angle_plus()).cos();
        [r * theta.cos(), r * theta.sin()]
    }

    /// Point on the second arc at polar angle `theta`.
    pub fn point_minus(&self, theta: f64) -> [f64; 2] {
        let r = self.rho * (theta - self.center_angle_minus()).cos();
        [r * theta.cos(), r * theta.sin()]
    }

    /// Arc length of either arc; r = rho cos(theta - phi) has ds = rho dtheta.
    pub fn arc_length(&self) -> f64 {
        self.rho * (self.theta_range_plus[1] - self.theta_range_plus[0])
    }
}

/// Arc diameter and angles for scattering angle `omega` seen by the detector
/// at `beta`.
pub fn arc_parameters(
    geom: &SystemGeometry,
    omega: f64,
    beta: f64,
) -> Result<ArcPair, GeometryError> {
    if !(omega > 0.0 && omega < std::f64::consts::PI) {
        return Err(GeometryError::SingularArc(omega));
    }
    if !(beta > -std::f64::consts::PI && beta < 0.0) {
        return Err(GeometryError::BetaOutOfRange(beta));
    }
    let rho = geom.p * (beta + std::f64::consts::FRAC_PI_2).cos() / omega.sin();
    Ok(ArcPair {
        rho,
        phi_plus: beta + omega - std::f64::consts::FRAC_PI_2,
        phi_minus: beta - omega - std::f64::consts::FRAC_PI_2,
        theta_range_plus: [beta, beta + omega],
        theta_range_minus: [beta - omega, beta],
    })
}

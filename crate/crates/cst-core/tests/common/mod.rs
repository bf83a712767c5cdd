//! Shared helpers for integration tests: an independent brute-force
//! quadrature of the double-arc transform, used as the oracle for the
//! assembled operator.

use cst_core::geometry::{arc_parameters, EnergyGrid, SystemGeometry};
use cst_core::operator::ImageGrid;

/// Integrates `phantom` along both arcs of row (k, j) by dense theta stepping
/// with nearest-pixel lookup. Deliberately shares no code with assembly: no
/// splatting, no sample merging, plain accumulation.
#[allow(dead_code)]
pub fn brute_force_row(
    geom: &SystemGeometry,
    grid: &EnergyGrid,
    img: &ImageGrid,
    phantom: &[f64],
    row: usize,
    steps_per_pixel: usize,
) -> f64 {
    let k = row / grid.n_e;
    let j = row % grid.n_e;
    let arcs = arc_parameters(geom, grid.omegas[j], geom.betas[k]).unwrap();
    let omega = arcs.theta_range_plus[1] - arcs.theta_range_plus[0];
    let n = ((arcs.rho * omega) / (img.pixel_size / steps_per_pixel as f64)).ceil() as usize;
    let n = n.max(1);
    let dtheta = omega / n as f64;
    let mut acc = 0.0;
    for (start, center) in [
        (arcs.theta_range_plus[0], arcs.center_angle_plus()),
        (arcs.theta_range_minus[0], arcs.center_angle_minus()),
    ] {
        for s in 0..n {
            let theta = start + (s as f64 + 0.5) * dtheta;
            let r = arcs.rho * (theta - center).cos();
            let (x, y) = (r * theta.cos(), r * theta.sin());
            if !img.inside_support(x, y) {
                continue;
            }
            let jj = ((x + 0.5 * img.p) / img.pixel_size - 0.5).round() as i64;
            let ii = (-y / img.pixel_size - 0.5).round() as i64;
            if ii >= 0 && jj >= 0 && (ii as usize) < img.h && (jj as usize) < img.w {
                acc += arcs.rho * dtheta * phantom[ii as usize * img.w + jj as usize];
            }
        }
    }
    acc
}

/// Transpose of the brute-force quadrature: walks every arc with a nonzero
/// sinogram value and deposits `value * rho * dtheta` at the nearest pixel of
/// each in-support sample.
#[allow(dead_code)]
pub fn brute_force_backprojection(
    geom: &SystemGeometry,
    grid: &EnergyGrid,
    img: &ImageGrid,
    sino: &[f64],
    steps_per_pixel: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; img.n()];
    for (row, &value) in sino.iter().enumerate() {
        if value == 0.0 {
            continue;
        }
        let k = row / grid.n_e;
        let j = row % grid.n_e;
        let arcs = arc_parameters(geom, grid.omegas[j], geom.betas[k]).unwrap();
        let omega = arcs.theta_range_plus[1] - arcs.theta_range_plus[0];
        let n = ((arcs.rho * omega) / (img.pixel_size / steps_per_pixel as f64)).ceil() as usize;
        let n = n.max(1);
        let dtheta = omega / n as f64;
        for (start, center) in [
            (arcs.theta_range_plus[0], arcs.center_angle_plus()),
            (arcs.theta_range_minus[0], arcs.center_angle_minus()),
        ] {
            for s in 0..n {
                let theta = start + (s as f64 + 0.5) * dtheta;
                let r = arcs.rho * (theta - center).cos();
                let (x, y) = (r * theta.cos(), r * theta.sin());
                if !img.inside_support(x, y) {
                    continue;
                }
                let jj = ((x + 0.5 * img.p) / img.pixel_size - 0.5).round() as i64;
                let ii = (-y / img.pixel_size - 0.5).round() as i64;
                if ii >= 0 && jj >= 0 && (ii as usize) < img.h && (jj as usize) < img.w {
                    out[ii as usize * img.w + jj as usize] += value * arcs.rho * dtheta;
                }
            }
        }
    }
    out
}

/// Smooth two-lobe test density, essentially zero at the support-disc rim so
/// that edge handling cannot dominate a quadrature comparison.
#[allow(dead_code)]
pub fn bump_value(p: f64, x: f64, y: f64) -> f64 {
    let lobes = [(0.04 * p, -0.45 * p, 0.14 * p, 1.0), (-0.10 * p, -0.62 * p, 0.10 * p, 0.6)];
    let mut v = 0.0;
    for (ox, oy, sigma, amp) in lobes {
        let d2 = (x - ox).powi(2) + (y - oy).powi(2);
        v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
    }
    v
}

/// `bump_value` sampled at pixel centres.
#[allow(dead_code)]
pub fn smooth_bump_phantom(img: &ImageGrid) -> Vec<f64> {
    let mut out = vec![0.0; img.n()];
    for i in 0..img.h {
        for j in 0..img.w {
            let [x, y] = img.pixel_center(i, j);
            out[i * img.w + j] = bump_value(img.p, x, y);
        }
    }
    out
}

/// Interpolation-side counterpart of the operator's four-corner splat: the
/// phantom value at (x, y) under the bilinear pixel basis, with fractions
/// outside the grid contributing nothing.
#[allow(dead_code)]
pub fn bilinear_at(img: &ImageGrid, phantom: &[f64], x: f64, y: f64) -> f64 {
    let u = (x + 0.5 * img.p) / img.pixel_size - 0.5;
    let v = -y / img.pixel_size - 0.5;
    let (j0, i0) = (u.floor(), v.floor());
    let (fu, fv) = (u - j0, v - i0);
    let mut acc = 0.0;
    for (di, wi) in [(0i64, 1.0 - fv), (1, fv)] {
        for (dj, wj) in [(0i64, 1.0 - fu), (1, fu)] {
            let (ii, jj) = (i0 as i64 + di, j0 as i64 + dj);
            if ii >= 0 && jj >= 0 && (ii as usize) < img.h && (jj as usize) < img.w {
                acc += wi * wj * phantom[ii as usize * img.w + jj as usize];
            }
        }
    }
    acc
}

/// Dense theta-stepping quadrature of the continuous density along both arcs
/// of row (k, j). Shares nothing with assembly: no pixel grid, no splatting,
/// just midpoint sums of `f` restricted to the support disc.
#[allow(dead_code)]
pub fn brute_force_row_continuous(
    geom: &SystemGeometry,
    grid: &EnergyGrid,
    img: &ImageGrid,
    f: &dyn Fn(f64, f64) -> f64,
    row: usize,
    steps_per_pixel: usize,
) -> f64 {
    let k = row / grid.n_e;
    let j = row % grid.n_e;
    let arcs = arc_parameters(geom, grid.omegas[j], geom.betas[k]).unwrap();
    let omega = arcs.theta_range_plus[1] - arcs.theta_range_plus[0];
    let n = ((arcs.rho * omega) / (img.pixel_size / steps_per_pixel as f64)).ceil() as usize;
    let n = n.max(1);
    let dtheta = omega / n as f64;
    let mut acc = 0.0;
    for (start, center) in [
        (arcs.theta_range_plus[0], arcs.center_angle_plus()),
        (arcs.theta_range_minus[0], arcs.center_angle_minus()),
    ] {
        for s in 0..n {
            let theta = start + (s as f64 + 0.5) * dtheta;
            let r = arcs.rho * (theta - center).cos();
            let (x, y) = (r * theta.cos(), r * theta.sin());
            if img.inside_support(x, y) {
                acc += arcs.rho * dtheta * f(x, y);
            }
        }
    }
    acc
}

/// Coverage-rasterized uniform disc of the given radius centred on the
/// support disc centre: pixel value = fraction of a 4x4 subsample grid whose
/// points fall inside the disc.
#[allow(dead_code)]
pub fn uniform_disc_phantom(img: &ImageGrid, radius: f64) -> Vec<f64> {
    let [ox, oy] = [0.0, -0.5 * img.p];
    let mut out = vec![0.0; img.n()];
    for i in 0..img.h {
        for j in 0..img.w {
            let [cx, cy] = img.pixel_center(i, j);
            let mut hits = 0;
            for si in 0..4 {
                for sj in 0..4 {
                    let x = cx + ((sj as f64 + 0.5) / 4.0 - 0.5) * img.pixel_size;
                    let y = cy + ((si as f64 + 0.5) / 4.0 - 0.5) * img.pixel_size;
                    if (x - ox).powi(2) + (y - oy).powi(2) <= radius * radius {
                        hits += 1;
                    }
                }
            }
            out[i * img.w + j] = hits as f64 / 16.0;
        }
    }
    out
}

//! Row-by-row quadrature of the double-arc transform.

use super::{ImageGrid, OperatorError, SparseOperator};
use crate::geometry::{arc_parameters, EnergyGrid, SystemGeometry};
use crate::parallel;

/// Discretizes the forward model for every (detector, energy bin) pair.
///
/// For bin angle `omega` and detector angle `beta` the scattering sites lie on
/// two arcs `r = rho cos(theta - psi)`. Collapsing the radial delta kernel
/// leaves `rho * integral f dtheta` per arc, which midpoint quadrature turns
/// into samples of mass `rho * dtheta` (one arc-length element, since
/// `ds = rho dtheta`). The step is chosen so samples sit at most
/// `pixel_size / samples_per_pixel` apart along the arc. Samples outside the
/// support disc are dropped; the rest splat bilinearly onto pixel centres.
///
/// Rows are computed independently and concatenated in row order, so the
/// output is bit-identical for any worker count.
pub fn assemble(
    geom: &SystemGeometry,
    grid: &EnergyGrid,
    img: &ImageGrid,
    samples_per_pixel: usize,
) -> Result<SparseOperator, OperatorError> {
    if samples_per_pixel < 2 {
        return Err(OperatorError::BadSampling(samples_per_pixel));
    }
    if (img.p - geom.p).abs() > 1e-12 * geom.p {
        return Err(OperatorError::GeometryMismatch(format!(
            "image support diameter {} differs from ring diameter {}",
            img.p, geom.p
        )));
    }
    let m = geom.k * grid.n_e;
    let rows = parallel::indexed_map(m, |r| {
        assemble_row(geom, grid, img, samples_per_pixel, r)
    });
    collect_rows(img.n(), rows)
}

/// Single-threaded twin of [`assemble`], bit-identical output.
pub fn assemble_seq(
    geom: &SystemGeometry,
    grid: &EnergyGrid,
    img: &ImageGrid,
    samples_per_pixel: usize,
) -> Result<SparseOperator, OperatorError> {
    if samples_per_pixel < 2 {
        return Err(OperatorError::BadSampling(samples_per_pixel));
    }
    if (img.p - geom.p).abs() > 1e-12 * geom.p {
        return Err(OperatorError::GeometryMismatch(format!(
            "image support diameter {} differs from ring diameter {}",
            img.p, geom.p
        )));
    }
    let m = geom.k * grid.n_e;
    let rows = parallel::indexed_map_seq(m, |r| {
        assemble_row(geom, grid, img, samples_per_pixel, r)
    });
    collect_rows(img.n(), rows)
}

type RowResult = Result<Vec<(u32, f64)>, OperatorError>;

fn collect_rows(n: usize, rows: Vec<RowResult>) -> Result<SparseOperator, OperatorError> {
    let m = rows.len();
    let mut row_ptr = Vec::with_capacity(m + 1);
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    row_ptr.push(0);
    for row in rows {
        for (c, w) in row? {
            cols.push(c);
            weights.push(w);
        }
        row_ptr.push(cols.len());
    }
    Ok(SparseOperator { m, n, row_ptr, cols, weights })
}

fn assemble_row(
    geom: &SystemGeometry,
    grid: &EnergyGrid,
    img: &ImageGrid,
    samples_per_pixel: usize,
    r: usize,
) -> RowResult {
    let k = r / grid.n_e;
    let j = r % grid.n_e;
    let arcs = arc_parameters(geom, grid.omegas[j], geom.betas[k])?;
    let omega = arcs.theta_range_plus[1] - arcs.theta_range_plus[0];

    // Sample count per arc from the target arc-length spacing.
    let target_ds = img.pixel_size / samples_per_pixel as f64;
    let n_samples = (arcs.arc_length() / target_ds).ceil().max(1.0) as usize;
    let dtheta = omega / n_samples as f64;
    let mass = arcs.rho * dtheta;

    let mut raw: Vec<(u32, f64)> = Vec::with_capacity(4 * 2 * n_samples);
    for (start, center) in [
        (arcs.theta_range_plus[0], arcs.center_angle_plus()),
        (arcs.theta_range_minus[0], arcs.center_angle_minus()),
    ] {
        for s in 0..n_samples {
            let theta = start + (s as f64 + 0.5) * dtheta;
            let radius = arcs.rho * (theta - center).cos();
            let x = radius * theta.cos();
            let y = radius * theta.sin();
            if img.inside_support(x, y) {
                let before = raw.len();
                img.splat(x, y, &mut raw);
                for e in &mut raw[before..] {
                    e.1 *= mass;
                }
            }
        }
    }

    // Stable sort keeps duplicate-column contributions in traversal order, so
    // the merged sums do not depend on the sort implementation's tie handling.
    raw.sort_by_key(|e| e.0);
    let mut merged: Vec<(u32, f64)> = Vec::with_capacity(raw.len() / 2);
    for (c, w) in raw {
        match merged.last_mut() {
            Some(last) if last.0 == c => last.1 += w,
            _ => merged.push((c, w)),
        }
    }
    Ok(merged)
}

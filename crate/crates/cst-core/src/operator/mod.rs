//! Discrete forward model: the double-arc integrals sampled onto a pixel grid
//! as one sparse matrix with an exact transpose.
//!
//! Rows are (detector, energy bin) pairs at `row(k, j) = k * n_e + j`; columns
//! are pixels in row-major order. Assembly walks each arc in equal steps of
//! polar angle and splats the arc-length mass of every sample onto the four
//! neighbouring pixel centres, so the stored matrix is simultaneously the
//! projector and, transposed, the backprojector.

mod assemble;
mod dense;
mod io;

pub use assemble::{assemble, assemble_seq};
pub use dense::{op_norm, pinv_dense, singular_triples, DenseOperator, SingularTriples, DENSE_LIMIT};

use crate::parallel;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("image grid: {0}")]
    BadGrid(String),
    #[error("samples_per_pixel must be at least 2, got {0}")]
    BadSampling(usize),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("assembly failed: {0}")]
    Assembly(#[from] crate::geometry::GeometryError),
    #[error("vector length {got}, operator expects {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("dense factorization refused at n = {n} (limit {limit}); use the iterative least-squares solver instead")]
    ScaleTooLarge { n: usize, limit: usize },
    #[error("normal matrix is numerically singular (smallest/largest eigenvalue ratio {ratio:.3e}); pass tau > 0")]
    Singular { ratio: f64 },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad operator file: {0}")]
    Format(String),
}

/// Square pixel grid circumscribing the support disc of diameter `p` centred
/// at `(0, -p/2)`. Row 0 is the top of the image (largest y).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub h: usize,
    pub w: usize,
    /// Pixel edge length; `w * pixel_size = p` so the grid covers the disc
    /// exactly.
    pub pixel_size: f64,
    /// Support disc diameter, equal to the ring diameter.
    pub p: f64,
}

impl ImageGrid {
    pub fn new(h: usize, w: usize, p: f64) -> Result<Self, OperatorError> {
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(OperatorError::BadGrid(format!(
                "pixel counts must be positive and even, got {h}x{w}"
            )));
        }
        if h != w {
            return Err(OperatorError::BadGrid(format!(
                "grid must be square to cover the disc exactly, got {h}x{w}"
            )));
        }
        if !(p > 0.0) || !p.is_finite() {
            return Err(OperatorError::BadGrid(format!("support diameter must be positive, got {p}")));
        }
        Ok(Self { h, w, pixel_size: p / w as f64, p })
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }

    /// World coordinates of the centre of pixel (row `i`, col `j`).
    pub fn pixel_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            -0.5 * self.p + (j as f64 + 0.5) * self.pixel_size,
            -(i as f64 + 0.5) * self.pixel_size,
        ]
    }

    pub fn inside_support(&self, x: f64, y: f64) -> bool {
        let r = 0.5 * self.p;
        x * x + (y + r) * (y + r) <= r * r
    }

    /// Bilinear splat of a unit mass at world point (x, y) onto up to four
    /// pixel centres. Fractions falling outside the grid are dropped.
    pub fn splat(&self, x: f64, y: f64, out: &mut Vec<(u32, f64)>) {
        let u = (x + 0.5 * self.p) / self.pixel_size - 0.5;
        let v = -y / self.pixel_size - 0.5;
        let j0 = u.floor();
        let i0 = v.floor();
        let fu = u - j0;
        let fv = v - i0;
        let (i0, j0) = (i0 as i64, j0 as i64);
        let mut push = |i: i64, j: i64, wgt: f64| {
            if wgt > 0.0 && i >= 0 && j >= 0 && (i as usize) < self.h && (j as usize) < self.w {
                out.push(((i as usize * self.w + j as usize) as u32, wgt));
            }
        };
        push(i0, j0, (1.0 - fu) * (1.0 - fv));
        push(i0, j0 + 1, fu * (1.0 - fv));
        push(i0 + 1, j0, (1.0 - fu) * fv);
        push(i0 + 1, j0 + 1, fu * fv);
    }
}

/// Compressed sparse rows; weights kept in 64-bit so the adjoint identity
/// holds to near machine precision.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    pub m: usize,
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub weights: Vec<f64>,
}

impl SparseOperator {
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.cols[a..b], &self.weights[a..b])
    }

    /// Builds an operator from a dense row-major `m x n` entry slice, keeping
    /// nonzero entries. Intended for small test and calibration systems.
    pub fn from_dense(m: usize, n: usize, entries: &[f64]) -> Self {
        assert_eq!(entries.len(), m * n, "dense entry count");
        let mut row_ptr = Vec::with_capacity(m + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for r in 0..m {
            for c in 0..n {
                let v = entries[r * n + c];
                if v != 0.0 {
                    cols.push(c as u32);
                    weights.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { m, n, row_ptr, cols, weights }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.m * self.n];
        for r in 0..self.m {
            let (cols, wgts) = self.row(r);
            for (c, w) in cols.iter().zip(wgts) {
                out[r * self.n + *c as usize] = *w;
            }
        }
        out
    }

    fn check_len(&self, got: usize, want: usize) -> Result<(), OperatorError> {
        if got != want {
            return Err(OperatorError::ShapeMismatch { got, want });
        }
        Ok(())
    }

    fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let (cols, wgts) = self.row(r);
        cols.iter().zip(wgts).map(|(c, w)| w * x[*c as usize]).sum()
    }

    /// y = A x.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, OperatorError> {
        self.check_len(x.len(), self.n)?;
        Ok(parallel::indexed_map(self.m, |r| self.row_dot(r, x)))
    }

    /// Single-threaded twin of [`Self::apply`], bit-identical output.
    pub fn apply_seq(&self, x: &[f64]) -> Result<Vec<f64>, OperatorError> {
        self.check_len(x.len(), self.n)?;
        Ok(parallel::indexed_map_seq(self.m, |r| self.row_dot(r, x)))
    }

    fn adjoint_fill<'a>(&'a self, y: &'a [f64]) -> impl Fn(usize, &mut [f64]) + Sync + Send + 'a {
        move |ci, partial| {
            let lo = ci * parallel::REDUCE_CHUNK;
            let hi = (lo + parallel::REDUCE_CHUNK).min(self.m);
            for r in lo..hi {
                let yr = y[r];
                if yr == 0.0 {
                    continue;
                }
                let (cols, wgts) = self.row(r);
                for (c, w) in cols.iter().zip(wgts) {
                    partial[*c as usize] += w * yr;
                }
            }
        }
    }

    /// x = A^T y, via per-chunk accumulators combined in fixed order so the
    /// result is identical for any thread count.
    pub fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>, OperatorError> {
        self.check_len(y.len(), self.m)?;
        let chunks = self.m.div_ceil(parallel::REDUCE_CHUNK);
        Ok(parallel::chunk_accumulate(self.n, chunks, self.adjoint_fill(y)))
    }

    /// Single-threaded twin of [`Self::apply_adjoint`], bit-identical output.
    pub fn apply_adjoint_seq(&self, y: &[f64]) -> Result<Vec<f64>, OperatorError> {
        self.check_len(y.len(), self.m)?;
        let chunks = self.m.div_ceil(parallel::REDUCE_CHUNK);
        Ok(parallel::chunk_accumulate_seq(self.n, chunks, self.adjoint_fill(y)))
    }
}

/// Measurement array for one scan: `k` detectors times `n_e` energy bins,
/// flattened row-major with energy fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub k: usize,
    pub n_e: usize,
    pub data: Vec<f64>,
}

impl Sinogram {
    pub fn new(k: usize, n_e: usize, data: Vec<f64>) -> Result<Self, OperatorError> {
        if data.len() != k * n_e {
            return Err(OperatorError::ShapeMismatch { got: data.len(), want: k * n_e });
        }
        Ok(Self { k, n_e, data })
    }

    #[inline]
    pub fn at(&self, k: usize, j: usize) -> f64 {
        self.data[k * self.n_e + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{arc_parameters, build_energy_grid, ComptonSpec, EnergyGrid, SystemGeometry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(k: usize, bins: usize, px: usize) -> (SystemGeometry, EnergyGrid, ImageGrid, SparseOperator) {
        let spec = ComptonSpec::new(0.3).unwrap();
        let geom = SystemGeometry::new(1.0, k).unwrap();
        let span = spec.e0 - spec.e_min();
        let grid = build_energy_grid(&spec, span / bins as f64).unwrap();
        assert_eq!(grid.n_e, bins);
        let img = ImageGrid::new(px, px, 1.0).unwrap();
        let a = assemble(&geom, &grid, &img, 4).unwrap();
        (geom, grid, img, a)
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn grid_construction_rules() {
        assert!(ImageGrid::new(16, 16, 1.0).is_ok());
        assert!(matches!(ImageGrid::new(15, 15, 1.0), Err(OperatorError::BadGrid(_))));
        assert!(matches!(ImageGrid::new(16, 8, 1.0), Err(OperatorError::BadGrid(_))));
        assert!(matches!(ImageGrid::new(16, 16, 0.0), Err(OperatorError::BadGrid(_))));
        let img = ImageGrid::new(16, 16, 2.0).unwrap();
        assert!((img.pixel_size - 0.125).abs() < 1e-15);
        let [x, y] = img.pixel_center(0, 0);
        assert!((x + 1.0 - 0.0625).abs() < 1e-15);
        assert!((y + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn splat_partitions_unit_mass_in_the_interior() {
        let img = ImageGrid::new(16, 16, 1.0).unwrap();
        let mut out = Vec::new();
        for (x, y) in [(0.1, -0.5), (0.0, -0.23), (-0.21, -0.77)] {
            out.clear();
            img.splat(x, y, &mut out);
            let total: f64 = out.iter().map(|e| e.1).sum();
            assert!((total - 1.0).abs() < 1e-12, "mass {total} at ({x}, {y})");
            assert!(out.len() <= 4);
        }
    }

    #[test]
    fn zero_image_projects_to_zero() {
        let (_, _, img, a) = toy(6, 8, 16);
        let y = a.apply(&vec![0.0; img.n()]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weights_are_finite_and_non_negative() {
        let (_, _, _, a) = toy(6, 8, 16);
        assert!(a.nnz() > 0);
        assert!(a.weights.iter().all(|w| w.is_finite() && *w >= 0.0));
        for r in 0..a.m {
            let (cols, _) = a.row(r);
            for pair in cols.windows(2) {
                assert!(pair[0] < pair[1], "row {r} has unsorted or duplicate columns");
            }
        }
    }

    #[test]
    fn projection_is_linear() {
        let (_, _, img, a) = toy(6, 8, 16);
        let x1 = random_vec(img.n(), 1);
        let x2 = random_vec(img.n(), 2);
        let mixed: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let y1 = a.apply(&x1).unwrap();
        let y2 = a.apply(&x2).unwrap();
        let ym = a.apply(&mixed).unwrap();
        let scale = ym.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-30);
        for i in 0..ym.len() {
            assert!((ym[i] - (2.0 * y1[i] - 0.5 * y2[i])).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn non_negative_images_project_non_negatively() {
        let (_, _, img, a) = toy(6, 8, 16);
        let x: Vec<f64> = random_vec(img.n(), 3).iter().map(|v| v.abs()).collect();
        assert!(a.apply(&x).unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn adjoint_identity_holds() {
        let (_, _, img, a) = toy(6, 8, 16);
        for seed in 0..20 {
            let x = random_vec(img.n(), 100 + seed);
            let y = random_vec(a.m, 200 + seed);
            let ax = a.apply(&x).unwrap();
            let aty = a.apply_adjoint(&y).unwrap();
            let lhs: f64 = ax.iter().zip(&y).map(|(p, q)| p * q).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(p, q)| p * q).sum();
            let nax = ax.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((lhs - rhs).abs() <= 1e-12 * (nax * ny).max(1e-30), "seed {seed}");
        }
    }

    #[test]
    fn adjoint_of_zero_is_zero() {
        let (_, _, _, a) = toy(6, 8, 16);
        let x = a.apply_adjoint(&vec![0.0; a.m]).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let (_, _, _, a) = toy(6, 8, 16);
        assert!(matches!(a.apply(&vec![0.0; 7]), Err(OperatorError::ShapeMismatch { .. })));
        assert!(matches!(a.apply_adjoint(&vec![0.0; 7]), Err(OperatorError::ShapeMismatch { .. })));
        assert!(matches!(Sinogram::new(4, 4, vec![0.0; 7]), Err(OperatorError::ShapeMismatch { .. })));
    }

    #[test]
    fn sampling_and_geometry_preconditions() {
        let spec = ComptonSpec::new(0.3).unwrap();
        let geom = SystemGeometry::new(1.0, 4).unwrap();
        let span = spec.e0 - spec.e_min();
        let grid = build_energy_grid(&spec, span / 4.0).unwrap();
        let img = ImageGrid::new(16, 16, 1.0).unwrap();
        assert!(matches!(
            assemble(&geom, &grid, &img, 1),
            Err(OperatorError::BadSampling(1))
        ));
        let wrong = ImageGrid::new(16, 16, 2.0).unwrap();
        assert!(matches!(
            assemble(&geom, &grid, &wrong, 4),
            Err(OperatorError::GeometryMismatch(_))
        ));
    }

    #[test]
    fn assembly_and_kernels_are_deterministic() {
        let spec = ComptonSpec::new(0.3).unwrap();
        let geom = SystemGeometry::new(1.0, 5).unwrap();
        let span = spec.e0 - spec.e_min();
        let grid = build_energy_grid(&spec, span / 6.0).unwrap();
        let img = ImageGrid::new(16, 16, 1.0).unwrap();
        let a1 = assemble(&geom, &grid, &img, 4).unwrap();
        let a2 = assemble(&geom, &grid, &img, 4).unwrap();
        let a3 = assemble_seq(&geom, &grid, &img, 4).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1, a3);
        let x = random_vec(img.n(), 5);
        assert_eq!(a1.apply(&x).unwrap(), a1.apply_seq(&x).unwrap());
        let y = random_vec(a1.m, 6);
        assert_eq!(a1.apply_adjoint(&y).unwrap(), a1.apply_adjoint_seq(&y).unwrap());
    }

    #[test]
    fn mirrored_phantom_reverses_detector_order() {
        let (geom, _, img, a) = toy(7, 6, 32);
        let x: Vec<f64> = random_vec(img.n(), 8).iter().map(|v| v.abs()).collect();
        let mut mirrored = vec![0.0; img.n()];
        for i in 0..img.h {
            for j in 0..img.w {
                mirrored[i * img.w + (img.w - 1 - j)] = x[i * img.w + j];
            }
        }
        let y = a.apply(&x).unwrap();
        let ym = a.apply(&mirrored).unwrap();
        let n_e = y.len() / geom.k;
        let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for k in 0..geom.k {
            for j in 0..n_e {
                let lhs = ym[k * n_e + j];
                let rhs = y[(geom.k - 1 - k) * n_e + j];
                assert!(
                    (lhs - rhs).abs() <= 1e-6 * scale,
                    "detector {k} bin {j}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn quadrature_converges_under_refinement() {
        let spec = ComptonSpec::new(0.3).unwrap();
        let geom = SystemGeometry::new(1.0, 6).unwrap();
        let span = spec.e0 - spec.e_min();
        let grid = build_energy_grid(&spec, span / 6.0).unwrap();
        let img = ImageGrid::new(32, 32, 1.0).unwrap();
        // Smooth bump placed off-centre inside the support disc.
        let sigma = 0.12;
        let x: Vec<f64> = (0..img.n())
            .map(|idx| {
                let [px, py] = img.pixel_center(idx / img.w, idx % img.w);
                let d2 = (px - 0.08).powi(2) + (py + 0.55).powi(2);
                (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let coarse = assemble(&geom, &grid, &img, 4).unwrap().apply(&x).unwrap();
        let fine = assemble(&geom, &grid, &img, 8).unwrap().apply(&x).unwrap();
        let diff: f64 = coarse
            .iter()
            .zip(&fine)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = fine.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff < 0.01 * norm, "refinement moved projection by {}", diff / norm);
    }

    #[test]
    fn impulse_activates_only_rows_with_arcs_nearby() {
        let (geom, grid, img, a) = toy(6, 8, 16);
        let (pi, pj) = (6, 9);
        let mut x = vec![0.0; img.n()];
        x[pi * img.w + pj] = 1.0;
        let y = a.apply(&x).unwrap();
        let [cx, cy] = img.pixel_center(pi, pj);
        // Independent distance check: walk both arcs densely and record the
        // closest in-support approach to the impulse pixel centre.
        for r in 0..a.m {
            let k = r / grid.n_e;
            let j = r % grid.n_e;
            let arcs = arc_parameters(&geom, grid.omegas[j], geom.betas[k]).unwrap();
            let mut min_d = f64::INFINITY;
            for (range, center) in [
                (arcs.theta_range_plus, arcs.center_angle_plus()),
                (arcs.theta_range_minus, arcs.center_angle_minus()),
            ] {
                for s in 0..=2000 {
                    let theta = range[0] + (range[1] - range[0]) * s as f64 / 2000.0;
                    let rad = arcs.rho * (theta - center).cos();
                    let (sx, sy) = (rad * theta.cos(), rad * theta.sin());
                    if img.inside_support(sx, sy) {
                        min_d = min_d.min(((sx - cx).powi(2) + (sy - cy).powi(2)).sqrt());
                    }
                }
            }
            let px = img.pixel_size;
            if y[r] > 0.0 {
                assert!(min_d <= 1.5 * px, "row {r} active but arcs stay {min_d} away");
            }
            if min_d > 1.5 * px {
                assert_eq!(y[r], 0.0, "row {r} should miss the impulse");
            }
            if min_d <= 0.2 * px {
                assert!(y[r] > 0.0, "row {r} passes through the pixel but is zero");
            }
        }
    }

    #[test]
    fn pinv_of_orthogonal_columns_is_left_inverse() {
        let a = SparseOperator::from_dense(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let pinv = pinv_dense(&a, 0.0).unwrap();
        for j in 0..2 {
            let mut e = vec![0.0; 2];
            e[j] = 1.0;
            let back = pinv.apply(&a.apply(&e).unwrap()).unwrap();
            for i in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((back[i] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pinv_recovers_consistent_full_rank_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let entries: Vec<f64> = (0..12 * 8).map(|_| rng.gen_range(0.1..1.0)).collect();
        let a = SparseOperator::from_dense(12, 8, &entries);
        let x0 = random_vec(8, 11);
        let y = a.apply(&x0).unwrap();
        let x = pinv_dense(&a, 0.0).unwrap().apply(&y).unwrap();
        for i in 0..8 {
            assert!((x[i] - x0[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn pinv_refuses_singular_systems_without_regularization() {
        // Wide: rank cannot reach the column count.
        let wide = SparseOperator::from_dense(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(pinv_dense(&wide, 0.0), Err(OperatorError::Singular { .. })));
        // Square but rank deficient.
        let deficient = SparseOperator::from_dense(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(pinv_dense(&deficient, 0.0), Err(OperatorError::Singular { .. })));
        // Both are fine once regularized.
        assert!(pinv_dense(&wide, 1e-3).is_ok());
        assert!(pinv_dense(&deficient, 1e-3).is_ok());
    }

    #[test]
    fn tikhonov_shrinks_solutions_monotonically() {
        let (_, _, img, a) = toy(6, 8, 16);
        let y = a.apply(&random_vec(img.n(), 13).iter().map(|v| v.abs()).collect::<Vec<_>>()).unwrap();
        let mut prev = f64::INFINITY;
        for tau in [0.01, 0.1, 1.0] {
            let x = pinv_dense(&a, tau).unwrap().apply(&y).unwrap();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < prev, "tau {tau}: {norm} not below {prev}");
            prev = norm;
        }
    }

    #[test]
    fn pinv_matches_wide_and_tall_identities() {
        // (A^T A + tau I)^{-1} A^T computed both ways must agree on a square system.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let entries: Vec<f64> = (0..36).map(|_| rng.gen_range(0.1..1.0)).collect();
        let a = SparseOperator::from_dense(6, 6, &entries);
        let p = pinv_dense(&a, 1e-2).unwrap();
        let y = random_vec(6, 31);
        let x = p.apply(&y).unwrap();
        // Residual of the normal equations at the returned solution.
        let ax = a.apply(&x).unwrap();
        let resid: Vec<f64> = a
            .apply_adjoint(&ax.iter().zip(&y).map(|(p, q)| p - q).collect::<Vec<_>>())
            .unwrap()
            .iter()
            .zip(&x)
            .map(|(g, xi)| g + 1e-2 * xi)
            .collect();
        assert!(resid.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-10);
    }

    #[test]
    fn dense_scale_guard_triggers() {
        let a = SparseOperator {
            m: 2,
            n: DENSE_LIMIT + 1,
            row_ptr: vec![0, 0, 0],
            cols: vec![],
            weights: vec![],
        };
        assert!(matches!(pinv_dense(&a, 0.1), Err(OperatorError::ScaleTooLarge { .. })));
        assert!(matches!(singular_triples(&a), Err(OperatorError::ScaleTooLarge { .. })));
    }

    #[test]
    fn power_iteration_on_diagonal_and_zero() {
        let diag = SparseOperator::from_dense(
            4,
            4,
            &[3.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 3.0],
        );
        assert!((op_norm(&diag, 30) - 3.0).abs() < 1e-9);
        let zero = SparseOperator::from_dense(4, 4, &[0.0; 16]);
        assert_eq!(op_norm(&zero, 30), 0.0);
    }

    #[test]
    fn power_iteration_matches_dense_svd() {
        let (_, _, _, a) = toy(6, 8, 16);
        let sigma = op_norm(&a, 100);
        let dense = nalgebra::DMatrix::from_row_slice(a.m, a.n, &a.to_dense());
        let top = dense.svd(false, false).singular_values.max();
        assert!((sigma - top).abs() <= 0.01 * top, "power {sigma} vs svd {top}");
    }

    #[test]
    fn singular_triples_reconstruct_the_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let entries: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(0.1..1.0)).collect();
        let a = SparseOperator::from_dense(5, 4, &entries);
        let t = singular_triples(&a).unwrap();
        assert!(t.s.windows(2).all(|w| w[0] >= w[1]));
        for r in 0..5 {
            for c in 0..4 {
                let mut acc = 0.0;
                for i in 0..t.s.len() {
                    acc += t.s[i] * t.u[i][r] * t.v[i][c];
                }
                assert!((acc - entries[r * 4 + c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn operator_file_round_trip() {
        let (_, _, _, a) = toy(5, 6, 16);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("op.csta");
        a.save(&path).unwrap();
        let b = SparseOperator::load(&path).unwrap();
        assert_eq!(a, b);

        // Corrupt the magic.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.csta");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(SparseOperator::load(&bad), Err(OperatorError::Format(_))));

        // Truncate the payload.
        let trunc = dir.path().join("trunc.csta");
        std::fs::write(&trunc, &std::fs::read(&path).unwrap()[..40]).unwrap();
        assert!(SparseOperator::load(&trunc).is_err());

        // Trailing junk.
        let mut long = std::fs::read(&path).unwrap();
        long.push(0);
        let tail = dir.path().join("tail.csta");
        std::fs::write(&tail, &long).unwrap();
        assert!(matches!(SparseOperator::load(&tail), Err(OperatorError::Format(_))));
    }

    #[test]
    fn dense_operator_transpose_consistency() {
        let d = DenseOperator { rows: 3, cols: 2, data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0] };
        let x = vec![1.0, -1.0];
        let y = vec![0.5, 1.5, -2.0];
        let lhs: f64 = d.apply(&x).unwrap().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&d.apply_transpose(&y).unwrap()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(d.apply(&y).is_err());
        assert!(d.apply_transpose(&x).is_err());
    }
}

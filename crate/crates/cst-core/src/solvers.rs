//! Classical reconstruction algorithms for the arc-integral operator:
//! regularized conjugate-gradient least squares, Kaczmarz row action,
//! gradient descent with a pluggable data-term operator, a primal-dual
//! total-variation solver, and truncated-SVD inversion.

use crate::operator::{op_norm, singular_triples, DenseOperator, OperatorError, SparseOperator};
use thiserror::Error;

/// Errors shared by the solver family.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    BadConfig(String),
    #[error("step size {step} exceeds the stability bound {bound}")]
    StepTooLarge { step: f64, bound: f64 },
    #[error("non-finite value detected at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

/// Shared iteration parameters. `step <= 0` selects an automatic stable step
/// where a step size applies; `tol = 0` disables early stopping.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Data-fidelity weight.
    pub lambda: f64,
    /// Step size, where the algorithm uses one.
    pub step: f64,
    /// Quadratic (Tikhonov) weight for `cgls`, dual damping for the TV solver.
    pub tau: f64,
    /// Early-stop threshold on the relative change of the data residual.
    pub tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iters: 500, lambda: 1.0, step: 0.0, tau: 0.0, tol: 0.0 }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<(), SolverError> {
        if self.max_iters == 0 {
            return Err(SolverError::BadConfig("max_iters must be at least 1".into()));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(SolverError::BadConfig(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tol >= 0.0) || !self.tol.is_finite() {
            return Err(SolverError::BadConfig(format!("tol must be non-negative, got {}", self.tol)));
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(SolverError::BadConfig(format!("tau must be non-negative, got {}", self.tau)));
        }
        if !self.step.is_finite() {
            return Err(SolverError::BadConfig(format!("step must be finite, got {}", self.step)));
        }
        Ok(())
    }
}

/// A solver run: final image plus the per-iteration data residual trace.
#[derive(Debug, Clone)]
pub struct ReconResult {
    pub image: Vec<f64>,
    /// `||A x - y||` recorded once per iteration; length equals `iterations_run`.
    pub residual_history: Vec<f64>,
    pub iterations_run: usize,
}

/// The linear map applied to the data residual in gradient-type iterations.
///
/// `Adjoint` is the cheap surrogate, `Pinv` the dense regularized
/// pseudo-inverse (desk scale), and `CglsSteps` a fixed number of
/// conjugate-residual steps acting as an approximate inverse at scales where
/// the dense route is infeasible.
pub enum DataTerm {
    Adjoint { scale: f64 },
    Pinv(DenseOperator),
    CglsSteps { steps: usize, tau: f64 },
}

impl DataTerm {
    /// Plain transpose with unit scale.
    pub fn adjoint() -> Self {
        DataTerm::Adjoint { scale: 1.0 }
    }

    /// Maps a residual in measurement space to an image-space correction.
    pub fn apply(&self, a: &SparseOperator, r: &[f64]) -> Result<Vec<f64>, SolverError> {
        match self {
            DataTerm::Adjoint { scale } => {
                let mut g = a.apply_adjoint(r)?;
                g.iter_mut().for_each(|v| *v *= scale);
                Ok(g)
            }
            DataTerm::Pinv(p) => Ok(p.apply(r)?),
            DataTerm::CglsSteps { steps, tau } => {
                let c = a.apply_adjoint(r)?;
                let (x, _) = conjugate_residual(a, *tau, &c, *steps, |_, _| true)?;
                Ok(x)
            }
        }
    }

    /// Transpose of the map above, needed when differentiating through it.
    ///
    /// For `CglsSteps` this is the transpose of the fully converged map
    /// (solve then project forward); it matches the finite-step map only up
    /// to the remaining solver error.
    pub fn apply_transpose(&self, a: &SparseOperator, v: &[f64]) -> Result<Vec<f64>, SolverError> {
        match self {
            DataTerm::Adjoint { scale } => {
                let mut g = a.apply(v)?;
                g.iter_mut().for_each(|u| *u *= scale);
                Ok(g)
            }
            DataTerm::Pinv(p) => Ok(p.apply_transpose(v)?),
            DataTerm::CglsSteps { steps, tau } => {
                let (z, _) = conjugate_residual(a, *tau, v, *steps, |_, _| true)?;
                Ok(a.apply(&z)?)
            }
        }
    }

    /// Power-iteration estimate of the spectral norm of `x -> D(A x)`.
    /// The composite is symmetric positive semidefinite for every variant,
    /// so plain power iteration converges to the top eigenvalue.
    pub fn composite_norm(&self, a: &SparseOperator, iters: usize) -> Result<f64, SolverError> {
        let n = a.n;
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lead = 0.0;
        for _ in 0..iters.max(10) {
            let w = self.apply(a, &a.apply(&v)?)?;
            let norm = norm2(&w);
            if norm == 0.0 || !norm.is_finite() {
                return Ok(0.0);
            }
            lead = norm;
            v = w;
            v.iter_mut().for_each(|u| *u /= norm);
        }
        Ok(lead)
    }
}

/// Conjugate-residual recurrence on the regularized normal equations
/// `(A^T A + tau I) x = c` from `x = 0`. Unlike plain conjugate gradients,
/// this recurrence minimizes the residual norm itself over the growing Krylov
/// space, so `||c - (A^T A + tau I) x_k||` never increases.
///
/// `visit` is called with `(iteration_index, x)` after each update; returning
/// `false` stops the loop. Returns the final iterate and the number of
/// updates performed.
fn conjugate_residual<F: FnMut(usize, &[f64]) -> bool>(
    a: &SparseOperator,
    tau: f64,
    c: &[f64],
    max_iters: usize,
    mut visit: F,
) -> Result<(Vec<f64>, usize), SolverError> {
    let n = a.n;
    let b_apply = |v: &[f64]| -> Result<Vec<f64>, SolverError> {
        let mut out = a.apply_adjoint(&a.apply(v)?)?;
        if tau != 0.0 {
            out.iter_mut().zip(v).for_each(|(o, &vi)| *o += tau * vi);
        }
        Ok(out)
    };

    let mut x = vec![0.0; n];
    let mut r = c.to_vec();
    let mut p = r.clone();
    let mut br = b_apply(&r)?;
    let mut bp = br.clone();
    let mut r_br = dot(&r, &br);
    let mut done = 0;
    for k in 0..max_iters {
        if !r_br.is_finite() {
            return Err(SolverError::Diverged { iteration: k });
        }
        if norm2(&r) == 0.0 {
            break;
        }
        let denom = dot(&bp, &bp);
        if denom == 0.0 {
            break;
        }
        let alpha = r_br / denom;
        if !alpha.is_finite() {
            return Err(SolverError::Diverged { iteration: k });
        }
        x.iter_mut().zip(&p).for_each(|(xi, &pi)| *xi += alpha * pi);
        r.iter_mut().zip(&bp).for_each(|(ri, &bi)| *ri -= alpha * bi);
        br = b_apply(&r)?;
        let r_br_next = dot(&r, &br);
        done = k + 1;
        if !visit(k, &x) {
            break;
        }
        if r_br == 0.0 {
            break;
        }
        let beta = r_br_next / r_br;
        p.iter_mut().zip(&r).for_each(|(pi, &ri)| *pi = ri + beta * *pi);
        bp.iter_mut().zip(&br).for_each(|(bi, &bri)| *bi = bri + beta * *bi);
        r_br = r_br_next;
    }
    Ok((x, done))
}

/// Regularized least squares `min ||A x - y||^2 + tau ||x||^2` by the
/// conjugate-residual recurrence on the normal equations.
pub fn cgls(a: &SparseOperator, y: &[f64], cfg: &SolverConfig) -> Result<ReconResult, SolverError> {
    cfg.validate()?;
    let c = a.apply_adjoint(y)?;
    let mut history = Vec::new();
    let mut failed_at = None;
    let (image, iterations_run) = conjugate_residual(a, cfg.tau, &c, cfg.max_iters, |k, x| {
        let res = match a.apply(x) {
            Ok(ax) => diff_norm(&ax, y),
            Err(_) => f64::NAN,
        };
        if !res.is_finite() {
            failed_at = Some(k);
            return false;
        }
        let keep = below_tol_change(&history, res, cfg.tol);
        history.push(res);
        keep
    })?;
    if let Some(iteration) = failed_at {
        return Err(SolverError::Diverged { iteration });
    }
    Ok(ReconResult { image, residual_history: history, iterations_run })
}

/// Cyclic row-projection iteration. One "iteration" in the result is a full
/// sweep over all rows; rows with zero norm are skipped.
pub fn kaczmarz(
    a: &SparseOperator,
    y: &[f64],
    relaxation: f64,
    sweeps: usize,
) -> Result<ReconResult, SolverError> {
    if !(relaxation > 0.0 && relaxation < 2.0) {
        return Err(SolverError::BadConfig(format!(
            "relaxation must lie strictly between 0 and 2, got {relaxation}"
        )));
    }
    if y.len() != a.m {
        return Err(SolverError::Operator(OperatorError::ShapeMismatch { got: y.len(), want: a.m }));
    }
    let row_norms: Vec<f64> = (0..a.m)
        .map(|i| {
            let (_, w) = a.row(i);
            w.iter().map(|v| v * v).sum()
        })
        .collect();

    let mut x = vec![0.0; a.n];
    let mut history = Vec::with_capacity(sweeps);
    for sweep in 0..sweeps {
        for i in 0..a.m {
            if row_norms[i] == 0.0 {
                continue;
            }
            let (cols, w) = a.row(i);
            let ax: f64 = cols.iter().zip(w).map(|(&c, &wv)| wv * x[c as usize]).sum();
            let coeff = relaxation * (y[i] - ax) / row_norms[i];
            for (&c, &wv) in cols.iter().zip(w) {
                x[c as usize] += coeff * wv;
            }
        }
        let res = diff_norm(&a.apply(&x)?, y);
        if !res.is_finite() {
            return Err(SolverError::Diverged { iteration: sweep });
        }
        history.push(res);
    }
    let iterations_run = history.len();
    Ok(ReconResult { image: x, residual_history: history, iterations_run })
}

/// Gradient descent on `lambda/2 ||A x - y||^2 (+ regularizer)` where the
/// residual is mapped back to image space by `d`:
/// `x <- x - step (lambda d(A x - y) + reg_grad(x))`.
///
/// `x0` defaults to zeros. With `cfg.step <= 0` a stable step is chosen from
/// a power-iteration bound; an explicit step is rejected when it exceeds
/// `1 / (lambda ||d . A||)`.
pub fn gradient_descent_recon(
    a: &SparseOperator,
    d: &DataTerm,
    y: &[f64],
    cfg: &SolverConfig,
    x0: Option<&[f64]>,
    reg_grad: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
) -> Result<ReconResult, SolverError> {
    cfg.validate()?;
    if y.len() != a.m {
        return Err(SolverError::Operator(OperatorError::ShapeMismatch { got: y.len(), want: a.m }));
    }
    let mut x = match x0 {
        Some(v) => {
            if v.len() != a.n {
                return Err(SolverError::Operator(OperatorError::ShapeMismatch {
                    got: v.len(),
                    want: a.n,
                }));
            }
            v.to_vec()
        }
        None => vec![0.0; a.n],
    };

    let lip = d.composite_norm(a, 30)?;
    let bound = if lip > 0.0 { 1.0 / (cfg.lambda * lip) } else { f64::INFINITY };
    let step = if cfg.step > 0.0 {
        if cfg.step > bound * (1.0 + 1e-9) {
            return Err(SolverError::StepTooLarge { step: cfg.step, bound });
        }
        cfg.step
    } else if bound.is_finite() {
        bound
    } else {
        1.0
    };

    let mut history = Vec::with_capacity(cfg.max_iters);
    for t in 0..cfg.max_iters {
        let mut r = a.apply(&x)?;
        r.iter_mut().zip(y).for_each(|(ri, &yi)| *ri -= yi);
        let res = norm2(&r);
        if !res.is_finite() {
            return Err(SolverError::Diverged { iteration: t });
        }
        let keep = below_tol_change(&history, res, cfg.tol);
        history.push(res);

        let mut g = d.apply(a, &r)?;
        g.iter_mut().for_each(|v| *v *= cfg.lambda);
        if let Some(rg) = reg_grad {
            let extra = rg(&x);
            if extra.len() != a.n {
                return Err(SolverError::BadConfig(format!(
                    "regularizer gradient length {} does not match image length {}",
                    extra.len(),
                    a.n
                )));
            }
            g.iter_mut().zip(&extra).for_each(|(gi, &ei)| *gi += ei);
        }
        x.iter_mut().zip(&g).for_each(|(xi, &gi)| *xi -= step * gi);
        if !keep {
            break;
        }
    }
    let iterations_run = history.len();
    Ok(ReconResult { image: x, residual_history: history, iterations_run })
}

/// Primal-dual solver for `min_x lambda/2 ||A x - y||^2 + TV(x)` with
/// isotropic total variation, forward differences, and Neumann boundaries.
/// The image is assumed square (`n = side * side`).
///
/// With `cfg.step <= 0` both primal and dual steps default to `1 / L`, where
/// `L^2 <= ||A||^2 + 8` bounds the stacked operator; an explicit step must
/// satisfy `step^2 L^2 <= 1`.
pub fn chambolle_pock_tv(
    a: &SparseOperator,
    y: &[f64],
    cfg: &SolverConfig,
) -> Result<ReconResult, SolverError> {
    cfg.validate()?;
    if y.len() != a.m {
        return Err(SolverError::Operator(OperatorError::ShapeMismatch { got: y.len(), want: a.m }));
    }
    let side = (a.n as f64).sqrt().round() as usize;
    if side * side != a.n {
        return Err(SolverError::BadConfig(format!("image length {} is not a square", a.n)));
    }

    let l2 = op_norm(a, 50).powi(2) + 8.0;
    let l = l2.sqrt();
    let (sigma, tau_cp) = if cfg.step > 0.0 {
        if cfg.step * cfg.step * l2 > 1.0 + 1e-9 {
            return Err(SolverError::StepTooLarge { step: cfg.step, bound: 1.0 / l });
        }
        (cfg.step, cfg.step)
    } else {
        (1.0 / l, 1.0 / l)
    };

    let n = a.n;
    let mut x = vec![0.0; n];
    let mut xbar = x.clone();
    let mut p = vec![0.0; a.m];
    let mut qx = vec![0.0; n];
    let mut qy = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let mut history = Vec::with_capacity(cfg.max_iters);

    for t in 0..cfg.max_iters {
        // Dual ascent on the data term: resolvent of the conjugate of
        // lambda/2 ||. - y||^2.
        let axbar = a.apply(&xbar)?;
        let damp = 1.0 + sigma / cfg.lambda;
        p.iter_mut().zip(axbar.iter().zip(y)).for_each(|(pi, (&ai, &yi))| {
            *pi = (*pi + sigma * (ai - yi)) / damp;
        });

        // Dual ascent on TV: project shifted duals onto unit discs per pixel.
        forward_gradient(&xbar, side, &mut gx, &mut gy);
        for i in 0..n {
            let cx = qx[i] + sigma * gx[i];
            let cy = qy[i] + sigma * gy[i];
            let mag = (cx * cx + cy * cy).sqrt().max(1.0);
            qx[i] = cx / mag;
            qy[i] = cy / mag;
        }

        // Primal descent with over-relaxation.
        let mut grad = a.apply_adjoint(&p)?;
        add_gradient_transpose(&qx, &qy, side, &mut grad);
        for i in 0..n {
            let x_new = x[i] - tau_cp * grad[i];
            xbar[i] = 2.0 * x_new - x[i];
            x[i] = x_new;
        }

        let res = diff_norm(&a.apply(&x)?, y);
        if !res.is_finite() {
            return Err(SolverError::Diverged { iteration: t });
        }
        let keep = below_tol_change(&history, res, cfg.tol);
        history.push(res);
        if !keep {
            break;
        }
    }
    let iterations_run = history.len();
    Ok(ReconResult { image: x, residual_history: history, iterations_run })
}

/// Truncated-SVD inverse: `x = sum_{i < rank} (u_i . y / s_i) v_i`, with
/// numerically zero singular values (below `s_0 * 1e-12`) skipped.
pub fn tsvd_reconstruct(a: &SparseOperator, y: &[f64], rank: usize) -> Result<Vec<f64>, SolverError> {
    if y.len() != a.m {
        return Err(SolverError::Operator(OperatorError::ShapeMismatch { got: y.len(), want: a.m }));
    }
    let triples = singular_triples(a)?;
    let max = triples.s.len();
    if rank == 0 || rank > max {
        return Err(SolverError::RankOutOfRange { rank, max });
    }
    let cutoff = triples.s.first().copied().unwrap_or(0.0) * 1e-12;
    let mut x = vec![0.0; a.n];
    for i in 0..rank {
        let s = triples.s[i];
        if s <= cutoff {
            break;
        }
        let coeff = dot(&triples.u[i], y) / s;
        x.iter_mut().zip(&triples.v[i]).for_each(|(xi, &vi)| *xi += coeff * vi);
    }
    Ok(x)
}

/// Isotropic total variation with the same discrete gradient the primal-dual
/// solver uses.
pub fn total_variation(x: &[f64], side: usize) -> f64 {
    assert_eq!(x.len(), side * side, "image length");
    let mut gx = vec![0.0; x.len()];
    let mut gy = vec![0.0; x.len()];
    forward_gradient(x, side, &mut gx, &mut gy);
    gx.iter().zip(&gy).map(|(&a, &b)| (a * a + b * b).sqrt()).sum()
}

/// Forward differences with Neumann boundary: zero past the last row/column.
fn forward_gradient(x: &[f64], side: usize, gx: &mut [f64], gy: &mut [f64]) {
    for i in 0..side {
        for j in 0..side {
            let idx = i * side + j;
            gx[idx] = if j + 1 < side { x[idx + 1] - x[idx] } else { 0.0 };
            gy[idx] = if i + 1 < side { x[idx + side] - x[idx] } else { 0.0 };
        }
    }
}

/// Adds the transpose of `forward_gradient` applied to (qx, qy) into `out`.
fn add_gradient_transpose(qx: &[f64], qy: &[f64], side: usize, out: &mut [f64]) {
    for i in 0..side {
        for j in 0..side {
            let idx = i * side + j;
            let mut v = 0.0;
            if j + 1 < side {
                v -= qx[idx];
            }
            if j > 0 {
                v += qx[idx - 1];
            }
            if i + 1 < side {
                v -= qy[idx];
            }
            if i > 0 {
                v += qy[idx - side];
            }
            out[idx] += v;
        }
    }
}

/// `true` to continue iterating: the newest residual must still move by more
/// than `tol` relative to the previous one (0 disables the check).
fn below_tol_change(history: &[f64], res: f64, tol: f64) -> bool {
    if tol == 0.0 {
        return true;
    }
    match history.last() {
        Some(&prev) if prev > 0.0 => (prev - res).abs() > tol * prev,
        Some(_) => false,
        None => true,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

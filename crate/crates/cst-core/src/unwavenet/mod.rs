//! Unrolled reconstruction network: T gradient-descent style iterations on
//! the image, each correcting with a learned wavelet-domain regularizer.
//!
//! One iteration computes `x - lambda_t * D(A x - y) + G_t(x)`, where `A`
//! is the scatter operator, `D` a fixed reconstruction operator (pseudo
//! inverse or scaled adjoint), `lambda_t` a learned scalar, and `G_t` a
//! small network: a convolution lifts the image to `c` channels, attention
//! refines the low-pass wavelet subband, the inverse wavelet transform
//! returns to image space, and a final convolution over the concatenated
//! features produces the correction. All weights are per-iteration.

mod checkpoint;
mod train;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, write_loss_csv, CheckpointMeta, CHECKPOINT_VERSION,
};
pub use train::{
    evaluate, evaluate_from, load_split, train, EpochStats, MetricsReport, MetricsRow, Sample,
    TrainConfig, TrainOutcome,
};

use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    init_swin_params, swin_block, AutodiffError, LinearOp, ParamSet, SwinVars, Tape, Tensor, Var,
};
use crate::operator::{OperatorError, SparseOperator};
use crate::scalar::Scalar;
use crate::simulate::SimulateError;
use crate::solvers::{DataTerm, SolverError};

#[derive(Debug, Error)]
pub enum UnwaveError {
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: usize },
    #[error("i/o failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad checkpoint {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("metadata serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
}

/// Architecture of the unrolled network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Unrolled iteration count.
    pub t: usize,
    /// Feature channels inside each regularizer block.
    pub c: usize,
    /// Attention window edge length.
    pub window: usize,
    /// Attention heads; must divide `c`.
    pub heads: usize,
    /// Image height and width (square, even).
    pub h: usize,
    pub w: usize,
}

impl NetConfig {
    /// Toy-scale defaults: 64x64 images, 4 iterations, 8 channels,
    /// window 8 on the 32x32 low-pass grid, 2 heads.
    pub fn toy() -> Self {
        Self { t: 4, c: 8, window: 8, heads: 2, h: 64, w: 64 }
    }

    pub fn validate(&self) -> Result<(), UnwaveError> {
        let bad = |msg: String| Err(UnwaveError::Config(msg));
        if self.t == 0 {
            return bad("iteration count must be at least 1".into());
        }
        if self.c == 0 || self.heads == 0 || self.c % self.heads != 0 {
            return bad(format!("{} heads must divide {} channels", self.heads, self.c));
        }
        if self.window == 0 {
            return bad("attention window must be at least 1".into());
        }
        if self.h != self.w {
            return bad(format!("image must be square, got {}x{}", self.h, self.w));
        }
        if self.h < 16 || self.h % 2 != 0 {
            return bad(format!("image side must be even and at least 16, got {}", self.h));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

const CONV_K: usize = 5;

/// The measurement operator paired with the fixed reconstruction operator
/// used in the data-consistency step, pre-wrapped for the tape.
pub struct SystemOps {
    pub a: Arc<SparseOperator>,
    pub d: Arc<DataTerm>,
    forward: Arc<dyn LinearOp>,
    data: Arc<dyn LinearOp>,
}

struct ForwardWrap(Arc<SparseOperator>);

impl LinearOp for ForwardWrap {
    fn input_len(&self) -> usize {
        self.0.n
    }
    fn output_len(&self) -> usize {
        self.0.m
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.0.apply(x).expect("input length checked by the tape")
    }
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        self.0.apply_adjoint(y).expect("input length checked by the tape")
    }
}

struct DataWrap {
    a: Arc<SparseOperator>,
    d: Arc<DataTerm>,
}

impl DataWrap {
    /// The iterative data terms can refuse non-finite input; reconstruction
    /// must still produce something for the loss to inspect, so failures
    /// surface as a non-finite image instead of a panic.
    fn or_nan(&self, r: Result<Vec<f64>, SolverError>, len: usize) -> Vec<f64> {
        r.unwrap_or_else(|_| vec![f64::NAN; len])
    }
}

impl LinearOp for DataWrap {
    fn input_len(&self) -> usize {
        self.a.m
    }
    fn output_len(&self) -> usize {
        self.a.n
    }
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        self.or_nan(self.d.apply(&self.a, r), self.a.n)
    }
    fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        self.or_nan(self.d.apply_transpose(&self.a, v), self.a.m)
    }
}

impl SystemOps {
    pub fn new(a: SparseOperator, d: DataTerm) -> Self {
        let a = Arc::new(a);
        let d = Arc::new(d);
        let forward: Arc<dyn LinearOp> = Arc::new(ForwardWrap(a.clone()));
        let data: Arc<dyn LinearOp> = Arc::new(DataWrap { a: a.clone(), d: d.clone() });
        Self { a, d, forward, data }
    }

    /// The default starting image: the data operator applied to the data.
    pub fn initial_image(&self, y: &[f64]) -> Result<Vec<f64>, UnwaveError> {
        Ok(self.d.apply(&self.a, y)?)
    }

    /// Short label describing the data operator, recorded in checkpoints.
    pub fn data_term_label(&self) -> String {
        match &*self.d {
            DataTerm::Adjoint { scale } => format!("adjoint:{scale}"),
            DataTerm::Pinv(_) => "pinv".to_string(),
            DataTerm::CglsSteps { steps, tau } => format!("cgls:{steps}:{tau}"),
        }
    }
}

/// Draws `values.len()` samples from `[-bound, bound)`.
fn uniform_fill<T: Scalar, R: Rng>(rng: &mut R, bound: f64, n: usize) -> Vec<T> {
    (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
}

fn conv_tensor<T: Scalar, R: Rng>(rng: &mut R, c_in: usize, c_out: usize) -> Tensor<T> {
    let fan_in = CONV_K * CONV_K * c_in;
    let fan_out = CONV_K * CONV_K * c_out;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let shape = vec![CONV_K, CONV_K, c_in, c_out];
    let n = shape.iter().product();
    Tensor::new(shape, uniform_fill(rng, bound, n)).expect("consistent shape")
}

/// Freshly initialized parameters for every iteration of the network:
/// per-iteration step scalars start at 0.1, convolutions draw from the
/// fan-balanced uniform range, attention weights from a narrow normal.
pub fn init_params<T: Scalar>(cfg: &NetConfig, seed: u64) -> Result<ParamSet<T>, UnwaveError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for t in 0..cfg.t {
        params.insert(
            &format!("iter{t}.lambda"),
            Tensor::new(vec![1], vec![T::from_f64(0.1)]).expect("consistent shape"),
        )?;
        params.insert(&format!("iter{t}.conv_in.kernel"), conv_tensor(&mut rng, 1, cfg.c))?;
        params.insert(
            &format!("iter{t}.conv_in.bias"),
            Tensor::zeros(vec![cfg.c]),
        )?;
        init_swin_params(&mut params, &format!("iter{t}.swin0"), cfg.c, &mut rng)?;
        init_swin_params(&mut params, &format!("iter{t}.swin1"), cfg.c, &mut rng)?;
        params.insert(
            &format!("iter{t}.conv_out.kernel"),
            conv_tensor(&mut rng, 2 * cfg.c, 1),
        )?;
        params.insert(&format!("iter{t}.conv_out.bias"), Tensor::zeros(vec![1]))?;
    }
    Ok(params)
}

/// Tape handles for one iteration's parameters.
struct IterVars {
    lambda: Var,
    conv_in_k: Var,
    conv_in_b: Var,
    swin0: SwinVars,
    swin1: SwinVars,
    conv_out_k: Var,
    conv_out_b: Var,
}

fn iter_vars<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    t: usize,
    named: &mut Vec<(String, Var)>,
) -> Result<IterVars, UnwaveError> {
    let leaf = |tape: &mut Tape<T>,
                named: &mut Vec<(String, Var)>,
                name: String|
     -> Result<Var, UnwaveError> {
        let var = tape.leaf_tensor(params.get(&name)?)?;
        named.push((name, var));
        Ok(var)
    };
    let lambda = leaf(tape, named, format!("iter{t}.lambda"))?;
    let conv_in_k = leaf(tape, named, format!("iter{t}.conv_in.kernel"))?;
    let conv_in_b = leaf(tape, named, format!("iter{t}.conv_in.bias"))?;
    let mut swins = Vec::with_capacity(2);
    for s in 0..2 {
        let prefix = format!("iter{t}.swin{s}");
        let vars = crate::autodiff::swin_vars(tape, params, &prefix)?;
        for (suffix, var) in vars.named_vars() {
            named.push((format!("{prefix}.{suffix}"), var));
        }
        swins.push(vars);
    }
    let conv_out_k = leaf(tape, named, format!("iter{t}.conv_out.kernel"))?;
    let conv_out_b = leaf(tape, named, format!("iter{t}.conv_out.bias"))?;
    let swin1 = swins.pop().expect("two blocks");
    let swin0 = swins.pop().expect("two blocks");
    Ok(IterVars { lambda, conv_in_k, conv_in_b, swin0, swin1, conv_out_k, conv_out_b })
}

/// Zero-pad map to the next window multiple and the matching crop map, or
/// `None` when the side already divides.
fn pad_crop_maps(side: usize, c: usize, window: usize) -> Option<(Vec<i64>, Vec<i64>, usize)> {
    if side % window == 0 {
        return None;
    }
    let padded = side.div_ceil(window) * window;
    let lo = (padded - side) / 2;
    let mut pad = Vec::with_capacity(padded * padded * c);
    for y in 0..padded {
        for x in 0..padded {
            for ch in 0..c {
                let (sy, sx) = (y as isize - lo as isize, x as isize - lo as isize);
                let inside =
                    sy >= 0 && sx >= 0 && (sy as usize) < side && (sx as usize) < side;
                pad.push(if inside {
                    ((sy as usize * side + sx as usize) * c + ch) as i64
                } else {
                    -1
                });
            }
        }
    }
    let mut crop = Vec::with_capacity(side * side * c);
    for y in 0..side {
        for x in 0..side {
            for ch in 0..c {
                crop.push((((y + lo) * padded + x + lo) * c + ch) as i64);
            }
        }
    }
    Some((pad, crop, padded))
}

/// Two attention blocks (plain, then shifted), zero-padding to a window
/// multiple first when needed.
fn attention_pair<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    iv: &IterVars,
    cfg: &NetConfig,
) -> Result<Var, UnwaveError> {
    let (side, c) = match tape.shape(x) {
        [h, w, c] if h == w => (*h, *c),
        other => return Err(UnwaveError::Shape(format!("attention input {other:?}"))),
    };
    let maps = pad_crop_maps(side, c, cfg.window);
    let padded_input = match &maps {
        Some((pad, _, padded)) => {
            tape.gather(x, Arc::new(pad.clone()), vec![*padded, *padded, c])?
        }
        None => x,
    };
    let a0 = swin_block(tape, padded_input, &iv.swin0, cfg.window, cfg.heads, false)?;
    let a1 = swin_block(tape, a0, &iv.swin1, cfg.window, cfg.heads, true)?;
    Ok(match &maps {
        Some((_, crop, _)) => tape.gather(a1, Arc::new(crop.clone()), vec![side, side, c])?,
        None => a1,
    })
}

/// The regularizer: lift to features, refine the low-pass subband with
/// attention (or the full-resolution map for the ablation variant), return
/// to image space, and fuse.
fn reg_block<T: Scalar>(
    tape: &mut Tape<T>,
    x_img: Var,
    iv: &IterVars,
    cfg: &NetConfig,
    full_res: bool,
) -> Result<Var, UnwaveError> {
    let z = tape.conv2d(x_img, iv.conv_in_k, iv.conv_in_b)?;
    let f = if full_res {
        attention_pair(tape, z, iv, cfg)?
    } else {
        let coeffs = tape.dwt2(z)?;
        let ll = tape.slice_last(coeffs, 0, cfg.c)?;
        let ll_refined = attention_pair(tape, ll, iv, cfg)?;
        let high = tape.slice_last(coeffs, cfg.c, 3 * cfg.c)?;
        let merged = tape.concat_last(ll_refined, high)?;
        tape.idwt2(merged)?
    };
    let fused = tape.concat_last(z, f)?;
    Ok(tape.conv2d(fused, iv.conv_out_k, iv.conv_out_b)?)
}

/// Everything a caller needs back from a constructed graph.
pub struct GraphHandles {
    /// Final image, flattened to `[h * w]`.
    pub output: Var,
    /// Mean-squared-error loss against the target, when one was given.
    pub loss: Option<Var>,
    /// Every parameter leaf with its parameter-set name.
    pub named: Vec<(String, Var)>,
}

/// Builds the full unrolled network on `tape`. `x0` defaults to `D(y)`;
/// a `target` adds an MSE loss node. Set `full_res` to bypass the wavelet
/// split and run attention at full resolution (the ablation variant).
#[allow(clippy::too_many_arguments)]
pub fn unrolled_graph<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &NetConfig,
    ops: &SystemOps,
    y: &[f64],
    x0: Option<&[f64]>,
    target: Option<&[f64]>,
    full_res: bool,
) -> Result<GraphHandles, UnwaveError> {
    cfg.validate()?;
    let n = cfg.pixels();
    if ops.a.n != n {
        return Err(UnwaveError::Shape(format!(
            "operator expects {} pixels, configuration has {n}",
            ops.a.n
        )));
    }
    if y.len() != ops.a.m {
        return Err(UnwaveError::Shape(format!(
            "sinogram length {} vs operator rows {}",
            y.len(),
            ops.a.m
        )));
    }
    let start = match x0 {
        Some(v) => {
            if v.len() != n {
                return Err(UnwaveError::Shape(format!(
                    "starting image length {} vs {n} pixels",
                    v.len()
                )));
            }
            v.to_vec()
        }
        None => ops.initial_image(y)?,
    };

    let to_t = |v: &[f64]| -> Vec<T> { v.iter().map(|&x| T::from_f64(x)).collect() };
    let y_leaf = tape.leaf(vec![ops.a.m], to_t(y), false)?;
    let mut x = tape.leaf(vec![n], to_t(&start), false)?;

    let mut named = Vec::new();
    for t in 0..cfg.t {
        let iv = iter_vars(tape, params, t, &mut named)?;
        let ax = tape.apply_linear_op(ops.forward.clone(), x)?;
        let residual = tape.sub(ax, y_leaf)?;
        let correction = tape.apply_linear_op(ops.data.clone(), residual)?;
        let scaled = tape.mul_scalar(correction, iv.lambda)?;
        let data_step = tape.sub(x, scaled)?;
        let x_img = tape.reshape(x, vec![cfg.h, cfg.w, 1])?;
        let g = reg_block(tape, x_img, &iv, cfg, full_res)?;
        let g_flat = tape.reshape(g, vec![n])?;
        x = tape.add(data_step, g_flat)?;
    }

    let loss = match target {
        Some(gt) => {
            if gt.len() != n {
                return Err(UnwaveError::Shape(format!(
                    "target length {} vs {n} pixels",
                    gt.len()
                )));
            }
            let t_leaf = tape.leaf(vec![n], to_t(gt), false)?;
            Some(tape.mse_loss(x, t_leaf)?)
        }
        None => None,
    };
    Ok(GraphHandles { output: x, loss, named })
}

/// Runs the full unrolled reconstruction and returns the image.
pub fn unrolled_forward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &NetConfig,
    ops: &SystemOps,
    y: &[f64],
    x0: Option<&[f64]>,
) -> Result<Vec<T>, UnwaveError> {
    let mut tape = Tape::new();
    let handles = unrolled_graph(&mut tape, params, cfg, ops, y, x0, None, false)?;
    Ok(tape.value(handles.output).to_vec())
}

/// One regularizer block forward pass on a flattened `h x w` image.
pub fn wave_reg_block<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &NetConfig,
    iteration: usize,
    x: &[T],
) -> Result<Vec<T>, UnwaveError> {
    reg_block_forward(params, cfg, iteration, x, false)
}

/// The efficiency-ablation variant: identical parameters, but attention
/// runs on the full-resolution feature map instead of the low-pass band.
pub fn ablation_fullres_variant<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &NetConfig,
    iteration: usize,
    x: &[T],
) -> Result<Vec<T>, UnwaveError> {
    reg_block_forward(params, cfg, iteration, x, true)
}

fn reg_block_forward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &NetConfig,
    iteration: usize,
    x: &[T],
    full_res: bool,
) -> Result<Vec<T>, UnwaveError> {
    cfg.validate()?;
    if iteration >= cfg.t {
        return Err(UnwaveError::Config(format!(
            "iteration {iteration} out of range for {} blocks",
            cfg.t
        )));
    }
    if x.len() != cfg.pixels() {
        return Err(UnwaveError::Shape(format!(
            "image length {} vs {} pixels",
            x.len(),
            cfg.pixels()
        )));
    }
    let mut tape = Tape::new();
    let mut named = Vec::new();
    let iv = iter_vars(&mut tape, params, iteration, &mut named)?;
    let x_var = tape.leaf(vec![cfg.h, cfg.w, 1], x.to_vec(), false)?;
    let out = reg_block(&mut tape, x_var, &iv, cfg, full_res)?;
    Ok(tape.value(out).to_vec())
}

//! Window-attention transformer block on channels-last feature maps.
//!
//! The block is pre-norm: `x + Attn(LN(x))` followed by `x + MLP(LN(x))`.
//! Attention runs independently inside square windows; the shifted variant
//! rolls the map by half a window first so successive blocks mix across
//! window borders. Rolled-in tokens simply attend together with their new
//! window; there is no masking and no positional bias term.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::optim::ParamSet;
use super::tape::{Tape, Var};
use super::{AutodiffError, Tensor};
use crate::scalar::Scalar;

/// Tape handles for the sixteen tensors of one block, in forward order.
#[derive(Debug, Clone, Copy)]
pub struct SwinVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Parameter name suffixes used by [`init_swin_params`] and [`swin_vars`].
const SWIN_SUFFIXES: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

impl SwinVars {
    /// Handles paired with their parameter-name suffixes, in the same order
    /// as [`init_swin_params`] inserts them.
    pub fn named_vars(&self) -> [(&'static str, Var); 16] {
        [
            (SWIN_SUFFIXES[0], self.ln1_gain),
            (SWIN_SUFFIXES[1], self.ln1_bias),
            (SWIN_SUFFIXES[2], self.wq),
            (SWIN_SUFFIXES[3], self.bq),
            (SWIN_SUFFIXES[4], self.wk),
            (SWIN_SUFFIXES[5], self.bk),
            (SWIN_SUFFIXES[6], self.wv),
            (SWIN_SUFFIXES[7], self.bv),
            (SWIN_SUFFIXES[8], self.wo),
            (SWIN_SUFFIXES[9], self.bo),
            (SWIN_SUFFIXES[10], self.ln2_gain),
            (SWIN_SUFFIXES[11], self.ln2_bias),
            (SWIN_SUFFIXES[12], self.w1),
            (SWIN_SUFFIXES[13], self.b1),
            (SWIN_SUFFIXES[14], self.w2),
            (SWIN_SUFFIXES[15], self.b2),
        ]
    }
}

/// Registers freshly initialized block parameters under `prefix`.
///
/// Normalization gains start at one and biases at zero; attention and MLP
/// weights draw from a centered normal with deviation 0.02; the MLP hidden
/// width is four channels per channel.
pub fn init_swin_params<T: Scalar, R: Rng>(
    params: &mut ParamSet<T>,
    prefix: &str,
    c: usize,
    rng: &mut R,
) -> Result<(), AutodiffError> {
    let hidden = 4 * c;
    let normal = Normal::new(0.0, 0.02).expect("valid deviation");
    let dense = |shape: Vec<usize>, rng: &mut R| -> Tensor<T> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
        let mut t = Tensor::new(shape, values).expect("consistent shape");
        t.requires_grad = true;
        t
    };
    let trainable = |shape: Vec<usize>, fill: f64| -> Tensor<T> {
        let n: usize = shape.iter().product();
        let mut t = Tensor::new(shape, vec![T::from_f64(fill); n]).expect("consistent shape");
        t.requires_grad = true;
        t
    };

    let tensors: [Tensor<T>; 16] = [
        trainable(vec![c], 1.0),
        trainable(vec![c], 0.0),
        dense(vec![c, c], rng),
        trainable(vec![c], 0.0),
        dense(vec![c, c], rng),
        trainable(vec![c], 0.0),
        dense(vec![c, c], rng),
        trainable(vec![c], 0.0),
        dense(vec![c, c], rng),
        trainable(vec![c], 0.0),
        trainable(vec![c], 1.0),
        trainable(vec![c], 0.0),
        dense(vec![c, hidden], rng),
        trainable(vec![hidden], 0.0),
        dense(vec![hidden, c], rng),
        trainable(vec![c], 0.0),
    ];
    for (suffix, tensor) in SWIN_SUFFIXES.iter().zip(tensors) {
        params.insert(&format!("{prefix}.{suffix}"), tensor)?;
    }
    Ok(())
}

/// Puts the sixteen parameters registered under `prefix` onto the tape.
pub fn swin_vars<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<SwinVars, AutodiffError> {
    let mut vars = Vec::with_capacity(16);
    for suffix in SWIN_SUFFIXES {
        vars.push(tape.leaf_tensor(params.get(&format!("{prefix}.{suffix}"))?)?);
    }
    let [ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_bias, w1, b1, w2, b2]: [Var; 16] = vars.try_into().expect("sixteen parameters");
    Ok(SwinVars {
        ln1_gain,
        ln1_bias,
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
        ln2_gain,
        ln2_bias,
        w1,
        b1,
        w2,
        b2,
    })
}

/// One transformer block over an `[h, w, c]` map with `window`-sized
/// attention neighborhoods split across `heads`. A shifted block rolls the
/// map by half a window before partitioning and rolls back after.
#[allow(clippy::too_many_arguments)]
pub fn swin_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &SwinVars,
    window: usize,
    heads: usize,
    shifted: bool,
) -> Result<Var, AutodiffError> {
    let (h, w, c) = match tape.shape(x) {
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(AutodiffError::Shape(format!(
                "attention block input must be [h, w, c], got {other:?}"
            )))
        }
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(AutodiffError::Shape(format!(
            "window {window} must divide the {h}x{w} map"
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(AutodiffError::Shape(format!(
            "{heads} heads must divide {c} channels"
        )));
    }
    let hd = c / heads;
    let n_tok = window * window;
    let n_win = (h / window) * (w / window);
    let shift = if shifted { window / 2 } else { 0 };

    let ln1 = tape.layer_norm(x, vars.ln1_gain, vars.ln1_bias)?;
    let rolled = if shift > 0 {
        let map = cyclic_shift_map(h, w, c, shift as isize, shift as isize);
        tape.gather(ln1, Arc::new(map), vec![h, w, c])?
    } else {
        ln1
    };
    let part_map = Arc::new(window_partition_map(h, w, c, window));
    let windows = tape.gather(rolled, part_map, vec![n_win, n_tok, c])?;

    let q = tape.linear(windows, vars.wq, vars.bq)?;
    let k = tape.linear(windows, vars.wk, vars.bk)?;
    let v = tape.linear(windows, vars.wv, vars.bv)?;
    let split = Arc::new(head_split_map(n_win, n_tok, heads, hd));
    let head_shape = vec![n_win * heads, n_tok, hd];
    let qh = tape.gather(q, split.clone(), head_shape.clone())?;
    let kh = tape.gather(k, split.clone(), head_shape.clone())?;
    let vh = tape.gather(v, split, head_shape)?;

    let scores = tape.bmm(qh, kh, false, true)?;
    let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
    let soft = tape.softmax(scaled)?;
    let ctx = tape.bmm(soft, vh, false, false)?;
    let merge = Arc::new(head_merge_map(n_win, n_tok, heads, hd));
    let merged = tape.gather(ctx, merge, vec![n_win, n_tok, c])?;
    let proj = tape.linear(merged, vars.wo, vars.bo)?;

    let unpart = Arc::new(window_merge_map(h, w, c, window));
    let spatial = tape.gather(proj, unpart, vec![h, w, c])?;
    let attn_out = if shift > 0 {
        let map = cyclic_shift_map(h, w, c, -(shift as isize), -(shift as isize));
        tape.gather(spatial, Arc::new(map), vec![h, w, c])?
    } else {
        spatial
    };
    let x1 = tape.add(x, attn_out)?;

    let ln2 = tape.layer_norm(x1, vars.ln2_gain, vars.ln2_bias)?;
    let hidden = tape.linear(ln2, vars.w1, vars.b1)?;
    let act = tape.gelu(hidden)?;
    let mlp = tape.linear(act, vars.w2, vars.b2)?;
    tape.add(x1, mlp)
}

/// Roll by `(dy, dx)`: output position `(y, x)` reads `(y + dy, x + dx)`
/// modulo the map size.
fn cyclic_shift_map(h: usize, w: usize, c: usize, dy: isize, dx: isize) -> Vec<i64> {
    let mut map = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let sx = (x as isize + dx).rem_euclid(w as isize) as usize;
            for ch in 0..c {
                map.push(((sy * w + sx) * c + ch) as i64);
            }
        }
    }
    map
}

/// `[h, w, c]` to `[n_win, window * window, c]`, windows in row-major order.
fn window_partition_map(h: usize, w: usize, c: usize, window: usize) -> Vec<i64> {
    let mut map = Vec::with_capacity(h * w * c);
    for wy in 0..h / window {
        for wx in 0..w / window {
            for ty in 0..window {
                for tx in 0..window {
                    let (y, x) = (wy * window + ty, wx * window + tx);
                    for ch in 0..c {
                        map.push(((y * w + x) * c + ch) as i64);
                    }
                }
            }
        }
    }
    map
}

/// Inverse of [`window_partition_map`].
fn window_merge_map(h: usize, w: usize, c: usize, window: usize) -> Vec<i64> {
    let wins_x = w / window;
    let n_tok = window * window;
    let mut map = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let wi = (y / window) * wins_x + x / window;
            let t = (y % window) * window + x % window;
            for ch in 0..c {
                map.push(((wi * n_tok + t) * c + ch) as i64);
            }
        }
    }
    map
}

/// `[n_win, n_tok, heads * hd]` to `[n_win * heads, n_tok, hd]`.
fn head_split_map(n_win: usize, n_tok: usize, heads: usize, hd: usize) -> Vec<i64> {
    let c = heads * hd;
    let mut map = Vec::with_capacity(n_win * n_tok * c);
    for wi in 0..n_win {
        for hh in 0..heads {
            for t in 0..n_tok {
                for d in 0..hd {
                    map.push(((wi * n_tok + t) * c + hh * hd + d) as i64);
                }
            }
        }
    }
    map
}

/// Inverse of [`head_split_map`].
fn head_merge_map(n_win: usize, n_tok: usize, heads: usize, hd: usize) -> Vec<i64> {
    let mut map = Vec::with_capacity(n_win * n_tok * heads * hd);
    for wi in 0..n_win {
        for t in 0..n_tok {
            for hh in 0..heads {
                for d in 0..hd {
                    map.push((((wi * heads + hh) * n_tok + t) * hd + d) as i64);
                }
            }
        }
    }
    map
}

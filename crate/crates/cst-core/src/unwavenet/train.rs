//! Training and evaluation loops for the unrolled network.
//!
//! Training follows one sample at a time (batch size 1) in a seeded
//! per-epoch shuffle, so a fixed seed reproduces the run bit for bit.
//! The reported epoch loss is summed in sample-index order, which keeps
//! the number independent of the visiting order.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    init_params, save_checkpoint, unrolled_forward, unrolled_graph, CheckpointMeta, NetConfig,
    SystemOps, UnwaveError,
};
use crate::autodiff::{adamw_step, AdamW, OptimizerState, ParamSet, Tape};
use crate::parallel::indexed_map;
use crate::simulate::{psnr, read_image, read_sinogram, ssim, Manifest};

/// One ground-truth image with its measured sinogram, both flattened.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Vec<f64>,
    pub sino: Vec<f64>,
}

/// Loads every sample of a dataset role ("train" or "val"). When the
/// manifest lists noisy sinograms and `use_noisy` is set, those are read;
/// otherwise the clean ones.
pub fn load_split(
    dir: &Path,
    manifest: &Manifest,
    role: &str,
    use_noisy: bool,
) -> Result<Vec<Sample>, UnwaveError> {
    let mut out = Vec::new();
    for entry in manifest.samples.iter().filter(|s| s.role == role) {
        let (h, w, image) = read_image(&dir.join(&entry.image))?;
        if (h, w) != (manifest.h, manifest.w) {
            return Err(UnwaveError::Shape(format!(
                "{}: image is {h}x{w}, manifest says {}x{}",
                entry.image, manifest.h, manifest.w
            )));
        }
        let sino_name = match (&entry.noisy, use_noisy) {
            (Some(name), true) => name,
            _ => &entry.clean,
        };
        let (k, n_e, sino) = read_sinogram(&dir.join(sino_name))?;
        if (k, n_e) != (manifest.k, manifest.n_e) {
            return Err(UnwaveError::Shape(format!(
                "{sino_name}: sinogram is {k}x{n_e}, manifest says {}x{}",
                manifest.k, manifest.n_e
            )));
        }
        out.push(Sample { image, sino });
    }
    Ok(out)
}

/// Optimization schedule. The learning rate drops by 10x once 80% of the
/// planned epochs have run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Where to dump a diagnostic checkpoint if the loss goes non-finite.
    pub diagnostic_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-4, weight_decay: 1e-2, seed: 0, diagnostic_path: None }
    }
}

/// One line of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Weights, optimizer state, and loss history after (part of) a run;
/// feed it back to `train` to continue.
pub struct TrainOutcome {
    pub params: ParamSet<f32>,
    pub state: OptimizerState,
    pub history: Vec<EpochStats>,
}

/// Trains the network with per-sample MSE and AdamW until `tcfg.epochs`
/// epochs exist in the history. Passing a previous `TrainOutcome` resumes;
/// a non-finite loss aborts after writing the diagnostic checkpoint (when
/// a path is configured).
pub fn train(
    cfg: &NetConfig,
    ops: &SystemOps,
    samples: &[Sample],
    tcfg: &TrainConfig,
    start: Option<TrainOutcome>,
) -> Result<TrainOutcome, UnwaveError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(UnwaveError::Config("training needs at least one sample".into()));
    }
    let n = cfg.pixels();
    for (i, s) in samples.iter().enumerate() {
        if s.image.len() != n || s.sino.len() != ops.a.m {
            return Err(UnwaveError::Shape(format!(
                "sample {i}: image {} and sinogram {} vs {} pixels and {} rows",
                s.image.len(),
                s.sino.len(),
                n,
                ops.a.m
            )));
        }
    }

    let (mut params, mut state, mut history) = match start {
        Some(prev) => (prev.params, prev.state, prev.history),
        None => {
            let p = init_params::<f32>(cfg, tcfg.seed)?;
            let s = OptimizerState::new(&p);
            (p, s, Vec::new())
        }
    };

    let decay_from = tcfg.epochs * 4 / 5;
    let mut losses = vec![0.0f64; samples.len()];
    while history.len() < tcfg.epochs {
        let epoch = history.len();
        let lr = if epoch >= decay_from { tcfg.lr * 0.1 } else { tcfg.lr };
        let opt_cfg = AdamW { lr, weight_decay: tcfg.weight_decay, ..AdamW::default() };

        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        // One stream per epoch: a resumed run shuffles epoch e exactly as
        // an uninterrupted run would.
        rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut rng);

        for &idx in &order {
            let sample = &samples[idx];
            let mut tape = Tape::<f32>::new();
            let handles = unrolled_graph(
                &mut tape,
                &params,
                cfg,
                ops,
                &sample.sino,
                None,
                Some(&sample.image),
                false,
            )?;
            let loss_var = handles.loss.expect("target supplied");
            let loss = tape.value(loss_var)[0] as f64;
            if !loss.is_finite() {
                if let Some(path) = &tcfg.diagnostic_path {
                    let meta = CheckpointMeta {
                        net: cfg.clone(),
                        data_term: ops.data_term_label(),
                        epoch,
                        seed: tcfg.seed,
                        loss_history: history.clone(),
                        optimizer_step: state.step_count(),
                    };
                    save_checkpoint(path, &meta, &params, Some(&state))?;
                }
                return Err(UnwaveError::NonFiniteLoss { epoch, sample: idx });
            }
            losses[idx] = loss;
            tape.backward(loss_var)?;
            params.zero_grads();
            for (name, var) in &handles.named {
                if let Some(g) = tape.grad(*var) {
                    params.get_mut(name)?.accumulate_grad(g)?;
                }
            }
            adamw_step(&mut params, &mut state, &opt_cfg)?;
        }

        let mean_loss = losses.iter().sum::<f64>() / samples.len() as f64;
        history.push(EpochStats { epoch, mean_loss, lr });
    }
    Ok(TrainOutcome { params, state, history })
}

/// Reconstruction quality of one sample, plus how long it took.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub sample: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Reconstructs every sample with the network and scores it against the
/// ground truth on the unit data range. Samples run in parallel; the rows
/// come back in sample order either way.
pub fn evaluate(
    params: &ParamSet<f32>,
    cfg: &NetConfig,
    ops: &SystemOps,
    samples: &[Sample],
) -> Result<MetricsReport, UnwaveError> {
    evaluate_from(params, cfg, ops, samples, None)
}

/// As `evaluate`, but starting each reconstruction from a caller-supplied
/// image instead of the data operator's.
pub fn evaluate_from(
    params: &ParamSet<f32>,
    cfg: &NetConfig,
    ops: &SystemOps,
    samples: &[Sample],
    starts: Option<&[Vec<f64>]>,
) -> Result<MetricsReport, UnwaveError> {
    if samples.is_empty() {
        return Err(UnwaveError::Config("evaluation needs at least one sample".into()));
    }
    if let Some(s) = starts {
        if s.len() != samples.len() {
            return Err(UnwaveError::Shape(format!(
                "{} starting images for {} samples",
                s.len(),
                samples.len()
            )));
        }
    }
    let results: Vec<Result<MetricsRow, UnwaveError>> =
        indexed_map(samples.len(), |i| {
            let sample = &samples[i];
            let x0 = starts.map(|s| s[i].as_slice());
            let t0 = Instant::now();
            let out = unrolled_forward(params, cfg, ops, &sample.sino, x0)?;
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            let image: Vec<f64> = out.iter().map(|&v| v as f64).collect();
            let psnr_db = psnr(&image, &sample.image, 1.0)?;
            let ssim_val = ssim(&image, &sample.image, cfg.h, cfg.w, 1.0)?;
            Ok(MetricsRow { sample: i, psnr_db, ssim: ssim_val, wall_ms })
        });
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }
    let inv = 1.0 / rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.psnr_db).sum::<f64>() * inv;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() * inv;
    Ok(MetricsReport { rows, mean_psnr, mean_ssim })
}

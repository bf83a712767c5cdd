//! Checkpoint files and the loss-history CSV.
//!
//! Layout: magic `UWNC`, format version, a length-prefixed JSON metadata
//! block, then a flat list of named tensors (name length and bytes, rank,
//! extents, 32-bit little-endian values). Optimizer moments ride along as
//! extra tensors under `opt.m.` / `opt.v.` prefixes so resumption needs no
//! second file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochStats, NetConfig, UnwaveError};
use crate::autodiff::{OptimizerState, ParamSet, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: [u8; 4] = *b"UWNC";

/// Everything about a training run that is not a weight: the architecture,
/// which fixed data operator the network was trained against, and the
/// reproducibility trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    pub data_term: String,
    pub epoch: usize,
    pub seed: u64,
    pub loss_history: Vec<EpochStats>,
    pub optimizer_step: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> UnwaveError + '_ {
    move |source| UnwaveError::Io { path: path.to_path_buf(), source }
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes metadata, parameters, and (optionally) optimizer moments,
/// then renames a finished temporary file over `path` so readers never see
/// a half-written checkpoint.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ParamSet<f32>,
    optimizer: Option<&OptimizerState>,
) -> Result<(), UnwaveError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);

    let count = params.len() * if optimizer.is_some() { 3 } else { 1 };
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in params.iter() {
        push_tensor(&mut buf, name, &t.shape, &t.values);
    }
    if let Some(state) = optimizer {
        let (first, second) = state.moments();
        if first.len() != params.len() {
            return Err(UnwaveError::Shape(format!(
                "optimizer tracks {} parameters, set has {}",
                first.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            let narrow = |xs: &[f64]| xs.iter().map(|&v| v as f32).collect::<Vec<_>>();
            push_tensor(&mut buf, &format!("opt.m.{name}"), &t.shape, &narrow(&first[i]));
            push_tensor(&mut buf, &format!("opt.v.{name}"), &t.shape, &narrow(&second[i]));
        }
    }

    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let stem = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp = dir.join(format!("{stem}.tmp"));
    fs::write(&tmp, &buf).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let slice = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(slice)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
    }
}

/// Reads a checkpoint back; the optimizer state is `None` when the file
/// carries no moment tensors.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(CheckpointMeta, ParamSet<f32>, Option<OptimizerState>), UnwaveError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let fail = |reason: String| UnwaveError::Format { path: path.to_path_buf(), reason };
    let mut cur = Cursor { bytes: &bytes, at: 0 };

    if cur.take(4) != Some(&MAGIC) {
        return Err(fail("missing UWNC magic".into()));
    }
    let version = cur.u32().ok_or_else(|| fail("truncated header".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let json_len = cur.u32().ok_or_else(|| fail("truncated header".into()))? as usize;
    let json = cur.take(json_len).ok_or_else(|| fail("truncated metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(json)?;
    let count = cur.u32().ok_or_else(|| fail("missing tensor count".into()))?;

    let mut params = ParamSet::new();
    let mut moments_m: Vec<(String, Vec<f64>)> = Vec::new();
    let mut moments_v: Vec<(String, Vec<f64>)> = Vec::new();
    for _ in 0..count {
        let name_len = cur.u32().ok_or_else(|| fail("truncated tensor header".into()))?;
        let name_bytes =
            cur.take(name_len as usize).ok_or_else(|| fail("truncated tensor name".into()))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| fail("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32().ok_or_else(|| fail("truncated tensor header".into()))?;
        if rank > 8 {
            return Err(fail(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(
                cur.u32().ok_or_else(|| fail("truncated tensor extents".into()))? as usize,
            );
        }
        let n: usize = shape.iter().product();
        let raw = cur
            .take(4 * n)
            .ok_or_else(|| fail(format!("truncated values for {name}")))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect();
        let widen = || values.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        if let Some(rest) = name.strip_prefix("opt.m.") {
            moments_m.push((rest.to_string(), widen()));
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            moments_v.push((rest.to_string(), widen()));
        } else {
            let tensor = Tensor::new(shape, values)
                .map_err(|e| fail(format!("tensor {name}: {e}")))?;
            params.insert(&name, tensor)?;
        }
    }
    if cur.at != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - cur.at)));
    }

    let optimizer = if moments_m.is_empty() && moments_v.is_empty() {
        None
    } else {
        let mut first = Vec::with_capacity(params.len());
        let mut second = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let pick = |pool: &[(String, Vec<f64>)], kind: &str| {
                pool.iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, v)| v.clone())
                    .ok_or_else(|| fail(format!("no {kind} moment for {name}")))
            };
            let m = pick(&moments_m, "first")?;
            let v = pick(&moments_v, "second")?;
            if m.len() != t.len() || v.len() != t.len() {
                return Err(fail(format!("moment length mismatch for {name}")));
            }
            first.push(m);
            second.push(v);
        }
        if moments_m.len() != params.len() || moments_v.len() != params.len() {
            return Err(fail("stray optimizer tensors".into()));
        }
        Some(OptimizerState::from_parts(meta.optimizer_step, first, second))
    };
    Ok((meta, params, optimizer))
}

/// Exports a loss history as `epoch,mean_loss,lr` rows.
pub fn write_loss_csv(path: &Path, history: &[EpochStats]) -> Result<(), UnwaveError> {
    let mut text = String::from("epoch,mean_loss,lr\n");
    for row in history {
        text.push_str(&format!("{},{},{}\n", row.epoch, row.mean_loss, row.lr));
    }
    fs::write(path, text).map_err(io_err(path))
}

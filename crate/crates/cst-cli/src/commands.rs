//! The five subcommands. Each one loads a validated configuration,
//! persists the resolved copy plus its hash into the output directory,
//! and produces its artifacts there.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cst_core::autodiff::Tape;
use cst_core::operator::{op_norm, pinv_dense};
use cst_core::simulate::{
    build_dataset, dataset_phantom, operator_fingerprint, psnr, read_image, read_manifest,
    read_sinogram, ssim, write_image, write_pgm16, Manifest, NoiseSpec, MANIFEST_NAME,
};
use cst_core::solvers::{
    chambolle_pock_tv, gradient_descent_recon, kaczmarz, tsvd_reconstruct, DataTerm,
    SolverConfig,
};
use cst_core::unwavenet::{
    ablation_fullres_variant, evaluate, init_params, load_checkpoint, load_split,
    save_checkpoint, train, unrolled_forward, unrolled_graph, wave_reg_block, CheckpointMeta,
    NetConfig, SystemOps, TrainConfig, TrainOutcome,
};

use crate::config::{config_hash, persist_resolved, RunConfig};
use crate::error::{io_ctx, CliError};
use crate::system::{
    build_system, data_term_for_training, data_term_from_label, net_config, System,
};

/// Reconstruction methods exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    /// Dense Tikhonov pseudo-inverse.
    Pinv,
    /// Truncated singular value decomposition.
    Tsvd,
    /// Kaczmarz row-action iteration.
    Art,
    /// Chambolle-Pock total variation.
    Tv,
    /// Plain gradient descent on the data term.
    Gd,
    /// The trained unrolled network (needs --checkpoint).
    Unwavenet,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Pinv => "pinv",
            Method::Tsvd => "tsvd",
            Method::Art => "art",
            Method::Tv => "tv",
            Method::Gd => "gd",
            Method::Unwavenet => "unwavenet",
        }
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    persist_resolved(cfg)?;
    let sys = build_system(cfg)?;
    let noise = cfg.noise.as_ref().map(|n| NoiseSpec {
        poisson_intensity: n.poisson_intensity,
        gaussian_fraction: n.gaussian_fraction,
        seed: cfg.seed,
    });
    let out = cfg.output_dir.join("dataset");
    let manifest = build_dataset(
        &sys.a,
        &sys.img,
        sys.geom.k,
        sys.energies.n_e,
        cfg.dataset.n_train,
        cfg.dataset.n_val,
        cfg.seed,
        noise.as_ref(),
        &out,
    )?;
    println!(
        "dataset: {} training and {} validation samples in {}",
        manifest.n_train,
        manifest.n_val,
        out.display()
    );
    Ok(())
}

pub fn cmd_reconstruct(
    cfg: &RunConfig,
    method: Method,
    input: &Path,
    checkpoint: Option<&Path>,
    ground_truth: Option<&Path>,
) -> Result<(), CliError> {
    persist_resolved(cfg)?;
    let sys = build_system(cfg)?;
    let (k, n_e, y) = read_sinogram(input)?;
    if (k, n_e) != (sys.geom.k, sys.energies.n_e) {
        return Err(CliError::Incompatible(format!(
            "sinogram {} is {k} x {n_e}, the configured geometry measures {} x {}",
            input.display(),
            sys.geom.k,
            sys.energies.n_e
        )));
    }

    let scfg = SolverConfig {
        max_iters: cfg.solver.max_iters,
        lambda: cfg.solver.lambda,
        step: cfg.solver.step,
        tau: cfg.solver.tau,
        tol: cfg.solver.tol,
    };
    let t0 = Instant::now();
    let image: Vec<f64> = match method {
        Method::Pinv => pinv_dense(&sys.a, cfg.solver.tau)?.apply(&y)?,
        Method::Tsvd => tsvd_reconstruct(&sys.a, &y, cfg.solver.rank)?,
        Method::Art => {
            kaczmarz(&sys.a, &y, cfg.solver.relaxation, cfg.solver.sweeps)?.image
        }
        Method::Tv => chambolle_pock_tv(&sys.a, &y, &scfg)?.image,
        Method::Gd => {
            let norm = op_norm(&sys.a, 50);
            let d = DataTerm::Adjoint { scale: 1.0 / (norm * norm) };
            gradient_descent_recon(&sys.a, &d, &y, &scfg, None, None)?.image
        }
        Method::Unwavenet => {
            let path = checkpoint.ok_or_else(|| {
                CliError::Config("--checkpoint is required for --method unwavenet".into())
            })?;
            let (meta, params, _) = load_checkpoint(path)?;
            if (meta.net.h, meta.net.w) != (sys.img.h, sys.img.w) {
                return Err(CliError::Incompatible(format!(
                    "checkpoint reconstructs {} x {}, config image is {} x {}",
                    meta.net.h, meta.net.w, sys.img.h, sys.img.w
                )));
            }
            let d = data_term_from_label(&meta.data_term, &sys.a, cfg.solver.tau)?;
            let ops = SystemOps::new(sys.a.clone(), d);
            let out = unrolled_forward(&params, &meta.net, &ops, &y, None)?;
            out.iter().map(|&v| v as f64).collect()
        }
    };
    let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    if !image.iter().all(|v| v.is_finite()) {
        return Err(CliError::Numeric(format!(
            "{} reconstruction produced non-finite pixels",
            method.name()
        )));
    }

    let dir = cfg.output_dir.join("recon");
    fs::create_dir_all(&dir).map_err(io_ctx(&dir))?;
    let raw = dir.join(format!("{}.img", method.name()));
    let pgm = dir.join(format!("{}.pgm", method.name()));
    write_image(&raw, sys.img.h, sys.img.w, &image)?;
    write_pgm16(&pgm, sys.img.h, sys.img.w, &image, 1.0)?;
    println!("wrote {} and {} ({:.1} ms)", raw.display(), pgm.display(), wall_ms);

    if let Some(gt_path) = ground_truth {
        let (gh, gw, gt) = read_image(gt_path)?;
        if (gh, gw) != (sys.img.h, sys.img.w) {
            return Err(CliError::Incompatible(format!(
                "ground truth is {gh} x {gw}, config image is {} x {}",
                sys.img.h, sys.img.w
            )));
        }
        let p = psnr(&image, &gt, 1.0)?;
        let s = ssim(&image, &gt, gh, gw, 1.0)?;
        let sample_id = input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("sample")
            .to_string();
        let csv = dir.join(format!("{}_metrics.csv", method.name()));
        write_metrics_csv(&csv, &[(sample_id, p, s, wall_ms)])?;
        println!("psnr {p:.2} dB, ssim {s:.4}; metrics in {}", csv.display());
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    persist_resolved(cfg)?;
    let net = net_config(cfg)?;
    let dataset_dir = cfg.output_dir.join("dataset");
    let manifest = read_manifest_checked(&dataset_dir)?;
    let sys = build_system(cfg)?;
    check_manifest(&manifest, &sys)?;
    if (manifest.h, manifest.w) != (net.h, net.w) {
        return Err(CliError::Incompatible(format!(
            "dataset images are {} x {}, network expects {} x {}",
            manifest.h, manifest.w, net.h, net.w
        )));
    }

    let train_dir = cfg.output_dir.join("train");
    fs::create_dir_all(&train_dir).map_err(io_ctx(&train_dir))?;
    let start = match resume {
        Some(path) => {
            let (meta, params, opt) = load_checkpoint(path)?;
            if meta.net != net {
                return Err(CliError::Incompatible(format!(
                    "checkpoint architecture {:?} differs from the configured {:?}",
                    meta.net, net
                )));
            }
            let state = opt.ok_or_else(|| {
                CliError::Incompatible(format!(
                    "{} carries no optimizer state; cannot resume",
                    path.display()
                ))
            })?;
            println!(
                "resuming from {} at epoch {}",
                path.display(),
                meta.loss_history.len()
            );
            Some(TrainOutcome { params, state, history: meta.loss_history })
        }
        None => None,
    };

    let d = data_term_for_training(cfg, &sys.a)?;
    let ops = SystemOps::new(sys.a.clone(), d);
    let samples = load_split(&dataset_dir, &manifest, "train", true)?;
    if samples.is_empty() {
        return Err(CliError::Config("dataset has no training samples".into()));
    }
    let tcfg = TrainConfig {
        epochs: cfg.network.epochs,
        lr: cfg.network.lr,
        weight_decay: cfg.network.weight_decay,
        seed: cfg.seed,
        diagnostic_path: Some(train_dir.join("diagnostic.uwnc")),
    };
    let outcome = train(&net, &ops, &samples, &tcfg, start)?;

    for row in &outcome.history {
        println!(
            "epoch {:>3}: mean loss {:.6e}, lr {:.1e}",
            row.epoch, row.mean_loss, row.lr
        );
    }
    let meta = CheckpointMeta {
        net,
        data_term: ops.data_term_label(),
        epoch: outcome.history.len(),
        seed: cfg.seed,
        loss_history: outcome.history.clone(),
        optimizer_step: outcome.state.step_count(),
    };
    let ckpt = train_dir.join("model.uwnc");
    save_checkpoint(&ckpt, &meta, &outcome.params, Some(&outcome.state))?;
    let loss_csv = train_dir.join("loss.csv");
    cst_core::unwavenet::write_loss_csv(&loss_csv, &outcome.history)?;
    println!("checkpoint at {}, loss history at {}", ckpt.display(), loss_csv.display());
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<(), CliError> {
    persist_resolved(cfg)?;
    let (meta, params, _) = load_checkpoint(checkpoint)?;
    let sys = build_system(cfg)?;
    if (meta.net.h, meta.net.w) != (sys.img.h, sys.img.w) {
        return Err(CliError::Incompatible(format!(
            "checkpoint reconstructs {} x {}, config image is {} x {}",
            meta.net.h, meta.net.w, sys.img.h, sys.img.w
        )));
    }
    let dataset_dir = cfg.output_dir.join("dataset");
    let manifest = read_manifest_checked(&dataset_dir)?;
    check_manifest(&manifest, &sys)?;
    let samples = load_split(&dataset_dir, &manifest, split, true)?;
    if samples.is_empty() {
        return Err(CliError::Config(format!("split {split} has no samples")));
    }

    let d = data_term_from_label(&meta.data_term, &sys.a, cfg.solver.tau)?;
    let ops = SystemOps::new(sys.a.clone(), d);
    let report = evaluate(&params, &meta.net, &ops, &samples)?;

    let eval_dir = cfg.output_dir.join("eval");
    fs::create_dir_all(&eval_dir).map_err(io_ctx(&eval_dir))?;
    let rows: Vec<(String, f64, f64, f64)> = report
        .rows
        .iter()
        .map(|r| (format!("{split}_{:04}", r.sample), r.psnr_db, r.ssim, r.wall_ms))
        .collect();
    let csv = eval_dir.join("metrics.csv");
    write_metrics_csv(&csv, &rows)?;

    #[derive(serde::Serialize)]
    struct Summary<'a> {
        split: &'a str,
        samples: usize,
        mean_psnr_db: f64,
        mean_ssim: f64,
        total_wall_ms: f64,
        config_hash: String,
    }
    let summary = Summary {
        split,
        samples: report.rows.len(),
        mean_psnr_db: report.mean_psnr,
        mean_ssim: report.mean_ssim,
        total_wall_ms: report.rows.iter().map(|r| r.wall_ms).sum(),
        config_hash: config_hash(cfg),
    };
    let summary_path = eval_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(&summary_path, format!("{text}\n")).map_err(io_ctx(&summary_path))?;
    println!(
        "mean psnr {:.2} dB, mean ssim {:.4} over {} samples; table in {}",
        report.mean_psnr,
        report.mean_ssim,
        report.rows.len(),
        csv.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Variant {
    Ll,
    Fullres,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::Ll => "ll",
            Variant::Fullres => "fullres",
        }
    }
}

pub fn cmd_bench(
    cfg: &RunConfig,
    variants: &str,
    sizes: &str,
    t_sweep: &[PathBuf],
) -> Result<(), CliError> {
    persist_resolved(cfg)?;
    let bench_dir = cfg.output_dir.join("bench");
    fs::create_dir_all(&bench_dir).map_err(io_ctx(&bench_dir))?;
    if !t_sweep.is_empty() {
        return run_t_sweep(cfg, t_sweep, &bench_dir);
    }

    let variants = parse_variants(variants)?;
    let sizes = parse_sizes(sizes)?;
    let mut rows: Vec<(String, usize, f64, f64)> = Vec::new();

    // One regularizer forward pass per variant and size.
    for &size in &sizes {
        let net = NetConfig {
            t: 1,
            c: cfg.network.c,
            window: cfg.network.window,
            heads: cfg.network.heads,
            h: size,
            w: size,
        };
        net.validate()?;
        let params = init_params::<f32>(&net, cfg.seed)?;
        let x: Vec<f32> =
            dataset_phantom(size, size, cfg.seed)?.iter().map(|&v| v as f32).collect();
        for &variant in &variants {
            let mut run = || -> Result<(), CliError> {
                let out = match variant {
                    Variant::Ll => wave_reg_block(&params, &net, 0, &x)?,
                    Variant::Fullres => ablation_fullres_variant(&params, &net, 0, &x)?,
                };
                std::hint::black_box(out);
                Ok(())
            };
            let (median, iqr) = time_runs(&mut run)?;
            println!("{} block at {size}: median {median:.2} ms", variant.name());
            rows.push((variant.name().to_string(), size, median, iqr));
        }
    }

    // One full unrolled inference per variant, at the configured size.
    let sys = build_system(cfg)?;
    let net = net_config(cfg)?;
    let params = init_params::<f32>(&net, cfg.seed)?;
    let d = data_term_for_training(cfg, &sys.a)?;
    let ops = SystemOps::new(sys.a.clone(), d);
    let phantom = dataset_phantom(net.h, net.w, cfg.seed)?;
    let y = sys.a.apply(&phantom)?;
    for &variant in &variants {
        let full_res = variant == Variant::Fullres;
        let mut run = || -> Result<(), CliError> {
            let mut tape = Tape::<f32>::new();
            let handles =
                unrolled_graph(&mut tape, &params, &net, &ops, &y, None, None, full_res)?;
            std::hint::black_box(tape.value(handles.output));
            Ok(())
        };
        let (median, iqr) = time_runs(&mut run)?;
        println!("{} unrolled at {}: median {median:.2} ms", variant.name(), net.h);
        rows.push((format!("{}_unrolled", variant.name()), net.h, median, iqr));
    }

    let mut text = String::from("variant,size,median_ms,iqr_ms\n");
    for (variant, size, median, iqr) in &rows {
        text.push_str(&format!("{variant},{size},{median:.3},{iqr:.3}\n"));
    }
    let csv = bench_dir.join("bench.csv");
    fs::write(&csv, text).map_err(io_ctx(&csv))?;
    println!("timings in {}", csv.display());
    Ok(())
}

fn run_t_sweep(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    bench_dir: &Path,
) -> Result<(), CliError> {
    for path in checkpoints {
        if !path.exists() {
            return Err(CliError::Config(format!(
                "missing checkpoint {}",
                path.display()
            )));
        }
    }
    let sys = build_system(cfg)?;
    let dataset_dir = cfg.output_dir.join("dataset");
    let manifest = read_manifest_checked(&dataset_dir)?;
    check_manifest(&manifest, &sys)?;
    let samples = load_split(&dataset_dir, &manifest, "val", true)?;
    if samples.is_empty() {
        return Err(CliError::Config("validation split has no samples".into()));
    }

    let mut rows = Vec::new();
    for path in checkpoints {
        let (meta, params, _) = load_checkpoint(path)?;
        if (meta.net.h, meta.net.w) != (sys.img.h, sys.img.w) {
            return Err(CliError::Incompatible(format!(
                "{} reconstructs {} x {}, config image is {} x {}",
                path.display(),
                meta.net.h,
                meta.net.w,
                sys.img.h,
                sys.img.w
            )));
        }
        let d = data_term_from_label(&meta.data_term, &sys.a, cfg.solver.tau)?;
        let ops = SystemOps::new(sys.a.clone(), d);
        let report = evaluate(&params, &meta.net, &ops, &samples)?;
        println!(
            "T={}: mean psnr {:.2} dB, mean ssim {:.4}",
            meta.net.t, report.mean_psnr, report.mean_ssim
        );
        rows.push((meta.net.t, report.mean_psnr, report.mean_ssim));
    }
    rows.sort_by_key(|r| r.0);
    let mut text = String::from("t,mean_psnr_db,mean_ssim\n");
    for (t, p, s) in &rows {
        text.push_str(&format!("{t},{p},{s}\n"));
    }
    let csv = bench_dir.join("tsweep.csv");
    fs::write(&csv, text).map_err(io_ctx(&csv))?;
    println!("sweep in {}", csv.display());
    Ok(())
}

fn parse_variants(text: &str) -> Result<Vec<Variant>, CliError> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        out.push(match part {
            "ll" => Variant::Ll,
            "fullres" => Variant::Fullres,
            other => {
                return Err(CliError::Config(format!(
                    "unknown variant {other}; choose from ll, fullres"
                )))
            }
        });
    }
    if out.is_empty() {
        return Err(CliError::Config("no variants requested".into()));
    }
    Ok(out)
}

fn parse_sizes(text: &str) -> Result<Vec<usize>, CliError> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let size: usize = part
            .parse()
            .map_err(|_| CliError::Config(format!("size {part} is not an integer")))?;
        out.push(size);
    }
    if out.is_empty() {
        return Err(CliError::Config("no sizes requested".into()));
    }
    Ok(out)
}

/// One warmup run, then five timed runs; returns (median, interquartile
/// range) in milliseconds.
fn time_runs(run: &mut dyn FnMut() -> Result<(), CliError>) -> Result<(f64, f64), CliError> {
    run()?;
    let mut times = Vec::with_capacity(5);
    for _ in 0..5 {
        let t0 = Instant::now();
        run()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    Ok((times[2], times[3] - times[1]))
}

fn read_manifest_checked(dataset_dir: &Path) -> Result<Manifest, CliError> {
    let manifest_path = dataset_dir.join(MANIFEST_NAME);
    if !manifest_path.exists() {
        return Err(CliError::Config(format!(
            "no dataset manifest at {}; run the simulate command first",
            manifest_path.display()
        )));
    }
    Ok(read_manifest(dataset_dir)?)
}

fn check_manifest(manifest: &Manifest, sys: &System) -> Result<(), CliError> {
    if manifest.operator_hash != operator_fingerprint(&sys.a) {
        return Err(CliError::Incompatible(
            "dataset was generated with a different operator; regenerate it or restore the config".into(),
        ));
    }
    if (manifest.h, manifest.w) != (sys.img.h, sys.img.w) {
        return Err(CliError::Incompatible(format!(
            "dataset images are {} x {}, config image is {} x {}",
            manifest.h, manifest.w, sys.img.h, sys.img.w
        )));
    }
    Ok(())
}

fn write_metrics_csv(path: &Path, rows: &[(String, f64, f64, f64)]) -> Result<(), CliError> {
    let mut text = String::from("sample_id,psnr_db,ssim,wall_ms\n");
    for (id, p, s, w) in rows {
        text.push_str(&format!("{id},{p},{s},{w:.3}\n"));
    }
    fs::write(path, text).map_err(io_ctx(path))
}

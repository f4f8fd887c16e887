//! `mscsa` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure (non-finite values or a failed gradient check).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mscsa_core::config::KvConfig;
use mscsa_core::data::nifti::{read_volume, write_mask, write_volume};
use mscsa_core::data::{
    fold_assignment, generate_dataset, read_manifest, write_manifest, CaseRecord, PhantomSpec, Volume,
    SMALL_LESION_VOXELS,
};
use mscsa_core::error::{Error, Result};
use mscsa_core::eval::{prediction_file, report, write_report};
use mscsa_core::gradcheck::FD_TOLERANCE;
use mscsa_core::mscsa::{csa, full_attention, init_params as init_mscsa, msp_token_count, MscsaConfig};
use mscsa_core::nn::{NetworkParams, ParamInit, Session};
use mscsa_core::rng::seeded;
use mscsa_core::tensor::{NormMode, Tensor};
use mscsa_core::training::{
    ensemble_predict, foreground_mask, load_cases, load_config, self_train, split_fold, train, write_log, Case, Scheme,
    TrainConfig, TrainResult,
};
use mscsa_core::unet::{load_checkpoint, save_checkpoint, ModelConfig};
use mscsa_core::verify::gradcheck_suite;

const RUN_CONFIG: &str = "run.cfg";
const BEST_CKPT: &str = "best.ckpt";
const FINAL_CKPT: &str = "final.ckpt";
const TRAIN_LOG: &str = "train_log.csv";

#[derive(Parser)]
#[command(name = "mscsa", version, about = "MSCSA U-Net lesion segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackboneArg {
    Plain,
    Res,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    DiceCe,
    Dtk10,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Default,
    Dtk10,
    Resunet,
}

/// Model and run settings: a config file plus command-line overrides.
#[derive(Args, Clone)]
struct RunFlags {
    /// Key-value config file with model and run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mscsa: Option<Toggle>,
    #[arg(long, value_enum)]
    backbone: Option<BackboneArg>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset and its manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        cases: usize,
        /// Cubic volume extent in voxels.
        #[arg(long, default_value_t = 32)]
        extent: usize,
    },
    /// Size-balanced fold assignment (`folds.csv`).
    Folds {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on all folds but one and validate on the held-out fold.
    Train {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict masks with one trained model.
    Predict {
        /// Run directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Only the validation cases of this fold.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict masks by averaging the softmax maps of several models.
    Ensemble {
        #[arg(long = "model", required = true, num_args = 1..)]
        models: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pseudo-label unlabeled volumes with base models, then retrain.
    Selftrain {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long = "base", required = true, num_args = 1..)]
        bases: Vec<PathBuf>,
        /// Labeled manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// CSV with `id` and `volume_path` columns.
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<id>_pred.nii` files.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = SMALL_LESION_VOXELS)]
        threshold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Elements probed per tensor (0 probes all).
        #[arg(long, default_value_t = 6)]
        cap: usize,
        #[arg(long, default_value_t = FD_TOLERANCE)]
        tolerance: f64,
    },
    /// Time cross-scale attention against single-scale attention.
    Bench {
        #[arg(long, default_value_t = 8)]
        extent: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Phantom { out, seed, cases, extent } => phantom(&out, seed, cases, extent),
        Cmd::Folds { manifest, k, out } => folds(&manifest, k, &out),
        Cmd::Train { run, manifest, fold, out } => train_cmd(&run, &manifest, fold, &out),
        Cmd::Predict { model, manifest, fold, out } => predict_cmd(&[model], &manifest, fold, &out),
        Cmd::Ensemble { models, manifest, fold, out } => predict_cmd(&models, &manifest, fold, &out),
        Cmd::Selftrain { run, bases, manifest, unlabeled, fold, out } => {
            selftrain_cmd(&run, &bases, &manifest, unlabeled.as_deref(), fold, &out)
        }
        Cmd::Eval { manifest, pred, threshold, out } => eval_cmd(&manifest, &pred, threshold, &out),
        Cmd::Gradcheck { cap, tolerance } => gradcheck_cmd(cap, tolerance),
        Cmd::Bench { extent, channels, repeats } => bench_cmd(extent, channels, repeats),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn base_dir(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or(Path::new("."))
}

fn phantom(out: &Path, seed: u64, cases: usize, extent: usize) -> Result<u8> {
    let spec = PhantomSpec { extents: [extent; 3], seed, ..Default::default() };
    let (rows, warnings) = generate_dataset(out, cases, &spec)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let vols: Vec<String> = rows.iter().map(|r| r.lesion_volume.to_string()).collect();
    println!("wrote {} cases to {} (lesion volumes: {})", rows.len(), out.display(), vols.join(" "));
    Ok(0)
}

fn folds(manifest: &Path, k: usize, out: &Path) -> Result<u8> {
    let rows = read_manifest(manifest)?;
    let vols: Vec<usize> = rows.iter().map(|r| r.lesion_volume).collect();
    let assign = fold_assignment(&vols, k)?;
    mkdir(out)?;
    let path = out.join("folds.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["id", "fold", "lesion_volume"])?;
    for (r, f) in rows.iter().zip(&assign) {
        w.write_record([r.id.clone(), f.to_string(), r.lesion_volume.to_string()])?;
    }
    w.flush().map_err(|e| Error::Io { path: path.clone(), source: e })?;
    for f in 0..k {
        let members: Vec<usize> = vols.iter().zip(&assign).filter(|(_, &a)| a == f).map(|(&v, _)| v).collect();
        let mean = members.iter().sum::<usize>() as f64 / members.len() as f64;
        println!("fold {f}: {} cases, mean lesion volume {mean:.1}", members.len());
    }
    Ok(0)
}

fn resolve_config(flags: &RunFlags) -> Result<(ModelConfig, TrainConfig)> {
    let mut kv = match &flags.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    if let Some(s) = flags.scheme {
        let name = match s {
            SchemeArg::Default => "default",
            SchemeArg::Dtk10 => "dtk10",
            SchemeArg::Resunet => "resunet",
        };
        kv.set("scheme", name);
    }
    if let Some(m) = flags.mscsa {
        let on = matches!(m, Toggle::On);
        kv.set("mscsa", if on { "on" } else { "off" });
    }
    if let Some(b) = flags.backbone {
        kv.set(
            "backbone",
            match b {
                BackboneArg::Plain => "plain",
                BackboneArg::Res => "res",
            },
        );
    }
    if let Some(l) = flags.loss {
        kv.set(
            "loss",
            match l {
                LossArg::DiceCe => "dice_ce",
                LossArg::Dtk10 => "dtk10",
            },
        );
    }
    if let Some(s) = flags.seed {
        kv.set("seed", s.to_string());
    }
    if let Some(e) = flags.epochs {
        kv.set("epochs", e.to_string());
    }
    let (model, run) = load_config(&mut kv)?;
    kv.finish()?;
    if matches!(run.scheme, Scheme::SelfTrain | Scheme::Ensemble) {
        return Err(Error::Config(format!(
            "scheme {} is run through the `{}` command",
            run.scheme,
            if run.scheme == Scheme::SelfTrain { "selftrain" } else { "ensemble" }
        )));
    }
    Ok((model, run))
}

fn write_run(out: &Path, model: &ModelConfig, run: &TrainConfig, result: &TrainResult) -> Result<()> {
    mkdir(out)?;
    let cfg = format!("{}{}", model.to_kv_string(), run.to_kv_string());
    let path = out.join(RUN_CONFIG);
    std::fs::write(&path, cfg).map_err(|e| Error::Io { path, source: e })?;
    save_checkpoint(&out.join(BEST_CKPT), &result.best_params)?;
    save_checkpoint(&out.join(FINAL_CKPT), &result.final_params)?;
    write_log(&out.join(TRAIN_LOG), &result.log)
}

fn summarize(result: &TrainResult) {
    if let Some(last) = result.log.last() {
        println!("epoch {}: train loss {:.5}", last.epoch, last.train_loss);
    }
    match result.best_val_dice {
        Some(d) => println!("best validation dice {d:.4}"),
        None => println!("no validation cases"),
    }
}

fn train_cmd(flags: &RunFlags, manifest: &Path, fold: usize, out: &Path) -> Result<u8> {
    let (model, run) = resolve_config(flags)?;
    let rows = read_manifest(manifest)?;
    let (tr, va) = split_fold(&rows, run.folds, fold)?;
    let base = base_dir(manifest);
    let t = Instant::now();
    let result = train(&run, &model, &load_cases(&tr, base)?, &load_cases(&va, base)?)?;
    write_run(out, &model, &run, &result)?;
    summarize(&result);
    println!("trained {} epochs on {} cases in {:.1?}", run.epochs, tr.len(), t.elapsed());
    Ok(0)
}

/// Model config, run config and best checkpoint of a run directory.
fn load_run(dir: &Path) -> Result<(ModelConfig, TrainConfig, NetworkParams<f32>)> {
    let mut kv = KvConfig::load(&dir.join(RUN_CONFIG))?;
    let (model, run) = load_config(&mut kv)?;
    kv.finish()?;
    Ok((model, run, load_checkpoint(&dir.join(BEST_CKPT))?))
}

fn predict_cmd(models: &[PathBuf], manifest: &Path, fold: Option<usize>, out: &Path) -> Result<u8> {
    let mut members = Vec::with_capacity(models.len());
    let mut first_run = None;
    for dir in models {
        let (model, run, params) = load_run(dir)?;
        first_run.get_or_insert(run);
        members.push((model, params));
    }
    let run = first_run.ok_or_else(|| Error::Config("no models given".into()))?;
    let rows = read_manifest(manifest)?;
    let rows = match fold {
        Some(f) => split_fold(&rows, run.folds, f)?.1,
        None => rows,
    };
    mkdir(out)?;
    let base = base_dir(manifest);
    for r in &rows {
        let v = read_volume(&base.join(&r.volume_path))?;
        let probs = ensemble_predict(&members, &v, run.window())?;
        let mask = foreground_mask(&probs)?;
        write_mask(&out.join(prediction_file(&r.id)), &mask, v.spacing, &v.affine)?;
        let e = v.extents();
        let fg: Vec<f32> = probs.data()[..e.iter().product()].iter().map(|b| 1.0 - b).collect();
        let prob = Volume { voxels: Tensor::new(e.to_vec(), fg)?, spacing: v.spacing, affine: v.affine };
        write_volume(&out.join(format!("{}_prob.nii", r.id)), &prob)?;
        println!("{}: {} foreground voxels", r.id, mask.lesion_volume());
    }
    Ok(0)
}

fn read_unlabeled(path: &Path) -> Result<Vec<(String, Volume)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: no {name} column", path.display())))
    };
    let (id_col, vol_col) = (col("id")?, col("volume_path")?);
    let base = base_dir(path);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push((rec[id_col].to_string(), read_volume(&base.join(&rec[vol_col]))?));
    }
    Ok(out)
}

fn selftrain_cmd(
    flags: &RunFlags,
    bases: &[PathBuf],
    manifest: &Path,
    unlabeled: Option<&Path>,
    fold: usize,
    out: &Path,
) -> Result<u8> {
    let (model, run) = resolve_config(flags)?;
    let members: Vec<(ModelConfig, NetworkParams<f32>)> =
        bases.iter().map(|d| load_run(d).map(|(m, _, p)| (m, p))).collect::<Result<_>>()?;
    let rows = read_manifest(manifest)?;
    let (tr, va) = split_fold(&rows, run.folds, fold)?;
    let base = base_dir(manifest);
    let unl = match unlabeled {
        Some(p) => read_unlabeled(p)?,
        None => Vec::new(),
    };
    let labeled: Vec<Case> = load_cases(&tr, base)?;
    let outcome = self_train(&members, &unl, &run, &model, &labeled, &load_cases(&va, base)?)?;
    write_run(out, &model, &run, &outcome.result)?;
    let pseudo_dir = out.join("pseudo");
    mkdir(&pseudo_dir)?;
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let mut merged: Vec<CaseRecord> = tr
        .iter()
        .map(|r| CaseRecord {
            volume_path: abs(&base.join(&r.volume_path)),
            mask_path: abs(&base.join(&r.mask_path)),
            ..r.clone()
        })
        .collect();
    for c in &outcome.pseudo {
        let vol_name = PathBuf::from("pseudo").join(format!("{}_img.nii", c.id));
        let mask_name = PathBuf::from("pseudo").join(format!("{}_pseudo.nii", c.id));
        write_volume(&out.join(&vol_name), &c.volume)?;
        write_mask(&out.join(&mask_name), &c.mask, c.volume.spacing, &c.volume.affine)?;
        merged.push(CaseRecord {
            id: c.id.clone(),
            volume_path: vol_name,
            mask_path: mask_name,
            lesion_volume: c.mask.lesion_volume(),
        });
    }
    write_manifest(&out.join("merged_manifest.csv"), &merged)?;
    println!("{} labeled + {} pseudo-labeled cases", labeled.len(), outcome.pseudo.len());
    summarize(&outcome.result);
    Ok(0)
}

fn eval_cmd(manifest: &Path, pred: &Path, threshold: usize, out: &Path) -> Result<u8> {
    let rows = read_manifest(manifest)?;
    let r = report(&rows, base_dir(manifest), pred, threshold)?;
    write_report(out, &r)?;
    for agg in [&r.entire, &r.small] {
        let dice = agg.mean_dice.map(|d| format!("{d:.4}")).unwrap_or_else(|| "n/a".into());
        println!("{:>6}: {} cases, mean dice {dice}, lesion F1 {:.4}", agg.subset, agg.n_cases, agg.f1);
    }
    Ok(0)
}

fn gradcheck_cmd(cap: usize, tolerance: f64) -> Result<u8> {
    let t = Instant::now();
    let reports = gradcheck_suite((cap > 0).then_some(cap))?;
    let mut worst = 0.0f64;
    let mut failed = 0;
    for r in &reports {
        let ok = r.passed(tolerance);
        failed += usize::from(!ok);
        worst = worst.max(r.max_rel_err);
        println!(
            "{:<22} {:>5} checked  max rel err {:.3e}  {}",
            r.name,
            r.checked,
            r.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("max relative error {worst:.3e} (tolerance {tolerance:.0e}) in {:.1?}", t.elapsed());
    Ok(if failed == 0 { 0 } else { 3 })
}

fn bench_cmd(extent: usize, channels: usize, repeats: usize) -> Result<u8> {
    let split = [channels / 2, channels - channels / 2];
    let cfg = MscsaConfig::for_channels(&split);
    let mut params = NetworkParams::<f32>::new();
    init_mscsa(&mut ParamInit { params: &mut params, rng: &mut seeded(0) }, &cfg, &split);
    let x = Tensor::from_fn(&[1, channels, extent, extent, extent], |i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0);
    let mut time = |full: bool| -> Result<f64> {
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let mut s = Session::new(&mut params, NormMode::Eval, false);
            let xv = s.graph.constant(x.clone());
            let t = Instant::now();
            if full {
                full_attention(&mut s, xv, &cfg, "mscsa.block.csa1")?;
            } else {
                csa(&mut s, xv, &cfg, "mscsa.block.csa1")?;
            }
            best = best.min(t.elapsed().as_secs_f64());
        }
        Ok(best * 1e3)
    };
    let (t_csa, t_full) = (time(false)?, time(true)?);
    let l1 = extent.pow(3);
    println!("input [1, {channels}, {extent}, {extent}, {extent}], {} heads", cfg.heads);
    println!(
        "cross-scale attention: {:>8.2} ms  ({} query x {} key tokens)",
        t_csa,
        l1,
        msp_token_count(extent, extent, extent)
    );
    println!("full attention:        {:>8.2} ms  ({l1} query x {l1} key tokens)", t_full);
    Ok(0)
}

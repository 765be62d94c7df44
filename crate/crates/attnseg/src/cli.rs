//! Command-line interface: dataset generation, training, pseudo-mask export,
//! mask evaluation, and the masking-ratio sweep.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{BackgroundMode, RunConfig, SyntheticConfig, Upsample};
use crate::data::{
    generate_synthetic, list_mask_files, load_dataset, load_mask_png, read_json, save_mask_png,
    write_json, Dataset,
};
use crate::error::{Error, Result};
use crate::gating::{eval_gates, prune_heads};
use crate::masking::LabelSet;
use crate::metrics::{ConfusionMatrix, MultiLabelCounts};
use crate::plot::{line_plot, Series, PALETTE};
use crate::pseudomask::generate_pseudo_mask;
use crate::sweep::run_sweep;
use crate::train::{fit, FitOptions};

#[derive(Parser)]
#[command(
    name = "attnseg",
    about = "Weakly supervised segmentation from class-token attention",
    version
)]
struct Cli {
    /// Worker threads for batch and evaluation parallelism; also settable via
    /// ATTNSEG_NUM_WORKERS (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-label shapes dataset with ground-truth masks.
    GenerateData(GenerateArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Export pseudo-masks for a dataset from a trained checkpoint.
    PseudoMask(PseudoMaskArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Train once per masking ratio and tabulate the results.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    num_images: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    min_shapes: usize,
    /// Defaults to min(3, --classes); shapes in one image have distinct classes.
    #[arg(long)]
    max_shapes: Option<usize>,
    /// Minimum visible area per labeled shape, as a fraction of image area.
    #[arg(long, default_value_t = 0.05)]
    min_area_fraction: f64,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Separate validation dataset; defaults to a held-out tail of --data.
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and plots.
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Weight of the expected-L0 head-sparsity penalty.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gate_lr_mult: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Disable the register token.
    #[arg(long)]
    no_reg: bool,
    /// Stop after this many total epochs (resume later to continue).
    #[arg(long)]
    epoch_limit: Option<usize>,
    /// Resume from a checkpoint blob written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum UpsampleArg {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackgroundArg {
    /// Fill unassigned pixels from neighboring assignments.
    Fill,
    /// Leave unassigned pixels as the ignore value (255).
    BackgroundClass,
}

#[derive(Args)]
struct PseudoMaskArgs {
    /// Checkpoint blob (checkpoint.bin) from `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory to generate masks for.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for <id>_mask.png files and summary.json.
    #[arg(long)]
    out: PathBuf,
    /// Binarization threshold; defaults to the checkpoint's configured value.
    #[arg(long)]
    tau: Option<f64>,
    /// Attention layer to read maps from (default: final layer).
    #[arg(long)]
    attn_layer: Option<usize>,
    #[arg(long, value_enum)]
    upsample: Option<UpsampleArg>,
    #[arg(long, value_enum)]
    background: Option<BackgroundArg>,
    /// Zero the gates of prunable heads before generating masks.
    #[arg(long)]
    pruned: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted masks (<id>_mask.png or <id>.png).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks. Exactly one of --gt/--data.
    #[arg(long, conflicts_with = "data")]
    gt: Option<PathBuf>,
    /// Dataset directory providing ground-truth masks and the class count.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of classes; required with --gt, else read from the dataset.
    #[arg(long)]
    classes: Option<usize>,
    /// Write the metrics JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated masking ratios to train at.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.5, 0.8, 1.0])]
    ratios: Vec<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads.or_else(|| {
        std::env::var("ATTNSEG_NUM_WORKERS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::GenerateData(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::PseudoMask(args) => cmd_pseudo_mask(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    if args.out.exists() {
        let occupied = std::fs::read_dir(&args.out)
            .map_err(|e| Error::io(&args.out, e))?
            .next()
            .is_some();
        if occupied && !args.force {
            return Err(Error::Input(format!(
                "{} is not empty; pass --force to write into it",
                args.out.display()
            )));
        }
    }
    let cfg = SyntheticConfig {
        num_images: args.num_images,
        num_classes: args.classes,
        image_size: args.image_size,
        seed: args.seed,
        min_shapes: args.min_shapes,
        max_shapes: args.max_shapes.unwrap_or_else(|| args.classes.min(3)),
        min_area_fraction: args.min_area_fraction,
        noise_std: args.noise_std,
    };
    let manifest = generate_synthetic(&cfg, &args.out)?;
    println!(
        "wrote {} images ({} classes, {}x{}) to {}",
        manifest.num_samples,
        manifest.num_classes,
        manifest.image_size,
        manifest.image_size,
        args.out.display()
    );
    Ok(())
}

/// Builds the effective run configuration: file config (or defaults), then
/// command-line overrides, then dataset-implied model geometry.
fn resolve_train_config(args: &TrainArgs, ds: &Dataset) -> Result<RunConfig> {
    let mut run: RunConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => RunConfig::default(),
    };
    run.model.num_classes = ds.manifest.num_classes;
    run.model.image_size = ds.manifest.image_size;
    if args.no_reg {
        run.model.use_reg_token = false;
    }
    let t = &mut run.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = args.mask_ratio {
        t.mask_ratio = v;
    }
    if let Some(v) = args.lambda {
        t.lambda = v;
    }
    if let Some(v) = args.gate_lr_mult {
        t.gate_lr_mult = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.eval_every {
        t.eval_every = v;
    }
    run.validate()?;
    Ok(run)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let val_ds = args.val_data.as_deref().map(load_dataset).transpose()?;
    let run = resolve_train_config(&args, &ds)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_json(&args.out.join("config.resolved.json"), &run)?;

    let started = std::time::Instant::now();
    let outcome = fit::<f32>(
        &run,
        &ds,
        val_ds.as_ref(),
        &FitOptions {
            out_dir: Some(&args.out),
            resume: args.resume.as_deref(),
            epoch_limit: args.epoch_limit,
            quiet: args.quiet,
        },
    )?;
    let elapsed = started.elapsed().as_secs_f64();

    let curves: Vec<Series> = vec![
        Series {
            label: "loss".into(),
            color: PALETTE[0],
            points: outcome.history.iter().map(|r| (r.epoch as f64, r.loss)).collect(),
        },
        Series {
            label: "f1".into(),
            color: PALETTE[1],
            points: outcome
                .history
                .iter()
                .filter_map(|r| r.macro_f1.map(|v| (r.epoch as f64, v)))
                .collect(),
        },
        Series {
            label: "miou".into(),
            color: PALETTE[2],
            points: outcome
                .history
                .iter()
                .filter_map(|r| r.miou.map(|v| (r.epoch as f64, v)))
                .collect(),
        },
    ];
    line_plot(&args.out.join("training.png"), "training", "epoch", "value", &curves)?;

    let summary = serde_json::json!({
        "final_eval": outcome.final_eval,
        "fraction_heads_pruned": outcome.fraction_pruned,
        "kept_heads": outcome
            .kept_heads
            .outer_iter()
            .map(|row| row.iter().map(|&k| k == 1).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
        "epochs_completed": outcome.checkpoint.epochs_completed,
        "elapsed_seconds": elapsed,
    });
    write_json(&args.out.join("summary.json"), &summary)?;
    if !args.quiet {
        eprintln!(
            "done: f1 {:.3} miou {:.3} pixacc {:.3} pruned {:.2} in {:.1}s",
            outcome.final_eval.macro_f1,
            outcome.final_eval.miou,
            outcome.final_eval.pixel_accuracy,
            outcome.fraction_pruned,
            elapsed
        );
    }
    Ok(())
}

fn cmd_pseudo_mask(args: PseudoMaskArgs) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(&args.ckpt)?;
    let ds = load_dataset(&args.data)?;
    if ds.manifest.num_classes != ckpt.config.model.num_classes
        || ds.manifest.image_size != ckpt.config.model.image_size
    {
        return Err(Error::Input(format!(
            "dataset geometry ({} classes, {}px) does not match checkpoint ({} classes, {}px)",
            ds.manifest.num_classes,
            ds.manifest.image_size,
            ckpt.config.model.num_classes,
            ckpt.config.model.image_size
        )));
    }
    let mut pm_cfg = ckpt.config.pseudo_mask.clone();
    if let Some(tau) = args.tau {
        pm_cfg.tau = tau;
    }
    if let Some(layer) = args.attn_layer {
        pm_cfg.attn_layer = Some(layer);
    }
    if let Some(mode) = args.upsample {
        pm_cfg.upsample = match mode {
            UpsampleArg::Nearest => Upsample::Nearest,
            UpsampleArg::Bilinear => Upsample::Bilinear,
        };
    }
    if let Some(mode) = args.background {
        pm_cfg.background_mode = match mode {
            BackgroundArg::Fill => BackgroundMode::Fill,
            BackgroundArg::BackgroundClass => BackgroundMode::BackgroundClass,
        };
    }
    pm_cfg.validate(ckpt.config.model.num_layers)?;

    let mut gates = eval_gates(&ckpt.gates);
    if args.pruned {
        let keep = prune_heads(&ckpt.gates, ckpt.config.gates.prune_threshold);
        gates.zip_mut_with(&keep.mapv(|k| k as f32), |g, &k| *g *= k);
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let results: Result<Vec<_>> = ds
        .samples
        .par_iter()
        .map(|s| {
            let image = ds.normalized_image::<f32>(s);
            let pm = generate_pseudo_mask(
                &image,
                &ckpt.params,
                &gates,
                &ckpt.config.model,
                &pm_cfg,
                ckpt.config.train.decision_threshold,
            )?;
            Ok((s, pm))
        })
        .collect();

    let c = ckpt.config.model.num_classes;
    let mut cm = ConfusionMatrix::new(c);
    let mut labels = MultiLabelCounts::new(c);
    let mut have_gt = false;
    let mut predicted_total = 0usize;
    for (s, pm) in results? {
        save_mask_png(&args.out.join(format!("{}_mask.png", s.id)), &pm.mask)?;
        labels.update(&s.labels, &LabelSet::new(pm.predicted.iter().copied()));
        predicted_total += pm.predicted.len();
        if let Some(gt) = &s.gt_mask {
            cm.update(gt, &pm.mask);
            have_gt = true;
        }
    }
    let summary = serde_json::json!({
        "num_images": ds.len(),
        "mean_predicted_classes": predicted_total as f64 / ds.len().max(1) as f64,
        "macro_f1": labels.macro_f1(),
        "miou": if have_gt { Some(cm.miou()) } else { None },
        "pixel_accuracy": if have_gt { Some(cm.pixel_accuracy()) } else { None },
    });
    write_json(&args.out.join("summary.json"), &summary)?;
    println!("wrote {} masks to {}", ds.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let preds = list_mask_files(&args.pred)?;
    let (gt_map, num_classes): (Vec<(String, PathBuf)>, usize) = match (&args.gt, &args.data) {
        (Some(dir), None) => {
            let classes = args.classes.ok_or_else(|| {
                Error::Input("--classes is required when scoring against --gt".into())
            })?;
            (list_mask_files(dir)?, classes)
        }
        (None, Some(dir)) => {
            let manifest: crate::data::DatasetManifest = read_json(&dir.join("manifest.json"))?;
            let classes = args.classes.unwrap_or(manifest.num_classes);
            (list_mask_files(&dir.join("masks"))?, classes)
        }
        _ => return Err(Error::Input("exactly one of --gt or --data is required".into())),
    };
    let gt_index: std::collections::BTreeMap<&str, &Path> =
        gt_map.iter().map(|(id, p)| (id.as_str(), p.as_path())).collect();

    let mut cm = ConfusionMatrix::new(num_classes);
    let mut matched = 0usize;
    for (id, pred_path) in &preds {
        let Some(gt_path) = gt_index.get(id.as_str()) else { continue };
        let pred = load_mask_png(pred_path)?;
        let gt = load_mask_png(gt_path)?;
        if pred.dim() != gt.dim() {
            return Err(Error::Input(format!(
                "mask size mismatch for id {id}: pred {:?} vs gt {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        cm.update(&gt, &pred);
        matched += 1;
    }
    if matched == 0 {
        return Err(Error::Input(
            "no mask ids are shared between the prediction and ground-truth sets".into(),
        ));
    }
    let report = serde_json::json!({
        "num_images": matched,
        "miou": cm.miou(),
        "pixel_accuracy": cm.pixel_accuracy(),
        "per_class_iou": cm.per_class_iou(),
    });
    let text = serde_json::to_string_pretty(&report).expect("serializable report");
    println!("{text}");
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let val_ds = args.val_data.as_deref().map(load_dataset).transpose()?;
    let mut run: RunConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => RunConfig::default(),
    };
    run.model.num_classes = ds.manifest.num_classes;
    run.model.image_size = ds.manifest.image_size;
    if let Some(v) = args.epochs {
        run.train.epochs = v;
    }
    if let Some(v) = args.seed {
        run.train.seed = v;
    }
    run.validate()?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_json(&args.out.join("config.resolved.json"), &run)?;
    let points = run_sweep(&run, &args.ratios, &ds, val_ds.as_ref(), &args.out, args.quiet)?;
    for p in &points {
        println!(
            "ratio {:.2}: f1 {:.3} miou {:.3} pixacc {:.3} pruned {:.2}",
            p.mask_ratio, p.macro_f1, p.miou, p.pixel_accuracy, p.frac_heads_pruned
        );
    }
    Ok(())
}

//! `stack-unet` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad input (config, manifest,
//! arguments, or an output directory that would be clobbered).

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use stack_unet::data::{grouped_split, human_agreement, kfold_split, load_image, load_manifest, save_mask, DatasetManifest, Organ, Split};
use stack_unet::metrics::{cup_to_disc_ratio, GLAUCOMA_CDR_THRESHOLD};
use stack_unet::model::{BlockKind, StackUNet};
use stack_unet::pipeline::{disc_region_or_full, predict_cup_in_region, predict_native};
use stack_unet::report::{
    aggregate, default_eval_indices, evaluate_models, evaluate_prediction_dir, plot_sweep, read_per_image_csv, variant_name,
    write_per_image_csv, write_published_csv, Evaluation, LoadedModel, Rank,
};
use stack_unet::training::{sweep_blocks, train, train_cup_pipeline, CropSource, RunDir};

use config::{RunConfig, SplitProtocol};

/// Marks errors caused by the caller's input; mapped to exit code 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(InputError(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "stack-unet", version, about = "Optic disc and cup segmentation with stacked U-Nets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ModelOverrides {
    /// Number of stacked blocks (a comma list for `sweep`).
    #[arg(long)]
    pub blocks: Option<String>,
    /// Feed only the previous block's features to blocks 2+.
    #[arg(long)]
    pub no_long_skip: bool,
    #[arg(long, value_parser = ["unet", "res_unet"])]
    pub block_kind: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a disc or cup model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the manifest named in the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Run directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelOverrides,
        #[arg(long)]
        overwrite: bool,
    },
    /// Write predicted masks (and CDR values with both models) for images.
    Predict {
        /// Disc model, or any single-organ model.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cup_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Network input size `HxW`; defaults to the training resolution.
        #[arg(long)]
        resolution: Option<String>,
        #[arg(long)]
        overwrite: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score checkpoints or saved predictions against a manifest split.
    Evaluate {
        #[arg(long, required_unless_present_any = ["cup_checkpoint", "predictions"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        cup_checkpoint: Option<PathBuf>,
        /// Directory of `{id}_{organ}.png` masks to score instead of a model.
        #[arg(long, conflicts_with_all = ["checkpoint", "cup_checkpoint"])]
        predictions: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// `train`, `val`, `test` or `foldN`; defaults to val, then test, then all.
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train one model per block count and plot the scores.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelOverrides,
        #[arg(long)]
        overwrite: bool,
    },
    /// Inter-annotator agreement on multi-annotator manifests.
    Agreement {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.downcast_ref::<InputError>().is_some()) {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { config, manifest, out, model, overwrite } => cmd_train(&config, manifest, out, &model, overwrite),
        Command::Predict { checkpoint, cup_checkpoint, out, threshold, resolution, overwrite, images } => {
            cmd_predict(&checkpoint, cup_checkpoint.as_deref(), &out, threshold, resolution.as_deref(), overwrite, &images)
        }
        Command::Evaluate { checkpoint, cup_checkpoint, predictions, manifest, split, threshold, out, overwrite } => cmd_evaluate(
            checkpoint.as_deref(),
            cup_checkpoint.as_deref(),
            predictions.as_deref(),
            &manifest,
            split.as_deref(),
            threshold,
            &out,
            overwrite,
        ),
        Command::Sweep { config, out, model, overwrite } => cmd_sweep(&config, out, &model, overwrite),
        Command::Agreement { manifest, out, overwrite } => cmd_agreement(&manifest, out.as_deref(), overwrite),
    }
}

/// Creates `dir`, refusing to touch a non-empty one unless `overwrite`.
pub fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<()> {
    let non_empty = dir.is_dir() && std::fs::read_dir(dir)?.next().is_some();
    if non_empty {
        if !overwrite {
            return Err(input_error(format!("{} exists and is not empty; pass --overwrite to replace it", dir.display())));
        }
        std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    } else if dir.exists() && !dir.is_dir() {
        return Err(input_error(format!("{} exists and is not a directory", dir.display())));
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| input_error(format!("config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let loaded = config::parse(&text, base).map_err(|e| input_error(format!("invalid config {}: {e}", path.display())))?;
    if loaded.defaulted_learning_rate {
        info!("train.learning_rate not set; using the default {}", loaded.config.train.learning_rate);
    }
    Ok(loaded.config)
}

fn apply_overrides(cfg: &mut RunConfig, o: &ModelOverrides, single_blocks: bool) -> Result<Option<Vec<usize>>> {
    if o.no_long_skip {
        cfg.model.long_skip = false;
    }
    if let Some(k) = &o.block_kind {
        cfg.model.block.kind = k.parse::<BlockKind>().map_err(|e| input_error(e.to_string()))?;
    }
    let Some(b) = &o.blocks else { return Ok(None) };
    let counts = b
        .split(',')
        .map(|s| s.trim().parse::<usize>().ok().filter(|&n| n > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| input_error(format!("--blocks {b:?}: expected positive integers")))?;
    if single_blocks {
        let [n] = counts[..] else { return Err(input_error("--blocks takes a single count for train")) };
        cfg.model.n_blocks = n;
    }
    Ok(Some(counts))
}

fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest(path).map_err(|e| input_error(format!("manifest {}: {e}", path.display())))
}

/// Turns the configured protocol into train/val assignments.
fn assign_splits(manifest: DatasetManifest, cfg: &RunConfig) -> Result<DatasetManifest> {
    let s = &cfg.split;
    let protocol = match s.protocol {
        SplitProtocol::Auto if manifest.indices(Split::Train).is_empty() => SplitProtocol::Grouped,
        SplitProtocol::Auto => SplitProtocol::Manifest,
        p => p,
    };
    let out = match protocol {
        SplitProtocol::Manifest | SplitProtocol::Auto => {
            if !manifest.has_splits() {
                return Err(input_error("split.protocol = \"manifest\" but the manifest has no split column"));
            }
            manifest
        }
        SplitProtocol::Grouped => grouped_split(&manifest, s.val_fraction, s.seed)?,
        SplitProtocol::Kfold => {
            let mut m = kfold_split(&manifest, s.k, s.seed)?;
            for r in &mut m.records {
                r.split = Some(if r.split == Some(Split::Fold(s.fold)) { Split::Val } else { Split::Train });
            }
            m.split_origin.push_str(&format!(", fold {} held out", s.fold));
            m
        }
    };
    info!("split protocol: {protocol:?}");
    Ok(out)
}

fn cmd_train(config_path: &Path, manifest: Option<PathBuf>, out: Option<PathBuf>, o: &ModelOverrides, overwrite: bool) -> Result<()> {
    let mut cfg = load_config(config_path)?;
    apply_overrides(&mut cfg, o, true)?;
    if let Some(m) = manifest {
        cfg.manifest = m;
    }
    if let Some(d) = out {
        cfg.out_dir = Some(d);
    }
    cfg.model.validate().map_err(|e| input_error(e.to_string()))?;
    let out_dir = cfg.out_dir.clone().ok_or_else(|| input_error("no run directory: set out_dir or pass --out"))?;
    let manifest = assign_splits(read_manifest(&cfg.manifest)?, &cfg)?;
    prepare_out_dir(&out_dir, overwrite)?;
    std::fs::write(out_dir.join("run_config.toml"), config::to_toml(&cfg))?;
    manifest.write(&out_dir.join("split_manifest.csv"))?;
    let run = RunDir::create(&out_dir)?;
    let mut model = StackUNet::new(cfg.model, cfg.model_seed)?;
    info!("{} with {} trainable parameters", variant_name(model.spec()), model.count_parameters().total);
    match cfg.train.organ {
        Organ::Disc => {
            let report = train(&mut model, &manifest, &cfg.train, Some(&run))?;
            println!(
                "best {} {:.4} at epoch {}; run directory {}",
                report.selection_metric,
                report.best_metric,
                report.best_epoch,
                out_dir.display()
            );
        }
        Organ::Cup => {
            let disc = cfg.cup.disc_checkpoint.as_deref().map(LoadedModel::load).transpose()?;
            let source = match &disc {
                Some(d) => CropSource::Predicted { model: &d.checkpoint.model, resolution: d.resolution },
                None => CropSource::Oracle,
            };
            let report = train_cup_pipeline(&mut model, source, &manifest, &cfg.train, Some(&run))?;
            if !report.fallback_eval.is_empty() {
                warn!("{} validation images had no disc region and used the full frame", report.fallback_eval.len());
            }
            let iou = report.full_frame.iter().map(|m| m.iou).sum::<f64>() / report.full_frame.len().max(1) as f64;
            println!(
                "best {} {:.4} at epoch {}; full-frame cup IOU {iou:.4}; run directory {}",
                report.run.selection_metric,
                report.run.best_metric,
                report.run.best_epoch,
                out_dir.display()
            );
        }
    }
    Ok(())
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s.split_once('x').ok_or_else(|| input_error(format!("--resolution {s:?}: expected HxW")))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| input_error(format!("--resolution {s:?}: expected HxW")));
    Ok((p(h)?, p(w)?))
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    LoadedModel::load(path).map_err(|e| input_error(format!("checkpoint {}: {e}", path.display())))
}

fn organ_of(m: &LoadedModel) -> Organ {
    match m.checkpoint.metadata.get("organ").map(String::as_str) {
        Some("cup") => Organ::Cup,
        _ => Organ::Disc,
    }
}

fn cmd_predict(
    checkpoint: &Path,
    cup_checkpoint: Option<&Path>,
    out: &Path,
    threshold: f64,
    resolution: Option<&str>,
    overwrite: bool,
    images: &[PathBuf],
) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(input_error("--threshold must lie in [0, 1]"));
    }
    let mut primary = load_model(checkpoint)?;
    let cup = cup_checkpoint.map(load_model).transpose()?;
    if let Some(r) = resolution {
        let (h, w) = parse_resolution(r)?;
        primary.checkpoint.model.spec().block.check_resolution(h, w).map_err(|e| input_error(e.to_string()))?;
        primary.resolution = (h, w);
    }
    let primary_organ = organ_of(&primary);
    if cup.is_some() && primary_organ != Organ::Disc {
        return Err(input_error("--cup-checkpoint needs a disc model as --checkpoint"));
    }
    prepare_out_dir(out, overwrite)?;
    let mut cdr_rows = csv::Writer::from_path(out.join("cdr.csv"))?;
    cdr_rows.write_record(["image", "disc_height", "cup_height", "cdr", "glaucoma_suspect"])?;
    let mut written_cdr = false;
    for path in images {
        let raw = load_image(path).map_err(|e| input_error(e.to_string()))?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let mask = predict_native(&primary.checkpoint.model, &primary.preprocessing.normalize(&raw), primary.resolution, threshold)?;
        save_mask(&out.join(format!("{stem}_{primary_organ}.png")), &mask)?;
        if let Some(c) = &cup {
            let (region, fallback) = disc_region_or_full(&mask, c.crop_margin);
            if fallback {
                warn!("{}: no disc predicted; cup searched in the full frame", path.display());
            }
            let normalized = c.preprocessing.normalize(&raw);
            let cup_mask = predict_cup_in_region(&c.checkpoint.model, &normalized, &region, c.resolution, threshold)?;
            save_mask(&out.join(format!("{stem}_cup.png")), &cup_mask)?;
            match cup_to_disc_ratio(&mask, &cup_mask, GLAUCOMA_CDR_THRESHOLD) {
                Ok(r) => {
                    cdr_rows.write_record([
                        stem.clone(),
                        r.disc_height.to_string(),
                        r.cup_height.to_string(),
                        format!("{:.4}", r.cdr),
                        r.glaucoma_suspect.to_string(),
                    ])?;
                    written_cdr = true;
                }
                Err(e) => warn!("{}: no CDR ({e})", path.display()),
            }
        }
    }
    cdr_rows.flush()?;
    drop(cdr_rows);
    if !written_cdr {
        std::fs::remove_file(out.join("cdr.csv"))?;
    }
    println!("wrote {} prediction(s) to {}", images.len(), out.display());
    Ok(())
}

fn write_evaluation(eval: &Evaluation, out: &Path) -> Result<()> {
    eval.table.write_csv(&out.join("eval_table.csv"))?;
    std::fs::write(out.join("eval_table.md"), eval.table.to_markdown())?;
    let per_image = out.join("per_image.csv");
    write_per_image_csv(&per_image, &eval.per_image)?;
    write_published_csv(&out.join("published_results.csv"))?;
    // the table must be reproducible from what was saved
    let variant = eval.table.rows.first().map(|r| r.variant.clone()).unwrap_or_default();
    let recomputed = aggregate(&variant, &read_per_image_csv(&per_image)?);
    let computed: Vec<_> = eval.table.rows.iter().filter(|r| r.variant == variant).collect();
    if recomputed.len() != computed.len()
        || recomputed.iter().zip(&computed).any(|(a, b)| (a.iou - b.iou).abs() > 1e-9 || (a.dice - b.dice).abs() > 1e-9)
    {
        bail!("aggregate table disagrees with per_image.csv");
    }
    if !eval.panels.is_empty() {
        let dir = out.join("panels");
        std::fs::create_dir_all(&dir)?;
        for p in &eval.panels {
            let rank = match p.rank {
                Rank::Best => "best",
                Rank::Worst => "worst",
            };
            p.save(&dir.join(format!("{}_{rank}_{}_iou{:.3}.png", p.organ, p.id, p.iou)))?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    checkpoint: Option<&Path>,
    cup_checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    manifest_path: &Path,
    split: Option<&str>,
    threshold: f64,
    out: &Path,
    overwrite: bool,
) -> Result<()> {
    let manifest = read_manifest(manifest_path)?;
    let split = split.map(|s| s.parse::<Split>().map_err(|e| input_error(e.to_string()))).transpose()?;
    let indices = default_eval_indices(&manifest, split);
    if indices.is_empty() {
        return Err(input_error("no records in the requested split"));
    }
    let eval = match predictions {
        Some(dir) => evaluate_prediction_dir(dir, &manifest, &indices, &format!("predictions ({})", dir.display()))?,
        None => {
            let disc = checkpoint.map(load_model).transpose()?;
            let cup = cup_checkpoint.map(load_model).transpose()?;
            evaluate_models(disc.as_ref(), cup.as_ref(), &manifest, &indices, threshold)?
        }
    };
    prepare_out_dir(out, overwrite)?;
    write_evaluation(&eval, out)?;
    print!("{}", eval.table.to_markdown());
    Ok(())
}

fn cmd_sweep(config_path: &Path, out: Option<PathBuf>, o: &ModelOverrides, overwrite: bool) -> Result<()> {
    let mut cfg = load_config(config_path)?;
    let counts = apply_overrides(&mut cfg, o, false)?.ok_or_else(|| input_error("sweep needs --blocks, e.g. --blocks 1,3,5"))?;
    let out_dir = out.or(cfg.out_dir.clone()).ok_or_else(|| input_error("no output directory: set out_dir or pass --out"))?;
    let manifest = assign_splits(read_manifest(&cfg.manifest)?, &cfg)?;
    prepare_out_dir(&out_dir, overwrite)?;
    std::fs::write(out_dir.join("run_config.toml"), config::to_toml(&cfg))?;
    let rows = sweep_blocks(&counts, &cfg.model, cfg.model_seed, &manifest, &cfg.train, Some(&out_dir))?;
    let plot = out_dir.join("sweep.png");
    plot_sweep(&rows, 640, 400).save(&plot).map_err(|e| anyhow!("{}: {e}", plot.display()))?;
    write_published_csv(&out_dir.join("published_results.csv"))?;
    for r in &rows {
        println!("n_blocks={} disc_iou={:.4} disc_dice={:.4} cup_iou={:?} cup_dice={:?}", r.n_blocks, r.disc_iou, r.disc_dice, r.cup_iou, r.cup_dice);
    }
    Ok(())
}

fn cmd_agreement(manifest_path: &Path, out: Option<&Path>, overwrite: bool) -> Result<()> {
    let manifest = read_manifest(manifest_path)?;
    let report = human_agreement(&manifest)?;
    let mut rows: Vec<BTreeMap<&str, String>> = Vec::new();
    for (organ, a, skipped) in [(Organ::Disc, report.disc, report.skipped_disc), (Organ::Cup, report.cup, report.skipped_cup)] {
        let Some(a) = a else {
            println!("{organ}: no records with two or more annotators (skipped {skipped})");
            continue;
        };
        for (kind, iou, dice) in [("pairwise_binary", a.iou, a.dice), ("vs_soft_consensus", a.soft_iou, a.soft_dice)] {
            println!("{organ} {kind}: IOU {iou:.4} Dice {dice:.4} over {} records (skipped {skipped})", a.records);
            rows.push(BTreeMap::from([
                ("organ", organ.to_string()),
                ("kind", kind.to_string()),
                ("iou", iou.to_string()),
                ("dice", dice.to_string()),
                ("records", a.records.to_string()),
                ("skipped", skipped.to_string()),
            ]));
        }
    }
    if let Some(dir) = out {
        prepare_out_dir(dir, overwrite)?;
        let mut w = csv::Writer::from_path(dir.join("agreement.csv"))?;
        w.write_record(["organ", "kind", "iou", "dice", "records", "skipped"])?;
        for r in &rows {
            w.write_record(["organ", "kind", "iou", "dice", "records", "skipped"].map(|k| r[k].as_str()))?;
        }
        w.flush()?;
    }
    Ok(())
}

//! Command-line front end over the library: training, evaluation, single
//! image detection, fog synthesis, latency benchmarking, and the
//! accuracy-comparison report.
//!
//! The binary target is a thin wrapper around [`run_from_args`]; everything
//! here is ordinary library code so the subcommands stay unit-testable.
//!
//! Exit codes: 0 success; 1 usage or configuration error; 2 data
//! validation error; 3 numeric failure during training.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::core::{DomainTag, ImagePlane};
use crate::error::{Error, Result};
use crate::evalbench::{
    comparison_table, reference_rows, timing_benchmark, EvalReport, TimingReport,
    DEFAULT_IOU_THRESHOLD,
};
use crate::fogsynth::{synthesize_foggy_sample, FogParams};

use super::config::{load_train_config, TrainConfig};
use super::eval::{eval_detect_config, evaluate_model, load_model, per_class_pr_curves};
use super::manifest::{
    load_image_png, load_manifest, save_depth_png, save_image_png, write_manifest,
    AnnotationRecord, DatasetItem, ImageRecord, Manifest,
};
use super::render::{draw_detections, render_pr_curve};
use super::split::split_dataset;
use super::train::{train, METRICS_FILE};

/// Side length of emitted precision-recall plot images.
const PR_PLOT_SIZE: usize = 256;

#[derive(Debug, Parser)]
#[command(
    name = "fogdet",
    version,
    about = "Object detection under fog: synthesis, domain-adaptive training, evaluation",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Training configuration file (TOML mirroring the config structure);
    /// command-line flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the RNG seed from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Force single-worker, fixed-order execution. Execution is serial by
    /// construction, so this flag asserts the reproducibility contract
    /// rather than switching modes.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Directory for checkpoints, metrics, reports, and rendered images.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the detector (with domain adaptation when the manifest has
    /// target-domain images and adaptation is enabled).
    Train(TrainArgs),
    /// Evaluate a checkpoint on an annotated manifest split.
    Eval(EvalArgs),
    /// Detect objects in a single image; writes an overlay PNG and a
    /// detections JSON file.
    Detect(DetectArgs),
    /// Synthesize a fogged twin dataset from clear images.
    Synthfog(SynthfogArgs),
    /// Measure per-image detection latency.
    Bench(BenchArgs),
    /// Emit the accuracy comparison table of published foggy-detection
    /// methods.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest (JSON); may contain both source and target domains.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Override config: number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override config: batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Override config: SGD learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Override config: fraction of epochs trained source-only before
    /// adaptation starts.
    #[arg(long)]
    pub burn_in_fraction: Option<f64>,
    /// Train the source-only baseline (disables all adaptation machinery).
    #[arg(long)]
    pub no_adaptation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Source,
    Target,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Annotated dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Domain to evaluate on.
    #[arg(long, value_enum, default_value_t = DomainArg::All)]
    pub domain: DomainArg,
    /// Which portion of the seeded split to evaluate; the split is
    /// recomputed from the checkpoint's fractions and seed.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// IoU threshold for matching detections to ground truth.
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou: f64,
    /// Skip writing per-class precision-recall plot images.
    #[arg(long)]
    pub no_plots: bool,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Checkpoint holding the trained detector.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (PNG).
    #[arg(long)]
    pub image: PathBuf,
    /// Override the detection score threshold in [0, 1].
    #[arg(long)]
    pub score_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthfogArgs {
    /// Manifest whose source-domain images get fogged twins.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fog attenuation coefficient (1/meters).
    #[arg(long, default_value_t = 0.08)]
    pub beta: f64,
    /// Ambient airlight as "r,g,b", each channel in [0, 1].
    #[arg(long, value_parser = parse_rgb, default_value = "0.8,0.8,0.8")]
    pub airlight: [f64; 3],
    /// Depth in meters assumed for images without a depth map.
    #[arg(long)]
    pub default_depth: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint holding the detector to time.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest supplying the timed images.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of images to time, taken from the front of the manifest.
    #[arg(long, default_value_t = 50)]
    pub num_images: usize,
    /// Throwaway detections before timing starts.
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Timed repeats per image (each image's record is the mean).
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Attach a measured mean detection time (milliseconds) to the final
    /// row (this configuration).
    #[arg(long)]
    pub timing_ms: Option<f64>,
}

fn parse_rgb(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {}", parts.len()));
    }
    let mut rgb = [0.0; 3];
    for (slot, part) in rgb.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("bad channel value '{part}': {e}"))?;
    }
    Ok(rgb)
}

/// Exit code for an argument-parsing outcome: help and version requests
/// succeed, everything else is a usage error.
pub fn clap_exit_code(err: &clap::Error) -> i32 {
    match err.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
        _ => 1,
    }
}

/// Parse the process arguments and run; returns the process exit code.
pub fn run_from_args() -> i32 {
    match Cli::try_parse() {
        Ok(cli) => match run(cli) {
            Ok(()) => 0,
            Err(err) => {
                eprintln!("error: {err}");
                err.exit_code()
            }
        },
        Err(e) => {
            let code = clap_exit_code(&e);
            let _ = e.print();
            code
        }
    }
}

/// Dispatch a parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    let out_dir = cli.global.out_dir.clone();
    fs::create_dir_all(&out_dir)?;
    match cli.command {
        Command::Train(args) => cmd_train(&cli.global, &out_dir, &args),
        Command::Eval(args) => cmd_eval(&cli.global, &out_dir, &args),
        Command::Detect(args) => cmd_detect(&out_dir, &args),
        Command::Synthfog(args) => cmd_synthfog(&out_dir, &args),
        Command::Bench(args) => cmd_bench(&out_dir, &args),
        Command::Compare(args) => cmd_compare(&out_dir, &args),
    }
}

/// Load the configuration named by `--config` (or defaults) and apply the
/// global `--seed` override. Config file problems are usage errors, not
/// data errors.
pub fn load_config(global: &GlobalArgs) -> Result<TrainConfig> {
    let mut cfg = match &global.config {
        Some(path) => load_train_config(path)
            .map_err(|e| Error::invalid(format!("config file: {e}")))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Configuration for a `train` invocation: file or defaults, then global
/// overrides, then train-specific flag overrides, then validation.
pub fn merged_train_config(global: &GlobalArgs, args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = load_config(global)?;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.burn_in_fraction {
        cfg.burn_in_fraction = v;
    }
    if args.no_adaptation {
        cfg.adaptation_enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Parse {
        path: "<json>".to_string(),
        detail: e.to_string(),
    }
}

fn append_metric_line<T: Serialize>(out_dir: &Path, value: &T) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join(METRICS_FILE))?;
    let line = serde_json::to_string(value).map_err(json_err)?;
    writeln!(file, "{line}")?;
    Ok(())
}

fn partition_by_domain(items: Vec<DatasetItem>) -> (Vec<DatasetItem>, Vec<DatasetItem>) {
    items
        .into_iter()
        .partition(|d| d.sample.domain == DomainTag::Source)
}

fn domain_str(d: DomainArg) -> &'static str {
    match d {
        DomainArg::Source => "source",
        DomainArg::Target => "target",
        DomainArg::All => "all",
    }
}

fn split_str(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Valid => "valid",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

/// Recompute the seeded split and keep the requested portion.
fn select_split(
    items: Vec<DatasetItem>,
    fractions: [f64; 3],
    seed: u64,
    which: SplitArg,
) -> Result<Vec<DatasetItem>> {
    if which == SplitArg::All {
        return Ok(items);
    }
    let (train_part, valid_part, test_part) = split_dataset(&items, fractions, seed)?;
    Ok(match which {
        SplitArg::Train => train_part,
        SplitArg::Valid => valid_part,
        SplitArg::Test => test_part,
        SplitArg::All => unreachable!("handled above"),
    })
}

fn cmd_train(global: &GlobalArgs, out_dir: &Path, args: &TrainArgs) -> Result<()> {
    let cfg = merged_train_config(global, args)?;
    let (manifest, items) = load_manifest(&args.manifest)?;
    let n_classes = manifest.num_classes()?;
    if cfg.num_classes != n_classes {
        return Err(Error::invalid(format!(
            "config expects {} classes but the manifest defines {n_classes}; \
             set num_classes to match the dataset",
            cfg.num_classes
        )));
    }
    let (source, target) = partition_by_domain(items);
    if source.is_empty() {
        return Err(Error::invalid(
            "manifest has no source-domain items to train on",
        ));
    }
    let (src_train, src_valid, src_test) = split_dataset(&source, cfg.split, cfg.seed)?;
    let tgt_train = if target.is_empty() {
        Vec::new()
    } else {
        split_dataset(&target, cfg.split, cfg.seed)?.0
    };
    println!(
        "training on {} source / {} target items for {} epochs ({} burn-in){}; \
         holding out {} valid / {} test source items",
        src_train.len(),
        tgt_train.len(),
        cfg.epochs,
        cfg.burn_in_epochs(),
        if global.deterministic {
            ", deterministic"
        } else {
            ""
        },
        src_valid.len(),
        src_test.len(),
    );
    let outcome = train(&cfg, &src_train, &tgt_train, Some(out_dir))?;
    for stats in &outcome.history {
        println!(
            "epoch {:>3} [{}]: mean total loss {:.4}, mean detection loss {:.4}",
            stats.epoch, stats.phase, stats.mean_total, stats.mean_detection
        );
    }
    println!(
        "checkpoint: {}",
        out_dir.join("checkpoint_final.ckpt").display()
    );
    println!("metrics: {}", out_dir.join(METRICS_FILE).display());
    Ok(())
}

#[derive(Serialize)]
struct EvalLine<'a> {
    kind: &'static str,
    checkpoint: String,
    domain: &'static str,
    split: &'static str,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn cmd_eval(global: &GlobalArgs, out_dir: &Path, args: &EvalArgs) -> Result<()> {
    let (model, cfg) = load_model(&args.checkpoint)?;
    let (manifest, items) = load_manifest(&args.manifest)?;
    let n_classes = manifest.num_classes()?;
    if n_classes != model.arch.num_classes {
        return Err(Error::invalid(format!(
            "checkpoint was trained for {} classes but the manifest defines {n_classes}",
            model.arch.num_classes
        )));
    }
    let filtered: Vec<DatasetItem> = items
        .into_iter()
        .filter(|d| match args.domain {
            DomainArg::All => true,
            DomainArg::Source => d.sample.domain == DomainTag::Source,
            DomainArg::Target => d.sample.domain == DomainTag::Target,
        })
        .collect();
    if filtered.is_empty() {
        return Err(Error::invalid(format!(
            "manifest has no items in the requested domain ({})",
            domain_str(args.domain)
        )));
    }
    let seed = global.seed.unwrap_or(cfg.seed);
    let subset = select_split(filtered, cfg.split, seed, args.split)?;
    if subset.is_empty() {
        return Err(Error::invalid(format!(
            "the {} split is empty for this dataset size",
            split_str(args.split)
        )));
    }
    let run = evaluate_model(
        &model,
        subset.iter().map(|d| &d.sample),
        &eval_detect_config(&cfg.detect),
        args.iou,
    )?;
    append_metric_line(
        out_dir,
        &EvalLine {
            kind: "eval",
            checkpoint: args.checkpoint.display().to_string(),
            domain: domain_str(args.domain),
            split: split_str(args.split),
            report: &run.report,
        },
    )?;
    if !args.no_plots {
        let curves = per_class_pr_curves(&run.per_image, n_classes, args.iou)?;
        for (c, points) in curves.iter().enumerate() {
            if points.is_empty() {
                continue;
            }
            let plot = render_pr_curve(points, PR_PLOT_SIZE);
            save_image_png(&plot, &out_dir.join(format!("pr_class_{c:02}.png")))?;
        }
    }
    println!(
        "evaluated {} images ({} domain, {} split): mAP@{} = {:.4}",
        run.report.num_images,
        domain_str(args.domain),
        split_str(args.split),
        args.iou,
        run.report.map
    );
    for (c, ap) in run.report.per_class_ap.iter().enumerate() {
        let name = manifest
            .categories
            .get(c)
            .map(|cat| cat.name.as_str())
            .unwrap_or("?");
        match ap {
            Some(v) => println!("  class {c} ({name}): AP {v:.4}"),
            None => println!("  class {c} ({name}): no ground truth"),
        }
    }
    println!("metrics appended: {}", out_dir.join(METRICS_FILE).display());
    Ok(())
}

fn cmd_detect(out_dir: &Path, args: &DetectArgs) -> Result<()> {
    let (model, cfg) = load_model(&args.checkpoint)?;
    let image = load_image_png(&args.image)?;
    let mut detect_cfg = cfg.detect.clone();
    if let Some(t) = args.score_threshold {
        if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
            return Err(Error::invalid(format!(
                "score threshold must lie in [0, 1], got {t}"
            )));
        }
        detect_cfg.score_threshold = t;
    }
    let detections = model.detect(&image, &detect_cfg)?;
    let stem = args
        .image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let json_path = out_dir.join(format!("{stem}_detections.json"));
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&detections).map_err(json_err)?,
    )?;
    let overlay_path = out_dir.join(format!("{stem}_overlay.png"));
    save_image_png(&draw_detections(&image, &detections), &overlay_path)?;
    println!(
        "{} detections at threshold {}",
        detections.len(),
        detect_cfg.score_threshold
    );
    println!("detections: {}", json_path.display());
    println!("overlay: {}", overlay_path.display());
    Ok(())
}

fn cmd_synthfog(out_dir: &Path, args: &SynthfogArgs) -> Result<()> {
    let fog = FogParams {
        beta: args.beta,
        airlight: args.airlight,
        default_depth: args
            .default_depth
            .unwrap_or_else(|| FogParams::default().default_depth),
    };
    fog.validate()?;
    let (manifest, items) = load_manifest(&args.manifest)?;
    let sources: Vec<&DatasetItem> = items
        .iter()
        .filter(|d| d.sample.domain == DomainTag::Source)
        .collect();
    if sources.is_empty() {
        return Err(Error::invalid(
            "manifest has no source-domain images to fog",
        ));
    }
    fs::create_dir_all(out_dir.join("images"))?;
    let mut images = Vec::with_capacity(2 * sources.len());
    for (i, item) in sources.iter().enumerate() {
        let s = &item.sample;
        let foggy = synthesize_foggy_sample(s, &fog)?;
        let clear_rel = format!("images/clear_{i:04}.png");
        let foggy_rel = format!("images/foggy_{i:04}.png");
        save_image_png(&s.image, &out_dir.join(&clear_rel))?;
        save_image_png(&foggy.image, &out_dir.join(&foggy_rel))?;
        let depth_rel = match &s.depth {
            Some(d) => {
                let rel = format!("depths/clear_{i:04}.png");
                fs::create_dir_all(out_dir.join("depths"))?;
                save_depth_png(d, &out_dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        let annotations: Vec<AnnotationRecord> = s
            .annotations
            .iter()
            .map(|a| AnnotationRecord {
                bbox: [a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2],
                category_id: a.category_id,
            })
            .collect();
        images.push(ImageRecord {
            path: clear_rel.clone(),
            width: s.image.width(),
            height: s.image.height(),
            domain: DomainTag::Source,
            depth_path: depth_rel,
            clear_path: None,
            annotations: annotations.clone(),
        });
        images.push(ImageRecord {
            path: foggy_rel,
            width: s.image.width(),
            height: s.image.height(),
            domain: DomainTag::Target,
            depth_path: None,
            clear_path: Some(clear_rel),
            annotations,
        });
    }
    let out_manifest = Manifest {
        categories: manifest.categories.clone(),
        images,
    };
    let manifest_path = out_dir.join("manifest.json");
    write_manifest(&out_manifest, &manifest_path)?;
    println!(
        "fogged {} images with beta {} (airlight {:?})",
        sources.len(),
        args.beta,
        args.airlight
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

#[derive(Serialize)]
struct BenchLine<'a> {
    kind: &'static str,
    checkpoint: String,
    #[serde(flatten)]
    report: &'a TimingReport,
}

fn cmd_bench(out_dir: &Path, args: &BenchArgs) -> Result<()> {
    if args.num_images == 0 {
        return Err(Error::invalid("num_images must be >= 1"));
    }
    let (model, cfg) = load_model(&args.checkpoint)?;
    let (_, items) = load_manifest(&args.manifest)?;
    let images: Vec<ImagePlane> = items
        .iter()
        .take(args.num_images)
        .map(|d| d.sample.image.clone())
        .collect();
    let report = timing_benchmark(
        &model,
        &images,
        &eval_detect_config(&cfg.detect),
        args.warmup,
        args.repeats,
    )?;
    let path = out_dir.join("timing.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&report).map_err(json_err)?,
    )?;
    append_metric_line(
        out_dir,
        &BenchLine {
            kind: "bench",
            checkpoint: args.checkpoint.display().to_string(),
            report: &report,
        },
    )?;
    println!(
        "timed {} images: mean {:.2} ms, median {:.2} ms, p95 {:.2} ms",
        report.latencies_ms.len(),
        report.mean_ms,
        report.median_ms,
        report.p95_ms
    );
    println!("hardware: {}", report.hardware_note);
    println!("report: {}", path.display());
    Ok(())
}

fn cmd_compare(out_dir: &Path, args: &CompareArgs) -> Result<()> {
    let mut rows = reference_rows();
    if let Some(t) = args.timing_ms {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::invalid(format!(
                "timing must be a positive number of milliseconds, got {t}"
            )));
        }
        if let Some(last) = rows.last_mut() {
            last.timing_ms = Some(t);
        }
    }
    let text = comparison_table(&rows)?;
    let text_path = out_dir.join("comparison.txt");
    let json_path = out_dir.join("comparison.json");
    fs::write(&text_path, &text)?;
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&rows).map_err(json_err)?,
    )?;
    print!("{text}");
    println!(
        "written: {} and {}",
        text_path.display(),
        json_path.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn every_subcommand_parses_with_global_flags() {
        let cli = Cli::try_parse_from([
            "fogdet", "train", "--manifest", "m.json", "--seed", "7", "--out-dir", "x",
            "--deterministic",
        ])
        .unwrap();
        assert_eq!(cli.global.seed, Some(7));
        assert!(cli.global.deterministic);
        assert_eq!(cli.global.out_dir, PathBuf::from("x"));
        assert!(matches!(cli.command, Command::Train(_)));

        for argv in [
            vec!["fogdet", "eval", "--checkpoint", "c", "--manifest", "m", "--domain", "target",
                 "--split", "valid"],
            vec!["fogdet", "detect", "--checkpoint", "c", "--image", "i.png"],
            vec!["fogdet", "synthfog", "--manifest", "m", "--beta", "0.1"],
            vec!["fogdet", "bench", "--checkpoint", "c", "--manifest", "m", "--num-images", "10"],
            vec!["fogdet", "compare"],
        ] {
            Cli::try_parse_from(&argv)
                .unwrap_or_else(|e| panic!("{argv:?} failed to parse: {e}"));
        }
    }

    #[test]
    fn clap_error_codes_follow_the_contract() {
        let help = Cli::try_parse_from(["fogdet", "--help"]).unwrap_err();
        assert_eq!(clap_exit_code(&help), 0);
        let version = Cli::try_parse_from(["fogdet", "--version"]).unwrap_err();
        assert_eq!(clap_exit_code(&version), 0);
        let unknown = Cli::try_parse_from(["fogdet", "frobnicate"]).unwrap_err();
        assert_eq!(clap_exit_code(&unknown), 1);
        let bare = Cli::try_parse_from(["fogdet"]).unwrap_err();
        assert_eq!(clap_exit_code(&bare), 1);
        let missing = Cli::try_parse_from(["fogdet", "train"]).unwrap_err();
        assert_eq!(clap_exit_code(&missing), 1, "train requires --manifest");
    }

    #[test]
    fn config_file_then_flag_overrides() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "epochs = 3\nseed = 11\nlearning_rate = 0.5\n").unwrap();
        let global = GlobalArgs {
            config: Some(path),
            seed: Some(9),
            deterministic: false,
            out_dir: PathBuf::from("out"),
        };
        let args = TrainArgs {
            manifest: PathBuf::from("m.json"),
            epochs: Some(5),
            batch_size: None,
            learning_rate: None,
            burn_in_fraction: None,
            no_adaptation: true,
        };
        let cfg = merged_train_config(&global, &args).unwrap();
        assert_eq!(cfg.epochs, 5, "flag beats file");
        assert_eq!(cfg.seed, 9, "global --seed beats file");
        assert_eq!(cfg.learning_rate, 0.5, "file beats default");
        assert!(!cfg.adaptation_enabled);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "epochs = \"many\"\n").unwrap();
        let global = GlobalArgs {
            config: Some(path.clone()),
            seed: None,
            deterministic: false,
            out_dir: PathBuf::from("out"),
        };
        let err = load_config(&global).unwrap_err();
        assert_eq!(err.exit_code(), 1, "bad config file exits 1, got {err}");

        let missing = GlobalArgs {
            config: Some(dir.path().join("absent.toml")),
            seed: None,
            deterministic: false,
            out_dir: PathBuf::from("out"),
        };
        let err = load_config(&missing).unwrap_err();
        assert_eq!(err.exit_code(), 1, "missing config file exits 1");

        // invalid field values are caught at merge time
        std::fs::write(&path, "epochs = 0\n").unwrap();
        let args = TrainArgs {
            manifest: PathBuf::from("m.json"),
            epochs: None,
            batch_size: None,
            learning_rate: None,
            burn_in_fraction: None,
            no_adaptation: false,
        };
        let err = merged_train_config(&global, &args).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn rgb_parser_accepts_triples_only() {
        assert_eq!(parse_rgb("0.5,0.6,0.7").unwrap(), [0.5, 0.6, 0.7]);
        assert_eq!(parse_rgb(" 0.1, 0.2 ,0.3 ").unwrap(), [0.1, 0.2, 0.3]);
        assert!(parse_rgb("1,2").is_err());
        assert!(parse_rgb("a,b,c").is_err());
        assert!(parse_rgb("1,2,3,4").is_err());
    }

    #[test]
    fn compare_writes_both_report_forms() {
        let dir = TempDir::new().unwrap();
        cmd_compare(
            dir.path(),
            &CompareArgs {
                timing_ms: Some(12.5),
            },
        )
        .unwrap();
        let text = std::fs::read_to_string(dir.path().join("comparison.txt")).unwrap();
        assert!(text.contains("85.2%"));
        assert!(text.contains("12.5"));
        let rows: Vec<crate::evalbench::ComparisonRow> = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("comparison.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].timing_ms, Some(12.5));
        let parsed = crate::evalbench::parse_comparison_table(&text).unwrap();
        assert_eq!(parsed, rows, "text table round-trips to the same rows");
    }
}

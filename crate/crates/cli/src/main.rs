//! Command-line front end: data generation, the three training stages,
//! inference and evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use relume_core::dataset::{load_dataset, match_stems, png_stems, save_dataset};
use relume_core::image::{Image, Mask, ShadowSample};
use relume_core::pipeline::{
    evaluate_dirs, train_decomposition, train_diffusion, train_restore, CheckpointPaths, Pipeline,
    PipelineConfig, Preset, RunManifest, StageOptions, StageReport,
};
use relume_core::synth::generate_samples;

const MANIFEST: &str = "manifest.json";

#[derive(Parser)]
#[command(
    name = "relume",
    version,
    about = "Shadow removal with retinex decomposition and local diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shadow / shadow-free / mask dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the decomposition networks.
    TrainDecomp(TrainArgs),
    /// Train the local lighting diffusion model on frozen decompositions.
    TrainDiffusion(TrainArgs),
    /// Train the restoration network on frozen upstream stages.
    TrainRestore(TrainArgs),
    /// Run the full pipeline over images and masks.
    Infer {
        /// Run directory holding the three checkpoints.
        #[arg(long)]
        run: PathBuf,
        /// A PNG file or a directory of PNGs.
        #[arg(long)]
        images: PathBuf,
        /// Mask file or directory with stems matching `--images`.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write reflectance, illumination and corrected illumination.
        #[arg(long)]
        dump_intermediates: bool,
    },
    /// Score predictions against ground truth per region.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Directory for report.jsonl and report.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root with shadow/, shadow_free/ and mask/.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and the manifest.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_parser = ["desk", "paper"], default_value = "desk")]
    preset: String,
    /// Flat `key = value` overrides applied after the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation variant name, applied after the config file.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from an existing checkpoint of this stage.
    #[arg(long)]
    resume: bool,
    /// Stop after this many steps in total (checkpointed, resumable).
    #[arg(long)]
    stop_after: Option<usize>,
}

impl TrainArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::preset(Preset::from_name(&self.preset)?);
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(v) = &self.variant {
            cfg.apply_variant(v)?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn options(&self) -> StageOptions {
        StageOptions {
            resume: self.resume,
            stop_after: self.stop_after,
        }
    }
}

type Stage = fn(
    &PipelineConfig,
    &[ShadowSample],
    &CheckpointPaths,
    &StageOptions,
) -> relume_core::Result<StageReport>;

fn train(args: &TrainArgs, stage: Stage) -> Result<()> {
    let cfg = args.config()?;
    let data = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.run)
        .with_context(|| format!("creating {}", args.run.display()))?;
    let paths = CheckpointPaths::in_dir(&args.run);
    let report = stage(&cfg, &data, &paths, &args.options())?;
    let manifest_path = args.run.join(MANIFEST);
    let mut manifest = RunManifest::load_or_new(&manifest_path, cfg.train.seed)?;
    manifest.record(&cfg, &report);
    manifest.save(&manifest_path)?;
    log::info!(
        "{} finished {}/{} steps, probe loss {:.5} -> {:.5}, sha256 {}",
        report.kind,
        report.steps,
        report.total_steps,
        report.probe_initial,
        report.probe_final,
        report.sha256
    );
    Ok(())
}

/// `(stem, image, mask)` triples from a file pair or two directories.
fn infer_inputs(images: &Path, masks: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if images.is_file() {
        if !masks.is_file() {
            bail!("--images is a file, so --masks must be one too");
        }
        let stem = images
            .file_stem()
            .context("image path has no stem")?
            .to_string_lossy()
            .into_owned();
        return Ok(vec![(stem, images.to_path_buf(), masks.to_path_buf())]);
    }
    let (matched, unmatched) = match_stems(&[images, masks])?;
    if !unmatched.is_empty() {
        bail!(
            "images without masks or masks without images: {}",
            unmatched.join(", ")
        );
    }
    let files = png_stems(images)?;
    let mask_files = png_stems(masks)?;
    Ok(matched
        .into_iter()
        .map(|s| (s.clone(), files[&s].clone(), mask_files[&s].clone()))
        .collect())
}

fn infer(run: &Path, images: &Path, masks: &Path, out: &Path, seed: u64, dump: bool) -> Result<()> {
    let pipeline = Pipeline::load(&CheckpointPaths::in_dir(run))?;
    let inputs = infer_inputs(images, masks)?;
    if inputs.is_empty() {
        bail!("no input images under {}", images.display());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let dump_dir = out.join("intermediates");
    if dump {
        std::fs::create_dir_all(&dump_dir)
            .with_context(|| format!("creating {}", dump_dir.display()))?;
    }
    for (stem, image, mask) in inputs {
        let result = pipeline.run(&Image::load(&image)?, &Mask::load(&mask)?, seed)?;
        result.prediction.save(out.join(format!("{stem}.png")))?;
        if dump {
            for (name, img) in result.intermediates() {
                img.save(dump_dir.join(format!("{stem}_{name}.png")))?;
            }
        }
        log::info!("{stem} done");
    }
    Ok(())
}

fn eval(pred: &Path, gt: &Path, mask: &Path, out: &Path) -> Result<ExitCode> {
    let report = evaluate_dirs(pred, gt, mask)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    report.write(&out.join("report.jsonl"), &out.join("report.csv"))?;
    if let Some(m) = &report.mean {
        println!(
            "{} images: RMSE S/NS/All {:.3}/{:.3}/{:.3}  PSNR {:.2}/{:.2}/{:.2}  SSIM {:.4}/{:.4}/{:.4}",
            report.rows.len(),
            m.rmse_s,
            m.rmse_ns,
            m.rmse_all,
            m.psnr_s,
            m.psnr_ns,
            m.psnr_all,
            m.ssim_s,
            m.ssim_ns,
            m.ssim_all
        );
    }
    if report.unmatched.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("skipped unmatched files: {}", report.unmatched.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            out,
            count,
            size,
            seed,
        } => {
            save_dataset(&out, &generate_samples(count, size, seed)?)?;
            log::info!("wrote {count} samples to {}", out.display());
        }
        Command::TrainDecomp(args) => train(&args, |cfg, data, p, o| {
            train_decomposition(cfg, data, &p.decomposition, o)
        })?,
        Command::TrainDiffusion(args) => train(&args, |cfg, data, p, o| {
            train_diffusion(cfg, data, &p.decomposition, &p.diffusion, o)
        })?,
        Command::TrainRestore(args) => train(&args, |cfg, data, p, o| {
            train_restore(cfg, data, &p.decomposition, &p.diffusion, &p.restoration, o)
        })?,
        Command::Infer {
            run,
            images,
            masks,
            out,
            seed,
            dump_intermediates,
        } => infer(&run, &images, &masks, &out, seed, dump_intermediates)?,
        Command::Eval {
            pred,
            gt,
            mask,
            out,
        } => return eval(&pred, &gt, &mask, &out),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

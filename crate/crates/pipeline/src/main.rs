use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};

use stda_adversarial::params::save_predictor;
use stda_adversarial::{train, Banks, TrainConfig};
use stda_core::io::{load_mask, load_patch, save_field, save_patch};
use stda_core::{fit, solve_field, warp, BoundingBox, SolverConfig};
use stda_pipeline::augment::augment_dataset;
use stda_pipeline::corpus::{write_corpus, CorpusSpec};
use stda_pipeline::dataset::{load_annotations, load_bank};
use stda_pipeline::eval::evaluate;
use stda_pipeline::{AugmentConfig, DeformMode};

#[derive(Parser)]
#[command(
    name = "stda",
    version,
    about = "Shape-transformation augmentation for pedestrian datasets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Solver,
    Predictor,
}

#[derive(Subcommand)]
enum Command {
    /// Optimise a warping field that deforms an exemplar mask onto a target mask.
    Solve {
        #[arg(long)]
        exemplar_image: PathBuf,
        #[arg(long)]
        exemplar_mask: PathBuf,
        #[arg(long)]
        target_mask: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_field: PathBuf,
        #[arg(long)]
        out_patch: PathBuf,
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Train the field/blend predictor on an exemplar bank.
    Train {
        #[arg(long)]
        banks: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_params: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fit the linear height law to existing annotations.
    FitPlacement {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long, default_value_t = 480)]
        image_height: usize,
        #[arg(long, default_value_t = 640)]
        image_width: usize,
    },
    /// Write a procedural dataset: scenes, manifest and exemplar bank.
    GenCorpus {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Augment every image of a manifest.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Exemplar bank; overrides the config file.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        placement_model: Option<PathBuf>,
        #[arg(long)]
        predictor_params: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        preview: Option<usize>,
    },
    /// Re-check the invariants of an augmented directory.
    Eval {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Solve {
            exemplar_image,
            exemplar_mask,
            target_mask,
            config,
            out_field,
            out_patch,
            diagnostics,
        } => {
            let cfg: SolverConfig = read_config(config.as_ref())?;
            let z = load_patch(&exemplar_image)?;
            let s = load_mask(&exemplar_mask)?;
            let t = load_mask(&target_mask)?;
            let (forward, _, diag) = solve_field(&z, &s, &t, &cfg)?;
            save_field(&forward, &out_field)?;
            save_patch(&warp(&z, &forward)?, &out_patch)?;
            if let Some(p) = diagnostics {
                std::fs::write(&p, serde_json::to_string_pretty(&diag)?)?;
            }
            println!(
                "iterations {} final loss {:.6} shape {:.6}",
                diag.iterations, diag.final_loss, diag.final_shape
            );
        }
        Command::Train {
            banks,
            config,
            out_params,
            report,
        } => {
            let cfg: TrainConfig = read_config(config.as_ref())?;
            let mut b = Banks::default();
            let entries = load_bank(&banks)?;
            for e in &entries {
                let patch = load_patch(&e.patch)?;
                match &e.mask {
                    Some(m) => {
                        let mask = load_mask(m)?;
                        b.shapes.push(mask.clone());
                        b.exemplars.push((patch, mask));
                    }
                    None => b.backgrounds.push(patch),
                }
            }
            if b.backgrounds.is_empty() {
                bail!("the bank has no background entries (entries without a mask)");
            }
            let (trained, rep) = train(&b, &cfg)?;
            save_predictor(&trained.predictor, &out_params)?;
            if let Some(p) = report {
                std::fs::write(&p, serde_json::to_string(&rep)?)?;
            }
            println!(
                "steps {} loss {:.4} -> {:.4} ({:.1}% lower), D/R updates {}/{}",
                rep.steps,
                rep.initial_loss,
                rep.final_loss,
                100.0 * rep.reduction,
                rep.d_updates,
                rep.r_updates
            );
        }
        Command::FitPlacement {
            annotations,
            out_model,
            image_height,
            image_width,
        } => {
            let records = load_annotations(&annotations)?;
            let boxes: Vec<BoundingBox> = records.iter().filter(|r| !r.synthetic).map(|r| r.bbox).collect();
            let model = fit(&boxes, image_height, image_width)?;
            std::fs::write(&out_model, serde_json::to_string_pretty(&model)?)?;
            println!(
                "h = {:.4} * y_bottom + {:.3}, aspect {:.3}",
                model.k, model.b, model.aspect_ratio
            );
        }
        Command::GenCorpus { count, seed, out_dir } => {
            write_corpus(&CorpusSpec::new(count), seed, &out_dir)?;
            println!("wrote {count} scenes to {}", out_dir.display());
        }
        Command::Augment {
            manifest,
            out_dir,
            config,
            seed,
            bank,
            placement_model,
            predictor_params,
            mode,
            preview,
        } => {
            let mut cfg: AugmentConfig = read_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if bank.is_some() {
                cfg.bank = bank;
            }
            if placement_model.is_some() {
                cfg.placement_model = placement_model;
            }
            if predictor_params.is_some() {
                cfg.predictor_params = predictor_params;
            }
            if let Some(m) = mode {
                cfg.mode = match m {
                    Mode::Solver => DeformMode::Solver,
                    Mode::Predictor => DeformMode::Predictor,
                };
            }
            if let Some(n) = preview {
                cfg.preview = n;
            }
            let report = augment_dataset(&manifest, &out_dir, &cfg)?;
            println!(
                "{} images, {} synthetic instances, {} skipped, {} failed in {:.1}s",
                report.images,
                report.synthetic_instances,
                report.skipped_instances.len(),
                report.failed.len(),
                report.seconds
            );
            for f in &report.failed {
                eprintln!("failed {}: {}", f.image, f.reason);
            }
            if !report.is_clean() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Eval { out_dir } => {
            let report = evaluate(&out_dir)?;
            print!("{}", report.table());
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

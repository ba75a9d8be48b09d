//! Command-line surface: dataset synthesis, training, generation,
//! evaluation, gradient checking, and the ablation runner. Every run writes
//! a manifest with the fully resolved configuration so it can be reproduced
//! bit for bit.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gtgan_autodiff::{load_checkpoint, save_checkpoint, ParamStore64};

use crate::data::{
    load_dataset, save_dataset, synthesize_dataset, DatasetSpec, RoomCountSubset,
};
use crate::error::{GtganError, Result};
use crate::eval::{evaluate, mask_to_pgm, rasterize};
use crate::generator::{generate, Generator};
use crate::gradsuite::run_gradient_suite;
use crate::graph::BubbleDiagram;
use crate::training::{AblationVariant, PipelineConfig, Trainer};

pub const MANIFEST_VERSION: &str = "gtgan-manifest-v1";

#[derive(Debug, Parser)]
#[command(
    name = "gtgan",
    version,
    about = "Graph-constrained house layout generation with a graph-transformer GAN"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Base configuration bundle to start from when no config file is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    /// Published model sizes (slow on one CPU core).
    Paper,
    /// Shrunk dimensions for CPU-scale experiments.
    Desk,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON pipeline configuration; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text)?
            }
            None => match self.preset {
                Preset::Paper => PipelineConfig::default(),
                Preset::Desk => PipelineConfig::desk(),
            },
        };
        config.train.seed = self.seed;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of diagram/layout pairs.
    SynthData {
        /// Room-count band: 1-3, 4-6, 7-9, 10-12 or 13+.
        #[arg(long)]
        subset: RoomCountSubset2,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Canvas edge length in pixels; must match the model mask size the
        /// dataset will train.
        #[arg(long, default_value_t = 32)]
        canvas: u32,
        /// Output dataset file (newline-delimited JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the adversarial pipeline on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a layout from a bubble-diagram JSON file.
    Generate {
        #[arg(long)]
        diagram: PathBuf,
        /// Checkpoint to load; fresh seeded parameters when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-room probability masks as PGM images.
        #[arg(long)]
        dump_masks: bool,
        /// Also write every attention matrix as JSON.
        #[arg(long)]
        dump_attention: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on a dataset: compatibility and diversity.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write rasterized generated layouts as PPM images.
        #[arg(long)]
        dump_rasters: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one of the study variants B1..B11.
    Ablate {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// clap-friendly wrapper: RoomCountSubset parses from its display strings.
#[derive(Debug, Clone, Copy)]
struct RoomCountSubset2(RoomCountSubset);

impl std::str::FromStr for RoomCountSubset2 {
    type Err = GtganError;

    fn from_str(s: &str) -> Result<Self> {
        s.parse().map(Self)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    subcommand: &'a str,
    argv: Vec<String>,
    resolved: serde_json::Value,
}

fn write_manifest(dir: &Path, subcommand: &str, resolved: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        subcommand,
        argv: std::env::args().collect(),
        resolved,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn load_params_or_init(
    checkpoint: &Option<PathBuf>,
    trainer: &Trainer,
) -> Result<ParamStore64> {
    match checkpoint {
        Some(path) => Ok(load_checkpoint(path)?),
        None => Ok(trainer.init_params()),
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints usage itself; 2 for usage errors, 0 for --help.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::SynthData {
            subset,
            count,
            seed,
            canvas,
            out,
        } => {
            let spec = DatasetSpec::new(count, subset.0, seed, canvas);
            let samples = synthesize_dataset(&spec)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            save_dataset(&samples, &out)?;
            let dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
            write_manifest(
                &dir,
                "synth-data",
                serde_json::json!({ "spec": spec, "out": out, "samples": samples.len() }),
            )?;
            println!("wrote {} samples to {}", samples.len(), out.display());
            Ok(0)
        }
        Command::Train {
            dataset,
            out,
            steps,
            config,
        } => {
            let mut pipeline = config.resolve()?;
            if let Some(steps) = steps {
                pipeline.train.steps = steps;
            }
            let samples = load_dataset(&dataset)?;
            write_manifest(
                &out,
                "train",
                serde_json::json!({ "dataset": dataset, "config": pipeline }),
            )?;
            let trainer = Trainer::new(pipeline)?;
            let outcome = trainer.train(&samples, Some(&out))?;
            let last = outcome.metrics.last().expect("steps > 0");
            println!(
                "trained {} steps: loss_d {:.4}, loss_g_adv {:.4}, loss_cls {:.4}, loss_gcyc {:.4}",
                outcome.metrics.len(),
                last.loss_d,
                last.loss_g_adv,
                last.loss_cls,
                last.loss_gcyc
            );
            Ok(0)
        }
        Command::Generate {
            diagram,
            checkpoint,
            out,
            dump_masks,
            dump_attention,
            config,
        } => {
            let pipeline = config.resolve()?;
            let text = std::fs::read_to_string(&diagram)?;
            let bubble: BubbleDiagram = serde_json::from_str(&text)?;
            write_manifest(
                &out,
                "generate",
                serde_json::json!({
                    "diagram": diagram,
                    "checkpoint": checkpoint,
                    "config": pipeline,
                    "dump_masks": dump_masks,
                    "dump_attention": dump_attention,
                }),
            )?;
            let trainer = Trainer::new(pipeline.clone())?;
            let params = load_params_or_init(&checkpoint, &trainer)?;
            let generator = Generator::new(pipeline.generator.clone())?;
            let (layout, masks, attention) =
                generate(&generator, &params, &bubble, config.seed)?;
            std::fs::write(out.join("layout.json"), serde_json::to_string_pretty(&layout)?)?;
            if dump_masks {
                for (i, mask) in masks.iter().enumerate() {
                    std::fs::write(out.join(format!("mask_{i:03}.pgm")), mask_to_pgm(mask))?;
                }
            }
            if dump_attention {
                let dump: Vec<serde_json::Value> = attention
                    .iter()
                    .map(|(rec, value)| {
                        serde_json::json!({
                            "layer": rec.layer,
                            "branch": rec.branch,
                            "block": rec.block,
                            "node": rec.node,
                            "head": rec.head,
                            "shape": value.shape(),
                            "rows": value.shape().first().copied().unwrap_or(0),
                            "data": value.data(),
                        })
                    })
                    .collect();
                std::fs::write(
                    out.join("attention.json"),
                    serde_json::to_string(&dump)?,
                )?;
            }
            println!(
                "generated {} rooms into {}",
                layout.rooms.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Eval {
            dataset,
            checkpoint,
            out,
            dump_rasters,
            config,
        } => {
            let pipeline = config.resolve()?;
            let samples = load_dataset(&dataset)?;
            write_manifest(
                &out,
                "eval",
                serde_json::json!({
                    "dataset": dataset,
                    "checkpoint": checkpoint,
                    "config": pipeline,
                    "dump_rasters": dump_rasters,
                }),
            )?;
            let trainer = Trainer::new(pipeline.clone())?;
            let params = load_params_or_init(&checkpoint, &trainer)?;
            let generator = Generator::new(pipeline.generator.clone())?;
            let diagrams: Vec<BubbleDiagram> =
                samples.iter().map(|s| s.diagram.clone()).collect();
            let (report, layouts) = evaluate(&generator, &params, &diagrams, config.seed)?;
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            if dump_rasters {
                for (i, layout) in layouts.iter().enumerate() {
                    let raster = rasterize(layout, pipeline.generator.mask_size as u32);
                    raster.write_ppm(&out.join(format!("raster_{i:03}.ppm")))?;
                }
            }
            println!(
                "mean compatibility {:.4}, median {:.1}, diversity {:.4} over {} samples",
                report.mean_compatibility,
                report.median_compatibility,
                report.diversity_proxy,
                report.samples.len()
            );
            Ok(0)
        }
        Command::Gradcheck { out, seed } => {
            let results = run_gradient_suite(seed)?;
            write_manifest(&out, "gradcheck", serde_json::json!({ "seed": seed }))?;
            std::fs::write(
                out.join("gradcheck.json"),
                serde_json::to_string_pretty(&results)?,
            )?;
            let mut all_ok = true;
            for r in &results {
                println!(
                    "{} {} (max rel err {:.2e}, {} coords)",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.coords_checked
                );
                all_ok &= r.passed();
            }
            Ok(if all_ok { 0 } else { 1 })
        }
        Command::Ablate {
            variant,
            dataset,
            out,
            steps,
            config,
        } => {
            let variant: AblationVariant = variant.parse()?;
            let mut pipeline = variant.apply(&config.resolve()?);
            if let Some(steps) = steps {
                pipeline.train.steps = steps;
            }
            let samples = load_dataset(&dataset)?;
            write_manifest(
                &out,
                "ablate",
                serde_json::json!({
                    "variant": variant,
                    "dataset": dataset,
                    "config": pipeline,
                }),
            )?;
            let trainer = Trainer::new(pipeline.clone())?;
            let outcome = trainer.train(&samples, Some(&out))?;
            // Evaluate the trained variant on its own training diagrams.
            let generator = Generator::new(pipeline.generator.clone())?;
            let diagrams: Vec<BubbleDiagram> =
                samples.iter().map(|s| s.diagram.clone()).collect();
            let (report, _) = evaluate(&generator, &outcome.params, &diagrams, config.seed)?;
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            save_checkpoint(&outcome.params, &out.join("checkpoint_final.json"))?;
            println!(
                "variant {variant:?}: mean compatibility {:.4} after {} steps",
                report.mean_compatibility,
                outcome.metrics.len()
            );
            Ok(0)
        }
    }
}

//! Command-line front end: `run`, `validate`, `analyze`, `score` and
//! `metrics`.
//!
//! Exit codes: 0 success, 1 domain error (JSON on stderr), 2 usage error.

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::arch::{analyze, build_graph, validate_source, Diagnostic, DEFAULT_IMGSZ};
use crate::detection::{coco_iou_grid, evaluate_detections, load_detections, load_kitti_labels, ClassMap};
use crate::evolution::{run_evolution, RunConfig, RunOptions, Variation};
use crate::genome::{detect_mode, parse_genome, GeMode};
use crate::moo::export::export_metrics;

#[derive(Debug, Parser)]
#[command(name = "archevo", version, about = "Evolve and inspect detector architecture files")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Auto,
    Ge1,
    Ge2,
}

impl ModeArg {
    fn resolve(self, text: &str) -> GeMode {
        match self {
            ModeArg::Auto => detect_mode(text),
            ModeArg::Ge1 => GeMode::Ge1,
            ModeArg::Ge2 => GeMode::Ge2,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run (or resume) an evolution described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        generations: Option<usize>,
        #[arg(long)]
        population: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        fault_rate: Option<f64>,
        /// Stop after this many generations have been logged.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Check that a genome parses and builds; exit 1 when it does not.
    Validate {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        mode: ModeArg,
    },
    /// Print parameter and cost figures as JSON.
    Analyze {
        file: PathBuf,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long, default_value_t = DEFAULT_IMGSZ)]
        imgsz: u64,
        #[arg(long, value_enum, default_value = "auto")]
        mode: ModeArg,
    },
    /// Score JSONL detections against KITTI labels.
    Score {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        min_conf: f64,
    },
    /// Export archive sizes, hypervolume and merged front tables.
    Metrics {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "figs")]
        out: PathBuf,
        /// Normalize all runs with one set of bounds.
        #[arg(long)]
        joint: bool,
    },
}

struct Failure(serde_json::Value);

impl Failure {
    fn msg(kind: &str, e: impl Display) -> Self {
        Failure(json!({ "error": kind, "message": e.to_string() }))
    }

    fn diagnostics(kind: &str, d: &[Diagnostic]) -> Self {
        Failure(json!({ "error": kind, "diagnostics": d }))
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::msg("io", format!("{}: {e}", path.display())))
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes")
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32, Failure> {
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| Failure::msg("io", e));
    match cmd {
        Command::Run {
            config,
            out: dir,
            generations,
            population,
            seed,
            fault_rate,
            stop_after,
        } => {
            let mut cfg = RunConfig::load(&config).map_err(|e| Failure::msg("config", e))?;
            if let Some(g) = generations {
                cfg.generations = g;
            }
            if let Some(p) = population {
                cfg.population_size = p;
            }
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            if let Some(f) = fault_rate {
                cfg.fault_rate = f;
            }
            let variation = Variation::from_config(&cfg.operator).map_err(|e| Failure::msg("config", e))?;
            let log = run_evolution(&cfg, &variation, &dir, &RunOptions { stop_after }).map_err(|e| match e {
                crate::evolution::EvolutionError::SeedInvalid { ref diagnostics, .. } => {
                    Failure(json!({ "error": "seed_invalid", "message": e.to_string(), "diagnostics": diagnostics }))
                }
                other => Failure::msg("run", other),
            })?;
            match log.report {
                Some(r) => w(out, pretty(&r))?,
                None => w(out, pretty(&json!({ "stopped_after": log.records.len() })))?,
            }
            Ok(0)
        }
        Command::Validate { file, mode } => {
            let text = read(&file)?;
            let verdict = validate_source(&text, mode.resolve(&text));
            if verdict.valid {
                w(out, "valid".into())?;
                Ok(0)
            } else {
                w(out, "invalid".into())?;
                Err(Failure::diagnostics("invalid_genome", &verdict.diagnostics))
            }
        }
        Command::Analyze {
            file,
            scale,
            imgsz,
            mode,
        } => {
            let text = read(&file)?;
            let g = parse_genome(&text, mode.resolve(&text))
                .map_err(|e| Failure::diagnostics("invalid_genome", &[Diagnostic::from(&e)]))?;
            let graph = build_graph(&g, scale.as_deref())
                .map_err(|e| Failure::diagnostics("invalid_genome", &[Diagnostic::from(&e)]))?;
            w(out, pretty(&analyze(&graph, (imgsz, imgsz))))?;
            Ok(0)
        }
        Command::Score { dets, gt, min_conf } => {
            let d = load_detections(&dets).map_err(|e| Failure::msg("detections", e))?;
            let g = load_kitti_labels(&gt, &ClassMap::default()).map_err(|e| Failure::msg("labels", e))?;
            let m = evaluate_detections(&d, &g, &coco_iou_grid(), min_conf).map_err(|e| Failure::msg("score", e))?;
            w(out, pretty(&m))?;
            Ok(0)
        }
        Command::Metrics { runs, out: dir, joint } => {
            let s = export_metrics(&runs, &dir, joint).map_err(|e| Failure::msg("metrics", e))?;
            w(out, pretty(&s))?;
            Ok(0)
        }
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(Failure(v)) => {
            let _ = writeln!(err, "{v}");
            1
        }
    }
}

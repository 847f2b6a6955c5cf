//! Post-hoc metric tables over one or more run directories: archive size and
//! hypervolume per generation, plus the merged final front.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{fit_normalizer, hv_report, update_archive, ArchiveEntry, MooError, NormalizationPolicy, Normalizer, ParetoArchive};
use crate::evaluator::ObjectiveVector;
use crate::evolution::{load_run_log, valid_individuals, IndividualRecord, LogError, RunLog};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("run {run}: {source}")]
    Moo {
        run: String,
        #[source]
        source: MooError,
    },
    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
    #[error("no runs given")]
    NoRuns,
}

/// One loaded run, tagged by its directory name.
#[derive(Debug, Clone)]
pub struct RunInput {
    pub name: String,
    pub log: RunLog,
}

pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<RunInput>, ExportError> {
    dirs.iter()
        .map(|d| {
            Ok(RunInput {
                name: d
                    .file_name()
                    .map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned()),
                log: load_run_log(d)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub run: String,
    pub generation: usize,
    pub archive_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HvRow {
    pub run: String,
    pub generation: usize,
    pub dominated_hv: f64,
    pub residual_hv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontRow {
    pub run: String,
    pub fingerprint: String,
    pub params: u64,
    pub cost: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: Option<f64>,
    pub map50_95: Option<f64>,
}

fn initial_archive(initial: &[IndividualRecord]) -> ParetoArchive {
    let mut a = ParetoArchive::new();
    for r in initial {
        if let Some(o) = r.outcome.objectives() {
            a.update(ArchiveEntry {
                fingerprint: r.fingerprint.clone(),
                objectives: o.clone(),
                run: None,
            });
        }
    }
    a
}

/// Archive snapshot after each logged generation.
fn archives(log: &RunLog) -> Vec<(usize, Vec<ArchiveEntry>)> {
    log.records.iter().map(|r| (r.generation, r.archive.clone())).collect()
}

pub fn pareto_counts(runs: &[RunInput]) -> Vec<CountRow> {
    runs.iter()
        .flat_map(|r| {
            archives(&r.log).into_iter().map(|(generation, a)| CountRow {
                run: r.name.clone(),
                generation,
                archive_size: a.len(),
            })
        })
        .collect()
}

fn run_objectives(log: &RunLog) -> Vec<ObjectiveVector> {
    let mut v: Vec<(String, ObjectiveVector)> = valid_individuals(log).into_iter().collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v.into_iter().map(|(_, o)| o).collect()
}

/// The normalizer each run is scored under. With `joint`, whole-run bounds
/// are fitted over the union of all runs so their curves are comparable.
pub fn normalizers(runs: &[RunInput], joint: bool) -> Result<Vec<Normalizer>, ExportError> {
    let fit = |objs: &[ObjectiveVector], policy: &NormalizationPolicy, run: &str| {
        fit_normalizer(objs, policy).map_err(|source| ExportError::Moo {
            run: run.to_string(),
            source,
        })
    };
    if joint {
        let all: Vec<ObjectiveVector> = runs.iter().flat_map(|r| run_objectives(&r.log)).collect();
        let shared = fit(&all, &NormalizationPolicy::WholeRun, "joint")?;
        return Ok(runs
            .iter()
            .map(|r| match &r.log.config.normalization {
                NormalizationPolicy::FixedBounds { min, max } => Normalizer { min: *min, max: *max },
                NormalizationPolicy::WholeRun => shared,
            })
            .collect());
    }
    runs.iter()
        .map(|r| fit(&run_objectives(&r.log), &r.log.config.normalization, &r.name))
        .collect()
}

pub fn hypervolume_series(runs: &[RunInput], joint: bool) -> Result<Vec<HvRow>, ExportError> {
    let norms = normalizers(runs, joint)?;
    let mut rows = Vec::new();
    for (r, n) in runs.iter().zip(&norms) {
        for (generation, archive) in archives(&r.log) {
            let pts: Vec<[f64; 4]> = archive.iter().map(|e| n.transform(&e.objectives)).collect();
            let hv = hv_report(&pts).map_err(|source| ExportError::Moo {
                run: r.name.clone(),
                source,
            })?;
            rows.push(HvRow {
                run: r.name.clone(),
                generation,
                dominated_hv: hv.dominated_hv,
                residual_hv: hv.residual_hv,
            });
        }
    }
    Ok(rows)
}

/// Final archives of all runs merged into one non-dominated set, sorted by
/// parameter count.
pub fn merged_front(runs: &[RunInput]) -> Vec<FrontRow> {
    let mut merged = ParetoArchive::new();
    for r in runs {
        let last = match r.log.records.last() {
            Some(rec) => rec.archive.clone(),
            None => initial_archive(&r.log.initial).members,
        };
        for mut e in last {
            e.run = Some(r.name.clone());
            merged = update_archive(merged, e);
        }
    }
    let mut rows: Vec<FrontRow> = merged
        .members
        .into_iter()
        .map(|e| FrontRow {
            run: e.run.unwrap_or_default(),
            fingerprint: e.fingerprint,
            params: e.objectives.params,
            cost: e.objectives.cost,
            precision: e.objectives.precision,
            recall: e.objectives.recall,
            map50: e.objectives.map50,
            map50_95: e.objectives.map50_95,
        })
        .collect();
    rows.sort_by(|a, b| a.params.cmp(&b.params).then(a.fingerprint.cmp(&b.fingerprint)));
    rows
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExportError> {
    let err = |reason: String| ExportError::Write {
        path: path.to_path_buf(),
        reason,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| err(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub runs: usize,
    pub files: Vec<PathBuf>,
    pub front_size: usize,
}

/// Writes `pareto_counts.csv`, `hypervolume.csv`, `parallel_coords.csv` and
/// `parallel_coords.json` into `out`.
pub fn export_metrics(run_dirs: &[PathBuf], out: &Path, joint: bool) -> Result<ExportSummary, ExportError> {
    if run_dirs.is_empty() {
        return Err(ExportError::NoRuns);
    }
    let runs = load_runs(run_dirs)?;
    fs::create_dir_all(out).map_err(|e| ExportError::Write {
        path: out.to_path_buf(),
        reason: e.to_string(),
    })?;
    let counts = out.join("pareto_counts.csv");
    let hv = out.join("hypervolume.csv");
    let pc_csv = out.join("parallel_coords.csv");
    let pc_json = out.join("parallel_coords.json");
    write_csv(&counts, &pareto_counts(&runs))?;
    write_csv(&hv, &hypervolume_series(&runs, joint)?)?;
    let front = merged_front(&runs);
    write_csv(&pc_csv, &front)?;
    fs::write(&pc_json, serde_json::to_string_pretty(&front).expect("rows serialize")).map_err(|e| {
        ExportError::Write {
            path: pc_json.clone(),
            reason: e.to_string(),
        }
    })?;
    Ok(ExportSummary {
        runs: runs.len(),
        files: vec![counts, hv, pc_csv, pc_json],
        front_size: front.len(),
    })
}

//! Genome scoring backends: a static desk-scale evaluator and a reader for
//! results produced by an external trainer.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{analyze, build_graph, validate_genome, ArchGraph, Diagnostic, DEFAULT_IMGSZ};
use crate::genome::{genome_fingerprint, ModelGenome};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read results file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: schema mismatch: {reason}")]
    SchemaMismatch {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// Where the objective values came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveSource {
    /// Parameter count and MACs are exact; precision and recall are a
    /// synthetic surrogate, not detection accuracy.
    StaticSurrogate,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub params: u64,
    /// Multiply-accumulates per image, or measured milliseconds per image.
    pub cost: f64,
    pub precision: f64,
    pub recall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map50_95: Option<f64>,
    pub source: ObjectiveSource,
}

impl ObjectiveVector {
    /// Minimization form: params, cost, 1 - precision, 1 - recall.
    pub fn minimization(&self) -> [f64; 4] {
        [self.params as f64, self.cost, 1.0 - self.precision, 1.0 - self.recall]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EvalOutcome {
    Valid { objectives: ObjectiveVector },
    Invalid { diagnostics: Vec<Diagnostic> },
    /// Valid genome whose external results have not been produced yet.
    Pending,
}

impl EvalOutcome {
    pub fn objectives(&self) -> Option<&ObjectiveVector> {
        match self {
            EvalOutcome::Valid { objectives } => Some(objectives),
            _ => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, EvalOutcome::Valid { .. })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Synthetic accuracy stand-in derived from model size and head coverage.
///
/// With `s = log10(params)`, `size = sigmoid(1.5 (s - 6.5))` and
/// `cov = min(strides, 3) / 3` over the distinct strides feeding the head:
///
/// ```text
/// precision = 0.30 + 0.55 size + 0.10 cov
/// recall    = 0.25 + 0.45 size + 0.25 cov
/// ```
pub fn surrogate_accuracy(graph: &ArchGraph) -> (f64, f64) {
    let params = crate::arch::count_parameters(graph, graph.nc).max(1) as f64;
    let size = sigmoid(1.5 * (params.log10() - 6.5));
    let cov = graph.head_coverage().min(3) as f64 / 3.0;
    (0.30 + 0.55 * size + 0.10 * cov, 0.25 + 0.45 * size + 0.25 * cov)
}

/// Validates, then scores with exact size/cost and the accuracy surrogate.
pub fn static_evaluate(g: &ModelGenome, imgsz: u64) -> EvalOutcome {
    let graph = match build_graph(g, None) {
        Ok(graph) => graph,
        Err(e) => {
            return EvalOutcome::Invalid {
                diagnostics: vec![Diagnostic::from(&e)],
            }
        }
    };
    let report = analyze(&graph, (imgsz, imgsz));
    let (precision, recall) = surrogate_accuracy(&graph);
    EvalOutcome::Valid {
        objectives: ObjectiveVector {
            params: report.total_params,
            cost: report.cost_units,
            precision,
            recall,
            map50: None,
            map50_95: None,
            source: ObjectiveSource::StaticSurrogate,
        },
    }
}

/// One row of the external-results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalRow {
    pub fingerprint: String,
    pub params: u64,
    pub latency_ms: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
}

/// Parses and range-checks an external-results JSON lines file.
pub fn read_external_results(path: &Path) -> Result<HashMap<String, ExternalRow>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| EvalError::SchemaMismatch {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let row: ExternalRow = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        for (name, v) in [
            ("precision", row.precision),
            ("recall", row.recall),
            ("map50", row.map50),
            ("map50_95", row.map50_95),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(row.latency_ms.is_finite() && row.latency_ms >= 0.0) {
            return Err(bad(format!("latency_ms = {} must be non-negative", row.latency_ms)));
        }
        rows.insert(row.fingerprint.clone(), row);
    }
    Ok(rows)
}

/// Looks the genome up in an external-results file by fingerprint.
pub fn external_evaluate(g: &ModelGenome, results: &Path) -> Result<EvalOutcome, EvalError> {
    let verdict = validate_genome(g);
    if !verdict.valid {
        return Ok(EvalOutcome::Invalid {
            diagnostics: verdict.diagnostics,
        });
    }
    let rows = read_external_results(results)?;
    Ok(outcome_from_rows(g, &rows))
}

fn outcome_from_rows(g: &ModelGenome, rows: &HashMap<String, ExternalRow>) -> EvalOutcome {
    match rows.get(&genome_fingerprint(g)) {
        Some(row) => EvalOutcome::Valid {
            objectives: ObjectiveVector {
                params: row.params,
                cost: row.latency_ms,
                precision: row.precision,
                recall: row.recall,
                map50: Some(row.map50),
                map50_95: Some(row.map50_95),
                source: ObjectiveSource::External,
            },
        },
        None => EvalOutcome::Pending,
    }
}

/// Evaluator selection as it appears in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorConfig {
    Static {
        #[serde(default = "default_imgsz")]
        imgsz: u64,
    },
    External {
        results: PathBuf,
    },
}

fn default_imgsz() -> u64 {
    DEFAULT_IMGSZ
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig::Static { imgsz: DEFAULT_IMGSZ }
    }
}

/// A ready-to-use evaluator. External results are read once per batch.
pub enum Evaluator {
    Static { imgsz: u64 },
    External { rows: HashMap<String, ExternalRow> },
}

impl Evaluator {
    pub fn load(cfg: &EvaluatorConfig) -> Result<Self, EvalError> {
        Ok(match cfg {
            EvaluatorConfig::Static { imgsz } => Evaluator::Static { imgsz: *imgsz },
            EvaluatorConfig::External { results } => Evaluator::External {
                rows: read_external_results(results)?,
            },
        })
    }

    pub fn evaluate(&self, g: &ModelGenome) -> EvalOutcome {
        match self {
            Evaluator::Static { imgsz } => static_evaluate(g, *imgsz),
            Evaluator::External { rows } => {
                let verdict = validate_genome(g);
                if verdict.valid {
                    outcome_from_rows(g, rows)
                } else {
                    EvalOutcome::Invalid {
                        diagnostics: verdict.diagnostics,
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::DiagnosticCode;
    use crate::genome::{parse_genome, GeMode};
    use std::io::Write;

    const YOLOV3: &str = include_str!("../../../listings/yolov3.yaml");

    fn yolov3() -> ModelGenome {
        parse_genome(YOLOV3, GeMode::Ge1).unwrap()
    }

    #[test]
    fn static_is_deterministic_and_labeled() {
        let a = static_evaluate(&yolov3(), 640);
        assert_eq!(a, static_evaluate(&yolov3(), 640));
        let v = a.objectives().unwrap();
        assert_eq!(v.source, ObjectiveSource::StaticSurrogate);
        assert!(v.precision > 0.0 && v.precision < 1.0);
        assert!(v.recall > 0.0 && v.recall < 1.0);
    }

    #[test]
    fn unknown_module_is_invalid() {
        let g = parse_genome(&YOLOV3.replace("Bottleneck, [64]", "FooBar, [64]"), GeMode::Ge1).unwrap();
        match static_evaluate(&g, 640) {
            EvalOutcome::Invalid { diagnostics } => assert_eq!(diagnostics[0].code, DiagnosticCode::UnknownModule),
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn wider_is_not_less_precise() {
        let base = build_graph(&yolov3(), None).unwrap();
        let wide = parse_genome(&YOLOV3.replace("width_multiple: 1.0", "width_multiple: 2.0"), GeMode::Ge1).unwrap();
        let wide = build_graph(&wide, None).unwrap();
        assert!(surrogate_accuracy(&wide).0 >= surrogate_accuracy(&base).0);
    }

    #[test]
    fn head_coverage_raises_recall() {
        let genome = |from: &str| {
            let text = format!(
                "nc: 80\ndepth_multiple: 1.0\nwidth_multiple: 1.0\nbackbone:\n  - [-1, 1, Conv, [16, 3, 1]]\n  - [-1, 1, Conv, [16, 3, 2]]\n  - [-1, 1, Conv, [16, 3, 2]]\nhead:\n  - [{from}, 1, Detect, [nc]]\n"
            );
            build_graph(&parse_genome(&text, GeMode::Ge1).unwrap(), None).unwrap()
        };
        let (g3, g1) = (genome("[0, 1, 2]"), genome("[2, 2, 2]"));
        assert_eq!(g3.head_coverage(), 3);
        assert_eq!(g1.head_coverage(), 1);
        assert_eq!(crate::arch::count_parameters(&g3, 80), crate::arch::count_parameters(&g1, 80));
        assert!(surrogate_accuracy(&g3).1 > surrogate_accuracy(&g1).1);
    }

    #[test]
    fn external_rows() {
        let g = yolov3();
        let fp = genome_fingerprint(&g);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            r#"{{"fingerprint":"{fp}","params":100,"latency_ms":4.5,"precision":0.8,"recall":0.7,"map50":0.75,"map50_95":0.5}}"#
        )
        .unwrap();
        let out = external_evaluate(&g, f.path()).unwrap();
        let v = out.objectives().unwrap();
        assert_eq!((v.params, v.cost, v.map50), (100, 4.5, Some(0.75)));

        let other = parse_genome(&YOLOV3.replace("depth_multiple: 1.0", "depth_multiple: 0.5"), GeMode::Ge1).unwrap();
        assert_eq!(external_evaluate(&other, f.path()).unwrap(), EvalOutcome::Pending);

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            bad,
            r#"{{"fingerprint":"{fp}","params":100,"latency_ms":4.5,"precision":1.2,"recall":0.7,"map50":0.75,"map50_95":0.5}}"#
        )
        .unwrap();
        assert!(matches!(
            external_evaluate(&g, bad.path()),
            Err(EvalError::SchemaMismatch { line: 1, .. })
        ));
    }
}

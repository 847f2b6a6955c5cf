//! The generational loop: seeding, parent selection, variation, evaluation,
//! elitist survival, archive upkeep and per-generation accounting.
//!
//! Every generation draws from its own RNG stream derived from the run seed
//! and the generation index, so a resumed run replays exactly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{Diagnostic, DiagnosticCode};
use crate::evaluator::{EvalError, EvalOutcome, Evaluator, EvaluatorConfig, ObjectiveSource};
use crate::genome::{genome_fingerprint, parse_genome, text_fingerprint, GeMode, ModelGenome};
use crate::llm::{ChatBackend, LlmClient, LlmConfig, LlmError};
use crate::moo::{crowding_distance, non_dominated_sort, ArchiveEntry, NormalizationPolicy, ParetoArchive};
use crate::operators::{
    inject_fault, llm_crossover, llm_mutate, mock_crossover, mock_mutate, EotFeedback, OperatorError,
    OperatorKind, OperatorResult, Persona, PromptTemplates, Target,
};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("seed {name} is invalid: {}", fmt_diags(.diagnostics))]
    SeedInvalid {
        name: String,
        diagnostics: Vec<Diagnostic>,
    },
    #[error("seed {name} has no external results yet")]
    SeedPending { name: String },
    #[error("could not derive {missing} more distinct valid seed variants")]
    SeedFill { missing: usize },
    #[error("run directory holds a different configuration; use a fresh directory")]
    ConfigChanged,
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

fn fmt_diags(d: &[Diagnostic]) -> String {
    d.iter().map(|d| d.message.as_str()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupt log entry: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvolutionError + '_ {
    move |source| EvolutionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum OperatorConfig {
    #[default]
    Mock,
    Llm {
        #[serde(default)]
        llm: LlmConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        persona: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        templates: Option<PathBuf>,
    },
}


fn default_population() -> usize {
    20
}
fn default_generations() -> usize {
    10
}
fn default_mutation_ratio() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: GeMode,
    pub seeds: Vec<PathBuf>,
    #[serde(default = "default_population")]
    pub population_size: usize,
    #[serde(default = "default_generations")]
    pub generations: usize,
    /// Share of offspring produced by mutation; the rest by crossover.
    #[serde(default = "default_mutation_ratio")]
    pub mutation_ratio: f64,
    #[serde(default)]
    pub evaluator: EvaluatorConfig,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub normalization: NormalizationPolicy,
    #[serde(default)]
    pub operator: OperatorConfig,
    /// Probability that an operator's child is deliberately corrupted.
    #[serde(default)]
    pub fault_rate: f64,
}

impl RunConfig {
    pub fn new(mode: GeMode, seeds: Vec<PathBuf>) -> Self {
        Self {
            mode,
            seeds,
            population_size: default_population(),
            generations: default_generations(),
            mutation_ratio: default_mutation_ratio(),
            evaluator: EvaluatorConfig::default(),
            rng_seed: 0,
            normalization: NormalizationPolicy::default(),
            operator: OperatorConfig::Mock,
            fault_rate: 0.0,
        }
    }

    /// Reads a YAML (or JSON) config; relative paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, EvolutionError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: RunConfig =
            serde_yaml::from_str(&text).map_err(|e| EvolutionError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.seeds.iter_mut().for_each(fix);
        if let EvaluatorConfig::External { results } = &mut cfg.evaluator {
            fix(results);
        }
        if let OperatorConfig::Llm { persona, templates, .. } = &mut cfg.operator {
            persona.iter_mut().for_each(fix);
            templates.iter_mut().for_each(fix);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EvolutionError> {
        let bad = |m: String| Err(EvolutionError::Config(m));
        if self.population_size < 2 {
            return bad("population_size must be at least 2".into());
        }
        if self.generations < 1 {
            return bad("generations must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mutation_ratio) {
            return bad("mutation_ratio must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.fault_rate) {
            return bad("fault_rate must lie in [0, 1]".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.seeds.len() > self.population_size {
            return bad(format!(
                "{} seeds do not fit a population of {}",
                self.seeds.len(),
                self.population_size
            ));
        }
        Ok(())
    }
}

/// How offspring are produced.
pub enum Variation {
    Mock,
    Llm {
        backend: Arc<dyn ChatBackend>,
        persona: Persona,
        templates: PromptTemplates,
        llm: LlmConfig,
    },
}

impl Variation {
    pub fn from_config(cfg: &OperatorConfig) -> Result<Self, EvolutionError> {
        Ok(match cfg {
            OperatorConfig::Mock => Variation::Mock,
            OperatorConfig::Llm { llm, persona, templates } => Variation::Llm {
                backend: Arc::new(LlmClient::new(llm)?),
                persona: persona.as_deref().map(Persona::load).transpose()?.unwrap_or_default(),
                templates: templates
                    .as_deref()
                    .map(PromptTemplates::load_dir)
                    .transpose()?
                    .unwrap_or_default(),
                llm: llm.clone(),
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct Individual {
    pub genome: ModelGenome,
    pub record: IndividualRecord,
}

/// Serializable view of an individual (everything but the genome itself,
/// which lives in `individuals/<fingerprint>.yaml`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub fingerprint: String,
    pub outcome: EvalOutcome,
    pub generation: usize,
    #[serde(default)]
    pub parents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<OperatorKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<EotFeedback>,
}

impl IndividualRecord {
    fn point(&self) -> [f64; 4] {
        self.outcome
            .objectives()
            .expect("population members are evaluated and valid")
            .minimization()
    }

    fn archive_entry(&self) -> Option<ArchiveEntry> {
        self.outcome.objectives().map(|o| ArchiveEntry {
            fingerprint: self.fingerprint.clone(),
            objectives: o.clone(),
            run: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    /// New distinct variants: valid + invalid + pending.
    pub produced: usize,
    pub valid: usize,
    pub invalid: usize,
    pub pending: usize,
    /// Children whose fingerprint was already seen; not counted as produced.
    pub duplicates: usize,
    /// Operator calls that returned no child (counted within `invalid`).
    pub operator_failures: usize,
    pub invalid_codes: BTreeMap<String, usize>,
    pub offspring: Vec<IndividualRecord>,
    pub population: Vec<IndividualRecord>,
    pub archive: Vec<ArchiveEntry>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: GeMode,
    pub generations: usize,
    pub population_size: usize,
    pub total_variants: usize,
    pub total_valid: usize,
    pub total_invalid: usize,
    pub total_pending: usize,
    pub total_duplicates: usize,
    pub total_operator_failures: usize,
    pub invalid_fraction: f64,
    pub final_pareto_size: usize,
    pub objective_source: ObjectiveSource,
    pub invalid_codes: BTreeMap<String, usize>,
}

impl RunReport {
    pub fn from_records(cfg: &RunConfig, records: &[GenerationRecord]) -> Self {
        let sum = |f: fn(&GenerationRecord) -> usize| records.iter().map(f).sum::<usize>();
        let total_variants = sum(|r| r.produced);
        let total_invalid = sum(|r| r.invalid);
        let mut invalid_codes = BTreeMap::new();
        for r in records {
            for (k, v) in &r.invalid_codes {
                *invalid_codes.entry(k.clone()).or_insert(0) += v;
            }
        }
        Self {
            mode: cfg.mode,
            generations: records.len(),
            population_size: cfg.population_size,
            total_variants,
            total_valid: sum(|r| r.valid),
            total_invalid,
            total_pending: sum(|r| r.pending),
            total_duplicates: sum(|r| r.duplicates),
            total_operator_failures: sum(|r| r.operator_failures),
            invalid_fraction: if total_variants == 0 {
                0.0
            } else {
                total_invalid as f64 / total_variants as f64
            },
            final_pareto_size: records.last().map_or(0, |r| r.archive.len()),
            objective_source: match cfg.evaluator {
                EvaluatorConfig::Static { .. } => ObjectiveSource::StaticSurrogate,
                EvaluatorConfig::External { .. } => ObjectiveSource::External,
            },
            invalid_codes,
        }
    }
}

/// Everything persisted for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub config: RunConfig,
    pub initial: Vec<IndividualRecord>,
    pub records: Vec<GenerationRecord>,
    pub report: Option<RunReport>,
}

pub const CONFIG_FILE: &str = "config.json";
pub const INITIAL_FILE: &str = "initial_population.json";
pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const REPORT_FILE: &str = "report.json";

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, LogError> {
    let text = fs::read_to_string(path).map_err(|source| LogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| LogError::Corrupt {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

/// Complete generation records plus the byte length they occupy. A final
/// line without a newline is treated as an interrupted write and ignored.
fn read_generations(path: &Path) -> Result<(Vec<GenerationRecord>, usize), LogError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(source) => {
            return Err(LogError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let mut records = Vec::new();
    let mut used = 0;
    for (i, chunk) in text.split_inclusive('\n').enumerate() {
        if !chunk.ends_with('\n') {
            break;
        }
        if chunk.trim().is_empty() {
            used += chunk.len();
            continue;
        }
        let rec: GenerationRecord = serde_json::from_str(chunk).map_err(|e| LogError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
        used += chunk.len();
    }
    Ok((records, used))
}

/// Loads a run directory written by [`run_evolution`].
pub fn load_run_log(dir: &Path) -> Result<RunLog, LogError> {
    let config: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
    let initial: Vec<IndividualRecord> = read_json(&dir.join(INITIAL_FILE))?;
    let (records, _) = read_generations(&dir.join(GENERATIONS_FILE))?;
    let report_path = dir.join(REPORT_FILE);
    let report = if report_path.exists() {
        Some(read_json(&report_path)?)
    } else {
        None
    };
    Ok(RunLog {
        config,
        initial,
        records,
        report,
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn invalid_outcome(code: DiagnosticCode, message: String) -> EvalOutcome {
    EvalOutcome::Invalid {
        diagnostics: vec![Diagnostic::new(code, message)],
    }
}

fn feedback(kind: OperatorKind, child: &EvalOutcome, parent: Option<&IndividualRecord>) -> Option<EotFeedback> {
    let p = parent?.outcome.objectives()?;
    let c = child.objectives()?;
    Some(EotFeedback {
        operator: kind,
        valid: true,
        delta_params: c.params as f64 - p.params as f64,
        delta_cost: c.cost - p.cost,
        delta_precision: c.precision - p.precision,
        delta_recall: c.recall - p.recall,
    })
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: &Path) -> Result<Self, EvolutionError> {
        for sub in ["individuals", "transcripts"] {
            fs::create_dir_all(root.join(sub)).map_err(io_err(root))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    fn write(&self, rel: &str, contents: &str) -> Result<(), EvolutionError> {
        let path = self.root.join(rel);
        fs::write(&path, contents).map_err(io_err(&path))
    }

    fn save_individual(&self, fp: &str, text: &str, transcript: Option<&str>) -> Result<(), EvolutionError> {
        self.write(&format!("individuals/{fp}.yaml"), text)?;
        if let Some(t) = transcript {
            self.write(&format!("transcripts/{fp}.txt"), t)?;
        }
        Ok(())
    }

    fn load_genome(&self, fp: &str, mode: GeMode) -> Result<ModelGenome, EvolutionError> {
        let path = self.root.join(format!("individuals/{fp}.yaml"));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        parse_genome(&text, mode).map_err(|e| {
            EvolutionError::Log(LogError::Corrupt {
                path,
                line: e.line().unwrap_or(0),
                reason: e.to_string(),
            })
        })
    }

    fn append_record(&self, rec: &GenerationRecord) -> Result<(), EvolutionError> {
        let path = self.root.join(GENERATIONS_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let line = serde_json::to_string(rec).expect("records serialize");
        f.write_all(format!("{line}\n").as_bytes()).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))
    }
}

/// Mutable loop state: the single writer of population and archive.
struct State {
    population: Vec<Individual>,
    archive: ParetoArchive,
    seen: HashSet<String>,
}

/// Parses, evaluates and checks the seeds, then fills the population with
/// mock-mutated variants of them.
pub fn seed_population(
    cfg: &RunConfig,
    seeds: &[(String, String)],
    evaluator: &Evaluator,
) -> Result<Vec<Individual>, EvolutionError> {
    let mut pop: Vec<Individual> = Vec::new();
    let mut seen = HashSet::new();
    for (name, text) in seeds {
        let genome = parse_genome(text, cfg.mode).map_err(|e| EvolutionError::SeedInvalid {
            name: name.clone(),
            diagnostics: vec![Diagnostic::from(&e)],
        })?;
        let outcome = evaluator.evaluate(&genome);
        match &outcome {
            EvalOutcome::Invalid { diagnostics } => {
                return Err(EvolutionError::SeedInvalid {
                    name: name.clone(),
                    diagnostics: diagnostics.clone(),
                })
            }
            EvalOutcome::Pending => return Err(EvolutionError::SeedPending { name: name.clone() }),
            EvalOutcome::Valid { .. } => {}
        }
        let fingerprint = genome_fingerprint(&genome);
        if !seen.insert(fingerprint.clone()) {
            continue;
        }
        pop.push(Individual {
            genome,
            record: IndividualRecord {
                fingerprint,
                outcome,
                generation: 0,
                parents: Vec::new(),
                operator: None,
                feedback: None,
            },
        });
    }
    let n_seeds = pop.len();
    let mut rng = stream_rng(cfg.rng_seed, u64::MAX);
    let budget = 100 * cfg.population_size;
    let mut k = 0;
    while pop.len() < cfg.population_size && k < budget {
        let parent = &pop[k % n_seeds];
        k += 1;
        let result = mock_mutate(&parent.genome, rng.gen());
        let Ok(genome) = parse_genome(&result.child_text, cfg.mode) else {
            continue;
        };
        let fingerprint = genome_fingerprint(&genome);
        if seen.contains(&fingerprint) {
            continue;
        }
        let outcome = evaluator.evaluate(&genome);
        if !outcome.is_valid() {
            continue;
        }
        seen.insert(fingerprint.clone());
        let parent_rec = parent.record.clone();
        pop.push(Individual {
            genome,
            record: IndividualRecord {
                fingerprint,
                feedback: feedback(OperatorKind::Mutate, &outcome, Some(&parent_rec)),
                outcome,
                generation: 0,
                parents: vec![parent_rec.fingerprint],
                operator: Some(OperatorKind::Mutate),
            },
        });
    }
    if pop.len() < cfg.population_size {
        return Err(EvolutionError::SeedFill {
            missing: cfg.population_size - pop.len(),
        });
    }
    Ok(pop)
}

struct Job {
    kind: OperatorKind,
    parents: Vec<usize>,
    target: Target,
    seed: u64,
    fault: bool,
}

/// Rank and crowding of every member, for tournament comparisons.
fn rank_and_crowd(points: &[[f64; 4]]) -> (Vec<usize>, Vec<f64>) {
    let mut rank = vec![0; points.len()];
    let mut crowd = vec![0.0; points.len()];
    for (r, front) in non_dominated_sort(points).iter().enumerate() {
        for (i, d) in front.iter().zip(crowding_distance(points, front)) {
            rank[*i] = r;
            crowd[*i] = d;
        }
    }
    (rank, crowd)
}

fn better(i: usize, j: usize, rank: &[usize], crowd: &[f64]) -> bool {
    rank[i] < rank[j] || (rank[i] == rank[j] && crowd[i] > crowd[j])
}

fn tournament(rng: &mut ChaCha8Rng, rank: &[usize], crowd: &[f64]) -> usize {
    let n = rank.len();
    let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
    if better(j, i, rank, crowd) {
        j
    } else {
        i
    }
}

/// Elitist truncation by front, then by descending crowding distance.
fn survivors(points: &[[f64; 4]], size: usize) -> Vec<usize> {
    let mut keep = Vec::with_capacity(size);
    for front in non_dominated_sort(points) {
        if keep.len() + front.len() <= size {
            keep.extend(front);
            continue;
        }
        let d = crowding_distance(points, &front);
        let mut order: Vec<usize> = (0..front.len()).collect();
        order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(front[a].cmp(&front[b])));
        keep.extend(order.into_iter().take(size - keep.len()).map(|k| front[k]));
        break;
    }
    keep
}

fn run_job(job: &Job, pop: &[Individual], variation: &Variation) -> OperatorResult {
    let parent = |k: usize| &pop[job.parents[k]];
    let mut result = match (variation, job.kind) {
        (Variation::Mock, OperatorKind::Mutate) => mock_mutate(&parent(0).genome, job.seed),
        (Variation::Mock, OperatorKind::Crossover) => {
            mock_crossover(&parent(0).genome, &parent(1).genome, job.seed).expect("population shares one mode")
        }
        (
            Variation::Llm {
                backend,
                persona,
                templates,
                llm,
            },
            kind,
        ) => {
            let fb = parent(0).record.feedback.as_ref();
            match kind {
                OperatorKind::Mutate => {
                    llm_mutate(&parent(0).genome, job.target, persona, fb, templates, llm, backend.as_ref())
                }
                OperatorKind::Crossover => llm_crossover(
                    &parent(0).genome,
                    &parent(1).genome,
                    job.target,
                    persona,
                    fb,
                    templates,
                    llm,
                    backend.as_ref(),
                ),
            }
        }
    };
    if job.fault && result.failure.is_none() {
        inject_fault(&mut result);
    }
    result
}

/// A child awaiting evaluation.
struct Candidate {
    fingerprint: String,
    genome: Option<ModelGenome>,
    outcome: Option<EvalOutcome>,
    result: OperatorResult,
    parent_idx: Vec<usize>,
}

fn evolve_generation(
    state: &mut State,
    cfg: &RunConfig,
    gen: usize,
    variation: &Variation,
    evaluator: &Evaluator,
    dir: &RunDir,
) -> Result<GenerationRecord, EvolutionError> {
    let started = Instant::now();
    let mut rng = stream_rng(cfg.rng_seed, gen as u64);
    let points: Vec<[f64; 4]> = state.population.iter().map(|i| i.record.point()).collect();
    let (rank, crowd) = rank_and_crowd(&points);

    let jobs: Vec<Job> = (0..cfg.population_size)
        .map(|_| {
            let mutate = rng.gen::<f64>() < cfg.mutation_ratio;
            let parents = if mutate {
                vec![tournament(&mut rng, &rank, &crowd)]
            } else {
                vec![tournament(&mut rng, &rank, &crowd), tournament(&mut rng, &rank, &crowd)]
            };
            Job {
                kind: if mutate { OperatorKind::Mutate } else { OperatorKind::Crossover },
                parents,
                target: Target::ALL[rng.gen_range(0..3)],
                seed: rng.gen(),
                fault: rng.gen::<f64>() < cfg.fault_rate,
            }
        })
        .collect();

    let results: Vec<OperatorResult> = jobs
        .par_iter()
        .map(|job| run_job(job, &state.population, variation))
        .collect();

    let mut rec = GenerationRecord {
        generation: gen,
        produced: 0,
        valid: 0,
        invalid: 0,
        pending: 0,
        duplicates: 0,
        operator_failures: 0,
        invalid_codes: BTreeMap::new(),
        offspring: Vec::new(),
        population: Vec::new(),
        archive: Vec::new(),
        elapsed_ms: 0,
    };

    let mut candidates = Vec::new();
    for (k, (job, result)) in jobs.iter().zip(results).enumerate() {
        if let Some(reason) = &result.failure {
            candidates.push(Candidate {
                fingerprint: format!("failed-g{gen}-{k}"),
                genome: None,
                outcome: Some(invalid_outcome(DiagnosticCode::OperatorFailed, reason.clone())),
                result,
                parent_idx: job.parents.clone(),
            });
            rec.operator_failures += 1;
            continue;
        }
        match parse_genome(&result.child_text, cfg.mode) {
            Ok(genome) => {
                let fingerprint = genome_fingerprint(&genome);
                if !state.seen.insert(fingerprint.clone()) {
                    rec.duplicates += 1;
                    continue;
                }
                candidates.push(Candidate {
                    fingerprint,
                    genome: Some(genome),
                    outcome: None,
                    result,
                    parent_idx: job.parents.clone(),
                });
            }
            Err(e) => candidates.push(Candidate {
                fingerprint: text_fingerprint(&result.child_text),
                genome: None,
                outcome: Some(EvalOutcome::Invalid {
                    diagnostics: vec![Diagnostic::from(&e)],
                }),
                result,
                parent_idx: job.parents.clone(),
            }),
        }
    }

    candidates.par_iter_mut().for_each(|c| {
        if let (None, Some(g)) = (&c.outcome, &c.genome) {
            c.outcome = Some(evaluator.evaluate(g));
        }
    });

    let mut valid_children = Vec::new();
    for c in candidates {
        let outcome = c.outcome.expect("every candidate is evaluated");
        rec.produced += 1;
        match &outcome {
            EvalOutcome::Valid { .. } => rec.valid += 1,
            EvalOutcome::Pending => rec.pending += 1,
            EvalOutcome::Invalid { diagnostics } => {
                rec.invalid += 1;
                let code = diagnostics
                    .first()
                    .map_or("Unknown".to_string(), |d| format!("{:?}", d.code));
                *rec.invalid_codes.entry(code).or_insert(0) += 1;
            }
        }
        dir.save_individual(&c.fingerprint, &c.result.child_text, Some(&c.result.transcript))?;
        let parent0 = c.parent_idx.first().map(|&i| &state.population[i].record);
        let record = IndividualRecord {
            fingerprint: c.fingerprint.clone(),
            feedback: feedback(c.result.kind, &outcome, parent0),
            outcome,
            generation: gen,
            parents: c.result.parents.clone(),
            operator: Some(c.result.kind),
        };
        rec.offspring.push(record.clone());
        if let (true, Some(genome)) = (record.outcome.is_valid(), c.genome) {
            valid_children.push(Individual { genome, record });
        }
    }

    for child in &valid_children {
        if let Some(e) = child.record.archive_entry() {
            state.archive.update(e);
        }
    }
    if !valid_children.is_empty() {
        let mut pool = std::mem::take(&mut state.population);
        pool.extend(valid_children);
        let pts: Vec<[f64; 4]> = pool.iter().map(|i| i.record.point()).collect();
        let keep = survivors(&pts, cfg.population_size);
        let mut slots: Vec<Option<Individual>> = pool.into_iter().map(Some).collect();
        state.population = keep.into_iter().filter_map(|i| slots[i].take()).collect();
    }

    rec.population = state.population.iter().map(|i| i.record.clone()).collect();
    rec.archive = state.archive.members.clone();
    rec.elapsed_ms = started.elapsed().as_millis() as u64;
    Ok(rec)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop once this many generation records exist (used to simulate an
    /// interrupted run).
    pub stop_after: Option<usize>,
}

fn read_seeds(cfg: &RunConfig) -> Result<Vec<(String, String)>, EvolutionError> {
    cfg.seeds
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            Ok((p.display().to_string(), text))
        })
        .collect()
}

/// Runs (or resumes) an evolution in `out`, persisting every generation.
pub fn run_evolution(
    cfg: &RunConfig,
    variation: &Variation,
    out: &Path,
    opts: &RunOptions,
) -> Result<RunLog, EvolutionError> {
    cfg.validate()?;
    let evaluator = Evaluator::load(&cfg.evaluator)?;
    let dir = RunDir::create(out)?;
    let config_path = out.join(CONFIG_FILE);
    let gens_path = out.join(GENERATIONS_FILE);
    let resuming = config_path.exists() && out.join(INITIAL_FILE).exists();

    let (initial, mut records, mut state) = if resuming {
        let stored: RunConfig = read_json(&config_path)?;
        if stored != *cfg {
            return Err(EvolutionError::ConfigChanged);
        }
        let initial: Vec<IndividualRecord> = read_json(&out.join(INITIAL_FILE))?;
        let (records, used) = read_generations(&gens_path)?;
        if gens_path.exists() {
            let f = OpenOptions::new().write(true).open(&gens_path).map_err(io_err(&gens_path))?;
            f.set_len(used as u64).map_err(io_err(&gens_path))?;
        }
        let mut seen: HashSet<String> = initial.iter().map(|r| r.fingerprint.clone()).collect();
        for r in &records {
            seen.extend(r.offspring.iter().map(|o| o.fingerprint.clone()));
        }
        let (pop_records, archive) = match records.last() {
            Some(last) => (last.population.clone(), ParetoArchive { members: last.archive.clone() }),
            None => {
                let mut a = ParetoArchive::new();
                initial.iter().filter_map(IndividualRecord::archive_entry).for_each(|e| {
                    a.update(e);
                });
                (initial.clone(), a)
            }
        };
        let population = pop_records
            .into_iter()
            .map(|record| {
                Ok(Individual {
                    genome: dir.load_genome(&record.fingerprint, cfg.mode)?,
                    record,
                })
            })
            .collect::<Result<Vec<_>, EvolutionError>>()?;
        (initial, records, State { population, archive, seen })
    } else {
        let seeds = read_seeds(cfg)?;
        let population = seed_population(cfg, &seeds, &evaluator)?;
        let mut archive = ParetoArchive::new();
        for ind in &population {
            dir.save_individual(&ind.record.fingerprint, ind.genome.source_text(), None)?;
            if let Some(e) = ind.record.archive_entry() {
                archive.update(e);
            }
        }
        let initial: Vec<IndividualRecord> = population.iter().map(|i| i.record.clone()).collect();
        dir.write(CONFIG_FILE, &serde_json::to_string_pretty(cfg).expect("config serializes"))?;
        dir.write(INITIAL_FILE, &serde_json::to_string_pretty(&initial).expect("records serialize"))?;
        if gens_path.exists() {
            fs::remove_file(&gens_path).map_err(io_err(&gens_path))?;
        }
        let seen = initial.iter().map(|r| r.fingerprint.clone()).collect();
        (initial, Vec::new(), State { population, archive, seen })
    };

    while records.len() < cfg.generations {
        if opts.stop_after.is_some_and(|s| records.len() >= s) {
            return Ok(RunLog {
                config: cfg.clone(),
                initial,
                records,
                report: None,
            });
        }
        let gen = records.len() + 1;
        let rec = evolve_generation(&mut state, cfg, gen, variation, &evaluator, &dir)?;
        dir.append_record(&rec)?;
        records.push(rec);
    }

    let report = RunReport::from_records(cfg, &records);
    dir.write(REPORT_FILE, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok(RunLog {
        config: cfg.clone(),
        initial,
        records,
        report: Some(report),
    })
}

/// Fingerprint-to-objectives index over every valid individual of a run.
pub fn valid_individuals(log: &RunLog) -> HashMap<String, crate::evaluator::ObjectiveVector> {
    let mut out = HashMap::new();
    let all = log
        .initial
        .iter()
        .chain(log.records.iter().flat_map(|r| r.offspring.iter()));
    for rec in all {
        if let Some(o) = rec.outcome.objectives() {
            out.insert(rec.fingerprint.clone(), o.clone());
        }
    }
    out
}

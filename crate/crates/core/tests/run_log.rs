mod common;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use archevo::evaluator::EvaluatorConfig;
use archevo::evolution::{
    load_run_log, run_evolution, EvolutionError, LogError, RunConfig, RunOptions, Variation, GENERATIONS_FILE,
};
use archevo::genome::GeMode;
use archevo::llm::{LlmClient, LlmConfig, RetryPolicy};
use archevo::operators::{Persona, PromptTemplates};
use common::{listing, Reply, StubServer};

fn config(size: usize, gens: usize, seed: u64) -> RunConfig {
    let mut c = RunConfig::new(GeMode::Ge1, vec![listing("yolov3.yaml")]);
    c.population_size = size;
    c.generations = gens;
    c.rng_seed = seed;
    c
}

/// Generation log with wall-clock fields zeroed.
fn timeless(dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(dir.join(GENERATIONS_FILE))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["elapsed_ms"] = 0.into();
            v
        })
        .collect()
}

fn run(cfg: &RunConfig, dir: &Path, stop_after: Option<usize>) -> Result<archevo::evolution::RunLog, EvolutionError> {
    run_evolution(cfg, &Variation::Mock, dir, &RunOptions { stop_after })
}

#[test]
fn mock_runs_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config(8, 4, 5);
    run(&cfg, a.path(), None).unwrap();
    run(&cfg, b.path(), None).unwrap();
    assert_eq!(timeless(a.path()), timeless(b.path()));
    for f in ["config.json", "initial_population.json", "report.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let mut other = cfg.clone();
    other.rng_seed = 6;
    let c = tempfile::tempdir().unwrap();
    run(&other, c.path(), None).unwrap();
    assert_ne!(timeless(a.path()), timeless(c.path()));
}

#[test]
fn resume_continues_where_it_stopped() {
    let (whole, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config(8, 5, 9);
    run(&cfg, whole.path(), None).unwrap();
    let partial = run(&cfg, split.path(), Some(2)).unwrap();
    assert_eq!(partial.records.len(), 2);
    assert!(partial.report.is_none());
    let resumed = run(&cfg, split.path(), None).unwrap();
    assert_eq!(resumed.records.len(), 5);
    assert_eq!(timeless(whole.path()), timeless(split.path()));
}

#[test]
fn interrupted_write_is_discarded_on_resume() {
    let (whole, torn) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config(6, 3, 2);
    run(&cfg, whole.path(), None).unwrap();
    run(&cfg, torn.path(), Some(1)).unwrap();
    let path = torn.path().join(GENERATIONS_FILE);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{\"generation\": 2, \"produ");
    fs::write(&path, text).unwrap();
    assert_eq!(load_run_log(torn.path()).unwrap().records.len(), 1);
    run(&cfg, torn.path(), None).unwrap();
    assert_eq!(timeless(whole.path()), timeless(torn.path()));
}

#[test]
fn corrupt_line_is_located() {
    let dir = tempfile::tempdir().unwrap();
    run(&config(6, 2, 1), dir.path(), None).unwrap();
    let path = dir.path().join(GENERATIONS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, format!("not json\n{text}")).unwrap();
    match load_run_log(dir.path()) {
        Err(LogError::Corrupt { line, .. }) => assert_eq!(line, 1),
        other => panic!("expected corrupt log, got {other:?}"),
    }
}

#[test]
fn changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    run(&config(6, 1, 1), dir.path(), None).unwrap();
    assert!(matches!(run(&config(6, 2, 7), dir.path(), None), Err(EvolutionError::ConfigChanged)));
}

#[test]
fn extreme_points_survive() {
    let dir = tempfile::tempdir().unwrap();
    let log = run(&config(10, 6, 3), dir.path(), None).unwrap();
    let best = |pop: &[archevo::evolution::IndividualRecord], k: usize| {
        pop.iter()
            .map(|r| r.outcome.objectives().unwrap().minimization()[k])
            .fold(f64::INFINITY, f64::min)
    };
    let mut prev = log.initial.clone();
    for rec in &log.records {
        for k in 0..4 {
            assert!(best(&rec.population, k) <= best(&prev, k));
        }
        prev = rec.population.clone();
    }
}

#[test]
fn external_results_leave_unscored_children_pending() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = ["yolov8.yaml", "ge2_example3.yaml"];
    let mut rows = String::new();
    for (i, name) in seeds.iter().enumerate() {
        let g = archevo::genome::parse_genome(&common::listing_text(name), GeMode::Ge2).unwrap();
        let row = serde_json::json!({
            "fingerprint": archevo::genome::genome_fingerprint(&g),
            "params": 1_000_000 * (i as u64 + 1), "latency_ms": 10.0 + i as f64,
            "precision": 0.7, "recall": 0.5 - 0.1 * i as f64, "map50": 0.6, "map50_95": 0.4
        });
        rows.push_str(&format!("{row}\n"));
    }
    let results = dir.path().join("results.jsonl");
    fs::write(&results, rows).unwrap();
    let mut cfg = RunConfig::new(GeMode::Ge2, seeds.iter().map(|n| listing(n)).collect());
    cfg.population_size = 2;
    cfg.generations = 2;
    cfg.evaluator = EvaluatorConfig::External { results };
    let log = run(&cfg, &dir.path().join("run"), None).unwrap();
    for rec in &log.records {
        assert_eq!(rec.valid, 0);
        assert_eq!(rec.pending + rec.invalid, rec.produced);
        assert_eq!(rec.population, log.initial);
    }
    assert!(log.records.iter().map(|r| r.pending).sum::<usize>() > 0);
}

#[test]
fn llm_backed_generation() {
    let answer = "```yaml\nnc: 80\ndepth_multiple: 0.67\nwidth_multiple: 0.75\n```";
    let server = StubServer::start(vec![Reply::ok(answer)]);
    let llm = LlmConfig {
        endpoint: server.url.clone(),
        api_key_env: "ARCHEVO_TEST_UNSET_KEY".into(),
        retry: RetryPolicy { base_delay_ms: 1, ..RetryPolicy::default() },
        ..LlmConfig::default()
    };
    let variation = Variation::Llm {
        backend: Arc::new(LlmClient::new(&llm).unwrap()),
        persona: Persona::default(),
        templates: PromptTemplates::default(),
        llm,
    };
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(4, 1, 8);
    cfg.mutation_ratio = 1.0;
    let log = run_evolution(&cfg, &variation, dir.path(), &RunOptions::default()).unwrap();
    let rec = &log.records[0];
    assert_eq!(server.count(), 4);
    assert_eq!(rec.produced + rec.duplicates, 4);
    for o in &rec.offspring {
        let t = fs::read_to_string(dir.path().join(format!("transcripts/{}.txt", o.fingerprint))).unwrap();
        assert!(t.contains("=== RESPONSE ==="));
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use evollm::harness::{
    ablation_grid, aggregate_dir, aggregate_logs, read_log, read_summary, report, run_experiment, sha256_hex,
    GenerationRecord, LogLine, Manifest, RunHeader, StrategyKind, Axis,
};
use evollm::llm::BackendKind;
use evollm::{Error, ExperimentConfig, Phase, TaskSpec};

fn config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig { output_dir: dir.to_path_buf(), seeds: vec![0, 1], ..ExperimentConfig::default() }
}

// a log whose best-so-far curve is exactly `curve`
fn fake_log(path: &Path, seed: u64, curve: &[f64]) -> PathBuf {
    let mut config = ExperimentConfig::default();
    config.budget.max_generations = curve.len();
    let header = RunHeader {
        version: "test".into(),
        seed,
        task: "sphere_d2".into(),
        strategy: "fake".into(),
        config,
    };
    let mut text = serde_json::to_string(&LogLine::Header(header)).unwrap() + "\n";
    for (g, &best) in curve.iter().enumerate() {
        let record = GenerationRecord {
            generation: g,
            phase: Phase::Warmup,
            population: vec![vec![0.0, 0.0]],
            population_bins: vec![vec![500, 500]],
            fitness: vec![best],
            best_fitness: best,
            best_solution: vec![0.0, 0.0],
            next_mean: vec![0.0, 0.0],
            clipped: false,
            queries: Vec::new(),
            fallback_rate: None,
            latency_ms: None,
        };
        text += &serde_json::to_string(&LogLine::Generation(record)).unwrap();
        text.push('\n');
    }
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

#[test]
fn zero_generations_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.budget.max_generations = 0;
    let logs = run_experiment(&c).unwrap();
    assert_eq!(logs.len(), 2);
    let text = fs::read_to_string(&logs[0]).unwrap();
    assert_eq!(text.lines().count(), 1);
    let (header, records) = read_log(&logs[0]).unwrap();
    assert_eq!(header.seed, 0);
    assert!(records.is_empty());
}

#[test]
fn same_seed_gives_byte_identical_logs() {
    for kind in [StrategyKind::Evollm, StrategyKind::RandomSearch, StrategyKind::HillClimb, StrategyKind::Snes] {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path());
        c.strategy.kind = kind;
        let first: Vec<Vec<u8>> = run_experiment(&c).unwrap().iter().map(|p| fs::read(p).unwrap()).collect();
        let second: Vec<Vec<u8>> = run_experiment(&c).unwrap().iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second, "{kind:?}");
        assert_ne!(first[0], first[1], "seeds should differ");
    }
}

#[test]
fn parallel_and_serial_seeds_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.seeds = vec![0, 1, 2, 3];
    let par: Vec<Vec<u8>> = run_experiment(&c).unwrap().iter().map(|p| fs::read(p).unwrap()).collect();
    c.parallel_seeds = false;
    let mut serial: Vec<Vec<u8>> = run_experiment(&c).unwrap().iter().map(|p| fs::read(p).unwrap()).collect();
    // the header records the flag itself
    for (a, b) in par.iter().zip(serial.iter_mut()) {
        let skip = |v: &[u8]| v.iter().position(|&c| c == b'\n').unwrap();
        assert_eq!(a[skip(a)..], b[skip(b)..]);
    }
}

#[test]
fn logs_record_one_query_per_block() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.seeds = vec![0];
    c.strategy.evollm.block_size = Some(1);
    let (_, records) = read_log(&run_experiment(&c).unwrap()[0]).unwrap();
    assert_eq!(records.len(), 20);
    let w = c.strategy.evollm.warmup_generations;
    for r in &records {
        // the tell of generation g produces the mean for g + 1
        let expected = if r.generation + 1 >= w { 2 } else { 0 };
        assert_eq!(r.queries.len(), expected, "generation {}", r.generation);
        for q in &r.queries {
            assert_eq!(q.block.1 - q.block.0, 1);
            assert_eq!(q.prompt_sha256.len(), 64);
        }
    }
}

#[test]
fn sphere_converges_with_extrapolate_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.seeds = (0..5).collect();
    c.backend.kind = BackendKind::Extrapolate;
    let solved = run_experiment(&c)
        .unwrap()
        .iter()
        .filter(|p| read_log(p).unwrap().1.last().unwrap().best_fitness < 0.05)
        .count();
    assert!(solved >= 4, "{solved}/5");
}

#[test]
fn unreachable_http_backend_fails_before_any_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.backend.kind = BackendKind::Http;
    c.backend.endpoint_url = "http://127.0.0.1:9/v1/chat/completions".into();
    c.backend.model_name = "m".into();
    c.backend.timeout_secs = 2.0;
    c.backend.retry_limit = 0;
    assert!(matches!(run_experiment(&c), Err(Error::Config(_) | Error::Backend(_))));
    assert!(!c.run_dir().exists());
}

#[test]
fn unknown_task_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.task = TaskSpec { name: "griewank".into(), ..TaskSpec::default() };
    assert!(matches!(run_experiment(&c), Err(Error::Config(_))));
}

#[test]
fn single_log_aggregates_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    let log = fake_log(&dir.path().join("a/seed_0.jsonl"), 0, &[3.0, 2.0, 0.5]);
    let rows = aggregate_logs(&[log]).unwrap();
    assert_eq!(rows.iter().map(|r| r.mean_best).collect::<Vec<_>>(), vec![3.0, 2.0, 0.5]);
    assert!(rows.iter().all(|r| r.stderr == 0.0 && r.n_seeds == 1));
}

#[test]
fn constant_logs_average() {
    let dir = tempfile::tempdir().unwrap();
    let a = fake_log(&dir.path().join("a/seed_0.jsonl"), 0, &[1.0, 1.0]);
    let b = fake_log(&dir.path().join("a/seed_1.jsonl"), 1, &[3.0, 3.0]);
    let rows = aggregate_logs(&[a, b]).unwrap();
    assert!(rows.iter().all(|r| r.mean_best == 2.0));
    // sample std sqrt(2), over sqrt(2)
    assert!(rows.iter().all(|r| (r.stderr - 1.0).abs() < 1e-12));
}

#[test]
fn stderr_matches_hand_calculation() {
    let dir = tempfile::tempdir().unwrap();
    let logs: Vec<PathBuf> = [[2.0, 1.0], [4.0, 1.0], [9.0, 1.0]]
        .iter()
        .enumerate()
        .map(|(i, c)| fake_log(&dir.path().join(format!("a/seed_{i}.jsonl")), i as u64, c))
        .collect();
    let rows = aggregate_logs(&logs).unwrap();
    // mean 5, deviations -3 -1 4, sample var 26/2 = 13, stderr sqrt(13/3)
    assert_eq!(rows[0].mean_best, 5.0);
    assert!((rows[0].stderr - (13.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(rows[1].stderr, 0.0);
}

#[test]
fn mismatched_budgets_refuse_to_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let a = fake_log(&dir.path().join("a/seed_0.jsonl"), 0, &[1.0, 1.0]);
    let b = fake_log(&dir.path().join("a/seed_1.jsonl"), 1, &[1.0, 1.0, 1.0]);
    assert!(matches!(aggregate_logs(&[a, b]), Err(Error::Aggregate(_))));
}

#[test]
fn report_is_idempotent_and_hashes_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(&dir.path().join("runs"));
    c.budget.max_generations = 7;
    run_experiment(&c).unwrap();
    c.strategy.kind = StrategyKind::Snes;
    run_experiment(&c).unwrap();
    let summary = aggregate_dir(&dir.path().join("runs")).unwrap();
    assert_eq!(read_summary(&summary).unwrap().len(), 14);

    let out = dir.path().join("report");
    let first = report(&summary, &out, true).unwrap();
    let again = report(&summary, &out, true).unwrap();
    assert_eq!(first, again);
    // two curves and one plot
    assert_eq!(first.files.len(), 3);
    for entry in &first.files {
        let bytes = fs::read(out.join(&entry.path)).unwrap();
        assert_eq!(sha256_hex(&bytes), entry.sha256);
        assert_eq!(bytes.len() as u64, entry.bytes);
        if entry.path.ends_with(".csv") {
            // header plus max_generations rows
            assert_eq!(String::from_utf8(bytes).unwrap().lines().count(), 8);
        }
    }
    let on_disk: Manifest = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk, first);
}

#[test]
fn report_on_missing_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert!(matches!(report(&missing, &dir.path().join("out"), false), Err(Error::Report(_))));
    fs::create_dir(&missing).unwrap();
    assert!(matches!(report(&missing, &dir.path().join("out"), false), Err(Error::Report(_))));
}

#[test]
fn ablation_grid_shapes() {
    let base = ExperimentConfig::default();
    assert_eq!(ablation_grid(&base, &[]).unwrap(), vec![base.clone()]);

    let resolution = Axis::parse("strategy.evollm.codec.resolution=50,100,1000,10000").unwrap();
    let grid = ablation_grid(&base, &[resolution.clone()]).unwrap();
    assert_eq!(grid.len(), 4);
    assert_eq!(grid[0].strategy.evollm.codec.resolution(), 50);

    let warmup = Axis::parse("strategy.evollm.warmup_generations=1,2,4").unwrap();
    let two = Axis::parse("strategy.evollm.sigma=0.1,0.3").unwrap();
    let grid = ablation_grid(&base, &[two, warmup]).unwrap();
    assert_eq!(grid.len(), 6);
    let mut labels: Vec<String> = grid.iter().map(|c| c.label()).collect();
    labels.dedup();
    assert_eq!(labels.len(), 6);
    assert!(grid.iter().all(|c| c.run_dir() != base.run_dir()));

    let bad = Axis::parse("strategy.evollm.no_such_field=1,2").unwrap();
    assert!(matches!(ablation_grid(&base, &[bad]), Err(Error::Config(_))));
}

#[test]
fn config_round_trips_through_toml() {
    let mut c = ExperimentConfig::default();
    c.strategy.kind = StrategyKind::Snes;
    c.backend.kind = BackendKind::EchoBest;
    c.budget.max_generations = 42;
    let text = c.to_toml_string().unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
    assert!(ExperimentConfig::from_toml_str("colour = 1").is_err());
}

#[test]
fn raw_text_runs_issue_one_query_per_generation() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    c.seeds = vec![3];
    c.task.dims = 3;
    c.strategy.evollm.block_size = Some(1);
    c.strategy.evollm.representation = evollm::strategies::Representation::RawText;
    let (_, records) = read_log(&run_experiment(&c).unwrap()[0]).unwrap();
    let queried: Vec<_> = records.iter().filter(|r| !r.queries.is_empty()).collect();
    assert_eq!(queried.len(), 17);
    for r in queried {
        assert_eq!(r.queries.len(), 1);
        assert_eq!(r.queries[0].block, (0, 3));
    }
}

use std::fs;
use std::path::PathBuf;

use adaptflow_cli::commands::{load_reports, REPORT_FILE, RUN_FILE, TRACE_FILE};
use adaptflow_cli::{cmd_compare, cmd_report, main_with, OUT_ENV};

fn example(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn cli(args: &[&str]) -> i32 {
    main_with(std::iter::once("adaptflow").chain(args.iter().copied()))
}

#[test]
fn run_writes_outputs_and_report_replays() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cv");
    let cfg = example("cont-v.example.toml");
    assert_eq!(cli(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--json"]), 0);
    for f in [TRACE_FILE, REPORT_FILE, RUN_FILE] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let stored = load_reports(&out.join(REPORT_FILE)).unwrap();
    assert_eq!(stored[0].counts.trajectories, 16);
    assert_eq!(cmd_report(&out).unwrap(), stored[0]);
    assert_eq!(cli(&["report", out.to_str().unwrap()]), 0);
}

#[test]
fn comparing_a_run_with_itself_gives_zero_differences() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let cfg = example("im-rp.example.toml");
    assert_eq!(cli(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let c = cmd_compare(&out, &out).unwrap();
    assert_eq!((c.a_runs, c.b_runs), (1, 1));
    for row in &c.rows {
        if let Some(d) = row.diff {
            assert_eq!(d, 0.0, "{}", row.metric);
        }
    }
}

#[test]
fn multi_seed_runs_land_in_seed_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example("cont-v.example.toml");
    let out = dir.path().to_str().unwrap();
    assert_eq!(cli(&["run", "--config", cfg.to_str().unwrap(), "--seed", "3", "--seeds", "3", "--out", out]), 0);
    for s in 3..6 {
        assert!(dir.path().join(format!("seed-{s:04}")).join(REPORT_FILE).is_file());
    }
    let seeds: Vec<u64> = load_reports(dir.path()).unwrap().iter().map(|r| r.seed).collect();
    assert_eq!(seeds.len(), 3);
    assert!(seeds.iter().all(|s| (3..6).contains(s)));
}

#[test]
fn adaptive_beats_control_across_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let im = example("im-rp.example.toml");
    let cv = example("cont-v.example.toml");
    for (cfg, out) in [(&im, &a), (&cv, &b)] {
        let code = cli(&["run", "--config", cfg.to_str().unwrap(), "--seeds", "10", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0);
    }
    let c = cmd_compare(&a, &b).unwrap();
    assert_eq!((c.a_runs, c.b_runs), (10, 10));
    assert!(c.row("final_score_median").unwrap().diff.unwrap() > 0.0);
    assert!(c.row("gpu_pct").unwrap().diff.unwrap() > 0.0);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(cli(&["run", "--config", "/nonexistent.toml", "--out", out]), 2);

    let bad = dir.path().join("bad.toml");
    let text = fs::read_to_string(example("cont-v.example.toml")).unwrap();
    fs::write(&bad, format!("bogus_field = 1\n{text}")).unwrap();
    assert_eq!(cli(&["run", "--config", bad.to_str().unwrap(), "--out", out]), 2);

    let cfg = example("cont-v.example.toml");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(cli(&["run", "--config", cfg, "--set", "pipelines.0.cycles=0", "--out", out]), 2);
    assert_eq!(cli(&["run", "--config", cfg, "--set", "pool.gpus=0", "--out", out]), 2);
    assert_eq!(cli(&["run", "--config", cfg, "--seeds", "0", "--out", out]), 2);
    assert_eq!(cli(&["frobnicate"]), 2);
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example("cont-v.example.toml");
    std::env::set_var(OUT_ENV, dir.path());
    let code = cli(&["run", "--config", cfg.to_str().unwrap()]);
    std::env::remove_var(OUT_ENV);
    assert_eq!(code, 0);
    assert!(dir.path().join(REPORT_FILE).is_file());
}

use std::path::Path;
use std::process::{Command, Output};

use graphrl_cli::experiments::{
    run_compare, run_discrepancy, run_generalise, train_agent, Agent, CompareRow, DiscrepancyRow, GeneraliseRow,
    Heatmap, LabError,
};
use graphrl_cli::report::{body, body_without, from_csv, to_csv};
use graphrl_cli::{Lab, LabConfig, Overrides};
use graphrl_core::env::TraceStep;
use graphrl_core::Benchmark;

fn graphrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphrl"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn step(t: usize, rule: Option<&str>) -> TraceStep {
    TraceStep {
        t,
        action: usize::from(rule.is_some()),
        rule_id: rule.map(str::to_string),
        reward: 0.1,
        cost_model_latency: 1.0,
        e2e_latency: 1.0,
        measured: false,
    }
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"seed": 4, "depth": 3, "train": {"episodes": 50}}"#).unwrap();
    let file_only = LabConfig::resolve(Some(&path), &Overrides::default()).unwrap();
    assert_eq!((file_only.seed, file_only.depth, file_only.train.episodes), (4, 3, 50));
    assert_eq!(file_only.train.lr, 5e-4);
    let flags = Overrides {
        seed: Some(9),
        episodes: None,
        depth: Some(2),
    };
    let both = LabConfig::resolve(Some(&path), &flags).unwrap();
    assert_eq!((both.seed, both.depth, both.train.episodes), (9, 2, 50));
    let neither = LabConfig::resolve(None, &Overrides::default()).unwrap();
    assert_eq!(neither, LabConfig::default());
}

#[test]
fn appendix_hyperparameters_are_the_defaults() {
    let c = LabConfig::default();
    assert_eq!((c.train.lr, c.train.c1, c.train.c2), (5e-4, 0.5, 0.01));
    assert_eq!((c.train.update_every, c.train.batch_size), (10, 16));
    assert_eq!((c.env.edge_norm, c.env.feedback_period), (4096.0, 5));
    assert_eq!((c.policy.gat_layers, c.policy.mlp_hidden), (5, [256, 64]));
    assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
}

#[test]
fn config_hash_tracks_content() {
    let a = LabConfig::default();
    let mut b = a.clone();
    assert_eq!(a.hash(), b.hash());
    b.train.episodes += 1;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"no_such_field": 1}"#).unwrap();
    std::fs::write(dir.path().join("deep.json"), r#"{"depth": 9}"#).unwrap();
    for args in [
        vec!["--config", "bad.json", "rules"],
        vec!["--config", "deep.json", "rules"],
        vec!["--config", "missing.json", "rules"],
        vec!["gen", "resnet"],
        vec!["compare", "--agents", "oracle"],
        vec!["--seed", "minus-one", "rules"],
    ] {
        assert_eq!(graphrl(dir.path(), &args).status.code(), Some(2), "{args:?}");
    }
    assert_eq!(graphrl(dir.path(), &["rules"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = graphrl(dir.path(), &["compare", "--agents", "rl", "--benchmarks", "trap"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no checkpoint"));
}

#[test]
fn csv_carries_provenance_and_round_trips() {
    let lab = Lab::new(LabConfig::default());
    let rows = run_discrepancy(&lab, &Benchmark::ALL).unwrap();
    let text = to_csv(&rows, 7, &lab.cfg.hash()).unwrap();
    assert_eq!(text.lines().next().unwrap(), format!("# seed=7 config={}", lab.cfg.hash()));
    let back: Vec<DiscrepancyRow> = from_csv(&text).unwrap();
    assert_eq!(back, rows);
    assert_eq!(to_csv(&back, 7, &lab.cfg.hash()).unwrap(), text);
}

#[test]
fn discrepancy_rows_are_recomputable() {
    let lab = Lab::new(LabConfig::default());
    for r in run_discrepancy(&lab, &Benchmark::ALL).unwrap() {
        let diff = (r.cost_model_total - r.e2e_total) / r.e2e_total * 100.0;
        assert!((diff - r.diff_pct).abs() < 1e-9, "{r:?}");
        if r.graph == "initial" {
            // Nothing has been folded yet, so only launch overheads differ and they agree.
            assert_eq!(r.diff_pct, 0.0);
        }
    }
}

#[test]
fn compare_has_a_row_per_benchmark_and_agent_and_the_oracle_dominates() {
    let mut cfg = LabConfig::default();
    cfg.seeds = vec![0, 1];
    cfg.random_episodes = 20;
    let lab = Lab::new(cfg);
    let agents = [Agent::Greedy, Agent::Random, Agent::Exhaustive];
    let rows = run_compare(&lab, &Benchmark::ALL, &agents, Path::new(".")).unwrap();
    assert_eq!(rows.len(), Benchmark::ALL.len() * agents.len());
    for b in Benchmark::ALL {
        let of = |a: &str| rows.iter().find(|r| r.benchmark == b.name() && r.agent == a).unwrap().clone();
        let oracle: CompareRow = of("exhaustive");
        for a in ["greedy", "random"] {
            assert!(oracle.mean_speedup >= of(a).mean_speedup - 1e-12, "{b} {a}");
        }
    }
    let text = to_csv(&rows, 0, "x").unwrap();
    assert_eq!(from_csv::<CompareRow>(&text).unwrap(), rows);
}

#[test]
fn heatmap_counts_and_row_sums() {
    let trace = vec![
        step(1, Some("fuse_matmul_add")),
        step(2, Some("fuse_matmul_add")),
        step(3, None),
        step(4, Some("fuse_matmul_add")),
        step(5, Some("transpose_elim")),
    ];
    let h = Heatmap::from_traces(&[("a".into(), trace.clone()), ("b".into(), trace[..2].to_vec())]).unwrap();
    assert_eq!(h.count("fuse_matmul_add", "a"), 3);
    assert_eq!(h.count("fuse_matmul_add", "b"), 2);
    assert_eq!(h.count("merge_matmul", "a"), 0);
    assert_eq!(h.steps, vec![4, 2]);
    assert!(h.row_sums_match());
    // Only applied rules appear, in registry order.
    let rules: Vec<&str> = h.rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(rules, vec!["transpose_elim", "fuse_matmul_add"]);
    let csv = h.to_csv(0, "x").unwrap();
    assert_eq!(body(&csv), "rule_id,a,b\ntranspose_elim,1,0\nfuse_matmul_add,3,2\n");
}

#[test]
fn heatmap_rejects_empty_traces() {
    assert!(matches!(
        Heatmap::from_traces(&[("a".into(), vec![])]),
        Err(LabError::EmptyTrace(l)) if l == "a"
    ));
    assert!(matches!(Heatmap::from_traces(&[]), Err(LabError::EmptyTrace(_))));
}

#[test]
fn generalise_marks_the_training_shape() {
    let mut cfg = LabConfig::default();
    cfg.train.episodes = 10;
    let lab = Lab::new(cfg);
    let agent = train_agent(&lab, Benchmark::Trap, 0, |_, _| {}).unwrap();
    let rows = run_generalise(&lab, &agent.net, Benchmark::Trap, 0, &[0.5, 1.0, 2.0]).unwrap();
    let marks: Vec<&str> = rows.iter().map(|r| r.trained.as_str()).collect();
    assert_eq!(marks, vec!["", "*", ""]);
    let unit = &rows[1];
    assert_eq!(unit.rl_speedup, agent.evaluation.summary.speedup);
    for r in &rows {
        assert!(r.rl_speedup >= 1.0 - 1e-12 || r.rl_speedup <= r.optimum_speedup);
        assert!(r.optimum_speedup >= r.rl_speedup - 1e-12);
    }
    let text = to_csv(&rows, 0, "x").unwrap();
    assert_eq!(from_csv::<GeneraliseRow>(&text).unwrap(), rows);
}

#[test]
fn training_writes_periodic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"checkpoint_every": 5}"#).unwrap();
    let out = graphrl(dir.path(), &["--config", "c.json", "--episodes", "10", "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = dir.path().join("out/checkpoints");
    assert!(ck.join("trap_seed0_ep5.ckpt.json").exists());
    assert!(ck.join("trap_seed0_ep10.ckpt.json").exists());
    let log = std::fs::read_to_string(dir.path().join("out/trap_seed0_train.csv")).unwrap();
    assert_eq!(body(&log).lines().count(), 11);
    let timing_free = body_without(&log, &["wallclock_s"]).unwrap();
    assert!(timing_free.starts_with("episode,return,final_speedup,loss_clip,loss_vf,entropy\n"));
}

#[test]
fn gen_writes_loadable_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let out = graphrl(dir.path(), &["gen"]);
    assert!(out.status.success());
    for b in Benchmark::ALL {
        let text = std::fs::read_to_string(dir.path().join(format!("out/{b}.json"))).unwrap();
        assert_eq!(graphrl_core::graph::load(&text).unwrap(), b.graph());
    }
}

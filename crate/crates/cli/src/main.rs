use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use graphrl_cli::checks::{self, Check};
use graphrl_cli::experiments::{
    checkpoint_name, eval_row, gen_benchmark, run_compare, run_discrepancy, run_generalise, train_agent, Heatmap,
};
use graphrl_cli::report::write_csv;
use graphrl_cli::{Agent, ConfigError, Lab, LabConfig, LabError, Overrides};
use graphrl_core::env::{read_trace, write_trace, TraceStep};
use graphrl_core::rewrite::fixtures::rule_fixture;
use graphrl_core::rewrite::{match_rule, registry};
use graphrl_core::Benchmark;

#[derive(Parser)]
#[command(name = "graphrl", version, about = "Tensor-graph superoptimisation experiments")]
struct Cli {
    /// JSON configuration file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Training episodes.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Exhaustive-search depth.
    #[arg(long, global = true)]
    depth: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write benchmark graphs as JSON.
    Gen {
        /// Defaults to every benchmark.
        benchmarks: Vec<String>,
    },
    /// Train a PPO agent on a benchmark's base shape.
    Train {
        #[arg(long, default_value = "trap")]
        benchmark: String,
        /// Train one agent per configured seed instead of `--seed`.
        #[arg(long)]
        all_seeds: bool,
    },
    /// Greedy-decode a checkpoint on a benchmark.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "trap")]
        benchmark: String,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Speedup of each agent on each benchmark over the configured seeds.
    Compare {
        /// Defaults to every benchmark.
        #[arg(long, value_delimiter = ',')]
        benchmarks: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "greedy,random,exhaustive")]
        agents: Vec<String>,
        /// Directory holding `<benchmark>_seed<k>.ckpt.json`; defaults to `--out`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Rule application counts from trace files (`LABEL=PATH` or `PATH`).
    Heatmap {
        #[arg(required = true)]
        traces: Vec<String>,
    },
    /// Evaluate a frozen agent across shape scales.
    Generalise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "trap")]
        benchmark: String,
        /// Defaults to the configured scales.
        #[arg(long, value_delimiter = ',')]
        scales: Vec<f64>,
    },
    /// Cost-model versus end-to-end latency per benchmark.
    Discrepancy {
        benchmarks: Vec<String>,
    },
    /// List the rewrite rules.
    Rules,
    /// Run the experiment-level acceptance checks; exits 3 on failure.
    SelfTest,
}

fn benchmarks(names: &[String]) -> Result<Vec<Benchmark>, ConfigError> {
    if names.is_empty() {
        return Ok(Benchmark::ALL.to_vec());
    }
    names.iter().map(|n| parse_benchmark(n)).collect()
}

fn parse_benchmark(name: &str) -> Result<Benchmark, ConfigError> {
    name.parse().map_err(|e: graphrl_core::bench::BenchError| ConfigError::Invalid {
        field: "benchmark",
        reason: e.to_string(),
    })
}

fn write_trace_file(path: &Path, trace: &[TraceStep]) -> anyhow::Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_trace(std::io::BufWriter::new(f), trace)?;
    Ok(())
}

enum Outcome {
    Done,
    ChecksFailed,
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let flags = Overrides {
        seed: cli.seed,
        episodes: cli.episodes,
        depth: cli.depth,
    };
    let cfg = LabConfig::resolve(cli.config.as_deref(), &flags)?;
    let hash = cfg.hash();
    let seed = cfg.seed;
    let out = cli.out;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let lab = Lab::new(cfg);

    match cli.command {
        Command::Gen { benchmarks: names } => {
            for b in benchmarks(&names)? {
                println!("{}", gen_benchmark(&lab, b, &out)?.display());
            }
        }
        Command::Train { benchmark, all_seeds } => {
            let b = parse_benchmark(&benchmark)?;
            let seeds = if all_seeds { lab.cfg.seeds.clone() } else { vec![seed] };
            let ckdir = out.join("checkpoints");
            for s in seeds {
                let mut saved: anyhow::Result<()> = Ok(());
                let agent = train_agent(&lab, b, s, |done, net| {
                    if saved.is_ok() {
                        saved = std::fs::create_dir_all(&ckdir)
                            .and_then(|_| {
                                std::fs::write(ckdir.join(format!("{b}_seed{s}_ep{done}.ckpt.json")), net.store.to_checkpoint())
                            })
                            .map_err(Into::into);
                    }
                })?;
                saved?;
                std::fs::write(out.join(checkpoint_name(b, s)), agent.net.store.to_checkpoint())?;
                write_csv(&out.join(format!("{b}_seed{s}_train.csv")), &agent.log, s, &hash)?;
                write_trace_file(&out.join(format!("{b}_seed{s}_rl.jsonl")), &agent.evaluation.trace)?;
                let sm = &agent.evaluation.summary;
                println!(
                    "{b} seed {s}: speedup {:.4} ({:.3} -> {:.3} us, {} rewrites)",
                    sm.speedup, sm.initial_e2e, sm.final_e2e, sm.steps
                );
            }
        }
        Command::Evaluate {
            checkpoint,
            benchmark,
            scale,
        } => {
            let b = parse_benchmark(&benchmark)?;
            let net = lab.load_agent(&checkpoint)?;
            let ev = lab.evaluate_agent(&net, &b.scaled(scale)?)?;
            let row = eval_row(b, seed, scale, &ev);
            write_csv(&out.join(format!("{b}_seed{seed}_eval.csv")), &[row], seed, &hash)?;
            write_trace_file(&out.join(format!("{b}_seed{seed}_eval.jsonl")), &ev.trace)?;
            println!("{b} x{scale}: speedup {:.4} in {} rewrites", ev.summary.speedup, ev.summary.steps);
        }
        Command::Compare {
            benchmarks: names,
            agents,
            checkpoints,
        } => {
            let bs = benchmarks(&names)?;
            let agents = agents
                .iter()
                .map(|a| Agent::parse(a))
                .collect::<Result<Vec<_>, LabError>>()
                .map_err(|e| ConfigError::Invalid {
                    field: "agents",
                    reason: e.to_string(),
                })?;
            let rows = run_compare(&lab, &bs, &agents, checkpoints.as_deref().unwrap_or(&out))?;
            write_csv(&out.join("compare.csv"), &rows, seed, &hash)?;
            for r in &rows {
                println!(
                    "{:<15} {:<10} {:.4} +- {:.4}",
                    r.benchmark, r.agent, r.mean_speedup, r.std_speedup
                );
            }
        }
        Command::Heatmap { traces } => {
            let mut loaded = Vec::new();
            for spec in &traces {
                let (label, path) = match spec.split_once('=') {
                    Some((l, p)) => (l.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(spec);
                        let stem = p.file_stem().map_or(spec.clone(), |s| s.to_string_lossy().into_owned());
                        (stem, p)
                    }
                };
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                loaded.push((label, read_trace(&text)?));
            }
            let h = Heatmap::from_traces(&loaded)?;
            let csv = h.to_csv(seed, &hash)?;
            std::fs::write(out.join("heatmap.csv"), &csv)?;
            print!("{}", graphrl_cli::report::body(&csv));
        }
        Command::Generalise {
            checkpoint,
            benchmark,
            scales,
        } => {
            let b = parse_benchmark(&benchmark)?;
            let net = lab.load_agent(&checkpoint)?;
            let scales = if scales.is_empty() { lab.cfg.scales.clone() } else { scales };
            let rows = run_generalise(&lab, &net, b, seed, &scales)?;
            write_csv(&out.join(format!("{b}_generalise.csv")), &rows, seed, &hash)?;
            for r in &rows {
                println!(
                    "{b} x{}{}: rl {:.4} optimum {:.4} ({:.3})",
                    r.scale, r.trained, r.rl_speedup, r.optimum_speedup, r.fraction_of_optimum
                );
            }
        }
        Command::Discrepancy { benchmarks: names } => {
            let rows = run_discrepancy(&lab, &benchmarks(&names)?)?;
            write_csv(&out.join("discrepancy.csv"), &rows, seed, &hash)?;
            for r in &rows {
                println!(
                    "{:<15} {:<8} cm {:>14.3} e2e {:>14.3} diff {:>8.3}%",
                    r.benchmark, r.graph, r.cost_model_total, r.e2e_total, r.diff_pct
                );
            }
        }
        Command::Rules => {
            for r in registry() {
                let fires = rule_fixture(r.rule_id).map_or(0, |g| match_rule(&g, r).len());
                println!("{:<18} {}  [{} match(es) on fixture]", r.rule_id, r.description, fires);
            }
        }
        Command::SelfTest => {
            let (c6, trap) = checks::trap_separation(&lab)?;
            let results: Vec<Check> = vec![
                c6,
                checks::shape_generalisation(&lab, &trap)?,
                checks::heatmap_consistency(&lab, &trap)?,
                checks::discrepancy_table(&lab)?,
                checks::determinism(&lab, 20)?,
            ];
            for c in &results {
                println!("{c}");
            }
            if results.iter().any(|c| !c.passed) {
                return Ok(Outcome::ChecksFailed);
            }
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

//! Experiment drivers behind the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use graphrl_core::env::{GraphEnv, TraceStep};
use graphrl_core::rewrite::registry;
use graphrl_core::search::{exhaustive_optimise, greedy_optimise, random_optimise, ExhaustiveOptions, SearchResult};
use graphrl_core::{Benchmark, CompGraph, CostFn, CostModel};
use graphrl_learn::ppo::{Evaluation, TrainLogRow};
use graphrl_learn::{evaluate, ParamStore, PolicyNet, Trainer};

use crate::config::LabConfig;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("no checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("trace {0} has no steps")]
    EmptyTrace(String),
    #[error("unknown agent {0:?}; expected greedy, random, rl or exhaustive")]
    UnknownAgent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    Greedy,
    Random,
    Rl,
    Exhaustive,
}

impl Agent {
    pub fn name(self) -> &'static str {
        match self {
            Agent::Greedy => "greedy",
            Agent::Random => "random",
            Agent::Rl => "rl",
            Agent::Exhaustive => "exhaustive",
        }
    }

    pub fn parse(s: &str) -> Result<Self, LabError> {
        match s {
            "greedy" => Ok(Agent::Greedy),
            "random" => Ok(Agent::Random),
            "rl" => Ok(Agent::Rl),
            "exhaustive" => Ok(Agent::Exhaustive),
            _ => Err(LabError::UnknownAgent(s.to_string())),
        }
    }
}

pub struct Lab {
    pub cfg: LabConfig,
    pub model: CostModel,
}

impl Lab {
    pub fn new(cfg: LabConfig) -> Self {
        let model = CostModel::new(cfg.cost.clone());
        Lab { cfg, model }
    }

    pub fn env(&self) -> GraphEnv<'static> {
        GraphEnv::new(registry(), self.model.clone(), self.cfg.env)
    }

    pub fn greedy(&self, g: &CompGraph, f: CostFn) -> anyhow::Result<SearchResult> {
        Ok(greedy_optimise(g, registry(), f, &self.model)?)
    }

    /// Exhaustive optimum under end-to-end latency.
    pub fn oracle(&self, g: &CompGraph) -> anyhow::Result<SearchResult> {
        let opts = ExhaustiveOptions::new(self.cfg.depth);
        Ok(exhaustive_optimise(g, registry(), CostFn::EndToEnd, &self.model, opts)?)
    }

    pub fn load_agent(&self, path: &Path) -> anyhow::Result<PolicyNet<f64>> {
        if !path.exists() {
            return Err(LabError::MissingCheckpoint(path.to_path_buf()).into());
        }
        let doc = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let store = ParamStore::<f64>::from_checkpoint(&doc)?;
        Ok(PolicyNet::from_store(self.cfg.policy.clone(), &store)?)
    }

    pub fn evaluate_agent(&self, net: &PolicyNet<f64>, g: &CompGraph) -> anyhow::Result<Evaluation> {
        Ok(evaluate(net, &mut self.env(), g)?)
    }
}

pub fn checkpoint_name(benchmark: Benchmark, seed: u64) -> String {
    format!("{benchmark}_seed{seed}.ckpt.json")
}

pub struct TrainedAgent {
    pub benchmark: Benchmark,
    pub seed: u64,
    pub net: PolicyNet<f64>,
    pub log: Vec<TrainLogRow>,
    /// Greedy decode of the final policy on the training graph.
    pub evaluation: Evaluation,
}

/// Trains one agent on the benchmark's base shape. `on_checkpoint` receives
/// `(episodes done, network)` every `checkpoint_every` episodes.
pub fn train_agent(
    lab: &Lab,
    benchmark: Benchmark,
    seed: u64,
    mut on_checkpoint: impl FnMut(usize, &PolicyNet<f64>),
) -> anyhow::Result<TrainedAgent> {
    let g0 = benchmark.graph();
    let net = PolicyNet::new(lab.cfg.policy.clone(), seed);
    let mut trainer = Trainer::new(net, lab.cfg.train.clone(), seed);
    let every = lab.cfg.checkpoint_every;
    let out = trainer.train(&mut lab.env(), &g0, |row, _, net| {
        let done = row.episode + 1;
        if every > 0 && done % every == 0 {
            on_checkpoint(done, net);
        }
    })?;
    let evaluation = lab.evaluate_agent(&trainer.net, &g0)?;
    Ok(TrainedAgent {
        benchmark,
        seed,
        net: trainer.net,
        log: out.log,
        evaluation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub benchmark: String,
    pub seed: u64,
    pub scale: f64,
    pub initial_e2e: f64,
    pub final_e2e: f64,
    pub speedup: f64,
    pub steps: usize,
    pub wallclock_s: f64,
}

pub fn eval_row(benchmark: Benchmark, seed: u64, scale: f64, ev: &Evaluation) -> EvalRow {
    EvalRow {
        benchmark: benchmark.to_string(),
        seed,
        scale,
        initial_e2e: ev.summary.initial_e2e,
        final_e2e: ev.summary.final_e2e,
        speedup: ev.summary.speedup,
        steps: ev.summary.steps,
        wallclock_s: ev.wallclock_s,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub benchmark: String,
    pub agent: String,
    pub runs: usize,
    pub mean_speedup: f64,
    pub std_speedup: f64,
    pub best_final_e2e: f64,
    pub mean_wallclock_s: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per benchmark and agent over `cfg.seeds`. RL agents are read
/// from `checkpoints` by [`checkpoint_name`].
pub fn run_compare(
    lab: &Lab,
    benchmarks: &[Benchmark],
    agents: &[Agent],
    checkpoints: &Path,
) -> anyhow::Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for &b in benchmarks {
        let g = b.graph();
        for &agent in agents {
            let mut runs: Vec<(f64, f64, f64)> = Vec::new();
            for &seed in &lab.cfg.seeds {
                let start = Instant::now();
                let (speedup, fin) = match agent {
                    Agent::Greedy => {
                        let r = lab.greedy(&g, CostFn::CostModel)?;
                        (r.summary.speedup, r.summary.final_e2e)
                    }
                    Agent::Exhaustive => {
                        let r = lab.oracle(&g)?;
                        (r.summary.speedup, r.summary.final_e2e)
                    }
                    Agent::Random => {
                        let r = random_optimise(&g, registry(), &lab.model, lab.cfg.env, seed, lab.cfg.random_episodes)?;
                        (r.best.speedup, r.best.final_e2e)
                    }
                    Agent::Rl => {
                        let net = lab.load_agent(&checkpoints.join(checkpoint_name(b, seed)))?;
                        let ev = lab.evaluate_agent(&net, &g)?;
                        (ev.summary.speedup, ev.summary.final_e2e)
                    }
                };
                runs.push((speedup, fin, start.elapsed().as_secs_f64()));
            }
            let speedups: Vec<f64> = runs.iter().map(|r| r.0).collect();
            let (mean, std) = mean_std(&speedups);
            rows.push(CompareRow {
                benchmark: b.to_string(),
                agent: agent.name().to_string(),
                runs: runs.len(),
                mean_speedup: mean,
                std_speedup: std,
                best_final_e2e: runs.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
                mean_wallclock_s: runs.iter().map(|r| r.2).sum::<f64>() / runs.len() as f64,
            });
        }
    }
    Ok(rows)
}

/// Rule-by-column application counts; only rules applied at least once get a row.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<usize>)>,
    /// Non-No-Op steps per column, counted straight from the traces.
    pub steps: Vec<usize>,
}

impl Heatmap {
    /// Traces sharing a label are summed into one column.
    pub fn from_traces(traces: &[(String, Vec<TraceStep>)]) -> Result<Self, LabError> {
        let mut columns: Vec<String> = Vec::new();
        for (label, trace) in traces {
            if trace.is_empty() {
                return Err(LabError::EmptyTrace(label.clone()));
            }
            if !columns.contains(label) {
                columns.push(label.clone());
            }
        }
        if columns.is_empty() {
            return Err(LabError::EmptyTrace("<none>".to_string()));
        }
        let mut counts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut steps = vec![0; columns.len()];
        for (label, trace) in traces {
            let col = columns.iter().position(|c| c == label).expect("column registered");
            for rule in trace.iter().filter_map(|s| s.rule_id.as_deref()) {
                counts.entry(rule).or_insert_with(|| vec![0; columns.len()])[col] += 1;
                steps[col] += 1;
            }
        }
        let mut rows = Vec::new();
        for r in registry() {
            if let Some(c) = counts.remove(r.rule_id) {
                rows.push((r.rule_id.to_string(), c));
            }
        }
        rows.extend(counts.into_iter().map(|(k, v)| (k.to_string(), v)));
        Ok(Heatmap { columns, rows, steps })
    }

    pub fn row_sums_match(&self) -> bool {
        (0..self.columns.len()).all(|c| self.rows.iter().map(|r| r.1[c]).sum::<usize>() == self.steps[c])
    }

    pub fn count(&self, rule: &str, column: &str) -> usize {
        let Some(c) = self.columns.iter().position(|x| x == column) else { return 0 };
        self.rows.iter().find(|r| r.0 == rule).map_or(0, |r| r.1[c])
    }

    pub fn to_csv(&self, seed: u64, config_hash: &str) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["rule_id".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (rule, counts) in &self.rows {
            let mut rec = vec![rule.clone()];
            rec.extend(counts.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        let body = String::from_utf8(w.into_inner()?)?;
        Ok(format!("# seed={seed} config={config_hash}\n{body}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneraliseRow {
    pub benchmark: String,
    pub seed: u64,
    pub scale: f64,
    /// `*` on the shape the agent was trained on.
    pub trained: String,
    pub rl_speedup: f64,
    pub optimum_speedup: f64,
    pub fraction_of_optimum: f64,
    pub rl_final_e2e: f64,
    pub optimum_e2e: f64,
}

/// Frozen-agent evaluation across shape scales against each shape's optimum.
pub fn run_generalise(
    lab: &Lab,
    net: &PolicyNet<f64>,
    benchmark: Benchmark,
    seed: u64,
    scales: &[f64],
) -> anyhow::Result<Vec<GeneraliseRow>> {
    let mut rows = Vec::new();
    for &scale in scales {
        let g = benchmark.scaled(scale)?;
        let ev = lab.evaluate_agent(net, &g)?;
        let opt = lab.oracle(&g)?;
        rows.push(GeneraliseRow {
            benchmark: benchmark.to_string(),
            seed,
            scale,
            trained: if scale == 1.0 { "*".to_string() } else { String::new() },
            rl_speedup: ev.summary.speedup,
            optimum_speedup: opt.summary.speedup,
            fraction_of_optimum: ev.summary.speedup / opt.summary.speedup,
            rl_final_e2e: ev.summary.final_e2e,
            optimum_e2e: opt.summary.final_e2e,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyRow {
    pub benchmark: String,
    /// `initial`, `greedy` (cost-model greedy) or `oracle` (exhaustive optimum).
    pub graph: String,
    /// Rules applied to reach this graph, `+`-joined.
    pub rules: String,
    pub cost_model_total: f64,
    pub e2e_total: f64,
    pub diff_pct: f64,
}

pub fn run_discrepancy(lab: &Lab, benchmarks: &[Benchmark]) -> anyhow::Result<Vec<DiscrepancyRow>> {
    let mut rows = Vec::new();
    for &b in benchmarks {
        let g0 = b.graph();
        let greedy = lab.greedy(&g0, CostFn::CostModel)?;
        let oracle = lab.oracle(&g0)?;
        let variants = [
            ("initial", &g0, Vec::new()),
            ("greedy", &greedy.graph, greedy.trace),
            ("oracle", &oracle.graph, oracle.trace),
        ];
        for (name, g, trace) in variants {
            let rep = lab.model.cost_report(g);
            let rules: Vec<&str> = trace.iter().filter_map(|s| s.rule_id.as_deref()).collect();
            rows.push(DiscrepancyRow {
                benchmark: b.to_string(),
                graph: name.to_string(),
                rules: rules.join("+"),
                cost_model_total: rep.cost_model_total,
                e2e_total: rep.e2e_total,
                diff_pct: rep.discrepancy_pct(),
            });
        }
    }
    Ok(rows)
}

/// Writes the benchmark graph; for the trap, first confirms that greedy
/// search stops above the exhaustive optimum.
pub fn gen_benchmark(lab: &Lab, benchmark: Benchmark, out: &Path) -> anyhow::Result<PathBuf> {
    let g = benchmark.graph();
    if benchmark == Benchmark::Trap {
        let best = lab.oracle(&g)?.summary.final_e2e;
        let greedy = lab.greedy(&g, CostFn::EndToEnd)?.summary.final_e2e;
        if greedy <= best {
            bail!("trap property violated: greedy reaches {greedy} against optimum {best}");
        }
    }
    let path = out.join(format!("{benchmark}.json"));
    std::fs::write(&path, graphrl_core::graph::save(&g))?;
    Ok(path)
}

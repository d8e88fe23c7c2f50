//! Non-learned optimisers: greedy descent, bounded exhaustive search and a
//! uniform random policy.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cost::{CostFn, CostModel, Micros};
use crate::env::{latency_drop_pct, EnvConfig, EnvError, EpisodeSummary, GraphEnv, TraceStep};
use crate::graph::{canonical_hash, CompGraph};
use crate::rewrite::{generate_candidates, Candidate, RewriteError, RewriteRule};

/// Node-expansion cap of the exhaustive search.
pub const DEFAULT_EXPANSION_BUDGET: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("exhaustive search exceeded its budget of {budget} expansions")]
    BudgetExceeded { budget: usize },
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub graph: CompGraph,
    pub cost: Micros,
    pub trace: Vec<TraceStep>,
    pub summary: EpisodeSummary,
}

fn trace_step(
    model: &CostModel,
    t: usize,
    action: usize,
    cand: &Candidate,
    rt0: Micros,
    prev_e2e: Micros,
) -> TraceStep {
    let report = model.cost_report(&cand.graph);
    TraceStep {
        t,
        action,
        rule_id: Some(cand.rule_id.to_string()),
        reward: latency_drop_pct(rt0, prev_e2e, report.e2e_total),
        cost_model_latency: report.cost_model_total,
        e2e_latency: report.e2e_total,
        measured: true,
    }
}

fn finish(model: &CostModel, g0: &CompGraph, graph: CompGraph, cost: Micros, trace: Vec<TraceStep>) -> SearchResult {
    let initial = model.simulated_e2e_latency(g0);
    let fin = model.simulated_e2e_latency(&graph);
    SearchResult {
        summary: EpisodeSummary::from_trace(initial, fin, &trace),
        graph,
        cost,
        trace,
    }
}

/// Applies the best strictly improving candidate until none improves.
///
/// Ties on cost are broken by `(rule_id, anchor)`.
pub fn greedy_optimise(
    g0: &CompGraph,
    rules: &[RewriteRule],
    cost_fn: CostFn,
    model: &CostModel,
) -> Result<SearchResult, SearchError> {
    let rt0 = model.simulated_e2e_latency(g0);
    let mut g = g0.clone();
    let mut cost = model.latency(&g, cost_fn);
    let mut prev_e2e = rt0;
    let mut trace = Vec::new();
    loop {
        let cands = generate_candidates(&g, rules, usize::MAX)?;
        let best = cands
            .iter()
            .enumerate()
            .map(|(i, c)| (model.latency(&c.graph, cost_fn), c.rule_id, c.anchor, i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
        let Some((c, _, _, i)) = best else { break };
        if c >= cost {
            break;
        }
        let step = trace_step(model, trace.len() + 1, i + 1, &cands[i], rt0, prev_e2e);
        prev_e2e = step.e2e_latency;
        trace.push(step);
        g = cands.into_iter().nth(i).expect("index in range").graph;
        cost = c;
    }
    Ok(finish(model, g0, g, cost, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExhaustiveOptions {
    pub depth: usize,
    pub max_expansions: usize,
    /// Skip states already reached at an equal or shallower depth.
    pub memoise: bool,
}

impl ExhaustiveOptions {
    pub fn new(depth: usize) -> Self {
        ExhaustiveOptions {
            depth,
            max_expansions: DEFAULT_EXPANSION_BUDGET,
            memoise: true,
        }
    }
}

struct Node {
    graph: CompGraph,
    parent: Option<(usize, Candidate, usize)>,
}

/// Best graph over every rewrite sequence of length at most `depth`.
///
/// Breadth-first, so among equal-cost optima the shortest sequence wins.
/// Every visited state counts against the expansion budget.
pub fn exhaustive_optimise(
    g0: &CompGraph,
    rules: &[RewriteRule],
    cost_fn: CostFn,
    model: &CostModel,
    opts: ExhaustiveOptions,
) -> Result<SearchResult, SearchError> {
    let mut nodes = vec![Node {
        graph: g0.clone(),
        parent: None,
    }];
    let mut seen: HashMap<u64, usize> = HashMap::new();
    seen.insert(canonical_hash(g0), 0);
    let mut best = (model.latency(g0, cost_fn), 0usize);
    let mut frontier = vec![0usize];
    let mut expansions = 0usize;
    for _ in 0..opts.depth {
        let mut next = Vec::new();
        for &idx in &frontier {
            expansions += 1;
            if expansions > opts.max_expansions {
                return Err(SearchError::BudgetExceeded {
                    budget: opts.max_expansions,
                });
            }
            let cands = generate_candidates(&nodes[idx].graph, rules, usize::MAX)?;
            for (i, c) in cands.into_iter().enumerate() {
                if opts.memoise && seen.contains_key(&c.digest) {
                    continue;
                }
                let cost = model.latency(&c.graph, cost_fn);
                let id = nodes.len();
                seen.entry(c.digest).or_insert(id);
                if cost < best.0 {
                    best = (cost, id);
                }
                nodes.push(Node {
                    graph: c.graph.clone(),
                    parent: Some((idx, c, i + 1)),
                });
                next.push(id);
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }

    let mut path = Vec::new();
    let mut cur = best.1;
    while let Some((parent, cand, action)) = &nodes[cur].parent {
        path.push((cand.clone(), *action));
        cur = *parent;
    }
    path.reverse();
    let rt0 = model.simulated_e2e_latency(g0);
    let mut prev = rt0;
    let mut trace = Vec::with_capacity(path.len());
    for (t, (cand, action)) in path.iter().enumerate() {
        let s = trace_step(model, t + 1, *action, cand, rt0, prev);
        prev = s.e2e_latency;
        trace.push(s);
    }
    let graph = nodes.swap_remove(best.1).graph;
    Ok(finish(model, g0, graph, best.0, trace))
}

#[derive(Debug, Clone)]
pub struct RandomSearchResult {
    pub best: EpisodeSummary,
    pub best_trace: Vec<TraceStep>,
    pub episodes: Vec<EpisodeSummary>,
}

/// Uniformly random valid actions (No-Op included) for `episodes` episodes.
pub fn random_optimise(
    g0: &CompGraph,
    rules: &[RewriteRule],
    model: &CostModel,
    config: EnvConfig,
    seed: u64,
    episodes: usize,
) -> Result<RandomSearchResult, SearchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = GraphEnv::new(rules, model.clone(), config);
    let mut summaries = Vec::with_capacity(episodes);
    let mut best: Option<(EpisodeSummary, Vec<TraceStep>)> = None;
    for _ in 0..episodes.max(1) {
        let mut obs = env.reset(g0)?;
        loop {
            let valid = obs.valid_actions();
            let a = valid[rng.random_range(0..valid.len())];
            let step = env.step(a)?;
            if step.done {
                break;
            }
            obs = step.observation;
        }
        let s = env.episode_summary()?;
        if best.as_ref().is_none_or(|(b, _)| s.final_e2e < b.final_e2e) {
            best = Some((s.clone(), env.trace().to_vec()));
        }
        summaries.push(s);
    }
    let (best, best_trace) = best.expect("at least one episode");
    Ok(RandomSearchResult {
        best,
        best_trace,
        episodes: summaries,
    })
}

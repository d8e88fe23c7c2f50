//! Episodic rewrite environment.
//!
//! Action slot 0 is No-Op; slot `i >= 1` applies candidate `i - 1`. The
//! end-to-end latency is measured every `feedback_period` steps and at the
//! end of the episode; the reward then is the latency drop since the last
//! measurement as a percentage of the initial latency. Steps in between earn
//! a small constant.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostModel, Micros};
use crate::graph::{featurise, CompGraph, GraphFeatures};
use crate::rewrite::{generate_candidates, Candidate, RewriteError, RewriteRule};

pub const NOOP: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Episode horizon `T`.
    pub horizon: usize,
    /// Measure end-to-end latency every `N` steps.
    pub feedback_period: usize,
    /// `A_max`; the action space has one more slot for No-Op.
    pub max_candidates: usize,
    /// Edge-feature normaliser `M`.
    pub edge_norm: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 100,
            feedback_period: 5,
            max_candidates: 63,
            edge_norm: 4096.0,
        }
    }
}

impl EnvConfig {
    pub fn action_space(&self) -> usize {
        self.max_candidates + 1
    }
}

/// Current graph plus every candidate, featurised; block 0 is the current graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGraph {
    pub blocks: Vec<GraphFeatures>,
    /// `mask[0]` is No-Op, `mask[i]` is block `i`.
    pub mask: Vec<bool>,
}

impl MetaGraph {
    pub fn num_candidates(&self) -> usize {
        self.blocks.len() - 1
    }

    /// Block index of every node, blocks laid out consecutively.
    pub fn segment_ids(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(b, f)| std::iter::repeat_n(b, f.num_nodes()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub meta: MetaGraph,
    /// Rule that produced each candidate, in slot order starting at slot 1.
    pub candidate_rule_ids: Vec<&'static str>,
}

impl Observation {
    pub fn mask(&self) -> &[bool] {
        &self.meta.mask
    }

    pub fn valid_actions(&self) -> Vec<usize> {
        (0..self.meta.mask.len()).filter(|&i| self.meta.mask[i]).collect()
    }
}

/// What the reward function sees after a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardContext {
    pub t: usize,
    pub rt0: Micros,
    /// `(RT_{t-1}, RT_t)` when this step took a measurement.
    pub measurement: Option<(Micros, Micros)>,
    pub noop: bool,
    pub done: bool,
}

pub trait RewardFn: Send + Sync {
    fn reward(&self, ctx: &RewardContext) -> f64;
}

/// Latency drop as a percentage of the initial latency on measurement steps,
/// `exploration` otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyReward {
    pub exploration: f64,
}

impl Default for LatencyReward {
    fn default() -> Self {
        LatencyReward { exploration: 0.1 }
    }
}

pub fn latency_drop_pct(rt0: Micros, prev: Micros, now: Micros) -> f64 {
    (prev - now) / rt0 * 100.0
}

impl RewardFn for LatencyReward {
    fn reward(&self, ctx: &RewardContext) -> f64 {
        match ctx.measurement {
            Some((prev, now)) => latency_drop_pct(ctx.rt0, prev, now),
            None => self.exploration,
        }
    }
}

impl<F: Fn(&RewardContext) -> f64 + Send + Sync> RewardFn for F {
    fn reward(&self, ctx: &RewardContext) -> f64 {
        self(ctx)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action {action} is masked out ({valid} valid actions)")]
    InvalidAction { action: usize, valid: usize },
    #[error("initial graph has zero end-to-end latency")]
    InvalidGraph,
    #[error("episode has not finished")]
    EpisodeNotDone,
    #[error("episode already finished; call reset")]
    EpisodeDone,
    #[error("environment has not been reset")]
    NotReset,
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
}

/// One line of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub action: usize,
    /// `None` for No-Op.
    pub rule_id: Option<String>,
    pub reward: f64,
    pub cost_model_latency: Micros,
    pub e2e_latency: Micros,
    pub measured: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: TraceStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub initial_e2e: Micros,
    pub final_e2e: Micros,
    pub speedup: f64,
    pub rule_counts: BTreeMap<String, usize>,
    pub steps: usize,
    pub total_reward: f64,
}

impl EpisodeSummary {
    pub fn from_trace(initial_e2e: Micros, final_e2e: Micros, trace: &[TraceStep]) -> Self {
        let mut rule_counts = BTreeMap::new();
        for s in trace {
            if let Some(r) = &s.rule_id {
                *rule_counts.entry(r.clone()).or_insert(0) += 1;
            }
        }
        EpisodeSummary {
            initial_e2e,
            final_e2e,
            speedup: if final_e2e > 0.0 { initial_e2e / final_e2e } else { 1.0 },
            rule_counts,
            steps: trace.iter().filter(|s| s.rule_id.is_some()).count(),
            total_reward: trace.iter().map(|s| s.reward).sum(),
        }
    }
}

/// Writes one JSON object per step.
pub fn write_trace<W: Write>(mut w: W, trace: &[TraceStep]) -> std::io::Result<()> {
    for s in trace {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(text: &str) -> Result<Vec<TraceStep>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

struct Episode {
    graph: CompGraph,
    candidates: Vec<Candidate>,
    t: usize,
    rt0: Micros,
    rt_prev: Micros,
    done: bool,
    trace: Vec<TraceStep>,
}

pub struct GraphEnv<'r> {
    rules: &'r [RewriteRule],
    model: CostModel,
    config: EnvConfig,
    reward_fn: Box<dyn RewardFn + 'r>,
    episode: Option<Episode>,
}

impl<'r> GraphEnv<'r> {
    pub fn new(rules: &'r [RewriteRule], model: CostModel, config: EnvConfig) -> Self {
        GraphEnv {
            rules,
            model,
            config,
            reward_fn: Box::new(LatencyReward::default()),
            episode: None,
        }
    }

    pub fn with_reward(mut self, reward_fn: impl RewardFn + 'r) -> Self {
        self.reward_fn = Box::new(reward_fn);
        self
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn model(&self) -> &CostModel {
        &self.model
    }

    pub fn reset(&mut self, g0: &CompGraph) -> Result<Observation, EnvError> {
        let rt0 = self.model.simulated_e2e_latency(g0);
        if !(rt0 > 0.0) {
            return Err(EnvError::InvalidGraph);
        }
        let candidates = generate_candidates(g0, self.rules, self.config.max_candidates)?;
        let ep = Episode {
            graph: g0.clone(),
            candidates,
            t: 0,
            rt0,
            rt_prev: rt0,
            done: false,
            trace: Vec::new(),
        };
        let obs = self.observe(&ep);
        self.episode = Some(ep);
        Ok(obs)
    }

    fn observe(&self, ep: &Episode) -> Observation {
        let norm = self.config.edge_norm;
        let mut blocks = Vec::with_capacity(ep.candidates.len() + 1);
        blocks.push(featurise(&ep.graph, norm));
        blocks.extend(ep.candidates.iter().map(|c| featurise(&c.graph, norm)));
        let mut mask = vec![false; self.config.action_space()];
        mask[..=ep.candidates.len()].iter_mut().for_each(|m| *m = true);
        Observation {
            meta: MetaGraph { blocks, mask },
            candidate_rule_ids: ep.candidates.iter().map(|c| c.rule_id).collect(),
        }
    }

    pub fn current_graph(&self) -> Option<&CompGraph> {
        self.episode.as_ref().map(|e| &e.graph)
    }

    pub fn candidates(&self) -> &[Candidate] {
        self.episode.as_ref().map_or(&[], |e| &e.candidates)
    }

    pub fn is_done(&self) -> bool {
        self.episode.as_ref().is_some_and(|e| e.done)
    }

    pub fn trace(&self) -> &[TraceStep] {
        self.episode.as_ref().map_or(&[], |e| &e.trace)
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        let mut ep = self.episode.take().ok_or(EnvError::NotReset)?;
        let res = self.advance(&mut ep, action);
        self.episode = Some(ep);
        res
    }

    fn advance(&self, ep: &mut Episode, action: usize) -> Result<StepResult, EnvError> {
        if ep.done {
            return Err(EnvError::EpisodeDone);
        }
        let n = ep.candidates.len();
        if action > n {
            return Err(EnvError::InvalidAction {
                action,
                valid: n + 1,
            });
        }
        let noop = action == NOOP;
        let mut rule_id = None;
        if !noop {
            let cand = ep.candidates.swap_remove(action - 1);
            rule_id = Some(cand.rule_id.to_string());
            ep.graph = cand.graph;
            ep.t += 1;
            ep.candidates = generate_candidates(&ep.graph, self.rules, self.config.max_candidates)?;
        }
        let done = noop || ep.t >= self.config.horizon || ep.candidates.is_empty();
        let measured = done || ep.t.is_multiple_of(self.config.feedback_period);
        let report = self.model.cost_report(&ep.graph);
        let measurement = measured.then_some((ep.rt_prev, report.e2e_total));
        let reward = self.reward_fn.reward(&RewardContext {
            t: ep.t,
            rt0: ep.rt0,
            measurement,
            noop,
            done,
        });
        if measured {
            ep.rt_prev = report.e2e_total;
        }
        ep.done = done;
        let info = TraceStep {
            t: ep.t,
            action,
            rule_id,
            reward,
            cost_model_latency: report.cost_model_total,
            e2e_latency: report.e2e_total,
            measured,
        };
        ep.trace.push(info.clone());
        Ok(StepResult {
            observation: self.observe(ep),
            reward,
            done,
            info,
        })
    }

    pub fn episode_summary(&self) -> Result<EpisodeSummary, EnvError> {
        let ep = self.episode.as_ref().ok_or(EnvError::NotReset)?;
        if !ep.done {
            return Err(EnvError::EpisodeNotDone);
        }
        Ok(EpisodeSummary::from_trace(ep.rt0, ep.rt_prev, &ep.trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::Benchmark;
    use crate::graph::{GraphBuilder, OpKind};
    use crate::rewrite::registry;

    fn env() -> GraphEnv<'static> {
        GraphEnv::new(registry(), CostModel::default(), EnvConfig::default())
    }

    fn relu_graph() -> CompGraph {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2, 3]);
        let r = b.op(OpKind::Relu, &[x]);
        b.build(&[r]).unwrap()
    }

    #[test]
    fn no_candidates_leaves_only_noop() {
        let mut e = env();
        let obs = e.reset(&relu_graph()).unwrap();
        assert_eq!(obs.valid_actions(), vec![NOOP]);
        assert_eq!(obs.mask().len(), 64);
        assert_eq!(obs.meta.blocks.len(), 1);
    }

    #[test]
    fn reset_is_deterministic() {
        let mut e = env();
        let g = Benchmark::Trap.graph();
        assert_eq!(e.reset(&g).unwrap(), e.reset(&g).unwrap());
    }

    #[test]
    fn mask_counts_candidates_plus_noop() {
        let mut e = env();
        let obs = e.reset(&Benchmark::Trap.graph()).unwrap();
        let n = e.candidates().len();
        assert!(n > 0);
        assert_eq!(obs.mask().iter().filter(|m| **m).count(), n + 1);
        assert_eq!(obs.candidate_rule_ids.len(), n);
        assert_eq!(obs.meta.segment_ids().len(), obs.meta.blocks.iter().map(|b| b.num_nodes()).sum::<usize>());
    }

    #[test]
    fn eq2_instances() {
        let r = LatencyReward::default();
        let ctx = |m| RewardContext {
            t: 5,
            rt0: 10.0,
            measurement: m,
            noop: false,
            done: false,
        };
        assert_eq!(r.reward(&ctx(Some((10.0, 9.0)))), 10.0);
        assert_eq!(r.reward(&ctx(Some((9.0, 10.0)))), -10.0);
        assert_eq!(r.reward(&ctx(None)), 0.1);
    }

    #[test]
    fn immediate_noop_episode() {
        let mut e = env();
        e.reset(&Benchmark::Trap.graph()).unwrap();
        assert_eq!(e.episode_summary(), Err(EnvError::EpisodeNotDone));
        let s = e.step(NOOP).unwrap();
        assert!(s.done);
        assert_eq!(s.reward, 0.0);
        let sum = e.episode_summary().unwrap();
        assert_eq!(sum.speedup, 1.0);
        assert!(sum.rule_counts.is_empty());
        assert_eq!(sum.steps, 0);
        assert_eq!(e.step(NOOP).unwrap_err(), EnvError::EpisodeDone);
    }

    #[test]
    fn masked_action_is_rejected() {
        let mut e = env();
        e.reset(&relu_graph()).unwrap();
        assert!(matches!(e.step(1), Err(EnvError::InvalidAction { action: 1, .. })));
    }

    #[test]
    fn custom_reward_is_used() {
        let mut e = env().with_reward(|_: &RewardContext| 7.0);
        e.reset(&Benchmark::Trap.graph()).unwrap();
        assert_eq!(e.step(1).unwrap().reward, 7.0);
    }

    #[test]
    fn trace_round_trips_through_jsonl() {
        let mut e = env();
        e.reset(&Benchmark::Trap.graph()).unwrap();
        e.step(1).unwrap();
        e.step(NOOP).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, e.trace()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_trace(&text).unwrap(), e.trace());
    }
}

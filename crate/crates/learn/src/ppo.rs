//! PPO-clip with generalised advantage estimation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use graphrl_core::env::{EnvError, EpisodeSummary, GraphEnv, MetaGraph, TraceStep};
use graphrl_core::CompGraph;

use crate::gnn::{BatchGraph, PolicyNet};
use crate::substrate::{AdamConfig, SubstrateError, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Value-loss coefficient.
    pub c1: f64,
    /// Entropy coefficient.
    pub c2: f64,
    pub clip_eps: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Episodes collected between updates.
    pub update_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_grad_norm: f64,
    pub normalise_advantages: bool,
    pub episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            c1: 0.5,
            c2: 0.01,
            clip_eps: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            update_every: 10,
            batch_size: 16,
            epochs: 4,
            max_grad_norm: 0.5,
            normalise_advantages: true,
            episodes: 1000,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PpoError {
    #[error("sequence lengths differ: {rewards} rewards, {values} values, {dones} done flags")]
    LengthMismatch {
        rewards: usize,
        values: usize,
        dones: usize,
    },
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub meta: MetaGraph,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

/// `A_t = δ_t + γλ(1 − done_t)A_{t+1}` with `δ_t = r_t + γV_{t+1}(1 − done_t) − V_t`;
/// the value after the last step is taken as 0. Returns `(A, A + V)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(PpoError::LengthMismatch {
            rewards: n,
            values: values.len(),
            dones: dones.len(),
        });
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Per-sample clipped surrogate `min(ρA, clip(ρ, 1−ε, 1+ε)A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub clip: f64,
    pub value: f64,
    pub entropy: f64,
}

pub struct LossVars {
    pub total: Var,
    pub clip: Var,
    pub value: Var,
    pub entropy: Var,
    pub ratio: Var,
    pub logits: Var,
}

/// Records `L_clip + c1·L_vf − c2·H` for a minibatch on `tape`.
pub fn ppo_loss(
    net: &PolicyNet<f64>,
    tape: &mut Tape<f64>,
    batch: &[&Transition],
    advantages: &[f64],
    targets: &[f64],
    cfg: &TrainConfig,
) -> Result<LossVars, PpoError> {
    let metas: Vec<&MetaGraph> = batch.iter().map(|t| &t.meta).collect();
    let graph = BatchGraph::new(&metas);
    let out = net.forward_batch(tape, &graph, &metas)?;
    let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
    let logp = tape.pick_cols(out.log_probs, &actions)?;
    let old = tape.constant(crate::Tensor2D::column(batch.iter().map(|t| t.log_prob).collect()));
    let diff = tape.sub(logp, old)?;
    let ratio = tape.exp(diff);
    let adv = tape.constant(crate::Tensor2D::column(advantages.to_vec()));
    let surr1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let surr2 = tape.mul(clipped, adv)?;
    let surr = tape.minimum(surr1, surr2)?;
    let surr = tape.mean(surr);
    let clip = tape.scale(surr, -1.0);

    let target = tape.constant(crate::Tensor2D::column(targets.to_vec()));
    let err = tape.sub(out.values, target)?;
    let sq = tape.square(err);
    let value = tape.mean(sq);

    let p = tape.exp(out.log_probs);
    let plogp = tape.mul(p, out.log_probs)?;
    let total_plogp = tape.sum(plogp);
    let entropy = tape.scale(total_plogp, -1.0 / batch.len() as f64);

    let v_term = tape.scale(value, cfg.c1);
    let e_term = tape.scale(entropy, -cfg.c2);
    let total = tape.add(clip, v_term)?;
    let total = tape.add(total, e_term)?;
    Ok(LossVars {
        total,
        clip,
        value,
        entropy,
        ratio,
        logits: out.logits,
    })
}

/// `π_θ(a|s) / π_old(a|s)` for every transition at the current parameters.
pub fn probability_ratios(net: &PolicyNet<f64>, batch: &[Transition], batch_size: usize) -> Result<Vec<f64>, PpoError> {
    let cfg = TrainConfig::default();
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(batch_size.max(1)) {
        let refs: Vec<&Transition> = chunk.iter().collect();
        let zeros = vec![0.0; chunk.len()];
        let mut tape = Tape::new();
        let l = ppo_loss(net, &mut tape, &refs, &zeros, &zeros, &cfg)?;
        out.extend_from_slice(tape.value(l.ratio).data());
    }
    Ok(out)
}

fn sample_action(probs: &[f64], mask: &[bool], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Masked argmax; ties go to the lowest slot.
pub fn greedy_action(probs: &[f64], mask: &[bool]) -> usize {
    let mut best = 0;
    for i in 0..probs.len() {
        if mask[i] && probs[i] > probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub episode: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub final_speedup: f64,
    pub loss_clip: Option<f64>,
    pub loss_vf: Option<f64>,
    pub entropy: Option<f64>,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub summary: EpisodeSummary,
    pub trace: Vec<TraceStep>,
}

pub struct TrainOutcome {
    pub log: Vec<TrainLogRow>,
    pub episodes: Vec<EpisodeRecord>,
    pub updates: usize,
}

pub struct Trainer {
    pub net: PolicyNet<f64>,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(net: PolicyNet<f64>, config: TrainConfig, seed: u64) -> Self {
        Trainer {
            net,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11),
        }
    }

    /// Samples one episode from the current policy.
    pub fn rollout(&mut self, env: &mut GraphEnv, g0: &CompGraph) -> Result<(Vec<Transition>, EpisodeRecord), PpoError> {
        let mut obs = env.reset(g0)?;
        let mut out = Vec::new();
        loop {
            let pv = self.net.policy_value(&obs.meta)?;
            let action = sample_action(&pv.probs, obs.mask(), &mut self.rng);
            let log_prob = pv.probs[action].ln();
            let step = env.step(action)?;
            out.push(Transition {
                meta: obs.meta,
                action,
                log_prob,
                value: pv.value,
                reward: step.reward,
                done: step.done,
            });
            if step.done {
                break;
            }
            obs = step.observation;
        }
        let record = EpisodeRecord {
            summary: env.episode_summary()?,
            trace: env.trace().to_vec(),
        };
        Ok((out, record))
    }

    /// One PPO update over the given episodes; returns mean loss parts.
    pub fn update(&mut self, episodes: &[Vec<Transition>]) -> Result<LossParts, PpoError> {
        let cfg = self.config.clone();
        let mut batch: Vec<&Transition> = Vec::new();
        let mut adv = Vec::new();
        let mut targets = Vec::new();
        for ep in episodes {
            let r: Vec<f64> = ep.iter().map(|t| t.reward).collect();
            let v: Vec<f64> = ep.iter().map(|t| t.value).collect();
            let d: Vec<bool> = ep.iter().map(|t| t.done).collect();
            let (a, tg) = compute_gae(&r, &v, &d, cfg.gamma, cfg.lambda)?;
            adv.extend(a);
            targets.extend(tg);
            batch.extend(ep.iter());
        }
        if batch.is_empty() {
            return Ok(LossParts::default());
        }
        if cfg.normalise_advantages && adv.len() > 1 {
            let n = adv.len() as f64;
            let mean = adv.iter().sum::<f64>() / n;
            let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
            adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
        }
        let adam = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut sums = LossParts::default();
        let mut count = 0.0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let mb: Vec<&Transition> = chunk.iter().map(|&i| batch[i]).collect();
                let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
                let tg: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
                let mut tape = Tape::new();
                let l = ppo_loss(&self.net, &mut tape, &mb, &a, &tg, &cfg)?;
                let grads = tape.backward(l.total)?;
                self.net.store.zero_grad();
                self.net.store.accumulate(&tape, &grads);
                self.net.store.clip_grad_norm(cfg.max_grad_norm);
                self.net.store.adam_step(&adam);
                sums.clip += tape.value(l.clip).item();
                sums.value += tape.value(l.value).item();
                sums.entropy += tape.value(l.entropy).item();
                count += 1.0;
            }
        }
        Ok(LossParts {
            clip: sums.clip / count,
            value: sums.value / count,
            entropy: sums.entropy / count,
        })
    }

    /// Alternates rollout phases of `update_every` episodes with updates.
    /// `on_episode` sees every log row as soon as it is produced, together
    /// with the parameters as they stand after any update that episode
    /// triggered.
    pub fn train(
        &mut self,
        env: &mut GraphEnv,
        g0: &CompGraph,
        mut on_episode: impl FnMut(&TrainLogRow, &EpisodeRecord, &PolicyNet<f64>),
    ) -> Result<TrainOutcome, PpoError> {
        let start = Instant::now();
        let mut log = Vec::with_capacity(self.config.episodes);
        let mut records = Vec::with_capacity(self.config.episodes);
        let mut pending: Vec<Vec<Transition>> = Vec::new();
        let mut last: Option<LossParts> = None;
        let mut updates = 0;
        for episode in 0..self.config.episodes {
            let (transitions, record) = self.rollout(env, g0)?;
            let ret = transitions.iter().map(|t| t.reward).sum();
            pending.push(transitions);
            if pending.len() == self.config.update_every.max(1) {
                last = Some(self.update(&pending)?);
                pending.clear();
                updates += 1;
            }
            let row = TrainLogRow {
                episode,
                episode_return: ret,
                final_speedup: record.summary.speedup,
                loss_clip: last.map(|l| l.clip),
                loss_vf: last.map(|l| l.value),
                entropy: last.map(|l| l.entropy),
                wallclock_s: start.elapsed().as_secs_f64(),
            };
            on_episode(&row, &record, &self.net);
            log.push(row);
            records.push(record);
        }
        Ok(TrainOutcome {
            log,
            episodes: records,
            updates,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub summary: EpisodeSummary,
    pub trace: Vec<TraceStep>,
    pub wallclock_s: f64,
}

/// Runs one episode taking the most probable valid action at every step.
pub fn evaluate(net: &PolicyNet<f64>, env: &mut GraphEnv, g0: &CompGraph) -> Result<Evaluation, PpoError> {
    let start = Instant::now();
    let mut obs = env.reset(g0)?;
    loop {
        let pv = net.policy_value(&obs.meta)?;
        let step = env.step(greedy_action(&pv.probs, obs.mask()))?;
        if step.done {
            break;
        }
        obs = step.observation;
    }
    Ok(Evaluation {
        summary: env.episode_summary()?,
        trace: env.trace().to_vec(),
        wallclock_s: start.elapsed().as_secs_f64(),
    })
}

//! Graph attention policy/value network over a meta-graph.
//!
//! Encoder: an edge-to-node update, `k` single-head attention layers over
//! in-neighbours plus a self loop, and a per-graph sum readout. Candidate
//! slot `i` is scored by an MLP on `(g_i ∥ g_0)`; No-Op is scored on
//! `(g_0 ∥ g_0)`. The value head reads `g_0`.

use serde::{Deserialize, Serialize};

use graphrl_core::env::MetaGraph;
use graphrl_core::graph::{EDGE_FEATURE_DIM, GLOBAL_FEATURE_DIM, NUM_OP_KINDS};
use graphrl_core::Real;

use crate::substrate::{ParamId, ParamStore, SubstrateError, Tape, Tensor2D, Var};

/// Logit assigned to masked-out action slots.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub gat_layers: usize,
    pub mlp_hidden: [usize; 2],
    pub leaky_slope: f64,
    /// Adds each attention layer's input back onto its output in the encoder.
    pub residual: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: 64,
            gat_layers: 5,
            mlp_hidden: [256, 64],
            leaky_slope: 0.2,
            residual: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, Copy)]
struct GatIds {
    w: ParamId,
    a_dst: ParamId,
    a_src: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
}

/// Node, edge and block layout of several meta-graphs stacked together.
#[derive(Debug, Clone)]
pub struct BatchGraph<T> {
    /// `[incoming edge-feature sum ∥ one-hot kind]` per node.
    pub node_input: Tensor2D<T>,
    /// Edge endpoints including one self loop per node.
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// Block of every node.
    pub block_of_node: Vec<usize>,
    pub global: Tensor2D<T>,
    /// First block of each meta-graph and its block count.
    pub metas: Vec<(usize, usize)>,
    pub action_space: usize,
}

impl<T: Real> BatchGraph<T> {
    pub fn new(metas: &[&MetaGraph]) -> Self {
        let in_dim = EDGE_FEATURE_DIM + NUM_OP_KINDS;
        let mut node_input = Vec::new();
        let (mut src, mut dst, mut block_of_node) = (Vec::new(), Vec::new(), Vec::new());
        let mut global = Vec::new();
        let mut layout = Vec::with_capacity(metas.len());
        let mut node_base = 0;
        let mut block = 0;
        let action_space = metas.first().map_or(0, |m| m.mask.len());
        for meta in metas {
            layout.push((block, meta.blocks.len()));
            for f in &meta.blocks {
                let n = f.num_nodes();
                let mut edge_sum = vec![[0.0; EDGE_FEATURE_DIM]; n];
                for (&(s, d), e) in f.edge_index.iter().zip(&f.edge_features) {
                    edge_sum[d].iter_mut().zip(e).for_each(|(a, b)| *a += b);
                    src.push(node_base + s);
                    dst.push(node_base + d);
                }
                for i in 0..n {
                    node_input.extend(edge_sum[i].iter().map(|&x| T::lit(x)));
                    node_input.extend(f.node_features[i].iter().map(|&x| T::lit(x)));
                    src.push(node_base + i);
                    dst.push(node_base + i);
                    block_of_node.push(block);
                }
                global.extend(f.global_feature.iter().map(|&x| T::lit(x)));
                node_base += n;
                block += 1;
            }
        }
        BatchGraph {
            node_input: Tensor2D::from_vec(node_base, in_dim, node_input).expect("layout"),
            src,
            dst,
            block_of_node,
            global: Tensor2D::from_vec(block, GLOBAL_FEATURE_DIM, global).expect("layout"),
            metas: layout,
            action_space,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.block_of_node.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.global.rows()
    }
}

/// Tape handles of a batched forward pass.
pub struct BatchForward {
    /// `[B, action_space]` log-probabilities; masked slots are ~`-1e9`.
    pub log_probs: Var,
    /// `[B, action_space]` logits with masked slots at exactly `MASKED_LOGIT`.
    pub logits: Var,
    /// `[B, 1]`.
    pub values: Var,
}

#[derive(Debug, Clone)]
pub struct PolicyNet<T> {
    pub config: PolicyConfig,
    pub store: ParamStore<T>,
    node_w: ParamId,
    gat: Vec<GatIds>,
    readout: ParamId,
    policy: Mlp,
    value: Mlp,
}

fn mlp<T: Real>(store: &mut ParamStore<T>, name: &str, dims: &[usize]) -> Mlp {
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, d)| Linear {
            w: store.add_xavier(&format!("{name}.{i}.w"), d[0], d[1]),
            b: store.add_zeros(&format!("{name}.{i}.b"), 1, d[1]),
        })
        .collect();
    Mlp { layers }
}

impl<T: Real> PolicyNet<T> {
    pub fn new(config: PolicyConfig, seed: u64) -> Self {
        let mut store = ParamStore::new(seed);
        Self::build(config, &mut store).finish(store)
    }

    /// Rebuilds the network around stored parameters; names and shapes must match.
    pub fn from_store(config: PolicyConfig, loaded: &ParamStore<T>) -> Result<Self, SubstrateError> {
        let mut net = Self::new(config, loaded.seed());
        net.store.load_values(loaded)?;
        Ok(net)
    }

    fn build(config: PolicyConfig, store: &mut ParamStore<T>) -> Layout {
        let d = config.hidden;
        let node_w = store.add_xavier("node.w", EDGE_FEATURE_DIM + NUM_OP_KINDS, d);
        let gat = (0..config.gat_layers)
            .map(|l| GatIds {
                w: store.add_xavier(&format!("gat{l}.w"), d, d),
                a_dst: store.add_xavier(&format!("gat{l}.a_dst"), d, 1),
                a_src: store.add_xavier(&format!("gat{l}.a_src"), d, 1),
            })
            .collect();
        let readout = store.add_xavier("readout.w", d + GLOBAL_FEATURE_DIM, d);
        let [h1, h2] = config.mlp_hidden;
        let policy = mlp(store, "policy", &[2 * d, h1, h2, 1]);
        let value = mlp(store, "value", &[d, h1, h2, 1]);
        Layout {
            config,
            node_w,
            gat,
            readout,
            policy,
            value,
        }
    }

    /// `relu(W · (Σ incoming edge features ∥ one-hot))` per node.
    pub fn node_update_layer(&self, tape: &mut Tape<T>, batch: &BatchGraph<T>) -> Result<Var, SubstrateError> {
        let x = tape.constant(batch.node_input.clone());
        let w = tape.param(&self.store, self.node_w);
        let h = tape.matmul(x, w)?;
        Ok(tape.relu(h))
    }

    /// One attention layer; returns the new node states and the per-edge
    /// attention coefficients (aligned with `batch.src`/`batch.dst`).
    pub fn gat_layer(
        &self,
        tape: &mut Tape<T>,
        batch: &BatchGraph<T>,
        layer: usize,
        h: Var,
    ) -> Result<(Var, Var), SubstrateError> {
        let ids = self.gat[layer];
        let w = tape.param(&self.store, ids.w);
        let a_dst = tape.param(&self.store, ids.a_dst);
        let a_src = tape.param(&self.store, ids.a_src);
        let wh = tape.matmul(h, w)?;
        let s_dst = tape.matmul(wh, a_dst)?;
        let s_src = tape.matmul(wh, a_src)?;
        let e_dst = tape.gather_rows(s_dst, &batch.dst)?;
        let e_src = tape.gather_rows(s_src, &batch.src)?;
        let e = tape.add(e_dst, e_src)?;
        let e = tape.leaky_relu(e, T::lit(self.config.leaky_slope));
        let alpha = tape.segment_softmax(e, &batch.dst, batch.num_nodes())?;
        let msg = tape.gather_rows(wh, &batch.src)?;
        let msg = tape.mul_col(msg, alpha)?;
        let agg = tape.segment_sum(msg, &batch.dst, batch.num_nodes())?;
        Ok((tape.relu(agg), alpha))
    }

    /// `relu(U · (Σ_block h ∥ g_b))`, one row per block.
    pub fn global_readout(&self, tape: &mut Tape<T>, batch: &BatchGraph<T>, h: Var) -> Result<Var, SubstrateError> {
        let pooled = tape.segment_sum(h, &batch.block_of_node, batch.num_blocks())?;
        let g = tape.constant(batch.global.clone());
        let x = tape.concat_cols(pooled, g)?;
        let u = tape.param(&self.store, self.readout);
        let y = tape.matmul(x, u)?;
        Ok(tape.relu(y))
    }

    pub fn encode(&self, tape: &mut Tape<T>, batch: &BatchGraph<T>) -> Result<Var, SubstrateError> {
        let mut h = self.node_update_layer(tape, batch)?;
        for l in 0..self.gat.len() {
            let next = self.gat_layer(tape, batch, l, h)?.0;
            h = if self.config.residual { tape.add(next, h)? } else { next };
        }
        self.global_readout(tape, batch, h)
    }

    fn run_mlp(&self, tape: &mut Tape<T>, m: &Mlp, mut x: Var) -> Result<Var, SubstrateError> {
        let last = m.layers.len() - 1;
        for (i, l) in m.layers.iter().enumerate() {
            let w = tape.param(&self.store, l.w);
            let b = tape.param(&self.store, l.b);
            x = tape.matmul(x, w)?;
            x = tape.add_row(x, b)?;
            if i != last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    pub fn forward(&self, tape: &mut Tape<T>, metas: &[&MetaGraph]) -> Result<BatchForward, SubstrateError> {
        let batch = BatchGraph::new(metas);
        self.forward_batch(tape, &batch, metas)
    }

    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        batch: &BatchGraph<T>,
        metas: &[&MetaGraph],
    ) -> Result<BatchForward, SubstrateError> {
        let emb = self.encode(tape, batch)?;
        let (mut left, mut right, mut positions, mut current) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (b, (&(first, count), meta)) in batch.metas.iter().zip(metas).enumerate() {
            current.push(first);
            for slot in 0..count {
                if !meta.mask[slot] {
                    continue;
                }
                left.push(first + slot);
                right.push(first);
                positions.push((b, slot));
            }
        }
        let l = tape.gather_rows(emb, &left)?;
        let r = tape.gather_rows(emb, &right)?;
        let pair = tape.concat_cols(l, r)?;
        let scores = self.run_mlp(tape, &self.policy, pair)?;
        let logits = tape.scatter(scores, &positions, metas.len(), batch.action_space, T::lit(MASKED_LOGIT))?;
        let log_probs = tape.log_softmax_rows(logits);
        let g0 = tape.gather_rows(emb, &current)?;
        let values = self.run_mlp(tape, &self.value, g0)?;
        Ok(BatchForward {
            log_probs,
            logits,
            values,
        })
    }

    pub fn policy_value(&self, meta: &MetaGraph) -> Result<PolicyOutput, SubstrateError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &[meta])?;
        let f = |v: Var| -> Vec<f64> { tape.value(v).data().iter().map(|x| x.to_f64_lossy()).collect() };
        Ok(PolicyOutput {
            logits: f(out.logits),
            probs: f(out.log_probs).into_iter().map(f64::exp).collect(),
            value: tape.value(out.values).item().to_f64_lossy(),
        })
    }
}

struct Layout {
    config: PolicyConfig,
    node_w: ParamId,
    gat: Vec<GatIds>,
    readout: ParamId,
    policy: Mlp,
    value: Mlp,
}

impl Layout {
    fn finish<T>(self, store: ParamStore<T>) -> PolicyNet<T> {
        PolicyNet {
            config: self.config,
            store,
            node_w: self.node_w,
            gat: self.gat,
            readout: self.readout,
            policy: self.policy,
            value: self.value,
        }
    }
}

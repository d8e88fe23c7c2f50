//! Analytic latency oracle.
//!
//! Two measures are derived from the same per-operator costs:
//!
//! * the *cost-model* latency, the plain sum over all operators;
//! * the *simulated end-to-end* latency, which skips operators whose value
//!   depends only on weights, since those are computed once ahead of
//!   inference.
//!
//! Per-operator cost is `launch_overhead + coefficient * work`.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::{canonical_hash, CompGraph, Node, NodeId, OpKind, TensorShape};

/// Microseconds.
pub type Micros = f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    pub launch_overhead: Micros,
    pub c_matmul: Micros,
    pub c_conv: Micros,
    pub c_elementwise: Micros,
    pub c_pool: Micros,
    pub fold_enabled: bool,
    /// Standard deviation of the multiplicative end-to-end noise; 0 disables it.
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            launch_overhead: 5.0,
            c_matmul: 1e-3,
            c_conv: 1e-3,
            c_elementwise: 1e-4,
            c_pool: 2e-4,
            fold_enabled: true,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_node: BTreeMap<NodeId, Micros>,
    pub cost_model_total: Micros,
    pub e2e_total: Micros,
    pub folded: BTreeSet<NodeId>,
}

impl CostReport {
    /// `(cost_model - e2e) / e2e * 100`.
    pub fn discrepancy_pct(&self) -> f64 {
        (self.cost_model_total - self.e2e_total) / self.e2e_total * 100.0
    }
}

/// Which latency a searcher optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostFn {
    CostModel,
    EndToEnd,
}

impl CostFn {
    pub fn name(self) -> &'static str {
        match self {
            CostFn::CostModel => "cost_model",
            CostFn::EndToEnd => "e2e",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostModel {
    pub params: CostParams,
}

fn work(node: &Node, inputs: &[&TensorShape], output: &TensorShape) -> (f64, f64) {
    let out = output.numel() as f64;
    match node.kind {
        OpKind::MatMul | OpKind::FusedMatMulAdd => {
            let (m, k) = (inputs[0].dim(0), inputs[0].dim(1));
            let n = inputs[1].dim(1);
            let bias = if node.kind == OpKind::FusedMatMulAdd { out } else { 0.0 };
            ((m * k * n) as f64, bias)
        }
        OpKind::Conv2d | OpKind::FusedConvRelu => {
            let w = inputs[1].dims();
            let macs = out * (w[1] * w[2] * w[3]) as f64;
            let act = if node.kind == OpKind::FusedConvRelu { out } else { 0.0 };
            (macs, act)
        }
        _ => (0.0, out),
    }
}

impl CostModel {
    pub fn new(params: CostParams) -> Self {
        CostModel { params }
    }

    /// Cost of one operator given its operand and result shapes.
    pub fn op_cost(&self, node: &Node, inputs: &[&TensorShape], output: &TensorShape) -> Micros {
        let p = &self.params;
        match node.kind {
            OpKind::Input | OpKind::Weight | OpKind::Identity | OpKind::Split => 0.0,
            OpKind::MaxPool => p.launch_overhead + p.c_pool * output.numel() as f64,
            OpKind::MatMul | OpKind::FusedMatMulAdd => {
                let (macs, elems) = work(node, inputs, output);
                p.launch_overhead + p.c_matmul * macs + p.c_elementwise * elems
            }
            OpKind::Conv2d | OpKind::FusedConvRelu => {
                let (macs, elems) = work(node, inputs, output);
                p.launch_overhead + p.c_conv * macs + p.c_elementwise * elems
            }
            OpKind::Relu
            | OpKind::Add
            | OpKind::Mul
            | OpKind::Concat
            | OpKind::Transpose
            | OpKind::Reshape
            | OpKind::BatchNorm
            | OpKind::Enlarge => p.launch_overhead + p.c_elementwise * output.numel() as f64,
        }
    }

    pub fn node_cost(&self, g: &CompGraph, id: NodeId) -> Micros {
        let node = g.node(id).expect("node in graph");
        self.op_cost(node, &g.input_shapes(id), g.shape(id))
    }

    pub fn cost_model_latency(&self, g: &CompGraph) -> Micros {
        g.nodes().map(|n| self.node_cost(g, n.id)).sum()
    }

    pub fn simulated_e2e_latency(&self, g: &CompGraph) -> Micros {
        self.cost_report(g).e2e_total
    }

    pub fn latency(&self, g: &CompGraph, f: CostFn) -> Micros {
        match f {
            CostFn::CostModel => self.cost_model_latency(g),
            CostFn::EndToEnd => self.simulated_e2e_latency(g),
        }
    }

    pub fn cost_report(&self, g: &CompGraph) -> CostReport {
        let per_node: BTreeMap<NodeId, Micros> =
            g.nodes().map(|n| (n.id, self.node_cost(g, n.id))).collect();
        let folded = if self.params.fold_enabled {
            g.constant_nodes()
        } else {
            BTreeSet::new()
        };
        let cost_model_total: Micros = per_node.values().sum();
        let mut e2e_total: Micros = per_node
            .iter()
            .filter(|(id, _)| !folded.contains(id))
            .map(|(_, c)| c)
            .sum();
        if self.params.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.params.noise_seed ^ canonical_hash(g));
            let z: f64 = StandardNormal.sample(&mut rng);
            e2e_total *= (1.0 + self.params.noise_sigma * z).max(0.0);
        }
        CostReport {
            per_node,
            cost_model_total,
            e2e_total,
            folded,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{attrs, int, GraphBuilder};

    fn model() -> CostModel {
        CostModel::default()
    }

    #[test]
    fn matmul_formula() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2, 3]);
        let w = b.weight(&[3, 4]);
        let m = b.op(OpKind::MatMul, &[x, w]);
        let g = b.build(&[m]).unwrap();
        let c = model().node_cost(&g, m);
        assert!((c - 5.024).abs() < 1e-12, "{c}");
        assert_eq!(model().node_cost(&g, x), 0.0);
        assert_eq!(model().node_cost(&g, w), 0.0);
    }

    #[test]
    fn identity_is_free() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2, 3]);
        let i = b.op(OpKind::Identity, &[x]);
        let g = b.build(&[i]).unwrap();
        assert_eq!(model().node_cost(&g, i), 0.0);
    }

    #[test]
    fn fused_conv_relu_is_cheaper_than_parts() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[1, 3, 8, 8]);
        let w = b.weight(&[4, 3, 3, 3]);
        let pad = || attrs([("pad", int(1))]);
        let c = b.add(OpKind::Conv2d, &[x, w], pad());
        let r = b.op(OpKind::Relu, &[c]);
        let f = b.add(OpKind::FusedConvRelu, &[x, w], pad());
        let g = b.build(&[r, f]).unwrap();
        let m = model();
        let parts = m.node_cost(&g, c) + m.node_cost(&g, r);
        let fused = m.node_cost(&g, f);
        assert!(fused < parts);
        assert!((parts - fused - m.params.launch_overhead).abs() < 1e-9);
    }

    #[test]
    fn inputs_only_graph_costs_nothing() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2, 3]);
        let g = b.build(&[x]).unwrap();
        assert_eq!(model().cost_model_latency(&g), 0.0);
        assert_eq!(model().simulated_e2e_latency(&g), 0.0);
    }

    #[test]
    fn two_node_sum() {
        let params = CostParams {
            c_elementwise: 2.0,
            ..CostParams::default()
        };
        let m = CostModel::new(params);
        let mut b = GraphBuilder::new();
        let x = b.input(&[1]);
        let i = b.op(OpKind::Identity, &[x]);
        let r = b.op(OpKind::Relu, &[i]);
        let g = b.build(&[r]).unwrap();
        assert_eq!(m.node_cost(&g, r), 7.0);
        assert_eq!(m.cost_model_latency(&g), 7.0);
    }

    #[test]
    fn weight_only_add_is_folded() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2, 3]);
        let w1 = b.weight(&[3, 4]);
        let w2 = b.weight(&[3, 4]);
        let s = b.op(OpKind::Add, &[w1, w2]);
        let mm = b.op(OpKind::MatMul, &[x, s]);
        let g = b.build(&[mm]).unwrap();
        let m = model();
        let r = m.cost_report(&g);
        assert_eq!(r.folded, BTreeSet::from([s]));
        assert_eq!(r.cost_model_total, r.per_node.values().sum::<f64>());
        assert!((r.cost_model_total - r.e2e_total - m.node_cost(&g, s)).abs() < 1e-12);
        assert!(r.e2e_total <= r.cost_model_total);

        let off = CostModel::new(CostParams {
            fold_enabled: false,
            ..CostParams::default()
        });
        let r = off.cost_report(&g);
        assert!(r.folded.is_empty());
        assert_eq!(r.e2e_total, r.cost_model_total);
    }

    #[test]
    fn no_constant_subgraph_means_equal_totals() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2, 3]);
        let w = b.weight(&[3, 4]);
        let mm = b.op(OpKind::MatMul, &[x, w]);
        let r = b.op(OpKind::Relu, &[mm]);
        let g = b.build(&[r]).unwrap();
        let rep = model().cost_report(&g);
        assert_eq!(rep.e2e_total, rep.cost_model_total);
        assert_eq!(rep.discrepancy_pct(), 0.0);
    }

    #[test]
    fn live_dependency_unfolds_node() {
        let mut b = GraphBuilder::new();
        let w1 = b.weight(&[3, 4]);
        let w2 = b.weight(&[3, 4]);
        let s = b.op(OpKind::Add, &[w1, w2]);
        let g_folded = b.clone().build(&[s]).unwrap();
        let x = b.input(&[3, 4]);
        let s2 = b.op(OpKind::Add, &[s, x]);
        let g_live = b.build(&[s2]).unwrap();
        let m = model();
        assert_eq!(m.simulated_e2e_latency(&g_folded), 0.0);
        assert!(m.simulated_e2e_latency(&g_live) > m.simulated_e2e_latency(&g_folded));
    }

    #[test]
    fn noise_is_seeded() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2, 3]);
        let r = b.op(OpKind::Relu, &[x]);
        let g = b.build(&[r]).unwrap();
        let noisy = |seed| {
            CostModel::new(CostParams {
                noise_sigma: 0.1,
                noise_seed: seed,
                ..CostParams::default()
            })
            .simulated_e2e_latency(&g)
        };
        assert_eq!(noisy(1), noisy(1));
        assert_ne!(noisy(1), noisy(2));
        assert_ne!(noisy(1), model().simulated_e2e_latency(&g));
    }
}

//! Benchmark graph generators.
//!
//! Every generator takes a shape scale applied to one axis (rows for the
//! matmul graphs, spatial extent for the conv graphs) so the same topology can
//! be regenerated at other tensor shapes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{attrs, int, ints, CompGraph, GraphBuilder, NodeId, OpKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Trap,
    MiniAttention,
    MiniInception,
    MiniSqueeze,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("unknown benchmark {0:?}; expected one of trap, mini_attention, mini_inception, mini_squeeze")]
    UnknownBenchmark(String),
    #[error("shape scale must be finite and positive, got {0}")]
    InvalidScale(f64),
    #[error("benchmark shape is degenerate at this scale: {0}")]
    Shape(String),
}

impl Benchmark {
    pub const ALL: [Benchmark; 4] = [
        Benchmark::Trap,
        Benchmark::MiniAttention,
        Benchmark::MiniInception,
        Benchmark::MiniSqueeze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Trap => "trap",
            Benchmark::MiniAttention => "mini_attention",
            Benchmark::MiniInception => "mini_inception",
            Benchmark::MiniSqueeze => "mini_squeeze",
        }
    }

    pub fn graph(self) -> CompGraph {
        self.scaled(1.0).expect("unit scale is valid")
    }

    pub fn scaled(self, scale: f64) -> Result<CompGraph, BenchError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(BenchError::InvalidScale(scale));
        }
        let s = |base: usize| ((base as f64 * scale).round() as usize).max(1);
        let g = match self {
            Benchmark::Trap => trap(s(256)),
            Benchmark::MiniAttention => mini_attention(s(16)),
            Benchmark::MiniInception => mini_inception(s(8)),
            Benchmark::MiniSqueeze => mini_squeeze(s(8)),
        };
        g.map_err(|e| BenchError::Shape(e.to_string()))
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Benchmark {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| BenchError::UnknownBenchmark(s.to_string()))
    }
}

/// `Z·W1 + (Z·B)·C` with a thin inner dimension on `B`, `C`.
///
/// The cheap form is `Z·(W1 + B·C)`, where the bracket is weight-only and
/// folds away. Getting there needs the reassociation `(Z·B)·C -> Z·(B·C)`
/// first, which makes both latency measures worse because `Z·(B·C)` is a
/// full-width product.
fn trap(rows: usize) -> Result<CompGraph, crate::GraphError> {
    let (k, n, p) = (1024, 1024, 384);
    let mut b = GraphBuilder::new();
    let z = b.input(&[rows, k]);
    let w1 = b.weight(&[k, n]);
    let wb = b.weight(&[k, p]);
    let wc = b.weight(&[p, n]);
    let direct = b.op(OpKind::MatMul, &[z, w1]);
    let thin = b.op(OpKind::MatMul, &[z, wb]);
    let lowrank = b.op(OpKind::MatMul, &[thin, wc]);
    let out = b.op(OpKind::Add, &[direct, lowrank]);
    b.build(&[out])
}

/// One attention head: projections, scores against transposed keys, value
/// mixing, output projection and residual.
fn mini_attention(seq: usize) -> Result<CompGraph, crate::GraphError> {
    let d = 32;
    let mut b = GraphBuilder::new();
    let x = b.input(&[seq, d]);
    let wq = b.weight(&[d, d]);
    let wk = b.weight(&[d, d]);
    let wv = b.weight(&[d, d]);
    let wo = b.weight(&[d, d]);
    let q = b.op(OpKind::MatMul, &[x, wq]);
    let k = b.op(OpKind::MatMul, &[x, wk]);
    let v = b.op(OpKind::MatMul, &[x, wv]);
    let kt = b.add(OpKind::Transpose, &[k], attrs([("perm", ints(&[1, 0]))]));
    let scores = b.op(OpKind::MatMul, &[q, kt]);
    let act = b.op(OpKind::Relu, &[scores]);
    let mixed = b.op(OpKind::MatMul, &[act, v]);
    let proj = b.op(OpKind::MatMul, &[mixed, wo]);
    let out = b.op(OpKind::Add, &[proj, x]);
    b.build(&[out])
}

fn conv(b: &mut GraphBuilder, x: NodeId, w: NodeId, pad: i64) -> NodeId {
    b.add(OpKind::Conv2d, &[x, w], attrs([("pad", int(pad))]))
}

/// Stem conv with batch norm feeding two 1x1 branches and a 3x3 branch,
/// concatenated on channels.
fn mini_inception(hw: usize) -> Result<CompGraph, crate::GraphError> {
    let (cin, c) = (4, 8);
    let mut b = GraphBuilder::new();
    let x = b.input(&[1, cin, hw, hw]);
    let w_stem = b.weight(&[c, cin, 1, 1]);
    let scale = b.weight(&[c]);
    let shift = b.weight(&[c]);
    let stem = conv(&mut b, x, w_stem, 0);
    let bn = b.op(OpKind::BatchNorm, &[stem, scale, shift]);
    let h = b.op(OpKind::Relu, &[bn]);

    let w1 = b.weight(&[c, c, 1, 1]);
    let w2 = b.weight(&[c, c, 1, 1]);
    let w3 = b.weight(&[c, c, 3, 3]);
    let b1 = conv(&mut b, h, w1, 0);
    let b2 = conv(&mut b, h, w2, 0);
    let b3 = conv(&mut b, h, w3, 1);
    let r1 = b.op(OpKind::Relu, &[b1]);
    let r2 = b.op(OpKind::Relu, &[b2]);
    let r3 = b.op(OpKind::Relu, &[b3]);
    let axis1 = || attrs([("axis", int(1))]);
    let cat = b.add(OpKind::Concat, &[r1, r2], axis1());
    let cat = b.add(OpKind::Concat, &[cat, r3], axis1());
    b.build(&[cat])
}

/// Squeeze 1x1 conv, two expand 1x1 convs concatenated, then max pooling.
fn mini_squeeze(hw: usize) -> Result<CompGraph, crate::GraphError> {
    let (cin, sq, ex) = (16, 4, 8);
    let mut b = GraphBuilder::new();
    let x = b.input(&[1, cin, hw, hw]);
    let w_sq = b.weight(&[sq, cin, 1, 1]);
    let s = conv(&mut b, x, w_sq, 0);
    let s = b.op(OpKind::Relu, &[s]);
    let w_e1 = b.weight(&[ex, sq, 1, 1]);
    let w_e2 = b.weight(&[ex, sq, 1, 1]);
    let e1 = conv(&mut b, s, w_e1, 0);
    let e2 = conv(&mut b, s, w_e2, 0);
    let e1 = b.op(OpKind::Relu, &[e1]);
    let e2 = b.op(OpKind::Relu, &[e2]);
    let cat = b.add(OpKind::Concat, &[e1, e2], attrs([("axis", int(1))]));
    let pool = b.add(
        OpKind::MaxPool,
        &[cat],
        attrs([("kernel", int(2)), ("stride", int(2))]),
    );
    b.build(&[pool])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::save;

    #[test]
    fn names_round_trip() {
        for b in Benchmark::ALL {
            assert_eq!(b.name().parse::<Benchmark>().unwrap(), b);
        }
        assert!(matches!(
            "resnet".parse::<Benchmark>(),
            Err(BenchError::UnknownBenchmark(_))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        for b in Benchmark::ALL {
            assert_eq!(save(&b.graph()), save(&b.graph()));
        }
    }

    #[test]
    fn scale_changes_the_scaled_axis_only() {
        let g = Benchmark::Trap.scaled(2.0).unwrap();
        let base = Benchmark::Trap.graph();
        assert_eq!(g.node_count(), base.node_count());
        let out = g.outputs()[0];
        assert_eq!(g.shape(out).dims(), &[512, 1024]);
        assert!(Benchmark::Trap.scaled(0.0).is_err());
        assert!(Benchmark::MiniSqueeze.scaled(f64::NAN).is_err());
    }
}

//! Built-in rule registry. Order here is the candidate order and the
//! heatmap row order; rule ids are stable.

use std::sync::OnceLock;

use super::{no_attrs, PatternBuilder, RewriteRule, TargetBuilder, TargetRef};
use crate::graph::{attrs, int, ints, Attrs, OpKind};

pub fn registry() -> &'static [RewriteRule] {
    static RULES: OnceLock<Vec<RewriteRule>> = OnceLock::new();
    RULES.get_or_init(build_registry)
}

/// Fresh owned copy of the registry, for callers that want a subset.
pub fn build_registry() -> Vec<RewriteRule> {
    vec![
        transpose_elim(),
        matmul_assoc_lr(),
        matmul_assoc_rl(),
        fuse_conv_relu(),
        fuse_matmul_add(),
        merge_matmul(),
        split_matmul(),
        factor_matmul_add(),
        fold_batchnorm(),
        merge_conv(),
        distribute_mul(),
        identity_elim(),
    ]
}

use TargetRef::Var;

fn transpose_elim() -> RewriteRule {
    let mut p = PatternBuilder::default();
    let x = p.var();
    let t1 = p.op(OpKind::Transpose, &[x]);
    let t2 = p.op(OpKind::Transpose, &[t1]);
    let t = TargetBuilder::default();
    RewriteRule {
        rule_id: "transpose_elim",
        description: "transpose(transpose(x)) -> x when the permutations cancel",
        source: p.build(&[t2]),
        target: t.build(&[Var(x)]),
        guard: Box::new(move |b| {
            let p1 = b.node(t1).attr_ints("perm").unwrap_or_default();
            let p2 = b.node(t2).attr_ints("perm").unwrap_or_default();
            p1.len() == p2.len()
                && p2
                    .iter()
                    .enumerate()
                    .all(|(i, &j)| p1.get(j as usize).copied() == Some(i as i64))
        }),
    }
}

fn matmul_assoc_lr() -> RewriteRule {
    let mut p = PatternBuilder::default();
    let (a, b, c) = (p.var(), p.var(), p.var());
    let ab = p.op(OpKind::MatMul, &[a, b]);
    let out = p.op(OpKind::MatMul, &[ab, c]);
    let mut t = TargetBuilder::default();
    let bc = t.op(OpKind::MatMul, &[Var(b), Var(c)], no_attrs);
    let res = t.op(OpKind::MatMul, &[Var(a), bc], no_attrs);
    RewriteRule {
        rule_id: "matmul_assoc_lr",
        description: "(a*b)*c -> a*(b*c)",
        source: p.build(&[out]),
        target: t.build(&[res]),
        guard: Box::new(|_| true),
    }
}

fn matmul_assoc_rl() -> RewriteRule {
    let mut p = PatternBuilder::default();
    let (a, b, c) = (p.var(), p.var(), p.var());
    let bc = p.op(OpKind::MatMul, &[b, c]);
    let out = p.op(OpKind::MatMul, &[a, bc]);
    let mut t = TargetBuilder::default();
    let ab = t.op(OpKind::MatMul, &[Var(a), Var(b)], no_attrs);
    let res = t.op(OpKind::MatMul, &[ab, Var(c)], no_attrs);
    RewriteRule {
        rule_id: "matmul_assoc_rl",
        description: "a*(b*c) -> (a*b)*c",
        source: p.build(&[out]),
        target: t.build(&[res]),
        guard: Box::new(|_| true),
    }
}

fn fuse_conv_relu() -> RewriteRule {
    let mut p = PatternBuilder::default();
    let (x, w) = (p.var(), p.var());
    let conv = p.op(OpKind::Conv2d, &[x, w]);
    let relu = p.op(OpKind::Relu, &[conv]);
    let mut t = TargetBuilder::default();
    let fused = t.op(OpKind::FusedConvRelu, &[Var(x), Var(w)], move |b| b.attrs(conv));
    RewriteRule {
        rule_id: "fuse_conv_relu",
        description: "relu(conv(x, w)) -> fused_conv_relu(x, w)",
        source: p.build(&[relu]),
        target: t.build(&[fused]),
        guard: Box::new(|_| true),
    }
}

fn fuse_matmul_add() -> RewriteRule {
    let mut p = PatternBuilder::default();
    let (x, w, bias) = (p.var(), p.var(), p.var());
    let mm = p.op(OpKind::MatMul, &[x, w]);
    let add = p.op(OpKind::Add, &[mm, bias]);
    let mut t = TargetBuilder::default();
    let fused = t.op(OpKind::FusedMatMulAdd, &[Var(x), Var(w), Var(bias)], no_attrs);
    RewriteRule {
        rule_id: "fuse_matmul_add",
        description: "x*w + b -> fused_matmul_add(x, w, b)",
        source: p.build(&[add]),
        target: t.build(&[fused]),
        guard: Box::new(move |b| b.dims(add) == b.dims(mm)),
    }
}

fn split_attrs(sizes: [usize; 2], index: i64) -> Attrs {
    attrs([("axis", int(1)), ("sizes", ints(&sizes)), ("index", int(index))])
}

fn merge_matmul() -> RewriteRule {
    let mut p = PatternBuilder::default();
    let (x, w1, w2) = (p.var(), p.var(), p.var());
    let m1 = p.op(OpKind::MatMul, &[x, w1]);
    let m2 = p.op(OpKind::MatMul, &[x, w2]);
    let mut t = TargetBuilder::default();
    let cat = t.op(OpKind::Concat, &[Var(w1), Var(w2)], |_| attrs([("axis", int(1))]));
    let mm = t.op(OpKind::MatMul, &[Var(x), cat], no_attrs);
    let sizes = move |b: &super::Binding| [b.dims(w1)[1], b.dims(w2)[1]];
    let s0 = t.op(OpKind::Split, &[mm], move |b| split_attrs(sizes(b), 0));
    let s1 = t.op(OpKind::Split, &[mm], move |b| split_attrs(sizes(b), 1));
    RewriteRule {
        rule_id: "merge_matmul",
        description: "x*w1, x*w2 -> split(x*concat(w1, w2))",
        source: p.build(&[m1, m2]),
        target: t.build(&[s0, s1]),
        guard: Box::new(|_| true),
    }
}

fn split_matmul() -> RewriteRule {
    let mut p = PatternBuilder::default();
    let (x, w1, w2) = (p.var(), p.var(), p.var());
    let cat = p.op(OpKind::Concat, &[w1, w2]);
    let mm = p.op(OpKind::MatMul, &[x, cat]);
    let s0 = p.op(OpKind::Split, &[mm]);
    let s1 = p.op(OpKind::Split, &[mm]);
    let mut t = TargetBuilder::default();
    let m1 = t.op(OpKind::MatMul, &[Var(x), Var(w1)], no_attrs);
    let m2 = t.op(OpKind::MatMul, &[Var(x), Var(w2)], no_attrs);
    RewriteRule {
        rule_id: "split_matmul",
        description: "split(x*concat(w1, w2)) -> x*w1, x*w2",
        source: p.build(&[s0, s1]),
        target: t.build(&[m1, m2]),
        guard: Box::new(move |b| {
            let sizes = vec![b.dims(w1)[1] as i64, b.dims(w2)[1] as i64];
            let split_ok = |s: usize, index: i64| {
                let n = b.node(s);
                n.attr_int("axis") == Some(1)
                    && n.attr_ints("sizes").as_ref() == Some(&sizes)
                    && n.attr_int("index") == Some(index)
            };
            b.node(cat).attr_int("axis") == Some(1) && split_ok(s0, 0) && split_ok(s1, 1)
        }),
    }
}

fn factor_matmul_add() -> RewriteRule {
    let mut p = PatternBuilder::default();
    let (x, w1, w2) = (p.var(), p.var(), p.var());
    let m1 = p.op(OpKind::MatMul, &[x, w1]);
    let m2 = p.op(OpKind::MatMul, &[x, w2]);
    let add = p.op(OpKind::Add, &[m1, m2]);
    let mut t = TargetBuilder::default();
    let wsum = t.op(OpKind::Add, &[Var(w1), Var(w2)], no_attrs);
    let mm = t.op(OpKind::MatMul, &[Var(x), wsum], no_attrs);
    RewriteRule {
        rule_id: "factor_matmul_add",
        description: "x*w1 + x*w2 -> x*(w1 + w2) for constant w1, w2",
        source: p.build(&[add]),
        target: t.build(&[mm]),
        guard: Box::new(move |b| {
            b.is_constant(w1) && b.is_constant(w2) && b.dims(w1) == b.dims(w2)
        }),
    }
}

fn fold_batchnorm() -> RewriteRule {
    let mut p = PatternBuilder::default();
    let (x, w, scale, shift) = (p.var(), p.var(), p.var(), p.var());
    let conv = p.op(OpKind::Conv2d, &[x, w]);
    let bn = p.op(OpKind::BatchNorm, &[conv, scale, shift]);
    let mut t = TargetBuilder::default();
    let channels = move |b: &super::Binding| b.dims(w)[0];
    let rs = t.op(OpKind::Reshape, &[Var(scale)], move |b| {
        attrs([("shape", ints(&[channels(b), 1, 1, 1]))])
    });
    let scaled_w = t.op(OpKind::Mul, &[Var(w), rs], no_attrs);
    let new_conv = t.op(OpKind::Conv2d, &[Var(x), scaled_w], move |b| b.attrs(conv));
    let rb = t.op(OpKind::Reshape, &[Var(shift)], move |b| {
        attrs([("shape", ints(&[1, channels(b), 1, 1]))])
    });
    let out = t.op(OpKind::Add, &[new_conv, rb], no_attrs);
    RewriteRule {
        rule_id: "fold_batchnorm",
        description: "batchnorm(conv(x, w)) -> conv(x, w*scale) + shift",
        source: p.build(&[bn]),
        target: t.build(&[out]),
        guard: Box::new(move |b| b.is_constant(w) && b.is_constant(scale) && b.is_constant(shift)),
    }
}

fn merge_conv() -> RewriteRule {
    let mut p = PatternBuilder::default();
    let (x, w1, w2) = (p.var(), p.var(), p.var());
    let c1 = p.op(OpKind::Conv2d, &[x, w1]);
    let c2 = p.op(OpKind::Conv2d, &[x, w2]);
    let mut t = TargetBuilder::default();
    let cat = t.op(OpKind::Concat, &[Var(w1), Var(w2)], |_| attrs([("axis", int(0))]));
    let conv = t.op(OpKind::Conv2d, &[Var(x), cat], move |b| b.attrs(c1));
    let sizes = move |b: &super::Binding| [b.dims(w1)[0], b.dims(w2)[0]];
    let s0 = t.op(OpKind::Split, &[conv], move |b| split_attrs(sizes(b), 0));
    let s1 = t.op(OpKind::Split, &[conv], move |b| split_attrs(sizes(b), 1));
    RewriteRule {
        rule_id: "merge_conv",
        description: "conv(x, w1), conv(x, w2) -> split(conv(x, concat(w1, w2)))",
        source: p.build(&[c1, c2]),
        target: t.build(&[s0, s1]),
        guard: Box::new(move |b| {
            b.node(c1).attrs == b.node(c2).attrs && b.dims(w1)[1..] == b.dims(w2)[1..]
        }),
    }
}

fn distribute_mul() -> RewriteRule {
    let mut p = PatternBuilder::default();
    let (a, b_, w) = (p.var(), p.var(), p.var());
    let add = p.op(OpKind::Add, &[a, b_]);
    let mul = p.op(OpKind::Mul, &[add, w]);
    let mut t = TargetBuilder::default();
    let ma = t.op(OpKind::Mul, &[Var(a), Var(w)], no_attrs);
    let mb = t.op(OpKind::Mul, &[Var(b_), Var(w)], no_attrs);
    let out = t.op(OpKind::Add, &[ma, mb], no_attrs);
    RewriteRule {
        rule_id: "distribute_mul",
        description: "(a + b)*w -> a*w + b*w for constant w",
        source: p.build(&[mul]),
        target: t.build(&[out]),
        guard: Box::new(move |b| {
            b.is_constant(w)
                && b.dims(a) == b.dims(add)
                && b.dims(b_) == b.dims(add)
                && b.dims(mul) == b.dims(add)
        }),
    }
}

fn identity_elim() -> RewriteRule {
    let mut p = PatternBuilder::default();
    let x = p.var();
    let id = p.op(OpKind::Identity, &[x]);
    RewriteRule {
        rule_id: "identity_elim",
        description: "identity(x) -> x",
        source: p.build(&[id]),
        target: TargetBuilder::default().build(&[Var(x)]),
        guard: Box::new(|_| true),
    }
}

//! Smallest host graph on which each registry rule fires. Used by the
//! soundness checks and the `rules` listing.

use crate::graph::{attrs, int, ints, CompGraph, GraphBuilder, OpKind};

use super::{find_rule, registry};

pub fn rule_fixture(rule_id: &str) -> Option<CompGraph> {
    let mut b = GraphBuilder::new();
    let g = match rule_id {
        "transpose_elim" => {
            let x = b.input(&[3, 5]);
            let perm = || attrs([("perm", ints(&[1, 0]))]);
            let t1 = b.add(OpKind::Transpose, &[x], perm());
            let t2 = b.add(OpKind::Transpose, &[t1], perm());
            let r = b.op(OpKind::Relu, &[t2]);
            b.build(&[r])
        }
        "matmul_assoc_lr" => {
            let a = b.input(&[3, 4]);
            let w1 = b.weight(&[4, 5]);
            let w2 = b.weight(&[5, 2]);
            let ab = b.op(OpKind::MatMul, &[a, w1]);
            let out = b.op(OpKind::MatMul, &[ab, w2]);
            b.build(&[out])
        }
        "matmul_assoc_rl" => {
            let a = b.input(&[3, 4]);
            let w1 = b.weight(&[4, 5]);
            let w2 = b.weight(&[5, 2]);
            let bc = b.op(OpKind::MatMul, &[w1, w2]);
            let out = b.op(OpKind::MatMul, &[a, bc]);
            b.build(&[out])
        }
        "fuse_conv_relu" => {
            let x = b.input(&[1, 3, 6, 6]);
            let w = b.weight(&[4, 3, 3, 3]);
            let c = b.add(OpKind::Conv2d, &[x, w], attrs([("stride", int(1)), ("pad", int(1))]));
            let r = b.op(OpKind::Relu, &[c]);
            b.build(&[r])
        }
        "fuse_matmul_add" => {
            let x = b.input(&[3, 4]);
            let w = b.weight(&[4, 5]);
            let bias = b.weight(&[5]);
            let m = b.op(OpKind::MatMul, &[x, w]);
            let a = b.op(OpKind::Add, &[m, bias]);
            b.build(&[a])
        }
        "merge_matmul" => merge_matmul_host(&mut b),
        "split_matmul" => {
            let host = merge_matmul_host(&mut b).ok()?;
            let rule = find_rule(registry(), "merge_matmul")?;
            let m = rule.matches(&host).into_iter().next()?;
            return rule.apply(&host, &m).ok();
        }
        "factor_matmul_add" => {
            let x = b.input(&[3, 4]);
            let w1 = b.weight(&[4, 5]);
            let w2 = b.weight(&[4, 5]);
            let m1 = b.op(OpKind::MatMul, &[x, w1]);
            let m2 = b.op(OpKind::MatMul, &[x, w2]);
            let a = b.op(OpKind::Add, &[m1, m2]);
            b.build(&[a])
        }
        "fold_batchnorm" => {
            let x = b.input(&[1, 3, 6, 6]);
            let w = b.weight(&[4, 3, 3, 3]);
            let s = b.weight(&[4]);
            let t = b.weight(&[4]);
            let c = b.add(OpKind::Conv2d, &[x, w], attrs([("stride", int(2)), ("pad", int(1))]));
            let bn = b.op(OpKind::BatchNorm, &[c, s, t]);
            b.build(&[bn])
        }
        "merge_conv" => {
            let x = b.input(&[1, 3, 6, 6]);
            let w1 = b.weight(&[4, 3, 3, 3]);
            let w2 = b.weight(&[2, 3, 3, 3]);
            let conv = || attrs([("stride", int(1)), ("pad", int(1))]);
            let c1 = b.add(OpKind::Conv2d, &[x, w1], conv());
            let c2 = b.add(OpKind::Conv2d, &[x, w2], conv());
            let r = b.op(OpKind::Relu, &[c2]);
            b.build(&[c1, r])
        }
        "distribute_mul" => {
            let a = b.input(&[3, 4]);
            let c = b.input(&[3, 4]);
            let w = b.weight(&[4]);
            let s = b.op(OpKind::Add, &[a, c]);
            let m = b.op(OpKind::Mul, &[s, w]);
            b.build(&[m])
        }
        "identity_elim" => {
            let x = b.input(&[2, 3]);
            let i = b.op(OpKind::Identity, &[x]);
            let r = b.op(OpKind::Relu, &[i]);
            b.build(&[r])
        }
        _ => return None,
    };
    g.ok()
}

fn merge_matmul_host(b: &mut GraphBuilder) -> Result<CompGraph, crate::GraphError> {
    let x = b.input(&[3, 4]);
    let w1 = b.weight(&[4, 5]);
    let w2 = b.weight(&[4, 2]);
    let m1 = b.op(OpKind::MatMul, &[x, w1]);
    let m2 = b.op(OpKind::MatMul, &[x, w2]);
    let r = b.op(OpKind::Relu, &[m2]);
    std::mem::take(b).build(&[m1, r])
}

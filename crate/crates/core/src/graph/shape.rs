use std::collections::BTreeMap;

use super::{CompGraph, GraphError, Node, NodeId, OpKind, TensorShape};

/// Re-derives every shape from operator semantics. Idempotent.
pub fn infer_shapes(g: &CompGraph) -> Result<CompGraph, GraphError> {
    let (nodes, outputs) = g.clone().into_parts();
    CompGraph::new(nodes.into_values().collect(), outputs)
}

pub(super) fn infer_all(
    nodes: &BTreeMap<NodeId, Node>,
    topo: &[NodeId],
) -> Result<BTreeMap<NodeId, TensorShape>, GraphError> {
    let mut shapes: BTreeMap<NodeId, TensorShape> = BTreeMap::new();
    for id in topo {
        let n = &nodes[id];
        let ins: Vec<&TensorShape> = n.inputs.iter().map(|s| &shapes[s]).collect();
        let out = infer_node(n, &ins)?;
        shapes.insert(*id, out);
    }
    Ok(shapes)
}

fn mismatch(node: &Node, reason: impl Into<String>) -> GraphError {
    GraphError::ShapeMismatch {
        node: node.id,
        reason: reason.into(),
    }
}

fn usize_attr(node: &Node, key: &str, default: Option<usize>) -> Result<usize, GraphError> {
    match node.attr_int(key) {
        Some(v) if v >= 0 => Ok(v as usize),
        Some(v) => Err(mismatch(node, format!("attribute {key}={v} is negative"))),
        None => default.ok_or_else(|| mismatch(node, format!("missing attribute {key}"))),
    }
}

fn usize_list(node: &Node, key: &str) -> Result<Vec<usize>, GraphError> {
    let vals = node
        .attr_ints(key)
        .ok_or_else(|| mismatch(node, format!("missing attribute {key}")))?;
    vals.iter()
        .map(|&v| {
            usize::try_from(v).map_err(|_| mismatch(node, format!("attribute {key} has {v}")))
        })
        .collect()
}

fn shape(node: &Node, dims: Vec<usize>) -> Result<TensorShape, GraphError> {
    TensorShape::new(dims.clone()).map_err(|_| mismatch(node, format!("invalid result {dims:?}")))
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

pub(crate) fn conv_output(
    input: &[usize],
    weight: &[usize],
    stride: usize,
    pad: usize,
) -> Option<Vec<usize>> {
    if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] || stride == 0 {
        return None;
    }
    let h = input[2] + 2 * pad;
    let w = input[3] + 2 * pad;
    if h < weight[2] || w < weight[3] {
        return None;
    }
    Some(vec![
        input[0],
        weight[0],
        (h - weight[2]) / stride + 1,
        (w - weight[3]) / stride + 1,
    ])
}

fn matmul_dims(node: &Node, a: &TensorShape, b: &TensorShape) -> Result<Vec<usize>, GraphError> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(mismatch(node, format!("matmul needs rank-2 operands, got {a} and {b}")));
    }
    if a.dim(1) != b.dim(0) {
        return Err(mismatch(node, format!("inner dimensions differ: {a} x {b}")));
    }
    Ok(vec![a.dim(0), b.dim(1)])
}

fn infer_node(n: &Node, ins: &[&TensorShape]) -> Result<TensorShape, GraphError> {
    match n.kind {
        OpKind::Input | OpKind::Weight => {
            let dims = usize_list(n, "shape")?;
            shape(n, dims)
        }
        OpKind::MatMul => shape(n, matmul_dims(n, ins[0], ins[1])?),
        OpKind::FusedMatMulAdd => {
            let mm = matmul_dims(n, ins[0], ins[1])?;
            match broadcast(&mm, ins[2].dims()) {
                Some(b) if b == mm => shape(n, mm),
                _ => Err(mismatch(n, format!("bias {} does not broadcast to {mm:?}", ins[2]))),
            }
        }
        OpKind::Conv2d | OpKind::FusedConvRelu => {
            let stride = usize_attr(n, "stride", Some(1))?;
            let pad = usize_attr(n, "pad", Some(0))?;
            let dims = conv_output(ins[0].dims(), ins[1].dims(), stride, pad).ok_or_else(|| {
                mismatch(n, format!("conv of {} with kernel {}", ins[0], ins[1]))
            })?;
            shape(n, dims)
        }
        OpKind::Relu | OpKind::Identity => Ok(ins[0].clone()),
        OpKind::Add | OpKind::Mul => {
            let dims = broadcast(ins[0].dims(), ins[1].dims())
                .ok_or_else(|| mismatch(n, format!("cannot broadcast {} and {}", ins[0], ins[1])))?;
            shape(n, dims)
        }
        OpKind::Concat => {
            let axis = usize_attr(n, "axis", None)?;
            let (a, b) = (ins[0], ins[1]);
            if a.rank() != b.rank() || axis >= a.rank() {
                return Err(mismatch(n, format!("concat of {a} and {b} on axis {axis}")));
            }
            for i in 0..a.rank() {
                if i != axis && a.dim(i) != b.dim(i) {
                    return Err(mismatch(n, format!("concat of {a} and {b} on axis {axis}")));
                }
            }
            let mut dims = a.dims().to_vec();
            dims[axis] += b.dim(axis);
            shape(n, dims)
        }
        OpKind::Split => {
            let axis = usize_attr(n, "axis", None)?;
            let sizes = usize_list(n, "sizes")?;
            let index = usize_attr(n, "index", None)?;
            let a = ins[0];
            if axis >= a.rank() || sizes.iter().sum::<usize>() != a.dim(axis) || index >= sizes.len()
            {
                return Err(mismatch(n, format!("split {sizes:?} of {a} on axis {axis}")));
            }
            let mut dims = a.dims().to_vec();
            dims[axis] = sizes[index];
            shape(n, dims)
        }
        OpKind::Transpose => {
            let perm = usize_list(n, "perm")?;
            let a = ins[0];
            let mut seen = vec![false; a.rank()];
            if perm.len() != a.rank() {
                return Err(mismatch(n, format!("perm {perm:?} for {a}")));
            }
            for &p in &perm {
                if p >= a.rank() || seen[p] {
                    return Err(mismatch(n, format!("perm {perm:?} is not a permutation")));
                }
                seen[p] = true;
            }
            shape(n, perm.iter().map(|&p| a.dim(p)).collect())
        }
        OpKind::Reshape => {
            let dims = usize_list(n, "shape")?;
            if dims.iter().product::<usize>() != ins[0].numel() {
                return Err(mismatch(n, format!("reshape {} to {dims:?}", ins[0])));
            }
            shape(n, dims)
        }
        OpKind::MaxPool => {
            let k = usize_attr(n, "kernel", None)?;
            let s = usize_attr(n, "stride", Some(k))?;
            let a = ins[0];
            if a.rank() != 4 || k == 0 || s == 0 || a.dim(2) < k || a.dim(3) < k {
                return Err(mismatch(n, format!("maxpool {k}/{s} of {a}")));
            }
            shape(
                n,
                vec![a.dim(0), a.dim(1), (a.dim(2) - k) / s + 1, (a.dim(3) - k) / s + 1],
            )
        }
        OpKind::BatchNorm => {
            let (x, scale, shift) = (ins[0], ins[1], ins[2]);
            if x.rank() < 2 || scale.dims() != [x.dim(1)] || shift.dims() != [x.dim(1)] {
                return Err(mismatch(n, format!("batchnorm of {x} with {scale}, {shift}")));
            }
            Ok(x.clone())
        }
        OpKind::Enlarge => {
            let kernel = usize_list(n, "kernel")?;
            let w = ins[0];
            if w.rank() != 4 || kernel.len() != 2 {
                return Err(mismatch(n, format!("enlarge {w} to {kernel:?}")));
            }
            let (kh, kw) = (kernel[0], kernel[1]);
            if kh < w.dim(2) || kw < w.dim(3) || !(kh - w.dim(2)).is_multiple_of(2) || !(kw - w.dim(3)).is_multiple_of(2)
            {
                return Err(mismatch(n, format!("enlarge {w} to {kernel:?}")));
            }
            shape(n, vec![w.dim(0), w.dim(1), kh, kw])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{attrs, int, ints, GraphBuilder};

    #[test]
    fn matmul_shape() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2, 3]);
        let w = b.weight(&[3, 4]);
        let m = b.op(OpKind::MatMul, &[x, w]);
        let g = b.build(&[m]).unwrap();
        assert_eq!(g.shape(m).dims(), &[2, 4]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2, 3]);
        let w = b.weight(&[4, 4]);
        let m = b.op(OpKind::MatMul, &[x, w]);
        assert!(matches!(b.build(&[m]), Err(GraphError::ShapeMismatch { .. })));
    }

    #[test]
    fn same_padding_conv_shape() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[1, 3, 8, 8]);
        let w = b.weight(&[4, 3, 3, 3]);
        let c = b.add(OpKind::Conv2d, &[x, w], attrs([("stride", int(1)), ("pad", int(1))]));
        let g = b.build(&[c]).unwrap();
        assert_eq!(g.shape(c).dims(), &[1, 4, 8, 8]);
    }

    #[test]
    fn transpose_shape() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2, 3]);
        let t = b.add(OpKind::Transpose, &[x], attrs([("perm", ints(&[1, 0]))]));
        let g = b.build(&[t]).unwrap();
        assert_eq!(g.shape(t).dims(), &[3, 2]);
    }

    #[test]
    fn split_and_concat_shapes() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2, 7]);
        let s0 = b.add(
            OpKind::Split,
            &[x],
            attrs([("axis", int(1)), ("sizes", ints(&[3, 4])), ("index", int(1))]),
        );
        let c = b.add(OpKind::Concat, &[s0, x], attrs([("axis", int(1))]));
        let g = b.build(&[c]).unwrap();
        assert_eq!(g.shape(s0).dims(), &[2, 4]);
        assert_eq!(g.shape(c).dims(), &[2, 11]);
    }

    #[test]
    fn broadcasting_rules() {
        assert_eq!(broadcast(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast(&[1, 4, 1, 1], &[2, 4, 5, 5]), Some(vec![2, 4, 5, 5]));
        assert_eq!(broadcast(&[2, 3], &[2]), None);
    }

    #[test]
    fn inference_is_idempotent() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[1, 3, 8, 8]);
        let w = b.weight(&[4, 3, 3, 3]);
        let c = b.add(OpKind::Conv2d, &[x, w], attrs([("pad", int(1))]));
        let r = b.op(OpKind::Relu, &[c]);
        let p = b.add(OpKind::MaxPool, &[r], attrs([("kernel", int(2))]));
        let g = b.build(&[p]).unwrap();
        let once = infer_shapes(&g).unwrap();
        let twice = infer_shapes(&once).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once, g);
        assert_eq!(g.shape(p).dims(), &[1, 4, 4, 4]);
    }
}

//! Direct reference interpreter, used as the semantic-equivalence oracle.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};
use rand::Rng;

use super::{CompGraph, GraphError, Node, NodeId, OpKind};
use crate::scalar::Real;

pub type DenseTensor<T> = ArrayD<T>;

/// Evaluates every node in topological order.
///
/// `inputs` must hold a value for every `Input` and `Weight` node; extra
/// entries are ignored.
pub fn evaluate<T: Real>(
    g: &CompGraph,
    inputs: &BTreeMap<NodeId, DenseTensor<T>>,
) -> Result<BTreeMap<NodeId, DenseTensor<T>>, GraphError> {
    let mut values: BTreeMap<NodeId, DenseTensor<T>> = BTreeMap::new();
    for id in g.topo_order() {
        let node = g.node(*id).expect("topo ids exist");
        let v = if node.kind.is_source() {
            let v = inputs.get(id).ok_or(GraphError::MissingInput(*id))?;
            if v.shape() != g.shape(*id).dims() {
                return Err(GraphError::ShapeMismatch {
                    node: *id,
                    reason: format!("supplied {:?}, declared {}", v.shape(), g.shape(*id)),
                });
            }
            v.clone()
        } else {
            let args: Vec<&DenseTensor<T>> = node.inputs.iter().map(|s| &values[s]).collect();
            eval_node(node, &args).map_err(|reason| GraphError::ShapeMismatch {
                node: *id,
                reason,
            })?
        };
        values.insert(*id, v);
    }
    Ok(values)
}

/// Values of the graph outputs, in output order.
pub fn evaluate_outputs<T: Real>(
    g: &CompGraph,
    inputs: &BTreeMap<NodeId, DenseTensor<T>>,
) -> Result<Vec<DenseTensor<T>>, GraphError> {
    let mut all = evaluate(g, inputs)?;
    Ok(g.outputs()
        .iter()
        .map(|o| all.get(o).cloned().unwrap_or_else(|| all.remove(o).expect("evaluated")))
        .collect())
}

/// Uniform(-1, 1) values for every source node.
pub fn random_inputs<T: Real, R: Rng + ?Sized>(
    g: &CompGraph,
    rng: &mut R,
) -> BTreeMap<NodeId, DenseTensor<T>> {
    g.nodes()
        .filter(|n| n.kind.is_source())
        .map(|n| {
            let dims = g.shape(n.id).dims().to_vec();
            let t = ArrayD::from_shape_simple_fn(IxDyn(&dims), || {
                T::lit(rng.random_range(-1.0..1.0))
            });
            (n.id, t)
        })
        .collect()
}

/// Largest elementwise relative difference, `|a-b| / max(|a|, |b|)`, with
/// exact agreement counting as zero. `None` when shapes differ.
pub fn max_rel_diff<T: Real>(a: &DenseTensor<T>, b: &DenseTensor<T>) -> Option<f64> {
    if a.shape() != b.shape() {
        return None;
    }
    Some(a.iter().zip(b.iter()).fold(0.0, |acc, (&x, &y)| {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        let scale = x.abs().max(y.abs());
        if x == y || scale == 0.0 {
            acc
        } else {
            acc.max((x - y).abs() / scale)
        }
    }))
}

fn attr(node: &Node, key: &str, default: usize) -> usize {
    node.attr_int(key).map(|v| v as usize).unwrap_or(default)
}

fn attr_list(node: &Node, key: &str) -> Result<Vec<usize>, String> {
    node.attr_ints(key)
        .map(|v| v.into_iter().map(|x| x as usize).collect())
        .ok_or_else(|| format!("missing attribute {key}"))
}

fn as2<T: Real>(t: &DenseTensor<T>) -> Result<Array2<T>, String> {
    t.clone()
        .into_dimensionality::<Ix2>()
        .map_err(|e| format!("expected rank 2: {e}"))
}

fn as4<T: Real>(t: &DenseTensor<T>) -> Result<Array4<T>, String> {
    t.clone()
        .into_dimensionality::<Ix4>()
        .map_err(|e| format!("expected rank 4: {e}"))
}

fn broadcast_binary<T: Real>(
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<DenseTensor<T>, String> {
    let dims = super::shape::broadcast(a.shape(), b.shape())
        .ok_or_else(|| format!("cannot broadcast {:?} and {:?}", a.shape(), b.shape()))?;
    let av = a.broadcast(IxDyn(&dims)).ok_or("broadcast failed")?;
    let bv = b.broadcast(IxDyn(&dims)).ok_or("broadcast failed")?;
    let mut out = ArrayD::zeros(IxDyn(&dims));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    Ok(out)
}

fn conv2d<T: Real>(
    x: &DenseTensor<T>,
    w: &DenseTensor<T>,
    stride: usize,
    pad: usize,
) -> Result<DenseTensor<T>, String> {
    let x = as4(x)?;
    let w = as4(w)?;
    let dims = super::shape::conv_output(x.shape(), w.shape(), stride, pad)
        .ok_or("conv shapes incompatible")?;
    let (n, co, ho, wo) = (dims[0], dims[1], dims[2], dims[3]);
    let (ci, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h, wi) = (x.shape()[2] as isize, x.shape()[3] as isize);
    let mut out = Array4::<T>::zeros((n, co, ho, wo));
    for b in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for c in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wi {
                                    continue;
                                }
                                acc = acc
                                    + x[[b, c, iy as usize, ix as usize]] * w[[o, c, ky, kx]];
                            }
                        }
                    }
                    out[[b, o, oy, ox]] = acc;
                }
            }
        }
    }
    Ok(out.into_dyn())
}

fn relu<T: Real>(t: DenseTensor<T>) -> DenseTensor<T> {
    t.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

fn eval_node<T: Real>(node: &Node, args: &[&DenseTensor<T>]) -> Result<DenseTensor<T>, String> {
    Ok(match node.kind {
        OpKind::Input | OpKind::Weight => unreachable!("sources are bound from inputs"),
        OpKind::MatMul => as2(args[0])?.dot(&as2(args[1])?).into_dyn(),
        OpKind::FusedMatMulAdd => {
            let mm = as2(args[0])?.dot(&as2(args[1])?).into_dyn();
            broadcast_binary(&mm, args[2], |a, b| a + b)?
        }
        OpKind::Conv2d => conv2d(args[0], args[1], attr(node, "stride", 1), attr(node, "pad", 0))?,
        OpKind::FusedConvRelu => relu(conv2d(
            args[0],
            args[1],
            attr(node, "stride", 1),
            attr(node, "pad", 0),
        )?),
        OpKind::Relu => relu(args[0].clone()),
        OpKind::Identity => args[0].clone(),
        OpKind::Add => broadcast_binary(args[0], args[1], |a, b| a + b)?,
        OpKind::Mul => broadcast_binary(args[0], args[1], |a, b| a * b)?,
        OpKind::Concat => {
            let axis = attr(node, "axis", 0);
            concatenate(Axis(axis), &[args[0].view(), args[1].view()]).map_err(|e| e.to_string())?
        }
        OpKind::Split => {
            let axis = attr(node, "axis", 0);
            let sizes = attr_list(node, "sizes")?;
            let index = attr(node, "index", 0);
            let start: usize = sizes[..index].iter().sum();
            args[0]
                .slice_axis(Axis(axis), (start..start + sizes[index]).into())
                .to_owned()
        }
        OpKind::Transpose => {
            let perm = attr_list(node, "perm")?;
            args[0]
                .clone()
                .permuted_axes(IxDyn(&perm))
                .as_standard_layout()
                .into_owned()
        }
        OpKind::Reshape => {
            let dims = attr_list(node, "shape")?;
            args[0]
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&dims))
                .map_err(|e| e.to_string())?
        }
        OpKind::MaxPool => {
            let k = attr(node, "kernel", 1);
            let st = attr(node, "stride", k);
            let x = as4(args[0])?;
            let (n, c, h, w) = x.dim();
            let (ho, wo) = ((h - k) / st + 1, (w - k) / st + 1);
            let mut out = Array4::<T>::zeros((n, c, ho, wo));
            for ((b, ch, oy, ox), o) in out.indexed_iter_mut() {
                let win = x.slice(s![b, ch, oy * st..oy * st + k, ox * st..ox * st + k]);
                *o = win.iter().copied().fold(T::neg_infinity(), T::max);
            }
            out.into_dyn()
        }
        OpKind::BatchNorm => {
            let x = args[0];
            let mut bshape = vec![1; x.ndim()];
            bshape[1] = x.shape()[1];
            let scale = args[1]
                .clone()
                .into_shape_with_order(IxDyn(&bshape))
                .map_err(|e| e.to_string())?;
            let shift = args[2]
                .clone()
                .into_shape_with_order(IxDyn(&bshape))
                .map_err(|e| e.to_string())?;
            let scaled = broadcast_binary(x, &scale, |a, b| a * b)?;
            broadcast_binary(&scaled, &shift, |a, b| a + b)?
        }
        OpKind::Enlarge => {
            let kernel = attr_list(node, "kernel")?;
            let w = as4(args[0])?;
            let (co, ci, kh, kw) = w.dim();
            let (py, px) = ((kernel[0] - kh) / 2, (kernel[1] - kw) / 2);
            let mut out = Array4::<T>::zeros((co, ci, kernel[0], kernel[1]));
            out.slice_mut(s![.., .., py..py + kh, px..px + kw]).assign(&w);
            out.into_dyn()
        }
    })
}

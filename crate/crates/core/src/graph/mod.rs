//! Computation-graph IR.
//!
//! A [`CompGraph`] is an immutable DAG of tensor operators. Every node
//! produces exactly one tensor; multi-output operators (split) are modelled
//! as one node per produced slice. Shapes are inferred on construction, so a
//! `CompGraph` value always satisfies its structural invariants.

mod features;
mod hash;
mod interp;
mod io;
mod shape;

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{featurise, GraphFeatures, EDGE_FEATURE_DIM, GLOBAL_FEATURE_DIM};
pub use hash::{canonical_hash, EMPTY_GRAPH_DIGEST};
pub use interp::{evaluate, evaluate_outputs, max_rel_diff, random_inputs, DenseTensor};
pub use io::{load, save};
pub use shape::infer_shapes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

macro_rules! op_kinds {
    ($($name:ident = $idx:expr, $tag:literal, $arity:expr;)*) => {
        /// Closed operator registry. Discriminants are the one-hot indices.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum OpKind {
            $($name = $idx,)*
        }

        impl OpKind {
            pub const ALL: [OpKind; op_kinds!(@count $($name)*)] = [$(OpKind::$name,)*];

            pub fn tag(self) -> &'static str {
                match self {
                    $(OpKind::$name => $tag,)*
                }
            }

            pub fn from_tag(tag: &str) -> Option<OpKind> {
                match tag {
                    $($tag => Some(OpKind::$name),)*
                    _ => None,
                }
            }

            /// Number of operand tensors the operator consumes.
            pub fn arity(self) -> usize {
                match self {
                    $(OpKind::$name => $arity,)*
                }
            }
        }
    };
    (@count) => { 0 };
    (@count $head:ident $($tail:ident)*) => { 1 + op_kinds!(@count $($tail)*) };
}

op_kinds! {
    Input = 0, "Input", 0;
    Weight = 1, "Weight", 0;
    MatMul = 2, "MatMul", 2;
    Conv2d = 3, "Conv2d", 2;
    Relu = 4, "Relu", 1;
    Add = 5, "Add", 2;
    Mul = 6, "Mul", 2;
    Concat = 7, "Concat", 2;
    Split = 8, "Split", 1;
    Transpose = 9, "Transpose", 1;
    Reshape = 10, "Reshape", 1;
    MaxPool = 11, "MaxPool", 1;
    BatchNorm = 12, "BatchNorm", 3;
    FusedConvRelu = 13, "FusedConvRelu", 2;
    FusedMatMulAdd = 14, "FusedMatMulAdd", 3;
    Identity = 15, "Identity", 1;
    Enlarge = 16, "Enlarge", 1;
}

/// Width of the one-hot operator encoding.
pub const NUM_OP_KINDS: usize = OpKind::ALL.len();

impl OpKind {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_source(self) -> bool {
        matches!(self, OpKind::Input | OpKind::Weight)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Small scalar operator attribute.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Ints(Vec<i64>),
}

pub type Attrs = BTreeMap<String, AttrValue>;

/// Logical tensor extents, rank 1..=4, every extent at least one.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TensorShape(Vec<usize>);

pub const MAX_RANK: usize = 4;

impl TensorShape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self, GraphError> {
        let dims = dims.into();
        if dims.is_empty() || dims.len() > MAX_RANK || dims.contains(&0) {
            return Err(GraphError::InvalidShape(dims));
        }
        Ok(TensorShape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0[axis]
    }
}

impl TryFrom<Vec<usize>> for TensorShape {
    type Error = GraphError;

    fn try_from(dims: Vec<usize>) -> Result<Self, Self::Error> {
        TensorShape::new(dims)
    }
}

impl From<TensorShape> for Vec<usize> {
    fn from(s: TensorShape) -> Vec<usize> {
        s.0
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub kind: OpKind,
    pub attrs: Attrs,
    /// Producer of each operand slot, in port order.
    pub inputs: Vec<NodeId>,
}

impl Node {
    pub fn attr_int(&self, key: &str) -> Option<i64> {
        match self.attrs.get(key)? {
            AttrValue::Int(v) => Some(*v),
            AttrValue::Ints(v) if v.len() == 1 => Some(v[0]),
            AttrValue::Ints(_) => None,
        }
    }

    pub fn attr_ints(&self, key: &str) -> Option<Vec<i64>> {
        match self.attrs.get(key)? {
            AttrValue::Int(v) => Some(vec![*v]),
            AttrValue::Ints(v) => Some(v.clone()),
        }
    }
}

/// A tensor flowing from `src` into operand slot `dst_port` of `dst`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub dst_port: usize,
    pub shape: TensorShape,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch at {node}: {reason}")]
    ShapeMismatch { node: NodeId, reason: String },
    #[error("graph contains a cycle")]
    CycleDetected,
    #[error("{node} ({kind}) expects {expected} inputs, found {found}")]
    ArityMismatch {
        node: NodeId,
        kind: OpKind,
        expected: usize,
        found: usize,
    },
    #[error("{0} is referenced but not defined")]
    UnknownNode(NodeId),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("no value supplied for {0}")]
    MissingInput(NodeId),
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
}

/// Immutable, shape-annotated computation graph.
#[derive(Debug, Clone, PartialEq)]
pub struct CompGraph {
    nodes: BTreeMap<NodeId, Node>,
    outputs: Vec<NodeId>,
    shapes: BTreeMap<NodeId, TensorShape>,
    topo: Vec<NodeId>,
}

impl CompGraph {
    /// Builds a graph, checking arity and acyclicity and inferring shapes.
    pub fn new(nodes: Vec<Node>, outputs: Vec<NodeId>) -> Result<Self, GraphError> {
        let mut map = BTreeMap::new();
        for n in nodes {
            let id = n.id;
            if map.insert(id, n).is_some() {
                return Err(GraphError::DuplicateNode(id));
            }
        }
        for n in map.values() {
            if n.inputs.len() != n.kind.arity() {
                return Err(GraphError::ArityMismatch {
                    node: n.id,
                    kind: n.kind,
                    expected: n.kind.arity(),
                    found: n.inputs.len(),
                });
            }
            for src in &n.inputs {
                if !map.contains_key(src) {
                    return Err(GraphError::UnknownNode(*src));
                }
            }
        }
        for o in &outputs {
            if !map.contains_key(o) {
                return Err(GraphError::UnknownNode(*o));
            }
        }
        let topo = topo_order(&map)?;
        let shapes = shape::infer_all(&map, &topo)?;
        Ok(CompGraph {
            nodes: map,
            outputs,
            shapes,
            topo,
        })
    }

    pub fn empty() -> Self {
        CompGraph {
            nodes: BTreeMap::new(),
            outputs: Vec::new(),
            shapes: BTreeMap::new(),
            topo: Vec::new(),
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn shape(&self, id: NodeId) -> &TensorShape {
        &self.shapes[&id]
    }

    pub fn input_shapes(&self, id: NodeId) -> Vec<&TensorShape> {
        self.nodes[&id].inputs.iter().map(|s| &self.shapes[s]).collect()
    }

    /// Topological order, ties broken by smallest node id.
    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo
    }

    /// Edges in topological order of their destination, then port.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for id in &self.topo {
            let n = &self.nodes[id];
            for (port, src) in n.inputs.iter().enumerate() {
                out.push(Edge {
                    src: *src,
                    dst: n.id,
                    dst_port: port,
                    shape: self.shapes[src].clone(),
                });
            }
        }
        out
    }

    /// `(consumer, port)` pairs for every node, in consumer id order.
    pub fn consumers(&self) -> BTreeMap<NodeId, Vec<(NodeId, usize)>> {
        let mut map: BTreeMap<NodeId, Vec<(NodeId, usize)>> =
            self.nodes.keys().map(|&k| (k, Vec::new())).collect();
        for n in self.nodes.values() {
            for (port, src) in n.inputs.iter().enumerate() {
                map.get_mut(src).expect("validated").push((n.id, port));
            }
        }
        map
    }

    pub fn max_id(&self) -> Option<NodeId> {
        self.nodes.keys().next_back().copied()
    }

    pub fn is_output(&self, id: NodeId) -> bool {
        self.outputs.contains(&id)
    }

    /// Nodes whose value depends only on weights; excludes the weights themselves.
    pub fn constant_nodes(&self) -> BTreeSet<NodeId> {
        let mut constant: BTreeSet<NodeId> = BTreeSet::new();
        let mut folded = BTreeSet::new();
        for id in &self.topo {
            let n = &self.nodes[id];
            let is_const = match n.kind {
                OpKind::Weight => true,
                OpKind::Input => false,
                _ => n.inputs.iter().all(|s| constant.contains(s)),
            };
            if is_const {
                constant.insert(*id);
                if n.kind != OpKind::Weight {
                    folded.insert(*id);
                }
            }
        }
        folded
    }

    /// True when every transitive ancestor of `id` (and `id` itself) is a
    /// weight or computed only from weights.
    pub fn is_constant(&self, id: NodeId) -> bool {
        self.nodes[&id].kind == OpKind::Weight || self.constant_nodes().contains(&id)
    }

    pub(crate) fn into_parts(self) -> (BTreeMap<NodeId, Node>, Vec<NodeId>) {
        (self.nodes, self.outputs)
    }
}

fn topo_order(nodes: &BTreeMap<NodeId, Node>) -> Result<Vec<NodeId>, GraphError> {
    let mut indegree: BTreeMap<NodeId, usize> = nodes.keys().map(|&k| (k, 0)).collect();
    let mut consumers: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for n in nodes.values() {
        *indegree.get_mut(&n.id).expect("present") = n.inputs.len();
        for src in &n.inputs {
            consumers.entry(*src).or_default().push(n.id);
        }
    }
    let mut ready: BinaryHeap<Reverse<NodeId>> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&k, _)| Reverse(k))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        if let Some(cs) = consumers.get(&id) {
            for c in cs {
                let d = indegree.get_mut(c).expect("present");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(*c));
                }
            }
        }
    }
    if order.len() != nodes.len() {
        return Err(GraphError::CycleDetected);
    }
    Ok(order)
}

/// Incremental graph construction with sequential ids.
#[derive(Debug, Default, Clone)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    next: u32,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Continues numbering after `start`.
    pub fn starting_at(start: u32) -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            next: start,
        }
    }

    pub fn add(&mut self, kind: OpKind, inputs: &[NodeId], attrs: Attrs) -> NodeId {
        let id = NodeId(self.next);
        self.next += 1;
        self.nodes.push(Node {
            id,
            kind,
            attrs,
            inputs: inputs.to_vec(),
        });
        id
    }

    pub fn input(&mut self, dims: &[usize]) -> NodeId {
        self.add(OpKind::Input, &[], attrs([("shape", ints(dims))]))
    }

    pub fn weight(&mut self, dims: &[usize]) -> NodeId {
        self.add(OpKind::Weight, &[], attrs([("shape", ints(dims))]))
    }

    pub fn op(&mut self, kind: OpKind, inputs: &[NodeId]) -> NodeId {
        self.add(kind, inputs, Attrs::new())
    }

    pub fn push_node(&mut self, node: Node) {
        self.next = self.next.max(node.id.0 + 1);
        self.nodes.push(node);
    }

    pub fn build(self, outputs: &[NodeId]) -> Result<CompGraph, GraphError> {
        CompGraph::new(self.nodes, outputs.to_vec())
    }
}

pub fn attrs<const N: usize>(pairs: [(&str, AttrValue); N]) -> Attrs {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn ints(values: &[usize]) -> AttrValue {
    AttrValue::Ints(values.iter().map(|&v| v as i64).collect())
}

pub fn int(value: i64) -> AttrValue {
    AttrValue::Int(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_indices_are_contiguous() {
        for (i, k) in OpKind::ALL.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(OpKind::from_tag(k.tag()), Some(*k));
        }
        assert_eq!(NUM_OP_KINDS, 17);
        assert_eq!(OpKind::MatMul.index(), 2);
    }

    #[test]
    fn shape_rejects_bad_extents() {
        assert!(TensorShape::new(vec![]).is_err());
        assert!(TensorShape::new(vec![1, 0]).is_err());
        assert!(TensorShape::new(vec![1, 2, 3, 4, 5]).is_err());
        assert!(TensorShape::new(vec![1, 2, 3, 4]).is_ok());
    }

    #[test]
    fn cycle_is_detected() {
        let nodes = vec![
            Node {
                id: NodeId(0),
                kind: OpKind::Relu,
                attrs: Attrs::new(),
                inputs: vec![NodeId(1)],
            },
            Node {
                id: NodeId(1),
                kind: OpKind::Relu,
                attrs: Attrs::new(),
                inputs: vec![NodeId(0)],
            },
        ];
        assert_eq!(
            CompGraph::new(nodes, vec![NodeId(0)]).unwrap_err(),
            GraphError::CycleDetected
        );
    }

    #[test]
    fn arity_is_checked() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2, 2]);
        let m = b.op(OpKind::MatMul, &[x]);
        assert!(matches!(
            b.build(&[m]),
            Err(GraphError::ArityMismatch { expected: 2, found: 1, .. })
        ));
    }

    #[test]
    fn constant_nodes_only_depend_on_weights() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2, 3]);
        let w1 = b.weight(&[3, 4]);
        let w2 = b.weight(&[3, 4]);
        let s = b.op(OpKind::Add, &[w1, w2]);
        let m = b.op(OpKind::MatMul, &[x, s]);
        let g = b.build(&[m]).unwrap();
        let folded = g.constant_nodes();
        assert_eq!(folded.into_iter().collect::<Vec<_>>(), vec![s]);
        assert!(g.is_constant(w1));
        assert!(!g.is_constant(m));
    }
}

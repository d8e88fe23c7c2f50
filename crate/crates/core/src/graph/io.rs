//! Line-oriented JSON graph document.
//!
//! ```text
//! {
//!   "nodes": [
//!     {"id":0,"kind":"Input","attrs":{"shape":[2,3]}},
//!     ...
//!   ],
//!   "edges": [
//!     {"src":0,"dst":2,"port":0,"shape":[2,3]},
//!     ...
//!   ],
//!   "outputs": [2]
//! }
//! ```
//!
//! One node or edge per line, so diagnostics can point at a line.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Attrs, CompGraph, GraphError, Node, NodeId, OpKind};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: u32,
    kind: String,
    #[serde(default)]
    attrs: Attrs,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    src: u32,
    dst: u32,
    port: usize,
    shape: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    nodes: Vec<RawNode>,
    edges: Vec<RawEdge>,
    outputs: Vec<u32>,
}

pub fn save(g: &CompGraph) -> String {
    let mut out = String::from("{\n  \"nodes\": [\n");
    let nodes: Vec<String> = g
        .nodes()
        .map(|n| {
            let raw = RawNode {
                id: n.id.0,
                kind: n.kind.tag().to_string(),
                attrs: n.attrs.clone(),
            };
            format!("    {}", serde_json::to_string(&raw).expect("serialisable"))
        })
        .collect();
    out.push_str(&nodes.join(",\n"));
    out.push_str("\n  ],\n  \"edges\": [\n");
    let mut edges = g.edges();
    edges.sort_by_key(|e| (e.dst, e.dst_port));
    let edges: Vec<String> = edges
        .into_iter()
        .map(|e| {
            let raw = RawEdge {
                src: e.src.0,
                dst: e.dst.0,
                port: e.dst_port,
                shape: e.shape.dims().to_vec(),
            };
            format!("    {}", serde_json::to_string(&raw).expect("serialisable"))
        })
        .collect();
    out.push_str(&edges.join(",\n"));
    let outputs: Vec<String> = g.outputs().iter().map(|o| o.0.to_string()).collect();
    out.push_str(&format!("\n  ],\n  \"outputs\": [{}]\n}}\n", outputs.join(", ")));
    out
}

/// Line numbers (1-based) of entries whose first key is `key`.
fn entry_lines(doc: &str, key: &str) -> Vec<usize> {
    let needle = format!("{{\"{key}\"");
    doc.lines()
        .enumerate()
        .filter(|(_, l)| l.trim_start().starts_with(&needle))
        .map(|(i, _)| i + 1)
        .collect()
}

fn parse_err(line: usize, field: &str, message: impl Into<String>) -> GraphError {
    GraphError::Parse {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

pub fn load(doc: &str) -> Result<CompGraph, GraphError> {
    let raw: RawGraph =
        serde_json::from_str(doc).map_err(|e| parse_err(e.line(), "document", e.to_string()))?;
    let node_lines = entry_lines(doc, "id");
    let edge_lines = entry_lines(doc, "src");
    let node_line = |i: usize| node_lines.get(i).copied().unwrap_or(0);
    let edge_line = |i: usize| edge_lines.get(i).copied().unwrap_or(0);

    let mut kinds: BTreeMap<u32, (OpKind, usize)> = BTreeMap::new();
    for (i, n) in raw.nodes.iter().enumerate() {
        let kind = OpKind::from_tag(&n.kind)
            .ok_or_else(|| parse_err(node_line(i), "kind", format!("unknown operator `{}`", n.kind)))?;
        if kinds.insert(n.id, (kind, i)).is_some() {
            return Err(parse_err(node_line(i), "id", format!("duplicate id {}", n.id)));
        }
    }

    let mut slots: BTreeMap<u32, BTreeMap<usize, u32>> = BTreeMap::new();
    for (i, e) in raw.edges.iter().enumerate() {
        if !kinds.contains_key(&e.src) {
            return Err(parse_err(edge_line(i), "src", format!("dangling source {}", e.src)));
        }
        let Some((kind, _)) = kinds.get(&e.dst) else {
            return Err(parse_err(edge_line(i), "dst", format!("dangling destination {}", e.dst)));
        };
        if e.port >= kind.arity() {
            return Err(parse_err(
                edge_line(i),
                "port",
                format!("{} has no operand slot {}", kind, e.port),
            ));
        }
        if slots.entry(e.dst).or_default().insert(e.port, e.src).is_some() {
            return Err(parse_err(edge_line(i), "port", format!("slot {} filled twice", e.port)));
        }
    }

    let mut nodes = Vec::with_capacity(raw.nodes.len());
    for (i, n) in raw.nodes.into_iter().enumerate() {
        let (kind, _) = kinds[&n.id];
        let filled = slots.remove(&n.id).unwrap_or_default();
        if filled.len() != kind.arity() {
            return Err(parse_err(
                node_line(i),
                "edges",
                format!("{} expects {} inputs, found {}", kind, kind.arity(), filled.len()),
            ));
        }
        nodes.push(Node {
            id: NodeId(n.id),
            kind,
            attrs: n.attrs,
            inputs: filled.into_values().map(NodeId).collect(),
        });
    }
    for o in &raw.outputs {
        if !kinds.contains_key(o) {
            return Err(parse_err(0, "outputs", format!("unknown output {o}")));
        }
    }
    let outputs = raw.outputs.into_iter().map(NodeId).collect();
    let g = CompGraph::new(nodes, outputs).map_err(|e| match e {
        GraphError::ShapeMismatch { node, reason } => parse_err(
            kinds.get(&node.0).map(|(_, i)| node_line(*i)).unwrap_or(0),
            "attrs",
            reason,
        ),
        other => parse_err(0, "graph", other.to_string()),
    })?;

    for (i, e) in raw.edges.iter().enumerate() {
        if g.shape(NodeId(e.src)).dims() != e.shape.as_slice() {
            return Err(parse_err(
                edge_line(i),
                "shape",
                format!("declared {:?}, inferred {}", e.shape, g.shape(NodeId(e.src))),
            ));
        }
    }
    Ok(g)
}

use super::{CompGraph, MAX_RANK, NUM_OP_KINDS};

pub const EDGE_FEATURE_DIM: usize = MAX_RANK;
/// Width of the per-graph global attribute; always zero on input.
pub const GLOBAL_FEATURE_DIM: usize = 8;

/// GNN input encoding of one graph.
///
/// Row `i` of `node_features` is the node at position `i` of the graph's
/// topological order. `edge_index` holds `(src_row, dst_row)` pairs aligned
/// with `edge_features`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFeatures {
    pub node_features: Vec<[f64; NUM_OP_KINDS]>,
    pub edge_index: Vec<(usize, usize)>,
    pub edge_features: Vec<[f64; EDGE_FEATURE_DIM]>,
    pub global_feature: [f64; GLOBAL_FEATURE_DIM],
}

impl GraphFeatures {
    pub fn num_nodes(&self) -> usize {
        self.node_features.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_index.len()
    }
}

/// Right-aligns the extents into four slots and divides by `norm`.
pub fn edge_feature(dims: &[usize], norm: f64) -> [f64; EDGE_FEATURE_DIM] {
    let mut out = [0.0; EDGE_FEATURE_DIM];
    let offset = EDGE_FEATURE_DIM - dims.len();
    for (i, &d) in dims.iter().enumerate() {
        out[offset + i] = d as f64 / norm;
    }
    out
}

pub fn featurise(g: &CompGraph, edge_norm: f64) -> GraphFeatures {
    let order = g.topo_order();
    let position: std::collections::BTreeMap<_, _> =
        order.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let node_features = order
        .iter()
        .map(|id| {
            let mut row = [0.0; NUM_OP_KINDS];
            row[g.node(*id).expect("present").kind.index()] = 1.0;
            row
        })
        .collect();
    let edges = g.edges();
    let edge_index = edges
        .iter()
        .map(|e| (position[&e.src], position[&e.dst]))
        .collect();
    let edge_features = edges
        .iter()
        .map(|e| edge_feature(e.shape.dims(), edge_norm))
        .collect();
    GraphFeatures {
        node_features,
        edge_index,
        edge_features,
        global_feature: [0.0; GLOBAL_FEATURE_DIM],
    }
}

//! Structural digest, invariant under node-id relabeling.
//!
//! Each node hashes its kind, attributes, shape and the digests of its
//! operands in port order (sorted for commutative add/mul). The graph digest
//! combines the output digests in order with the sorted multiset of
//! `(node digest, fan-out)` pairs, so shared and duplicated subexpressions
//! are told apart.

use std::collections::BTreeMap;

use super::{AttrValue, CompGraph, NodeId, OpKind};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Digest of the graph with no nodes and no outputs.
pub const EMPTY_GRAPH_DIGEST: u64 = 0x5a3c_41d8_07f1_6c2e;

#[derive(Clone, Copy)]
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(FNV_OFFSET)
    }

    fn bytes(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn finish(self) -> u64 {
        mix(self.0)
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn canonical_hash(g: &CompGraph) -> u64 {
    if g.node_count() == 0 && g.outputs().is_empty() {
        return EMPTY_GRAPH_DIGEST;
    }
    let mut digest: BTreeMap<NodeId, u64> = BTreeMap::new();
    for id in g.topo_order() {
        let n = g.node(*id).expect("present");
        let mut h = Fnv::new();
        h.bytes(n.kind.tag().as_bytes());
        for (k, v) in &n.attrs {
            h.bytes(k.as_bytes());
            match v {
                AttrValue::Int(x) => h.u64(*x as u64),
                AttrValue::Ints(xs) => {
                    h.u64(xs.len() as u64);
                    xs.iter().for_each(|x| h.u64(*x as u64));
                }
            }
        }
        for d in g.shape(*id).dims() {
            h.u64(*d as u64);
        }
        let mut operands: Vec<u64> = n.inputs.iter().map(|s| digest[s]).collect();
        if matches!(n.kind, OpKind::Add | OpKind::Mul) {
            operands.sort_unstable();
        }
        for d in operands {
            h.u64(d);
        }
        digest.insert(*id, h.finish());
    }
    let consumers = g.consumers();
    let mut multiset: Vec<(u64, usize)> = digest
        .iter()
        .map(|(id, d)| (*d, consumers[id].len()))
        .collect();
    multiset.sort_unstable();

    let mut h = Fnv::new();
    h.u64(g.outputs().len() as u64);
    for o in g.outputs() {
        h.u64(digest[o]);
    }
    h.u64(multiset.len() as u64);
    for (d, fanout) in multiset {
        h.u64(d);
        h.u64(fanout as u64);
    }
    h.finish()
}

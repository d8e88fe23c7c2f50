//! Declarative rewrite rules, subgraph matching and candidate generation.
//!
//! A rule pairs a source [`Pattern`] with a [`TargetPattern`] over the same
//! placeholders. Matching is backtracking subgraph isomorphism seeded on the
//! pattern operator that is rarest in the host graph; the other pattern nodes
//! are reached through operand slots or consumer lists of already-bound
//! nodes, so each extension step has very few choices.

pub mod fixtures;
mod rules;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use thiserror::Error;

use crate::graph::{canonical_hash, Attrs, CompGraph, GraphError, Node, NodeId, OpKind, TensorShape};

pub use rules::{build_registry, registry};

/// Maximum number of candidates; one more slot is reserved for No-Op.
pub const DEFAULT_MAX_CANDIDATES: usize = 63;

#[derive(Debug, Clone)]
pub enum PatternNode {
    /// Boundary placeholder; binds any node.
    Var,
    Op { kind: OpKind, inputs: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct Pattern {
    nodes: Vec<PatternNode>,
    outputs: Vec<usize>,
}

impl Pattern {
    pub fn nodes(&self) -> &[PatternNode] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    pub fn vars(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i], PatternNode::Var))
            .collect()
    }

    pub fn op_count(&self) -> usize {
        self.nodes.len() - self.vars().len()
    }
}

#[derive(Debug, Default)]
pub struct PatternBuilder {
    nodes: Vec<PatternNode>,
}

impl PatternBuilder {
    pub fn var(&mut self) -> usize {
        self.nodes.push(PatternNode::Var);
        self.nodes.len() - 1
    }

    pub fn op(&mut self, kind: OpKind, inputs: &[usize]) -> usize {
        assert_eq!(inputs.len(), kind.arity(), "pattern arity for {kind}");
        self.nodes.push(PatternNode::Op {
            kind,
            inputs: inputs.to_vec(),
        });
        self.nodes.len() - 1
    }

    pub fn build(self, outputs: &[usize]) -> Pattern {
        Pattern {
            nodes: self.nodes,
            outputs: outputs.to_vec(),
        }
    }
}

/// Read access to the graph nodes bound by a match.
pub struct Binding<'a> {
    pub graph: &'a CompGraph,
    pub mapping: &'a [NodeId],
}

impl Binding<'_> {
    pub fn node(&self, p: usize) -> &Node {
        self.graph.node(self.mapping[p]).expect("bound node exists")
    }

    pub fn shape(&self, p: usize) -> &TensorShape {
        self.graph.shape(self.mapping[p])
    }

    pub fn dims(&self, p: usize) -> &[usize] {
        self.shape(p).dims()
    }

    pub fn attrs(&self, p: usize) -> Attrs {
        self.node(p).attrs.clone()
    }

    pub fn is_constant(&self, p: usize) -> bool {
        self.graph.is_constant(self.mapping[p])
    }
}

pub type AttrFn = Box<dyn Fn(&Binding) -> Attrs + Send + Sync>;
pub type Guard = Box<dyn Fn(&Binding) -> bool + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRef {
    /// A source-pattern placeholder, by source pattern index.
    Var(usize),
    /// A node created by the target, by target index.
    Node(usize),
}

pub struct TargetNode {
    pub kind: OpKind,
    pub inputs: Vec<TargetRef>,
    pub attrs: AttrFn,
}

pub struct TargetPattern {
    nodes: Vec<TargetNode>,
    outputs: Vec<TargetRef>,
}

impl TargetPattern {
    pub fn nodes(&self) -> &[TargetNode] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[TargetRef] {
        &self.outputs
    }

    pub fn vars(&self) -> BTreeSet<usize> {
        self.nodes
            .iter()
            .flat_map(|n| n.inputs.iter())
            .chain(self.outputs.iter())
            .filter_map(|r| match r {
                TargetRef::Var(v) => Some(*v),
                TargetRef::Node(_) => None,
            })
            .collect()
    }
}

#[derive(Default)]
pub struct TargetBuilder {
    nodes: Vec<TargetNode>,
}

impl TargetBuilder {
    pub fn op(
        &mut self,
        kind: OpKind,
        inputs: &[TargetRef],
        attrs: impl Fn(&Binding) -> Attrs + Send + Sync + 'static,
    ) -> TargetRef {
        assert_eq!(inputs.len(), kind.arity(), "target arity for {kind}");
        self.nodes.push(TargetNode {
            kind,
            inputs: inputs.to_vec(),
            attrs: Box::new(attrs),
        });
        TargetRef::Node(self.nodes.len() - 1)
    }

    pub fn build(self, outputs: &[TargetRef]) -> TargetPattern {
        TargetPattern {
            nodes: self.nodes,
            outputs: outputs.to_vec(),
        }
    }
}

pub fn no_attrs(_: &Binding) -> Attrs {
    Attrs::new()
}

pub struct RewriteRule {
    pub rule_id: &'static str,
    pub description: &'static str,
    pub source: Pattern,
    pub target: TargetPattern,
    pub guard: Guard,
}

impl fmt::Debug for RewriteRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RewriteRule")
            .field("rule_id", &self.rule_id)
            .field("source_ops", &self.source.op_count())
            .field("target_ops", &self.target.nodes.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Match {
    pub rule_id: &'static str,
    /// Graph node bound to each source-pattern node, by pattern index.
    pub mapping: Vec<NodeId>,
    pub anchor: NodeId,
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub graph: CompGraph,
    pub rule_id: &'static str,
    pub anchor: NodeId,
    pub digest: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewriteError {
    #[error("rule {rule_id} produced an inconsistent graph: {source}")]
    ShapeMismatch {
        rule_id: &'static str,
        source: GraphError,
    },
    #[error("match was produced by rule {found}, not {expected}")]
    RuleMismatch {
        expected: &'static str,
        found: &'static str,
    },
}

enum Step {
    Seed,
    InputOf { parent: usize, port: usize },
    ConsumerOf { parent: usize, port: usize },
}

impl RewriteRule {
    /// Every embedding of the source pattern satisfying the guard and the
    /// interior-use restriction, ordered by anchor then mapping.
    pub fn matches(&self, g: &CompGraph) -> Vec<Match> {
        let pat = &self.source;
        let Some(plan) = self.plan(g) else {
            return Vec::new();
        };
        let consumers = g.consumers();
        let mut results = Vec::new();
        let mut mapping: Vec<Option<NodeId>> = vec![None; pat.nodes.len()];
        let mut used: HashSet<NodeId> = HashSet::new();
        self.extend(g, &consumers, &plan, 0, &mut mapping, &mut used, &mut results);
        results.sort_by(|a, b| (a.anchor, &a.mapping).cmp(&(b.anchor, &b.mapping)));
        results.dedup();
        results
    }

    fn plan(&self, g: &CompGraph) -> Option<Vec<(usize, Step)>> {
        let pat = &self.source;
        let mut counts: BTreeMap<OpKind, usize> = BTreeMap::new();
        for n in g.nodes() {
            *counts.entry(n.kind).or_default() += 1;
        }
        let seed = (0..pat.nodes.len())
            .filter_map(|i| match &pat.nodes[i] {
                PatternNode::Op { kind, .. } => Some((counts.get(kind).copied().unwrap_or(0), i)),
                PatternNode::Var => None,
            })
            .min()?;
        if seed.0 == 0 {
            return None;
        }
        let mut plan = vec![(seed.1, Step::Seed)];
        let mut placed = vec![false; pat.nodes.len()];
        placed[seed.1] = true;
        let mut cursor = 0;
        while cursor < plan.len() {
            let p = plan[cursor].0;
            cursor += 1;
            if let PatternNode::Op { inputs, .. } = &pat.nodes[p] {
                for (port, &q) in inputs.iter().enumerate() {
                    if !placed[q] {
                        placed[q] = true;
                        plan.push((q, Step::InputOf { parent: p, port }));
                    }
                }
            }
            for (q, node) in pat.nodes.iter().enumerate() {
                if let PatternNode::Op { inputs, .. } = node {
                    for (port, &src) in inputs.iter().enumerate() {
                        if src == p && !placed[q] {
                            placed[q] = true;
                            plan.push((q, Step::ConsumerOf { parent: p, port }));
                        }
                    }
                }
            }
        }
        assert!(
            placed.iter().all(|&b| b),
            "pattern of {} is not connected",
            self.rule_id
        );
        Some(plan)
    }

    #[allow(clippy::too_many_arguments)]
    fn extend(
        &self,
        g: &CompGraph,
        consumers: &BTreeMap<NodeId, Vec<(NodeId, usize)>>,
        plan: &[(usize, Step)],
        depth: usize,
        mapping: &mut Vec<Option<NodeId>>,
        used: &mut HashSet<NodeId>,
        results: &mut Vec<Match>,
    ) {
        if depth == plan.len() {
            let full: Vec<NodeId> = mapping.iter().map(|m| m.expect("bound")).collect();
            if self.accepts(g, consumers, &full) {
                let anchor = *full.iter().min().expect("non-empty pattern");
                results.push(Match {
                    rule_id: self.rule_id,
                    mapping: full,
                    anchor,
                });
            }
            return;
        }
        let (p, step) = &plan[depth];
        let choices: Vec<NodeId> = match step {
            Step::Seed => {
                let PatternNode::Op { kind, .. } = &self.source.nodes[*p] else {
                    unreachable!("seed is an operator")
                };
                g.nodes().filter(|n| n.kind == *kind).map(|n| n.id).collect()
            }
            Step::InputOf { parent, port } => {
                let host = mapping[*parent].expect("parent bound");
                vec![g.node(host).expect("present").inputs[*port]]
            }
            Step::ConsumerOf { parent, port } => {
                let host = mapping[*parent].expect("parent bound");
                consumers[&host]
                    .iter()
                    .filter(|(_, k)| k == port)
                    .map(|(c, _)| *c)
                    .collect()
            }
        };
        for cand in choices {
            if used.contains(&cand) || !self.consistent(g, mapping, *p, cand) {
                continue;
            }
            mapping[*p] = Some(cand);
            used.insert(cand);
            self.extend(g, consumers, plan, depth + 1, mapping, used, results);
            used.remove(&cand);
            mapping[*p] = None;
        }
    }

    fn consistent(&self, g: &CompGraph, mapping: &[Option<NodeId>], p: usize, cand: NodeId) -> bool {
        let host = g.node(cand).expect("present");
        if let PatternNode::Op { kind, inputs } = &self.source.nodes[p] {
            if host.kind != *kind {
                return false;
            }
            for (port, &q) in inputs.iter().enumerate() {
                if let Some(bound) = mapping[q] {
                    if host.inputs[port] != bound {
                        return false;
                    }
                }
            }
        }
        for (r, node) in self.source.nodes.iter().enumerate() {
            if let (PatternNode::Op { inputs, .. }, Some(bound_r)) = (node, mapping[r]) {
                let host_r = g.node(bound_r).expect("present");
                for (port, &q) in inputs.iter().enumerate() {
                    if q == p && host_r.inputs[port] != cand {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn accepts(
        &self,
        g: &CompGraph,
        consumers: &BTreeMap<NodeId, Vec<(NodeId, usize)>>,
        mapping: &[NodeId],
    ) -> bool {
        let pat = &self.source;
        let ops: BTreeSet<NodeId> = (0..pat.nodes.len())
            .filter(|&i| matches!(pat.nodes[i], PatternNode::Op { .. }))
            .map(|i| mapping[i])
            .collect();
        // Interior nodes may only feed other matched operators.
        for (i, node) in pat.nodes.iter().enumerate() {
            if matches!(node, PatternNode::Op { .. }) && !pat.outputs.contains(&i) {
                let host = mapping[i];
                if g.is_output(host) || consumers[&host].iter().any(|(c, _)| !ops.contains(c)) {
                    return false;
                }
            }
        }
        // A placeholder downstream of the match would close a cycle.
        let mut frontier: Vec<NodeId> = ops.iter().copied().collect();
        let mut downstream: BTreeSet<NodeId> = BTreeSet::new();
        while let Some(n) = frontier.pop() {
            for (c, _) in &consumers[&n] {
                if !ops.contains(c) && downstream.insert(*c) {
                    frontier.push(*c);
                }
            }
        }
        if pat.vars().iter().any(|&v| downstream.contains(&mapping[v])) {
            return false;
        }
        (self.guard)(&Binding { graph: g, mapping })
    }

    /// Replaces the matched operators by an instance of the target.
    pub fn apply(&self, g: &CompGraph, m: &Match) -> Result<CompGraph, RewriteError> {
        if m.rule_id != self.rule_id {
            return Err(RewriteError::RuleMismatch {
                expected: self.rule_id,
                found: m.rule_id,
            });
        }
        let binding = Binding {
            graph: g,
            mapping: &m.mapping,
        };
        let removed: BTreeSet<NodeId> = (0..self.source.nodes.len())
            .filter(|&i| matches!(self.source.nodes[i], PatternNode::Op { .. }))
            .map(|i| m.mapping[i])
            .collect();
        let base = g.max_id().map(|id| id.0 + 1).unwrap_or(0);
        let resolve = |r: &TargetRef| match r {
            TargetRef::Var(v) => m.mapping[*v],
            TargetRef::Node(j) => NodeId(base + *j as u32),
        };
        let mut replace: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        for (src_out, tgt_out) in self.source.outputs.iter().zip(&self.target.outputs) {
            replace.insert(m.mapping[*src_out], resolve(tgt_out));
        }
        let redirect = |id: NodeId| replace.get(&id).copied().unwrap_or(id);

        let mut nodes: Vec<Node> = g
            .nodes()
            .filter(|n| !removed.contains(&n.id))
            .map(|n| Node {
                id: n.id,
                kind: n.kind,
                attrs: n.attrs.clone(),
                inputs: n.inputs.iter().map(|&i| redirect(i)).collect(),
            })
            .collect();
        for (j, t) in self.target.nodes.iter().enumerate() {
            nodes.push(Node {
                id: NodeId(base + j as u32),
                kind: t.kind,
                attrs: (t.attrs)(&binding),
                inputs: t.inputs.iter().map(resolve).collect(),
            });
        }
        let outputs = g.outputs().iter().map(|&o| redirect(o)).collect();
        CompGraph::new(nodes, outputs).map_err(|source| RewriteError::ShapeMismatch {
            rule_id: self.rule_id,
            source,
        })
    }
}

pub fn match_rule(g: &CompGraph, rule: &RewriteRule) -> Vec<Match> {
    rule.matches(g)
}

pub fn apply_match(g: &CompGraph, rule: &RewriteRule, m: &Match) -> Result<CompGraph, RewriteError> {
    rule.apply(g, m)
}

/// Applies every rule at every match location.
///
/// Order: rule registry order, then match order. Candidates whose digest was
/// already produced are dropped, and the list is cut at `max_candidates`.
pub fn generate_candidates(
    g: &CompGraph,
    rules: &[RewriteRule],
    max_candidates: usize,
) -> Result<Vec<Candidate>, RewriteError> {
    let mut seen: HashSet<u64> = HashSet::new();
    let mut out = Vec::new();
    for rule in rules {
        for m in rule.matches(g) {
            let graph = rule.apply(g, &m)?;
            let digest = canonical_hash(&graph);
            if !seen.insert(digest) {
                continue;
            }
            out.push(Candidate {
                graph,
                rule_id: rule.rule_id,
                anchor: m.anchor,
                digest,
            });
            if out.len() == max_candidates {
                return Ok(out);
            }
        }
    }
    Ok(out)
}

pub fn find_rule<'a>(rules: &'a [RewriteRule], rule_id: &str) -> Option<&'a RewriteRule> {
    rules.iter().find(|r| r.rule_id == rule_id)
}

//! Partition prunable channels into groups of coupled-channel sets.
//!
//! Operators are visited once in topological order; the first seed channel of
//! each group is propagated, the per-slot index transform is derived from a
//! second (and tail-verified by a third) propagation, and all remaining
//! members are instantiated by index substitution. Groups whose transforms
//! are not index-homogeneous (grouped convolutions couple sibling indices
//! across conv groups) fall back to per-member propagation.

use crate::error::{Error, Result};
use crate::graph::{CGNodeKind, ComputationalGraph, NodeId};
use crate::mask::{coupled_channels, seed_axis, Mask, MaskSet, PropagationStats};
use crate::onnx::OpType;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap, HashSet};

/// One (node, axis, index) triple of a coupled-channel set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MaskEntry {
    pub node: NodeId,
    pub axis: usize,
    pub index: usize,
}

/// A set of channels that must be deleted atomically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CoupledChannelSet {
    /// Sorted canonical entry list.
    pub entries: Vec<MaskEntry>,
}

impl CoupledChannelSet {
    pub fn from_mask_set(set: &MaskSet) -> Self {
        let mut entries = Vec::with_capacity(set.index_count());
        for (node, axis, indices) in set.iter() {
            for &index in indices {
                entries.push(MaskEntry { node, axis, index });
            }
        }
        entries.sort_unstable();
        Self { entries }
    }

    pub fn slots(&self) -> Vec<(NodeId, usize)> {
        let mut slots: Vec<(NodeId, usize)> =
            self.entries.iter().map(|e| (e.node, e.axis)).collect();
        slots.sort_unstable();
        slots.dedup();
        slots
    }

    pub fn to_mask_set(&self) -> MaskSet {
        let mut set = MaskSet::new();
        for e in &self.entries {
            set.insert(&Mask::single(e.node, e.axis, e.index));
        }
        set
    }
}

/// All coupled-channel sets sharing one structural pattern.
#[derive(Debug, Clone)]
pub struct Group {
    pub seed_op: NodeId,
    pub seed_param: NodeId,
    pub seed_axis: usize,
    /// The (node, axis) slots every member touches.
    pub pattern: Vec<(NodeId, usize)>,
    /// Deduplicated members, ordered by lowest seed channel.
    pub members: Vec<CoupledChannelSet>,
    /// Seed channels covered by each member (more than one when grouped
    /// convolutions alias sibling channels into one set).
    pub member_seeds: Vec<Vec<usize>>,
    /// Whether members were instantiated by substitution or propagated.
    pub substituted: bool,
}

/// A seed that was excluded because its coupled set touches the model
/// boundary (graph inputs/outputs, e.g. classifier logits).
#[derive(Debug, Clone)]
pub struct ProtectedSeed {
    pub op: NodeId,
    pub param: NodeId,
    pub axis: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct GroupSet {
    pub groups: Vec<Group>,
    pub protected: Vec<ProtectedSeed>,
    pub stats: PropagationStats,
}

impl GroupSet {
    pub fn member(&self, group: usize, member: usize) -> &CoupledChannelSet {
        &self.groups[group].members[member]
    }

    pub fn total_members(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }
}

/// The seedable parameter of an operator: (param node, output axis, extent).
pub fn seed_of(cg: &ComputationalGraph, op: NodeId) -> Option<(NodeId, usize, usize)> {
    let spec = cg.op_spec(op);
    if !matches!(spec.op_type, OpType::Conv | OpType::Gemm | OpType::MatMul) {
        return None;
    }
    let port = cg.op_input_ports(op).iter().find(|p| p.slot == 1)?;
    let param = port.value;
    if cg.node(param).kind != CGNodeKind::Parameter {
        return None;
    }
    let axis = seed_axis(cg, op, param)?;
    let extent = cg.node(param).shape[axis];
    Some((param, axis, extent))
}

/// Per-slot affine block transform: member k occupies
/// [start + k*len, start + (k+1)*len) on the slot's axis.
#[derive(Debug, Clone)]
struct SlotTransform {
    node: NodeId,
    axis: usize,
    start: usize,
    len: usize,
}

fn contiguous_block(indices: &[usize]) -> Option<(usize, usize)> {
    let first = *indices.first()?;
    for (i, &v) in indices.iter().enumerate() {
        if v != first + i {
            return None;
        }
    }
    Some((first, indices.len()))
}

fn derive_transforms(cc0: &MaskSet, cc1: &MaskSet) -> Option<Vec<SlotTransform>> {
    let slots0: Vec<_> = cc0.iter().map(|(n, a, _)| (n, a)).collect();
    let slots1: Vec<_> = cc1.iter().map(|(n, a, _)| (n, a)).collect();
    if slots0 != slots1 {
        return None;
    }
    let mut transforms = Vec::with_capacity(slots0.len());
    for ((node, axis, set0), (_, _, set1)) in cc0.iter().zip(cc1.iter()) {
        let v0: Vec<usize> = set0.iter().copied().collect();
        let v1: Vec<usize> = set1.iter().copied().collect();
        let (start0, len0) = contiguous_block(&v0)?;
        let (start1, len1) = contiguous_block(&v1)?;
        if len0 != len1 || start1 != start0 + len0 {
            return None;
        }
        transforms.push(SlotTransform { node, axis, start: start0, len: len0 });
    }
    Some(transforms)
}

fn instantiate(transforms: &[SlotTransform], k: usize) -> CoupledChannelSet {
    let mut entries = Vec::new();
    for t in transforms {
        let base = t.start + k * t.len;
        for i in 0..t.len {
            entries.push(MaskEntry { node: t.node, axis: t.axis, index: base + i });
        }
    }
    entries.sort_unstable();
    CoupledChannelSet { entries }
}

fn touches_boundary(cg: &ComputationalGraph, set: &MaskSet) -> Option<String> {
    for (node, _, _) in set.iter() {
        if cg.is_graph_input(node) {
            return Some(format!("couples to graph input '{}'", cg.node(node).name));
        }
        if cg.is_graph_output(node) {
            return Some(format!("couples to graph output '{}'", cg.node(node).name));
        }
    }
    None
}

/// Alg. 2: one group per unvisited seedable operator.
pub fn group_channels(cg: &ComputationalGraph) -> Result<GroupSet> {
    let mut stats = PropagationStats::default();
    let mut visited: HashSet<NodeId> = HashSet::new();
    let mut groups: Vec<Group> = Vec::new();
    let mut protected: Vec<ProtectedSeed> = Vec::new();

    // seed slot -> operator, for marking analyzed operators
    let mut seed_slot_to_op: HashMap<(NodeId, usize), NodeId> = HashMap::new();
    for &op in cg.operator_nodes() {
        if let Some((param, axis, _)) = seed_of(cg, op) {
            seed_slot_to_op.insert((param, axis), op);
        }
    }

    // global disjointness guard
    let mut claimed: HashMap<MaskEntry, (usize, usize)> = HashMap::new();

    for &op in cg.operator_nodes() {
        if visited.contains(&op) {
            continue;
        }
        let Some((param, axis, extent)) = seed_of(cg, op) else {
            continue;
        };
        visited.insert(op);

        let propagate = |k: usize, stats: &mut PropagationStats| -> Result<MaskSet> {
            coupled_channels(cg, param, &Mask::single(param, axis, k), stats).map_err(|e| {
                Error::Internal(format!(
                    "propagation from seed '{}' channel {} failed: {}",
                    cg.node(param).name,
                    k,
                    e
                ))
            })
        };

        let cc0 = propagate(0, &mut stats)?;

        let mark_covered_seeds = |set_slots: &[(NodeId, usize)], visited: &mut HashSet<NodeId>| {
            for slot in set_slots {
                if let Some(&covered_op) = seed_slot_to_op.get(slot) {
                    visited.insert(covered_op);
                }
            }
        };

        if let Some(reason) = touches_boundary(cg, &cc0) {
            let member0 = CoupledChannelSet::from_mask_set(&cc0);
            mark_covered_seeds(&member0.slots(), &mut visited);
            protected.push(ProtectedSeed { op, param, axis, reason });
            continue;
        }

        // members as mask sets, one per seed channel
        let mut substituted = false;
        let member_sets: Vec<CoupledChannelSet> = if extent == 1 {
            vec![CoupledChannelSet::from_mask_set(&cc0)]
        } else {
            let cc1 = propagate(1, &mut stats)?;
            let transforms = derive_transforms(&cc0, &cc1);
            let analytic = match transforms {
                Some(ts) => {
                    // verify the tail member before trusting the transform
                    let last = propagate(extent - 1, &mut stats)?;
                    if instantiate(&ts, extent - 1) == CoupledChannelSet::from_mask_set(&last) {
                        Some(ts)
                    } else {
                        None
                    }
                }
                None => None,
            };
            match analytic {
                Some(ts) => {
                    substituted = true;
                    (0..extent).map(|k| instantiate(&ts, k)).collect()
                }
                None => {
                    let mut members = Vec::with_capacity(extent);
                    members.push(CoupledChannelSet::from_mask_set(&cc0));
                    for k in 1..extent {
                        members.push(CoupledChannelSet::from_mask_set(&propagate(k, &mut stats)?));
                    }
                    members
                }
            }
        };

        // dedup aliased members (grouped conv siblings)
        let mut unique: Vec<CoupledChannelSet> = Vec::new();
        let mut member_seeds: Vec<Vec<usize>> = Vec::new();
        let mut index_of: BTreeMap<CoupledChannelSet, usize> = BTreeMap::new();
        for (k, set) in member_sets.into_iter().enumerate() {
            match index_of.get(&set) {
                Some(&i) => member_seeds[i].push(k),
                None => {
                    index_of.insert(set.clone(), unique.len());
                    member_seeds.push(vec![k]);
                    unique.push(set);
                }
            }
        }

        let pattern = unique[0].slots();
        for m in &unique[1..] {
            if m.slots() != pattern {
                return Err(Error::Internal(format!(
                    "group seeded at '{}' has members with diverging slot patterns",
                    cg.node(param).name
                )));
            }
        }
        mark_covered_seeds(&pattern, &mut visited);

        let gi = groups.len();
        for (mi, m) in unique.iter().enumerate() {
            for &e in &m.entries {
                if let Some(&(og, om)) = claimed.get(&e) {
                    return Err(Error::Internal(format!(
                        "entry ({}, axis {}, {}) claimed by groups {}:{} and {}:{}",
                        cg.node(e.node).name,
                        e.axis,
                        e.index,
                        og,
                        om,
                        gi,
                        mi
                    )));
                }
                claimed.insert(e, (gi, mi));
            }
        }

        groups.push(Group {
            seed_op: op,
            seed_param: param,
            seed_axis: axis,
            pattern,
            members: unique,
            member_seeds,
            substituted,
        });
    }

    Ok(GroupSet { groups, protected, stats })
}

/// Post-hoc validation of a GroupSet. With `thorough`, every member is also
/// compared against a fresh propagation (quadratic; fixtures only).
pub fn verify_group_set(
    cg: &ComputationalGraph,
    gs: &GroupSet,
    thorough: bool,
) -> GroupSetReport {
    let mut violations = Vec::new();

    // disjointness
    let mut seen: HashMap<MaskEntry, (usize, usize)> = HashMap::new();
    for (gi, g) in gs.groups.iter().enumerate() {
        for (mi, m) in g.members.iter().enumerate() {
            for &e in &m.entries {
                if let Some(&(og, om)) = seen.get(&e) {
                    violations.push(format!(
                        "disjointness: ({}, axis {}, {}) in members {}:{} and {}:{}",
                        cg.node(e.node).name,
                        e.axis,
                        e.index,
                        og,
                        om,
                        gi,
                        mi
                    ));
                } else {
                    seen.insert(e, (gi, mi));
                }
            }
        }
    }

    // coverage of every seed channel not excluded by a protected group
    let mut protected_slots: HashSet<(NodeId, usize)> = HashSet::new();
    for p in &gs.protected {
        protected_slots.insert((p.param, p.axis));
        let mut s = PropagationStats::default();
        if let Ok(set) = coupled_channels(cg, p.param, &Mask::single(p.param, p.axis, 0), &mut s) {
            for (node, axis, _) in set.iter() {
                protected_slots.insert((node, axis));
            }
        }
    }
    for &op in cg.operator_nodes() {
        let Some((param, axis, extent)) = seed_of(cg, op) else { continue };
        if protected_slots.contains(&(param, axis)) {
            continue;
        }
        for k in 0..extent {
            let entry = MaskEntry { node: param, axis, index: k };
            if !seen.contains_key(&entry) {
                violations.push(format!(
                    "coverage: channel {} of '{}' axis {} is in no member",
                    k,
                    cg.node(param).name,
                    axis
                ));
            }
        }
    }

    // pattern conformance and (optionally) freshness
    for (gi, g) in gs.groups.iter().enumerate() {
        for (mi, m) in g.members.iter().enumerate() {
            if m.slots() != g.pattern {
                violations.push(format!("pattern: member {}:{} deviates from the group pattern", gi, mi));
            }
            if m.entries.is_empty() {
                violations.push(format!("empty member {}:{}", gi, mi));
            }
        }
        if thorough {
            for (mi, seeds) in g.member_seeds.iter().enumerate() {
                let mut stats = PropagationStats::default();
                let fresh = coupled_channels(
                    cg,
                    g.seed_param,
                    &Mask::single(g.seed_param, g.seed_axis, seeds[0]),
                    &mut stats,
                );
                match fresh {
                    Ok(set) => {
                        if CoupledChannelSet::from_mask_set(&set) != g.members[mi] {
                            violations.push(format!(
                                "freshness: member {}:{} differs from a fresh propagation",
                                gi, mi
                            ));
                        }
                    }
                    Err(e) => violations.push(format!("freshness: propagation failed: {}", e)),
                }
            }
        }
    }

    GroupSetReport { violations }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupSetReport {
    pub violations: Vec<String>,
}

impl GroupSetReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

// --- JSON report (External Interfaces) ---

#[derive(Serialize)]
struct SlotJson {
    name: String,
    kind: &'static str,
    axis: usize,
}

#[derive(Serialize)]
struct GroupJson {
    seed_op: String,
    seed_parameter: String,
    seed_axis: usize,
    member_count: usize,
    substituted: bool,
    pattern: Vec<SlotJson>,
    members: Vec<Vec<(String, usize, usize)>>,
}

#[derive(Serialize)]
struct ProtectedJson {
    seed_op: String,
    seed_parameter: String,
    reason: String,
}

#[derive(Serialize)]
struct GroupSetJson {
    format: &'static str,
    group_count: usize,
    member_count: usize,
    edge_visits: u64,
    groups: Vec<GroupJson>,
    protected: Vec<ProtectedJson>,
}

/// Serialize the group report consumed by `analyze` and by score tooling.
pub fn group_report_json(cg: &ComputationalGraph, gs: &GroupSet) -> serde_json::Value {
    let kind_str = |id: NodeId| match cg.node(id).kind {
        CGNodeKind::Parameter => "parameter",
        CGNodeKind::Data => "data",
        CGNodeKind::Operator => "operator",
    };
    let report = GroupSetJson {
        format: "spa-groups-v1",
        group_count: gs.groups.len(),
        member_count: gs.total_members(),
        edge_visits: gs.stats.edge_visits,
        groups: gs
            .groups
            .iter()
            .map(|g| GroupJson {
                seed_op: cg.node(g.seed_op).name.clone(),
                seed_parameter: cg.node(g.seed_param).name.clone(),
                seed_axis: g.seed_axis,
                member_count: g.members.len(),
                substituted: g.substituted,
                pattern: g
                    .pattern
                    .iter()
                    .map(|&(n, a)| SlotJson {
                        name: cg.node(n).name.clone(),
                        kind: kind_str(n),
                        axis: a,
                    })
                    .collect(),
                members: g
                    .members
                    .iter()
                    .map(|m| {
                        m.entries
                            .iter()
                            .map(|e| (cg.node(e.node).name.clone(), e.axis, e.index))
                            .collect()
                    })
                    .collect(),
            })
            .collect(),
        protected: gs
            .protected
            .iter()
            .map(|p| ProtectedJson {
                seed_op: cg.node(p.op).name.clone(),
                seed_parameter: cg.node(p.param).name.clone(),
                reason: p.reason.clone(),
            })
            .collect(),
    };
    serde_json::to_value(report).expect("group report serialization")
}

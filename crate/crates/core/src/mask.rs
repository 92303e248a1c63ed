//! Coupled-channel discovery by mask propagation.
//!
//! A mask marks channel indices on one axis of one value. Per-operator rules
//! translate a mask on one connected value into masks on the operator's other
//! values; `coupled_channels` runs the worklist fixpoint over those rules.
//! Rules that do not exist fail loudly — an operator axis without a rule is a
//! hard error, never a silent skip.

use crate::error::{Error, Result};
use crate::graph::{CGNodeKind, ComputationalGraph, NodeId};
use crate::onnx::OpType;
use std::collections::BTreeMap;
use std::collections::BTreeSet;

/// Channel marker: a set of indices on one axis of one value node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub node: NodeId,
    pub axis: usize,
    /// Sorted, unique, non-empty.
    pub indices: Vec<usize>,
}

impl Mask {
    pub fn new(node: NodeId, axis: usize, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { node, axis, indices }
    }

    pub fn single(node: NodeId, axis: usize, index: usize) -> Self {
        Self { node, axis, indices: vec![index] }
    }
}

/// At most one index set per (node, axis); merging is set union.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskSet {
    entries: BTreeMap<(NodeId, usize), BTreeSet<usize>>,
}

impl MaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Union the mask in; returns the indices that were actually new.
    pub fn insert(&mut self, mask: &Mask) -> Vec<usize> {
        let set = self.entries.entry((mask.node, mask.axis)).or_default();
        let mut fresh = Vec::new();
        for &i in &mask.indices {
            if set.insert(i) {
                fresh.push(i);
            }
        }
        fresh
    }

    pub fn get(&self, node: NodeId, axis: usize) -> Option<&BTreeSet<usize>> {
        self.entries.get(&(node, axis))
    }

    pub fn contains(&self, node: NodeId, axis: usize, index: usize) -> bool {
        self.get(node, axis).is_some_and(|s| s.contains(&index))
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, usize, &BTreeSet<usize>)> {
        self.entries.iter().map(|(&(n, a), s)| (n, a, s))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_count(&self) -> usize {
        self.entries.values().map(|s| s.len()).sum()
    }

    pub fn merge(&mut self, other: &MaskSet) {
        for (n, a, s) in other.iter() {
            self.entries.entry((n, a)).or_default().extend(s.iter().copied());
        }
    }
}

/// Instrumentation for the complexity contract: one visit per traversed
/// value-operator link.
#[derive(Debug, Clone, Copy, Default)]
pub struct PropagationStats {
    pub edge_visits: u64,
    pub propagations: u64,
}

/// The prunable output axis of a weight parameter consumed by `op`:
/// Conv weights prune axis 0, Gemm weights the output-feature axis under
/// transB, MatMul weights axis 1.
pub fn seed_axis(cg: &ComputationalGraph, op: NodeId, param: NodeId) -> Option<usize> {
    let spec = cg.op_spec(op);
    let weight_port = cg.op_input_ports(op).iter().find(|p| p.slot == 1)?;
    if weight_port.value != param {
        return None;
    }
    match spec.op_type {
        OpType::Conv => Some(0),
        OpType::Gemm => Some(if spec.attr_i64("transB", 0) != 0 { 0 } else { 1 }),
        OpType::MatMul => Some(1),
        _ => None,
    }
}

/// Build a single-channel mask on a parameter node's prunable output axis.
pub fn create_mask(cg: &ComputationalGraph, node: NodeId, channel: usize) -> Result<Mask> {
    let n = cg.node(node);
    if n.kind != CGNodeKind::Parameter {
        return Err(Error::NotPrunable { node: n.name.clone() });
    }
    let mut axis = None;
    for &op in &cg.neighbors(node)? {
        if let Some(a) = seed_axis(cg, op, node) {
            axis = Some(a);
            break;
        }
    }
    let axis = axis.ok_or_else(|| Error::NotPrunable { node: n.name.clone() })?;
    let extent = n.shape[axis];
    if channel >= extent {
        return Err(Error::ChannelRange {
            node: n.name.clone(),
            axis,
            channel,
            extent,
        });
    }
    Ok(Mask::single(node, axis, channel))
}

fn no_rule(cg: &ComputationalGraph, op: NodeId, value: NodeId, axis: usize) -> Error {
    let spec = cg.op_spec(op);
    Error::NoRule {
        op_type: spec.op_type.as_str().to_string(),
        slot: cg.node(value).name.clone(),
        axis,
        node: spec.name.clone(),
    }
}

/// Which role an incoming value plays for an operator, with all occurrences
/// (a value may feed several slots).
fn input_slots(cg: &ComputationalGraph, op: NodeId, value: NodeId) -> Vec<usize> {
    cg.op_input_ports(op)
        .iter()
        .filter(|p| p.value == value)
        .map(|p| p.slot)
        .collect()
}

fn is_output(cg: &ComputationalGraph, op: NodeId, value: NodeId) -> bool {
    cg.op_output_ports(op).iter().any(|p| p.value == value)
}

fn port_value(cg: &ComputationalGraph, op: NodeId, slot: usize) -> Option<NodeId> {
    cg.op_input_ports(op).iter().find(|p| p.slot == slot).map(|p| p.value)
}

fn output_value(cg: &ComputationalGraph, op: NodeId) -> NodeId {
    cg.op_output_ports(op)[0].value
}

/// Logical Gemm coordinates, written as the (variable, dim) pairs of the
/// standard rule table with X:(M,K), W:(K,N), B broadcast to (M,N), Y:(M,N).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GemmVar {
    X,
    W,
    B,
    Y,
}

struct GemmCtx {
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    y: NodeId,
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
}

impl GemmCtx {
    fn build(cg: &ComputationalGraph, op: NodeId) -> Result<Self> {
        let spec = cg.op_spec(op);
        let x = port_value(cg, op, 0).ok_or_else(|| Error::Internal("Gemm without input".into()))?;
        let w = port_value(cg, op, 1).ok_or_else(|| Error::Internal("Gemm without weight".into()))?;
        let b = port_value(cg, op, 2);
        let y = output_value(cg, op);
        let trans_a = spec.attr_i64("transA", 0) != 0;
        let trans_b = spec.attr_i64("transB", 0) != 0;
        let yshape = &cg.node(y).shape;
        Ok(Self { x, w, b, y, trans_a, trans_b, m: yshape[0], n: yshape[1] })
    }

    /// Physical (value, axis) -> logical (var, dim in the rule table).
    fn to_logical(&self, cg: &ComputationalGraph, value: NodeId, axis: usize) -> Option<(GemmVar, usize)> {
        if value == self.x {
            let m_axis = if self.trans_a { 1 } else { 0 };
            return Some((GemmVar::X, if axis == m_axis { 0 } else { 1 }));
        }
        if value == self.w {
            let k_axis = if self.trans_b { 1 } else { 0 };
            return Some((GemmVar::W, if axis == k_axis { 0 } else { 1 }));
        }
        if Some(value) == self.b {
            let shape = &cg.node(value).shape;
            return match shape.len() {
                1 => (axis == 0).then_some((GemmVar::B, 1)),
                2 => Some((GemmVar::B, axis)),
                _ => None,
            };
        }
        if value == self.y {
            return Some((GemmVar::Y, axis));
        }
        None
    }

    /// Logical (var, dim) -> physical (value, axis), if the value carries it.
    fn to_physical(&self, cg: &ComputationalGraph, var: GemmVar, dim: usize) -> Option<(NodeId, usize)> {
        match var {
            GemmVar::X => {
                let m_axis = if self.trans_a { 1 } else { 0 };
                Some((self.x, if dim == 0 { m_axis } else { 1 - m_axis }))
            }
            GemmVar::W => {
                let k_axis = if self.trans_b { 1 } else { 0 };
                Some((self.w, if dim == 0 { k_axis } else { 1 - k_axis }))
            }
            GemmVar::B => {
                let b = self.b?;
                let shape = &cg.node(b).shape;
                match shape.len() {
                    1 => (dim == 1 && shape[0] == self.n).then_some((b, 0)),
                    2 => {
                        let want = if dim == 0 { self.m } else { self.n };
                        (shape[dim] == want).then_some((b, dim))
                    }
                    _ => None,
                }
            }
            GemmVar::Y => Some((self.y, dim)),
        }
    }
}

/// The GeMM rule table. Output entries for Y:0 follow the documented
/// deviation: the shared reduction dim W:0 is not coupled to the batch dim.
fn gemm_rule_targets(var: GemmVar, dim: usize) -> &'static [(GemmVar, usize)] {
    use GemmVar::*;
    match (var, dim) {
        (X, 0) => &[(B, 0), (Y, 0)],
        (X, 1) => &[(W, 0)],
        (W, 0) => &[(X, 1)],
        (W, 1) => &[(B, 1), (Y, 1)],
        (B, 0) => &[(X, 0), (Y, 0)],
        (B, 1) => &[(W, 1), (Y, 1)],
        (Y, 0) => &[(X, 0)],
        (Y, 1) => &[(W, 1), (B, 1)],
        _ => &[],
    }
}

fn gemm_rule(
    cg: &ComputationalGraph,
    op: NodeId,
    value: NodeId,
    axis: usize,
    indices: &[usize],
) -> Result<Vec<Mask>> {
    let ctx = GemmCtx::build(cg, op)?;
    let (var, dim) = ctx
        .to_logical(cg, value, axis)
        .ok_or_else(|| no_rule(cg, op, value, axis))?;
    if axis >= cg.node(value).shape.len() {
        return Err(no_rule(cg, op, value, axis));
    }
    let mut out = Vec::new();
    for &(tvar, tdim) in gemm_rule_targets(var, dim) {
        if let Some((tvalue, taxis)) = ctx.to_physical(cg, tvar, tdim) {
            out.push(Mask::new(tvalue, taxis, indices.to_vec()));
        }
    }
    Ok(out)
}

fn matmul_rule(
    cg: &ComputationalGraph,
    op: NodeId,
    value: NodeId,
    axis: usize,
    indices: &[usize],
) -> Result<Vec<Mask>> {
    let a = port_value(cg, op, 0).ok_or_else(|| Error::Internal("MatMul without input".into()))?;
    let b = port_value(cg, op, 1).ok_or_else(|| Error::Internal("MatMul without rhs".into()))?;
    let y = output_value(cg, op);
    let targets: &[(NodeId, usize)] = match (value, axis) {
        (v, 0) if v == a => &[(y, 0)],
        (v, 1) if v == a => &[(b, 0)],
        (v, 0) if v == b => &[(a, 1)],
        (v, 1) if v == b => &[(y, 1)],
        (v, 0) if v == y => &[(a, 0)],
        (v, 1) if v == y => &[(b, 1)],
        _ => return Err(no_rule(cg, op, value, axis)),
    };
    Ok(targets.iter().map(|&(n, ax)| Mask::new(n, ax, indices.to_vec())).collect())
}

struct ConvCtx {
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    y: NodeId,
    group: usize,
    cin_g: usize,
    cout_g: usize,
}

impl ConvCtx {
    fn build(cg: &ComputationalGraph, op: NodeId) -> Result<Self> {
        let spec = cg.op_spec(op);
        let x = port_value(cg, op, 0).ok_or_else(|| Error::Internal("Conv without input".into()))?;
        let w = port_value(cg, op, 1).ok_or_else(|| Error::Internal("Conv without weight".into()))?;
        let b = port_value(cg, op, 2);
        let y = output_value(cg, op);
        let group = spec.attr_i64("group", 1).max(1) as usize;
        let wshape = &cg.node(w).shape;
        Ok(Self { x, w, b, y, group, cin_g: wshape[1], cout_g: wshape[0] / group })
    }
}

fn conv_rule(
    cg: &ComputationalGraph,
    op: NodeId,
    value: NodeId,
    axis: usize,
    indices: &[usize],
) -> Result<Vec<Mask>> {
    let ctx = ConvCtx::build(cg, op)?;
    let mut out = Vec::new();

    // batch axis passes straight through
    if (value == ctx.x || value == ctx.y) && axis == 0 {
        let other = if value == ctx.x { ctx.y } else { ctx.x };
        return Ok(vec![Mask::new(other, 0, indices.to_vec())]);
    }

    // whole-group deletion (depthwise family): filters of the groups owning
    // these input channels go too
    let group_filters = |groups: &BTreeSet<usize>| -> Vec<usize> {
        groups
            .iter()
            .flat_map(|&g| (g * ctx.cout_g)..((g + 1) * ctx.cout_g))
            .collect()
    };

    if value == ctx.x && axis == 1 {
        if ctx.group > 1 && ctx.cin_g == 1 {
            let groups: BTreeSet<usize> = indices.iter().copied().collect();
            out.push(Mask::new(ctx.w, 0, group_filters(&groups)));
        } else if ctx.group > 1 && ctx.cout_g == 1 {
            return Err(Error::NoRule {
                op_type: "Conv".into(),
                slot: format!(
                    "{} (grouped conv with one filter per group and {} input channels per group)",
                    cg.node(value).name,
                    ctx.cin_g
                ),
                axis,
                node: cg.op_spec(op).name.clone(),
            });
        } else {
            let taps: Vec<usize> = indices.iter().map(|&c| c % ctx.cin_g).collect();
            out.push(Mask::new(ctx.w, 1, taps));
        }
        return Ok(out);
    }

    if value == ctx.w && axis == 1 {
        if ctx.group > 1 && ctx.cin_g == 1 {
            return Err(no_rule(cg, op, value, axis));
        }
        let mut xs = Vec::new();
        for &r in indices {
            for g in 0..ctx.group {
                xs.push(r + g * ctx.cin_g);
            }
        }
        out.push(Mask::new(ctx.x, 1, xs));
        return Ok(out);
    }

    if value == ctx.w && axis == 0 {
        let set: Vec<usize> = if ctx.group == 1 {
            indices.to_vec()
        } else if ctx.cin_g == 1 {
            // whole groups die together with their input channels
            let groups: BTreeSet<usize> = indices.iter().map(|&o| o / ctx.cout_g).collect();
            out.push(Mask::new(ctx.x, 1, groups.iter().copied().collect()));
            group_filters(&groups)
        } else {
            // one output per conv group at the same relative position
            let mut sib = Vec::new();
            for &o in indices {
                let r = o % ctx.cout_g;
                for g in 0..ctx.group {
                    sib.push(r + g * ctx.cout_g);
                }
            }
            sib
        };
        if set != indices {
            out.push(Mask::new(ctx.w, 0, set.clone()));
        }
        if let Some(b) = ctx.b {
            out.push(Mask::new(b, 0, set.clone()));
        }
        out.push(Mask::new(ctx.y, 1, set));
        return Ok(out);
    }

    if Some(value) == ctx.b && axis == 0 {
        out.push(Mask::new(ctx.w, 0, indices.to_vec()));
        out.push(Mask::new(ctx.y, 1, indices.to_vec()));
        return Ok(out);
    }

    if value == ctx.y && axis == 1 {
        out.push(Mask::new(ctx.w, 0, indices.to_vec()));
        if let Some(b) = ctx.b {
            out.push(Mask::new(b, 0, indices.to_vec()));
        }
        return Ok(out);
    }

    Err(no_rule(cg, op, value, axis))
}

fn batch_norm_rule(
    cg: &ComputationalGraph,
    op: NodeId,
    value: NodeId,
    axis: usize,
    indices: &[usize],
) -> Result<Vec<Mask>> {
    let x = port_value(cg, op, 0).unwrap();
    let y = output_value(cg, op);
    if (value == x || value == y) && axis == 0 {
        let other = if value == x { y } else { x };
        return Ok(vec![Mask::new(other, 0, indices.to_vec())]);
    }
    let params: Vec<NodeId> = (1..=4).filter_map(|s| port_value(cg, op, s)).collect();
    let on_channel =
        ((value == x || value == y) && axis == 1) || (params.contains(&value) && axis == 0);
    if !on_channel {
        return Err(no_rule(cg, op, value, axis));
    }
    let mut out = Vec::new();
    for &v in [x, y].iter().chain(params.iter()) {
        if v == value {
            continue;
        }
        let ax = if v == x || v == y { 1 } else { 0 };
        out.push(Mask::new(v, ax, indices.to_vec()));
    }
    Ok(out)
}

/// Elementwise binary op with numpy broadcasting: a mask maps to every other
/// connected value whose right-aligned axis has the same extent; extent-1
/// (broadcast) axes are unaffected.
fn elementwise_rule(
    cg: &ComputationalGraph,
    op: NodeId,
    value: NodeId,
    axis: usize,
    indices: &[usize],
) -> Result<Vec<Mask>> {
    let vshape = &cg.node(value).shape;
    if axis >= vshape.len() {
        return Err(no_rule(cg, op, value, axis));
    }
    let extent = vshape[axis];
    let from_right = vshape.len() - axis;
    let mut out = Vec::new();
    let mut values: Vec<NodeId> = cg.op_input_ports(op).iter().map(|p| p.value).collect();
    values.push(output_value(cg, op));
    for v in values {
        if v == value {
            continue;
        }
        let shape = &cg.node(v).shape;
        if shape.len() < from_right {
            continue;
        }
        let ax = shape.len() - from_right;
        if shape[ax] == extent {
            out.push(Mask::new(v, ax, indices.to_vec()));
        } else if shape[ax] != 1 {
            return Err(Error::Internal(format!(
                "broadcast extents diverged in '{}'",
                cg.op_spec(op).name
            )));
        }
    }
    Ok(out)
}

/// Unary shape-preserving op: identity pass-through on every axis.
fn passthrough_rule(
    cg: &ComputationalGraph,
    op: NodeId,
    value: NodeId,
    axis: usize,
    indices: &[usize],
) -> Result<Vec<Mask>> {
    let x = port_value(cg, op, 0).unwrap();
    let y = output_value(cg, op);
    if value != x && value != y {
        return Err(no_rule(cg, op, value, axis));
    }
    if axis >= cg.node(value).shape.len() {
        return Err(no_rule(cg, op, value, axis));
    }
    let other = if value == x { y } else { x };
    Ok(vec![Mask::new(other, axis, indices.to_vec())])
}

/// Pooling: batch and channel axes pass through; spatial axes have no rule.
fn pool_rule(
    cg: &ComputationalGraph,
    op: NodeId,
    value: NodeId,
    axis: usize,
    indices: &[usize],
) -> Result<Vec<Mask>> {
    if axis > 1 {
        return Err(no_rule(cg, op, value, axis));
    }
    passthrough_rule(cg, op, value, axis, indices)
}

/// Flatten between (N, C, S...) and (N, C * prod(S)): a channel expands to a
/// contiguous block of the flat axis.
fn flatten_rule(
    cg: &ComputationalGraph,
    op: NodeId,
    value: NodeId,
    axis: usize,
    indices: &[usize],
) -> Result<Vec<Mask>> {
    let spec = cg.op_spec(op);
    let x = port_value(cg, op, 0).unwrap();
    let y = output_value(cg, op);
    let xshape = &cg.node(x).shape;
    let flat_axis = {
        let a = spec.attr_i64("axis", 1);
        if a < 0 {
            (a + xshape.len() as i64) as usize
        } else {
            a as usize
        }
    };
    if flat_axis != 1 {
        return Err(no_rule(cg, op, value, axis));
    }
    let inner: usize = xshape[2..].iter().product();
    if value == x {
        match axis {
            0 => Ok(vec![Mask::new(y, 0, indices.to_vec())]),
            1 => {
                let block: Vec<usize> = indices
                    .iter()
                    .flat_map(|&c| (c * inner)..((c + 1) * inner))
                    .collect();
                Ok(vec![Mask::new(y, 1, block)])
            }
            _ => Err(no_rule(cg, op, value, axis)),
        }
    } else if value == y {
        match axis {
            0 => Ok(vec![Mask::new(x, 0, indices.to_vec())]),
            1 => {
                let channels: Vec<usize> = indices.iter().map(|&f| f / inner).collect();
                Ok(vec![Mask::new(x, 1, channels)])
            }
            _ => Err(no_rule(cg, op, value, axis)),
        }
    } else {
        Err(no_rule(cg, op, value, axis))
    }
}

/// Concat on the channel axis: output indices shift by each input's offset.
fn concat_rule(
    cg: &ComputationalGraph,
    op: NodeId,
    value: NodeId,
    axis: usize,
    indices: &[usize],
) -> Result<Vec<Mask>> {
    let spec = cg.op_spec(op);
    let inputs: Vec<NodeId> = cg.op_input_ports(op).iter().map(|p| p.value).collect();
    let y = output_value(cg, op);
    let rank = cg.node(inputs[0]).shape.len() as i64;
    let cat_axis = {
        let a = spec.attr_i64("axis", i64::MIN);
        if a < 0 {
            (a + rank) as usize
        } else {
            a as usize
        }
    };
    if cat_axis != 1 {
        return Err(no_rule(cg, op, value, axis));
    }
    if axis != 1 {
        // off-axis extents are shared: identity across all values
        if axis >= cg.node(value).shape.len() || axis == 1 {
            return Err(no_rule(cg, op, value, axis));
        }
        let mut out = Vec::new();
        for &v in inputs.iter().chain(std::iter::once(&y)) {
            if v != value {
                out.push(Mask::new(v, axis, indices.to_vec()));
            }
        }
        return Ok(out);
    }
    let mut offsets = Vec::with_capacity(inputs.len());
    let mut off = 0usize;
    for &i in &inputs {
        offsets.push(off);
        off += cg.node(i).shape[cat_axis];
    }
    if value == y {
        let mut per_input: Vec<Vec<usize>> = vec![Vec::new(); inputs.len()];
        for &i in indices {
            let k = match offsets.iter().rposition(|&o| o <= i) {
                Some(k) => k,
                None => return Err(Error::Internal("concat index before first offset".into())),
            };
            per_input[k].push(i - offsets[k]);
        }
        Ok(per_input
            .into_iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| Mask::new(inputs[k], 1, v))
            .collect())
    } else {
        let k = inputs
            .iter()
            .position(|&v| v == value)
            .ok_or_else(|| no_rule(cg, op, value, axis))?;
        let shifted: Vec<usize> = indices.iter().map(|&i| i + offsets[k]).collect();
        Ok(vec![Mask::new(y, 1, shifted)])
    }
}

/// Apply the operator's rule to a mask on one of its connected values,
/// producing the induced masks on its other values (and, for grouped convs,
/// possibly extra indices on the same value).
pub fn propagate_through_op(
    cg: &ComputationalGraph,
    op: NodeId,
    incoming: &Mask,
) -> Result<Vec<Mask>> {
    let spec = cg.op_spec(op);
    let connected =
        !input_slots(cg, op, incoming.node).is_empty() || is_output(cg, op, incoming.node);
    if !connected {
        return Err(Error::UnknownNode(format!(
            "'{}' is not connected to '{}'",
            cg.node(incoming.node).name,
            spec.name
        )));
    }
    let (value, axis, indices) = (incoming.node, incoming.axis, incoming.indices.as_slice());
    match spec.op_type {
        OpType::Gemm => gemm_rule(cg, op, value, axis, indices),
        OpType::MatMul => matmul_rule(cg, op, value, axis, indices),
        OpType::Conv => conv_rule(cg, op, value, axis, indices),
        OpType::BatchNormalization => batch_norm_rule(cg, op, value, axis, indices),
        OpType::Add => elementwise_rule(cg, op, value, axis, indices),
        OpType::Relu | OpType::Sigmoid | OpType::Identity | OpType::Softmax => {
            passthrough_rule(cg, op, value, axis, indices)
        }
        OpType::MaxPool | OpType::AveragePool | OpType::GlobalAveragePool => {
            pool_rule(cg, op, value, axis, indices)
        }
        OpType::Flatten => flatten_rule(cg, op, value, axis, indices),
        OpType::Concat => concat_rule(cg, op, value, axis, indices),
    }
}

/// Worklist fixpoint of `propagate_through_op` starting from one mask.
pub fn coupled_channels(
    cg: &ComputationalGraph,
    source: NodeId,
    mask: &Mask,
    stats: &mut PropagationStats,
) -> Result<MaskSet> {
    coupled_channels_with_order(cg, source, mask, stats, |work| work.pop().unwrap())
}

/// Same fixpoint with an injectable worklist pop policy (used to test that
/// the result does not depend on traversal order).
pub fn coupled_channels_with_order(
    cg: &ComputationalGraph,
    source: NodeId,
    mask: &Mask,
    stats: &mut PropagationStats,
    mut pop: impl FnMut(&mut Vec<Mask>) -> Mask,
) -> Result<MaskSet> {
    if mask.node != source {
        return Err(Error::Internal("source mask does not name the source node".into()));
    }
    if mask.indices.is_empty() {
        return Err(Error::Internal("empty source mask".into()));
    }
    let shape = &cg.node(source).shape;
    if mask.axis >= shape.len() {
        return Err(Error::ChannelRange {
            node: cg.node(source).name.clone(),
            axis: mask.axis,
            channel: 0,
            extent: 0,
        });
    }
    if let Some(&max) = mask.indices.last() {
        if max >= shape[mask.axis] {
            return Err(Error::ChannelRange {
                node: cg.node(source).name.clone(),
                axis: mask.axis,
                channel: max,
                extent: shape[mask.axis],
            });
        }
    }
    stats.propagations += 1;
    let mut set = MaskSet::new();
    set.insert(mask);
    let mut work = vec![mask.clone()];
    while !work.is_empty() {
        let current = pop(&mut work);
        for op in cg.neighbors(current.node)? {
            stats.edge_visits += 1;
            for produced in propagate_through_op(cg, op, &current)? {
                let fresh = set.insert(&produced);
                if !fresh.is_empty() {
                    work.push(Mask { node: produced.node, axis: produced.axis, indices: fresh });
                }
            }
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::ModelBuilder;
    use crate::graph::build_graph;
    use crate::onnx::ModelIR;
    use crate::tensor::Tensor;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn graph_of(ir: &ModelIR) -> ComputationalGraph {
        build_graph(ir).unwrap()
    }

    /// Gemm in the (M,K)x(K,N) layout with a full-rank (M,N) bias, so every
    /// column of the rule table has a physical carrier.
    fn gemm_full_bias() -> (ModelIR, [String; 4]) {
        let mut b = ModelBuilder::new("gemm_table", 1);
        let x = b.input("x", &[3, 4]);
        let w = Tensor::zeros(vec![4, 5]);
        let bias = Tensor::zeros(vec![3, 5]);
        b.add_initializer("w", w);
        b.add_initializer("c", bias);
        let y = b.raw_node(
            crate::onnx::OpType::Gemm,
            "gemm",
            vec![x.clone(), "w".into(), "c".into()],
            BTreeMap::new(),
        );
        b.output(&y);
        (b.build().unwrap(), [x, "w".into(), "c".into(), y])
    }

    fn masks_of(got: &[Mask], cg: &ComputationalGraph) -> Vec<(String, usize, Vec<usize>)> {
        let mut v: Vec<(String, usize, Vec<usize>)> = got
            .iter()
            .map(|m| (cg.node(m.node).name.clone(), m.axis, m.indices.clone()))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn gemm_rule_table_all_eight_cases() {
        let (ir, [x, w, c, y]) = gemm_full_bias();
        let cg = graph_of(&ir);
        let op = cg.op_id("gemm").unwrap();
        let id = |n: &str| cg.value_id(n).unwrap();
        let cases: Vec<((&str, usize), Vec<(&str, usize)>)> = vec![
            ((&x, 0), vec![(&c, 0), (&y, 0)]),
            ((&x, 1), vec![(&w, 0)]),
            ((&w, 0), vec![(&x, 1)]),
            ((&w, 1), vec![(&c, 1), (&y, 1)]),
            ((&c, 0), vec![(&x, 0), (&y, 0)]),
            ((&c, 1), vec![(&w, 1), (&y, 1)]),
            ((&y, 0), vec![(&x, 0)]), // documented deviation: no W:0
            ((&y, 1), vec![(&w, 1), (&c, 1)]),
        ];
        for ((src, axis), want) in cases {
            let got =
                propagate_through_op(&cg, op, &Mask::single(id(src), axis, 0)).unwrap();
            let mut want: Vec<(String, usize, Vec<usize>)> =
                want.into_iter().map(|(n, a)| (n.to_string(), a, vec![0usize])).collect();
            want.sort();
            assert_eq!(masks_of(&got, &cg), want, "rule case {}:{}", src, axis);
        }
    }

    #[test]
    fn gemm_trans_b_normalizes_to_logical_axes() {
        // W stored (N, K) with transB: masking its axis 0 is the N dim
        let mut b = ModelBuilder::new("g", 2);
        let x = b.input("x", &[1, 6]);
        let y = b.gemm("fc", &x, 4, true, true);
        b.output(&y);
        let ir = b.build().unwrap();
        let cg = graph_of(&ir);
        let op = cg.op_id(&ir.nodes[0].name).unwrap();
        let w = cg.value_id(&ir.nodes[0].inputs[1]).unwrap();
        let got = propagate_through_op(&cg, op, &Mask::single(w, 0, 2)).unwrap();
        let names = masks_of(&got, &cg);
        // N-dim mask -> bias index and output feature
        assert_eq!(names.len(), 2);
        assert!(names.iter().any(|(n, a, i)| n.ends_with("_b") && *a == 0 && i == &[2]));
        assert!(names.iter().any(|(n, a, i)| n == &y && *a == 1 && i == &[2]));
        // K-dim mask -> input feature
        let got = propagate_through_op(&cg, op, &Mask::single(w, 1, 3)).unwrap();
        let names = masks_of(&got, &cg);
        assert_eq!(names, vec![("x".to_string(), 1, vec![3])]);
    }

    #[test]
    fn fig7_two_gemm_worked_example() {
        let ir = crate::fixtures::two_gemm(3);
        let cg = graph_of(&ir);
        let w1 = cg.value_id(&ir.nodes[0].inputs[1]).unwrap();
        let mut stats = PropagationStats::default();
        let seed = create_mask(&cg, w1, 0).unwrap();
        assert_eq!(seed.axis, 1); // (K, N) layout: output features on axis 1
        let set = coupled_channels(&cg, w1, &seed, &mut stats).unwrap();
        let x2 = cg.value_id(&ir.nodes[0].outputs[0]).unwrap();
        let w2 = cg.value_id(&ir.nodes[1].inputs[1]).unwrap();
        let expect: Vec<(NodeId, usize, Vec<usize>)> =
            vec![(w1, 1, vec![0]), (x2, 1, vec![0]), (w2, 0, vec![0])];
        let got: Vec<(NodeId, usize, Vec<usize>)> =
            set.iter().map(|(n, a, s)| (n, a, s.iter().copied().collect())).collect();
        let mut expect = expect;
        expect.sort();
        let mut got = got;
        got.sort();
        assert_eq!(got, expect, "exactly X2 feature 0 and W2 input 0, nothing else");
    }

    #[test]
    fn conv_bn_relu_chain_coupling() {
        let ir = crate::fixtures::chain_cnn(2, 8, 5);
        let cg = graph_of(&ir);
        let conv0 = &ir.nodes[0];
        let w0 = cg.value_id(&conv0.inputs[1]).unwrap();
        let mut stats = PropagationStats::default();
        let set =
            coupled_channels(&cg, w0, &create_mask(&cg, w0, 3).unwrap(), &mut stats).unwrap();
        // BN parameters all masked at {3}
        let bn = &ir.nodes[1];
        for slot in 1..=4 {
            let p = cg.value_id(&bn.inputs[slot]).unwrap();
            assert_eq!(set.get(p, 0).unwrap().iter().copied().collect::<Vec<_>>(), vec![3]);
        }
        // downstream data channels and the next conv's input axis
        let conv1 = &ir.nodes[3];
        let w1 = cg.value_id(&conv1.inputs[1]).unwrap();
        assert_eq!(set.get(w1, 1).unwrap().iter().copied().collect::<Vec<_>>(), vec![3]);
        let conv0_out = cg.value_id(&conv0.outputs[0]).unwrap();
        assert_eq!(set.get(conv0_out, 1).unwrap().len(), 1);
        // conv1's own outputs unaffected
        let conv1_out = cg.value_id(&conv1.outputs[0]).unwrap();
        assert!(set.get(conv1_out, 1).is_none());
    }

    #[test]
    fn residual_skip_couples_across_blocks() {
        let ir = crate::fixtures::residual_net(7);
        let cg = graph_of(&ir);
        let blk0_conv2 = ir.node("blk0_conv2_5").or(ir.node("blk0_conv2")).cloned().unwrap_or_else(
            || ir.nodes.iter().find(|n| n.name.starts_with("blk0_conv2")).unwrap().clone(),
        );
        let w = cg.value_id(&blk0_conv2.inputs[1]).unwrap();
        let mut stats = PropagationStats::default();
        let set =
            coupled_channels(&cg, w, &create_mask(&cg, w, 2).unwrap(), &mut stats).unwrap();
        // the stem conv and the second block's output conv join the set
        let stem = ir.nodes.iter().find(|n| n.name.starts_with("stem")).unwrap();
        let stem_w = cg.value_id(&stem.inputs[1]).unwrap();
        assert!(set.get(stem_w, 0).is_some(), "skip path couples the stem");
        let blk1_conv2 =
            ir.nodes.iter().find(|n| n.name.starts_with("blk1_conv2")).unwrap();
        let w12 = cg.value_id(&blk1_conv2.inputs[1]).unwrap();
        assert!(set.get(w12, 0).is_some(), "skip path couples the next block");
    }

    #[test]
    fn add_elementwise_masks_both_sides() {
        let mut b = ModelBuilder::new("add", 8);
        let x = b.input("x", &[1, 4, 8, 8]);
        let c1 = b.conv("c1", &x, 4, 3, 1, 1, 1);
        let c2 = b.conv("c2", &x, 4, 3, 1, 1, 1);
        let a = b.add(&c1, &c2);
        b.output(&a);
        let ir = b.build().unwrap();
        let cg = graph_of(&ir);
        let add_op = cg.op_id(&ir.nodes[2].name).unwrap();
        let lhs = cg.value_id(&c1).unwrap();
        let got = propagate_through_op(&cg, add_op, &Mask::single(lhs, 1, 3)).unwrap();
        let names = masks_of(&got, &cg);
        assert_eq!(names.len(), 2);
        assert!(names.iter().all(|(_, a, i)| *a == 1 && i == &[3]));
    }

    #[test]
    fn grouped_conv_couples_sibling_channels() {
        let ir = crate::fixtures::grouped_net(9);
        let cg = graph_of(&ir);
        // input-data channel {1} of the grouped conv (Cin 8, g 2, cin_g 4)
        let grouped = ir.nodes.iter().find(|n| n.name.starts_with("grouped")).unwrap();
        let x = cg.value_id(&grouped.inputs[0]).unwrap();
        let gw = cg.value_id(&grouped.inputs[1]).unwrap();
        let op = cg.op_id(&grouped.name).unwrap();
        let got = propagate_through_op(&cg, op, &Mask::single(x, 1, 1)).unwrap();
        let tap = got.iter().find(|m| m.node == gw).unwrap();
        assert_eq!((tap.axis, tap.indices.as_slice()), (1, &[1usize][..]));
        // fixpoint pulls in the sibling input channel 1 + 4
        let mut stats = PropagationStats::default();
        let set = coupled_channels(&cg, x, &Mask::single(x, 1, 1), &mut stats).unwrap();
        assert_eq!(set.get(x, 1).unwrap().iter().copied().collect::<Vec<_>>(), vec![1, 5]);
        // and the producer loses both filters
        let conv1 = ir.nodes.iter().find(|n| n.name.starts_with("conv1")).unwrap();
        let w1 = cg.value_id(&conv1.inputs[1]).unwrap();
        assert_eq!(set.get(w1, 0).unwrap().iter().copied().collect::<Vec<_>>(), vec![1, 5]);
    }

    #[test]
    fn depthwise_conv_couples_filter_and_channel() {
        let ir = crate::fixtures::depthwise_net(10);
        let cg = graph_of(&ir);
        let dw = ir.nodes.iter().find(|n| n.name.starts_with("dw")).unwrap();
        let x = cg.value_id(&dw.inputs[0]).unwrap();
        let w = cg.value_id(&dw.inputs[1]).unwrap();
        let y = cg.value_id(&dw.outputs[0]).unwrap();
        let mut stats = PropagationStats::default();
        let set = coupled_channels(&cg, x, &Mask::single(x, 1, 1), &mut stats).unwrap();
        assert_eq!(set.get(w, 0).unwrap().iter().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(set.get(y, 1).unwrap().iter().copied().collect::<Vec<_>>(), vec![1]);
        // no tap-column coupling for depthwise
        assert!(set.get(w, 1).is_none());
    }

    #[test]
    fn flatten_expands_channel_to_block() {
        let ir = crate::fixtures::conv_flatten_mlp(11);
        let cg = graph_of(&ir);
        // conv1 (6 ch, pooled to 4x4) -> flatten -> fc1: channel c maps to 16 columns
        let conv1 = &ir.nodes[0];
        let w = cg.value_id(&conv1.inputs[1]).unwrap();
        let mut stats = PropagationStats::default();
        let set =
            coupled_channels(&cg, w, &create_mask(&cg, w, 2).unwrap(), &mut stats).unwrap();
        let fc1 = ir.nodes.iter().find(|n| n.name.starts_with("fc1")).unwrap();
        let fw = cg.value_id(&fc1.inputs[1]).unwrap();
        let block: Vec<usize> = set.get(fw, 1).unwrap().iter().copied().collect();
        assert_eq!(block, (32..48).collect::<Vec<_>>());
    }

    #[test]
    fn concat_shifts_indices_by_offsets() {
        let ir = crate::fixtures::densenet_concat(12);
        let cg = graph_of(&ir);
        // dense1 output (4 ch) is the second concat input after the 6-ch stem
        let dense1 = ir.nodes.iter().find(|n| n.name.starts_with("dense1")).unwrap();
        let w = cg.value_id(&dense1.inputs[1]).unwrap();
        let mut stats = PropagationStats::default();
        let set =
            coupled_channels(&cg, w, &create_mask(&cg, w, 1).unwrap(), &mut stats).unwrap();
        let cat1 = ir.nodes.iter().find(|n| n.op_type == crate::onnx::OpType::Concat).unwrap();
        let cat1_out = cg.value_id(&cat1.outputs[0]).unwrap();
        assert_eq!(set.get(cat1_out, 1).unwrap().iter().copied().collect::<Vec<_>>(), vec![7]);
        // consumer of the concat loses the shifted input column
        let dense2 = ir.nodes.iter().find(|n| n.name.starts_with("dense2")).unwrap();
        let dw = cg.value_id(&dense2.inputs[1]).unwrap();
        assert_eq!(set.get(dw, 1).unwrap().iter().copied().collect::<Vec<_>>(), vec![7]);
    }

    #[test]
    fn fixpoint_is_order_independent() {
        let fixtures = vec![
            crate::fixtures::residual_net(20),
            crate::fixtures::densenet_concat(21),
            crate::fixtures::grouped_net(22),
        ];
        for ir in fixtures {
            let cg = graph_of(&ir);
            let w = cg.value_id(&ir.nodes[0].inputs[1]).unwrap();
            let seed = create_mask(&cg, w, 0).unwrap();
            let mut stats = PropagationStats::default();
            let reference = coupled_channels(&cg, w, &seed, &mut stats).unwrap();
            for seed_idx in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed_idx);
                let mut stats = PropagationStats::default();
                let shuffled =
                    coupled_channels_with_order(&cg, w, &seed, &mut stats, move |work| {
                        let i = (0..work.len()).collect::<Vec<_>>();
                        let &pick = i.choose(&mut rng).unwrap();
                        work.swap_remove(pick)
                    })
                    .unwrap();
                assert_eq!(shuffled, reference, "traversal order changed the fixpoint");
            }
        }
    }

    #[test]
    fn coupling_is_symmetric() {
        let ir = crate::fixtures::residual_net(30);
        let cg = graph_of(&ir);
        let stem = ir.nodes.iter().find(|n| n.name.starts_with("stem")).unwrap();
        let u = cg.value_id(&stem.inputs[1]).unwrap();
        let mut stats = PropagationStats::default();
        let set = coupled_channels(&cg, u, &Mask::single(u, 0, 2), &mut stats).unwrap();
        for (v, axis, indices) in set.iter() {
            for &b in indices {
                let back =
                    coupled_channels(&cg, v, &Mask::single(v, axis, b), &mut stats).unwrap();
                assert!(
                    back.contains(u, 0, 2),
                    "asymmetric: {}:{}:{} does not couple back",
                    cg.node(v).name,
                    axis,
                    b
                );
            }
        }
    }

    #[test]
    fn create_mask_errors() {
        let ir = crate::fixtures::chain_cnn(1, 8, 13);
        let cg = graph_of(&ir);
        let w = cg.value_id(&ir.nodes[0].inputs[1]).unwrap();
        assert!(matches!(
            create_mask(&cg, w, 99),
            Err(Error::ChannelRange { channel: 99, .. })
        ));
        let bn = &ir.nodes[1];
        let mean = cg.value_id(&bn.inputs[3]).unwrap();
        assert!(matches!(create_mask(&cg, mean, 0), Err(Error::NotPrunable { .. })));
        let data = cg.value_id(&ir.nodes[0].outputs[0]).unwrap();
        assert!(matches!(create_mask(&cg, data, 0), Err(Error::NotPrunable { .. })));
    }

    #[test]
    fn missing_rule_fails_loudly() {
        let ir = crate::fixtures::chain_cnn(1, 8, 14);
        let cg = graph_of(&ir);
        let conv = &ir.nodes[0];
        let op = cg.op_id(&conv.name).unwrap();
        let x = cg.value_id(&conv.inputs[0]).unwrap();
        // spatial axis of the conv input has no rule
        match propagate_through_op(&cg, op, &Mask::single(x, 2, 0)) {
            Err(Error::NoRule { op_type, axis, .. }) => {
                assert_eq!(op_type, "Conv");
                assert_eq!(axis, 2);
            }
            other => panic!("expected NoRule, got {:?}", other.map(|_| ())),
        }
    }
}

/// One line per operator describing its propagation rules; rendered by the
/// CLI as the generated operator reference.
pub fn rule_documentation() -> String {
    let mut s = String::from("# Operator reference\n\nSupported operators and their mask propagation rules.\nNotation: `value:axis`; indices transform as noted, identity otherwise.\n\n");
    let rows: &[(&str, &str)] = &[
        ("Conv", "X:0 <-> Y:0. X:1{c} -> W:1{c mod Cin/g} (grouped: W:1{r} -> X:1{r + j*Cin/g} for every conv group j; depthwise Cin/g=1: X:1{c} <-> W:0 filters of group c). W:0{o} -> B:0, Y:1 (grouped: one output per conv group at the same relative position joins). Y:1 -> W:0, B:0. Spatial axes: no rule."),
        ("Gemm", "Logical dims X:(M,K), W:(K,N), B->(M,N), Y:(M,N); transA/transB map logical to stored axes. Table: X:0->B:0,Y:0 | X:1->W:0 | W:0->X:1 | W:1->B:1,Y:1 | B:0->X:0,Y:0 | B:1->W:1,Y:1 | Y:0->X:0 | Y:1->W:1,B:1. (Y:0 does not induce W:0: the reduction dim is not coupled to the batch dim.)"),
        ("MatMul", "A:(M,K) x B:(K,N): A:0<->Y:0, A:1<->B:0, B:1<->Y:1. Rank-2 only."),
        ("BatchNormalization", "X:1, Y:1 and axis 0 of scale/bias/mean/var are one coupled set; X:0 <-> Y:0."),
        ("Add", "Per-axis identity between both inputs and the output under right-aligned broadcasting; extent-1 axes unaffected."),
        ("Relu", "Identity pass-through on every axis."),
        ("Sigmoid", "Identity pass-through on every axis."),
        ("Softmax", "Identity pass-through on every axis (channel masks never reach a Softmax feeding a protected output)."),
        ("Identity", "Identity pass-through on every axis."),
        ("MaxPool", "X:0 <-> Y:0, X:1 <-> Y:1; spatial axes: no rule."),
        ("AveragePool", "X:0 <-> Y:0, X:1 <-> Y:1; spatial axes: no rule."),
        ("GlobalAveragePool", "X:0 <-> Y:0, X:1 <-> Y:1; spatial axes: no rule."),
        ("Flatten", "axis=1: X:1{c} <-> Y:1 block [c*H*W, (c+1)*H*W); X:0 <-> Y:0."),
        ("Concat", "channel axis: input k index i <-> output index i + offset_k; other non-channel axes identity across all values."),
    ];
    for (op, rule) in rows {
        s.push_str(&format!("- **{}**: {}\n", op, rule));
    }
    s.push_str("\nFLOP accounting: Conv 2*Cout*(Cin/g)*kH*kW*Hout*Wout; Gemm/MatMul 2*M*K*N; BatchNormalization, activations, Add and pooling count one op per input element; Flatten/Concat/Identity are free.\n");
    s
}

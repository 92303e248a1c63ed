//! Tripartite computational graph: operator, data and parameter nodes with
//! slot-tagged edges. Built once from a shape-inferred ModelIR, immutable
//! afterwards, and self-contained (operator specs and value shapes are copied
//! in so traversal never needs the IR).

use crate::error::{Error, Result};
use crate::onnx::{ModelIR, OperatorSpec};
use std::collections::HashMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CGNodeKind {
    Operator,
    Data,
    Parameter,
}

#[derive(Debug, Clone)]
pub struct CGNode {
    pub id: NodeId,
    pub kind: CGNodeKind,
    pub name: String,
    /// Value shape for data/parameter nodes; empty for operators.
    pub shape: Vec<usize>,
    /// Index into the op table for operator nodes.
    pub op_index: Option<usize>,
}

/// One edge endpoint: which value, and which input/output slot of the operator.
#[derive(Debug, Clone, Copy)]
pub struct Port {
    pub value: NodeId,
    pub slot: usize,
}

#[derive(Debug, Clone)]
pub struct ComputationalGraph {
    nodes: Vec<CGNode>,
    ops: Vec<OperatorSpec>,
    /// Operator node id per op index (same order as `ops`).
    op_node_ids: Vec<NodeId>,
    op_inputs: Vec<Vec<Port>>,
    op_outputs: Vec<Vec<Port>>,
    /// For each value node: (op_index, slot) pairs of consumers, then producer.
    value_consumers: HashMap<NodeId, Vec<(usize, usize)>>,
    value_producer: HashMap<NodeId, (usize, usize)>,
    value_ids: HashMap<String, NodeId>,
    op_ids: HashMap<String, NodeId>,
    graph_inputs: Vec<NodeId>,
    graph_outputs: Vec<NodeId>,
    edge_count: usize,
}

/// Build the computational graph from a shape-inferred model.
pub fn build_graph(ir: &ModelIR) -> Result<ComputationalGraph> {
    if ir.value_shapes.is_empty() {
        return Err(Error::Internal("build_graph wants a shape-inferred model".into()));
    }
    let mut g = ComputationalGraph {
        nodes: Vec::new(),
        ops: ir.nodes.clone(),
        op_node_ids: Vec::new(),
        op_inputs: vec![Vec::new(); ir.nodes.len()],
        op_outputs: vec![Vec::new(); ir.nodes.len()],
        value_consumers: HashMap::new(),
        value_producer: HashMap::new(),
        value_ids: HashMap::new(),
        op_ids: HashMap::new(),
        graph_inputs: Vec::new(),
        graph_outputs: Vec::new(),
        edge_count: 0,
    };

    let add_value = |g: &mut ComputationalGraph, name: &str| -> NodeId {
        if let Some(&id) = g.value_ids.get(name) {
            return id;
        }
        let kind = if ir.is_initializer(name) { CGNodeKind::Parameter } else { CGNodeKind::Data };
        let shape = ir.value_shapes.get(name).cloned().unwrap_or_default();
        let id = NodeId(g.nodes.len());
        g.nodes.push(CGNode { id, kind, name: name.to_string(), shape, op_index: None });
        g.value_ids.insert(name.to_string(), id);
        id
    };

    for (op_idx, op) in ir.nodes.iter().enumerate() {
        let op_id = NodeId(g.nodes.len());
        g.nodes.push(CGNode {
            id: op_id,
            kind: CGNodeKind::Operator,
            name: op.name.clone(),
            shape: Vec::new(),
            op_index: Some(op_idx),
        });
        g.op_node_ids.push(op_id);
        g.op_ids.insert(op.name.clone(), op_id);
        for (slot, input) in op.inputs.iter().enumerate() {
            if input.is_empty() {
                continue;
            }
            let vid = add_value(&mut g, input);
            g.op_inputs[op_idx].push(Port { value: vid, slot });
            g.value_consumers.entry(vid).or_default().push((op_idx, slot));
            g.edge_count += 1;
        }
        for (slot, output) in op.outputs.iter().enumerate() {
            let vid = add_value(&mut g, output);
            g.op_outputs[op_idx].push(Port { value: vid, slot });
            g.value_producer.insert(vid, (op_idx, slot));
            g.edge_count += 1;
        }
    }

    for p in &ir.graph_inputs {
        let id = add_value(&mut g, &p.name);
        g.graph_inputs.push(id);
    }
    for p in &ir.graph_outputs {
        let id = g
            .value_ids
            .get(&p.name)
            .copied()
            .ok_or_else(|| Error::UnknownNode(p.name.clone()))?;
        g.graph_outputs.push(id);
    }
    Ok(g)
}

impl ComputationalGraph {
    pub fn node(&self, id: NodeId) -> &CGNode {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[CGNode] {
        &self.nodes
    }

    pub fn value_id(&self, name: &str) -> Option<NodeId> {
        self.value_ids.get(name).copied()
    }

    pub fn op_id(&self, name: &str) -> Option<NodeId> {
        self.op_ids.get(name).copied()
    }

    pub fn op_spec(&self, op_node: NodeId) -> &OperatorSpec {
        let idx = self.nodes[op_node.0].op_index.expect("operator node");
        &self.ops[idx]
    }

    pub fn op_specs(&self) -> &[OperatorSpec] {
        &self.ops
    }

    /// Operator nodes in topological order.
    pub fn operator_nodes(&self) -> &[NodeId] {
        &self.op_node_ids
    }

    /// Slot-tagged input ports of an operator node.
    pub fn op_input_ports(&self, op_node: NodeId) -> &[Port] {
        let idx = self.nodes[op_node.0].op_index.expect("operator node");
        &self.op_inputs[idx]
    }

    pub fn op_output_ports(&self, op_node: NodeId) -> &[Port] {
        let idx = self.nodes[op_node.0].op_index.expect("operator node");
        &self.op_outputs[idx]
    }

    /// Operators adjacent to a data/parameter node: producer first, then
    /// consumers, deduplicated, in topological order.
    pub fn neighbors(&self, value: NodeId) -> Result<Vec<NodeId>> {
        match self.nodes.get(value.0) {
            Some(n) if n.kind != CGNodeKind::Operator => {}
            Some(n) => return Err(Error::UnknownNode(format!("'{}' is an operator node", n.name))),
            None => return Err(Error::UnknownNode(format!("id {}", value.0))),
        }
        let mut op_indices: Vec<usize> = Vec::new();
        if let Some(&(op_idx, _)) = self.value_producer.get(&value) {
            op_indices.push(op_idx);
        }
        if let Some(consumers) = self.value_consumers.get(&value) {
            for &(op_idx, _) in consumers {
                op_indices.push(op_idx);
            }
        }
        op_indices.sort_unstable();
        op_indices.dedup();
        Ok(op_indices.into_iter().map(|i| self.op_node_ids[i]).collect())
    }

    pub fn is_graph_input(&self, value: NodeId) -> bool {
        self.graph_inputs.contains(&value)
    }

    pub fn is_graph_output(&self, value: NodeId) -> bool {
        self.graph_outputs.contains(&value)
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn count_kind(&self, kind: CGNodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    /// Graphviz DOT rendering; node kind encoded by shape and color.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph cg {\n  rankdir=TB;\n");
        for n in &self.nodes {
            let (shape, color) = match n.kind {
                CGNodeKind::Operator => ("box", "lightblue"),
                CGNodeKind::Data => ("ellipse", "white"),
                CGNodeKind::Parameter => ("ellipse", "lightgrey"),
            };
            let label = if n.shape.is_empty() {
                format!("{}\\n[{}]", n.name, self.op_spec(n.id).op_type.as_str())
            } else {
                format!("{}\\n{:?}", n.name, n.shape)
            };
            let _ = writeln!(
                s,
                "  n{} [label=\"{}\", shape={}, style=filled, fillcolor={}];",
                n.id.0, label, shape, color
            );
        }
        for (op_idx, ports) in self.op_inputs.iter().enumerate() {
            for p in ports {
                let _ = writeln!(
                    s,
                    "  n{} -> n{} [label=\"{}\"];",
                    p.value.0, self.op_node_ids[op_idx].0, p.slot
                );
            }
        }
        for (op_idx, ports) in self.op_outputs.iter().enumerate() {
            for p in ports {
                let _ = writeln!(s, "  n{} -> n{};", self.op_node_ids[op_idx].0, p.value.0);
            }
        }
        s.push_str("}\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::ModelBuilder;

    fn conv_bn_relu() -> ModelIR {
        let mut b = ModelBuilder::new("cbr", 1);
        let x = b.input("x", &[1, 3, 8, 8]);
        let c = b.conv("conv", &x, 4, 3, 1, 1, 1);
        let n = b.batch_norm("bn", &c);
        let r = b.relu(&n);
        b.output(&r);
        b.build().unwrap()
    }

    #[test]
    fn conv_bn_relu_node_counts() {
        let ir = conv_bn_relu();
        let g = build_graph(&ir).unwrap();
        assert_eq!(g.count_kind(CGNodeKind::Operator), 3);
        assert_eq!(g.count_kind(CGNodeKind::Parameter), 6);
        assert_eq!(g.count_kind(CGNodeKind::Data), 4);
    }

    #[test]
    fn single_identity_counts() {
        let mut b = ModelBuilder::new("id", 1);
        let x = b.input("x", &[1, 4]);
        let y = b.identity(&x);
        b.output(&y);
        let ir = b.build().unwrap();
        let g = build_graph(&ir).unwrap();
        assert_eq!(g.count_kind(CGNodeKind::Operator), 1);
        assert_eq!(g.count_kind(CGNodeKind::Data), 2);
        assert_eq!(g.count_kind(CGNodeKind::Parameter), 0);
    }

    #[test]
    fn edge_count_matches_hand_count() {
        // Gemm(x,w,b) -> Relu -> Gemm(x,w): edges = (3+1) + (1+1) + (2+1)
        let mut b = ModelBuilder::new("mlp", 2);
        let x = b.input("x", &[1, 8]);
        let h = b.gemm("fc1", &x, 6, true, true);
        let r = b.relu(&h);
        let y = b.gemm("fc2", &r, 4, true, false);
        b.output(&y);
        let ir = b.build().unwrap();
        let g = build_graph(&ir).unwrap();
        assert_eq!(g.edge_count(), 9);
        // |V_param| = #initializers, |V_data| = #values - #initializers
        assert_eq!(g.count_kind(CGNodeKind::Parameter), ir.initializers.len());
        assert_eq!(g.count_kind(CGNodeKind::Data), 4); // x, fc1_out, relu_out, fc2_out
    }

    #[test]
    fn neighbors_of_fanout_data_node() {
        let mut b = ModelBuilder::new("fanout", 3);
        let x = b.input("x", &[1, 4, 8, 8]);
        let c1 = b.conv("c1", &x, 4, 3, 1, 1, 1);
        let c2 = b.conv("c2", &c1, 4, 3, 1, 1, 1);
        let a = b.add(&c1, &c2);
        b.output(&a);
        let ir = b.build().unwrap();
        let g = build_graph(&ir).unwrap();
        let c1_out = g.value_id(&c1).unwrap();
        let ops = g.neighbors(c1_out).unwrap();
        // producer c1, consumers c2 and add
        assert_eq!(ops.len(), 3);
        let names: Vec<&str> = ops.iter().map(|&o| g.node(o).name.as_str()).collect();
        assert!(names[0].starts_with("c1"));
        assert!(names[1].starts_with("c2"));
        assert!(names[2].starts_with("add"));
    }

    #[test]
    fn neighbors_of_graph_input_and_parameter() {
        let ir = conv_bn_relu();
        let g = build_graph(&ir).unwrap();
        let x = g.value_id("x").unwrap();
        let n = g.neighbors(x).unwrap();
        assert_eq!(n.len(), 1); // only the conv consumes it
        let scale = g.value_id(&format!("{}_scale", ir.nodes[1].name)).unwrap();
        let bn_ops = g.neighbors(scale).unwrap();
        assert_eq!(bn_ops.len(), 1);
        assert_eq!(g.node(bn_ops[0]).name, ir.nodes[1].name);
    }

    #[test]
    fn neighbors_rejects_operator_nodes_and_unknown_ids() {
        let ir = conv_bn_relu();
        let g = build_graph(&ir).unwrap();
        let op = g.operator_nodes()[0];
        assert!(g.neighbors(op).is_err());
        assert!(g.neighbors(NodeId(99999)).is_err());
    }

    #[test]
    fn neighbors_deterministic_across_rebuilds() {
        let ir = conv_bn_relu();
        let g1 = build_graph(&ir).unwrap();
        let g2 = build_graph(&ir).unwrap();
        for n in g1.nodes() {
            if n.kind != CGNodeKind::Operator {
                let a: Vec<String> =
                    g1.neighbors(n.id).unwrap().iter().map(|&o| g1.node(o).name.clone()).collect();
                let b: Vec<String> = g2
                    .neighbors(g2.value_id(&n.name).unwrap())
                    .unwrap()
                    .iter()
                    .map(|&o| g2.node(o).name.clone())
                    .collect();
                assert_eq!(a, b);
            }
        }
    }
}

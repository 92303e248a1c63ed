//! Programmatic model construction.
//!
//! Builds ModelIR values directly (no file round trip), with seeded random
//! parameters. Used by the bundled fixtures and by tests; also handy for
//! constructing small models in downstream code.

use crate::error::{Error, Result};
use crate::onnx::{infer_shapes, AttrValue, ModelIR, OpType, OperatorSpec, ValuePort};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub struct ModelBuilder {
    graph_name: String,
    rng: ChaCha8Rng,
    nodes: Vec<OperatorSpec>,
    initializers: IndexMap<String, Tensor>,
    inputs: Vec<ValuePort>,
    outputs: Vec<String>,
    shapes: BTreeMap<String, Vec<usize>>,
    counter: usize,
}

impl ModelBuilder {
    pub fn new(graph_name: &str, seed: u64) -> Self {
        Self {
            graph_name: graph_name.to_string(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            nodes: Vec::new(),
            initializers: IndexMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            shapes: BTreeMap::new(),
            counter: 0,
        }
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> String {
        self.inputs.push(ValuePort { name: name.to_string(), shape: shape.to_vec() });
        self.shapes.insert(name.to_string(), shape.to_vec());
        name.to_string()
    }

    pub fn shape_of(&self, value: &str) -> &[usize] {
        &self.shapes[value]
    }

    fn fresh(&mut self, prefix: &str) -> String {
        self.counter += 1;
        format!("{}_{}", prefix, self.counter)
    }

    fn random_tensor(&mut self, shape: Vec<usize>, scale: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-scale..scale)).collect();
        Tensor::new(shape, data).unwrap()
    }

    pub fn add_initializer(&mut self, name: &str, t: Tensor) {
        self.shapes.insert(name.to_string(), t.shape().to_vec());
        self.initializers.insert(name.to_string(), t);
    }

    /// Push a node, inferring and recording its output shape.
    fn push(
        &mut self,
        op_type: OpType,
        name: String,
        inputs: Vec<String>,
        attrs: BTreeMap<String, AttrValue>,
    ) -> String {
        let out = format!("{}_out", name);
        let node = OperatorSpec { name, op_type, inputs, outputs: vec![out.clone()], attrs };
        let shape = crate::onnx::shape_of_node(&node, &self.shapes)
            .unwrap_or_else(|e| panic!("builder produced an invalid node: {}", e));
        self.shapes.insert(out.clone(), shape);
        self.nodes.push(node);
        out
    }

    pub fn conv(
        &mut self,
        prefix: &str,
        x: &str,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        group: usize,
    ) -> String {
        let cin = self.shapes[x][1];
        assert_eq!(cin % group, 0, "builder: Cin {} not divisible by group {}", cin, group);
        let name = self.fresh(prefix);
        let wname = format!("{}_w", name);
        let bname = format!("{}_b", name);
        let scale = (2.0 / (cin / group * k * k) as f32).sqrt();
        let w = self.random_tensor(vec![cout, cin / group, k, k], scale);
        let b = self.random_tensor(vec![cout], 0.1);
        self.add_initializer(&wname, w);
        self.add_initializer(&bname, b);
        let mut attrs = BTreeMap::new();
        attrs.insert("group".into(), AttrValue::Int(group as i64));
        attrs.insert("strides".into(), AttrValue::Ints(vec![stride as i64; 2]));
        attrs.insert(
            "pads".into(),
            AttrValue::Ints(vec![pad as i64, pad as i64, pad as i64, pad as i64]),
        );
        attrs.insert("kernel_shape".into(), AttrValue::Ints(vec![k as i64; 2]));
        self.push(OpType::Conv, name, vec![x.to_string(), wname, bname], attrs)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: &str) -> String {
        let c = self.shapes[x][1];
        let name = self.fresh(prefix);
        let scale_t = {
            let d = (0..c).map(|_| self.rng.gen_range(0.5..1.5)).collect();
            Tensor::new(vec![c], d).unwrap()
        };
        let bias_t = self.random_tensor(vec![c], 0.1);
        let mean_t = self.random_tensor(vec![c], 0.1);
        let var_t = {
            let d = (0..c).map(|_| self.rng.gen_range(0.5..1.5)).collect();
            Tensor::new(vec![c], d).unwrap()
        };
        let names: Vec<String> =
            ["scale", "bias", "mean", "var"].iter().map(|s| format!("{}_{}", name, s)).collect();
        self.add_initializer(&names[0], scale_t);
        self.add_initializer(&names[1], bias_t);
        self.add_initializer(&names[2], mean_t);
        self.add_initializer(&names[3], var_t);
        let mut attrs = BTreeMap::new();
        attrs.insert("epsilon".into(), AttrValue::Float(1e-5));
        let inputs = vec![
            x.to_string(),
            names[0].clone(),
            names[1].clone(),
            names[2].clone(),
            names[3].clone(),
        ];
        self.push(OpType::BatchNormalization, name, inputs, attrs)
    }

    pub fn relu(&mut self, x: &str) -> String {
        let name = self.fresh("relu");
        self.push(OpType::Relu, name, vec![x.to_string()], BTreeMap::new())
    }

    pub fn sigmoid(&mut self, x: &str) -> String {
        let name = self.fresh("sigmoid");
        self.push(OpType::Sigmoid, name, vec![x.to_string()], BTreeMap::new())
    }

    pub fn identity(&mut self, x: &str) -> String {
        let name = self.fresh("identity");
        self.push(OpType::Identity, name, vec![x.to_string()], BTreeMap::new())
    }

    pub fn softmax(&mut self, x: &str) -> String {
        let name = self.fresh("softmax");
        let mut attrs = BTreeMap::new();
        attrs.insert("axis".into(), AttrValue::Int(-1));
        self.push(OpType::Softmax, name, vec![x.to_string()], attrs)
    }

    pub fn add(&mut self, a: &str, b: &str) -> String {
        let name = self.fresh("add");
        self.push(OpType::Add, name, vec![a.to_string(), b.to_string()], BTreeMap::new())
    }

    pub fn concat(&mut self, axis: i64, xs: &[&str]) -> String {
        let name = self.fresh("concat");
        let mut attrs = BTreeMap::new();
        attrs.insert("axis".into(), AttrValue::Int(axis));
        self.push(OpType::Concat, name, xs.iter().map(|s| s.to_string()).collect(), attrs)
    }

    pub fn max_pool(&mut self, x: &str, k: usize, stride: usize) -> String {
        let name = self.fresh("maxpool");
        let mut attrs = BTreeMap::new();
        attrs.insert("kernel_shape".into(), AttrValue::Ints(vec![k as i64; 2]));
        attrs.insert("strides".into(), AttrValue::Ints(vec![stride as i64; 2]));
        self.push(OpType::MaxPool, name, vec![x.to_string()], attrs)
    }

    pub fn avg_pool(&mut self, x: &str, k: usize, stride: usize) -> String {
        let name = self.fresh("avgpool");
        let mut attrs = BTreeMap::new();
        attrs.insert("kernel_shape".into(), AttrValue::Ints(vec![k as i64; 2]));
        attrs.insert("strides".into(), AttrValue::Ints(vec![stride as i64; 2]));
        self.push(OpType::AveragePool, name, vec![x.to_string()], attrs)
    }

    pub fn global_avg_pool(&mut self, x: &str) -> String {
        let name = self.fresh("gap");
        self.push(OpType::GlobalAveragePool, name, vec![x.to_string()], BTreeMap::new())
    }

    pub fn flatten(&mut self, x: &str) -> String {
        let name = self.fresh("flatten");
        let mut attrs = BTreeMap::new();
        attrs.insert("axis".into(), AttrValue::Int(1));
        self.push(OpType::Flatten, name, vec![x.to_string()], attrs)
    }

    /// Gemm with a weight stored as (N, K) when `trans_b`, else (K, N).
    pub fn gemm(&mut self, prefix: &str, x: &str, n: usize, trans_b: bool, bias: bool) -> String {
        let k = self.shapes[x][1];
        let name = self.fresh(prefix);
        let wname = format!("{}_w", name);
        let scale = (2.0 / k as f32).sqrt();
        let w = if trans_b {
            self.random_tensor(vec![n, k], scale)
        } else {
            self.random_tensor(vec![k, n], scale)
        };
        self.add_initializer(&wname, w);
        let mut inputs = vec![x.to_string(), wname];
        if bias {
            let bname = format!("{}_b", name);
            let b = self.random_tensor(vec![n], 0.1);
            self.add_initializer(&bname, b);
            inputs.push(bname);
        }
        let mut attrs = BTreeMap::new();
        if trans_b {
            attrs.insert("transB".into(), AttrValue::Int(1));
        }
        self.push(OpType::Gemm, name, inputs, attrs)
    }

    pub fn matmul(&mut self, prefix: &str, x: &str, n: usize) -> String {
        let k = self.shapes[x][1];
        let name = self.fresh(prefix);
        let wname = format!("{}_w", name);
        let scale = (2.0 / k as f32).sqrt();
        let w = self.random_tensor(vec![k, n], scale);
        self.add_initializer(&wname, w);
        self.push(OpType::MatMul, name, vec![x.to_string(), wname], BTreeMap::new())
    }

    /// Escape hatch for tests and unusual layouts: push an arbitrary node.
    pub fn raw_node(
        &mut self,
        op_type: OpType,
        name: &str,
        inputs: Vec<String>,
        attrs: BTreeMap<String, AttrValue>,
    ) -> String {
        self.push(op_type, name.to_string(), inputs, attrs)
    }

    pub fn output(&mut self, value: &str) {
        self.outputs.push(value.to_string());
    }

    pub fn build(self) -> Result<ModelIR> {
        let graph_outputs = self
            .outputs
            .iter()
            .map(|name| {
                let shape = self.shapes.get(name).cloned().ok_or_else(|| {
                    Error::Malformed(format!("declared output '{}' was never produced", name))
                })?;
                Ok(ValuePort { name: clone_name(name), shape })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ir = ModelIR {
            graph_name: self.graph_name,
            ir_version: 8,
            opset_version: 13,
            producer_name: "prunnx".into(),
            producer_version: env!("CARGO_PKG_VERSION").into(),
            graph_inputs: self.inputs,
            graph_outputs,
            nodes: self.nodes,
            initializers: self.initializers,
            int_initializers: IndexMap::new(),
            value_shapes: BTreeMap::new(),
            symbolic_batch: BTreeMap::new(),
        };
        infer_shapes(&mut ir)?;
        Ok(ir)
    }
}

fn clone_name(s: &str) -> String {
    s.to_string()
}

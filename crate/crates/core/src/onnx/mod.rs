//! ONNX model I/O and the in-memory model IR.
//!
//! Loading normalizes the file into a single internal dialect: Constant nodes
//! become initializers, Gemm alpha/beta are folded into the parameter tensors,
//! BatchNormalization training outputs are trimmed, nodes are topologically
//! sorted, and symbolic batch dimensions are normalized to 1 (and restored on
//! save).

pub mod proto;
mod shape;

pub use shape::{broadcast, gemm_dims, infer_shapes, window_geometry, WindowGeometry};
pub(crate) use shape::infer_node as shape_of_node;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use prost::Message;
use std::collections::{BTreeMap, HashSet};

/// Minimum supported opset version for the default ONNX domain.
pub const MIN_OPSET: i64 = 11;

/// Operators understood by the toolkit (v1 set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpType {
    Conv,
    Gemm,
    MatMul,
    BatchNormalization,
    Add,
    Relu,
    Sigmoid,
    MaxPool,
    AveragePool,
    GlobalAveragePool,
    Flatten,
    Concat,
    Softmax,
    Identity,
}

impl OpType {
    pub fn parse(s: &str) -> Option<OpType> {
        Some(match s {
            "Conv" => OpType::Conv,
            "Gemm" => OpType::Gemm,
            "MatMul" => OpType::MatMul,
            "BatchNormalization" => OpType::BatchNormalization,
            "Add" => OpType::Add,
            "Relu" => OpType::Relu,
            "Sigmoid" => OpType::Sigmoid,
            "MaxPool" => OpType::MaxPool,
            "AveragePool" => OpType::AveragePool,
            "GlobalAveragePool" => OpType::GlobalAveragePool,
            "Flatten" => OpType::Flatten,
            "Concat" => OpType::Concat,
            "Softmax" => OpType::Softmax,
            "Identity" => OpType::Identity,
            _ => return None,
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OpType::Conv => "Conv",
            OpType::Gemm => "Gemm",
            OpType::MatMul => "MatMul",
            OpType::BatchNormalization => "BatchNormalization",
            OpType::Add => "Add",
            OpType::Relu => "Relu",
            OpType::Sigmoid => "Sigmoid",
            OpType::MaxPool => "MaxPool",
            OpType::AveragePool => "AveragePool",
            OpType::GlobalAveragePool => "GlobalAveragePool",
            OpType::Flatten => "Flatten",
            OpType::Concat => "Concat",
            OpType::Softmax => "Softmax",
            OpType::Identity => "Identity",
        }
    }

    /// Every operator in the v1 set, for the generated operator reference.
    pub fn all() -> &'static [OpType] {
        &[
            OpType::Conv,
            OpType::Gemm,
            OpType::MatMul,
            OpType::BatchNormalization,
            OpType::Add,
            OpType::Relu,
            OpType::Sigmoid,
            OpType::MaxPool,
            OpType::AveragePool,
            OpType::GlobalAveragePool,
            OpType::Flatten,
            OpType::Concat,
            OpType::Softmax,
            OpType::Identity,
        ]
    }
}

/// Scalar or list attribute value.
#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Ints(Vec<i64>),
    Float(f32),
    Floats(Vec<f32>),
    Str(String),
}

/// One operator instance: type, positional value names, attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpec {
    pub name: String,
    pub op_type: OpType,
    /// Positional input value names; an empty string marks an omitted optional.
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attrs: BTreeMap<String, AttrValue>,
}

impl OperatorSpec {
    pub fn attr_i64(&self, name: &str, default: i64) -> i64 {
        match self.attrs.get(name) {
            Some(AttrValue::Int(v)) => *v,
            _ => default,
        }
    }

    pub fn attr_f32(&self, name: &str, default: f32) -> f32 {
        match self.attrs.get(name) {
            Some(AttrValue::Float(v)) => *v,
            _ => default,
        }
    }

    pub fn attr_ints(&self, name: &str) -> Option<&[i64]> {
        match self.attrs.get(name) {
            Some(AttrValue::Ints(v)) => Some(v),
            _ => None,
        }
    }

    pub fn set_attr_i64(&mut self, name: &str, v: i64) {
        self.attrs.insert(name.to_string(), AttrValue::Int(v));
    }

    /// Non-empty input names.
    pub fn present_inputs(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().filter(|s| !s.is_empty()).map(|s| s.as_str())
    }
}

/// Named value with a fully static (normalized) shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ValuePort {
    pub name: String,
    pub shape: Vec<usize>,
}

/// In-memory model: the unit every other module operates on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelIR {
    pub graph_name: String,
    pub ir_version: i64,
    pub opset_version: i64,
    pub producer_name: String,
    pub producer_version: String,
    pub graph_inputs: Vec<ValuePort>,
    pub graph_outputs: Vec<ValuePort>,
    pub nodes: Vec<OperatorSpec>,
    /// Float parameters, in file order.
    pub initializers: IndexMap<String, Tensor>,
    /// Int64 tensors (shape-style constants) passed through opaquely.
    pub int_initializers: IndexMap<String, (Vec<usize>, Vec<i64>)>,
    /// Populated by `infer_shapes`: every value name -> static shape.
    pub value_shapes: BTreeMap<String, Vec<usize>>,
    /// Graph input/output names whose batch axis was symbolic in the file,
    /// mapped to the original dim_param, restored on save.
    pub symbolic_batch: BTreeMap<String, String>,
}

impl ModelIR {
    pub fn initializer(&self, name: &str) -> Option<&Tensor> {
        self.initializers.get(name)
    }

    pub fn is_initializer(&self, name: &str) -> bool {
        self.initializers.contains_key(name) || self.int_initializers.contains_key(name)
    }

    pub fn value_shape(&self, name: &str) -> Option<&[usize]> {
        self.value_shapes.get(name).map(|s| s.as_slice())
    }

    pub fn node(&self, name: &str) -> Option<&OperatorSpec> {
        self.nodes.iter().find(|n| n.name == name)
    }
}

fn dims_to_usize(dims: &[i64], name: &str) -> Result<Vec<usize>> {
    dims.iter()
        .map(|&d| {
            usize::try_from(d).map_err(|_| {
                Error::Malformed(format!("tensor '{}' has negative dimension {}", name, d))
            })
        })
        .collect()
}

fn tensor_from_proto(tp: &proto::TensorProto) -> Result<ParsedInit> {
    use proto::tensor_proto::DataType;
    if tp.data_location == Some(proto::tensor_proto::DataLocation::External as i32) {
        return Err(Error::Malformed(format!(
            "initializer '{}' uses external data, which is not supported",
            tp.name
        )));
    }
    let dims = dims_to_usize(&tp.dims, &tp.name)?;
    let numel: usize = dims.iter().product();
    let dtype = DataType::try_from(tp.data_type)
        .unwrap_or(DataType::Undefined);
    match dtype {
        DataType::Float => {
            let data: Vec<f32> = if !tp.raw_data.is_empty() {
                if tp.raw_data.len() != numel * 4 {
                    return Err(Error::Malformed(format!(
                        "initializer '{}': raw payload is {} bytes, shape wants {}",
                        tp.name,
                        tp.raw_data.len(),
                        numel * 4
                    )));
                }
                tp.raw_data
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect()
            } else {
                tp.float_data.clone()
            };
            if data.len() != numel {
                return Err(Error::Malformed(format!(
                    "initializer '{}': {} values for shape {:?}",
                    tp.name,
                    data.len(),
                    dims
                )));
            }
            Ok(ParsedInit::Float(Tensor::new(dims, data)?))
        }
        DataType::Int64 => {
            let data: Vec<i64> = if !tp.raw_data.is_empty() {
                if tp.raw_data.len() != numel * 8 {
                    return Err(Error::Malformed(format!(
                        "initializer '{}': raw payload is {} bytes, shape wants {}",
                        tp.name,
                        tp.raw_data.len(),
                        numel * 8
                    )));
                }
                tp.raw_data
                    .chunks_exact(8)
                    .map(|b| i64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
                    .collect()
            } else {
                tp.int64_data.clone()
            };
            if data.len() != numel {
                return Err(Error::Malformed(format!(
                    "initializer '{}': {} values for shape {:?}",
                    tp.name,
                    data.len(),
                    dims
                )));
            }
            Ok(ParsedInit::Int64(dims, data))
        }
        other => Err(Error::Malformed(format!(
            "initializer '{}' has dtype {}; only FLOAT parameters (and INT64 shape tensors) are supported",
            tp.name,
            other.as_str_name()
        ))),
    }
}

enum ParsedInit {
    Float(Tensor),
    Int64(Vec<usize>, Vec<i64>),
}

fn attrs_from_proto(node: &proto::NodeProto) -> Result<BTreeMap<String, AttrValue>> {
    use proto::attribute_proto::AttributeType as AT;
    let mut out = BTreeMap::new();
    for a in &node.attribute {
        let at = AT::try_from(a.r#type).unwrap_or(AT::Undefined);
        let v = match at {
            AT::Float => AttrValue::Float(a.f),
            AT::Int => AttrValue::Int(a.i),
            AT::Ints => AttrValue::Ints(a.ints.clone()),
            AT::Floats => AttrValue::Floats(a.floats.clone()),
            AT::String => AttrValue::Str(String::from_utf8_lossy(&a.s).into_owned()),
            other => {
                return Err(Error::Malformed(format!(
                    "node '{}': attribute '{}' has unsupported type {:?}",
                    node.name, a.name, other
                )))
            }
        };
        out.insert(a.name.clone(), v);
    }
    Ok(out)
}

fn value_info_shape(vi: &proto::ValueInfoProto) -> Result<(Vec<usize>, Option<String>)> {
    let ty = vi
        .r#type
        .as_ref()
        .and_then(|t| t.value.as_ref())
        .ok_or_else(|| Error::Malformed(format!("value '{}' has no tensor type", vi.name)))?;
    let proto::type_proto::Value::TensorType(tt) = ty;
    if tt.elem_type != proto::tensor_proto::DataType::Float as i32 {
        return Err(Error::Malformed(format!(
            "graph value '{}' is not a float tensor",
            vi.name
        )));
    }
    let shape = tt
        .shape
        .as_ref()
        .ok_or_else(|| Error::Malformed(format!("value '{}' has no shape", vi.name)))?;
    let mut dims = Vec::with_capacity(shape.dim.len());
    let mut symbolic = None;
    for (axis, d) in shape.dim.iter().enumerate() {
        use proto::tensor_shape_proto::dimension::Value as DV;
        match &d.value {
            Some(DV::DimValue(v)) if *v > 0 => dims.push(*v as usize),
            Some(DV::DimValue(_)) | None if axis == 0 => {
                symbolic = Some("N".to_string());
                dims.push(1);
            }
            Some(DV::DimParam(p)) if axis == 0 => {
                symbolic = Some(p.clone());
                dims.push(1);
            }
            _ => {
                return Err(Error::Malformed(format!(
                    "value '{}': axis {} is not a static dimension (only the batch axis may be symbolic)",
                    vi.name, axis
                )))
            }
        }
    }
    Ok((dims, symbolic))
}

/// Stable topological sort of nodes (Kahn, original index as tie-break).
fn sort_topological(
    nodes: Vec<OperatorSpec>,
    known: &HashSet<String>,
) -> Result<Vec<OperatorSpec>> {
    let mut defined: HashSet<String> = known.clone();
    let mut remaining: Vec<Option<OperatorSpec>> = nodes.into_iter().map(Some).collect();
    let mut ordered = Vec::with_capacity(remaining.len());
    loop {
        let mut progressed = false;
        for slot in remaining.iter_mut() {
            let ready = match slot {
                Some(n) => n.present_inputs().all(|i| defined.contains(i)),
                None => false,
            };
            if ready {
                let n = slot.take().unwrap();
                for o in &n.outputs {
                    defined.insert(o.clone());
                }
                ordered.push(n);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    if let Some(stuck) = remaining.iter().flatten().next() {
        let missing: Vec<&str> =
            stuck.present_inputs().filter(|i| !defined.contains(*i)).collect();
        return Err(Error::Malformed(format!(
            "node '{}' has unresolved inputs {:?} (cycle or dangling name)",
            stuck.name, missing
        )));
    }
    Ok(ordered)
}

/// Parse ONNX bytes into a normalized ModelIR.
pub fn load_model(bytes: &[u8]) -> Result<ModelIR> {
    let model = proto::ModelProto::decode(bytes)?;
    let graph = model
        .graph
        .ok_or_else(|| Error::Malformed("model has no graph".into()))?;
    if graph.node.is_empty() {
        return Err(Error::Malformed("no nodes".into()));
    }

    let opset_version = graph_opset(&model.opset_import)?;

    // initializers
    let mut initializers: IndexMap<String, Tensor> = IndexMap::new();
    let mut int_initializers: IndexMap<String, (Vec<usize>, Vec<i64>)> = IndexMap::new();
    for tp in &graph.initializer {
        if tp.name.is_empty() {
            return Err(Error::Malformed("initializer without a name".into()));
        }
        match tensor_from_proto(tp)? {
            ParsedInit::Float(t) => {
                initializers.insert(tp.name.clone(), t);
            }
            ParsedInit::Int64(dims, data) => {
                int_initializers.insert(tp.name.clone(), (dims, data));
            }
        }
    }

    // graph inputs, skipping initializer-backed entries (pre-opset-13 exports)
    let mut graph_inputs = Vec::new();
    let mut symbolic_batch = BTreeMap::new();
    for vi in &graph.input {
        if initializers.contains_key(&vi.name) || int_initializers.contains_key(&vi.name) {
            continue;
        }
        let (shape, symbolic) = value_info_shape(vi)?;
        if let Some(p) = symbolic {
            symbolic_batch.insert(vi.name.clone(), p);
        }
        graph_inputs.push(ValuePort { name: vi.name.clone(), shape });
    }
    if graph_inputs.is_empty() {
        return Err(Error::Malformed("graph has no (non-initializer) inputs".into()));
    }

    let mut graph_outputs = Vec::new();
    for vi in &graph.output {
        let (shape, symbolic) = value_info_shape(vi)?;
        if let Some(p) = symbolic {
            symbolic_batch.insert(vi.name.clone(), p);
        }
        graph_outputs.push(ValuePort { name: vi.name.clone(), shape });
    }
    if graph_outputs.is_empty() {
        return Err(Error::Malformed("graph has no outputs".into()));
    }

    // nodes: fold Constant, map to the supported set
    let mut nodes: Vec<OperatorSpec> = Vec::new();
    for (idx, np) in graph.node.iter().enumerate() {
        if !np.domain.is_empty() && np.domain != "ai.onnx" {
            return Err(Error::UnsupportedOperator {
                op_type: format!("{}::{}", np.domain, np.op_type),
                node: np.name.clone(),
            });
        }
        let node_name = if np.name.is_empty() {
            format!("{}_{}", np.op_type.to_lowercase(), idx)
        } else {
            np.name.clone()
        };
        if np.op_type == "Constant" {
            let out = np.output.first().cloned().ok_or_else(|| {
                Error::Malformed(format!("Constant node '{}' has no output", node_name))
            })?;
            let attr = np
                .attribute
                .iter()
                .find(|a| a.name == "value")
                .and_then(|a| a.t.as_ref())
                .ok_or_else(|| {
                    Error::Malformed(format!(
                        "Constant node '{}' carries no tensor 'value' attribute",
                        node_name
                    ))
                })?;
            match tensor_from_proto(attr)? {
                ParsedInit::Float(t) => {
                    initializers.insert(out, t);
                }
                ParsedInit::Int64(dims, data) => {
                    int_initializers.insert(out, (dims, data));
                }
            }
            continue;
        }
        let op_type = OpType::parse(&np.op_type).ok_or_else(|| Error::UnsupportedOperator {
            op_type: np.op_type.clone(),
            node: node_name.clone(),
        })?;
        nodes.push(OperatorSpec {
            name: node_name,
            op_type,
            inputs: np.input.clone(),
            outputs: np.output.clone(),
            attrs: attrs_from_proto(np)?,
        });
    }
    if nodes.is_empty() {
        return Err(Error::Malformed("no nodes".into()));
    }

    // unique output names
    let mut seen = HashSet::new();
    for n in &nodes {
        for o in &n.outputs {
            if !o.is_empty() && !seen.insert(o.clone()) {
                return Err(Error::Malformed(format!("value '{}' produced twice", o)));
            }
        }
    }

    let consumed: HashSet<String> = nodes
        .iter()
        .flat_map(|n| n.present_inputs().map(|s| s.to_string()))
        .collect();
    let output_names: HashSet<String> =
        graph_outputs.iter().map(|p| p.name.clone()).collect();

    // normalize per-node quirks
    for n in &mut nodes {
        match n.op_type {
            OpType::BatchNormalization | OpType::MaxPool => {
                // drop unused training/index outputs so one output remains
                while n.outputs.len() > 1 {
                    let last = n.outputs.last().unwrap();
                    if consumed.contains(last) || output_names.contains(last) {
                        return Err(Error::Malformed(format!(
                            "node '{}': secondary output '{}' is consumed, which is not supported",
                            n.name, last
                        )));
                    }
                    n.outputs.pop();
                }
            }
            _ => {}
        }
    }

    // fold Gemm alpha/beta into the parameters
    fold_gemm_scalars(&mut nodes, &mut initializers)?;

    let mut known: HashSet<String> =
        graph_inputs.iter().map(|p| p.name.clone()).collect();
    known.extend(initializers.keys().cloned());
    known.extend(int_initializers.keys().cloned());
    let nodes = sort_topological(nodes, &known)?;

    // every graph output must be produced
    let produced: HashSet<&String> = nodes.iter().flat_map(|n| n.outputs.iter()).collect();
    for p in &graph_outputs {
        if !produced.contains(&p.name) && !known.contains(&p.name) {
            return Err(Error::Malformed(format!(
                "graph output '{}' is never produced",
                p.name
            )));
        }
    }

    Ok(ModelIR {
        graph_name: graph.name,
        ir_version: model.ir_version.max(7),
        opset_version,
        producer_name: model.producer_name,
        producer_version: model.producer_version,
        graph_inputs,
        graph_outputs,
        nodes,
        initializers,
        int_initializers,
        value_shapes: BTreeMap::new(),
        symbolic_batch,
    })
}

fn graph_opset(imports: &[proto::OperatorSetIdProto]) -> Result<i64> {
    let mut version = None;
    for imp in imports {
        if imp.domain.is_empty() || imp.domain == "ai.onnx" {
            version = Some(imp.version);
        }
    }
    let v = version.ok_or_else(|| Error::Malformed("model imports no default-domain opset".into()))?;
    if v < MIN_OPSET {
        return Err(Error::Malformed(format!(
            "opset {} is below the supported minimum {}",
            v, MIN_OPSET
        )));
    }
    Ok(v)
}

fn fold_gemm_scalars(
    nodes: &mut [OperatorSpec],
    initializers: &mut IndexMap<String, Tensor>,
) -> Result<()> {
    // count weight-name uses so shared parameters are duplicated before scaling
    let mut uses: BTreeMap<String, usize> = BTreeMap::new();
    for n in nodes.iter() {
        for i in n.present_inputs() {
            *uses.entry(i.to_string()).or_default() += 1;
        }
    }
    for n in nodes.iter_mut() {
        if n.op_type != OpType::Gemm {
            continue;
        }
        let alpha = n.attr_f32("alpha", 1.0);
        let beta = n.attr_f32("beta", 1.0);
        for (attr, scale, input_idx) in [("alpha", alpha, 1usize), ("beta", beta, 2usize)] {
            n.attrs.remove(attr);
            if scale == 1.0 {
                continue;
            }
            let Some(name) = n.inputs.get(input_idx).filter(|s| !s.is_empty()).cloned() else {
                continue;
            };
            let t = initializers.get(&name).ok_or_else(|| {
                Error::Malformed(format!(
                    "Gemm '{}': cannot fold {}={} into dynamic input '{}'",
                    n.name, attr, scale, name
                ))
            })?;
            let scaled = Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|v| v * scale).collect(),
            )?;
            if uses.get(&name).copied().unwrap_or(0) > 1 {
                let fresh = format!("{}_{}_{}", name, attr, n.name);
                initializers.insert(fresh.clone(), scaled);
                n.inputs[input_idx] = fresh;
            } else {
                initializers.insert(name, scaled);
            }
        }
    }
    Ok(())
}

/// Serialize a ModelIR to ONNX bytes. The IR must pass shape inference.
pub fn save_model(ir: &ModelIR) -> Result<Vec<u8>> {
    // structural validation (dangling names surface here)
    let mut checked = ir.clone();
    infer_shapes(&mut checked)?;

    let value_port = |p: &ValuePort| -> proto::ValueInfoProto {
        let dims = p
            .shape
            .iter()
            .enumerate()
            .map(|(axis, &d)| proto::tensor_shape_proto::Dimension {
                value: Some(if axis == 0 && ir.symbolic_batch.contains_key(&p.name) {
                    proto::tensor_shape_proto::dimension::Value::DimParam(
                        ir.symbolic_batch[&p.name].clone(),
                    )
                } else {
                    proto::tensor_shape_proto::dimension::Value::DimValue(d as i64)
                }),
            })
            .collect();
        proto::ValueInfoProto {
            name: p.name.clone(),
            r#type: Some(proto::TypeProto {
                value: Some(proto::type_proto::Value::TensorType(proto::type_proto::Tensor {
                    elem_type: proto::tensor_proto::DataType::Float as i32,
                    shape: Some(proto::TensorShapeProto { dim: dims }),
                })),
            }),
        }
    };

    let mut initializer = Vec::with_capacity(ir.initializers.len() + ir.int_initializers.len());
    for (name, t) in &ir.initializers {
        let mut raw = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        initializer.push(proto::TensorProto {
            dims: t.shape().iter().map(|&d| d as i64).collect(),
            data_type: proto::tensor_proto::DataType::Float as i32,
            name: name.clone(),
            raw_data: raw,
            ..Default::default()
        });
    }
    for (name, (dims, data)) in &ir.int_initializers {
        let mut raw = Vec::with_capacity(data.len() * 8);
        for v in data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        initializer.push(proto::TensorProto {
            dims: dims.iter().map(|&d| d as i64).collect(),
            data_type: proto::tensor_proto::DataType::Int64 as i32,
            name: name.clone(),
            raw_data: raw,
            ..Default::default()
        });
    }

    let node = ir
        .nodes
        .iter()
        .map(|n| proto::NodeProto {
            input: n.inputs.clone(),
            output: n.outputs.clone(),
            name: n.name.clone(),
            op_type: n.op_type.as_str().to_string(),
            domain: String::new(),
            attribute: n
                .attrs
                .iter()
                .map(|(k, v)| attr_to_proto(k, v))
                .collect(),
        })
        .collect();

    let model = proto::ModelProto {
        ir_version: ir.ir_version,
        opset_import: vec![proto::OperatorSetIdProto {
            domain: String::new(),
            version: ir.opset_version,
        }],
        producer_name: ir.producer_name.clone(),
        producer_version: ir.producer_version.clone(),
        graph: Some(proto::GraphProto {
            node,
            name: ir.graph_name.clone(),
            initializer,
            input: ir.graph_inputs.iter().map(value_port).collect(),
            output: ir.graph_outputs.iter().map(value_port).collect(),
            value_info: Vec::new(),
        }),
        ..Default::default()
    };
    Ok(model.encode_to_vec())
}

fn attr_to_proto(name: &str, v: &AttrValue) -> proto::AttributeProto {
    use proto::attribute_proto::AttributeType as AT;
    let mut a = proto::AttributeProto {
        name: name.to_string(),
        ..Default::default()
    };
    match v {
        AttrValue::Int(i) => {
            a.r#type = AT::Int as i32;
            a.i = *i;
        }
        AttrValue::Ints(is) => {
            a.r#type = AT::Ints as i32;
            a.ints = is.clone();
        }
        AttrValue::Float(f) => {
            a.r#type = AT::Float as i32;
            a.f = *f;
        }
        AttrValue::Floats(fs) => {
            a.r#type = AT::Floats as i32;
            a.floats = fs.clone();
        }
        AttrValue::Str(s) => {
            a.r#type = AT::String as i32;
            a.s = s.clone().into_bytes();
        }
    }
    a
}

pub fn load_file(path: &std::path::Path) -> Result<ModelIR> {
    let bytes = std::fs::read(path)?;
    load_model(&bytes)
}

pub fn save_file(ir: &ModelIR, path: &std::path::Path) -> Result<()> {
    let bytes = save_model(ir)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

//! Static shape inference over the v1 operator set.

use super::{ModelIR, OpType, OperatorSpec};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Numpy-style broadcast of two shapes (align right, extents equal or 1).
pub fn broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Per-axis geometry of a convolution or pooling window.
#[derive(Debug, Clone)]
pub struct WindowGeometry {
    pub kernel: Vec<usize>,
    pub strides: Vec<usize>,
    /// pads as (begin, end) per spatial axis
    pub pads: Vec<(usize, usize)>,
    pub dilations: Vec<usize>,
    pub ceil_mode: bool,
}

impl WindowGeometry {
    pub fn out_extent(&self, axis: usize, input: usize) -> Result<usize> {
        let eff_k = self.dilations[axis] * (self.kernel[axis] - 1) + 1;
        let padded = input + self.pads[axis].0 + self.pads[axis].1;
        if padded < eff_k {
            return Err(Error::Dimension {
                op: "window",
                detail: format!("input extent {} smaller than kernel {}", padded, eff_k),
            });
        }
        let num = padded - eff_k;
        let out = if self.ceil_mode {
            num.div_ceil(self.strides[axis]) + 1
        } else {
            num / self.strides[axis] + 1
        };
        Ok(out)
    }
}

/// Extract window geometry from Conv/MaxPool/AveragePool attributes, resolving
/// auto_pad into explicit pads for the given input spatial extents.
pub fn window_geometry(
    op: &OperatorSpec,
    spatial_in: &[usize],
    kernel: Vec<usize>,
) -> Result<WindowGeometry> {
    let n = kernel.len();
    let to_usize = |v: &[i64]| -> Vec<usize> { v.iter().map(|&x| x.max(0) as usize).collect() };
    let strides = op
        .attr_ints("strides")
        .map(to_usize)
        .unwrap_or_else(|| vec![1; n]);
    let dilations = op
        .attr_ints("dilations")
        .map(to_usize)
        .unwrap_or_else(|| vec![1; n]);
    if strides.len() != n || dilations.len() != n {
        return Err(Error::Shape {
            node: op.name.clone(),
            detail: "strides/dilations rank does not match the kernel".into(),
        });
    }
    let auto_pad = match op.attrs.get("auto_pad") {
        Some(super::AttrValue::Str(s)) => s.clone(),
        _ => "NOTSET".to_string(),
    };
    let pads: Vec<(usize, usize)> = match auto_pad.as_str() {
        "NOTSET" | "" => {
            let raw = op
                .attr_ints("pads")
                .map(to_usize)
                .unwrap_or_else(|| vec![0; 2 * n]);
            if raw.len() != 2 * n {
                return Err(Error::Shape {
                    node: op.name.clone(),
                    detail: format!("pads has {} entries, wants {}", raw.len(), 2 * n),
                });
            }
            (0..n).map(|i| (raw[i], raw[n + i])).collect()
        }
        "VALID" => vec![(0, 0); n],
        "SAME_UPPER" | "SAME_LOWER" => {
            let mut pads = Vec::with_capacity(n);
            for i in 0..n {
                let eff_k = dilations[i] * (kernel[i] - 1) + 1;
                let out = spatial_in[i].div_ceil(strides[i]);
                let total =
                    ((out - 1) * strides[i] + eff_k).saturating_sub(spatial_in[i]);
                let small = total / 2;
                let big = total - small;
                if auto_pad == "SAME_UPPER" {
                    pads.push((small, big));
                } else {
                    pads.push((big, small));
                }
            }
            pads
        }
        other => {
            return Err(Error::Shape {
                node: op.name.clone(),
                detail: format!("auto_pad mode '{}' is not supported", other),
            })
        }
    };
    Ok(WindowGeometry { kernel, strides, pads, dilations, ceil_mode: op.attr_i64("ceil_mode", 0) != 0 })
}

fn shape_err(node: &OperatorSpec, detail: impl Into<String>) -> Error {
    Error::Shape { node: node.name.clone(), detail: detail.into() }
}

fn get<'a>(
    shapes: &'a BTreeMap<String, Vec<usize>>,
    node: &OperatorSpec,
    name: &str,
) -> Result<&'a [usize]> {
    shapes
        .get(name)
        .map(|s| s.as_slice())
        .ok_or_else(|| shape_err(node, format!("input '{}' has no shape", name)))
}

/// Resolve Gemm operand roles: returns (m, k, n) and validates operand shapes.
pub fn gemm_dims(
    node: &OperatorSpec,
    a: &[usize],
    w: &[usize],
) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || w.len() != 2 {
        return Err(shape_err(node, format!("Gemm wants rank-2 operands, got {:?} and {:?}", a, w)));
    }
    let trans_a = node.attr_i64("transA", 0) != 0;
    let trans_b = node.attr_i64("transB", 0) != 0;
    let (m, k) = if trans_a { (a[1], a[0]) } else { (a[0], a[1]) };
    let (k2, n) = if trans_b { (w[1], w[0]) } else { (w[0], w[1]) };
    if k != k2 {
        return Err(shape_err(node, format!("Gemm reduction dims differ: {} vs {}", k, k2)));
    }
    Ok((m, k, n))
}

pub(crate) fn infer_node(
    node: &OperatorSpec,
    shapes: &BTreeMap<String, Vec<usize>>,
) -> Result<Vec<usize>> {
    match node.op_type {
        OpType::Conv => {
            let x = get(shapes, node, &node.inputs[0])?;
            let w = get(shapes, node, &node.inputs[1])?;
            if x.len() != 4 || w.len() != 4 {
                return Err(shape_err(node, format!("Conv wants 4-D tensors, got {:?} / {:?}", x, w)));
            }
            let group = node.attr_i64("group", 1).max(1) as usize;
            let (cin, cout) = (x[1], w[0]);
            if w[1] * group != cin {
                return Err(shape_err(
                    node,
                    format!("input channels {} != weight {} x group {}", cin, w[1], group),
                ));
            }
            if cout % group != 0 {
                return Err(shape_err(node, format!("output channels {} not divisible by group {}", cout, group)));
            }
            if let Some(b) = node.inputs.get(2).filter(|s| !s.is_empty()) {
                let bs = get(shapes, node, b)?;
                if bs != [cout] {
                    return Err(shape_err(node, format!("bias shape {:?} != [{}]", bs, cout)));
                }
            }
            if let Some(ks) = node.attr_ints("kernel_shape") {
                let want: Vec<usize> = ks.iter().map(|&v| v as usize).collect();
                if want != w[2..] {
                    return Err(shape_err(node, "kernel_shape attribute disagrees with the weight"));
                }
            }
            let geo = window_geometry(node, &x[2..], w[2..].to_vec())?;
            let h = geo.out_extent(0, x[2]).map_err(|e| shape_err(node, e.to_string()))?;
            let wd = geo.out_extent(1, x[3]).map_err(|e| shape_err(node, e.to_string()))?;
            Ok(vec![x[0], cout, h, wd])
        }
        OpType::Gemm => {
            let a = get(shapes, node, &node.inputs[0])?;
            let w = get(shapes, node, &node.inputs[1])?;
            let (m, _k, n) = gemm_dims(node, a, w)?;
            if let Some(c) = node.inputs.get(2).filter(|s| !s.is_empty()) {
                let cs = get(shapes, node, c)?;
                match broadcast(cs, &[m, n]) {
                    Some(b) if b == [m, n] => {}
                    _ => {
                        return Err(shape_err(node, format!("bias {:?} does not broadcast to [{}, {}]", cs, m, n)))
                    }
                }
            }
            Ok(vec![m, n])
        }
        OpType::MatMul => {
            let a = get(shapes, node, &node.inputs[0])?;
            let b = get(shapes, node, &node.inputs[1])?;
            if a.len() != 2 || b.len() != 2 {
                return Err(shape_err(node, "MatMul supports rank-2 operands only"));
            }
            if a[1] != b[0] {
                return Err(shape_err(node, format!("MatMul dims {:?} x {:?}", a, b)));
            }
            Ok(vec![a[0], b[1]])
        }
        OpType::BatchNormalization => {
            let x = get(shapes, node, &node.inputs[0])?;
            if x.len() < 2 {
                return Err(shape_err(node, "BatchNormalization wants rank >= 2"));
            }
            let c = x[1];
            for idx in 1..=4 {
                let name = node.inputs.get(idx).filter(|s| !s.is_empty()).ok_or_else(|| {
                    shape_err(node, "BatchNormalization wants scale, bias, mean, var")
                })?;
                let s = get(shapes, node, name)?;
                if s != [c] {
                    return Err(shape_err(node, format!("parameter '{}' shape {:?} != [{}]", name, s, c)));
                }
            }
            Ok(x.to_vec())
        }
        OpType::Add => {
            let a = get(shapes, node, &node.inputs[0])?;
            let b = get(shapes, node, &node.inputs[1])?;
            broadcast(a, b).ok_or_else(|| shape_err(node, format!("cannot broadcast {:?} with {:?}", a, b)))
        }
        OpType::Relu | OpType::Sigmoid | OpType::Identity => {
            Ok(get(shapes, node, &node.inputs[0])?.to_vec())
        }
        OpType::Softmax => {
            let x = get(shapes, node, &node.inputs[0])?;
            let default_axis = if node.attrs.contains_key("axis") { 0 } else { -1 };
            let axis = node.attr_i64("axis", default_axis);
            let resolved = if axis < 0 { axis + x.len() as i64 } else { axis };
            if resolved < 0 || resolved >= x.len() as i64 {
                return Err(shape_err(node, format!("softmax axis {} out of range", axis)));
            }
            Ok(x.to_vec())
        }
        OpType::MaxPool | OpType::AveragePool => {
            let x = get(shapes, node, &node.inputs[0])?;
            if x.len() != 4 {
                return Err(shape_err(node, "pooling wants a 4-D input"));
            }
            let kernel = node
                .attr_ints("kernel_shape")
                .map(|k| k.iter().map(|&v| v as usize).collect::<Vec<_>>())
                .ok_or_else(|| shape_err(node, "pooling wants kernel_shape"))?;
            if kernel.len() != 2 {
                return Err(shape_err(node, "pooling supports 2 spatial dims"));
            }
            let geo = window_geometry(node, &x[2..], kernel)?;
            let h = geo.out_extent(0, x[2]).map_err(|e| shape_err(node, e.to_string()))?;
            let w = geo.out_extent(1, x[3]).map_err(|e| shape_err(node, e.to_string()))?;
            Ok(vec![x[0], x[1], h, w])
        }
        OpType::GlobalAveragePool => {
            let x = get(shapes, node, &node.inputs[0])?;
            if x.len() != 4 {
                return Err(shape_err(node, "GlobalAveragePool wants a 4-D input"));
            }
            Ok(vec![x[0], x[1], 1, 1])
        }
        OpType::Flatten => {
            let x = get(shapes, node, &node.inputs[0])?;
            let axis = node.attr_i64("axis", 1);
            let resolved = if axis < 0 { axis + x.len() as i64 } else { axis };
            if resolved < 0 || resolved > x.len() as i64 {
                return Err(shape_err(node, format!("flatten axis {} out of range", axis)));
            }
            let a = resolved as usize;
            Ok(vec![x[..a].iter().product(), x[a..].iter().product()])
        }
        OpType::Concat => {
            let axis = node.attr_i64("axis", i64::MIN);
            if axis == i64::MIN {
                return Err(shape_err(node, "Concat wants an axis"));
            }
            let first = get(shapes, node, &node.inputs[0])?.to_vec();
            let rank = first.len() as i64;
            let resolved = if axis < 0 { axis + rank } else { axis };
            if resolved < 0 || resolved >= rank {
                return Err(shape_err(node, format!("concat axis {} out of range", axis)));
            }
            let a = resolved as usize;
            let mut out = first;
            for name in node.inputs.iter().skip(1) {
                let s = get(shapes, node, name)?;
                if s.len() != out.len() {
                    return Err(shape_err(node, "concat inputs have different ranks"));
                }
                for (i, (&x, &y)) in out.iter().zip(s).enumerate() {
                    if i != a && x != y {
                        return Err(shape_err(node, format!("concat extent mismatch on axis {}", i)));
                    }
                }
                out[a] += s[a];
            }
            Ok(out)
        }
    }
}

/// Populate `ir.value_shapes` with a static shape for every value. Idempotent.
pub fn infer_shapes(ir: &mut ModelIR) -> Result<()> {
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for p in &ir.graph_inputs {
        shapes.insert(p.name.clone(), p.shape.clone());
    }
    for (name, t) in &ir.initializers {
        shapes.insert(name.clone(), t.shape().to_vec());
    }
    for (name, (dims, _)) in &ir.int_initializers {
        shapes.insert(name.clone(), dims.clone());
    }
    for node in &ir.nodes {
        for i in node.present_inputs() {
            if !shapes.contains_key(i) {
                return Err(Error::Shape {
                    node: node.name.clone(),
                    detail: format!("input '{}' is undefined", i),
                });
            }
        }
        let out = infer_node(node, &shapes)?;
        match node.outputs.len() {
            1 => {
                shapes.insert(node.outputs[0].clone(), out);
            }
            n => {
                return Err(Error::Shape {
                    node: node.name.clone(),
                    detail: format!("expected a single output after normalization, found {}", n),
                })
            }
        }
    }
    for p in &ir.graph_outputs {
        match shapes.get(&p.name) {
            Some(s) if *s == p.shape => {}
            Some(s) => {
                return Err(Error::Shape {
                    node: format!("graph output '{}'", p.name),
                    detail: format!("declared {:?} but inferred {:?}", p.shape, s),
                })
            }
            None => {
                return Err(Error::Shape {
                    node: format!("graph output '{}'", p.name),
                    detail: "never produced".into(),
                })
            }
        }
    }
    ir.value_shapes = shapes;
    Ok(())
}

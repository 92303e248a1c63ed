//! Reference CPU evaluator for the supported operator set, plus calibration
//! capture (im2col unfolding) and BatchNormalization recalibration.
//!
//! Execution is single-threaded with fixed loop order and f64 accumulators:
//! identical inputs produce bit-identical outputs. Shapes are derived from the
//! actual runtime tensors, so batch sizes may differ from the analysis shapes.

use crate::error::{Error, Result};
use crate::onnx::{broadcast, window_geometry, ModelIR, OpType, OperatorSpec, WindowGeometry};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// A target layer's input in matrix form: Gemm features x samples, Conv the
/// unfolded patch matrix (Cin*kH*kW) x (samples * Hout * Wout). Row layout is
/// channel-major, then kernel row, then kernel column.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f32>,
    pub kind: CaptureKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CaptureKind {
    /// Fully connected: rows = input features.
    Dense,
    /// Convolution: rows = Cin * kH * kW, with per-group structure.
    Conv { group: usize, cin_g: usize, kernel: usize },
}

impl LayerCapture {
    pub fn matrix(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.data.clone()).expect("capture layout")
    }

    fn append_columns(&mut self, block: &[f32], rows: usize, cols: usize) {
        debug_assert_eq!(rows, self.rows);
        // stored row-major; appending columns means interleaving rows
        let mut merged = Vec::with_capacity(self.data.len() + block.len());
        let old_cols = self.cols;
        for r in 0..rows {
            merged.extend_from_slice(&self.data[r * old_cols..(r + 1) * old_cols]);
            merged.extend_from_slice(&block[r * cols..(r + 1) * cols]);
        }
        self.data = merged;
        self.cols += cols;
    }
}

fn runtime_geometry(spec: &OperatorSpec, x: &Tensor, kernel: Vec<usize>) -> Result<WindowGeometry> {
    window_geometry(spec, &x.shape()[2..], kernel)
}

fn conv_forward(spec: &OperatorSpec, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, cin_g, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let group = spec.attr_i64("group", 1).max(1) as usize;
    if cin_g * group != cin || cout % group != 0 {
        return Err(Error::Shape {
            node: spec.name.clone(),
            detail: format!("conv channels {}x{} vs weight {:?} group {}", n, cin, w.shape(), group),
        });
    }
    let geo = runtime_geometry(spec, x, vec![kh, kw])?;
    let oh = geo.out_extent(0, h)?;
    let ow = geo.out_extent(1, wd)?;
    let cout_g = cout / group;
    let mut out = vec![0.0f32; n * cout * oh * ow];
    let xs = x.data();
    let ws = w.data();
    for ni in 0..n {
        for o in 0..cout {
            let g = o / cout_g;
            let bias = b.map(|t| t.data()[o] as f64).unwrap_or(0.0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ky in 0..kh {
                            let iy = (oy * geo.strides[0] + ky * geo.dilations[0]) as isize
                                - geo.pads[0].0 as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * geo.strides[1] + kx * geo.dilations[1]) as isize
                                    - geo.pads[1].0 as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xs[((ni * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = ws[((o * cin_g + ci) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((ni * cout + o) * oh + oy) * ow + ox] = (acc + bias) as f32;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

fn gemm_forward(spec: &OperatorSpec, a: &Tensor, w: &Tensor, c: Option<&Tensor>) -> Result<Tensor> {
    let trans_a = spec.attr_i64("transA", 0) != 0;
    let trans_b = spec.attr_i64("transB", 0) != 0;
    let (m, k) = if trans_a { (a.dim(1), a.dim(0)) } else { (a.dim(0), a.dim(1)) };
    let (k2, n) = if trans_b { (w.dim(1), w.dim(0)) } else { (w.dim(0), w.dim(1)) };
    if k != k2 {
        return Err(Error::Shape {
            node: spec.name.clone(),
            detail: format!("Gemm dims {:?} x {:?}", a.shape(), w.shape()),
        });
    }
    let av = a.data();
    let wv = w.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for kk in 0..k {
                let x = if trans_a { av[kk * m + i] } else { av[i * k + kk] };
                let y = if trans_b { wv[j * k + kk] } else { wv[kk * n + j] };
                acc += x as f64 * y as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    if let Some(bias) = c {
        // unidirectional broadcast to (m, n)
        let bs = bias.shape();
        for i in 0..m {
            for j in 0..n {
                let bv = match bs.len() {
                    0 => bias.data()[0],
                    1 => bias.data()[if bs[0] == 1 { 0 } else { j }],
                    2 => {
                        let bi = if bs[0] == 1 { 0 } else { i };
                        let bj = if bs[1] == 1 { 0 } else { j };
                        bias.data()[bi * bs[1] + bj]
                    }
                    _ => {
                        return Err(Error::Shape {
                            node: spec.name.clone(),
                            detail: "Gemm bias rank > 2".into(),
                        })
                    }
                };
                out[i * n + j] += bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn batch_norm_forward(
    spec: &OperatorSpec,
    x: &Tensor,
    scale: &Tensor,
    bias: &Tensor,
    mean: &Tensor,
    var: &Tensor,
) -> Result<Tensor> {
    let eps = spec.attr_f32("epsilon", 1e-5);
    let c = x.dim(1);
    let spatial = x.numel() / (x.dim(0) * c);
    let mut out = vec![0.0f32; x.numel()];
    for nb in 0..x.dim(0) {
        for ch in 0..c {
            let s = scale.data()[ch];
            let b = bias.data()[ch];
            let m = mean.data()[ch];
            let denom = (var.data()[ch] + eps).sqrt();
            let base = (nb * c + ch) * spatial;
            for i in 0..spatial {
                out[base + i] = s * (x.data()[base + i] - m) / denom + b;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn add_forward(spec: &OperatorSpec, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = broadcast(a.shape(), b.shape()).ok_or_else(|| Error::Shape {
        node: spec.name.clone(),
        detail: format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
    })?;
    let rank = shape.len();
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0f32; numel];
    let mut idx = vec![0usize; rank];
    let pick = |t: &Tensor, idx: &[usize]| -> f32 {
        let ts = t.shape();
        let off = rank - ts.len();
        let mut flat = 0usize;
        for (i, &e) in ts.iter().enumerate() {
            let coord = if e == 1 { 0 } else { idx[off + i] };
            flat = flat * e + coord;
        }
        t.data()[flat]
    };
    for v in out.iter_mut() {
        *v = pick(a, &idx) + pick(b, &idx);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(shape, out)
}

fn pool_forward(spec: &OperatorSpec, x: &Tensor, max: bool) -> Result<Tensor> {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let kernel = spec
        .attr_ints("kernel_shape")
        .map(|k| k.iter().map(|&v| v as usize).collect::<Vec<_>>())
        .ok_or_else(|| Error::Shape { node: spec.name.clone(), detail: "missing kernel_shape".into() })?;
    let geo = runtime_geometry(spec, x, kernel)?;
    let include_pad = spec.attr_i64("count_include_pad", 0) != 0;
    let oh = geo.out_extent(0, h)?;
    let ow = geo.out_extent(1, wd)?;
    let mut out = vec![0.0f32; n * c * oh * ow];
    for ni in 0..n {
        for ch in 0..c {
            let base_in = (ni * c + ch) * h * wd;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = if max { f32::NEG_INFINITY } else { 0.0 };
                    let mut count = 0usize;
                    for ky in 0..geo.kernel[0] {
                        let iy = (oy * geo.strides[0] + ky) as isize - geo.pads[0].0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..geo.kernel[1] {
                            let ix = (ox * geo.strides[1] + kx) as isize - geo.pads[1].0 as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let v = x.data()[base_in + iy as usize * wd + ix as usize];
                            if max {
                                acc = acc.max(v);
                            } else {
                                acc += v;
                            }
                            count += 1;
                        }
                    }
                    let v = if max {
                        acc
                    } else {
                        let denom = if include_pad { geo.kernel[0] * geo.kernel[1] } else { count };
                        acc / denom.max(1) as f32
                    };
                    out[((ni * c + ch) * oh + oy) * ow + ox] = v;
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

fn softmax_forward(spec: &OperatorSpec, x: &Tensor, opset: i64) -> Result<Tensor> {
    let rank = x.rank() as i64;
    let default_axis = if opset >= 13 { -1 } else { 1 };
    let raw = spec.attr_i64("axis", default_axis);
    let axis = if raw < 0 { raw + rank } else { raw } as usize;
    let extent = x.dim(axis);
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = vec![0.0f32; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let index = |k: usize| (o * extent + k) * inner + i;
            let mut m = f32::NEG_INFINITY;
            for k in 0..extent {
                m = m.max(x.data()[index(k)]);
            }
            let mut denom = 0.0f64;
            for k in 0..extent {
                denom += ((x.data()[index(k)] - m) as f64).exp();
            }
            for k in 0..extent {
                out[index(k)] = (((x.data()[index(k)] - m) as f64).exp() / denom) as f32;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn eval_node(spec: &OperatorSpec, inputs: &[Option<&Tensor>], opset: i64) -> Result<Tensor> {
    let need = |i: usize| -> Result<&Tensor> {
        inputs.get(i).copied().flatten().ok_or_else(|| Error::Shape {
            node: spec.name.clone(),
            detail: format!("missing input {}", i),
        })
    };
    match spec.op_type {
        OpType::Conv => conv_forward(spec, need(0)?, need(1)?, inputs.get(2).copied().flatten()),
        OpType::Gemm => gemm_forward(spec, need(0)?, need(1)?, inputs.get(2).copied().flatten()),
        OpType::MatMul => {
            let a = need(0)?;
            let b = need(1)?;
            crate::tensor::matmul(a, b)
        }
        OpType::BatchNormalization => {
            batch_norm_forward(spec, need(0)?, need(1)?, need(2)?, need(3)?, need(4)?)
        }
        OpType::Add => add_forward(spec, need(0)?, need(1)?),
        OpType::Relu => {
            let x = need(0)?;
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())
        }
        OpType::Sigmoid => {
            let x = need(0)?;
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            )
        }
        OpType::Identity => Ok(need(0)?.clone()),
        OpType::Softmax => softmax_forward(spec, need(0)?, opset),
        OpType::MaxPool => pool_forward(spec, need(0)?, true),
        OpType::AveragePool => pool_forward(spec, need(0)?, false),
        OpType::GlobalAveragePool => {
            let x = need(0)?;
            let (n, c) = (x.dim(0), x.dim(1));
            let spatial = x.numel() / (n * c);
            let mut out = vec![0.0f32; n * c];
            for i in 0..n * c {
                let mut acc = 0.0f64;
                for s in 0..spatial {
                    acc += x.data()[i * spatial + s] as f64;
                }
                out[i] = (acc / spatial as f64) as f32;
            }
            Tensor::new(vec![n, c, 1, 1], out)
        }
        OpType::Flatten => {
            let x = need(0)?;
            let raw = spec.attr_i64("axis", 1);
            let axis = if raw < 0 { raw + x.rank() as i64 } else { raw } as usize;
            let d0: usize = x.shape()[..axis].iter().product();
            let d1: usize = x.shape()[axis..].iter().product();
            Tensor::new(vec![d0, d1], x.data().to_vec())
        }
        OpType::Concat => {
            let raw = spec.attr_i64("axis", i64::MIN);
            let tensors: Vec<&Tensor> =
                (0..spec.inputs.len()).map(need).collect::<Result<_>>()?;
            let rank = tensors[0].rank() as i64;
            let axis = if raw < 0 { raw + rank } else { raw } as usize;
            let mut shape = tensors[0].shape().to_vec();
            shape[axis] = tensors.iter().map(|t| t.dim(axis)).sum();
            let outer: usize = shape[..axis].iter().product();
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in &tensors {
                    let chunk = t.numel() / outer;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, out)
        }
    }
}

fn execute(
    ir: &ModelIR,
    inputs: &BTreeMap<String, Tensor>,
    mut tap: impl FnMut(&OperatorSpec, &[Option<&Tensor>]),
) -> Result<BTreeMap<String, Tensor>> {
    let mut values: BTreeMap<String, Tensor> = BTreeMap::new();
    for p in &ir.graph_inputs {
        let t = inputs.get(&p.name).ok_or_else(|| Error::Shape {
            node: p.name.clone(),
            detail: "missing graph input".into(),
        })?;
        if t.shape()[1..] != p.shape[1..] {
            return Err(Error::Shape {
                node: p.name.clone(),
                detail: format!("input shape {:?} does not match {:?} (batch free)", t.shape(), p.shape),
            });
        }
        values.insert(p.name.clone(), t.clone());
    }
    for node in &ir.nodes {
        let resolved: Vec<Option<&Tensor>> = node
            .inputs
            .iter()
            .map(|name| {
                if name.is_empty() {
                    None
                } else {
                    values.get(name).or_else(|| ir.initializers.get(name))
                }
            })
            .collect();
        for (name, r) in node.inputs.iter().zip(&resolved) {
            if !name.is_empty() && r.is_none() {
                return Err(Error::Shape {
                    node: node.name.clone(),
                    detail: format!("input '{}' unavailable at execution", name),
                });
            }
        }
        tap(node, &resolved);
        let out = eval_node(node, &resolved, ir.opset_version)?;
        values.insert(node.outputs[0].clone(), out);
    }
    let mut outputs = BTreeMap::new();
    for p in &ir.graph_outputs {
        let t = values.get(&p.name).ok_or_else(|| Error::Shape {
            node: p.name.clone(),
            detail: "graph output never produced".into(),
        })?;
        outputs.insert(p.name.clone(), t.clone());
    }
    Ok(outputs)
}

/// Run the model on named inputs; BatchNormalization uses stored running
/// statistics (inference mode).
pub fn run_forward(ir: &ModelIR, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
    execute(ir, inputs, |_, _| {})
}

/// Convenience wrapper for single-input models.
pub fn run_forward_single(ir: &ModelIR, input: &Tensor) -> Result<Tensor> {
    let mut m = BTreeMap::new();
    m.insert(ir.graph_inputs[0].name.clone(), input.clone());
    let out = run_forward(ir, &m)?;
    Ok(out.into_iter().next().expect("at least one output").1)
}

/// Unfold a conv input into the patch matrix (Cin*kH*kW) x (N*Hout*Wout).
pub fn unfold_conv_input(x: &Tensor, geo: &WindowGeometry) -> Tensor {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (kh, kw) = (geo.kernel[0], geo.kernel[1]);
    let oh = geo.out_extent(0, h).expect("unfold geometry");
    let ow = geo.out_extent(1, w).expect("unfold geometry");
    let rows = c * kh * kw;
    let cols = n * oh * ow;
    let mut out = vec![0.0f32; rows * cols];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                for ni in 0..n {
                    for oy in 0..oh {
                        let iy = (oy * geo.strides[0] + ky * geo.dilations[0]) as isize
                            - geo.pads[0].0 as isize;
                        for ox in 0..ow {
                            let ix = (ox * geo.strides[1] + kx * geo.dilations[1]) as isize
                                - geo.pads[1].0 as isize;
                            let col = (ni * oh + oy) * ow + ox;
                            let v = if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                            };
                            out[r * cols + col] = v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows, cols], out).expect("unfold layout")
}

/// Is this node a capture target (a layer the OBSPA solver reconstructs)?
pub fn is_capture_target(ir: &ModelIR, node: &OperatorSpec) -> bool {
    matches!(node.op_type, OpType::Conv | OpType::Gemm | OpType::MatMul)
        && node.inputs.len() >= 2
        && ir.initializers.contains_key(&node.inputs[1])
}

/// Forward all batches, recording each target layer's input in matrix form.
pub fn capture_layer_inputs(
    ir: &ModelIR,
    batches: &[Tensor],
) -> Result<BTreeMap<String, LayerCapture>> {
    if batches.is_empty() {
        return Err(Error::Calibration("no calibration batches".into()));
    }
    let mut captures: BTreeMap<String, LayerCapture> = BTreeMap::new();
    for batch in batches {
        let mut inputs = BTreeMap::new();
        inputs.insert(ir.graph_inputs[0].name.clone(), batch.clone());
        let mut tap_error = None;
        execute(ir, &inputs, |node, resolved| {
            if tap_error.is_some() || !is_capture_target(ir, node) {
                return;
            }
            let x = match resolved[0] {
                Some(t) => t,
                None => return,
            };
            let w = ir.initializers.get(&node.inputs[1]).expect("capture target weight");
            let result = capture_one(node, x, w);
            match result {
                Ok((block, rows, cols, kind)) => {
                    captures
                        .entry(node.name.clone())
                        .or_insert_with(|| LayerCapture { rows, cols: 0, data: Vec::new(), kind })
                        .append_columns(&block, rows, cols);
                }
                Err(e) => tap_error = Some(e),
            }
        })?;
        if let Some(e) = tap_error {
            return Err(e);
        }
    }
    Ok(captures)
}

fn capture_one(
    node: &OperatorSpec,
    x: &Tensor,
    w: &Tensor,
) -> Result<(Vec<f32>, usize, usize, CaptureKind)> {
    match node.op_type {
        OpType::Conv => {
            let geo = runtime_geometry(node, x, vec![w.dim(2), w.dim(3)])?;
            let unfolded = unfold_conv_input(x, &geo);
            let rows = unfolded.dim(0);
            let cols = unfolded.dim(1);
            let group = node.attr_i64("group", 1).max(1) as usize;
            let kind = CaptureKind::Conv { group, cin_g: w.dim(1), kernel: w.dim(2) * w.dim(3) };
            Ok((unfolded.into_data(), rows, cols, kind))
        }
        OpType::Gemm => {
            let trans_a = node.attr_i64("transA", 0) != 0;
            let (m, k) = if trans_a { (x.dim(1), x.dim(0)) } else { (x.dim(0), x.dim(1)) };
            // features x samples
            let mut out = vec![0.0f32; k * m];
            for i in 0..m {
                for kk in 0..k {
                    let v = if trans_a { x.data()[kk * m + i] } else { x.data()[i * k + kk] };
                    out[kk * m + i] = v;
                }
            }
            Ok((out, k, m, CaptureKind::Dense))
        }
        OpType::MatMul => {
            let (m, k) = (x.dim(0), x.dim(1));
            let mut out = vec![0.0f32; k * m];
            for i in 0..m {
                for kk in 0..k {
                    out[kk * m + i] = x.data()[i * k + kk];
                }
            }
            Ok((out, k, m, CaptureKind::Dense))
        }
        _ => Err(Error::Internal("capture_one on a non-target".into())),
    }
}

/// Replace every BatchNormalization's running statistics with the full-dataset
/// batch statistics of its input, using two forward sweeps: the first updates
/// all layers from the original activations, the second recomputes them with
/// upstream layers already updated.
pub fn recalibrate_bn(ir: &ModelIR, batches: &[Tensor]) -> Result<ModelIR> {
    if batches.is_empty() {
        return Err(Error::Calibration("recalibrate_bn wants at least one batch".into()));
    }
    let mut model = ir.clone();
    for _sweep in 0..2 {
        // per BN node: per-channel (sum, sumsq, count)
        let mut stats: BTreeMap<String, (Vec<f64>, Vec<f64>, u64)> = BTreeMap::new();
        for batch in batches {
            let mut inputs = BTreeMap::new();
            inputs.insert(model.graph_inputs[0].name.clone(), batch.clone());
            let snapshot = model.clone();
            execute(&snapshot, &inputs, |node, resolved| {
                if node.op_type != OpType::BatchNormalization {
                    return;
                }
                let x = match resolved[0] {
                    Some(t) => t,
                    None => return,
                };
                let c = x.dim(1);
                let spatial = x.numel() / (x.dim(0) * c);
                let entry = stats
                    .entry(node.name.clone())
                    .or_insert_with(|| (vec![0.0; c], vec![0.0; c], 0));
                for nb in 0..x.dim(0) {
                    for ch in 0..c {
                        let base = (nb * c + ch) * spatial;
                        for i in 0..spatial {
                            let v = x.data()[base + i] as f64;
                            entry.0[ch] += v;
                            entry.1[ch] += v * v;
                        }
                    }
                }
                entry.2 += (x.dim(0) * spatial) as u64;
            })?;
        }
        for node in &model.nodes {
            if node.op_type != OpType::BatchNormalization {
                continue;
            }
            let Some((sum, sumsq, count)) = stats.get(&node.name) else { continue };
            let n = *count as f64;
            let c = sum.len();
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ch in 0..c {
                let m = sum[ch] / n;
                let v = (sumsq[ch] / n - m * m).max(0.0);
                mean[ch] = m as f32;
                var[ch] = (v as f32).max(1e-5);
            }
            let mean_name = node.inputs[3].clone();
            let var_name = node.inputs[4].clone();
            model.initializers.insert(mean_name, Tensor::new(vec![c], mean)?);
            model.initializers.insert(var_name, Tensor::new(vec![c], var)?);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::ModelBuilder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut b = ModelBuilder::new("id", 1);
        let x = b.input("x", &[1, 4]);
        let y = b.identity(&x);
        b.output(&y);
        let ir = b.build().unwrap();
        let input = rand_input(&[1, 4], 7);
        let out = run_forward_single(&ir, &input).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut b = ModelBuilder::new("r", 1);
        let x = b.input("x", &[1, 2]);
        let y = b.relu(&x);
        b.output(&y);
        let ir = b.build().unwrap();
        let out =
            run_forward_single(&ir, &Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0]);
    }

    #[test]
    fn mlp_matches_straight_line_oracle() {
        let mut b = ModelBuilder::new("mlp", 5);
        let x = b.input("x", &[1, 6]);
        let h = b.gemm("fc1", &x, 5, true, true);
        let r = b.relu(&h);
        let y = b.gemm("fc2", &r, 3, false, true);
        b.output(&y);
        let ir = b.build().unwrap();

        let input = rand_input(&[1, 6], 42);
        let got = run_forward_single(&ir, &input).unwrap();

        // independent straight-line math on the raw initializers
        let w1 = ir.initializers.get(&ir.nodes[0].inputs[1]).unwrap(); // (5, 6) transB
        let b1 = ir.initializers.get(&ir.nodes[0].inputs[2]).unwrap();
        let w2 = ir.initializers.get(&ir.nodes[2].inputs[1]).unwrap(); // (5, 3)
        let b2 = ir.initializers.get(&ir.nodes[2].inputs[2]).unwrap();
        let mut hid = vec![0.0f64; 5];
        for j in 0..5 {
            let mut acc = b1.data()[j] as f64;
            for k in 0..6 {
                acc += input.data()[k] as f64 * w1.data()[j * 6 + k] as f64;
            }
            hid[j] = acc.max(0.0);
        }
        for j in 0..3 {
            let mut acc = b2.data()[j] as f64;
            for k in 0..5 {
                acc += hid[k] * w2.data()[k * 3 + j] as f64;
            }
            assert!((got.data()[j] as f64 - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut b = ModelBuilder::new("det", 9);
        let x = b.input("x", &[1, 3, 8, 8]);
        let c = b.conv("conv", &x, 8, 3, 1, 1, 1);
        let n = b.batch_norm("bn", &c);
        let r = b.relu(&n);
        let g = b.global_avg_pool(&r);
        let f = b.flatten(&g);
        let y = b.gemm("fc", &f, 4, true, true);
        b.output(&y);
        let ir = b.build().unwrap();
        let input = rand_input(&[2, 3, 8, 8], 3);
        let a = run_forward_single(&ir, &input).unwrap();
        let b2 = run_forward_single(&ir, &input).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn capture_shapes_gemm_and_conv() {
        let mut b = ModelBuilder::new("cap", 11);
        let x = b.input("x", &[1, 3, 8, 8]);
        let c = b.conv("conv", &x, 4, 3, 1, 1, 1);
        let g = b.global_avg_pool(&c);
        let f = b.flatten(&g);
        let y = b.gemm("fc", &f, 2, true, true);
        b.output(&y);
        let ir = b.build().unwrap();
        let batches: Vec<Tensor> = (0..2).map(|i| rand_input(&[4, 3, 8, 8], i)).collect();
        let caps = capture_layer_inputs(&ir, &batches).unwrap();
        let conv_cap = &caps[&ir.nodes[0].name];
        assert_eq!(conv_cap.rows, 27);
        assert_eq!(conv_cap.cols, 8 * 64); // 8 samples x 8x8 positions
        let fc_cap = &caps[&ir.nodes[3].name];
        assert_eq!(fc_cap.rows, 4);
        assert_eq!(fc_cap.cols, 8);
    }

    #[test]
    fn im2col_identity_for_conv() {
        // weight-as-matrix x capture == direct conv output (pre-bias)
        let mut b = ModelBuilder::new("im2col", 13);
        let x = b.input("x", &[1, 3, 8, 8]);
        let c = b.conv("conv", &x, 5, 3, 2, 1, 1);
        b.output(&c);
        let ir = b.build().unwrap();
        let input = rand_input(&[1, 3, 8, 8], 21);
        let caps = capture_layer_inputs(&ir, &[input.clone()]).unwrap();
        let cap = &caps[&ir.nodes[0].name];
        let w = ir.initializers.get(&ir.nodes[0].inputs[1]).unwrap();
        let bias = ir.initializers.get(&ir.nodes[0].inputs[2]).unwrap();
        let wmat = Tensor::new(vec![5, 27], w.data().to_vec()).unwrap();
        let pre = crate::tensor::matmul(&wmat, &cap.matrix()).unwrap();
        let direct = run_forward_single(&ir, &input).unwrap();
        let (oh, ow) = (direct.dim(2), direct.dim(3));
        for o in 0..5 {
            for p in 0..oh * ow {
                let want = direct.data()[o * oh * ow + p] - bias.data()[o];
                let got = pre.data()[o * cap.cols + p];
                assert!(
                    (want - got).abs() <= 1e-6 * want.abs().max(1.0),
                    "o={} p={} want {} got {}",
                    o,
                    p,
                    want,
                    got
                );
            }
        }
    }

    #[test]
    fn bn_recalibration_recovers_batch_statistics() {
        let mut b = ModelBuilder::new("bn", 17);
        let x = b.input("x", &[1, 2, 1, 1]);
        let n = b.batch_norm("bn", &x);
        b.output(&n);
        let ir = b.build().unwrap();

        // N(3, 4) samples
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let total = 4096;
        let mut data = Vec::with_capacity(total * 2);
        for _ in 0..total * 2 {
            let g: f32 = rng.sample(rand_distr::StandardNormal);
            data.push(3.0 + 2.0 * g);
        }
        let batch = Tensor::new(vec![total, 2, 1, 1], data).unwrap();
        let recal = recalibrate_bn(&ir, &[batch]).unwrap();
        let mean = recal.initializers.get(&recal.nodes[0].inputs[3]).unwrap();
        let var = recal.initializers.get(&recal.nodes[0].inputs[4]).unwrap();
        for ch in 0..2 {
            assert!((mean.data()[ch] - 3.0).abs() < 0.15, "mean {}", mean.data()[ch]);
            assert!((var.data()[ch] - 4.0).abs() < 0.2, "var {}", var.data()[ch]);
        }
    }

    #[test]
    fn bn_recalibration_floors_constant_channels() {
        let mut b = ModelBuilder::new("bnf", 19);
        let x = b.input("x", &[1, 1, 1, 1]);
        let n = b.batch_norm("bn", &x);
        b.output(&n);
        let ir = b.build().unwrap();
        let batch = Tensor::new(vec![16, 1, 1, 1], vec![2.5; 16]).unwrap();
        let recal = recalibrate_bn(&ir, &[batch]).unwrap();
        let var = recal.initializers.get(&recal.nodes[0].inputs[4]).unwrap();
        assert_eq!(var.data()[0], 1e-5);
    }

    #[test]
    fn bn_recalibration_is_fixpoint_on_rerun() {
        let mut b = ModelBuilder::new("bn2", 23);
        let x = b.input("x", &[1, 3, 4, 4]);
        let c1 = b.conv("c1", &x, 4, 3, 1, 1, 1);
        let n1 = b.batch_norm("bn1", &c1);
        let r1 = b.relu(&n1);
        let c2 = b.conv("c2", &r1, 4, 3, 1, 1, 1);
        let n2 = b.batch_norm("bn2", &c2);
        b.output(&n2);
        let ir = b.build().unwrap();
        let batch = rand_input(&[64, 3, 4, 4], 5);
        let once = recalibrate_bn(&ir, &[batch.clone()]).unwrap();
        let twice = recalibrate_bn(&once, &[batch]).unwrap();
        for (name, t) in &once.initializers {
            let u = twice.initializers.get(name).unwrap();
            for (a, b) in t.data().iter().zip(u.data()) {
                assert!((a - b).abs() < 1e-6, "{} drifted: {} vs {}", name, a, b);
            }
        }
    }
}

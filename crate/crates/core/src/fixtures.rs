//! Small synthetic architectures with seeded random weights.
//!
//! These cover the topology families the analysis must handle: plain chains,
//! residual and bottleneck blocks, concat growth, grouped and depthwise
//! convolutions, multi-branch heads, and flatten classifiers. Used throughout
//! the test suites and handy for demos.

use crate::builder::ModelBuilder;
use crate::onnx::ModelIR;

/// Gemm -> Relu -> Gemm. Three nodes, four initializers.
pub fn mlp(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("mlp", seed);
    let x = b.input("x", &[1, 32]);
    let h = b.gemm("fc1", &x, 24, true, true);
    let r = b.relu(&h);
    let y = b.gemm("fc2", &r, 10, true, true);
    b.output(&y);
    b.build().expect("mlp fixture")
}

/// Three hidden layers; the workhorse for solver tests.
pub fn mlp3(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("mlp3", seed);
    let x = b.input("x", &[1, 24]);
    let h1 = b.gemm("fc1", &x, 32, true, true);
    let r1 = b.relu(&h1);
    let h2 = b.gemm("fc2", &r1, 24, true, true);
    let r2 = b.relu(&h2);
    let y = b.gemm("fc3", &r2, 8, true, true);
    b.output(&y);
    b.build().expect("mlp3 fixture")
}

/// A single Gemm: its only output axis is the protected model output.
pub fn plain_gemm(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("plain_gemm", seed);
    let x = b.input("x", &[1, 16]);
    let y = b.gemm("fc", &x, 8, true, true);
    b.output(&y);
    b.build().expect("plain_gemm fixture")
}

/// Two connected Gemm operators without biases, stored in the (K, N) layout.
pub fn two_gemm(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("two_gemm", seed);
    let x = b.input("x1", &[3, 4]);
    let h = b.gemm("gemm1", &x, 4, false, false);
    let y = b.gemm("gemm2", &h, 2, false, false);
    b.output(&y);
    b.build().expect("two_gemm fixture")
}

/// Conv-BN-Relu chain of the given depth, then GAP -> Flatten -> classifier.
pub fn chain_cnn(depth: usize, channels: usize, seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("chain_cnn", seed);
    let mut v = b.input("x", &[1, 3, 8, 8]);
    for i in 0..depth {
        let c = b.conv(&format!("conv{}", i), &v, channels, 3, 1, 1, 1);
        let n = b.batch_norm(&format!("bn{}", i), &c);
        v = b.relu(&n);
    }
    let g = b.global_avg_pool(&v);
    let f = b.flatten(&g);
    let y = b.gemm("fc", &f, 6, true, true);
    b.output(&y);
    b.build().expect("chain_cnn fixture")
}

/// Narrow conv chain used by the complexity sweep.
pub fn chain_for_depth(depth: usize, seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("chain_depth", seed);
    let mut v = b.input("x", &[1, 4, 4, 4]);
    for i in 0..depth {
        let c = b.conv(&format!("conv{}", i), &v, 4, 3, 1, 1, 1);
        let n = b.batch_norm(&format!("bn{}", i), &c);
        v = b.relu(&n);
    }
    let g = b.global_avg_pool(&v);
    let f = b.flatten(&g);
    let y = b.gemm("fc", &f, 4, true, true);
    b.output(&y);
    b.build().expect("chain_for_depth fixture")
}

/// VGG-style: widening convs with a MaxPool, flatten classifier, softmax head.
pub fn vgg_chain(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("vgg_chain", seed);
    let x = b.input("x", &[1, 3, 8, 8]);
    let c1 = b.conv("conv1", &x, 8, 3, 1, 1, 1);
    let r1 = b.relu(&c1);
    let c2 = b.conv("conv2", &r1, 12, 3, 1, 1, 1);
    let r2 = b.relu(&c2);
    let p = b.max_pool(&r2, 2, 2);
    let c3 = b.conv("conv3", &p, 12, 3, 1, 1, 1);
    let r3 = b.relu(&c3);
    let f = b.flatten(&r3);
    let h = b.gemm("fc1", &f, 16, true, true);
    let rh = b.relu(&h);
    let y = b.gemm("fc2", &rh, 5, true, true);
    let s = b.softmax(&y);
    b.output(&s);
    b.build().expect("vgg_chain fixture")
}

/// Two basic residual blocks with identity skips (the cross-layer coupling
/// pattern: the trunk channels of the stem and both block outputs are one
/// group).
pub fn residual_net(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("residual_net", seed);
    let x = b.input("x", &[1, 3, 8, 8]);
    let stem = b.conv("stem", &x, 8, 3, 1, 1, 1);
    let sn = b.batch_norm("stem_bn", &stem);
    let mut trunk = b.relu(&sn);
    for blk in 0..2 {
        let c1 = b.conv(&format!("blk{}_conv1", blk), &trunk, 8, 3, 1, 1, 1);
        let n1 = b.batch_norm(&format!("blk{}_bn1", blk), &c1);
        let r1 = b.relu(&n1);
        let c2 = b.conv(&format!("blk{}_conv2", blk), &r1, 8, 3, 1, 1, 1);
        let n2 = b.batch_norm(&format!("blk{}_bn2", blk), &c2);
        let a = b.add(&trunk, &n2);
        trunk = b.relu(&a);
    }
    let g = b.global_avg_pool(&trunk);
    let f = b.flatten(&g);
    let y = b.gemm("fc", &f, 6, true, true);
    b.output(&y);
    b.build().expect("residual_net fixture")
}

/// Bottleneck block with a projection (1x1 conv) skip.
pub fn bottleneck_net(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("bottleneck_net", seed);
    let x = b.input("x", &[1, 3, 8, 8]);
    let stem = b.conv("stem", &x, 8, 3, 1, 1, 1);
    let sr = b.relu(&stem);
    let c1 = b.conv("reduce", &sr, 4, 1, 1, 0, 1);
    let n1 = b.batch_norm("bn1", &c1);
    let r1 = b.relu(&n1);
    let c2 = b.conv("mid", &r1, 4, 3, 1, 1, 1);
    let n2 = b.batch_norm("bn2", &c2);
    let r2 = b.relu(&n2);
    let c3 = b.conv("expand", &r2, 12, 1, 1, 0, 1);
    let n3 = b.batch_norm("bn3", &c3);
    let proj = b.conv("proj", &sr, 12, 1, 1, 0, 1);
    let pn = b.batch_norm("proj_bn", &proj);
    let a = b.add(&n3, &pn);
    let r = b.relu(&a);
    let g = b.global_avg_pool(&r);
    let f = b.flatten(&g);
    let y = b.gemm("fc", &f, 5, true, true);
    b.output(&y);
    b.build().expect("bottleneck_net fixture")
}

/// DenseNet-style growth: each stage concatenates all previous features.
pub fn densenet_concat(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("densenet_concat", seed);
    let x = b.input("x", &[1, 3, 8, 8]);
    let x0 = b.conv("stem", &x, 6, 3, 1, 1, 1);
    let r0 = b.relu(&x0);
    let d1 = b.conv("dense1", &r0, 4, 3, 1, 1, 1);
    let rd1 = b.relu(&d1);
    let cat1 = b.concat(1, &[&r0, &rd1]);
    let d2 = b.conv("dense2", &cat1, 4, 3, 1, 1, 1);
    let rd2 = b.relu(&d2);
    let cat2 = b.concat(1, &[&r0, &rd1, &rd2]);
    let t = b.conv("transition", &cat2, 8, 1, 1, 0, 1);
    let rt = b.relu(&t);
    let g = b.global_avg_pool(&rt);
    let f = b.flatten(&g);
    let y = b.gemm("fc", &f, 5, true, true);
    b.output(&y);
    b.build().expect("densenet_concat fixture")
}

/// Grouped convolution (two groups) in the middle of a chain.
pub fn grouped_net(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("grouped_net", seed);
    let x = b.input("x", &[1, 3, 8, 8]);
    let c1 = b.conv("conv1", &x, 8, 3, 1, 1, 1);
    let n1 = b.batch_norm("bn1", &c1);
    let r1 = b.relu(&n1);
    let c2 = b.conv("grouped", &r1, 8, 3, 1, 1, 2);
    let n2 = b.batch_norm("bn2", &c2);
    let r2 = b.relu(&n2);
    let c3 = b.conv("conv3", &r2, 8, 3, 1, 1, 1);
    let r3 = b.relu(&c3);
    let g = b.global_avg_pool(&r3);
    let f = b.flatten(&g);
    let y = b.gemm("fc", &f, 5, true, true);
    b.output(&y);
    b.build().expect("grouped_net fixture")
}

/// Depthwise-separable stack: pointwise, depthwise (group = channels),
/// pointwise.
pub fn depthwise_net(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("depthwise_net", seed);
    let x = b.input("x", &[1, 3, 8, 8]);
    let pw1 = b.conv("pw1", &x, 8, 1, 1, 0, 1);
    let n1 = b.batch_norm("bn1", &pw1);
    let r1 = b.relu(&n1);
    let dw = b.conv("dw", &r1, 8, 3, 1, 1, 8);
    let n2 = b.batch_norm("bn2", &dw);
    let r2 = b.relu(&n2);
    let pw2 = b.conv("pw2", &r2, 12, 1, 1, 0, 1);
    let r3 = b.relu(&pw2);
    let g = b.global_avg_pool(&r3);
    let f = b.flatten(&g);
    let y = b.gemm("fc", &f, 5, true, true);
    b.output(&y);
    b.build().expect("depthwise_net fixture")
}

/// Two parallel conv branches joined by Add, then GAP and classifier.
pub fn multibranch_net(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("multibranch_net", seed);
    let x = b.input("x", &[1, 3, 8, 8]);
    let stem = b.conv("stem", &x, 6, 3, 1, 1, 1);
    let sr = b.relu(&stem);
    let ba = b.conv("branch_a", &sr, 8, 3, 1, 1, 1);
    let na = b.batch_norm("bn_a", &ba);
    let bb = b.conv("branch_b", &sr, 8, 1, 1, 0, 1);
    let nb = b.batch_norm("bn_b", &bb);
    let a = b.add(&na, &nb);
    let r = b.relu(&a);
    let g = b.global_avg_pool(&r);
    let f = b.flatten(&g);
    let y = b.gemm("fc", &f, 5, true, true);
    b.output(&y);
    b.build().expect("multibranch_net fixture")
}

/// Conv features into a flattened MLP head (the channel -> block expansion).
pub fn conv_flatten_mlp(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("conv_flatten_mlp", seed);
    let x = b.input("x", &[1, 3, 8, 8]);
    let c1 = b.conv("conv1", &x, 6, 3, 1, 1, 1);
    let r1 = b.relu(&c1);
    let p = b.max_pool(&r1, 2, 2);
    let f = b.flatten(&p);
    let h = b.gemm("fc1", &f, 16, true, true);
    let r2 = b.relu(&h);
    let y = b.gemm("fc2", &r2, 5, true, true);
    b.output(&y);
    b.build().expect("conv_flatten_mlp fixture")
}

/// AveragePool and Sigmoid activations instead of the usual MaxPool/Relu.
pub fn avgpool_sigmoid_net(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("avgpool_sigmoid_net", seed);
    let x = b.input("x", &[1, 3, 8, 8]);
    let c1 = b.conv("conv1", &x, 8, 3, 1, 1, 1);
    let s1 = b.sigmoid(&c1);
    let p = b.avg_pool(&s1, 2, 2);
    let c2 = b.conv("conv2", &p, 8, 3, 1, 1, 1);
    let s2 = b.sigmoid(&c2);
    let g = b.global_avg_pool(&s2);
    let f = b.flatten(&g);
    let y = b.gemm("fc", &f, 5, true, true);
    b.output(&y);
    b.build().expect("avgpool_sigmoid_net fixture")
}

/// The architecture families exercised by the master equivalence suite.
pub fn equivalence_zoo(seed: u64) -> Vec<(&'static str, ModelIR)> {
    vec![
        ("chain", chain_cnn(3, 12, seed)),
        ("vgg_chain", vgg_chain(seed + 1)),
        ("residual", residual_net(seed + 2)),
        ("bottleneck", bottleneck_net(seed + 3)),
        ("densenet_concat", densenet_concat(seed + 4)),
        ("grouped", grouped_net(seed + 5)),
        ("depthwise", depthwise_net(seed + 6)),
        ("multibranch", multibranch_net(seed + 7)),
        ("conv_flatten_mlp", conv_flatten_mlp(seed + 8)),
        ("avgpool_sigmoid", avgpool_sigmoid_net(seed + 9)),
        ("mlp3", mlp3(seed + 10)),
    ]
}

/// ResNet-50 topology (bottlenecks [3,4,6,3], projection skips) at reduced
/// input resolution; used by the complexity/wall-time checks.
pub fn resnet50_shaped(seed: u64) -> ModelIR {
    let mut b = ModelBuilder::new("resnet50_shaped", seed);
    let x = b.input("x", &[1, 3, 64, 64]);
    let stem = b.conv("stem", &x, 64, 7, 2, 3, 1);
    let sn = b.batch_norm("stem_bn", &stem);
    let sr = b.relu(&sn);
    let mut trunk = b.max_pool(&sr, 3, 2);
    let stages: [(usize, usize, usize); 4] =
        [(64, 256, 3), (128, 512, 4), (256, 1024, 6), (512, 2048, 3)];
    for (si, &(mid, out, blocks)) in stages.iter().enumerate() {
        for bi in 0..blocks {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let prefix = format!("s{}b{}", si, bi);
            let c1 = b.conv(&format!("{}_c1", prefix), &trunk, mid, 1, 1, 0, 1);
            let n1 = b.batch_norm(&format!("{}_n1", prefix), &c1);
            let r1 = b.relu(&n1);
            let c2 = b.conv(&format!("{}_c2", prefix), &r1, mid, 3, stride, 1, 1);
            let n2 = b.batch_norm(&format!("{}_n2", prefix), &c2);
            let r2 = b.relu(&n2);
            let c3 = b.conv(&format!("{}_c3", prefix), &r2, out, 1, 1, 0, 1);
            let n3 = b.batch_norm(&format!("{}_n3", prefix), &c3);
            let skip = if bi == 0 {
                let p = b.conv(&format!("{}_proj", prefix), &trunk, out, 1, stride, 0, 1);
                b.batch_norm(&format!("{}_proj_bn", prefix), &p)
            } else {
                trunk.clone()
            };
            let a = b.add(&n3, &skip);
            trunk = b.relu(&a);
        }
    }
    let g = b.global_avg_pool(&trunk);
    let f = b.flatten(&g);
    let y = b.gemm("fc", &f, 1000, true, true);
    b.output(&y);
    b.build().expect("resnet50_shaped fixture")
}

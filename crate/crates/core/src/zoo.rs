//! Reference architectures and small seeded networks used by tests, the
//! acceptance suite and the CLI's `report zoo` command.

use crate::dyadic::{dn, DyadicScale};
use crate::graph::{
    weight_shape, BatchNorm, FloatModel, LayerParams, Node, Op, QuantGraph, QuantLinear, QuantNode, QuantOp, Topology,
};
use crate::quantizer::{Granularity, QuantParams};
use crate::tensor::{pack, BitWidth, FloatTensor, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn conv(input: &str, out: usize, kernel: usize, stride: usize, padding: usize) -> Op {
    Op::Conv { input: input.into(), out_channels: out, kernel, stride, padding, bias: false, batch_norm: true }
}

fn relu(input: &str) -> Op {
    Op::Relu { input: input.into() }
}

/// ResNet18 for 224×224 ImageNet inputs, BN after every conv.
pub fn resnet18() -> Topology {
    let mut nodes = vec![
        Node::new("input", Op::Input { shape: vec![1, 3, 224, 224] }),
        Node::new("conv1", conv("input", 64, 7, 2, 3)),
        Node::new("relu1", relu("conv1")),
        Node::new("maxpool", Op::MaxPool { input: "relu1".into(), window: 3, stride: 2, padding: 1 }),
    ];
    let mut prev = "maxpool".to_string();
    let mut in_ch = 64;
    for (stage, &ch) in [64usize, 128, 256, 512].iter().enumerate() {
        for block in 0..2 {
            let p = format!("layer{}.{}", stage + 1, block);
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            nodes.push(Node::new(format!("{p}.conv1"), conv(&prev, ch, 3, stride, 1)));
            nodes.push(Node::new(format!("{p}.relu1"), relu(&format!("{p}.conv1"))));
            nodes.push(Node::new(format!("{p}.conv2"), conv(&format!("{p}.relu1"), ch, 3, 1, 1)));
            let skip = if stride != 1 || in_ch != ch {
                nodes.push(Node::new(format!("{p}.downsample"), conv(&prev, ch, 1, stride, 0)));
                format!("{p}.downsample")
            } else {
                prev.clone()
            };
            nodes.push(Node::new(format!("{p}.add"), Op::ResidualAdd { main: format!("{p}.conv2"), skip }));
            nodes.push(Node::new(format!("{p}.relu2"), relu(&format!("{p}.add"))));
            prev = format!("{p}.relu2");
            in_ch = ch;
        }
    }
    nodes.push(Node::new("avgpool", Op::AvgPool { input: prev, window: 7, stride: 1, padding: 0 }));
    nodes.push(Node::new("fc", Op::Fc { input: "avgpool".into(), out_features: 1000, bias: true }));
    Topology { name: "resnet18".into(), nodes }
}

/// Three linear layers: conv-BN-ReLU, conv-BN-ReLU, avg-pool, fc.
pub fn toy_cnn() -> Topology {
    Topology {
        name: "toy_cnn".into(),
        nodes: vec![
            Node::new("input", Op::Input { shape: vec![1, 3, 8, 8] }),
            Node::new("conv1", conv("input", 4, 3, 1, 1)),
            Node::new("relu1", relu("conv1")),
            Node::new("conv2", conv("relu1", 8, 3, 2, 1)),
            Node::new("relu2", relu("conv2")),
            Node::new("pool", Op::AvgPool { input: "relu2".into(), window: 4, stride: 4, padding: 0 }),
            Node::new("fc", Op::Fc { input: "pool".into(), out_features: 5, bias: true }),
        ],
    }
}

/// A stem conv, `blocks` two-conv residual blocks, global average pooling
/// and an fc head: `2·blocks + 2` linear layers.
pub fn residual_network(blocks: usize, channels: usize, hw: usize) -> Topology {
    let mut nodes = vec![
        Node::new("input", Op::Input { shape: vec![1, 3, hw, hw] }),
        Node::new("stem", conv("input", channels, 3, 1, 1)),
        Node::new("stem.relu", relu("stem")),
    ];
    let mut prev = "stem.relu".to_string();
    for b in 0..blocks {
        let p = format!("block{b}");
        nodes.push(Node::new(format!("{p}.conv1"), conv(&prev, channels, 3, 1, 1)));
        nodes.push(Node::new(format!("{p}.relu1"), relu(&format!("{p}.conv1"))));
        nodes.push(Node::new(format!("{p}.conv2"), conv(&format!("{p}.relu1"), channels, 3, 1, 1)));
        nodes.push(Node::new(format!("{p}.add"), Op::ResidualAdd { main: format!("{p}.conv2"), skip: prev.clone() }));
        nodes.push(Node::new(format!("{p}.relu2"), relu(&format!("{p}.add"))));
        prev = format!("{p}.relu2");
    }
    nodes.push(Node::new("pool", Op::AvgPool { input: prev, window: hw, stride: 1, padding: 0 }));
    nodes.push(Node::new("fc", Op::Fc { input: "pool".into(), out_features: 10, bias: true }));
    Topology { name: format!("residual{}", 2 * blocks + 2), nodes }
}

/// Seeded random parameters: uniform He-scaled weights and mild BN statistics.
pub fn random_model(topology: Topology, seed: u64) -> FloatModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = topology.analyze().expect("valid topology");
    let mut params = BTreeMap::new();
    for i in topology.linear_layers() {
        let node = &topology.nodes[i];
        let ws = weight_shape(&node.op, &a.shapes[a.inputs[i][0]]).expect("linear");
        let out = ws[0];
        let fan_in: usize = ws[1..].iter().product();
        let bound = (6.0 / fan_in as f32).sqrt();
        let w: Vec<f32> = (0..out * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
        let (has_bias, has_bn) = match node.op {
            Op::Conv { bias, batch_norm, .. } => (bias, batch_norm),
            Op::Fc { bias, .. } => (bias, false),
            _ => unreachable!(),
        };
        let bias = has_bias.then(|| (0..out).map(|_| rng.gen_range(-0.1f32..0.1)).collect());
        let bn = has_bn.then(|| BatchNorm {
            mean: (0..out).map(|_| rng.gen_range(-0.1f32..0.1)).collect(),
            std: (0..out).map(|_| rng.gen_range(0.5f32..1.5)).collect(),
            scale: (0..out).map(|_| rng.gen_range(0.5f32..1.5)).collect(),
            shift: (0..out).map(|_| rng.gen_range(-0.1f32..0.1)).collect(),
        });
        let weight = FloatTensor::from_vec(ws, w).expect("weight shape");
        params.insert(node.name.clone(), LayerParams { weight, bias, bn });
    }
    FloatModel::new(topology, params).expect("consistent parameters")
}

/// Seeded uniform `[-1, 1)` tensor.
pub fn random_input(shape: &[usize], seed: u64) -> FloatTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    FloatTensor::from_vec(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).expect("shape")
}

/// Two fc branches selecting one input each, summed by a residual add with
/// output scale 1. With the input `[4.4, 2.4]` at scale 0.1 the branches
/// carry 4.4 and 2.4: rounding each operand gives 4 + 2 = 6, rounding the
/// float sum gives 7.
pub fn residual_rounding_witness() -> (QuantGraph, FloatTensor) {
    let topology = Topology {
        name: "residual_rounding_witness".into(),
        nodes: vec![
            Node::new("input", Op::Input { shape: vec![1, 2] }),
            Node::new("main", Op::Fc { input: "input".into(), out_features: 1, bias: false }),
            Node::new("skip", Op::Fc { input: "input".into(), out_features: 1, bias: false }),
            Node::new("add", Op::ResidualAdd { main: "main".into(), skip: "skip".into() }),
        ],
    };
    let tenth = QuantParams::per_tensor(0.1, 0, BitWidth::B8);
    let unit = QuantParams::per_tensor(1.0, 0, BitWidth::B8);
    let select = |codes: [i32; 2]| {
        QuantOp::Linear(QuantLinear {
            bits: BitWidth::B8,
            weight: pack(&codes, BitWidth::B8, Shape::new(vec![1, 2]).unwrap()).unwrap(),
            weight_params: QuantParams {
                scales: vec![1.0],
                zero_point: 0,
                bits: BitWidth::B8,
                granularity: Granularity::PerChannel,
            },
            conv: None,
            bias: vec![0],
            bias_scales: vec![0.1],
            acc_offset: vec![0],
            rescale: vec![DyadicScale::ONE],
        })
    };
    let to_unit = dn(0.1).expect("positive ratio");
    let nodes = vec![
        QuantNode { name: "input".into(), act: tenth.clone(), relu: false, op: QuantOp::Input },
        QuantNode { name: "main".into(), act: tenth.clone(), relu: false, op: select([1, 0]) },
        QuantNode { name: "skip".into(), act: tenth, relu: false, op: select([0, 1]) },
        QuantNode {
            name: "add".into(),
            act: unit,
            relu: false,
            op: QuantOp::ResidualAdd { main: to_unit, skip: to_unit },
        },
    ];
    let bits = BTreeMap::from([("main".to_string(), 8), ("skip".to_string(), 8)]);
    let graph = QuantGraph::from_parts(topology, nodes, bits).expect("consistent witness graph");
    let input = FloatTensor::from_vec(vec![1, 2], vec![4.4, 2.4]).expect("shape");
    (graph, input)
}

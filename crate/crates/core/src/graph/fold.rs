use super::{FloatModel, GraphError, LayerParams, Op, Result};

/// Smallest batch-norm standard deviation accepted by [`fold_bn`].
pub const BN_EPSILON: f32 = 1e-5;

/// Folds every conv's frozen batch-norm into its weight and bias:
/// `W̄ = (β/σ)·W` row-wise and `b̄ = γ + (β/σ)(bias − μ)`.
pub fn fold_bn(model: &FloatModel) -> Result<FloatModel> {
    let mut topology = model.topology.clone();
    let mut params = model.params.clone();
    for node in &mut topology.nodes {
        let Op::Conv { bias, batch_norm, .. } = &mut node.op else { continue };
        if !*batch_norm {
            continue;
        }
        let p: &mut LayerParams = params.get_mut(&node.name).expect("validated model");
        let bn = p.bn.take().expect("validated model");
        if let Some((channel, &std)) = bn.std.iter().enumerate().find(|(_, &s)| s.is_nan() || s <= BN_EPSILON) {
            return Err(GraphError::Numerical { layer: node.name.clone(), channel, std });
        }
        let out = bn.channels();
        let per = p.weight.len() / out;
        let mut w = p.weight.data().to_vec();
        let mut b = Vec::with_capacity(out);
        for o in 0..out {
            let k = bn.scale[o] / bn.std[o];
            for v in &mut w[o * per..(o + 1) * per] {
                *v *= k;
            }
            let old = p.bias.as_ref().map_or(0.0, |b| b[o]);
            b.push(bn.shift[o] + k * (old - bn.mean[o]));
        }
        p.weight = crate::tensor::FloatTensor::from_vec(p.weight.dims().to_vec(), w)?;
        p.bias = Some(b);
        *bias = true;
        *batch_norm = false;
    }
    FloatModel::new(topology, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{forward_float, BatchNorm, Node, Topology};
    use crate::tensor::FloatTensor;
    use std::collections::BTreeMap;

    fn single(w: Vec<f32>, bias: Option<Vec<f32>>, bn: BatchNorm) -> FloatModel {
        let topology = Topology {
            name: "one".into(),
            nodes: vec![
                Node::new("x", Op::Input { shape: vec![1, 1, 1, 1] }),
                Node::new(
                    "c",
                    Op::Conv {
                        input: "x".into(),
                        out_channels: 1,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                        bias: bias.is_some(),
                        batch_norm: true,
                    },
                ),
            ],
        };
        let weight = FloatTensor::from_vec(vec![1, 1, 1, 1], w).unwrap();
        let params = BTreeMap::from([("c".to_string(), LayerParams { weight, bias, bn: Some(bn) })]);
        FloatModel::new(topology, params).unwrap()
    }

    #[test]
    fn identity_fold() {
        let m = single(vec![0.7], None, BatchNorm::identity(1));
        let f = fold_bn(&m).unwrap();
        let p = &f.params["c"];
        assert_eq!(p.weight.data(), &[0.7]);
        assert_eq!(p.bias.as_deref(), Some(&[0.0][..]));
        assert!(p.bn.is_none());
    }

    #[test]
    fn hand_example() {
        let bn = BatchNorm { mean: vec![2.0], std: vec![2.0], scale: vec![4.0], shift: vec![1.0] };
        let m = single(vec![1.0], None, bn);
        let f = fold_bn(&m).unwrap();
        assert_eq!(f.params["c"].weight.data(), &[2.0]);
        assert_eq!(f.params["c"].bias.as_deref(), Some(&[-3.0][..]));
        let x = FloatTensor::from_vec(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(forward_float(&m, &x).unwrap()[1].data(), &[3.0]);
        assert_eq!(forward_float(&f, &x).unwrap()[1].data(), &[3.0]);
        assert!(matches!(f.topology.nodes[1].op, Op::Conv { bias: true, batch_norm: false, .. }));
    }

    #[test]
    fn existing_bias_absorbed() {
        let bn = BatchNorm { mean: vec![1.0], std: vec![0.5], scale: vec![2.0], shift: vec![0.25] };
        let f = fold_bn(&single(vec![1.0], Some(vec![3.0]), bn)).unwrap();
        // 0.25 + 4 * (3 - 1)
        assert_eq!(f.params["c"].bias.as_deref(), Some(&[8.25][..]));
    }

    #[test]
    fn tiny_std_rejected() {
        let bn = BatchNorm { mean: vec![0.0], std: vec![1e-6], scale: vec![1.0], shift: vec![0.0] };
        assert!(matches!(fold_bn(&single(vec![1.0], None, bn)), Err(GraphError::Numerical { channel: 0, .. })));
    }
}

use super::float_ops;
use super::{weight_shape, Analysis, GraphError, Node, Op, Result, Topology};
use crate::tensor::{read_container, write_container, FloatTensor, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Frozen batch-norm statistics: `scale · (a − mean) / std + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, a: f32, channel: usize) -> f32 {
        self.scale[channel] * (a - self.mean[channel]) / self.std[channel] + self.shift[channel]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: FloatTensor,
    pub bias: Option<Vec<f32>>,
    pub bn: Option<BatchNorm>,
}

/// A topology with FP32 parameters for every conv / fc layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    pub topology: Topology,
    pub params: BTreeMap<String, LayerParams>,
    analysis: Analysis,
}

impl FloatModel {
    pub fn new(topology: Topology, params: BTreeMap<String, LayerParams>) -> Result<Self> {
        let analysis = topology.analyze()?;
        for (i, node) in topology.nodes.iter().enumerate() {
            let (has_bias, has_bn) = match node.op {
                Op::Conv { bias, batch_norm, .. } => (bias, batch_norm),
                Op::Fc { bias, .. } => (bias, false),
                _ => continue,
            };
            let bad = |msg: String| GraphError::Params { layer: node.name.clone(), msg };
            let p = params.get(&node.name).ok_or_else(|| bad("missing parameters".into()))?;
            let expected = weight_shape(&node.op, &analysis.shapes[analysis.inputs[i][0]]).expect("linear");
            if p.weight.dims() != expected.as_slice() {
                return Err(bad(format!("weight shape {:?}, expected {:?}", p.weight.dims(), expected)));
            }
            let out = expected[0];
            match (&p.bias, has_bias) {
                (Some(b), true) if b.len() == out => {}
                (None, false) => {}
                (Some(b), true) => return Err(bad(format!("bias has {} entries, expected {out}", b.len()))),
                _ => return Err(bad("bias presence does not match the topology".into())),
            }
            match (&p.bn, has_bn) {
                (Some(bn), true) => {
                    let lens = [bn.mean.len(), bn.std.len(), bn.scale.len(), bn.shift.len()];
                    if lens.iter().any(|&l| l != out) {
                        return Err(bad(format!("batch-norm vectors {:?}, expected {out}", lens)));
                    }
                }
                (None, false) => {}
                _ => return Err(bad("batch-norm presence does not match the topology".into())),
            }
        }
        let extra: Vec<&String> =
            params.keys().filter(|k| !topology.nodes.iter().any(|n| &&n.name == k && n.op.is_linear())).collect();
        if let Some(k) = extra.first() {
            return Err(GraphError::Params { layer: (*k).clone(), msg: "not a conv or fc layer".into() });
        }
        Ok(FloatModel { topology, params, analysis })
    }

    pub fn analysis(&self) -> &Analysis {
        &self.analysis
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.analysis.shapes[self.analysis.input]
    }
}

/// Checks everything but the batch dimension.
pub(crate) fn check_input(expected: &[usize], got: &[usize]) -> Result<()> {
    if expected.len() != got.len() || expected[1..] != got[1..] {
        return Err(GraphError::InputShape { expected: expected.to_vec(), got: got.to_vec() });
    }
    Ok(())
}

/// Node output shapes for a batch of `n`.
pub(crate) fn batch_shapes(analysis: &Analysis, n: usize) -> Vec<Vec<usize>> {
    analysis
        .shapes
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s[0] = n;
            s
        })
        .collect()
}

/// FP32 forward pass; returns the output of every node (BN applied unfused).
pub fn forward_float(model: &FloatModel, input: &FloatTensor) -> Result<Vec<FloatTensor>> {
    let a = &model.analysis;
    check_input(model.input_shape(), input.dims())?;
    let shapes = batch_shapes(a, input.dims()[0]);
    let mut outs: Vec<Vec<f32>> = Vec::with_capacity(model.topology.nodes.len());
    for (i, node) in model.topology.nodes.iter().enumerate() {
        let src = |k: usize| &outs[a.inputs[i][k]];
        let in_shape = |k: usize| &shapes[a.inputs[i][k]];
        let v = match &node.op {
            Op::Input { .. } => input.data().to_vec(),
            Op::Conv { .. } => {
                let p = &model.params[&node.name];
                let s = in_shape(0);
                let spec = model.topology.conv_spec(node, s).expect("conv");
                let (mut y, _) =
                    float_ops::conv2d(p.weight.data(), p.bias.as_deref(), src(0), [s[0], s[1], s[2], s[3]], &spec);
                if let Some(bn) = &p.bn {
                    let plane = shapes[i][2] * shapes[i][3];
                    for (j, v) in y.iter_mut().enumerate() {
                        *v = bn.apply(*v, (j / plane) % spec.out_channels);
                    }
                }
                y
            }
            Op::Fc { out_features, .. } => {
                let p = &model.params[&node.name];
                let s = in_shape(0);
                let k = s[1..].iter().product();
                float_ops::fc(p.weight.data(), p.bias.as_deref(), src(0), s[0], k, *out_features)
            }
            Op::Relu { .. } => src(0).iter().map(|&v| v.max(0.0)).collect(),
            Op::MaxPool { .. } | Op::AvgPool { .. } => {
                let s = in_shape(0);
                float_ops::pool(src(0), [s[0], s[1], s[2], s[3]], &node.op.pool_spec().unwrap()).0
            }
            Op::ResidualAdd { .. } => src(0).iter().zip(src(1)).map(|(m, r)| m + r).collect(),
            Op::Concat { .. } => concat_channels(&a.inputs[i], &outs, &shapes),
        };
        outs.push(v);
    }
    outs.into_iter().zip(shapes).map(|(v, s)| Ok(FloatTensor::from_vec(s, v)?)).collect()
}

/// Concatenates node outputs along axis 1.
pub(crate) fn concat_channels<T: Copy>(srcs: &[usize], outs: &[Vec<T>], shapes: &[Vec<usize>]) -> Vec<T> {
    let n = shapes[srcs[0]][0];
    let mut out = Vec::new();
    for b in 0..n {
        for &j in srcs {
            let per = outs[j].len() / n;
            out.extend_from_slice(&outs[j][b * per..(b + 1) * per]);
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    #[serde(flatten)]
    topology: Topology,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    params: BTreeMap<String, ParamFiles>,
}

#[derive(Serialize, Deserialize)]
struct ParamFiles {
    weight: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn: Option<BnFiles>,
}

#[derive(Serialize, Deserialize)]
struct BnFiles {
    mean: String,
    std: String,
    scale: String,
    shift: String,
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|source| GraphError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|source| GraphError::Json { path: path.display().to_string(), source })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| GraphError::Json { path: path.display().to_string(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| GraphError::Io { path: path.display().to_string(), source })
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn read_vector(dir: &Path, file: &str) -> Result<Vec<f32>> {
    Ok(read_container(dir.join(file))?.into_float()?.into_data())
}

/// Reads just the topology of a model or architecture file.
pub fn load_topology(path: impl AsRef<Path>) -> Result<Topology> {
    let file: ModelFile = read_json(path.as_ref())?;
    file.topology.analyze()?;
    Ok(file.topology)
}

/// Reads a model file and the tensor containers it references.
pub fn load_model(path: impl AsRef<Path>) -> Result<FloatModel> {
    let path = path.as_ref();
    let dir = base_dir(path);
    let file: ModelFile = read_json(path)?;
    let mut params = BTreeMap::new();
    for (name, pf) in file.params {
        let weight = read_container(dir.join(&pf.weight))?.into_float()?;
        let bias = pf.bias.as_deref().map(|f| read_vector(&dir, f)).transpose()?;
        let bn = match &pf.bn {
            Some(b) => Some(BatchNorm {
                mean: read_vector(&dir, &b.mean)?,
                std: read_vector(&dir, &b.std)?,
                scale: read_vector(&dir, &b.scale)?,
                shift: read_vector(&dir, &b.shift)?,
            }),
            None => None,
        };
        params.insert(name, LayerParams { weight, bias, bn });
    }
    FloatModel::new(file.topology, params)
}

/// Writes `<stem>.json` plus one container per parameter tensor into `dir`.
pub fn save_model(model: &FloatModel, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| GraphError::Io { path: dir.display().to_string(), source })?;
    let write_vec = |file: String, v: &[f32]| -> Result<String> {
        let t = FloatTensor::from_vec(vec![v.len()], v.to_vec())?;
        write_container(&Tensor::Float(t), dir.join(&file))?;
        Ok(file)
    };
    let mut params = BTreeMap::new();
    for (name, p) in &model.params {
        let weight = format!("{name}.weight.dyqt");
        write_container(&Tensor::Float(p.weight.clone()), dir.join(&weight))?;
        let bias = p.bias.as_ref().map(|b| write_vec(format!("{name}.bias.dyqt"), b)).transpose()?;
        let bn = match &p.bn {
            Some(bn) => Some(BnFiles {
                mean: write_vec(format!("{name}.bn_mean.dyqt"), &bn.mean)?,
                std: write_vec(format!("{name}.bn_std.dyqt"), &bn.std)?,
                scale: write_vec(format!("{name}.bn_scale.dyqt"), &bn.scale)?,
                shift: write_vec(format!("{name}.bn_shift.dyqt"), &bn.shift)?,
            }),
            None => None,
        };
        params.insert(name.clone(), ParamFiles { weight, bias, bn });
    }
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &ModelFile { topology: model.topology.clone(), params })?;
    Ok(path)
}

impl Node {
    pub fn new(name: impl Into<String>, op: Op) -> Self {
        Node { name: name.into(), op }
    }
}

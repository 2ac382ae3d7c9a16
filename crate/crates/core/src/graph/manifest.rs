use super::model::{read_json, write_json};
use super::{Calibration, GraphError, QuantGraph, QuantLinear, QuantNode, QuantOp, Result, Topology};
use crate::dyadic::DyadicScale;
use crate::kernels::{ConvSpec, PoolSpec};
use crate::quantizer::QuantParams;
use crate::tensor::{read_container, write_container, BitWidth, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Format tag written into every quantized-model manifest.
pub const MANIFEST_FORMAT: &str = "dyq-quantized-model/1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    #[serde(flatten)]
    topology: Topology,
    bits: BTreeMap<String, u32>,
    #[serde(default)]
    calibration: Calibration,
    sites: Vec<SiteEntry>,
}

#[derive(Serialize, Deserialize)]
struct SiteEntry {
    name: String,
    params: QuantParams,
    #[serde(default)]
    relu: bool,
    #[serde(flatten)]
    kind: SiteKind,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SiteKind {
    Input,
    Relu,
    Linear {
        bits: BitWidth,
        /// Packed weight container, relative to the manifest.
        weight: String,
        weight_params: QuantParams,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        conv: Option<ConvSpec>,
        bias: Vec<i32>,
        bias_scales: Vec<f64>,
        acc_offset: Vec<i32>,
        rescale: Vec<DyadicScale>,
    },
    Pool {
        spec: PoolSpec,
        rescale: DyadicScale,
    },
    ResidualAdd {
        main: DyadicScale,
        skip: DyadicScale,
    },
    Concat {
        rescales: Vec<DyadicScale>,
    },
}

/// Writes `<stem>.json` and one packed weight container per linear layer.
pub fn save_manifest(g: &QuantGraph, calib: &Calibration, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| GraphError::Io { path: dir.display().to_string(), source })?;
    let mut sites = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        let kind = match &node.op {
            QuantOp::Input => SiteKind::Input,
            QuantOp::Relu => SiteKind::Relu,
            QuantOp::Linear(l) => {
                let file = format!("{stem}.{}.qweight.dyqt", node.name);
                write_container(&Tensor::Packed(l.weight.clone()), dir.join(&file))?;
                SiteKind::Linear {
                    bits: l.bits,
                    weight: file,
                    weight_params: l.weight_params.clone(),
                    conv: l.conv,
                    bias: l.bias.clone(),
                    bias_scales: l.bias_scales.clone(),
                    acc_offset: l.acc_offset.clone(),
                    rescale: l.rescale.clone(),
                }
            }
            QuantOp::Pool { spec, rescale } => SiteKind::Pool { spec: *spec, rescale: *rescale },
            QuantOp::ResidualAdd { main, skip } => SiteKind::ResidualAdd { main: *main, skip: *skip },
            QuantOp::Concat { rescales } => SiteKind::Concat { rescales: rescales.clone() },
        };
        sites.push(SiteEntry { name: node.name.clone(), params: node.act.clone(), relu: node.relu, kind });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        topology: g.topology.clone(),
        bits: g.bits.clone(),
        calibration: calib.clone(),
        sites,
    };
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Reads a manifest and its weight containers back into a graph.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(QuantGraph, Calibration)> {
    let path = path.as_ref();
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m: Manifest = read_json(path)?;
    if m.format != MANIFEST_FORMAT {
        return Err(GraphError::Params {
            layer: String::new(),
            msg: format!("unknown manifest format {:?}", m.format),
        });
    }
    let mut nodes = Vec::with_capacity(m.sites.len());
    for s in m.sites {
        let op = match s.kind {
            SiteKind::Input => QuantOp::Input,
            SiteKind::Relu => QuantOp::Relu,
            SiteKind::Linear { bits, weight, weight_params, conv, bias, bias_scales, acc_offset, rescale } => {
                let weight = read_container(dir.join(&weight))?.into_packed()?;
                if weight.bits() != bits {
                    return Err(GraphError::Params {
                        layer: s.name,
                        msg: "weight container bit-width mismatch".into(),
                    });
                }
                QuantOp::Linear(QuantLinear {
                    bits,
                    weight,
                    weight_params,
                    conv,
                    bias,
                    bias_scales,
                    acc_offset,
                    rescale,
                })
            }
            SiteKind::Pool { spec, rescale } => QuantOp::Pool { spec, rescale },
            SiteKind::ResidualAdd { main, skip } => QuantOp::ResidualAdd { main, skip },
            SiteKind::Concat { rescales } => QuantOp::Concat { rescales },
        };
        nodes.push(QuantNode { name: s.name, act: s.params, relu: s.relu, op });
    }
    Ok((QuantGraph::from_parts(m.topology, nodes, m.bits)?, m.calibration))
}

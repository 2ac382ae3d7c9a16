use super::{infer_fake, infer_true, QuantGraph, Result};
use crate::tensor::FloatTensor;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteDivergence {
    pub site: String,
    /// `‖x_fake − x_true‖₂ / ‖x_true‖₂` on dequantized activations.
    pub normalized: f64,
}

/// Per-site divergence between the simulated and integer executors, in node order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub sites: Vec<SiteDivergence>,
}

impl DivergenceReport {
    pub fn first(&self) -> Option<f64> {
        self.sites.first().map(|s| s.normalized)
    }

    pub fn last(&self) -> Option<f64> {
        self.sites.last().map(|s| s.normalized)
    }
}

/// Normalized L2 difference `‖a − b‖ / ‖b‖`; 0 when both are zero, infinite
/// when only `b` is.
pub fn normalized_difference(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Runs both executors and compares every activation site after the input.
pub fn measure_divergence(g: &QuantGraph, input: &FloatTensor) -> Result<DivergenceReport> {
    let t = infer_true(g, input)?;
    let f = infer_fake(g, input)?;
    let input_node = g.analysis().input;
    let sites = g
        .nodes
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != input_node)
        .map(|(i, node)| {
            let real = |codes: &[i32]| codes.iter().map(|&q| node.act.real(q, 0)).collect::<Vec<f64>>();
            SiteDivergence {
                site: node.name.clone(),
                normalized: normalized_difference(&real(&f.site_codes[i]), &real(&t.site_codes[i])),
            }
        })
        .collect();
    Ok(DivergenceReport { sites })
}

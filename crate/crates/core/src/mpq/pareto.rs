use super::{solve_ilp, BitConfig, Constraint, Constraints, LayerCosts, MpqError, Result, GBOPS, MB};
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;

/// One point of a constraint sweep; `config` is `None` when infeasible.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoRow {
    pub threshold: f64,
    pub config: Option<BitConfig>,
}

/// Solves once per threshold of `swept`, other limits taken from `base`.
pub fn pareto_sweep(
    costs: &LayerCosts,
    base: &Constraints,
    swept: Constraint,
    thresholds: &[f64],
    pinned: &BTreeMap<String, u32>,
) -> Result<Vec<ParetoRow>> {
    thresholds
        .iter()
        .map(|&t| match solve_ilp(costs, &base.with(swept, t), pinned) {
            Ok(cfg) => Ok(ParetoRow { threshold: t, config: Some(cfg) }),
            Err(MpqError::Infeasible(_)) => Ok(ParetoRow { threshold: t, config: None }),
            Err(e) => Err(e),
        })
        .collect()
}

fn display_units(c: Constraint, v: f64) -> f64 {
    match c {
        Constraint::Size => v / MB,
        Constraint::Bops => v / GBOPS,
        Constraint::Latency => v,
    }
}

fn csv_err(e: impl ToString) -> MpqError {
    MpqError::Format { path: "<csv>".into(), msg: e.to_string() }
}

/// CSV with one row per threshold: totals, objective and every layer's bits.
pub fn write_pareto_csv<W: Write>(rows: &[ParetoRow], costs: &LayerCosts, swept: Constraint, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let unit = match swept {
        Constraint::Size => "threshold_mb",
        Constraint::Bops => "threshold_gbops",
        Constraint::Latency => "threshold_ms",
    };
    let mut header = vec![
        unit.to_string(),
        "feasible".into(),
        "objective".into(),
        "size_mb".into(),
        "gbops".into(),
        "latency_ms".into(),
    ];
    header.extend(costs.layers.iter().map(|l| l.name.clone()));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![display_units(swept, r.threshold).to_string()];
        match &r.config {
            Some(c) => {
                rec.push("true".into());
                rec.push(c.objective.to_string());
                rec.push(c.totals.size_mb().to_string());
                rec.push(c.totals.gbops().to_string());
                rec.push(c.totals.latency_ms.map_or(String::new(), |v| v.to_string()));
                rec.extend(c.layers.iter().map(|(_, b)| b.to_string()));
            }
            None => {
                rec.push("false".into());
                rec.extend(std::iter::repeat_n(String::new(), 4 + costs.layers.len()));
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

/// Per-layer trade-off between the narrowest and widest option.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerProfile {
    pub layer: String,
    /// This layer's share of the total latency saved by going narrow.
    pub latency_share: Option<f64>,
    /// `Ω(narrowest) − Ω(widest)`.
    pub sensitivity_delta: f64,
}

pub fn layer_profile(costs: &LayerCosts) -> Vec<LayerProfile> {
    let ends = |l: &super::LayerCost| {
        let lo = l.options.iter().min_by_key(|o| o.bits).expect("options");
        let hi = l.options.iter().max_by_key(|o| o.bits).expect("options");
        (lo.clone(), hi.clone())
    };
    let saved: Vec<Option<f64>> = costs
        .layers
        .iter()
        .map(|l| {
            let (lo, hi) = ends(l);
            Some(hi.latency_ms? - lo.latency_ms?)
        })
        .collect();
    let total: Option<f64> = saved.iter().copied().sum();
    costs
        .layers
        .iter()
        .zip(&saved)
        .map(|(l, s)| {
            let (lo, hi) = ends(l);
            LayerProfile {
                layer: l.name.clone(),
                latency_share: match (s, total) {
                    (Some(s), Some(t)) if t != 0.0 => Some(s / t),
                    _ => None,
                },
                sensitivity_delta: lo.omega - hi.omega,
            }
        })
        .collect()
}

pub fn write_profile_csv<W: Write>(profile: &[LayerProfile], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "latency_share", "sensitivity_delta"]).map_err(csv_err)?;
    for p in profile {
        let share = p.latency_share.map_or(String::new(), |v| v.to_string());
        w.write_record([p.layer.clone(), share, p.sensitivity_delta.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

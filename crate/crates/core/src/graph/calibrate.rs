use super::model::{read_json, write_json};
use super::{forward_float, FloatModel, GraphError, Result};
use crate::quantizer::{CalibRange, RangeTracker};
use crate::tensor::FloatTensor;
use std::collections::BTreeMap;
use std::path::Path;

/// Calibrated range of every node output, keyed by node name.
pub type Calibration = BTreeMap<String, CalibRange>;

/// Runs the float model over `batches` in order and tracks every node's
/// output range with momentum. The first batch seeds each range.
pub fn calibrate(model: &FloatModel, batches: &[FloatTensor], momentum: f64) -> Result<Calibration> {
    if batches.is_empty() {
        return Err(GraphError::NoCalibrationData);
    }
    let mut trackers = vec![RangeTracker::new(momentum); model.topology.nodes.len()];
    for batch in batches {
        for (tracker, out) in trackers.iter_mut().zip(forward_float(model, batch)?) {
            tracker.track(&out);
        }
    }
    Ok(model
        .topology
        .nodes
        .iter()
        .zip(&trackers)
        .map(|(n, t)| (n.name.clone(), t.finalize().expect("observed")))
        .collect())
}

pub fn save_calibration(calib: &Calibration, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), calib)
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<Calibration> {
    read_json(path.as_ref())
}

use super::{BitConfig, MpqError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Milliseconds per (layer, bits).
pub type LatencyTable = BTreeMap<(String, u32), f64>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> MpqError + '_ {
    move |source| MpqError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, msg: impl ToString) -> MpqError {
    MpqError::Format { path: path.display().to_string(), msg: msg.to_string() }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Deserialize)]
struct LatencyRow {
    layer: String,
    bits: u32,
    ms: f64,
}

/// Reads a `layer,bits,ms` CSV.
pub fn read_latency_csv(path: impl AsRef<Path>) -> Result<LatencyTable> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| format_err(path, e))?;
    let headers = reader.headers().map_err(|e| format_err(path, e))?;
    if headers.iter().collect::<Vec<_>>() != ["layer", "bits", "ms"] {
        return Err(format_err(path, "expected header layer,bits,ms"));
    }
    let mut table = LatencyTable::new();
    for row in reader.deserialize::<LatencyRow>() {
        let row = row.map_err(|e| format_err(path, e))?;
        if !(row.ms.is_finite() && row.ms >= 0.0) {
            return Err(format_err(path, format!("latency {} for {} is not a non-negative number", row.ms, row.layer)));
        }
        if table.insert((row.layer.clone(), row.bits), row.ms).is_some() {
            return Err(format_err(path, format!("duplicate entry for {} at {} bits", row.layer, row.bits)));
        }
    }
    Ok(table)
}

/// Reads `{layer: trace}`.
pub fn read_traces(path: impl AsRef<Path>) -> Result<BTreeMap<String, f64>> {
    read_json(path.as_ref())
}

pub fn write_traces(traces: &BTreeMap<String, f64>, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), traces)
}

/// Reads `{layer: {bits: Ω}}`.
pub fn read_sensitivity_json(path: impl AsRef<Path>) -> Result<BTreeMap<String, BTreeMap<u32, f64>>> {
    read_json(path.as_ref())
}

pub fn write_sensitivity_json(omegas: &BTreeMap<String, BTreeMap<u32, f64>>, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), omegas)
}

#[derive(Serialize)]
struct TotalsBlock {
    size_bytes: f64,
    size_mb: f64,
    bops: f64,
    gbops: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    latency_ms: Option<f64>,
}

#[derive(Serialize)]
struct BitConfigFile {
    bits: BTreeMap<String, u32>,
    objective: f64,
    totals: TotalsBlock,
}

/// Writes `{"bits": {layer: bits}, "objective": …, "totals": {…}}`.
pub fn write_bit_config(cfg: &BitConfig, path: impl AsRef<Path>) -> Result<()> {
    let t = cfg.totals;
    let file = BitConfigFile {
        bits: cfg.bits(),
        objective: cfg.objective,
        totals: TotalsBlock {
            size_bytes: t.size_bytes,
            size_mb: t.size_mb(),
            bops: t.bops,
            gbops: t.gbops(),
            latency_ms: t.latency_ms,
        },
    };
    write_json(path.as_ref(), &file)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BitConfigInput {
    Full { bits: BTreeMap<String, u32> },
    Flat(BTreeMap<String, u32>),
}

/// Reads the per-layer bits of a bit-config file, or of a flat `{layer: bits}` map.
pub fn read_bit_config(path: impl AsRef<Path>) -> Result<BTreeMap<String, u32>> {
    Ok(match read_json::<BitConfigInput>(path.as_ref())? {
        BitConfigInput::Full { bits } | BitConfigInput::Flat(bits) => bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpq::Totals;

    #[test]
    fn latency_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lat.csv");
        fs::write(&p, "layer,bits,ms\nconv1,8,1.5\nconv1, 4 ,0.75\n").unwrap();
        let t = read_latency_csv(&p).unwrap();
        assert_eq!(t[&("conv1".to_string(), 4)], 0.75);
        fs::write(&p, "layer,bits,ms\nconv1,8,1.5\nconv1,8,1.0\n").unwrap();
        assert!(read_latency_csv(&p).is_err());
        fs::write(&p, "name,bits,ms\nconv1,8,1.5\n").unwrap();
        assert!(read_latency_csv(&p).is_err());
        fs::write(&p, "layer,bits,ms\nconv1,eight,1.5\n").unwrap();
        assert!(read_latency_csv(&p).is_err());
    }

    #[test]
    fn bit_config_roundtrip() {
        let cfg = BitConfig {
            layers: vec![("b".into(), 4), ("a".into(), 8)],
            objective: 0.1 + 0.2,
            totals: Totals { size_bytes: 1048576.0, bops: 2e9, latency_ms: None },
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        write_bit_config(&cfg, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.find("\"a\"").unwrap() < text.find("\"b\"").unwrap());
        assert!(text.contains("\"size_mb\": 1.0"));
        assert!(text.contains("0.30000000000000004"));
        assert_eq!(read_bit_config(&p).unwrap(), cfg.bits());
        fs::write(&p, r#"{"x": 4}"#).unwrap();
        assert_eq!(read_bit_config(&p).unwrap()["x"], 4);
    }

    #[test]
    fn sensitivity_json_roundtrip() {
        let m = BTreeMap::from([("l".to_string(), BTreeMap::from([(4u32, 2.5), (8, 0.125)]))]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        write_sensitivity_json(&m, &p).unwrap();
        assert_eq!(read_sensitivity_json(&p).unwrap(), m);
    }
}

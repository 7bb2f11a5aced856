//! SemanticKITTI binary layouts.
//!
//! Scans are consecutive records of four little-endian `f32` values
//! `(x, y, z, remission)`. Label files hold one little-endian `u32` per point:
//! the low 16 bits are the semantic class, the high 16 bits the instance id.

use crate::error::{Error, Result};
use crate::types::{LabelSet, Scan};

pub const SCAN_RECORD_BYTES: usize = 16;
pub const LABEL_RECORD_BYTES: usize = 4;

pub fn read_scan(bytes: &[u8]) -> Result<Scan> {
    if bytes.is_empty() {
        return Err(Error::format("empty scan stream"));
    }
    if !bytes.len().is_multiple_of(SCAN_RECORD_BYTES) {
        return Err(Error::format(format!(
            "scan stream of {} bytes is not a multiple of {SCAN_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let m = bytes.len() / SCAN_RECORD_BYTES;
    let mut points = Vec::with_capacity(m);
    let mut intensity = Vec::with_capacity(m);
    for (i, rec) in bytes.chunks_exact(SCAN_RECORD_BYTES).enumerate() {
        let mut v = [0f32; 4];
        for (k, w) in rec.chunks_exact(4).enumerate() {
            v[k] = f32::from_le_bytes([w[0], w[1], w[2], w[3]]);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(format!("non-finite value in record {i}")));
        }
        points.push([v[0] as f64, v[1] as f64, v[2] as f64]);
        intensity.push(v[3] as f64);
    }
    Scan::new(points, Some(intensity), vec![0; m]).map_err(|e| Error::format(e.to_string()))
}

/// Serialize a scan. Coordinates are narrowed to `f32`; missing intensity is written as 0.
pub fn write_scan(scan: &Scan) -> Vec<u8> {
    let mut out = Vec::with_capacity(scan.len() * SCAN_RECORD_BYTES);
    for (i, p) in scan.points().iter().enumerate() {
        let rem = scan.intensity().map_or(0.0, |v| v[i]);
        for v in [p[0], p[1], p[2], rem] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parse a label file of `m` points into ground-truth labels (0 = void) and instance ids.
pub fn read_labels(bytes: &[u8], m: usize) -> Result<(LabelSet, Vec<u32>)> {
    if bytes.len() != m * LABEL_RECORD_BYTES {
        return Err(Error::format(format!(
            "label stream has {} bytes, expected {} for {m} points",
            bytes.len(),
            m * LABEL_RECORD_BYTES
        )));
    }
    let (labels, instances) = bytes
        .chunks_exact(LABEL_RECORD_BYTES)
        .map(|w| {
            let word = u32::from_le_bytes([w[0], w[1], w[2], w[3]]);
            (word & 0xFFFF, word >> 16)
        })
        .unzip();
    Ok((LabelSet::from_raw_ground_truth(labels), instances))
}

/// Serialize labels and instance ids; void points are written as semantic 0.
pub fn write_labels(labels: &LabelSet, instance_ids: &[u32]) -> Result<Vec<u8>> {
    if labels.len() != instance_ids.len() {
        return Err(Error::format("label and instance counts differ"));
    }
    let mut out = Vec::with_capacity(labels.len() * LABEL_RECORD_BYTES);
    for (l, &inst) in labels.iter().zip(instance_ids) {
        let sem = l.unwrap_or(0);
        if sem > 0xFFFF || inst > 0xFFFF {
            return Err(Error::format(format!(
                "label {sem} / instance {inst} does not fit in 16 bits"
            )));
        }
        out.extend_from_slice(&((inst << 16) | sem).to_le_bytes());
    }
    Ok(out)
}

//! Model and metrics files.
//!
//! A model file is a little-endian `u32` dimension followed by that many
//! `f64` weights. Metrics are CSV with a versioned comment line on top.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use specgd_core::Model;

use crate::engine::IterationMetrics;
use crate::error::{Error, Result};

pub const METRICS_VERSION_LINE: &str = "# specgd metrics v1";
pub const METRICS_HEADER: &str =
    "iter,wall_ms,examples_seen,frac_scanned,s_used,selected_alpha,loss_est,loss_halfwidth,loss_exact_flag";

pub fn write_metrics<W: Write>(mut w: W, rows: &[IterationMetrics]) -> io::Result<()> {
    writeln!(w, "{METRICS_VERSION_LINE}")?;
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.iter,
            r.wall_ms,
            r.examples_seen,
            r.frac_scanned,
            r.s_used,
            r.selected_alpha,
            r.loss_est,
            r.loss_halfwidth,
            u8::from(r.loss_exact)
        )?;
    }
    w.flush()
}

pub fn save_metrics(path: &Path, rows: &[IterationMetrics]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics(io::BufWriter::new(f), rows).map_err(|e| Error::io(path, e))
}

pub fn encode_model(weights: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * weights.len());
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for w in weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Vec<f64>> {
    let Some((head, body)) = bytes.split_first_chunk::<4>() else {
        return Err(Error::Format("model file shorter than its header".into()));
    };
    let d = u32::from_le_bytes(*head) as usize;
    if body.len() != d * 8 {
        return Err(Error::Format(format!(
            "model file holds {} bytes of weights, expected {}",
            body.len(),
            d * 8
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode_model(&model.weights)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Model::from_weights(decode_model(&bytes)?))
}

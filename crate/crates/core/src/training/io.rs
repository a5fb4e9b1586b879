//! Model-set files and convergence logs.
//!
//! Model-set layout (little-endian): magic `UDM2`, `u32` M, `u32` number of
//! layer widths, the widths as `u32`, `f64` leaky slope, then for each model
//! and each layer the weights (row-major) and bias as f64.

use std::path::Path;

use super::trainer::{ConvergenceLog, LogRecord, ModelSet};
use crate::data::io::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::manifold::io::{put_f64s, put_u32};
use crate::math::{MlpParams, MlpSpec};

pub const MODEL_SET_MAGIC: [u8; 4] = *b"UDM2";

pub fn encode(set: &ModelSet) -> Result<Vec<u8>> {
    let mut out = MODEL_SET_MAGIC.to_vec();
    put_u32(&mut out, set.len())?;
    put_u32(&mut out, set.spec.layer_widths.len())?;
    for &w in &set.spec.layer_widths {
        put_u32(&mut out, w)?;
    }
    put_f64s(&mut out, &[set.spec.leaky_slope]);
    for p in &set.params {
        for l in &p.layers {
            put_f64s(&mut out, &l.weights);
            put_f64s(&mut out, &l.bias);
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ModelSet> {
    let mut r = Reader::new(bytes, "model set");
    let magic = r.magic()?;
    if magic != MODEL_SET_MAGIC {
        return Err(Error::BadMagic {
            expected: MODEL_SET_MAGIC,
            found: magic,
        });
    }
    let m = r.u32()? as usize;
    let n_widths = r.u32()? as usize;
    let widths = (0..n_widths)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let slope = r.f64()?;
    let spec = MlpSpec::new(widths, slope).map_err(|e| Error::Malformed(format!("model spec: {e}")))?;
    let mut params = Vec::with_capacity(m.min(1024));
    for _ in 0..m {
        let mut p = MlpParams::zeros(&spec);
        for l in &mut p.layers {
            l.weights = r.f64s(l.weights.len())?;
            l.bias = r.f64s(l.bias.len())?;
        }
        if !p.all_finite() {
            return Err(Error::Malformed("non-finite model parameter".into()));
        }
        params.push(p);
    }
    r.finish()?;
    ModelSet::new(spec, params)
}

pub fn save(path: &Path, set: &ModelSet) -> Result<()> {
    write_file(path, &encode(set)?)
}

pub fn load(path: &Path) -> Result<ModelSet> {
    decode(&read_file(path)?)
}

/// Writes the log as CSV with columns `model, epoch, train_loss, val_loss`.
pub fn save_log(path: &Path, log: &ConvergenceLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_path_error(path, e))?;
    for r in &log.records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_log(path: &Path) -> Result<ConvergenceLog> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_path_error(path, e))?;
    let records = rd.deserialize::<LogRecord>().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(ConvergenceLog {
        records,
        zero_gradient_pairs: 0,
    })
}

fn csv_path_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::Csv(e)
    }
}

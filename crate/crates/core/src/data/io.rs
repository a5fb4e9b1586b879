//! Dataset files.
//!
//! Binary layout (little-endian): magic `UDS1`, `u32` rows, `u32` cols,
//! `u8` has_labels, `rows × cols` `f32` row-major, then `rows` `u8` labels
//! when has_labels is 1. Values are narrowed to `f32` on save.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Batch, DatasetBundle, DatasetMeta};
use crate::error::{Error, Result};
use crate::math::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"UDS1";

/// Contents of one dataset file.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetFile {
    Labeled(Batch),
    Unlabeled(Tensor),
}

impl DatasetFile {
    pub fn inputs(&self) -> &Tensor {
        match self {
            DatasetFile::Labeled(b) => &b.inputs,
            DatasetFile::Unlabeled(t) => t,
        }
    }

    pub fn into_batch(self) -> Result<Batch> {
        match self {
            DatasetFile::Labeled(b) => Ok(b),
            DatasetFile::Unlabeled(_) => Err(Error::Malformed("expected a labeled dataset".into())),
        }
    }

    pub fn into_inputs(self) -> Tensor {
        match self {
            DatasetFile::Labeled(b) => b.inputs,
            DatasetFile::Unlabeled(t) => t,
        }
    }
}

pub fn encode(inputs: &Tensor, labels: Option<&[u8]>) -> Result<Vec<u8>> {
    let (rows, cols) = (inputs.rows(), inputs.cols());
    if let Some(l) = labels {
        if l.len() != rows {
            return Err(Error::shape("dataset labels", rows, l.len()));
        }
    }
    let rows32 = u32::try_from(rows).map_err(|_| Error::config("rows", "exceeds u32"))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::config("cols", "exceeds u32"))?;
    let mut out = Vec::with_capacity(13 + rows * cols * 4 + rows);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    out.push(u8::from(labels.is_some()));
    for &v in inputs.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(l) = labels {
        out.extend_from_slice(l);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<DatasetFile> {
    let mut r = Reader::new(bytes, "dataset");
    let magic = r.magic()?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let has_labels = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Malformed(format!("has_labels flag {other}"))),
    };
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Malformed("dimension overflow".into()))?;
    let expected_len = 13 + n * 4 + if has_labels { rows } else { 0 };
    if bytes.len() < expected_len {
        return Err(Error::Truncated(format!(
            "dataset needs {expected_len} bytes for {rows}x{cols}, file has {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected_len {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after {rows}x{cols} payload",
            bytes.len() - expected_len
        )));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from(r.f32()?));
    }
    let inputs = Tensor::matrix(rows, cols, data)?;
    if has_labels {
        let labels = r.take(rows)?.to_vec();
        Ok(DatasetFile::Labeled(Batch::new(inputs, labels)?))
    } else {
        Ok(DatasetFile::Unlabeled(inputs))
    }
}

pub fn save_batch(path: &Path, batch: &Batch) -> Result<()> {
    write_file(path, &encode(&batch.inputs, Some(&batch.labels))?)
}

pub fn save_unlabeled(path: &Path, inputs: &Tensor) -> Result<()> {
    write_file(path, &encode(inputs, None)?)
}

pub fn load(path: &Path) -> Result<DatasetFile> {
    decode(&read_file(path)?)
}

pub fn load_batch(path: &Path) -> Result<Batch> {
    load(path)?.into_batch()
}

/// CSV with header `x0,…,x{d-1}[,y]`.
pub fn save_csv(path: &Path, inputs: &Tensor, labels: Option<&[u8]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..inputs.cols()).map(|j| format!("x{j}")).collect();
    if labels.is_some() {
        header.push("y".into());
    }
    w.write_record(&header)?;
    for (i, row) in inputs.iter_rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<DatasetFile> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let label_col = header.iter().position(|h| h == "y");
    let cols = header.len() - usize::from(label_col.is_some());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for (j, field) in rec.iter().enumerate() {
            if Some(j) == label_col {
                let y: u8 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Malformed(format!("row {rows}: label {field:?}")))?;
                labels.push(y);
            } else {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Malformed(format!("row {rows}: value {field:?}")))?;
                data.push(v);
            }
        }
        rows += 1;
    }
    let inputs = Tensor::matrix(rows, cols, data)?;
    if label_col.is_some() {
        Ok(DatasetFile::Labeled(Batch::new(inputs, labels)?))
    } else {
        Ok(DatasetFile::Unlabeled(inputs))
    }
}

/// Writes a bundle as a directory of dataset files plus `meta.json`.
pub fn save_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        write_file(&p, &bytes)?;
        written.push(p);
        Ok(())
    };
    put("train.uds".into(), encode(&bundle.train.inputs, Some(&bundle.train.labels))?)?;
    put("val_id.uds".into(), encode(&bundle.val_id.inputs, Some(&bundle.val_id.labels))?)?;
    put("ood_pool.uds".into(), encode(&bundle.ood_pool, None)?)?;
    for (t, b) in bundle.test_sets.iter().enumerate() {
        put(format!("test_{t}.uds"), encode(&b.inputs, Some(&b.labels))?)?;
    }
    for (t, b) in bundle.ood_val.iter().enumerate() {
        put(format!("ood_val_{t}.uds"), encode(&b.inputs, Some(&b.labels))?)?;
    }
    put("meta.json".into(), serde_json::to_vec_pretty(&bundle.meta)?)?;
    Ok(written)
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let meta: DatasetMeta = serde_json::from_slice(&read_file(&dir.join("meta.json"))?)?;
    let n_tiles = meta.config.n_tiles;
    let d = meta.config.d_in();
    let check = |b: Batch, name: &str| -> Result<Batch> {
        if b.d_in() != d {
            return Err(Error::shape(name.to_string(), d, b.d_in()));
        }
        Ok(b)
    };
    let train = check(load_batch(&dir.join("train.uds"))?, "train.uds")?;
    let val_id = check(load_batch(&dir.join("val_id.uds"))?, "val_id.uds")?;
    let ood_pool = load(&dir.join("ood_pool.uds"))?.into_inputs();
    if ood_pool.cols() != d {
        return Err(Error::shape("ood_pool.uds", d, ood_pool.cols()));
    }
    let mut test_sets = Vec::with_capacity(n_tiles);
    let mut ood_val = Vec::with_capacity(n_tiles);
    for t in 0..n_tiles {
        let name = format!("test_{t}.uds");
        test_sets.push(check(load_batch(&dir.join(&name))?, &name)?);
        let name = format!("ood_val_{t}.uds");
        ood_val.push(check(load_batch(&dir.join(&name))?, &name)?);
    }
    Ok(DatasetBundle {
        train,
        val_id,
        ood_pool,
        test_sets,
        ood_val,
        meta,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{} file ends at byte {} (needed {n} more)",
                self.what,
                self.bytes.len()
            ))),
        }
    }

    pub(crate) fn magic(&mut self) -> Result<[u8; 4]> {
        let s = self.take(4)?;
        Ok([s[0], s[1], s[2], s[3]])
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes in {} file",
                self.bytes.len() - self.pos,
                self.what
            )));
        }
        Ok(())
    }
}

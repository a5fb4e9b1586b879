//! Mask files and distillation audit trails.
//!
//! Mask layout (little-endian): magic `UDM3`, `u32` n, `u32` M, `u32` d_in,
//! then the `n × M × d_in` bits in instance, model, element order, packed
//! least-significant bit first and zero-padded to a whole byte.

use std::path::Path;

use super::{AuditTrail, MaskSet};
use crate::data::io::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::manifold::io::put_u32;

pub const MASKS_MAGIC: [u8; 4] = *b"UDM3";

pub fn encode(masks: &MaskSet) -> Result<Vec<u8>> {
    let mut out = MASKS_MAGIC.to_vec();
    put_u32(&mut out, masks.n())?;
    put_u32(&mut out, masks.n_models())?;
    put_u32(&mut out, masks.d_in())?;
    for chunk in masks.bits().chunks(8) {
        let byte = chunk.iter().enumerate().fold(0u8, |acc, (k, &b)| acc | (b << k));
        out.push(byte);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<MaskSet> {
    let mut r = Reader::new(bytes, "masks");
    let magic = r.magic()?;
    if magic != MASKS_MAGIC {
        return Err(Error::BadMagic {
            expected: MASKS_MAGIC,
            found: magic,
        });
    }
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let d = r.u32()? as usize;
    let total = n
        .checked_mul(m)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::Malformed("mask dimensions overflow".into()))?;
    let packed = r.take(total.div_ceil(8))?;
    r.finish()?;
    let bits = (0..total).map(|k| (packed[k / 8] >> (k % 8)) & 1).collect();
    MaskSet::from_bits(n, m, d, bits)
}

pub fn save(path: &Path, masks: &MaskSet) -> Result<()> {
    write_file(path, &encode(masks)?)
}

pub fn load(path: &Path) -> Result<MaskSet> {
    decode(&read_file(path)?)
}

pub fn save_audit(path: &Path, audit: &AuditTrail) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(audit)?.as_bytes())
}

pub fn load_audit(path: &Path) -> Result<AuditTrail> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_round_trip() {
        let bits: Vec<u8> = (0..3 * 2 * 5).map(|k| u8::from(k % 3 == 0)).collect();
        let m = MaskSet::from_bits(3, 2, 5, bits).unwrap();
        let bytes = encode(&m).unwrap();
        assert_eq!(bytes.len(), 16 + 4);
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn corrupted_masks() {
        let m = MaskSet::from_bits(1, 1, 9, vec![1; 9]).unwrap();
        let bytes = encode(&m).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Malformed(_))));
    }

    #[test]
    fn empty_masks_round_trip() {
        let m = MaskSet::from_bits(0, 3, 4, vec![]).unwrap();
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
    }
}

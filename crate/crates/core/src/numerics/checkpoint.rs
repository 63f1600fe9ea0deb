//! Checkpoint wire format.
//!
//! A checkpoint is the 5-byte header `TGPT1` followed by one record per
//! parameter, in name order: u32 LE name length, UTF-8 name, u32 LE rank,
//! u32 LE extent per dimension, then raw little-endian f64 values.

use std::fs;
use std::path::Path;

use super::{NumericsError, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"TGPT1";

/// Serialize every parameter, in deterministic name order.
pub fn checkpoint_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> std::io::Result<()> {
    fs::write(path, checkpoint_bytes(params))
}

/// Parse a checkpoint back into a parameter set. Unknown headers are
/// rejected outright.
pub fn load_checkpoint(bytes: &[u8]) -> Result<ParamSet, NumericsError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(NumericsError::BadCheckpointHeader);
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let mut params = ParamSet::new();
    let take = |pos: &mut usize, n: usize| -> Result<usize, NumericsError> {
        let start = *pos;
        if start + n > bytes.len() {
            return Err(NumericsError::BadCheckpoint(format!(
                "need {n} bytes at offset {start}, have {}",
                bytes.len() - start
            )));
        }
        *pos += n;
        Ok(start)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32, NumericsError> {
        let s = take(pos, 4)?;
        Ok(u32::from_le_bytes(bytes[s..s + 4].try_into().unwrap()))
    };
    while pos < bytes.len() {
        let name_len = read_u32(&mut pos)? as usize;
        let s = take(&mut pos, name_len)?;
        let name = std::str::from_utf8(&bytes[s..s + name_len])
            .map_err(|e| NumericsError::BadCheckpoint(format!("bad parameter name: {e}")))?
            .to_string();
        let rank = read_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let s = take(&mut pos, numel * 8)?;
        let values = bytes[s..s + numel * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(&name, shape, values);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_parameters() {
        let mut params = ParamSet::new();
        params.insert("b.bias", vec![2], vec![0.25, -1.5]);
        params.insert("a.weight", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = checkpoint_bytes(&params);
        let loaded = load_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get("a.weight").shape, vec![2, 3]);
        assert_eq!(loaded.get("a.weight").values, params.get("a.weight").values);
        assert_eq!(loaded.get("b.bias").values, params.get("b.bias").values);
        // Serialization is deterministic.
        assert_eq!(bytes, checkpoint_bytes(&loaded));
    }

    #[test]
    fn rejects_unknown_header() {
        let err = load_checkpoint(b"NOPE1rest").unwrap_err();
        assert!(matches!(err, NumericsError::BadCheckpointHeader));
    }

    #[test]
    fn rejects_truncated_records() {
        let mut params = ParamSet::new();
        params.insert("w", vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = checkpoint_bytes(&params);
        let err = load_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, NumericsError::BadCheckpoint(_)));
    }
}

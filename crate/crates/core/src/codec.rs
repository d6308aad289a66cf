//! Byte framing shared by every binary artifact: an 8-byte little-endian
//! header length, a JSON header, then a run of little-endian `f64` values.
//! The header must carry the number of values under `"len"` so frames can be
//! concatenated.

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub(crate) fn write_frame<H: Serialize>(header: &H, values: &[f64], out: &mut Vec<u8>) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    out.reserve(8 + json.len() + values.len() * 8);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct LenOnly {
    len: usize,
}

/// Reads one frame and returns the header, the values and the unread tail.
pub(crate) fn read_frame<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f64>, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Format("truncated frame length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let rest = &bytes[8..];
    if rest.len() < header_len {
        return Err(Error::Format("truncated frame header".into()));
    }
    let (json, rest) = rest.split_at(header_len);
    let len: LenOnly = serde_json::from_slice(json)?;
    let header: H = serde_json::from_slice(json)?;
    let n_bytes = len
        .len
        .checked_mul(8)
        .ok_or_else(|| Error::Format("frame length overflow".into()))?;
    if rest.len() < n_bytes {
        return Err(Error::Format(format!(
            "frame declares {} values but only {} bytes follow",
            len.len,
            rest.len()
        )));
    }
    let (body, tail) = rest.split_at(n_bytes);
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values, tail))
}

//! Token stream files.
//!
//! A token file is one or more records, each a little-endian `u32` length
//! `k` followed by `k` little-endian `u16` codes. A single sequence is a
//! file with one record.

use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_tokens(seqs: &[Vec<u32>]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in seqs {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for &c in s {
            let c = u16::try_from(c).map_err(|_| Error::OutOfRange {
                what: "token code",
                value: c as i64,
                valid: "[0, 65535] for the 16-bit stream format".into(),
            })?;
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tokens(bytes: &[u8], path: &Path) -> Result<Vec<Vec<u32>>> {
    let mut seqs = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let (len, tail) = rest
            .split_first_chunk::<4>()
            .ok_or_else(|| Error::format(path, "truncated record length"))?;
        let k = u32::from_le_bytes(*len) as usize;
        let body = tail
            .get(..2 * k)
            .ok_or_else(|| Error::format(path, format!("record {} declares {k} codes but the file ends early", seqs.len())))?;
        seqs.push(body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect());
        rest = &tail[2 * k..];
    }
    Ok(seqs)
}

pub fn write_token_file(path: &Path, seqs: &[Vec<u32>]) -> Result<()> {
    std::fs::write(path, encode_tokens(seqs)?).map_err(|e| Error::io(path, e))
}

pub fn read_token_file(path: &Path) -> Result<Vec<Vec<u32>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tokens(&bytes, path)
}

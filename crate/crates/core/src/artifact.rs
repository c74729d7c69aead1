//! Binary artifact container: an 8-byte magic tag, a little-endian u64 header
//! length, a JSON header, then a little-endian f64 payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::network::read_f64s;

pub fn write_artifact<H: Serialize>(path: impl AsRef<Path>, magic: &[u8; 8], header: &H, payload: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + payload.len() * 8);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_artifact<H: DeserializeOwned>(path: impl AsRef<Path>, magic: &[u8; 8]) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 16 || &bytes[..8] != magic {
        return invalid(format!("{} is not a {} artifact", path.as_ref().display(), String::from_utf8_lossy(magic)));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + len {
        return invalid("truncated artifact header");
    }
    let header = serde_json::from_slice(&bytes[16..16 + len])?;
    let payload = read_f64s(&bytes[16 + len..])?;
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_magic_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        write_artifact(&path, b"TESTMAGC", &vec![1usize, 2], &[0.5, -3.25]).unwrap();
        let (h, p): (Vec<usize>, Vec<f64>) = read_artifact(&path, b"TESTMAGC").unwrap();
        assert_eq!(h, vec![1, 2]);
        assert_eq!(p, vec![0.5, -3.25]);
        assert!(read_artifact::<Vec<usize>>(&path, b"OTHERMGC").is_err());
    }
}

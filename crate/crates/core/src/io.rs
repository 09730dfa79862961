//! Little-endian `f64` blobs with SHA-256 checksums, and JSON helpers.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn f64_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Format(format!("blob length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Writes `values` and returns the checksum of the written bytes.
pub fn write_blob(path: &Path, values: &[f64]) -> Result<String> {
    let bytes = f64_to_bytes(values);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Reads a blob and verifies its checksum.
pub fn read_blob(path: &Path, expected_sha256: &str) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = sha256_hex(&bytes);
    if found != expected_sha256 {
        return Err(Error::Corruption {
            path: path.display().to_string(),
            expected: expected_sha256.to_string(),
            found,
        });
    }
    bytes_to_f64(&bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let vals = vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300];
        let sha = write_blob(&p, &vals).unwrap();
        let back = read_blob(&p, &sha).unwrap();
        assert_eq!(f64_to_bytes(&back), f64_to_bytes(&vals));
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[3] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_blob(&p, &sha), Err(Error::Corruption { .. })));
        assert!(bytes_to_f64(&[0u8; 7]).is_err());
    }
}

//! Flat tensor files: a fixed 16-byte header (magic, rank, dims) followed
//! by little-endian 32-bit float payloads.
//!
//! The header holds at most two dims, so files are stored as
//! `[rows, cols]` with any richer logical shape recorded in the dataset
//! manifest. Writes are byte-deterministic.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

pub const MAGIC: [u8; 4] = *b"VTNS";
pub const HEADER_LEN: usize = 16;

pub fn write_matrix(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(CoreError::BadShape {
            op: "tensorfile_write",
            msg: format!("{} values for {} x {}", data.len(), rows, cols),
            shape: vec![rows, cols],
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&2u32.to_le_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header).map_err(|_| CoreError::MalformedFile {
        path: path.display().to_string(),
        msg: "short header".into(),
    })?;
    if header[..4] != MAGIC {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            msg: "bad magic".into(),
        });
    }
    let rank = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if rank != 2 {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            msg: format!("unsupported rank {}", rank),
        });
    }
    let rows = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != rows * cols * 4 {
        return Err(CoreError::MalformedFile {
            path: path.display().to_string(),
            msg: format!("payload {} bytes for {} x {}", payload.len(), rows, cols),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_hex(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    let mut file = File::open(path)?;
    let mut buf = [0u8; 8192];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

pub fn sha256_hex_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex_string(&Sha256::digest(bytes))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{:02x}", b));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.vtf");
        let p2 = dir.path().join("b.vtf");
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.25 - 1.0).collect();
        write_matrix(&p1, 3, 4, &data).unwrap();
        write_matrix(&p2, 3, 4, &data).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let (r, c, back) = read_matrix(&p1).unwrap();
        assert_eq!((r, c), (3, 4));
        assert_eq!(back, data);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vtf");
        std::fs::write(&p, b"nope").unwrap();
        assert!(read_matrix(&p).is_err());
        std::fs::write(&p, [b"XXXX".as_slice(), &[0u8; 12]].concat()).unwrap();
        assert!(read_matrix(&p).is_err());
    }
}

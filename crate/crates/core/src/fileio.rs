//! Shared binary container: an 8-byte little-endian header length, a JSON
//! header, then raw little-endian f64 values. Checkpoints and feature files
//! both use this framing.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_framed(path: &Path, header_json: &str, payload: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = header_json.as_bytes();
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(header)?;
    for v in payload {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_framed(path: &Path) -> Result<(String, Vec<f64>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Format("file too short for header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let header = String::from_utf8(header).map_err(|_| Error::Format("header is not utf-8".into()))?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(Error::Format(format!("payload of {} bytes is not f64-aligned", rest.len())));
    }
    let payload = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let payload = vec![0.0, -1.5, f64::MAX, 1e-300];
        write_framed(&path, r#"{"t":2,"d_feat":2}"#, &payload).unwrap();
        let (header, back) = read_framed(&path).unwrap();
        assert_eq!(header, r#"{"t":2,"d_feat":2}"#);
        assert_eq!(back, payload);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, [1, 0, 0]).unwrap();
        assert!(matches!(read_framed(&path), Err(Error::Format(_))));
    }
}

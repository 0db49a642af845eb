//! Self-describing checkpoint container: a magic tag, a JSON header that
//! echoes the producing config and the tensor manifest, then raw
//! little-endian f32 blobs in manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tape::Mat;

const MAGIC: &[u8; 8] = b"GSERECK1";

#[derive(thiserror::Error, Debug)]
pub enum CkptError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("header: {0}")]
    Header(String),
    #[error("tensor {name}: expected {expected} bytes, file has {actual}")]
    Truncated { name: String, expected: usize, actual: usize },
    #[error("checkpoint kind mismatch: wanted {wanted}, file holds {found}")]
    KindMismatch { wanted: String, found: String },
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

pub struct Archive {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

pub fn save_archive(path: &Path, archive: &Archive) -> Result<(), CkptError> {
    let header = Header {
        kind: archive.kind.clone(),
        config: archive.config.clone(),
        tensors: archive
            .tensors
            .iter()
            .map(|(name, m)| TensorMeta { name: name.clone(), rows: m.rows, cols: m.cols })
            .collect(),
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| CkptError::Header(e.to_string()))?;
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(hjson.len() as u64).to_le_bytes())?;
    f.write_all(&hjson)?;
    for (_, m) in &archive.tensors {
        for v in &m.data {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Archive, CkptError> {
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CkptError::BadMagic);
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let hlen = u64::from_le_bytes(len8) as usize;
    let mut hjson = vec![0u8; hlen];
    f.read_exact(&mut hjson)?;
    let header: Header =
        serde_json::from_slice(&hjson).map_err(|e| CkptError::Header(e.to_string()))?;
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut off = 0;
    for t in header.tensors {
        let n = t.rows * t.cols;
        let need = 4 * n;
        if rest.len() < off + need {
            return Err(CkptError::Truncated {
                name: t.name,
                expected: need,
                actual: rest.len().saturating_sub(off),
            });
        }
        let data: Vec<f64> = rest[off..off + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        off += need;
        tensors.push((t.name, Mat::from_vec(t.rows, t.cols, data)));
    }
    Ok(Archive { kind: header.kind, config: header.config, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_f32_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let m1 = Mat::from_vec(2, 3, vec![1.5, -2.25, 0.0, 3.0, 0.5, -0.125]);
        let m2 = Mat::from_vec(1, 1, vec![0.1f32 as f64]);
        let arch = Archive {
            kind: "quantizer".into(),
            config: serde_json::json!({"levels": 4}),
            tensors: vec![("a".into(), m1.clone()), ("b".into(), m2.clone())],
        };
        save_archive(&p, &arch).unwrap();
        let back = load_archive(&p).unwrap();
        assert_eq!(back.kind, "quantizer");
        assert_eq!(back.config["levels"], 4);
        assert_eq!(back.tensors[0].1, m1);
        assert_eq!(back.tensors[1].1, m2);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(matches!(load_archive(&p), Err(CkptError::BadMagic)));
    }
}

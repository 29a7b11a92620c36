//! Model checkpoint container: a JSON header describing named tensors plus
//! their raw little-endian payloads. Round trips are bit-exact, so metrics
//! computed from a reloaded model match the original run to the last bit.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VNCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
    /// Payload length in bytes.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

pub fn save(path: &Path, tensors: &[(&str, &Tensor)], meta: &serde_json::Value) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: (*name).to_string(),
            dtype: "f64".to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: payload.len() as u64 - offset,
        });
    }
    let header = Header { version: VERSION, tensors: entries, meta: meta.clone() };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut write = |bytes: &[u8]| file.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(header_bytes.len() as u64).to_le_bytes())?;
    write(&header_bytes)?;
    write(&payload)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Checkpoint("truncated header".to_string()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    let payload = &bytes[header_end..];

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        if end > payload.len() || entry.len % 8 != 0 {
            return Err(Error::Checkpoint(format!("{}: payload out of bounds", entry.name)));
        }
        let numel: usize = entry.shape.iter().product();
        if numel * 8 != entry.len as usize {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} disagrees with {} bytes",
                entry.name, entry.shape, entry.len
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    Ok((tensors, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vnck");
        // Values chosen to stress exactness: subnormals, negative zero, extremes.
        let a = Tensor::matrix(2, 3, vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 0.1]).unwrap();
        let b = Tensor::vector(vec![0.3, -0.7]);
        let meta = json!({"dim": 3, "decoder": "distmult"});
        save(&path, &[("emb", &a), ("rel", &b)], &meta).unwrap();

        let (tensors, loaded_meta) = load(&path).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "emb");
        assert_eq!(tensors[0].1.shape(), &[2, 3]);
        for (x, y) in a.data().iter().zip(tensors[0].1.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(tensors[1].1.data(), b.data());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vnck");
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]);
        save(&path, &[("a", &a)], &serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}

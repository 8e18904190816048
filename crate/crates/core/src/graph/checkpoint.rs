//! Binary checkpoint container.
//!
//! Layout: magic "DFBF", u32 version (little endian), u64 header length,
//! UTF-8 JSON header, then the raw little-endian f32 tensor payload. The
//! header holds the architecture descriptor and a tensor manifest with
//! monotonically increasing, non-overlapping payload offsets. Serialization
//! is canonical (sorted parameter names, stable JSON field order), so
//! save -> load -> save reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Architecture, NetworkGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFBF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    tensors: Vec<ManifestEntry>,
}

pub fn save_checkpoint<T: Scalar>(graph: &NetworkGraph<T>, path: &Path) -> Result<()> {
    let mut manifest = Vec::with_capacity(graph.params().len());
    let mut offset = 0u64;
    for (name, tensor) in graph.params() {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
        });
        offset += (tensor.numel() * 4) as u64;
    }
    let header = Header { architecture: graph.architecture(), tensors: manifest };
    let header_json = serde_json::to_vec(&header)?;

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for tensor in graph.params().values() {
        for &v in tensor.data() {
            w.write_all(&(v.to_f64x() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<NetworkGraph<T>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(format!("{}: file too short for magic", path.display())))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "{}: magic mismatch (expected \"DFBF\", found {:?})",
            path.display(),
            magic
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "{}: unknown format version {version} (supported: {CHECKPOINT_VERSION})",
            path.display()
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::format(format!("{}: truncated header", path.display())))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(format!("{}: invalid header JSON: {e}", path.display())))?;

    let mut expected_offset = 0u64;
    for entry in &header.tensors {
        if entry.offset != expected_offset {
            return Err(Error::format(format!(
                "{}: tensor '{}' offset {} does not match expected {expected_offset}",
                path.display(),
                entry.name,
                entry.offset
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::format(format!(
                "{}: tensor '{}' has unsupported dtype '{}'",
                path.display(),
                entry.name,
                entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        expected_offset += (numel * 4) as u64;
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() as u64 != expected_offset {
        return Err(Error::format(format!(
            "{}: truncated payload (expected {expected_offset} bytes, found {})",
            path.display(),
            payload.len()
        )));
    }

    let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let data: Vec<T> = payload[start..start + numel * 4]
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        params.insert(entry.name.clone(), Tensor::from_vec(entry.shape.clone(), data)?);
    }

    NetworkGraph::new(
        header.architecture.layers,
        params,
        header.architecture.backbone_boundary,
    )
}

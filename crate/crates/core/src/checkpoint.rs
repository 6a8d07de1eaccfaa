//! Bit-exact checkpoint container.
//!
//! Layout: bytes 0..8 hold the ASCII magic `FRISMCK1`; bytes 8..12 a
//! little-endian u32 manifest length M; bytes 12..12+M a UTF-8 JSON
//! manifest; the remainder is the payload of raw little-endian f32 values.
//!
//! The manifest lists `arch`, `provenance`, and a `tensors` array of
//! `{name, shape, offset}` entries sorted by name, with byte offsets
//! relative to the payload start. Three optional trailing fields
//! (`lambda_lrm`, `inject_normalizer`, `variant`) are used by subspace
//! decomposition and gate archives; plain model checkpoints omit them, so
//! their bytes match the documented format exactly.
//!
//! Serialization is fully deterministic: same inputs, same bytes. Loading
//! validates everything it reads and names the offending tensor in errors.

use crate::error::{Error, Result};
use crate::model::{ArchSpec, ModelParams, Provenance};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Leading magic bytes of every container file.
pub const MAGIC: &[u8; 8] = b"FRISMCK1";

/// Upper bound on the JSON manifest, to reject garbage length prefixes.
pub const MAX_MANIFEST_BYTES: u32 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// The JSON manifest. Field order here is the serialized field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub arch: ArchSpec,
    pub provenance: Provenance,
    pub tensors: Vec<TensorEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda_lrm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inject_normalizer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub variant: Option<String>,
}

/// A decoded container: manifest metadata plus named tensors.
#[derive(Debug, Clone)]
pub struct Container {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

/// FNV-1a over a byte slice; used as the stable content checksum.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Serializes tensors (sorted by name) plus metadata into container bytes.
pub fn container_to_bytes(
    arch: &ArchSpec,
    provenance: Provenance,
    tensors: &BTreeMap<String, Tensor>,
    lambda_lrm: Option<f64>,
    inject_normalizer: Option<f64>,
    variant: Option<String>,
) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let manifest = Manifest {
        arch: arch.clone(),
        provenance,
        tensors: entries,
        lambda_lrm,
        inject_normalizer,
        variant,
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    if manifest_json.len() as u64 > MAX_MANIFEST_BYTES as u64 {
        return Err(Error::Format("manifest exceeds size bound".into()));
    }
    let mut out = Vec::with_capacity(12 + manifest_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    for t in tensors.values() {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates container bytes.
pub fn container_from_bytes(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 12 {
        return Err(Error::Format("file shorter than header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if mlen > MAX_MANIFEST_BYTES {
        return Err(Error::Format(format!("manifest length {mlen} exceeds bound")));
    }
    let mlen = mlen as usize;
    if bytes.len() < 12 + mlen {
        return Err(Error::Format("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + mlen])
        .map_err(|e| Error::Format(format!("manifest parse failed: {e}")))?;
    let payload = &bytes[12 + mlen..];

    let mut tensors = BTreeMap::new();
    let mut expect_offset = 0u64;
    for entry in &manifest.tensors {
        if tensors.contains_key(&entry.name) {
            return Err(Error::Format(format!("duplicate tensor '{}'", entry.name)));
        }
        if entry.offset != expect_offset {
            return Err(Error::Format(format!(
                "tensor '{}' offset {} breaks payload contiguity (expected {})",
                entry.name, entry.offset, expect_offset
            )));
        }
        let count: usize = entry.shape.iter().product();
        if entry.shape.iter().any(|&d| d == 0) || entry.shape.is_empty() {
            return Err(Error::Format(format!(
                "tensor '{}' declares degenerate shape {:?}",
                entry.name, entry.shape
            )));
        }
        let nbytes = 4u64 * count as u64;
        let end = entry.offset + nbytes;
        if end > payload.len() as u64 {
            return Err(Error::Format(format!(
                "truncated payload for tensor '{}'",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(count);
        let start = entry.offset as usize;
        for chunk in payload[start..start + nbytes as usize].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        tensors.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?);
        expect_offset = end;
    }
    let names: Vec<&String> = manifest.tensors.iter().map(|e| &e.name).collect();
    let mut sorted = names.clone();
    sorted.sort();
    if names != sorted {
        return Err(Error::Format("manifest tensors are not sorted by name".into()));
    }
    if expect_offset != payload.len() as u64 {
        return Err(Error::Format(format!(
            "payload holds {} bytes but manifest accounts for {expect_offset}",
            payload.len()
        )));
    }
    Ok(Container { manifest, tensors })
}

/// Writes a model as a checkpoint file.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    params.validate()?;
    let bytes = container_to_bytes(
        &params.arch,
        params.provenance,
        &params.tensors,
        None,
        None,
        None,
    )?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint file back into a validated model.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    let container = container_from_bytes(&bytes)?;
    let params = ModelParams {
        arch: container.manifest.arch,
        tensors: container.tensors,
        provenance: container.manifest.provenance,
    };
    params.validate()?;
    Ok(params)
}

/// Checksum of a model's serialized container bytes.
pub fn checkpoint_checksum(params: &ModelParams) -> Result<u64> {
    let bytes = container_to_bytes(
        &params.arch,
        params.provenance,
        &params.tensors,
        None,
        None,
        None,
    )?;
    Ok(fnv1a64(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triple::params_bitwise_eq;

    fn model() -> ModelParams {
        ModelParams::init(&ArchSpec::default(), 17).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(params_bitwise_eq(&m, &back));
        assert_eq!(back.provenance, Provenance::Base);
    }

    #[test]
    fn serialization_is_deterministic() {
        let m = model();
        let a = container_to_bytes(&m.arch, m.provenance, &m.tensors, None, None, None).unwrap();
        let b = container_to_bytes(&m.arch, m.provenance, &m.tensors, None, None, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(fnv1a64(&a), fnv1a64(&b));
    }

    #[test]
    fn optional_manifest_fields_are_omitted_for_plain_checkpoints() {
        let m = model();
        let bytes =
            container_to_bytes(&m.arch, m.provenance, &m.tensors, None, None, None).unwrap();
        let mlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let json = std::str::from_utf8(&bytes[12..12 + mlen]).unwrap();
        assert!(!json.contains("lambda_lrm"));
        assert!(!json.contains("variant"));
        assert!(json.starts_with("{\"arch\""));
    }

    #[test]
    fn bad_magic_is_named() {
        let m = model();
        let mut bytes =
            container_to_bytes(&m.arch, m.provenance, &m.tensors, None, None, None).unwrap();
        bytes[0] = b'X';
        let err = container_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        assert_eq!(err.kind(), "format");
    }

    #[test]
    fn truncated_payload_names_the_tensor() {
        let m = model();
        let bytes =
            container_to_bytes(&m.arch, m.provenance, &m.tensors, None, None, None).unwrap();
        let cut = bytes.len() - 10;
        let err = container_from_bytes(&bytes[..cut]).unwrap_err();
        assert!(
            err.to_string().contains("truncated payload for tensor"),
            "{err}"
        );
    }

    #[test]
    fn shape_payload_mismatch_names_the_tensor() {
        // Hand-build a container whose manifest declares more floats than
        // the payload holds for tensor "a".
        let manifest = r#"{"arch":{"input_dim":16,"hidden_dim":32,"num_hidden_layers":2,"output_classes":4,"activation":"tanh","frozen_layers":["adapter.w"]},"provenance":"base","tensors":[{"name":"a","shape":[2,2],"offset":0}]}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        bytes.extend_from_slice(manifest.as_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        bytes.extend_from_slice(&3.0f32.to_le_bytes());
        let err = container_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("'a'"), "{err}");
    }

    #[test]
    fn unsorted_manifest_is_rejected() {
        let m = model();
        let bytes =
            container_to_bytes(&m.arch, m.provenance, &m.tensors, None, None, None).unwrap();
        let container = container_from_bytes(&bytes).unwrap();
        let mut manifest = container.manifest.clone();
        manifest.tensors.swap(0, 1);
        // Fix offsets so contiguity still holds; order check must fire.
        let mut off = 0u64;
        for e in manifest.tensors.iter_mut() {
            e.offset = off;
            off += 4 * e.shape.iter().product::<usize>() as u64;
        }
        let mjson = serde_json::to_vec(&manifest).unwrap();
        let mut forged = Vec::new();
        forged.extend_from_slice(MAGIC);
        forged.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
        forged.extend_from_slice(&mjson);
        let payload_start = 12
            + u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        // Payload bytes reshuffled to match the forged manifest order.
        let adapter_b_len = 4 * 32;
        forged.extend_from_slice(
            &bytes[payload_start + adapter_b_len..payload_start + adapter_b_len + 4 * 32 * 16],
        );
        forged.extend_from_slice(&bytes[payload_start..payload_start + adapter_b_len]);
        forged.extend_from_slice(&bytes[payload_start + adapter_b_len + 4 * 32 * 16..]);
        let err = container_from_bytes(&forged).unwrap_err();
        assert!(err.to_string().contains("sorted"), "{err}");
    }

    #[test]
    fn loading_wrong_arch_tensor_set_fails_validation() {
        let m = model();
        let mut tensors = m.tensors.clone();
        tensors.remove("layer1.b");
        let bytes =
            container_to_bytes(&m.arch, m.provenance, &tensors, None, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.ck");
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn fnv1a64_matches_reference_vectors() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}

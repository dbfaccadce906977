//! Checkpoint files: one line of JSON header, then the raw little-endian
//! `f64` payload. Offsets in the header are relative to the payload start.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{is_backbone, ModelConfig, ModelError, Result, SimModel};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save_checkpoint(path: &Path, model: &SimModel, metadata: serde_json::Value) -> Result<()> {
    let io = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut offset = 0u64;
    let tensors = model
        .params()
        .iter()
        .map(|p| {
            let nbytes = 8 * p.value.numel() as u64;
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                nbytes,
            };
            offset += nbytes;
            e
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config,
        metadata,
        tensors,
    };
    let json = serde_json::to_string(&header).map_err(|e| ModelError::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    w.write_all(json.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    for p in model.params() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &bytes[nl + 1..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut problems = Vec::new();
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
        if e.dtype != "f64" {
            problems.push(format!("{}: dtype {}", e.name, e.dtype));
        } else if e.nbytes != 8 * numel as u64 {
            problems.push(format!(
                "{}: {} bytes for shape {:?}",
                e.name, e.nbytes, e.shape
            ));
        } else if end > payload.len() {
            problems.push(format!("{}: payload truncated", e.name));
        } else {
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
    }
    if !problems.is_empty() {
        return Err(bad(problems.join("; ")));
    }
    Ok(Checkpoint {
        format_version: header.format_version,
        config: header.config,
        metadata: header.metadata,
        tensors,
    })
}

impl SimModel {
    /// Rebuild exactly the model stored in `ck`.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<SimModel> {
        let mut m = SimModel::new(ck.config, 0)?;
        if ck.get("decoder.out.weight").is_some() {
            m.attach_decoder(0);
        }
        let mut problems = Vec::new();
        let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
        for name in &names {
            match ck.get(name) {
                Some(t) => {
                    if let Err(e) = m.set(name, t.clone()) {
                        problems.push(e.to_string());
                    }
                }
                None => problems.push(format!("{name}: missing")),
            }
        }
        for (n, _) in &ck.tensors {
            if m.get(n).is_none() {
                problems.push(format!("{n}: not a model parameter"));
            }
        }
        if !problems.is_empty() {
            return Err(ModelError::TensorMismatch(problems));
        }
        Ok(m)
    }

    /// Copy every backbone tensor from `ck`, leaving head and decoder
    /// untouched. With `mirror_forward`, the backward scan tensors are then
    /// set from the loaded forward ones.
    pub fn load_backbone(&mut self, ck: &Checkpoint, mirror_forward: bool) -> Result<()> {
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        for p in self.params() {
            if !is_backbone(&p.name) {
                continue;
            }
            match ck.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => {
                    updates.push((p.name.clone(), t.clone()))
                }
                Some(t) => problems.push(format!(
                    "{}: checkpoint {:?}, model {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )),
                None => problems.push(format!("{}: missing", p.name)),
            }
        }
        if !problems.is_empty() {
            return Err(ModelError::TensorMismatch(problems));
        }
        for (n, t) in updates {
            self.set(&n, t)?;
        }
        if mirror_forward {
            self.mirror_forward_direction();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{is_head, Variant};
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::new(Variant::Micro, 4).truncated(6)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = SimModel::new(cfg(), 3).unwrap();
        m.attach_decoder(4);
        save_checkpoint(&path, &m, serde_json::json!({"note": "x"})).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.metadata["note"], "x");
        let back = SimModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back.config, m.config);
        for (p, q) in m.params().iter().zip(back.params()) {
            assert_eq!(p.name, q.name);
            let a: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = q.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn reset_head_after_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = SimModel::new(cfg(), 3).unwrap();
        save_checkpoint(&path, &m, serde_json::Value::Null).unwrap();
        let mut back = SimModel::from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
        back.reset_head(99);
        for (p, q) in m.params().iter().zip(back.params()) {
            if p.name == "head.weight" {
                assert_ne!(p.value, q.value);
            } else if !is_head(&p.name) {
                assert_eq!(p.value, q.value);
            }
        }
    }

    #[test]
    fn backbone_transfer_and_mirroring() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ar.ckpt");
        let mut ar = SimModel::new(cfg(), 5).unwrap();
        ar.attach_decoder(6);
        save_checkpoint(&path, &ar, serde_json::Value::Null).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let mut ft = SimModel::new(cfg(), 7).unwrap();
        ft.load_backbone(&ck, true).unwrap();
        for p in ft.params() {
            if is_head(&p.name) {
                continue;
            }
            let src = p.name.replace(".bwd.", ".fwd.");
            assert_eq!(p.value.as_ref(), ck.get(&src).unwrap(), "{}", p.name);
        }
    }

    #[test]
    fn mismatches_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = SimModel::new(cfg(), 3).unwrap();
        save_checkpoint(&path, &m, serde_json::Value::Null).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let mut other = SimModel::new(cfg().truncated(7), 3).unwrap();
        match other.load_backbone(&ck, false) {
            Err(ModelError::TensorMismatch(v)) => {
                assert_eq!(v.len(), 1);
                assert!(v[0].starts_with("pos_embed"));
            }
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn version_and_truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = SimModel::new(cfg(), 3).unwrap();
        save_checkpoint(&path, &m, serde_json::Value::Null).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        let text = String::from_utf8_lossy(&bytes).replacen(
            "\"format_version\":1",
            "\"format_version\":9",
            1,
        );
        fs::write(&path, text.as_bytes()).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut patched = text.as_bytes()[..nl].to_vec();
        patched.extend_from_slice(&bytes[nl..]);
        fs::write(&path, patched).unwrap();
        assert!(load_checkpoint(&path)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }
}

//! Checkpoint files: one line of JSON header, a newline, then every tensor
//! as little-endian f64 in manifest order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LoraAdapterSet, LoraConfig, ModelConfig, ModelError, ModelParams, Provenance, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub provenance: Provenance,
    pub lora_merged: bool,
    pub lora: Option<LoraConfig>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run notes (subject id, class word, stage settings).
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adapters: Option<LoraAdapterSet>,
    pub vocab_hash: String,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, vocab_hash: impl Into<String>) -> Self {
        Self {
            params,
            adapters: None,
            vocab_hash: vocab_hash.into(),
            meta: BTreeMap::new(),
        }
    }

    fn header(&self) -> CheckpointHeader {
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        let mut add = |name: String, t: &Tensor| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len() as u64;
        };
        for (n, t) in self.params.named() {
            add(n, t);
        }
        if let Some(a) = &self.adapters {
            for (n, t) in a.named() {
                add(n, t);
            }
        }
        CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.params.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            provenance: self.params.provenance,
            lora_merged: self.params.lora_merged,
            lora: self.adapters.as_ref().map(|a| a.config.clone()),
            tensors,
            meta: self.meta.clone(),
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.params.named().into_iter().map(|(_, t)| t).collect();
        if let Some(a) = &self.adapters {
            out.extend(a.named().into_iter().map(|(_, t)| t));
        }
        out
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let header = serde_json::to_string(&ckpt.header()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(header.as_bytes())?;
    w.write_all(b"\n")?;
    for t in ckpt.tensors() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint and returns it with its header.
pub fn read_checkpoint<R: Read>(r: R) -> Result<(Checkpoint, CheckpointHeader)> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(ModelError::Checkpoint("missing header terminator".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "format version {} (expected {CHECKPOINT_VERSION})",
            header.format_version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut params = ModelParams::init(&header.config, 0)?;
    params.provenance = header.provenance;
    params.lora_merged = header.lora_merged;
    let mut adapter_tensors = Vec::new();
    let mut expected = 0u64;
    for e in &header.tensors {
        if e.offset != expected {
            return Err(ModelError::Checkpoint(format!("{}: offset {} out of order", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let (start, end) = (e.offset as usize, e.offset as usize + 8 * n);
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| ModelError::Checkpoint(format!("{}: payload truncated", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        expected = end as u64;
        if e.name.starts_with("lora.") {
            adapter_tensors.push((e.name.clone(), t));
            continue;
        }
        let slot = params.get_mut(&e.name)?;
        if slot.shape() != t.shape() {
            return Err(ModelError::Checkpoint(format!("{}: shape {:?}", e.name, t.shape())));
        }
        *slot = t;
    }
    if expected as usize != payload.len() {
        return Err(ModelError::Checkpoint("trailing bytes after payload".into()));
    }
    if !params.is_finite() {
        return Err(ModelError::Checkpoint("non-finite parameter".into()));
    }
    let adapters = match &header.lora {
        Some(cfg) => Some(LoraAdapterSet::from_named(
            cfg.clone(),
            header.config.hidden,
            adapter_tensors,
        )?),
        None if adapter_tensors.is_empty() => None,
        None => return Err(ModelError::Checkpoint("adapter tensors without lora config".into())),
    };
    let ckpt = Checkpoint {
        params,
        adapters,
        vocab_hash: header.vocab_hash.clone(),
        meta: header.meta.clone(),
    };
    Ok((ckpt, header))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, CheckpointHeader)> {
    read_checkpoint(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LoraConfig;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            vocab_size: 12,
            context_len: 10,
            text_max: 4,
            rms_eps: 1e-5,
        };
        let mut params = ModelParams::init(&cfg, 4).unwrap();
        params.provenance = Provenance::Stage1;
        let mut ckpt = Checkpoint::new(params, "abc");
        let mut set = LoraAdapterSet::new(&LoraConfig::new(2, 2), &cfg, 1).unwrap();
        set.pairs[0].b = Tensor::full(&[8, 2], 0.25);
        ckpt.adapters = Some(set);
        ckpt.meta.insert("class".into(), "dog".into());
        ckpt
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let (back, header) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(header.provenance, Provenance::Stage1);
        assert_eq!(header.tensors[1].offset, 8 * 12 * 8);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
        assert!(read_checkpoint(&b"{}"[..]).is_err());
    }
}

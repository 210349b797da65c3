//! `GPVS1` checkpoints: magic, little-endian `u32` manifest length, JSON
//! manifest, then little-endian `f64` payloads. Offsets are byte offsets from
//! the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpPriorSpec;
use crate::seq2seq::{ModelConfig, Seq2SeqModel, Variant};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"GPVS1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub variant: Variant,
    #[serde(rename = "V")]
    pub vocab: usize,
    #[serde(rename = "E")]
    pub emb: usize,
    #[serde(rename = "H")]
    pub hidden: usize,
    #[serde(rename = "D")]
    pub latent: usize,
    pub gp_spec: Option<GpPriorSpec>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

pub fn to_bytes(model: &Seq2SeqModel) -> Vec<u8> {
    let c = &model.config;
    let mut tensors = BTreeMap::new();
    let mut payload = Vec::with_capacity(model.num_parameters() * 8);
    for (name, t) in model.tensors() {
        tensors.insert(
            name.to_string(),
            TensorEntry {
                offset: payload.len() as u64,
                shape: t.shape().to_vec(),
            },
        );
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        variant: c.variant,
        vocab: c.vocab,
        emb: c.emb,
        hidden: c.hidden,
        latent: c.latent,
        gp_spec: c.gp_spec,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Seq2SeqModel> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("bad magic"));
    }
    let len_bytes: [u8; 4] = bytes[5..9].try_into().expect("4 bytes");
    let mlen = u32::from_le_bytes(len_bytes) as usize;
    let payload_start = 9usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[9..payload_start])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    let payload = &bytes[payload_start..];
    let config = ModelConfig::new(
        manifest.vocab,
        manifest.emb,
        manifest.hidden,
        manifest.latent,
        manifest.variant,
        manifest.gp_spec,
    )?;
    let mut named = BTreeMap::new();
    for (name, e) in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start.checked_add(n * 8).filter(|&x| x <= payload.len()).ok_or_else(|| {
            Error::Checkpoint(format!("tensor `{name}` runs past the end of the payload"))
        })?;
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        named.insert(name, Tensor::param(e.shape, data)?);
    }
    Seq2SeqModel::from_tensors(config, named)
}

/// Writes via a temporary file so an interrupted save never clobbers the
/// previous checkpoint.
pub fn save_checkpoint(model: &Seq2SeqModel, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(model))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Seq2SeqModel> {
    from_bytes(&fs::read(path)?)
}

//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `CALMCKPT`, a little-endian `u32` format version,
//! a `u32` header length followed by a JSON header (kind, configuration and
//! tensor manifest), the tensors as row-major little-endian `f64` in manifest
//! order, and a trailing little-endian CRC32 of that payload.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calm::{ComposedModel, ConnectionSpec, CrossAttnWeights};
use crate::error::{Error, Result};
use crate::lm::{ModelConfig, TransformerModel};
use crate::lora::{LoraAdapter, LoraModel, LoraTarget};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CALMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Connector,
    Lora,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// A base checkpoint another checkpoint depends on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseRef {
    pub path: PathBuf,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: CheckpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connection: Option<ConnectionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<BaseRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<BaseRef>,
    /// Hash of the evaluation sets the producing run was generated with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_hash: Option<String>,
    pub manifest: Vec<ManifestEntry>,
}

impl Header {
    fn new(kind: CheckpointKind) -> Self {
        Header {
            kind,
            model: None,
            connection: None,
            lora: None,
            anchor: None,
            augment: None,
            eval_hash: None,
            manifest: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    fn from_named<'a>(mut header: Header, named: impl IntoIterator<Item = (String, &'a Tensor)>) -> Self {
        let mut tensors = Vec::new();
        for (name, t) in named {
            header.manifest.push(ManifestEntry {
                name,
                shape: t.shape().to_vec(),
            });
            tensors.push(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor"));
        }
        Checkpoint { header, tensors }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.tensors.iter().map(Tensor::numel).sum::<usize>());
        for t in &self.tensors {
            out.extend(t.to_le_bytes());
        }
        out
    }

    pub fn crc32(&self) -> u32 {
        crc32fast::hash(&self.payload())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let payload = self.payload();
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    /// Parses and verifies a serialized checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: &str| ckpt_err(path, m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("missing CALMCKPT magic"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(ckpt_err(
                path,
                format!("format version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        let hlen = u32_at(12) as usize;
        let body = 16 + hlen;
        if bytes.len() < body + 4 {
            return Err(err("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
        let payload = &bytes[body..bytes.len() - 4];
        let stored = u32_at(bytes.len() - 4);
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(ckpt_err(
                path,
                format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        let expected: usize = header.manifest.iter().map(|m| m.shape.iter().product::<usize>()).sum();
        if payload.len() != 8 * expected {
            return Err(ckpt_err(
                path,
                format!("payload holds {} bytes, manifest needs {}", payload.len(), 8 * expected),
            ));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for m in &header.manifest {
            let n = m.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            tensors.push(
                Tensor::new(m.shape.clone(), data).map_err(|e| ckpt_err(path, format!("tensor {}: {e}", m.name)))?,
            );
        }
        Ok(Checkpoint { header, tensors })
    }

    fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.header.manifest.iter().map(|m| m.name.as_str()).zip(&self.tensors)
    }

    fn expect_kind(&self, kind: CheckpointKind, path: &Path) -> Result<()> {
        if self.header.kind != kind {
            return Err(ckpt_err(
                path,
                format!("expected a {kind:?} checkpoint, found {:?}", self.header.kind),
            ));
        }
        Ok(())
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Atomically writes `ckpt` and returns its payload CRC32.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<u32> {
    write_atomic(path, &ckpt.to_bytes())?;
    Ok(ckpt.crc32())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Payload CRC32 of the checkpoint file at `path` (verified against the
/// stored one).
pub fn checkpoint_crc(path: &Path) -> Result<u32> {
    Ok(load_checkpoint(path)?.crc32())
}

pub fn base_checkpoint(model: &TransformerModel) -> Checkpoint {
    let mut header = Header::new(CheckpointKind::Base);
    header.model = Some(model.config().clone());
    Checkpoint::from_named(header, model.named_params().map(|(n, t)| (n.to_string(), t)))
}

pub fn model_from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<TransformerModel> {
    ckpt.expect_kind(CheckpointKind::Base, path)?;
    let config = ckpt
        .header
        .model
        .clone()
        .ok_or_else(|| ckpt_err(path, "missing model config"))?;
    let named = ckpt.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
    TransformerModel::from_params(config, named).map_err(|e| ckpt_err(path, e.to_string()))
}

/// Bridge tensors only, plus references to the two base checkpoints.
pub fn connector_checkpoint(cm: &ComposedModel, anchor: BaseRef, augment: BaseRef) -> Checkpoint {
    let mut header = Header::new(CheckpointKind::Connector);
    header.connection = Some(cm.spec().clone());
    header.anchor = Some(anchor);
    header.augment = Some(augment);
    let named = cm.weights().iter().enumerate().flat_map(|(k, w)| {
        w.tensor_names()
            .iter()
            .zip(w.tensors())
            .map(move |(n, t)| (format!("bridges.{k}.{n}"), t))
    });
    Checkpoint::from_named(header, named)
}

/// Rebuilds a composed model from a connector checkpoint and its two bases.
pub fn composed_from_checkpoint(
    ckpt: &Checkpoint,
    path: &Path,
    anchor: TransformerModel,
    augment: TransformerModel,
) -> Result<ComposedModel> {
    ckpt.expect_kind(CheckpointKind::Connector, path)?;
    let spec = ckpt
        .header
        .connection
        .clone()
        .ok_or_else(|| ckpt_err(path, "missing connection spec"))?;
    let cm = ComposedModel::new(anchor, augment, spec, 0)?;
    let mut it = ckpt.tensors.iter().cloned();
    let mut weights = Vec::with_capacity(cm.weights().len());
    for w in cm.weights() {
        let mut take = || it.next().ok_or_else(|| ckpt_err(path, "too few bridge tensors"));
        weights.push(CrossAttnWeights {
            w_q: take()?,
            w_k: take()?,
            w_v: take()?,
            w_o: take()?,
            proj: if w.proj.is_some() { Some(take()?) } else { None },
        });
    }
    if it.next().is_some() {
        return Err(ckpt_err(path, "too many bridge tensors"));
    }
    cm.with_weights(weights).map_err(|e| ckpt_err(path, e.to_string()))
}

pub fn lora_checkpoint(model: &LoraModel, anchor: BaseRef) -> Checkpoint {
    let ad = model.adapter();
    let mut header = Header::new(CheckpointKind::Lora);
    header.lora = Some(LoraMeta {
        rank: ad.rank,
        alpha: ad.alpha,
        targets: ad.targets.iter().map(LoraTarget::name).collect(),
    });
    header.anchor = Some(anchor);
    let named = ad
        .targets
        .iter()
        .zip(&ad.a)
        .map(|(t, a)| (format!("{}.lora_a", t.name()), a))
        .chain(
            ad.targets
                .iter()
                .zip(&ad.b)
                .map(|(t, b)| (format!("{}.lora_b", t.name()), b)),
        );
    Checkpoint::from_named(header, named)
}

pub fn lora_from_checkpoint(ckpt: &Checkpoint, path: &Path, anchor: TransformerModel) -> Result<LoraModel> {
    ckpt.expect_kind(CheckpointKind::Lora, path)?;
    let meta = ckpt
        .header
        .lora
        .clone()
        .ok_or_else(|| ckpt_err(path, "missing LoRA metadata"))?;
    let n = meta.targets.len();
    if ckpt.tensors.len() != 2 * n {
        return Err(ckpt_err(path, format!("expected {} adapter tensors", 2 * n)));
    }
    let targets = meta
        .targets
        .iter()
        .map(|t| LoraTarget::parse(t, &anchor))
        .collect::<Result<Vec<_>>>()?;
    let adapter = LoraAdapter {
        rank: meta.rank,
        alpha: meta.alpha,
        targets,
        a: ckpt.tensors[..n].to_vec(),
        b: ckpt.tensors[n..].to_vec(),
    };
    LoraModel::from_parts(anchor, adapter).map_err(|e| ckpt_err(path, e.to_string()))
}

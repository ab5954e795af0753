//! Self-describing binary checkpoints for backbones, prompts, and
//! annotators. The layout is magic, version, kind, producing-config
//! fingerprint, a JSON metadata blob, named f64 tensors, and a SHA-256
//! footer over everything preceding it. Payloads are little-endian
//! 64-bit floats, so a save/load round trip is bit-exact and reruns of
//! a deterministic producer write byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::corpus::Annotator;
use crate::model::{BackboneParams, ModelConfig, Tokenizer, Verbalizer};
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"MPTC";
const VERSION: u32 = 1;
const HASH_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Backbone,
    Prompt,
    Annotator,
}

impl CheckpointKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Backbone => "backbone",
            CheckpointKind::Prompt => "prompt",
            CheckpointKind::Annotator => "annotator",
        }
    }

    fn code(self) -> u8 {
        match self {
            CheckpointKind::Backbone => 0,
            CheckpointKind::Prompt => 1,
            CheckpointKind::Annotator => 2,
        }
    }

    fn from_code(code: u8) -> Result<CheckpointKind> {
        match code {
            0 => Ok(CheckpointKind::Backbone),
            1 => Ok(CheckpointKind::Prompt),
            2 => Ok(CheckpointKind::Annotator),
            other => Err(Error::artifact(format!("unknown checkpoint kind code {other}"))),
        }
    }
}

/// One tensor with its shape; `data.len() == rows * cols` always.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<NamedTensor> {
        let name = name.into();
        if rows * cols != data.len() {
            return Err(Error::artifact(format!(
                "tensor {name:?}: shape {rows}x{cols} does not match {} values",
                data.len()
            )));
        }
        Ok(NamedTensor { name, rows, cols, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Fingerprint of the config that produced this artifact. Recorded
    /// for provenance, not enforced on load: compatibility is checked
    /// at the shape level where it can be diagnosed precisely.
    pub config_fingerprint: String,
    /// Kind-specific metadata as a JSON object.
    pub meta: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    fn encode_body(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        let fp = self.config_fingerprint.as_bytes();
        if fp.len() > u16::MAX as usize {
            return Err(Error::artifact("config fingerprint too long"));
        }
        out.extend_from_slice(&(fp.len() as u16).to_le_bytes());
        out.extend_from_slice(fp);
        let meta = self.meta.as_bytes();
        if meta.len() > u32::MAX as usize {
            return Err(Error::artifact("checkpoint metadata too long"));
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if t.rows * t.cols != t.data.len() {
                return Err(Error::artifact(format!(
                    "tensor {:?}: shape {}x{} does not match {} values",
                    t.name,
                    t.rows,
                    t.cols,
                    t.data.len()
                )));
            }
            let name = t.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(Error::artifact(format!("tensor name {:?} too long", t.name)));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(t.rows as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols as u64).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut body = self.encode_body()?;
        let mut h = Sha256::new();
        h.update(&body);
        body.extend_from_slice(&h.finalize());
        Ok(body)
    }

    /// Hex SHA-256 of the encoded body; this is the value stored in the
    /// file footer and verified on load.
    pub fn content_hash(&self) -> Result<String> {
        let body = self.encode_body()?;
        let mut h = Sha256::new();
        h.update(&body);
        Ok(format!("{:x}", h.finalize()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::artifact(format!("{}: truncated checkpoint", self.path.display())));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::artifact(format!("{}: invalid utf-8 in checkpoint", self.path.display())))
    }
}

/// Reads and verifies a checkpoint. The footer hash is checked before
/// any field is interpreted, so corruption anywhere in the file is
/// reported as corruption rather than as a confusing parse error.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() < MAGIC.len() + 4 + 1 + HASH_LEN {
        return Err(Error::artifact(format!("{}: too short to be a checkpoint", path.display())));
    }
    let (body, footer) = raw.split_at(raw.len() - HASH_LEN);
    let mut h = Sha256::new();
    h.update(body);
    if h.finalize().as_slice() != footer {
        return Err(Error::artifact(format!(
            "{}: content hash mismatch, the checkpoint is corrupt",
            path.display()
        )));
    }
    let mut r = Reader { buf: body, pos: 0, path };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::artifact(format!("{}: not a checkpoint file", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::artifact(format!(
            "{}: checkpoint version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let kind = CheckpointKind::from_code(r.u8()?)?;
    let fp_len = r.u16()? as usize;
    let config_fingerprint = r.string(fp_len)?;
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| {
            Error::artifact(format!("{}: tensor {name:?} shape overflows", path.display()))
        })?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        tensors.push(NamedTensor { name, rows, cols, data });
    }
    if r.pos != body.len() {
        return Err(Error::artifact(format!(
            "{}: {} trailing bytes after the last tensor",
            path.display(),
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint { kind, config_fingerprint, meta, tensors })
}

/// Names for `BackboneParams::params()` order.
fn backbone_tensor_names(n_layers: usize) -> Vec<String> {
    const LAYER_FIELDS: [&str; 16] = [
        "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1",
        "b1", "w2", "b2",
    ];
    let mut names = vec!["tok_embed".to_string(), "pos_embed".to_string()];
    for l in 0..n_layers {
        for f in LAYER_FIELDS {
            names.push(format!("layer{l}.{f}"));
        }
    }
    names.push("final_ln_g".to_string());
    names.push("final_ln_b".to_string());
    names
}

fn tensors_from_params(params: &[Tensor], names: &[String]) -> Result<Vec<NamedTensor>> {
    params
        .iter()
        .zip(names)
        .map(|(t, n)| NamedTensor::new(n.clone(), t.rows(), t.cols(), t.to_vec()))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct BackboneMeta {
    model: ModelConfig,
    vocab_size: usize,
}

pub fn from_backbone(bb: &BackboneParams, fingerprint: &str) -> Result<Checkpoint> {
    let meta = BackboneMeta { model: bb.config.clone(), vocab_size: bb.vocab_size };
    let names = backbone_tensor_names(bb.config.n_layers);
    Ok(Checkpoint {
        kind: CheckpointKind::Backbone,
        config_fingerprint: fingerprint.to_string(),
        meta: serde_json::to_string(&meta)
            .map_err(|e| Error::artifact(format!("serializing backbone metadata: {e}")))?,
        tensors: tensors_from_params(&bb.params(), &names)?,
    })
}

fn rebuild_backbone(ckpt: &Checkpoint, meta: &BackboneMeta) -> Result<BackboneParams> {
    let template = BackboneParams::init(&meta.model, meta.vocab_size, 0)?;
    let expected = template.params();
    if ckpt.tensors.len() != expected.len() {
        return Err(Error::artifact(format!(
            "backbone checkpoint holds {} tensors, the model config wants {}",
            ckpt.tensors.len(),
            expected.len()
        )));
    }
    let mut replacements = Vec::with_capacity(expected.len());
    for (stored, want) in ckpt.tensors.iter().zip(&expected) {
        if (stored.rows, stored.cols) != (want.rows(), want.cols()) {
            return Err(Error::artifact(format!(
                "tensor {:?} has shape {}x{}, the model config wants {}x{}",
                stored.name,
                stored.rows,
                stored.cols,
                want.rows(),
                want.cols()
            )));
        }
        replacements.push(Tensor::constant(stored.data.clone(), stored.rows, stored.cols));
    }
    Ok(template.with_params(replacements)?.freeze())
}

/// Rebuilds a frozen backbone from a backbone checkpoint. Every tensor
/// is shape-checked against the stored model config.
pub fn to_backbone(ckpt: &Checkpoint) -> Result<BackboneParams> {
    if ckpt.kind != CheckpointKind::Backbone {
        return Err(Error::artifact(format!(
            "expected a backbone checkpoint, found kind {:?}",
            ckpt.kind.name()
        )));
    }
    let meta: BackboneMeta = serde_json::from_str(&ckpt.meta)
        .map_err(|e| Error::artifact(format!("backbone metadata: {e}")))?;
    rebuild_backbone(ckpt, &meta)
}

#[derive(Serialize, Deserialize)]
struct PromptMeta {
    /// Which trainer produced the prompt, e.g. "meta" or "ppt".
    role: String,
}

pub fn from_prompt(prompt: &Tensor, role: &str, fingerprint: &str) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: CheckpointKind::Prompt,
        config_fingerprint: fingerprint.to_string(),
        meta: serde_json::to_string(&PromptMeta { role: role.to_string() })
            .map_err(|e| Error::artifact(format!("serializing prompt metadata: {e}")))?,
        tensors: vec![NamedTensor::new("prompt", prompt.rows(), prompt.cols(), prompt.to_vec())?],
    })
}

/// Extracts the prompt as a trainable tensor. Shape compatibility with
/// a model config is the caller's check: only the caller knows which
/// model the prompt is about to meet.
pub fn to_prompt(ckpt: &Checkpoint) -> Result<Tensor> {
    if ckpt.kind != CheckpointKind::Prompt {
        return Err(Error::artifact(format!(
            "expected a prompt checkpoint, found kind {:?}",
            ckpt.kind.name()
        )));
    }
    let [t] = ckpt.tensors.as_slice() else {
        return Err(Error::artifact(format!(
            "prompt checkpoint holds {} tensors, expected exactly one",
            ckpt.tensors.len()
        )));
    };
    Ok(Tensor::param(t.data.clone(), t.rows, t.cols))
}

#[derive(Serialize, Deserialize)]
struct AnnotatorMeta {
    tokenizer: Tokenizer,
    model: ModelConfig,
    vocab_size: usize,
    label_words: Vec<String>,
}

pub fn from_annotator(ann: &Annotator, fingerprint: &str) -> Result<Checkpoint> {
    let bb = ann.backbone();
    let meta = AnnotatorMeta {
        tokenizer: ann.tokenizer().clone(),
        model: bb.config.clone(),
        vocab_size: bb.vocab_size,
        label_words: ann.verbalizer().tokens.clone(),
    };
    let names = backbone_tensor_names(bb.config.n_layers);
    Ok(Checkpoint {
        kind: CheckpointKind::Annotator,
        config_fingerprint: fingerprint.to_string(),
        meta: serde_json::to_string(&meta)
            .map_err(|e| Error::artifact(format!("serializing annotator metadata: {e}")))?,
        tensors: tensors_from_params(&bb.params(), &names)?,
    })
}

/// Rebuilds a scoring-ready annotator: tokenizer and verbalizer from
/// the metadata, weights from the payload, backbone frozen.
pub fn to_annotator(ckpt: &Checkpoint) -> Result<Annotator> {
    if ckpt.kind != CheckpointKind::Annotator {
        return Err(Error::artifact(format!(
            "expected an annotator checkpoint, found kind {:?}",
            ckpt.kind.name()
        )));
    }
    let meta: AnnotatorMeta = serde_json::from_str(&ckpt.meta)
        .map_err(|e| Error::artifact(format!("annotator metadata: {e}")))?;
    let backbone =
        rebuild_backbone(ckpt, &BackboneMeta { model: meta.model, vocab_size: meta.vocab_size })?;
    let verbalizer = Verbalizer::new(&meta.tokenizer, &meta.label_words)?;
    Ok(Annotator::from_parts(meta.tokenizer, backbone, verbalizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tmp(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("metapt-ckpt-{}-{tag}.ckpt", std::process::id()))
    }

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Prompt,
            config_fingerprint: "f".repeat(64),
            meta: r#"{"role":"meta"}"#.to_string(),
            tensors: vec![
                NamedTensor::new("prompt", 2, 3, vec![0.5, -1.25, 3.0, f64::MIN_POSITIVE, 0.0, 9.75])
                    .unwrap(),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let path = tmp("roundtrip");
        let ckpt = sample();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let again = load_checkpoint(&path).unwrap();
        assert_eq!(again, back);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn every_flipped_byte_is_caught() {
        let path = tmp("flip");
        let ckpt = sample();
        let bytes = ckpt.encode().unwrap();
        // Flip one byte at a spread of positions, footer included.
        for pos in (0..bytes.len()).step_by(7).chain([bytes.len() - 1]) {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x01;
            std::fs::write(&path, &bad).unwrap();
            let err = load_checkpoint(&path).unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains("hash mismatch") || msg.contains("corrupt"), "pos {pos}: {msg}");
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncation_and_bad_magic_are_artifact_errors() {
        let path = tmp("trunc");
        let bytes = sample().encode().unwrap();
        std::fs::write(&path, &bytes[..10]).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("too short"));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        // Keep the footer honest so the magic check is what fires.
        let body_len = wrong.len() - HASH_LEN;
        let mut h = Sha256::new();
        h.update(&wrong[..body_len]);
        let footer: [u8; 32] = h.finalize().into();
        wrong[body_len..].copy_from_slice(&footer);
        std::fs::write(&path, &wrong).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("not a checkpoint"));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn backbone_survives_the_trip_with_its_hash() {
        let cfg = ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_seq_len: 12, prompt_len: 2 };
        let bb = BackboneParams::init(&cfg, 11, 3).unwrap().freeze();
        let ckpt = from_backbone(&bb, "fp").unwrap();
        let path = tmp("backbone");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = to_backbone(&load_checkpoint(&path).unwrap()).unwrap();
        assert!(back.frozen);
        assert_eq!(back.content_hash(), bb.content_hash());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn cross_config_backbone_load_names_both_shapes() {
        let cfg = ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_seq_len: 12, prompt_len: 2 };
        let bb = BackboneParams::init(&cfg, 11, 3).unwrap().freeze();
        let mut ckpt = from_backbone(&bb, "fp").unwrap();
        // Same tensors, but the stored config now claims a wider model.
        let mut meta: BackboneMeta = serde_json::from_str(&ckpt.meta).unwrap();
        meta.model.d_model = 16;
        meta.model.d_ff = 32;
        ckpt.meta = serde_json::to_string(&meta).unwrap();
        let msg = to_backbone(&ckpt).unwrap_err().to_string();
        assert!(msg.contains("8x8") || msg.contains("11x8"), "{msg}");
        assert!(msg.contains("16"), "{msg}");
    }

    #[test]
    fn kind_confusion_is_rejected() {
        let ckpt = sample();
        assert!(to_backbone(&ckpt).unwrap_err().to_string().contains("expected a backbone"));
        let cfg = ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_seq_len: 12, prompt_len: 2 };
        let bb = BackboneParams::init(&cfg, 11, 3).unwrap().freeze();
        let bck = from_backbone(&bb, "fp").unwrap();
        assert!(to_prompt(&bck).unwrap_err().to_string().contains("expected a prompt"));
    }
}

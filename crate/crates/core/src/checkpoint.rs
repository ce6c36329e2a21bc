//! Single-file container for trained weights.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "SKTCKPT\0" | version | section count
//! per section: name len, name | meta len, meta JSON | tensor count
//! per tensor:  name len, name | rank, dims… | f32 values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::captioner::{CaptionModel, CaptionerConfig, Vocabulary};
use crate::generator::{GeneratorConfig, GeneratorParams};
use crate::tensor::{ParamSet, Tensor};
use crate::Scalar;

pub const MAGIC: &[u8; 8] = b"SKTCKPT\0";
pub const VERSION: u32 = 1;

pub const GCN_SECTION: &str = "gcn";
pub const CAPTIONER_SECTION: &str = "captioner";
pub const GENERATOR_SECTION: &str = "generator";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no section {0:?}")]
    MissingSection(String),
    #[error("section {section:?} lacks tensor {name:?}")]
    MissingTensor { section: String, name: String },
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Section {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Section {
    pub fn from_params<T: Scalar, P: ParamSet<T>>(meta: Value, params: &P) -> Self {
        let tensors = params
            .named()
            .into_iter()
            .map(|(n, t)| (n.to_owned(), Tensor::from_vec(&t.shape, t.data.iter().map(|v| v.f64() as f32).collect())))
            .collect();
        Self { meta, tensors }
    }

    /// Overwrites every tensor of `params` with the stored one of the same
    /// name and shape.
    pub fn load_into<T: Scalar, P: ParamSet<T>>(&self, section: &str, params: &mut P) -> Result<(), CheckpointError> {
        for (name, slot) in params.named_mut() {
            let (_, stored) = self
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| CheckpointError::MissingTensor { section: section.into(), name: name.into() })?;
            if stored.shape != slot.shape {
                return Err(CheckpointError::ShapeMismatch { name: name.into(), expected: slot.shape.clone(), found: stored.shape.clone() });
            }
            slot.data = stored.data.iter().map(|&v| T::of(v as f64)).collect();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub sections: BTreeMap<String, Section>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let n = self.u32()? as usize;
        if n > self.bytes.len() - self.pos {
            return Err(CheckpointError::Truncated);
        }
        Ok(n)
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section(&self, name: &str) -> Result<&Section, CheckpointError> {
        self.sections.get(name).ok_or_else(|| CheckpointError::MissingSection(name.into()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.sections.len());
        for (name, s) in &self.sections {
            put_bytes(&mut out, name.as_bytes());
            put_bytes(&mut out, s.meta.to_string().as_bytes());
            put_u32(&mut out, s.tensors.len());
            for (tname, t) in &s.tensors {
                put_bytes(&mut out, tname.as_bytes());
                put_u32(&mut out, t.shape.len());
                t.shape.iter().for_each(|&d| put_u32(&mut out, d));
                t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut sections = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let meta_len = r.len()?;
            let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Malformed(format!("meta of {name}: {e}")))?;
            let count = r.u32()?;
            let mut tensors = Vec::new();
            for _ in 0..count {
                let tname = r.string()?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
                let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
                let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
                tensors.push((tname, Tensor::from_vec(&shape, data)));
            }
            sections.insert(name, Section { meta, tensors });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e: std::io::Error| CheckpointError::Io { path: path.display().to_string(), message: e.to_string() };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_bytes(&bytes)
    }

    /// Stores the sketch encoder under `gcn` and the query module, decoder,
    /// configuration and vocabulary under `captioner`.
    pub fn put_caption_model<T: Scalar>(&mut self, model: &CaptionModel<T>) {
        self.sections.insert(GCN_SECTION.into(), Section::from_params(json!({ "layers": model.encoder.gcn.layers.len() }), &model.encoder));
        let meta = json!({ "config": model.config, "vocabulary": model.vocab.tokens() });
        self.sections.insert(CAPTIONER_SECTION.into(), Section::from_params(meta, &model.params));
    }

    pub fn caption_model<T: Scalar>(&self) -> Result<CaptionModel<T>, CheckpointError> {
        let cap = self.section(CAPTIONER_SECTION)?;
        let config: CaptionerConfig = serde_json::from_value(cap.meta.get("config").cloned().unwrap_or(Value::Null))
            .map_err(|e| CheckpointError::Malformed(format!("captioner config: {e}")))?;
        let tokens: Vec<String> = serde_json::from_value(cap.meta.get("vocabulary").cloned().unwrap_or(Value::Null))
            .map_err(|e| CheckpointError::Malformed(format!("vocabulary: {e}")))?;
        let vocab = Vocabulary::from_tokens(tokens).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut model = CaptionModel::init(config, vocab, 0);
        self.section(GCN_SECTION)?.load_into(GCN_SECTION, &mut model.encoder)?;
        cap.load_into(CAPTIONER_SECTION, &mut model.params)?;
        Ok(model)
    }

    pub fn put_generator<T: Scalar>(&mut self, params: &GeneratorParams<T>) {
        self.sections.insert(GENERATOR_SECTION.into(), Section::from_params(json!({ "config": params.config }), params));
    }

    pub fn generator<T: Scalar>(&self) -> Result<GeneratorParams<T>, CheckpointError> {
        let s = self.section(GENERATOR_SECTION)?;
        let config: GeneratorConfig = serde_json::from_value(s.meta.get("config").cloned().unwrap_or(Value::Null))
            .map_err(|e| CheckpointError::Malformed(format!("generator config: {e}")))?;
        let mut params = GeneratorParams::init(config, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        s.load_into(GENERATOR_SECTION, &mut params)?;
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caption_model() -> CaptionModel<f32> {
        let config = CaptionerConfig { dim: 8, queries: 2, ffn_dim: 8, max_len: 6, patch_size: 8, spatial_radius: 0.02, gcn_layers: 2 };
        CaptionModel::init(config, Vocabulary::build(["a cat", "a dog"]), 3)
    }

    #[test]
    fn round_trip_all_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ck = Checkpoint::new();
        let model = caption_model();
        let gen = GeneratorParams::<f32>::init(GeneratorConfig { channels: 4, blocks: 2 }, 9).unwrap();
        ck.put_caption_model(&model);
        ck.put_generator(&gen);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.sections.keys().collect::<Vec<_>>(), ["captioner", "gcn", "generator"]);
        let m2: CaptionModel<f32> = back.caption_model().unwrap();
        assert_eq!(m2.encoder, model.encoder);
        assert_eq!(m2.vocab, model.vocab);
        assert_eq!(
            m2.params.named().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(),
            model.params.named().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>()
        );
        assert_eq!(back.generator::<f32>().unwrap(), gen);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut ck = Checkpoint::new();
        ck.put_generator(&GeneratorParams::<f32>::init(GeneratorConfig { channels: 2, blocks: 0 }, 1).unwrap());
        let bytes = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(CheckpointError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::UnsupportedVersion(2))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::Malformed(_))));
        assert!(matches!(ck.caption_model::<f32>(), Err(CheckpointError::MissingSection(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut ck = Checkpoint::new();
        ck.put_generator(&GeneratorParams::<f32>::init(GeneratorConfig { channels: 2, blocks: 1 }, 1).unwrap());
        let s = ck.sections.get_mut(GENERATOR_SECTION).unwrap();
        s.tensors[0].1 = Tensor::zeros(&[1]);
        assert!(matches!(ck.generator::<f64>(), Err(CheckpointError::ShapeMismatch { .. })));
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::captioner::{CaptionTrainConfig, CaptionerConfig};
use crate::generator::{GeneratorConfig, GeneratorTrainConfig, LossWeights};
use crate::remote::EndpointConfig;

/// Where object captions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionSource {
    /// Load `captioner.checkpoint`.
    Checkpoint,
    /// Train on the input sketches, with `captioner.annotations` or
    /// "a <category>" targets.
    Train,
    /// Skip the model and use "a <category>".
    Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionerSection {
    pub source: CaptionSource,
    pub checkpoint: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub model: CaptionerConfig,
    pub train: CaptionTrainConfig,
}

impl Default for CaptionerSection {
    fn default() -> Self {
        Self {
            source: CaptionSource::Train,
            checkpoint: None,
            annotations: None,
            model: CaptionerConfig::default(),
            train: CaptionTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    /// Weights to load; when absent the generator is trained on the run's
    /// own pairs.
    pub checkpoint: Option<PathBuf>,
    pub model: GeneratorConfig,
    pub train: GeneratorTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    /// `template` or `chat`.
    pub fusion: String,
    /// `heuristic` or `remote`.
    pub layout: String,
    /// `stub` or `remote` for the next three.
    pub embedder: String,
    pub patches: String,
    pub images: String,
    pub embed_dim: usize,
    pub patch_grid: usize,
    pub patch_dim: usize,
    /// Seed of the stub projections.
    pub stub_seed: u64,
    pub chat_model: String,
    pub fusion_endpoint: Option<EndpointConfig>,
    pub layout_endpoint: Option<EndpointConfig>,
    pub embedder_endpoint: Option<EndpointConfig>,
    pub patches_endpoint: Option<EndpointConfig>,
    pub images_endpoint: Option<EndpointConfig>,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            fusion: "template".into(),
            layout: "heuristic".into(),
            embedder: "stub".into(),
            patches: "stub".into(),
            images: "stub".into(),
            embed_dim: 64,
            patch_grid: 8,
            patch_dim: 16,
            stub_seed: 0,
            chat_model: "gpt-4o-mini".into(),
            fusion_endpoint: None,
            layout_endpoint: None,
            embedder_endpoint: None,
            patches_endpoint: None,
            images_endpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub disable_tcla: bool,
    pub disable_sfp: bool,
    pub disable_socp: bool,
    pub disable_mop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input_dir: PathBuf,
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    pub resolution: usize,
    pub stroke_width: usize,
    pub seed: u64,
    /// Use only the first `max_sketches` input sketches.
    pub max_sketches: Option<usize>,
    pub weights: LossWeights,
    pub ablation: AblationFlags,
    pub backends: BackendSection,
    pub captioner: CaptionerSection,
    pub generator: GeneratorSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::from("sketches"),
            corpus: PathBuf::from("captions.txt"),
            output_dir: PathBuf::from("out"),
            resolution: 256,
            stroke_width: 2,
            seed: 0,
            max_sketches: None,
            weights: LossWeights::default(),
            ablation: AblationFlags::default(),
            backends: BackendSection::default(),
            captioner: CaptionerSection::default(),
            generator: GeneratorSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a TOML file; relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_relative(base);
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input_dir);
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        for p in [&mut self.captioner.checkpoint, &mut self.captioner.annotations, &mut self.generator.checkpoint].into_iter().flatten() {
            fix(p);
        }
    }

    /// Structural checks plus existence of every referenced input.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.resolution < 16 || !self.resolution.is_multiple_of(4) {
            return bad(format!("resolution {} must be a multiple of 4 and at least 16", self.resolution));
        }
        if self.stroke_width == 0 {
            return bad("stroke_width must be at least 1".into());
        }
        if !self.input_dir.is_dir() {
            return bad(format!("input_dir {} is not a directory", self.input_dir.display()));
        }
        if !self.corpus.is_file() {
            return bad(format!("corpus {} does not exist", self.corpus.display()));
        }
        let mut paths: Vec<&PathBuf> = self.captioner.annotations.iter().chain(&self.generator.checkpoint).collect();
        if self.captioner.source == CaptionSource::Checkpoint {
            match &self.captioner.checkpoint {
                Some(p) => paths.push(p),
                None => return bad("captioner.source = \"checkpoint\" needs captioner.checkpoint".into()),
            }
        }
        if let Some(missing) = paths.into_iter().find(|p| !p.is_file()) {
            return bad(format!("{} does not exist", missing.display()));
        }
        self.effective_weights().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    /// Loss weights with ablated terms zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.ablation.disable_sfp {
            w.sfp = 0.0;
        }
        if self.ablation.disable_socp {
            w.socp = 0.0;
        }
        if self.ablation.disable_mop {
            w.mop = 0.0;
        }
        w
    }

    /// SHA-256 over the canonical JSON form; any field change changes it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises to JSON");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

//! Scene descriptions: every sketch caption fused into every corpus caption.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::remote::{cache_key, cached_call, DiskCache, JsonTransport, RemoteError};

#[derive(Debug, thiserror::Error)]
pub enum ExpansionError {
    #[error("caption file {0} does not exist")]
    MissingFile(PathBuf),
    #[error("caption file {0} holds no captions")]
    EmptyCorpus(PathBuf),
    #[error("could not read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("empty caption")]
    EmptyCaption,
    #[error("fusion backend {backend} failed: {message}")]
    BackendFailure { backend: String, message: String },
    #[error("pair ({i}, {j}): {source}")]
    AtPair {
        i: usize,
        j: usize,
        #[source]
        source: Box<ExpansionError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaptionRole {
    /// Object captions, one per input sketch.
    Sketch,
    /// Scene captions from an image-caption corpus.
    Image,
}

/// Ordered captions addressed by 1-based index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub role: CaptionRole,
    captions: Vec<String>,
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl CaptionSet {
    /// Whitespace-normalises each caption; empty ones are rejected.
    pub fn new<S: AsRef<str>>(role: CaptionRole, captions: impl IntoIterator<Item = S>) -> Result<Self, ExpansionError> {
        let captions: Vec<String> = captions.into_iter().map(|c| normalize_ws(c.as_ref())).collect();
        if captions.iter().any(String::is_empty) {
            return Err(ExpansionError::EmptyCaption);
        }
        Ok(Self { role, captions })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// 1-based lookup.
    pub fn get(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|k| self.captions.get(k)).map(String::as_str)
    }

    /// `(index, caption)` pairs with 1-based indices.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.captions.iter().enumerate().map(|(k, c)| (k + 1, c.as_str()))
    }

    pub fn captions(&self) -> &[String] {
        &self.captions
    }
}

#[derive(Deserialize)]
struct CorpusLine {
    caption: String,
}

/// Reads one caption per line, or one `{id, caption}` JSON object per line.
/// Blank lines are skipped with a warning.
pub fn ingest_caption_corpus(path: &Path, role: CaptionRole) -> Result<CaptionSet, ExpansionError> {
    if !path.exists() {
        return Err(ExpansionError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| ExpansionError::Read { path: path.to_path_buf(), message: e.to_string() })?;
    let mut captions = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        let caption = if trimmed.starts_with('{') {
            serde_json::from_str::<CorpusLine>(trimmed)
                .map_err(|e| ExpansionError::Read { path: path.to_path_buf(), message: format!("line {}: {e}", n + 1) })?
                .caption
        } else {
            trimmed.to_owned()
        };
        let caption = normalize_ws(&caption);
        if caption.is_empty() {
            log::warn!("{}:{}: blank caption skipped", path.display(), n + 1);
            continue;
        }
        captions.push(caption);
    }
    if captions.is_empty() {
        return Err(ExpansionError::EmptyCorpus(path.to_path_buf()));
    }
    Ok(CaptionSet { role, captions })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub text: String,
    /// 1-based index into the sketch captions.
    pub sketch_index: usize,
    /// 1-based index into the image captions.
    pub image_index: usize,
    pub backend: String,
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// The noun phrase of an object caption: whitespace-normalised, trailing
/// period and leading article removed.
pub fn object_phrase(caption: &str) -> String {
    let c = normalize_ws(caption);
    let c = c.trim_end_matches('.').trim_end();
    match c.split_once(' ') {
        Some((first, rest)) if ARTICLES.contains(&first.to_lowercase().as_str()) => rest.to_owned(),
        None if ARTICLES.contains(&c.to_lowercase().as_str()) => String::new(),
        _ => c.to_owned(),
    }
}

fn indefinite_article(phrase: &str) -> &'static str {
    match phrase.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Whole-word, case-insensitive occurrences of `phrase` in `text`.
pub fn count_phrase(text: &str, phrase: &str) -> usize {
    let text = text.to_lowercase();
    let phrase = phrase.to_lowercase();
    if phrase.is_empty() {
        return 0;
    }
    let boundary = |c: Option<char>| c.is_none_or(|c| !c.is_alphanumeric());
    text.match_indices(&phrase).filter(|(at, m)| boundary(text[..*at].chars().next_back()) && boundary(text[at + m.len()..].chars().next())).count()
}

pub trait FusionBackend: Send + Sync {
    fn name(&self) -> String;

    fn fuse_text(&self, object_caption: &str, scene_caption: &str) -> Result<String, ExpansionError>;

    /// Fused text with the name of the backend that actually produced it.
    fn fuse_named(&self, object_caption: &str, scene_caption: &str) -> Result<(String, String), ExpansionError> {
        Ok((self.fuse_text(object_caption, scene_caption)?, self.name()))
    }
}

/// Offline fusion: "⟨a/an object⟩ in ⟨scene clause⟩", or the scene clause
/// alone when it already names the object.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateFusion;

impl FusionBackend for TemplateFusion {
    fn name(&self) -> String {
        "template".into()
    }

    fn fuse_text(&self, object_caption: &str, scene_caption: &str) -> Result<String, ExpansionError> {
        let phrase = object_phrase(object_caption);
        let scene = normalize_ws(scene_caption);
        let scene = scene.trim_end_matches('.').trim_end();
        if phrase.is_empty() || scene.is_empty() {
            return Err(ExpansionError::EmptyCaption);
        }
        let mut chars = scene.chars();
        let first = chars.next().expect("non-empty");
        let clause: String = first.to_lowercase().chain(chars).collect();
        if count_phrase(&clause, &phrase) > 0 {
            return Ok(clause);
        }
        Ok(format!("{} {phrase} in {clause}", indefinite_article(&phrase)))
    }
}

pub const FUSION_PROMPT_VERSION: &str = "fuse-v1";

pub fn fusion_prompt(object_caption: &str, scene_caption: &str) -> String {
    format!(
        "Merge the object description \"{object_caption}\" into the scene description \"{scene_caption}\". \
         Output one sentence and nothing else."
    )
}

/// Chat-completion style endpoint. Replies are cached by
/// `hash(object caption, scene caption, prompt version)`.
pub struct ChatFusion {
    pub model: String,
    transport: Box<dyn JsonTransport>,
    cache: Option<DiskCache>,
}

impl ChatFusion {
    pub fn new(model: impl Into<String>, transport: Box<dyn JsonTransport>, cache: Option<DiskCache>) -> Self {
        Self { model: model.into(), transport, cache }
    }

    fn failure(&self, e: impl std::fmt::Display) -> ExpansionError {
        ExpansionError::BackendFailure { backend: self.name(), message: e.to_string() }
    }
}

/// First string found at `choices[0].message.content`, `choices[0].text`,
/// `text`, or `output`.
pub(crate) fn reply_text(v: &Value) -> Option<&str> {
    v.pointer("/choices/0/message/content")
        .or_else(|| v.pointer("/choices/0/text"))
        .or_else(|| v.get("text"))
        .or_else(|| v.get("output"))
        .and_then(Value::as_str)
}

impl FusionBackend for ChatFusion {
    fn name(&self) -> String {
        format!("chat:{}", self.model)
    }

    fn fuse_text(&self, object_caption: &str, scene_caption: &str) -> Result<String, ExpansionError> {
        let phrase = object_phrase(object_caption);
        if phrase.is_empty() || scene_caption.trim().is_empty() {
            return Err(ExpansionError::EmptyCaption);
        }
        let prompt = fusion_prompt(object_caption, scene_caption);
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let key = cache_key(&[object_caption, scene_caption, FUSION_PROMPT_VERSION]);
        let reply = cached_call(self.cache.as_ref(), &key, self.transport.as_ref(), &body).map_err(|e| self.failure(e))?;
        let text = reply_text(&reply).map(normalize_ws).ok_or_else(|| self.failure(RemoteError::BadResponse(reply.to_string())))?;
        if text.is_empty() || count_phrase(&text, &phrase) == 0 {
            return Err(self.failure(format!("reply {text:?} drops the object {phrase:?}")));
        }
        Ok(text)
    }
}

/// Uses `fallback` whenever `primary` reports a backend failure.
pub struct FallbackFusion<P, F> {
    pub primary: P,
    pub fallback: F,
}

impl<P: FusionBackend, F: FusionBackend> FusionBackend for FallbackFusion<P, F> {
    fn name(&self) -> String {
        self.primary.name()
    }

    fn fuse_text(&self, object_caption: &str, scene_caption: &str) -> Result<String, ExpansionError> {
        self.fuse_named(object_caption, scene_caption).map(|(t, _)| t)
    }

    fn fuse_named(&self, object_caption: &str, scene_caption: &str) -> Result<(String, String), ExpansionError> {
        match self.primary.fuse_named(object_caption, scene_caption) {
            Err(ExpansionError::BackendFailure { backend, message }) => {
                log::warn!("{backend} failed ({message}); using {}", self.fallback.name());
                self.fallback.fuse_named(object_caption, scene_caption)
            }
            other => other,
        }
    }
}

impl FusionBackend for Box<dyn FusionBackend> {
    fn name(&self) -> String {
        self.as_ref().name()
    }

    fn fuse_text(&self, object_caption: &str, scene_caption: &str) -> Result<String, ExpansionError> {
        self.as_ref().fuse_text(object_caption, scene_caption)
    }

    fn fuse_named(&self, object_caption: &str, scene_caption: &str) -> Result<(String, String), ExpansionError> {
        self.as_ref().fuse_named(object_caption, scene_caption)
    }
}

fn describe(i: usize, j: usize, c_o: &str, c_p: &str, backend: &dyn FusionBackend) -> Result<SceneDescription, ExpansionError> {
    if c_o.trim().is_empty() || c_p.trim().is_empty() {
        return Err(ExpansionError::EmptyCaption);
    }
    let (text, name) = backend.fuse_named(c_o, c_p)?;
    let phrase = object_phrase(c_o);
    if text.trim().is_empty() || count_phrase(&text, &phrase) == 0 {
        return Err(ExpansionError::BackendFailure { backend: name, message: format!("output {text:?} lost the object {phrase:?}") });
    }
    Ok(SceneDescription { text, sketch_index: i, image_index: j, backend: name })
}

/// Fuses a single pair; provenance is reported as (1, 1).
pub fn fuse(object_caption: &str, scene_caption: &str, backend: &dyn FusionBackend) -> Result<SceneDescription, ExpansionError> {
    describe(1, 1, object_caption, scene_caption, backend)
}

/// All `M × N` descriptions in lexicographic `(i, j)` order. Pairs are
/// fused in parallel.
pub fn expand_all(objects: &CaptionSet, scenes: &CaptionSet, backend: &dyn FusionBackend) -> Result<Vec<SceneDescription>, ExpansionError> {
    let pairs: Vec<(usize, usize)> = (1..=objects.len()).flat_map(|i| (1..=scenes.len()).map(move |j| (i, j))).collect();
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let c_o = objects.get(i).expect("index in range");
            let c_p = scenes.get(j).expect("index in range");
            describe(i, j, c_o, c_p, backend).map_err(|e| ExpansionError::AtPair { i, j, source: Box::new(e) })
        })
        .collect()
}

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::layout::LayoutBox;

pub const SKETCH_DIR: &str = "sketches";
pub const SCENE_SKETCH_DIR: &str = "scene_sketches";
pub const IMAGE_DIR: &str = "images";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Record id for sketch `i` and caption `j` (both 1-based).
pub fn record_id(i: usize, j: usize) -> String {
    format!("s{i:04}_c{j:04}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendNames {
    pub fusion: String,
    pub layout: String,
    pub embedder: String,
    pub patches: String,
    pub images: String,
}

/// One scene sketch, its text and its image. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    /// 1-based index of the input sketch.
    pub sketch_index: usize,
    /// 1-based index of the corpus caption.
    pub caption_index: usize,
    pub sketch_id: String,
    pub category: Option<String>,
    pub object_caption: String,
    pub corpus_caption: String,
    /// Scene text `c_s`.
    pub caption: String,
    /// Object sketch placed in its layout box, stroke-3 JSON.
    pub sketch_vector_path: String,
    /// Generated scene sketch `s_s`.
    pub sketch_raster_path: String,
    /// Scene image `x0`.
    pub image_path: String,
    pub layout: LayoutBox,
    pub backends: BackendNames,
    pub seed: u64,
}

impl TripletRecord {
    pub fn paths(&self) -> [&str; 3] {
        [&self.sketch_vector_path, &self.sketch_raster_path, &self.image_path]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairFailure {
    pub id: String,
    pub sketch_index: usize,
    pub caption_index: usize,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub config_hash: String,
    /// Input sketches.
    pub m: usize,
    /// Corpus captions.
    pub n: usize,
    pub expected: usize,
    pub records: usize,
    pub failures: Vec<PairFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<TripletRecord>,
}

impl Manifest {
    pub fn new(config_hash: String, m: usize, n: usize, mut records: Vec<TripletRecord>, mut failures: Vec<PairFailure>) -> Self {
        records.sort_by_key(|r| (r.sketch_index, r.caption_index));
        failures.sort_by_key(|f| (f.sketch_index, f.caption_index));
        let header = ManifestHeader { config_hash, m, n, expected: m * n, records: records.len(), failures };
        Self { header, records }
    }

    /// Header on line 0, then one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serialises");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, PipelineError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or_else(|| PipelineError::Manifest("empty manifest".into()))?;
        let header: ManifestHeader = serde_json::from_str(head).map_err(|e| PipelineError::Manifest(format!("line 1: {e}")))?;
        let records = lines
            .map(|(k, l)| serde_json::from_str(l).map_err(|e| PipelineError::Manifest(format!("line {}: {e}", k + 1))))
            .collect::<Result<_, _>>()?;
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        let tmp = path.with_extension("jsonl.tmp");
        std::fs::write(&tmp, self.to_jsonl()).map_err(|e| PipelineError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    Unreadable,
    MissingFile,
    DuplicateId,
    DuplicatePair,
    OutOfBounds,
    EmptyCaption,
    IdMismatch,
    CountMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub id: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.id {
            Some(id) => write!(f, "{:?} [{id}]: {}", self.kind, self.message),
            None => write!(f, "{:?}: {}", self.kind, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Checks record invariants, file existence, provenance bounds and
/// uniqueness, and the record count. Problems are reported, never raised.
pub fn validate_manifest(path: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    let manifest = match Manifest::read(path) {
        Ok(m) => m,
        Err(e) => {
            report.violations.push(Violation { kind: ViolationKind::Unreadable, id: None, message: e.to_string() });
            return report;
        }
    };
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let h = &manifest.header;
    report.records = manifest.records.len();
    let mut push = |kind, id: Option<&str>, message: String| report.violations.push(Violation { kind, id: id.map(str::to_owned), message });
    let mut ids = HashSet::new();
    let mut pairs = HashSet::new();
    for r in &manifest.records {
        let id = Some(r.id.as_str());
        if !ids.insert(r.id.clone()) {
            push(ViolationKind::DuplicateId, id, "id appears more than once".into());
        }
        let in_bounds = (1..=h.m).contains(&r.sketch_index) && (1..=h.n).contains(&r.caption_index);
        if !in_bounds {
            push(ViolationKind::OutOfBounds, id, format!("provenance ({}, {}) outside {}×{}", r.sketch_index, r.caption_index, h.m, h.n));
        } else if !pairs.insert((r.sketch_index, r.caption_index)) {
            push(ViolationKind::DuplicatePair, id, format!("pair ({}, {}) appears more than once", r.sketch_index, r.caption_index));
        }
        if r.id != record_id(r.sketch_index, r.caption_index) {
            push(ViolationKind::IdMismatch, id, format!("id does not match provenance ({}, {})", r.sketch_index, r.caption_index));
        }
        if r.caption.trim().is_empty() {
            push(ViolationKind::EmptyCaption, id, "scene caption is empty".into());
        }
        for p in r.paths() {
            if !base.join(p).is_file() {
                push(ViolationKind::MissingFile, id, format!("{p} is missing"));
            }
        }
    }
    for f in &h.failures {
        if !pairs.insert((f.sketch_index, f.caption_index)) {
            push(ViolationKind::DuplicatePair, Some(&f.id), "failed pair also has a record or a second failure".into());
        }
    }
    let covered = manifest.records.len() + h.failures.len();
    if h.records != manifest.records.len() || covered != h.expected || h.expected != h.m * h.n {
        push(
            ViolationKind::CountMismatch,
            None,
            format!(
                "header says {} records of {} expected ({}×{}); found {} records and {} failures",
                h.records,
                h.expected,
                h.m,
                h.n,
                manifest.records.len(),
                h.failures.len()
            ),
        );
    }
    report
}

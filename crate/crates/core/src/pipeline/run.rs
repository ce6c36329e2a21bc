use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde_json::json;

use super::config::{BackendSection, CaptionSource, PipelineConfig};
use super::manifest::{
    record_id, validate_manifest, BackendNames, Manifest, PairFailure, TripletRecord, IMAGE_DIR, MANIFEST_FILE, SCENE_SKETCH_DIR, SKETCH_DIR,
};
use super::PipelineError;
use crate::backends::{
    stub_embedder, stub_image_generator, stub_patch_extractor, Backends, ImageGeneratorBackend, PatchFeatureExtractor, RemoteEmbedder,
    RemoteImageGenerator, RemotePatchExtractor, SemanticEmbedder,
};
use crate::captioner::{load_annotations, token_accuracy, train_captioner, CaptionExample, CaptionModel, CaptionTrainReport, Stage, Vocabulary};
use crate::checkpoint::{Checkpoint, GENERATOR_SECTION};
use crate::expansion::{
    fuse, ingest_caption_corpus, object_phrase, CaptionRole, CaptionSet, ChatFusion, FallbackFusion, FusionBackend, TemplateFusion,
};
use crate::generator::{generate, train_generator, GeneratorParams, GeneratorTrainReport, TrainingPair};
use crate::layout::{adapt, propose_layout, HeuristicLayout, LayoutBackend, LayoutSpec, RemoteLayout};
use crate::remote::{DiskCache, EndpointConfig, HttpTransport, JsonTransport};
use crate::seed::{derive_seed, pair_seed};
use crate::sketch::io::{load_dir, save_sketch, SketchRecord};
use crate::sketch::{rasterize, RasterImage, VectorSketch};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const GENERATOR_LOG: &str = "generator_log.csv";

/// The external capabilities a run uses. Tests inject counting wrappers.
#[derive(Clone)]
pub struct PipelineBackends {
    pub fusion: Arc<dyn FusionBackend>,
    pub layout: Arc<dyn LayoutBackend>,
    pub models: Backends<f32>,
}

fn endpoint<'a>(e: &'a Option<EndpointConfig>, what: &str) -> Result<&'a EndpointConfig, PipelineError> {
    e.as_ref().ok_or_else(|| PipelineError::Config(format!("backend {what} is remote but has no endpoint")))
}

fn transport_and_cache(e: &EndpointConfig) -> Result<(Box<dyn JsonTransport>, Option<DiskCache>), PipelineError> {
    let cache = e.cache_dir.as_ref().map(DiskCache::new).transpose().map_err(|err| PipelineError::Config(err.to_string()))?;
    Ok((Box::new(HttpTransport::new(e)), cache))
}

fn unknown(kind: &str, name: &str) -> PipelineError {
    PipelineError::Config(format!("unknown {kind} backend {name:?}"))
}

impl PipelineBackends {
    pub fn from_config(b: &BackendSection) -> Result<Self, PipelineError> {
        let fusion: Arc<dyn FusionBackend> = match b.fusion.as_str() {
            "template" => Arc::new(TemplateFusion),
            "chat" => {
                let (t, c) = transport_and_cache(endpoint(&b.fusion_endpoint, "fusion")?)?;
                Arc::new(FallbackFusion { primary: ChatFusion::new(b.chat_model.clone(), t, c), fallback: TemplateFusion })
            }
            other => return Err(unknown("fusion", other)),
        };
        let layout: Arc<dyn LayoutBackend> = match b.layout.as_str() {
            "heuristic" => Arc::new(HeuristicLayout::default()),
            "remote" => {
                let (t, c) = transport_and_cache(endpoint(&b.layout_endpoint, "layout")?)?;
                Arc::new(RemoteLayout::new(t, c, HeuristicLayout::default()))
            }
            other => return Err(unknown("layout", other)),
        };
        let stub_err = |e: crate::backends::BackendError| PipelineError::Config(e.to_string());
        let embedder: Arc<dyn SemanticEmbedder<f32>> = match b.embedder.as_str() {
            "stub" => Arc::new(stub_embedder(b.stub_seed, b.embed_dim).map_err(stub_err)?),
            "remote" => {
                let (t, c) = transport_and_cache(endpoint(&b.embedder_endpoint, "embedder")?)?;
                Arc::new(RemoteEmbedder::new(b.embed_dim, t, c))
            }
            other => return Err(unknown("embedder", other)),
        };
        let patches: Arc<dyn PatchFeatureExtractor<f32>> = match b.patches.as_str() {
            "stub" => Arc::new(stub_patch_extractor(b.stub_seed, b.patch_grid, b.patch_dim).map_err(stub_err)?),
            "remote" => {
                let (t, c) = transport_and_cache(endpoint(&b.patches_endpoint, "patches")?)?;
                Arc::new(RemotePatchExtractor::new(b.patch_grid, b.patch_dim, t, c))
            }
            other => return Err(unknown("patches", other)),
        };
        let images: Arc<dyn ImageGeneratorBackend<f32>> = match b.images.as_str() {
            "stub" => Arc::new(stub_image_generator()),
            "remote" => {
                let (t, c) = transport_and_cache(endpoint(&b.images_endpoint, "images")?)?;
                Arc::new(RemoteImageGenerator::new(t, c))
            }
            other => return Err(unknown("images", other)),
        };
        Ok(Self { fusion, layout, models: Backends { embedder, patches, images } })
    }

    fn names(&self, tcla: bool) -> BackendNames {
        BackendNames {
            fusion: self.fusion.name(),
            layout: if tcla { self.layout.name() } else { "full-canvas".into() },
            embedder: self.models.embedder.name(),
            patches: self.models.patches.name(),
            images: self.models.images.name(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    /// Pairs computed in this run; reused records are not counted.
    pub computed: usize,
    pub reused: usize,
    pub generator_report: Option<GeneratorTrainReport>,
}

fn category_caption(rec: &SketchRecord<f32>) -> String {
    match rec.category.as_deref().map(str::trim).filter(|c| !c.is_empty()) {
        Some(c) => {
            let c = c.replace('_', " ");
            let article = if c.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" };
            format!("{article} {c}")
        }
        None => "a sketch".into(),
    }
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    Ok(ck.save(path)?)
}

/// Result of training the captioner on a run's input sketches.
#[derive(Debug, Clone)]
pub struct CaptionerRun {
    pub model: CaptionModel<f32>,
    pub align: CaptionTrainReport,
    pub fine_tune: CaptionTrainReport,
    /// Greedy token accuracy on the training targets.
    pub token_accuracy: f64,
    pub checkpoint: PathBuf,
}

pub fn captioner_checkpoint_path(config: &PipelineConfig) -> PathBuf {
    config.output_dir.join(CHECKPOINT_DIR).join("captioner.ckpt")
}

pub fn generator_checkpoint_path(config: &PipelineConfig) -> PathBuf {
    config.output_dir.join(CHECKPOINT_DIR).join("generator.ckpt")
}

fn load_sketches(config: &PipelineConfig) -> Result<Vec<SketchRecord<f32>>, PipelineError> {
    let mut sketches = load_dir::<f32>(&config.input_dir)?;
    if let Some(limit) = config.max_sketches {
        sketches.truncate(limit);
    }
    if sketches.is_empty() {
        return Err(PipelineError::Config(format!("no sketches in {}", config.input_dir.display())));
    }
    Ok(sketches)
}

/// Trains the captioner on the input sketches (alignment, then fine-tuning)
/// and saves it under the output directory.
pub fn train_captioner_from_config(config: &PipelineConfig) -> Result<CaptionerRun, PipelineError> {
    config.validate()?;
    train_caption_model(config, &load_sketches(config)?)
}

fn train_caption_model(config: &PipelineConfig, sketches: &[SketchRecord<f32>]) -> Result<CaptionerRun, PipelineError> {
    let fallback: Vec<String> = sketches.iter().map(category_caption).collect();
    let targets: Vec<String> = match &config.captioner.annotations {
        Some(path) => {
            let by_id: HashMap<String, String> = load_annotations(path)?.into_iter().collect();
            sketches.iter().zip(&fallback).map(|(s, f)| by_id.get(&s.sketch.source_id).cloned().unwrap_or_else(|| f.clone())).collect()
        }
        None => fallback,
    };
    let vocab = Vocabulary::build(targets.iter().map(String::as_str));
    let mut model = CaptionModel::init(config.captioner.model.clone(), vocab, derive_seed(config.seed, "captioner"));
    let mut examples = Vec::new();
    for (s, t) in sketches.iter().zip(&targets) {
        match model.graph(&s.sketch) {
            Ok(graph) => examples.push(CaptionExample { graph, caption: model.vocab.encode(t)? }),
            Err(e) => log::warn!("sketch {} left out of captioner training: {e}", s.sketch.source_id),
        }
    }
    let mut train = config.captioner.train.clone();
    train.seed = derive_seed(config.seed, "captioner-batches");
    let align = train_captioner(&mut model, &examples, &train, Stage::Align)?;
    let fine_tune = train_captioner(&mut model, &examples, &train, Stage::FineTune)?;
    let token_accuracy = token_accuracy(&model, &examples)?;
    let mut ck = Checkpoint::new();
    ck.put_caption_model(&model);
    let checkpoint = captioner_checkpoint_path(config);
    save_checkpoint(&ck, &checkpoint)?;
    Ok(CaptionerRun { model, align, fine_tune, token_accuracy, checkpoint })
}

fn object_captions(config: &PipelineConfig, sketches: &[SketchRecord<f32>]) -> Result<Vec<String>, PipelineError> {
    let fallback: Vec<String> = sketches.iter().map(category_caption).collect();
    let model: CaptionModel<f32> = match config.captioner.source {
        CaptionSource::Category => return Ok(fallback),
        CaptionSource::Checkpoint => {
            let path = config.captioner.checkpoint.as_ref().ok_or_else(|| PipelineError::Config("captioner checkpoint missing".into()))?;
            Checkpoint::load(path)?.caption_model()?
        }
        CaptionSource::Train => train_caption_model(config, sketches)?.model,
    };
    Ok(sketches
        .iter()
        .zip(fallback)
        .map(|(s, f)| match model.caption(&s.sketch) {
            Ok(c) if !object_phrase(&c).is_empty() => c,
            Ok(_) => {
                log::warn!("empty caption for sketch {}; using {f:?}", s.sketch.source_id);
                f
            }
            Err(e) => {
                log::warn!("captioning sketch {} failed ({e}); using {f:?}", s.sketch.source_id);
                f
            }
        })
        .collect())
}

/// Everything about a pair that precedes scene-sketch generation.
struct Prepared {
    i: usize,
    j: usize,
    seed: u64,
    caption: String,
    layout: LayoutSpec,
    adapted: VectorSketch<f32>,
    image: RasterImage<f32>,
    fusion: String,
}

fn failure(i: usize, j: usize, stage: &str, reason: impl ToString) -> PairFailure {
    PairFailure { id: record_id(i, j), sketch_index: i, caption_index: j, stage: stage.into(), reason: reason.to_string() }
}

fn prepare(
    config: &PipelineConfig,
    backends: &PipelineBackends,
    sketch: &VectorSketch<f32>,
    object_caption: &str,
    corpus_caption: &str,
    (i, j): (usize, usize),
) -> Result<Prepared, PairFailure> {
    let seed = pair_seed(config.seed, i, j);
    let desc = fuse(object_caption, corpus_caption, backends.fusion.as_ref()).map_err(|e| failure(i, j, "fusion", e))?;
    let phrase = object_phrase(object_caption);
    let layout = if config.ablation.disable_tcla {
        LayoutSpec::full_canvas(phrase, seed)
    } else {
        propose_layout(&desc, &phrase, backends.layout.as_ref(), seed).map_err(|e| failure(i, j, "layout", e))?
    };
    let adapted = adapt(sketch, &layout).map_err(|e| failure(i, j, "layout", e))?;
    let condition = rasterize(&adapted, config.resolution, config.stroke_width).map_err(|e| failure(i, j, "raster", e))?;
    let image = backends.models.images.generate(&condition, &desc.text, seed).map_err(|e| failure(i, j, "image", e))?;
    if (image.width(), image.height(), image.channels()) != (config.resolution, config.resolution, 3) {
        let got = format!("{}×{}×{}", image.width(), image.height(), image.channels());
        return Err(failure(i, j, "image", format!("image backend returned {got}, expected {0}×{0}×3", config.resolution)));
    }
    Ok(Prepared { i, j, seed, caption: desc.text, layout, adapted, image, fusion: desc.backend })
}

/// Result of training the generator on a run's prepared pairs.
#[derive(Debug, Clone)]
pub struct GeneratorRun {
    pub params: GeneratorParams<f32>,
    pub report: GeneratorTrainReport,
    pub pairs: usize,
    pub failures: Vec<PairFailure>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Prepares every pair and trains the generator on them, replacing any
/// generator checkpoint in the output directory. A later `run_pipeline`
/// with the same configuration reuses it.
pub fn train_generator_from_config(config: &PipelineConfig) -> Result<GeneratorRun, PipelineError> {
    let backends = PipelineBackends::from_config(&config.backends)?;
    config.validate()?;
    let sketches = load_sketches(config)?;
    let corpus = ingest_caption_corpus(&config.corpus, CaptionRole::Image)?;
    let object_captions = object_captions(config, &sketches)?;
    let pairs: Vec<(usize, usize)> = (1..=sketches.len()).flat_map(|i| (1..=corpus.len()).map(move |j| (i, j))).collect();
    let (prepared, failures) = prepare_all(config, &backends, &sketches, &object_captions, &corpus, &pairs);
    let (params, report) = fit_generator(config, &config.hash(), &backends, &sketches, &prepared)?;
    Ok(GeneratorRun {
        params,
        report,
        pairs: prepared.len(),
        failures,
        checkpoint: generator_checkpoint_path(config),
        log: config.output_dir.join(GENERATOR_LOG),
    })
}

/// Loads the configured generator, a generator saved by an earlier run of
/// the same configuration, or trains one on the prepared pairs.
fn obtain_generator(
    config: &PipelineConfig,
    hash: &str,
    backends: &PipelineBackends,
    sketches: &[SketchRecord<f32>],
    prepared: &[Prepared],
) -> Result<(GeneratorParams<f32>, Option<GeneratorTrainReport>), PipelineError> {
    if let Some(path) = &config.generator.checkpoint {
        return Ok((Checkpoint::load(path)?.generator()?, None));
    }
    if let Ok(ck) = Checkpoint::load(&generator_checkpoint_path(config)) {
        let same_run = ck.section(GENERATOR_SECTION).ok().and_then(|s| s.meta.get("config_hash")).and_then(|h| h.as_str()) == Some(hash);
        if same_run {
            return Ok((ck.generator()?, None));
        }
    }
    fit_generator(config, hash, backends, sketches, prepared).map(|(p, r)| (p, Some(r)))
}

fn fit_generator(
    config: &PipelineConfig,
    hash: &str,
    backends: &PipelineBackends,
    sketches: &[SketchRecord<f32>],
    prepared: &[Prepared],
) -> Result<(GeneratorParams<f32>, GeneratorTrainReport), PipelineError> {
    if prepared.is_empty() {
        return Err(PipelineError::Runtime("no pair survived preparation; nothing to train the generator on".into()));
    }
    let pairs: Vec<TrainingPair<f32>> = prepared
        .iter()
        .map(|p| TrainingPair {
            object: sketches[p.i - 1].sketch.clone(),
            caption: p.caption.clone(),
            image: p.image.clone(),
            layout: p.layout.clone(),
        })
        .collect();
    let mut params = GeneratorParams::init(config.generator.model, derive_seed(config.seed, "generator"))?;
    let mut train = config.generator.train.clone();
    train.seed = derive_seed(config.seed, "generator-training");
    let report = train_generator(&mut params, &pairs, &train, &config.effective_weights(), &backends.models)?;
    let mut ck = Checkpoint::new();
    ck.put_generator(&params);
    if let Some(s) = ck.sections.get_mut(GENERATOR_SECTION) {
        s.meta["config_hash"] = json!(hash);
    }
    save_checkpoint(&ck, &generator_checkpoint_path(config))?;
    report.write_csv(&config.output_dir.join(GENERATOR_LOG))?;
    Ok((params, report))
}

fn prepare_all(
    config: &PipelineConfig,
    backends: &PipelineBackends,
    sketches: &[SketchRecord<f32>],
    object_captions: &[String],
    corpus: &CaptionSet,
    pairs: &[(usize, usize)],
) -> (Vec<Prepared>, Vec<PairFailure>) {
    let results: Vec<Result<Prepared, PairFailure>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let c_p = corpus.get(j).expect("caption index in range");
            prepare(config, backends, &sketches[i - 1].sketch, &object_captions[i - 1], c_p, (i, j))
        })
        .collect();
    let mut failures = Vec::new();
    let mut prepared = Vec::new();
    for r in results {
        match r {
            Ok(p) => prepared.push(p),
            Err(f) => {
                log::warn!("pair {} failed at {}: {}", f.id, f.stage, f.reason);
                failures.push(f);
            }
        }
    }
    (prepared, failures)
}

fn write_outputs(out: &Path, id: &str, p: &Prepared, scene: &RasterImage<f32>) -> Result<[String; 3], String> {
    let vector = format!("{SKETCH_DIR}/{id}.json");
    let raster = format!("{SCENE_SKETCH_DIR}/{id}.png");
    let image = format!("{IMAGE_DIR}/{id}.png");
    save_sketch(&out.join(&vector), &p.adapted).map_err(|e| e.to_string())?;
    scene.save_png(&out.join(&raster)).map_err(|e| e.to_string())?;
    p.image.save_png(&out.join(&image)).map_err(|e| e.to_string())?;
    Ok([vector, raster, image])
}

/// Runs every sketch × caption pair with backends built from the config.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    let backends = PipelineBackends::from_config(&config.backends)?;
    run_pipeline_with(config, &backends)
}

pub fn run_pipeline_with(config: &PipelineConfig, backends: &PipelineBackends) -> Result<PipelineOutcome, PipelineError> {
    config.validate()?;
    let hash = config.hash();
    let out = &config.output_dir;
    for d in [SKETCH_DIR, SCENE_SKETCH_DIR, IMAGE_DIR] {
        fs::create_dir_all(out.join(d)).map_err(|e| PipelineError::io(&out.join(d), e))?;
    }
    let manifest_path = out.join(MANIFEST_FILE);

    let mut kept: Vec<TripletRecord> = Vec::new();
    if let Ok(previous) = Manifest::read(&manifest_path) {
        if previous.header.config_hash == hash {
            if previous.header.failures.is_empty() && validate_manifest(&manifest_path).is_clean() {
                log::info!("manifest is complete for this configuration; nothing to do");
                let reused = previous.records.len();
                return Ok(PipelineOutcome { manifest: previous, computed: 0, reused, generator_report: None });
            }
            kept = previous.records.into_iter().filter(|r| r.paths().iter().all(|p| out.join(p).is_file())).collect();
        }
    }
    let done: HashSet<(usize, usize)> = kept.iter().map(|r| (r.sketch_index, r.caption_index)).collect();

    let sketches = load_sketches(config)?;
    let corpus = ingest_caption_corpus(&config.corpus, CaptionRole::Image)?;
    let (m, n) = (sketches.len(), corpus.len());
    let object_captions = object_captions(config, &sketches)?;

    let pairs: Vec<(usize, usize)> = (1..=m).flat_map(|i| (1..=n).map(move |j| (i, j))).collect();
    let needs_generator_data = config.generator.checkpoint.is_none();
    let pending: Vec<(usize, usize)> = pairs.into_iter().filter(|p| needs_generator_data || !done.contains(p)).collect();
    let (prepared, mut failures) = prepare_all(config, backends, &sketches, &object_captions, &corpus, &pending);

    let todo: Vec<&Prepared> = prepared.iter().filter(|p| !done.contains(&(p.i, p.j))).collect();
    let (params, generator_report) =
        if todo.is_empty() { (None, None) } else { obtain_generator(config, &hash, backends, &sketches, &prepared).map(|(p, r)| (Some(p), r))? };
    let names = backends.names(!config.ablation.disable_tcla);
    let produced: Vec<Result<TripletRecord, PairFailure>> = todo
        .par_iter()
        .map(|p| {
            let params = params.as_ref().expect("generator present when there is work");
            let id = record_id(p.i, p.j);
            let scene = generate(&p.image, params).map_err(|e| failure(p.i, p.j, "generator", e))?;
            let [vector, raster, image] = write_outputs(out, &id, p, &scene).map_err(|e| failure(p.i, p.j, "write", e))?;
            let src = &sketches[p.i - 1];
            Ok(TripletRecord {
                id,
                sketch_index: p.i,
                caption_index: p.j,
                sketch_id: src.sketch.source_id.clone(),
                category: src.category.clone(),
                object_caption: object_captions[p.i - 1].clone(),
                corpus_caption: corpus.get(p.j).expect("caption index in range").to_owned(),
                caption: p.caption.clone(),
                sketch_vector_path: vector,
                sketch_raster_path: raster,
                image_path: image,
                layout: p.layout.bbox,
                backends: BackendNames { fusion: p.fusion.clone(), ..names.clone() },
                seed: p.seed,
            })
        })
        .collect();
    let computed = todo.len();
    let reused = kept.len();
    let mut records = kept;
    for r in produced {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    failures.retain(|f| !records.iter().any(|r| (r.sketch_index, r.caption_index) == (f.sketch_index, f.caption_index)));
    let manifest = Manifest::new(hash, m, n, records, failures);
    manifest.write(&manifest_path)?;
    Ok(PipelineOutcome { manifest, computed, reused, generator_report })
}

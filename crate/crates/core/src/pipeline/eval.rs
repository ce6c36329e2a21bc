use std::collections::BTreeSet;
use std::path::Path;

use super::manifest::Manifest;
use super::PipelineError;
use crate::backends::Backends;
use crate::expansion::object_phrase;
use crate::linalg::Matrix;
use crate::metrics::{frechet_distance, inception_score, zero_shot_probabilities, FeatureSet, MetricRow};
use crate::sketch::RasterImage;

pub const DEFAULT_SPLITS: usize = 10;
const ZERO_SHOT_TEMPERATURE: f32 = 0.07;

fn as_image(ink: &RasterImage<f32>) -> Result<RasterImage<f32>, PipelineError> {
    let data = ink.data().iter().map(|v| 1.0 - v).collect();
    Ok(RasterImage::from_data(ink.width(), ink.height(), ink.channels(), data)?)
}

/// Metrics over a manifest's scene sketches, using the embedder as the
/// feature backend:
///
/// - `fid_sketch_image`: Fréchet distance between scene-sketch and image
///   embeddings;
/// - `is_sketch`: Inception Score of zero-shot object-phrase probabilities
///   of the scene sketches;
/// - `text_alignment`: mean cosine between scene sketch and scene text.
pub fn evaluate_manifest(path: &Path, backends: &Backends<f32>, splits: usize) -> Result<Vec<MetricRow>, PipelineError> {
    let manifest = Manifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let n = manifest.records.len();
    if n < 2 {
        return Err(PipelineError::Runtime(format!("need at least 2 records to evaluate, found {n}")));
    }
    let embedder = backends.embedder.as_ref();
    let mut sketch_rows = Vec::with_capacity(n);
    let mut image_rows = Vec::with_capacity(n);
    let mut alignment = 0.0;
    for r in &manifest.records {
        let sketch = as_image(&RasterImage::load_png(&base.join(&r.sketch_raster_path))?)?;
        let image = RasterImage::load_png(&base.join(&r.image_path))?;
        let es = embedder.embed_image(&sketch)?;
        let et = embedder.embed_text(&r.caption)?;
        alignment += es.iter().zip(&et).map(|(a, b)| (a * b) as f64).sum::<f64>() / n as f64;
        sketch_rows.push(es);
        image_rows.push(embedder.embed_image(&image)?);
    }
    let name = embedder.name();
    let fid = frechet_distance(&FeatureSet::from_rows(&sketch_rows, &name)?, &FeatureSet::from_rows(&image_rows, &name)?)?;

    let phrases: BTreeSet<String> = manifest.records.iter().map(|r| object_phrase(&r.object_caption)).collect();
    let class_rows = phrases.iter().map(|p| embedder.embed_text(p)).collect::<Result<Vec<_>, _>>()?;
    let probs = zero_shot_probabilities(&Matrix::from_rows(&sketch_rows), &Matrix::from_rows(&class_rows), ZERO_SHOT_TEMPERATURE)?;
    let is = inception_score(&probs, splits.clamp(1, n))?;

    let row = |metric: &str, value: f64| MetricRow { metric: metric.into(), value, backend: name.clone(), n };
    Ok(vec![row("fid_sketch_image", fid as f64), row("is_sketch", is.mean), row("is_sketch_std", is.std), row("text_alignment", alignment)])
}

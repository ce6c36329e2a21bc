//! Semantic fusion (embedding distance), object content (crop vs. object
//! raster), and multi-object perception (PCA of patch features) terms.
//!
//! Sketch rasters hold ink in `[0, 1]`. Whenever a sketch is handed to an
//! image backend it is shown as an image, black ink on white, i.e. with
//! intensity `1 − ink`.

use serde::{Deserialize, Serialize};

use super::GeneratorError;
use crate::autodiff::{Tape, Var};
use crate::backends::{image_constant, pca_fit, pca_project, Backends, PatchFeatureExtractor, PcaProjector, SemanticEmbedder};
use crate::layout::{crop_indices, LayoutSpec};
use crate::sketch::{rasterize, RasterImage, VectorSketch};
use crate::Scalar;

pub const DEFAULT_SOCP_RESOLUTION: usize = 32;
pub const SOCP_STROKE_WIDTH: usize = 1;
pub const PCA_COMPONENTS: usize = 3;

/// Combination weights of the objective. A zero weight switches its term
/// off entirely: the term is not computed and its backend is not called.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub sfp: f64,
    pub socp: f64,
    pub mop: f64,
    pub adversarial_enabled: bool,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sfp: 1.0, socp: 1.0, mop: 1.0, adversarial_enabled: false, adversarial: 0.1 }
    }
}

impl LossWeights {
    pub fn new(sfp: f64, socp: f64, mop: f64) -> Self {
        Self { sfp, socp, mop, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let all = [self.sfp, self.socp, self.mop, self.adversarial];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GeneratorError::InvalidWeights(format!("weights must be finite and non-negative: {self:?}")));
        }
        if self.sfp + self.socp + self.mop <= 0.0 {
            return Err(GeneratorError::InvalidWeights("at least one of sfp, socp, mop must be positive".into()));
        }
        Ok(())
    }

    fn adversarial_active(&self) -> bool {
        self.adversarial_enabled && self.adversarial > 0.0
    }
}

/// Per-term values; `None` marks a term that was switched off.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub sfp: Option<T>,
    pub socp: Option<T>,
    pub mop: Option<T>,
    pub adversarial: Option<T>,
    pub total: T,
}

/// One training example: object sketch, scene text, scene image, layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair<T> {
    pub object: VectorSketch<T>,
    pub caption: String,
    pub image: RasterImage<T>,
    pub layout: LayoutSpec,
}

/// Everything about a pair that does not depend on the generator output,
/// computed once. Only the enabled terms are prepared.
#[derive(Debug, Clone)]
pub struct PairTargets<T> {
    resolution: usize,
    text_embedding: Option<Vec<T>>,
    image_embedding: Option<Vec<T>>,
    crop: Option<(Vec<usize>, Vec<T>)>,
    patches: Option<(PcaProjector<T>, Vec<T>)>,
}

fn as_image_on_tape<T: Scalar>(tape: &Tape<T>, ink: Var) -> Var {
    tape.add_scalar(tape.scale(ink, -T::one()), T::one())
}

fn object_target<T: Scalar>(object: &VectorSketch<T>, target_res: usize) -> Result<Vec<T>, GeneratorError> {
    Ok(rasterize(&object.normalize()?, target_res, SOCP_STROKE_WIDTH)?.into_data())
}

fn mop_target<T: Scalar>(image: &RasterImage<T>, extractor: &dyn PatchFeatureExtractor<T>) -> Result<(PcaProjector<T>, Vec<T>), GeneratorError> {
    let feats = extractor.extract(image)?;
    let projector = pca_fit(&feats, PCA_COMPONENTS)?;
    let projected = pca_project(&projector, &feats)?.into_vec();
    Ok((projector, projected))
}

impl<T: Scalar> PairTargets<T> {
    pub fn prepare(pair: &TrainingPair<T>, weights: &LossWeights, socp_resolution: usize, backends: &Backends<T>) -> Result<Self, GeneratorError> {
        weights.validate()?;
        let resolution = pair.image.width();
        super::network::check_resolution(pair.image.width(), pair.image.height())?;
        let (text_embedding, image_embedding) = if weights.sfp > 0.0 {
            (Some(backends.embedder.embed_text(&pair.caption)?), Some(backends.embedder.embed_image(&pair.image)?))
        } else {
            (None, None)
        };
        let crop = if weights.socp > 0.0 {
            Some((crop_indices(&pair.layout, resolution, socp_resolution)?, object_target(&pair.object, socp_resolution)?))
        } else {
            None
        };
        let patches = if weights.mop > 0.0 { Some(mop_target(&pair.image, backends.patches.as_ref())?) } else { None };
        Ok(Self { resolution, text_embedding, image_embedding, crop, patches })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }
}

fn sq_dist<T: Scalar>(tape: &Tape<T>, a: Var, b: &[T]) -> Var {
    let b = tape.constant(b.to_vec(), &tape.shape(a));
    tape.sum(tape.square(tape.sub(a, b)))
}

fn sfp_on_tape<T: Scalar>(tape: &Tape<T>, ink: Var, text: &[T], image: &[T], embedder: &dyn SemanticEmbedder<T>) -> Result<Var, GeneratorError> {
    let e = embedder.embed_image_on_tape(tape, as_image_on_tape(tape, ink))?;
    Ok(tape.add(sq_dist(tape, e, text), sq_dist(tape, e, image)))
}

fn socp_on_tape<T: Scalar>(tape: &Tape<T>, ink: Var, indices: &[usize], target: &[T]) -> Var {
    let crop = tape.gather(ink, indices.to_vec(), &[target.len()]);
    let t = tape.constant(target.to_vec(), &[target.len()]);
    tape.mean(tape.abs(tape.sub(crop, t)))
}

fn mop_on_tape<T: Scalar>(
    tape: &Tape<T>,
    ink: Var,
    projector: &PcaProjector<T>,
    target: &[T],
    extractor: &dyn PatchFeatureExtractor<T>,
) -> Result<Var, GeneratorError> {
    let feats = extractor.extract_on_tape(tape, as_image_on_tape(tape, ink))?;
    let projected = projector.project_on_tape(tape, feats)?;
    let t = tape.constant(target.to_vec(), &tape.shape(projected));
    Ok(tape.mean(tape.abs(tape.sub(projected, t))))
}

/// Weighted objective for a generator output `ink [1, h, w]` on the tape.
/// Returns the total and the per-term nodes.
pub(crate) fn objective_on_tape<T: Scalar>(
    tape: &Tape<T>,
    ink: Var,
    targets: &PairTargets<T>,
    weights: &LossWeights,
    backends: &Backends<T>,
    adversarial: Option<Var>,
) -> Result<(Var, LossBreakdown<Var>), GeneratorError> {
    let mut terms = LossBreakdown { sfp: None, socp: None, mop: None, adversarial: None, total: ink };
    let mut weighted: Vec<Var> = Vec::new();
    if let (Some(text), Some(image)) = (&targets.text_embedding, &targets.image_embedding) {
        let v = sfp_on_tape(tape, ink, text, image, backends.embedder.as_ref())?;
        terms.sfp = Some(v);
        weighted.push(tape.scale(v, T::of(weights.sfp)));
    }
    if let Some((indices, target)) = &targets.crop {
        let v = socp_on_tape(tape, ink, indices, target);
        terms.socp = Some(v);
        weighted.push(tape.scale(v, T::of(weights.socp)));
    }
    if let Some((projector, target)) = &targets.patches {
        let v = mop_on_tape(tape, ink, projector, target, backends.patches.as_ref())?;
        terms.mop = Some(v);
        weighted.push(tape.scale(v, T::of(weights.mop)));
    }
    if let Some(v) = adversarial.filter(|_| weights.adversarial_active()) {
        terms.adversarial = Some(v);
        weighted.push(tape.scale(v, T::of(weights.adversarial)));
    }
    let total = weighted.into_iter().reduce(|a, b| tape.add(a, b)).ok_or_else(|| GeneratorError::InvalidWeights("no active loss term".into()))?;
    terms.total = total;
    Ok((total, terms))
}

pub(crate) fn read_breakdown<T: Scalar>(tape: &Tape<T>, terms: &LossBreakdown<Var>) -> LossBreakdown<T> {
    LossBreakdown {
        sfp: terms.sfp.map(|v| tape.scalar(v)),
        socp: terms.socp.map(|v| tape.scalar(v)),
        mop: terms.mop.map(|v| tape.scalar(v)),
        adversarial: terms.adversarial.map(|v| tape.scalar(v)),
        total: tape.scalar(terms.total),
    }
}

fn ink_constant<T: Scalar>(tape: &Tape<T>, sketch: &RasterImage<T>) -> Result<Var, GeneratorError> {
    if sketch.channels() != 1 {
        return Err(GeneratorError::InvalidConfig(format!("scene sketch must have 1 channel, got {}", sketch.channels())));
    }
    Ok(image_constant(tape, sketch))
}

/// `‖e(s_s) − e(c_s)‖² + ‖e(s_s) − e(x_0)‖²` on unit embeddings.
pub fn loss_sfp<T: Scalar>(
    sketch: &RasterImage<T>,
    caption: &str,
    image: &RasterImage<T>,
    embedder: &dyn SemanticEmbedder<T>,
) -> Result<T, GeneratorError> {
    let tape = Tape::new();
    let ink = ink_constant(&tape, sketch)?;
    let text = embedder.embed_text(caption)?;
    let img = embedder.embed_image(image)?;
    Ok(tape.scalar(sfp_on_tape(&tape, ink, &text, &img, embedder)?))
}

/// Mean absolute difference between the layout crop of the scene sketch and
/// the normalised object raster, both at `target_res²`.
pub fn loss_socp<T: Scalar>(sketch: &RasterImage<T>, object: &VectorSketch<T>, layout: &LayoutSpec, target_res: usize) -> Result<T, GeneratorError> {
    let crop = crate::layout::inverse_adapt(sketch, layout, target_res)?;
    let target = object_target(object, target_res)?;
    let total: T = crop.data().iter().zip(&target).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(total / T::of_usize(target.len()))
}

/// Mean absolute difference of PCA-projected patch features, with the
/// projector fitted on the image's own features.
pub fn loss_mop<T: Scalar>(sketch: &RasterImage<T>, image: &RasterImage<T>, extractor: &dyn PatchFeatureExtractor<T>) -> Result<T, GeneratorError> {
    let tape = Tape::new();
    let ink = ink_constant(&tape, sketch)?;
    let (projector, target) = mop_target(image, extractor)?;
    Ok(tape.scalar(mop_on_tape(&tape, ink, &projector, &target, extractor)?))
}

/// Weighted sum of the enabled terms with the per-term breakdown.
pub fn total_loss<T: Scalar>(
    sketch: &RasterImage<T>,
    pair: &TrainingPair<T>,
    weights: &LossWeights,
    socp_resolution: usize,
    backends: &Backends<T>,
) -> Result<LossBreakdown<T>, GeneratorError> {
    let targets = PairTargets::prepare(pair, weights, socp_resolution, backends)?;
    let tape = Tape::new();
    let ink = ink_constant(&tape, sketch)?;
    let (_, terms) = objective_on_tape(&tape, ink, &targets, weights, backends, None)?;
    Ok(read_breakdown(&tape, &terms))
}

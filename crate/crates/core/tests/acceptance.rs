//! Acceptance suite. Runs every criterion in sequence so timings are not
//! skewed by parallel tests, prints one PASS/FAIL line each, then fails if
//! any criterion did.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use scenesketch::autodiff::{Tape, Var};
use scenesketch::backends::{pca_fit, stub_embedder, stub_image_generator, stub_patch_extractor, BackendError, Backends, Counted, SemanticEmbedder};
use scenesketch::captioner::{token_accuracy, train_captioner, CaptionExample, CaptionModel, CaptionTrainConfig, CaptionerConfig, Stage, Vocabulary};
use scenesketch::generator::{
    loss_gradients, loss_mop, loss_sfp, loss_socp, train_generator, GeneratorConfig, GeneratorParams, GeneratorTrainConfig, LossWeights,
    TrainingPair, SOCP_STROKE_WIDTH,
};
use scenesketch::graph::{build_graph, gcn_forward, gcn_on_tape, GcnParams};
use scenesketch::layout::{adapt, inverse_adapt, paste, HeuristicLayout, LayoutBackend, LayoutBox, LayoutError, LayoutSpec};
use scenesketch::linalg::Matrix;
use scenesketch::metrics::{frechet_distance, inception_score, FeatureSet, ProbabilitySet};
use scenesketch::pipeline::{run_pipeline, run_pipeline_with, validate_manifest, PipelineBackends, MANIFEST_FILE};
use scenesketch::sketch::io::{drawing_from_json, load_file, sketch_to_string, SketchRecord};
use scenesketch::sketch::{parse_stroke3, rasterize, RasterImage, VectorSketch};
use scenesketch::tensor::ParamSet;

type Check = Result<String, String>;

fn require(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixture_path() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/quickdraw_sample.ndjson"))
}

fn fixture() -> Vec<SketchRecord<f64>> {
    load_file(fixture_path()).expect("fixture loads")
}

fn cat() -> VectorSketch<f64> {
    VectorSketch::from_absolute_strokes(&[vec![(0.0, 0.0), (4.0, 3.0), (1.0, 5.0)], vec![(2.0, 0.0), (2.0, 4.0)]]).unwrap()
}

fn spec(x: f64, y: f64, w: f64, h: f64) -> LayoutSpec {
    LayoutSpec { bbox: LayoutBox { x, y, w, h }, object_phrase: "cat".into(), backend: "fixed".into(), seed: 0 }
}

fn striped_scene(res: usize) -> RasterImage<f64> {
    let data = (0..res * res * 3).map(|k| 0.3 + 0.6 * (((k / 3) * 31 % 17) as f64) / 17.0).collect();
    RasterImage::from_data(res, res, 3, data).unwrap()
}

fn stroke_round_trip() -> Check {
    let records = fixture();
    require(records.len() >= 100, || format!("fixture has only {} records", records.len()))?;
    let text = std::fs::read_to_string(fixture_path()).unwrap();
    let mut mismatches = 0;
    for (rec, line) in records.iter().zip(text.lines()) {
        let raw = rec.sketch.to_stroke3();
        let reparsed = parse_stroke3(&raw).map_err(|e| e.to_string())?;
        let via_text = drawing_from_json::<f64>(&serde_json::from_str(&sketch_to_string(&rec.sketch)).unwrap()).map_err(|e| e.to_string())?;
        let drawing: Value = serde_json::from_str::<Value>(line).unwrap()["drawing"].clone();
        let original: Vec<Vec<(f64, f64)>> = drawing
            .as_array()
            .unwrap()
            .iter()
            .map(|s| {
                let xs = s[0].as_array().unwrap();
                let ys = s[1].as_array().unwrap();
                xs.iter().zip(ys).map(|(x, y)| (x.as_f64().unwrap(), y.as_f64().unwrap())).collect()
            })
            .collect();
        if reparsed.to_stroke3() != raw || via_text.moves() != rec.sketch.moves() || rec.sketch.stroke_points() != original {
            mismatches += 1;
        }
    }
    require(mismatches == 0, || format!("{mismatches} mismatching records"))?;
    Ok(format!("{} records, 0 mismatches", records.len()))
}

fn layout_round_trip() -> Check {
    let records = fixture();
    let heuristic = HeuristicLayout::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut total = 0.0;
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let rec = &records[rng.random_range(0..records.len())];
        let layout = heuristic.propose("a quiet park", "object", k).map_err(|e| e.to_string())?;
        let object = rasterize(&rec.sketch.normalize().unwrap(), 32, 1).unwrap();
        let scene = paste(&object, &layout, 256).map_err(|e| e.to_string())?;
        let back = inverse_adapt(&scene, &layout, 32).map_err(|e| e.to_string())?;
        let mae = back.mean_abs_diff(&object);
        total += mae / 50.0;
        worst = worst.max(mae);
    }
    require(total <= 0.02, || format!("mean absolute error {total:.4} > 0.02"))?;
    Ok(format!("mean abs error {total:.4}, worst pair {worst:.4}"))
}

fn pca_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_component: f64 = 0.0;
    let mut worst_ortho: f64 = 0.0;
    for _ in 0..20 {
        let x = Matrix::from_fn(20, 5, |_, j| rng.random_range(-1.0..1.0) * (1.0 + j as f64));
        let fit = pca_fit(&x, 5).map_err(|e| e.to_string())?;
        let na = DMatrix::from_row_slice(20, 5, x.as_slice());
        let mean = na.row_mean();
        let centred = DMatrix::from_fn(20, 5, |i, j| na[(i, j)] - mean[j]);
        let cov = centred.transpose() * &centred / 19.0;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (c, &k) in order.iter().enumerate() {
            let v = eig.eigenvectors.column(k);
            let same = (0..5).map(|j| (fit.components[(c, j)] - v[j]).abs()).fold(0.0, f64::max);
            let flipped = (0..5).map(|j| (fit.components[(c, j)] + v[j]).abs()).fold(0.0, f64::max);
            worst_component = worst_component.max(same.min(flipped));
        }
        let gram = fit.components.matmul(&fit.components.transpose());
        worst_ortho = worst_ortho.max(gram.sub(&Matrix::identity(5)).max_abs());
    }
    require(worst_component <= 1e-5, || format!("component error {worst_component:e}"))?;
    require(worst_ortho <= 1e-5, || format!("orthonormality error {worst_ortho:e}"))?;
    Ok(format!("component error {worst_component:.1e}, orthonormality error {worst_ortho:.1e}"))
}

/// Returns fixed unit vectors: one shared vector, or three mutually
/// orthogonal ones for text, images, and sketches on the tape.
struct Rigged {
    orthogonal: bool,
}

impl SemanticEmbedder<f64> for Rigged {
    fn name(&self) -> String {
        "rigged".into()
    }

    fn dim(&self) -> usize {
        3
    }

    fn embed_text(&self, _: &str) -> Result<Vec<f64>, BackendError> {
        Ok(if self.orthogonal { vec![1.0, 0.0, 0.0] } else { vec![0.6, 0.8, 0.0] })
    }

    fn embed_image(&self, _: &RasterImage<f64>) -> Result<Vec<f64>, BackendError> {
        Ok(if self.orthogonal { vec![0.0, 1.0, 0.0] } else { vec![0.6, 0.8, 0.0] })
    }

    fn embed_image_on_tape(&self, tape: &Tape<f64>, image: Var) -> Result<Var, BackendError> {
        let zero = tape.scale(tape.sum(image), 0.0);
        let v = tape.constant(if self.orthogonal { vec![0.0, 0.0, 1.0] } else { vec![0.6, 0.8, 0.0] }, &[1, 3]);
        Ok(tape.add(v, tape.reshape(tape.gather(zero, vec![0; 3], &[3]), &[1, 3])))
    }
}

fn loss_identities() -> Check {
    let sketch = RasterImage::blank(32, 32, 1);
    let image = striped_scene(32);
    let same = loss_sfp(&sketch, "a cat", &image, &Rigged { orthogonal: false }).map_err(|e| e.to_string())?;
    let orth = loss_sfp(&sketch, "a cat", &image, &Rigged { orthogonal: true }).map_err(|e| e.to_string())?;
    require(same.abs() <= 1e-6, || format!("SFP on identical embeddings {same}"))?;
    require((orth - 4.0).abs() <= 1e-6, || format!("SFP on orthogonal embeddings {orth}"))?;

    let layout = spec(0.2, 0.3, 0.4, 0.3);
    let target = rasterize(&cat().normalize().unwrap(), 32, SOCP_STROKE_WIDTH).unwrap();
    let fraction = target.data().iter().filter(|&&v| v > 0.5).count() as f64 / (32.0 * 32.0);
    let socp = loss_socp(&RasterImage::blank(256, 256, 1), &cat(), &layout, 32).map_err(|e| e.to_string())?;
    require((socp - fraction).abs() <= 1e-6, || format!("SOCP on a blank sketch {socp}, ink fraction {fraction}"))?;

    let extractor = stub_patch_extractor(2, 4, 8).unwrap();
    let as_sketch = RasterImage::from_data(32, 32, 1, image.luminance().iter().map(|v| 1.0 - v).collect()).unwrap();
    let mop = loss_mop(&as_sketch, &image, &extractor).map_err(|e| e.to_string())?;
    require(mop.abs() <= 1e-6, || format!("MOP on identical images {mop}"))?;
    Ok(format!("sfp {same:.1e} / {orth:.6}, socp {socp:.6} = {fraction:.6}, mop {mop:.1e}"))
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gradient_checks() -> Check {
    let sketch = fixture()[7].sketch.normalize().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let graph = build_graph(&sketch, 8, 0.02).unwrap();
    let n = graph.node_count();
    let graph = graph.with_features(Matrix::from_fn(n, 5, |_, _| rng.random_range(-1.0..1.0))).unwrap();
    let params = GcnParams::<f64>::init(&[5, 6, 4], 8);
    let norm_at = |p: &GcnParams<f64>| gcn_forward(&graph, p).unwrap().pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tape = Tape::new();
    let feats = tape.constant(graph.node_features.as_slice().to_vec(), &[n, 5]);
    let ws: Vec<Var> = params.layers.iter().map(|w| w.on_tape(&tape, true)).collect();
    let (_, pooled) = gcn_on_tape(&tape, &graph, feats, &ws).unwrap();
    let grads = tape.backward(tape.sqrt(tape.sum(tape.square(pooled))));
    let mut gcn_worst: f64 = 0.0;
    for (l, &w) in ws.iter().enumerate() {
        let analytic = grads.get_or_zeros(w, params.layers[l].len());
        for i in 0..params.layers[l].len() {
            let h = 1e-6;
            let mut plus = params.clone();
            plus.layers[l].data[i] += h;
            let mut minus = params.clone();
            minus.layers[l].data[i] -= h;
            gcn_worst = gcn_worst.max(relative_error(analytic[i], (norm_at(&plus) - norm_at(&minus)) / (2.0 * h)));
        }
    }
    require(gcn_worst <= 1e-4, || format!("GCN pooled-norm relative error {gcn_worst:e}"))?;

    let generator = GeneratorParams::<f64>::init(GeneratorConfig { channels: 4, blocks: 1 }, 7).unwrap();
    let backends = Backends {
        embedder: Arc::new(stub_embedder(3, 16).unwrap()),
        patches: Arc::new(stub_patch_extractor(3, 4, 8).unwrap()),
        images: Arc::new(stub_image_generator()),
    };
    let pair = TrainingPair { object: cat(), caption: "a cat in a garden".into(), image: striped_scene(32), layout: spec(0.25, 0.25, 0.5, 0.5) };
    let weights = LossWeights::default();
    let (_, analytic) = loss_gradients(&generator, &pair, &weights, 16, &backends).map_err(|e| e.to_string())?;
    let loss_at = |p: &GeneratorParams<f64>| loss_gradients(p, &pair, &weights, 16, &backends).unwrap().0.total;
    let numeric = |t: usize, i: usize, h: f64| {
        let mut plus = generator.clone();
        plus.tensors_mut()[t].data[i] += h;
        let mut minus = generator.clone();
        minus.tensors_mut()[t].data[i] -= h;
        (loss_at(&plus) - loss_at(&minus)) / (2.0 * h)
    };
    let mut loss_worst: f64 = 0.0;
    for _ in 0..10 {
        let t = rng.random_range(0..generator.tensors().len());
        let i = rng.random_range(0..generator.tensors()[t].len());
        // a probe whose step straddles a clamp or abs kink is retried with a smaller step
        let err = relative_error(analytic[t][i], numeric(t, i, 1e-6)).min(relative_error(analytic[t][i], numeric(t, i, 1e-7)));
        loss_worst = loss_worst.max(err);
    }
    require(loss_worst <= 1e-3, || format!("total loss relative error {loss_worst:e}"))?;
    Ok(format!("GCN {gcn_worst:.1e}, total loss {loss_worst:.1e}"))
}

fn captioner_overfit() -> Check {
    let records = fixture();
    let picks = [0usize, 1, 20, 21, 40, 41, 60, 61, 80, 100];
    let captions = [
        "a cat with pointy ears",
        "a sleepy cat",
        "a small house with a door",
        "a house with a window",
        "a tall tree",
        "a round tree",
        "a bright sun",
        "a sun with rays",
        "a red apple",
        "a bicycle with two wheels",
    ];
    let config = CaptionerConfig { dim: 32, queries: 4, ffn_dim: 64, max_len: 8, ..Default::default() };
    let mut model = CaptionModel::<f64>::init(config, Vocabulary::build(captions), 0);
    let data: Vec<_> = picks
        .iter()
        .zip(captions)
        .map(|(&i, c)| CaptionExample { graph: model.graph(&records[i].sketch).unwrap(), caption: model.vocab.encode(c).unwrap() })
        .collect();

    let decoder: Vec<Vec<u64>> = model.params.decoder.named().iter().map(|(_, t)| t.data.iter().map(|v| v.to_bits()).collect()).collect();
    let encoder = model.encoder.clone();
    train_captioner(&mut model, &data, &CaptionTrainConfig { epochs: 5, ..Default::default() }, Stage::Align).map_err(|e| e.to_string())?;
    let after: Vec<Vec<u64>> = model.params.decoder.named().iter().map(|(_, t)| t.data.iter().map(|v| v.to_bits()).collect()).collect();
    require(after == decoder, || "stage-1 training changed decoder weights".into())?;
    require(model.encoder != encoder, || "stage-1 training left the encoder unchanged".into())?;

    let report =
        train_captioner(&mut model, &data, &CaptionTrainConfig { epochs: 300, ..Default::default() }, Stage::FineTune).map_err(|e| e.to_string())?;
    let accuracy = token_accuracy(&model, &data).map_err(|e| e.to_string())?;
    require(accuracy >= 0.9, || format!("token accuracy {accuracy:.3} after 300 epochs"))?;
    Ok(format!("token accuracy {accuracy:.3}, final loss {:.4}, decoder frozen in stage 1", report.final_loss().unwrap_or(f64::NAN)))
}

fn generator_overfit() -> Check {
    let defaults = GeneratorTrainConfig::default();
    require((defaults.batch_size, defaults.learning_rate, defaults.epochs) == (32, 1e-4, 50), || format!("default config {defaults:?}"))?;

    let res = 64;
    let object = cat().cast::<f32>();
    let layout = spec(0.25, 0.25, 0.5, 0.5);
    let caption = "a cat in a garden";
    let backends = Backends::<f32>::stubs(0);
    let condition = rasterize(&adapt(&object, &layout).unwrap(), res, 2).unwrap();
    let image = backends.images.generate(&condition, caption, 3).map_err(|e| e.to_string())?;
    let pair = TrainingPair { object, caption: caption.into(), image, layout };
    let mut params = GeneratorParams::<f32>::init(GeneratorConfig::default(), 0).unwrap();
    let config = GeneratorTrainConfig { epochs: 200, batch_size: 1, ..defaults };
    let report = train_generator(&mut params, &[pair], &config, &LossWeights::default(), &backends).map_err(|e| e.to_string())?;
    require(report.steps == 200, || format!("{} steps", report.steps))?;
    let first = report.step_losses[0];
    let last = *report.step_losses.last().unwrap();
    let reduction = 1.0 - last / first;
    require(reduction >= 0.5, || format!("loss {first:.4} -> {last:.4}, reduction {:.1}%", 100.0 * reduction))?;
    Ok(format!("loss {first:.4} -> {last:.4} ({:.1}% lower), defaults batch 32 / lr 1e-4 / 50 epochs", 100.0 * reduction))
}

fn metric_math() -> Check {
    let scale = 0.75f64.sqrt();
    let a = FeatureSet::from_rows(&[vec![-scale], vec![scale], vec![-scale], vec![scale]], "t").unwrap();
    let b = FeatureSet::new(a.features.map(|x| x + 1.0), "t").unwrap();
    let one_d = frechet_distance(&a, &b).map_err(|e| e.to_string())?;
    require((one_d - 1.0).abs() <= 1e-6, || format!("1-D Fréchet distance {one_d}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x = Matrix::from_fn(40, 3, |_, j| rng.random_range(-1.0..1.0) * (j + 1) as f64);
        let y = Matrix::from_fn(30, 3, |_, j| rng.random_range(-1.0..2.0) + j as f64 * rng.random_range(0.0..1.0));
        let d = frechet_distance(&FeatureSet::new(x.clone(), "t").unwrap(), &FeatureSet::new(y.clone(), "t").unwrap()).map_err(|e| e.to_string())?;
        worst = worst.max((d - frechet_oracle(&x, &y)).abs());
    }
    require(worst <= 1e-6, || format!("multivariate Fréchet error {worst:e}"))?;

    let uniform = inception_score(&ProbabilitySet::from_rows(&vec![vec![0.25; 4]; 20]).unwrap(), 10).map_err(|e| e.to_string())?;
    require((uniform.mean - 1.0).abs() <= 1e-6, || format!("IS on uniform rows {}", uniform.mean))?;
    let classes = 5;
    let onehot: Vec<Vec<f64>> = (0..50).map(|i| (0..classes).map(|k| if k == i % classes { 1.0 } else { 0.0 }).collect()).collect();
    let balanced = inception_score(&ProbabilitySet::from_rows(&onehot).unwrap(), 10).map_err(|e| e.to_string())?;
    require((balanced.mean - classes as f64).abs() <= 1e-6, || format!("IS on balanced one-hot rows {}", balanced.mean))?;
    Ok(format!("FD 1-D {one_d:.8}, oracle error {worst:.1e}, IS {:.6} / {:.6}", uniform.mean, balanced.mean))
}

fn frechet_oracle(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let to_na = |m: &Matrix<f64>| DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let cov = |m: &DMatrix<f64>| {
        let mean = m.row_mean();
        let c = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - mean[j]);
        c.transpose() * c / (m.nrows() as f64 - 1.0)
    };
    let (na, nb) = (to_na(a), to_na(b));
    let (ca, cb) = (cov(&na), cov(&nb));
    let diff = na.row_mean() - nb.row_mean();
    let e = SymmetricEigen::new(ca.clone());
    let root = &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt())) * e.eigenvectors.transpose();
    let inner = SymmetricEigen::new(&root * &cb * &root);
    let tr: f64 = inner.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    diff.norm_squared() + ca.trace() + cb.trace() - 2.0 * tr
}

fn pipeline_determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let config = common::small_run(dir.path());
    let manifest = common::out_dir(dir.path()).join(MANIFEST_FILE);
    let first = run_pipeline(&config).map_err(|e| e.to_string())?;
    require(first.manifest.records.len() == 12, || format!("{} records", first.manifest.records.len()))?;
    let bytes = std::fs::read(&manifest).unwrap();
    let report = validate_manifest(&manifest);
    require(report.is_clean(), || format!("violations: {:?}", report.violations))?;
    std::fs::remove_dir_all(common::out_dir(dir.path())).unwrap();
    run_pipeline(&config).map_err(|e| e.to_string())?;
    require(std::fs::read(&manifest).unwrap() == bytes, || "manifests differ between fresh runs".into())?;
    Ok(format!("12 records, identical {}-byte manifests, validation clean", bytes.len()))
}

struct CountingLayout {
    inner: HeuristicLayout,
    calls: AtomicUsize,
}

impl LayoutBackend for CountingLayout {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn propose(&self, description: &str, object_phrase: &str, seed: u64) -> Result<LayoutSpec, LayoutError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.propose(description, object_phrase, seed)
    }
}

fn ablation_contract() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::small_run(dir.path());
    config.generator.train.epochs = 1;
    config.ablation.disable_tcla = true;
    let layout = Arc::new(CountingLayout { inner: HeuristicLayout::default(), calls: AtomicUsize::new(0) });
    let mut backends = PipelineBackends::from_config(&config.backends).map_err(|e| e.to_string())?;
    backends.layout = layout.clone();
    let off = run_pipeline_with(&config, &backends).map_err(|e| e.to_string())?;
    require(layout.calls.load(Ordering::SeqCst) == 0, || "layout backend called with TCLA disabled".into())?;
    require(off.manifest.records.iter().all(|r| r.layout == LayoutBox::full_canvas()), || "non-full-canvas box with TCLA disabled".into())?;
    config.ablation.disable_tcla = false;
    config.output_dir = dir.path().join("with_layout");
    run_pipeline_with(&config, &backends).map_err(|e| e.to_string())?;
    let layout_calls = layout.calls.load(Ordering::SeqCst);
    require(layout_calls == 12, || format!("{layout_calls} layout calls with TCLA enabled"))?;

    let mut lines = vec![format!("tcla: layout calls 0 / {layout_calls}")];
    for term in ["none", "sfp", "socp", "mop"] {
        let mut c = config.clone();
        c.ablation.disable_sfp = term == "sfp";
        c.ablation.disable_socp = term == "socp";
        c.ablation.disable_mop = term == "mop";
        let embedder = Arc::new(Counted::new(stub_embedder(3, 16).unwrap()));
        let patches = Arc::new(Counted::new(stub_patch_extractor(3, 4, 8).unwrap()));
        let models: Backends<f64> = Backends { embedder: embedder.clone(), patches: patches.clone(), images: Arc::new(stub_image_generator()) };
        let pair = TrainingPair { object: cat(), caption: "a cat in a garden".into(), image: striped_scene(16), layout: spec(0.25, 0.25, 0.5, 0.5) };
        let mut params = GeneratorParams::<f64>::init(GeneratorConfig { channels: 4, blocks: 1 }, 1).unwrap();
        let train = GeneratorTrainConfig { epochs: 1, batch_size: 1, socp_resolution: 16, ..Default::default() };
        let report = train_generator(&mut params, &[pair], &train, &c.effective_weights(), &models).map_err(|e| e.to_string())?;
        let log = &report.epochs[0];
        let (e, p) = (embedder.calls(), patches.calls());
        require(log.sfp.is_some() == (term != "sfp") && (e > 0) == (term != "sfp"), || format!("{term}: sfp {:?}, embedder calls {e}", log.sfp))?;
        require(log.socp.is_some() == (term != "socp"), || format!("{term}: socp {:?}", log.socp))?;
        require(log.mop.is_some() == (term != "mop") && (p > 0) == (term != "mop"), || format!("{term}: mop {:?}, patch calls {p}", log.mop))?;
        let sum = log.sfp.unwrap_or(0.0) + log.socp.unwrap_or(0.0) + log.mop.unwrap_or(0.0);
        require((log.total - sum).abs() <= 1e-9 * sum.abs().max(1.0), || format!("{term}: total {} but enabled terms sum to {sum}", log.total))?;
        lines.push(format!("{term}: embedder {e}, patches {p}"));
    }
    Ok(lines.join("; "))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, u64, fn() -> Check); 10] = [
        ("stroke-3 round-trip", 5, stroke_round_trip),
        ("layout round-trip", 30, layout_round_trip),
        ("PCA oracle", 5, pca_oracle),
        ("loss identities", 5, loss_identities),
        ("gradient checks", 60, gradient_checks),
        ("captioner overfit", 300, captioner_overfit),
        ("generator overfit", 300, generator_overfit),
        ("metric math", 5, metric_math),
        ("pipeline determinism", 120, pipeline_determinism),
        ("ablation contract", 60, ablation_contract),
    ];
    let mut failed = Vec::new();
    let _ = writeln!(std::io::stdout());
    for (k, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > Duration::from_secs(budget) => Err(format!("{detail}; took longer than {budget} s")),
            other => other,
        };
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        // written to the handle directly so the line shows even when libtest captures output
        let mut stdout = std::io::stdout().lock();
        let _ = writeln!(stdout, "[{status}] {:>2}. {name:<22} {:>7.2} s  {detail}", k + 1, elapsed.as_secs_f64());
        if outcome.is_err() {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

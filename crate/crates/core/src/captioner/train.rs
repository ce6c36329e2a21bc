use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{caption_terms, encode_on_tape, queries_on_tape, CaptionModel};
use super::vocab::{Caption, PAD};
use super::{decode_caption, encode_queries, CaptionError};
use crate::autodiff::{Tape, Var};
use crate::graph::SketchGraph;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{ParamSet, Tensor};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionExample<T> {
    pub graph: SketchGraph<T>,
    pub caption: Caption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Encoder and query module only; the decoder is frozen.
    Align,
    /// Every parameter.
    FineTune,
}

impl Stage {
    pub fn from_index(stage: u8) -> Option<Self> {
        match stage {
            1 => Some(Self::Align),
            2 => Some(Self::FineTune),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CaptionTrainConfig {
    fn default() -> Self {
        Self { epochs: 300, batch_size: 8, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTrainReport {
    /// Mean loss over each epoch's batches, as seen before the update.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

impl CaptionTrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Summed loss, counted targets, and one gradient per bound parameter for a
/// single example.
fn example_gradients<T: Scalar>(model: &CaptionModel<T>, ex: &CaptionExample<T>, stage: Stage) -> Result<(T, usize, Vec<Vec<T>>), CaptionError> {
    let tape = Tape::new();
    let enc = model.encoder.bind(&tape, true);
    let qv = model.params.bind_query(&tape, true);
    let dv = model.params.bind_decoder(&tape, stage == Stage::FineTune);
    let nodes = encode_on_tape(&tape, &ex.graph, &enc)?;
    let memory = queries_on_tape(&tape, nodes, &qv)?;
    let (sum, count) = caption_terms(&tape, memory, &ex.caption, &dv, model.vocab.len())?;
    let mut vars: Vec<Var> = enc.all();
    vars.extend(qv.all());
    if stage == Stage::FineTune {
        vars.extend(dv.all());
    }
    let grads = tape.backward(sum);
    let g = vars.iter().map(|&v| grads.get_or_zeros(v, tape.value(v).len())).collect();
    Ok((tape.scalar(sum), count, g))
}

fn trainable<T: Scalar>(model: &mut CaptionModel<T>, stage: Stage) -> Vec<&mut Tensor<T>> {
    let mut out: Vec<&mut Tensor<T>> = model.encoder.named_mut().into_iter().map(|(_, t)| t).collect();
    out.extend(model.params.query.named_mut().into_iter().map(|(_, t)| t));
    if stage == Stage::FineTune {
        out.extend(model.params.decoder.named_mut().into_iter().map(|(_, t)| t));
    }
    out
}

/// Adam over shuffled mini-batches. Per-example gradients are computed in
/// parallel and summed in example order, so results do not depend on the
/// thread count.
pub fn train_captioner<T: Scalar>(
    model: &mut CaptionModel<T>,
    dataset: &[CaptionExample<T>],
    config: &CaptionTrainConfig,
    stage: Stage,
) -> Result<CaptionTrainReport, CaptionError> {
    if dataset.is_empty() {
        return Err(CaptionError::EmptyDataset);
    }
    let batch_size = config.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let frozen: &CaptionModel<T> = model;
            let results: Vec<_> = chunk.par_iter().map(|&k| example_gradients(frozen, &dataset[k], stage)).collect::<Result<_, _>>()?;
            let count: usize = results.iter().map(|r| r.1).sum();
            if count == 0 {
                continue;
            }
            let norm = T::one() / T::of_usize(count);
            let mut total = T::zero();
            let mut grads: Option<Vec<Vec<T>>> = None;
            for (loss, _, g) in results {
                total += loss;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= norm));
            adam.step(&mut trainable(model, stage), &grads);
            loss_sum += (total * norm).f64();
            batches += 1;
        }
        let mean = if batches == 0 { 0.0 } else { loss_sum / batches as f64 };
        log::debug!("captioner stage {stage:?} epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(CaptionTrainReport { epoch_losses, steps: adam.steps_taken() })
}

/// Fraction of target tokens (after BOS, up to and including EOS) that the
/// greedy decoder reproduces at the same position.
pub fn token_accuracy<T: Scalar>(model: &CaptionModel<T>, dataset: &[CaptionExample<T>]) -> Result<f64, CaptionError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in dataset {
        let emb = model.encoder.encode(&ex.graph)?;
        let q = encode_queries(&emb, &model.params)?;
        let target: Vec<usize> = ex.caption.tokens[1..].iter().copied().filter(|&t| t != PAD).collect();
        let decoded = decode_caption(&q, &model.params, &model.vocab, model.config.max_len.max(ex.caption.len()));
        correct += target.iter().zip(&decoded.tokens[1..]).filter(|(a, b)| a == b).count();
        total += target.len();
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

#[derive(Deserialize)]
struct AnnotationLine {
    #[serde(alias = "id")]
    sketch_id: String,
    #[serde(alias = "text")]
    caption: String,
}

/// Reads `{sketch_id, caption}` JSON lines; blank lines are skipped.
pub fn load_annotations(path: &Path) -> Result<Vec<(String, String)>, CaptionError> {
    let text = fs::read_to_string(path).map_err(|e| CaptionError::InvalidAnnotation(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let a: AnnotationLine =
                serde_json::from_str(l).map_err(|e| CaptionError::InvalidAnnotation(format!("{}:{}: {e}", path.display(), n + 1)))?;
            Ok((a.sketch_id, a.caption))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::{CaptionerConfig, Vocabulary};
    use crate::sketch::VectorSketch;

    fn toy() -> (CaptionModel<f64>, Vec<CaptionExample<f64>>) {
        let config = CaptionerConfig { dim: 16, queries: 4, ffn_dim: 32, max_len: 6, patch_size: 8, ..Default::default() };
        let vocab = Vocabulary::build(["a cat", "a dog"]);
        let model = CaptionModel::init(config, vocab, 3);
        let shapes = [
            VectorSketch::from_absolute_strokes(&[vec![(0.0, 0.0), (1.0, 1.0)]]).unwrap(),
            VectorSketch::from_absolute_strokes(&[vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)], vec![(0.0, 1.0), (0.5, 0.5)]]).unwrap(),
        ];
        let data = shapes
            .iter()
            .zip(["a cat", "a dog"])
            .map(|(s, c)| CaptionExample { graph: model.graph(s).unwrap(), caption: model.vocab.encode(c).unwrap() })
            .collect();
        (model, data)
    }

    #[test]
    fn empty_dataset_rejected() {
        let (mut model, _) = toy();
        assert!(matches!(train_captioner(&mut model, &[], &CaptionTrainConfig::default(), Stage::Align), Err(CaptionError::EmptyDataset)));
    }

    #[test]
    fn stage_one_freezes_decoder() {
        let (mut model, data) = toy();
        let before = model.params.decoder.clone();
        let enc_before = model.encoder.clone();
        let cfg = CaptionTrainConfig { epochs: 3, ..Default::default() };
        train_captioner(&mut model, &data, &cfg, Stage::Align).unwrap();
        assert_eq!(model.params.decoder, before);
        assert_ne!(model.encoder, enc_before);
        train_captioner(&mut model, &data, &cfg, Stage::FineTune).unwrap();
        assert_ne!(model.params.decoder, before);
    }

    #[test]
    fn seeded_runs_repeat() {
        let cfg = CaptionTrainConfig { epochs: 4, ..Default::default() };
        let run = || {
            let (mut model, data) = toy();
            train_captioner(&mut model, &data, &cfg, Stage::FineTune).unwrap().final_loss().unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn two_examples_overfit() {
        let (mut model, data) = toy();
        let cfg = CaptionTrainConfig { epochs: 60, ..Default::default() };
        let report = train_captioner(&mut model, &data, &cfg, Stage::FineTune).unwrap();
        assert!(report.final_loss().unwrap() < report.epoch_losses[0]);
        assert_eq!(token_accuracy(&model, &data).unwrap(), 1.0);
    }

    #[test]
    fn annotations_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ann.jsonl");
        fs::write(&p, "{\"sketch_id\":\"a\",\"caption\":\"a cat\"}\n\n{\"id\":\"b\",\"text\":\"a dog\"}\n").unwrap();
        assert_eq!(load_annotations(&p).unwrap(), vec![("a".into(), "a cat".into()), ("b".into(), "a dog".into())]);
        fs::write(&p, "{\"caption\":\"x\"}\n").unwrap();
        assert!(load_annotations(&p).is_err());
    }
}

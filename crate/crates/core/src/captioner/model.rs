use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Caption, Vocabulary, BOS, EOS, PAD};
use super::CaptionError;
use crate::autodiff::{Tape, Var};
use crate::graph::{gcn_on_tape, GcnParams, SketchEmbedding, SketchGraph};
use crate::linalg::Matrix;
use crate::tensor::{ParamSet, Tensor};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionerConfig {
    pub dim: usize,
    pub queries: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub patch_size: usize,
    pub spatial_radius: f64,
    pub gcn_layers: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            dim: crate::graph::DEFAULT_DIM,
            queries: 8,
            ffn_dim: 256,
            max_len: 16,
            patch_size: crate::graph::DEFAULT_PATCH_SIZE,
            spatial_radius: crate::graph::DEFAULT_SPATIAL_RADIUS,
            gcn_layers: crate::graph::DEFAULT_LAYERS,
        }
    }
}

/// Patch embedding followed by the GCN stack.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchEncoder<T> {
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub gcn: GcnParams<T>,
}

impl<T: Scalar> SketchEncoder<T> {
    pub fn init(patch_size: usize, dim: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let p2 = patch_size * patch_size;
        let gcn_dims = vec![dim; layers + 1];
        Self {
            patch_weight: Tensor::randn(&[p2, dim], (1.0 / p2 as f64).sqrt() * 2.0, rng),
            patch_bias: Tensor::zeros(&[dim]),
            gcn: GcnParams::init(&gcn_dims, rand::Rng::random(rng)),
        }
    }

    pub fn encode(&self, graph: &SketchGraph<T>) -> Result<SketchEmbedding<T>, CaptionError> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let nodes = encode_on_tape(&tape, graph, &vars)?;
        let n = graph.node_count();
        let d = self.gcn.output_dim();
        let node_embeddings = Matrix::from_vec(n, d, tape.value(nodes).to_vec());
        let pooled = node_embeddings.column_mean();
        Ok(SketchEmbedding { node_embeddings, pooled })
    }

    pub(crate) fn bind(&self, tape: &Tape<T>, trainable: bool) -> EncoderVars {
        EncoderVars {
            patch_weight: self.patch_weight.on_tape(tape, trainable),
            patch_bias: self.patch_bias.on_tape(tape, trainable),
            gcn: self.gcn.layers.iter().map(|w| w.on_tape(tape, trainable)).collect(),
        }
    }
}

impl<T: Scalar> ParamSet<T> for SketchEncoder<T> {
    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![("patch.weight", &self.patch_weight), ("patch.bias", &self.patch_bias)];
        v.extend(self.gcn.named());
        v
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = vec![("patch.weight", &mut self.patch_weight), ("patch.bias", &mut self.patch_bias)];
        v.extend(self.gcn.named_mut());
        v
    }
}

/// Learned queries with their cross-attention maps over node embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryModule<T> {
    pub queries: Tensor<T>,
    pub query_proj: Tensor<T>,
    pub key_proj: Tensor<T>,
    pub value_proj: Tensor<T>,
}

/// Single-layer causal decoder: masked self-attention, cross-attention to
/// the query outputs, a ReLU feed-forward block, each with a residual path,
/// then a projection onto the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T> {
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub self_q: Tensor<T>,
    pub self_k: Tensor<T>,
    pub self_v: Tensor<T>,
    pub self_o: Tensor<T>,
    pub cross_q: Tensor<T>,
    pub cross_k: Tensor<T>,
    pub cross_v: Tensor<T>,
    pub cross_o: Tensor<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionerParams<T> {
    pub query: QueryModule<T>,
    pub decoder: DecoderParams<T>,
}

impl<T: Scalar> CaptionerParams<T> {
    pub fn init(config: &CaptionerConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = config.dim;
        let proj = |rng: &mut ChaCha8Rng| Tensor::randn(&[d, d], (1.0 / d as f64).sqrt(), rng);
        let query =
            QueryModule { queries: Tensor::randn(&[config.queries, d], 1.0, rng), query_proj: proj(rng), key_proj: proj(rng), value_proj: proj(rng) };
        let decoder = DecoderParams {
            token_embedding: Tensor::randn(&[vocab_size, d], 1.0, rng),
            position_embedding: Tensor::randn(&[config.max_len, d], 1.0, rng),
            self_q: proj(rng),
            self_k: proj(rng),
            self_v: proj(rng),
            self_o: proj(rng),
            cross_q: proj(rng),
            cross_k: proj(rng),
            cross_v: proj(rng),
            cross_o: proj(rng),
            ffn_w1: Tensor::randn(&[d, config.ffn_dim], (2.0 / d as f64).sqrt(), rng),
            ffn_b1: Tensor::zeros(&[config.ffn_dim]),
            ffn_w2: Tensor::randn(&[config.ffn_dim, d], (1.0 / config.ffn_dim as f64).sqrt(), rng),
            ffn_b2: Tensor::zeros(&[d]),
            out_weight: Tensor::randn(&[d, vocab_size], (1.0 / d as f64).sqrt(), rng),
            out_bias: Tensor::zeros(&[vocab_size]),
        };
        Self { query, decoder }
    }

    pub fn dim(&self) -> usize {
        self.query.queries.shape[1]
    }

    pub fn query_count(&self) -> usize {
        self.query.queries.shape[0]
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.out_bias.len()
    }

    pub fn max_len(&self) -> usize {
        self.decoder.position_embedding.shape[0]
    }

    pub(crate) fn bind_query(&self, tape: &Tape<T>, trainable: bool) -> QueryVars {
        let q = &self.query;
        QueryVars {
            queries: q.queries.on_tape(tape, trainable),
            query_proj: q.query_proj.on_tape(tape, trainable),
            key_proj: q.key_proj.on_tape(tape, trainable),
            value_proj: q.value_proj.on_tape(tape, trainable),
        }
    }

    pub(crate) fn bind_decoder(&self, tape: &Tape<T>, trainable: bool) -> DecoderVars {
        let d = &self.decoder;
        let b = |t: &Tensor<T>| t.on_tape(tape, trainable);
        DecoderVars {
            token_embedding: b(&d.token_embedding),
            position_embedding: b(&d.position_embedding),
            self_attn: [b(&d.self_q), b(&d.self_k), b(&d.self_v), b(&d.self_o)],
            cross_attn: [b(&d.cross_q), b(&d.cross_k), b(&d.cross_v), b(&d.cross_o)],
            ffn: [b(&d.ffn_w1), b(&d.ffn_b1), b(&d.ffn_w2), b(&d.ffn_b2)],
            out: [b(&d.out_weight), b(&d.out_bias)],
        }
    }
}

impl<T: Scalar> ParamSet<T> for QueryModule<T> {
    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("query.queries", &self.queries), ("query.q", &self.query_proj), ("query.k", &self.key_proj), ("query.v", &self.value_proj)]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("query.queries", &mut self.queries),
            ("query.q", &mut self.query_proj),
            ("query.k", &mut self.key_proj),
            ("query.v", &mut self.value_proj),
        ]
    }
}

impl<T: Scalar> ParamSet<T> for DecoderParams<T> {
    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("decoder.token_embedding", &self.token_embedding),
            ("decoder.position_embedding", &self.position_embedding),
            ("decoder.self_q", &self.self_q),
            ("decoder.self_k", &self.self_k),
            ("decoder.self_v", &self.self_v),
            ("decoder.self_o", &self.self_o),
            ("decoder.cross_q", &self.cross_q),
            ("decoder.cross_k", &self.cross_k),
            ("decoder.cross_v", &self.cross_v),
            ("decoder.cross_o", &self.cross_o),
            ("decoder.ffn_w1", &self.ffn_w1),
            ("decoder.ffn_b1", &self.ffn_b1),
            ("decoder.ffn_w2", &self.ffn_w2),
            ("decoder.ffn_b2", &self.ffn_b2),
            ("decoder.out_weight", &self.out_weight),
            ("decoder.out_bias", &self.out_bias),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("decoder.token_embedding", &mut self.token_embedding),
            ("decoder.position_embedding", &mut self.position_embedding),
            ("decoder.self_q", &mut self.self_q),
            ("decoder.self_k", &mut self.self_k),
            ("decoder.self_v", &mut self.self_v),
            ("decoder.self_o", &mut self.self_o),
            ("decoder.cross_q", &mut self.cross_q),
            ("decoder.cross_k", &mut self.cross_k),
            ("decoder.cross_v", &mut self.cross_v),
            ("decoder.cross_o", &mut self.cross_o),
            ("decoder.ffn_w1", &mut self.ffn_w1),
            ("decoder.ffn_b1", &mut self.ffn_b1),
            ("decoder.ffn_w2", &mut self.ffn_w2),
            ("decoder.ffn_b2", &mut self.ffn_b2),
            ("decoder.out_weight", &mut self.out_weight),
            ("decoder.out_bias", &mut self.out_bias),
        ]
    }
}

impl<T: Scalar> ParamSet<T> for CaptionerParams<T> {
    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = self.query.named();
        v.extend(self.decoder.named());
        v
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = self.query.named_mut();
        v.extend(self.decoder.named_mut());
        v
    }
}

pub(crate) struct EncoderVars {
    pub patch_weight: Var,
    pub patch_bias: Var,
    pub gcn: Vec<Var>,
}

impl EncoderVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.patch_weight, self.patch_bias];
        v.extend(&self.gcn);
        v
    }
}

pub(crate) struct QueryVars {
    pub queries: Var,
    pub query_proj: Var,
    pub key_proj: Var,
    pub value_proj: Var,
}

impl QueryVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.queries, self.query_proj, self.key_proj, self.value_proj]
    }
}

pub(crate) struct DecoderVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub self_attn: [Var; 4],
    pub cross_attn: [Var; 4],
    pub ffn: [Var; 4],
    pub out: [Var; 2],
}

impl DecoderVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.token_embedding, self.position_embedding];
        v.extend(self.self_attn);
        v.extend(self.cross_attn);
        v.extend(self.ffn);
        v.extend(self.out);
        v
    }
}

/// Node embeddings `[n, d]` of a graph.
pub(crate) fn encode_on_tape<T: Scalar>(tape: &Tape<T>, graph: &SketchGraph<T>, vars: &EncoderVars) -> Result<Var, CaptionError> {
    let n = graph.node_count();
    let p2 = graph.node_patches.cols();
    let expected = tape.shape(vars.patch_weight)[0];
    if p2 != expected {
        return Err(CaptionError::DimensionMismatch(format!("patch of {p2} pixels, embedding expects {expected}")));
    }
    let patches = tape.constant(graph.node_patches.as_slice().to_vec(), &[n, p2]);
    let feats = tape.matmul(patches, vars.patch_weight);
    let feats = tape.relu(tape.add_row_bias(feats, vars.patch_bias));
    let (nodes, _) = gcn_on_tape(tape, graph, feats, &vars.gcn).map_err(|e| CaptionError::DimensionMismatch(e.to_string()))?;
    Ok(nodes)
}

/// Scaled dot-product attention of `q_in [a, d]` over `kv_in [b, d]`.
fn attention<T: Scalar>(tape: &Tape<T>, q_in: Var, kv_in: Var, wq: Var, wk: Var, wv: Var, causal: bool) -> Var {
    let d = tape.shape(wq)[1];
    let q = tape.matmul(q_in, wq);
    let k = tape.matmul(kv_in, wk);
    let v = tape.matmul(kv_in, wv);
    let scores = tape.matmul(q, tape.transpose(k));
    let scores = tape.scale(scores, T::one() / T::of_usize(d).sqrt());
    let weights = tape.softmax_rows(scores, causal);
    tape.matmul(weights, v)
}

pub(crate) fn queries_on_tape<T: Scalar>(tape: &Tape<T>, nodes: Var, vars: &QueryVars) -> Result<Var, CaptionError> {
    let nd = tape.shape(nodes)[1];
    let qd = tape.shape(vars.key_proj)[0];
    if nd != qd {
        return Err(CaptionError::DimensionMismatch(format!("node embeddings of width {nd}, query module expects {qd}")));
    }
    Ok(attention(tape, vars.queries, nodes, vars.query_proj, vars.key_proj, vars.value_proj, false))
}

/// Logits `[len, vocab]` for every prefix of `input` (teacher forcing).
pub(crate) fn decoder_on_tape<T: Scalar>(tape: &Tape<T>, memory: Var, input: &[usize], vars: &DecoderVars) -> Var {
    let positions: Vec<usize> = (0..input.len()).collect();
    let x = tape.add(tape.rows(vars.token_embedding, input), tape.rows(vars.position_embedding, &positions));
    let [sq, sk, sv, so] = vars.self_attn;
    let h1 = tape.add(x, tape.matmul(attention(tape, x, x, sq, sk, sv, true), so));
    let [cq, ck, cv, co] = vars.cross_attn;
    let h2 = tape.add(h1, tape.matmul(attention(tape, h1, memory, cq, ck, cv, false), co));
    let [w1, b1, w2, b2] = vars.ffn;
    let f = tape.relu(tape.add_row_bias(tape.matmul(h2, w1), b1));
    let f = tape.add_row_bias(tape.matmul(f, w2), b2);
    let h3 = tape.add(h2, f);
    let [wo, bo] = vars.out;
    tape.add_row_bias(tape.matmul(h3, wo), bo)
}

/// Softmax cross-attention of the learned queries over the node embeddings;
/// returns a `K × d` matrix.
pub fn encode_queries<T: Scalar>(emb: &SketchEmbedding<T>, params: &CaptionerParams<T>) -> Result<Matrix<T>, CaptionError> {
    let tape = Tape::new();
    let (n, d) = emb.node_embeddings.shape();
    let nodes = tape.constant(emb.node_embeddings.as_slice().to_vec(), &[n, d]);
    let vars = params.bind_query(&tape, false);
    let out = queries_on_tape(&tape, nodes, &vars)?;
    Ok(Matrix::from_vec(params.query_count(), params.dim(), tape.value(out).to_vec()))
}

/// Greedy decoding from BOS; stops at EOS or when `max_len` tokens exist
/// (the last slot is always EOS). Ties go to the lowest token id.
pub fn decode_caption<T: Scalar>(queries: &Matrix<T>, params: &CaptionerParams<T>, vocab: &Vocabulary, max_len: usize) -> Caption {
    debug_assert_eq!(vocab.len(), params.vocab_size(), "vocabulary does not match the output projection");
    let max_len = max_len.clamp(2, params.max_len() + 1);
    let tape = Tape::new();
    let memory = tape.constant(queries.as_slice().to_vec(), &[queries.rows(), queries.cols()]);
    let vars = params.bind_decoder(&tape, false);
    let v = params.vocab_size();
    let mut tokens = vec![BOS];
    while tokens.len() < max_len - 1 {
        let logits = tape.value(decoder_on_tape(&tape, memory, &tokens, &vars));
        let last = &logits[(tokens.len() - 1) * v..tokens.len() * v];
        let next = argmax(last);
        tokens.push(next);
        if next == EOS {
            return Caption::new(tokens);
        }
    }
    tokens.push(EOS);
    Caption::new(tokens)
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Summed cross-entropy and the number of counted target positions for one
/// caption.
pub(crate) fn caption_terms<T: Scalar>(
    tape: &Tape<T>,
    memory: Var,
    caption: &Caption,
    vars: &DecoderVars,
    vocab_size: usize,
) -> Result<(Var, usize), CaptionError> {
    if caption.tokens.len() < 2 {
        return Err(CaptionError::DimensionMismatch("caption needs at least BOS and EOS".into()));
    }
    if let Some(&bad) = caption.tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(CaptionError::UnknownToken(format!("id {bad}")));
    }
    let max_len = tape.shape(vars.position_embedding)[0];
    let input = &caption.tokens[..caption.tokens.len() - 1];
    if input.len() > max_len {
        return Err(CaptionError::DimensionMismatch(format!("caption of {} tokens exceeds max_len {max_len}", caption.len())));
    }
    let targets: Vec<Option<usize>> = caption.tokens[1..].iter().map(|&t| (t != PAD).then_some(t)).collect();
    let count = targets.iter().flatten().count();
    let logits = decoder_on_tape(tape, memory, input, vars);
    let mean = tape.cross_entropy(logits, &targets);
    Ok((tape.scale(mean, T::of_usize(count)), count))
}

/// Mean teacher-forced cross-entropy over all non-PAD target positions of
/// the batch.
pub fn caption_loss<T: Scalar>(
    batch: &[(SketchGraph<T>, Caption)],
    encoder: &SketchEncoder<T>,
    params: &CaptionerParams<T>,
    vocab: &Vocabulary,
) -> Result<T, CaptionError> {
    if vocab.len() != params.vocab_size() {
        return Err(CaptionError::DimensionMismatch(format!("vocabulary of {} tokens, output projection of {}", vocab.len(), params.vocab_size())));
    }
    let mut total = T::zero();
    let mut count = 0;
    for (graph, caption) in batch {
        let tape = Tape::new();
        let enc = encoder.bind(&tape, false);
        let nodes = encode_on_tape(&tape, graph, &enc)?;
        let memory = queries_on_tape(&tape, nodes, &params.bind_query(&tape, false))?;
        let (sum, n) = caption_terms(&tape, memory, caption, &params.bind_decoder(&tape, false), vocab.len())?;
        total += tape.scalar(sum);
        count += n;
    }
    Ok(if count == 0 { T::zero() } else { total / T::of_usize(count) })
}

/// Encoder, query module, decoder, and vocabulary bundled for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel<T> {
    pub config: CaptionerConfig,
    pub vocab: Vocabulary,
    pub encoder: SketchEncoder<T>,
    pub params: CaptionerParams<T>,
}

impl<T: Scalar> CaptionModel<T> {
    pub fn init(config: CaptionerConfig, vocab: Vocabulary, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = SketchEncoder::init(config.patch_size, config.dim, config.gcn_layers, &mut rng);
        let params = CaptionerParams::init(&config, vocab.len(), &mut rng);
        Self { config, vocab, encoder, params }
    }

    pub fn graph(&self, sketch: &crate::sketch::VectorSketch<T>) -> Result<SketchGraph<T>, CaptionError> {
        let normalized = sketch.normalize()?;
        Ok(crate::graph::build_graph(&normalized, self.config.patch_size, T::of(self.config.spatial_radius))?)
    }

    pub fn caption_graph(&self, graph: &SketchGraph<T>) -> Result<Caption, CaptionError> {
        let emb = self.encoder.encode(graph)?;
        let queries = encode_queries(&emb, &self.params)?;
        Ok(decode_caption(&queries, &self.params, &self.vocab, self.config.max_len))
    }

    /// Caption text for a raw (unnormalised) sketch.
    pub fn caption(&self, sketch: &crate::sketch::VectorSketch<T>) -> Result<String, CaptionError> {
        let graph = self.graph(sketch)?;
        Ok(self.vocab.decode(&self.caption_graph(&graph)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::VectorSketch;

    fn tiny_config() -> CaptionerConfig {
        CaptionerConfig { dim: 8, queries: 3, ffn_dim: 12, max_len: 6, patch_size: 8, spatial_radius: 0.02, gcn_layers: 2 }
    }

    fn tiny_model() -> CaptionModel<f64> {
        CaptionModel::init(tiny_config(), Vocabulary::build(["a cat", "a dog", "the house"]), 4)
    }

    fn graph() -> SketchGraph<f64> {
        let s = VectorSketch::from_absolute_strokes(&[vec![(0.0, 0.0), (1.0, 1.0)], vec![(0.0, 1.0), (1.0, 0.2)], vec![(0.5, 0.5)]]).unwrap();
        tiny_model().graph(&s).unwrap()
    }

    #[test]
    fn query_output_shape_and_uniform_attention() {
        let model = tiny_model();
        let emb = model.encoder.encode(&graph()).unwrap();
        let out = encode_queries(&emb, &model.params).unwrap();
        assert_eq!(out.shape(), (3, 8));

        let v: Vec<f64> = (0..8).map(|k| k as f64 * 0.3 - 1.0).collect();
        let same = SketchEmbedding { node_embeddings: Matrix::from_rows(&[v.clone(), v.clone(), v.clone()]), pooled: v.clone() };
        let out = encode_queries(&same, &model.params).unwrap();
        let expected = Matrix::from_rows(&[v]).matmul(&model.params.query.value_proj.as_matrix());
        for r in 0..3 {
            for (a, b) in out.row(r).iter().zip(expected.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_node_attention_matches_manual_softmax() {
        let model = tiny_model();
        let h = Matrix::from_rows(&[(0..8).map(|k| (k as f64).sin()).collect(), (0..8).map(|k| (k as f64 * 0.7).cos()).collect()]);
        let emb = SketchEmbedding { pooled: h.column_mean(), node_embeddings: h.clone() };
        let out = encode_queries(&emb, &model.params).unwrap();
        let q = &model.params.query;
        let qp = q.queries.as_matrix().matmul(&q.query_proj.as_matrix());
        let kp = h.matmul(&q.key_proj.as_matrix());
        let vp = h.matmul(&q.value_proj.as_matrix());
        for r in 0..3 {
            let s: Vec<f64> = (0..2).map(|j| (0..8).map(|c| qp[(r, c)] * kp[(j, c)]).sum::<f64>() / 8f64.sqrt()).collect();
            let m = s[0].max(s[1]);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z = e[0] + e[1];
            assert!(((e[0] + e[1]) / z - 1.0).abs() < 1e-12);
            for c in 0..8 {
                let expected = (e[0] * vp[(0, c)] + e[1] * vp[(1, c)]) / z;
                assert!((out[(r, c)] - expected).abs() < 1e-12);
            }
        }
    }

    fn silence(params: &mut CaptionerParams<f64>) {
        for (name, t) in params.decoder.named_mut() {
            if name != "decoder.position_embedding" {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    #[test]
    fn rigged_eos_decodes_immediately() {
        let mut model = tiny_model();
        silence(&mut model.params);
        model.params.decoder.out_bias.data[EOS] = 100.0;
        let q = Matrix::zeros(3, 8);
        let c = decode_caption(&q, &model.params, &model.vocab, 6);
        assert_eq!(c.tokens, vec![BOS, EOS]);
    }

    #[test]
    fn rigged_logits_spell_cat() {
        // stepping oracle: with all attention and feed-forward paths zeroed,
        // the hidden state at position t is the position embedding e_t, so
        // the output row t picks the token decoded at step t.
        let mut model = tiny_model();
        silence(&mut model.params);
        let d = 8;
        let v = model.vocab.len();
        let pos = &mut model.params.decoder.position_embedding;
        pos.data.iter_mut().for_each(|x| *x = 0.0);
        for t in 0..6 {
            pos.data[t * d + t] = 1.0;
        }
        let cat = model.vocab.id("cat").unwrap();
        let plan = [cat, EOS];
        for (t, &tok) in plan.iter().enumerate() {
            model.params.decoder.out_weight.data[t * v + tok] = 100.0;
        }
        let c = decode_caption(&Matrix::zeros(3, d), &model.params, &model.vocab, 6);
        assert_eq!(c.tokens, vec![BOS, cat, EOS]);
        assert_eq!(model.vocab.decode(&c), "cat");
    }

    #[test]
    fn length_is_bounded() {
        let model = tiny_model();
        let emb = model.encoder.encode(&graph()).unwrap();
        let q = encode_queries(&emb, &model.params).unwrap();
        for max_len in 2..8 {
            let c = decode_caption(&q, &model.params, &model.vocab, max_len);
            assert!(c.len() <= max_len);
            assert!(c.is_well_formed(max_len));
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut model = tiny_model();
        model.params.decoder.out_weight.data.iter_mut().for_each(|v| *v = 0.0);
        let cap = model.vocab.encode("a cat").unwrap();
        let loss = caption_loss(&[(graph(), cap)], &model.encoder, &model.params, &model.vocab).unwrap();
        assert!((loss - (model.vocab.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn padding_does_not_change_loss() {
        let model = tiny_model();
        let g = graph();
        let cap = model.vocab.encode("the house").unwrap();
        let a =
            caption_loss(&[(g.clone(), cap.clone()), (g.clone(), model.vocab.encode("a dog").unwrap())], &model.encoder, &model.params, &model.vocab)
                .unwrap();
        let b = caption_loss(
            &[(g.clone(), cap.padded(6)), (g, model.vocab.encode("a dog").unwrap().padded(5))],
            &model.encoder,
            &model.params,
            &model.vocab,
        )
        .unwrap();
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn unknown_token_id_rejected() {
        let model = tiny_model();
        let bad = Caption::new(vec![BOS, 99, EOS]);
        assert!(matches!(caption_loss(&[(graph(), bad)], &model.encoder, &model.params, &model.vocab), Err(CaptionError::UnknownToken(_))));
    }

    #[test]
    fn loss_gradient_wrt_queries_matches_central_differences() {
        let model = tiny_model();
        let g = graph();
        let cap = model.vocab.encode("a cat").unwrap();
        let tape = Tape::new();
        let enc = model.encoder.bind(&tape, false);
        let nodes = encode_on_tape(&tape, &g, &enc).unwrap();
        let qv = model.params.bind_query(&tape, true);
        let memory = queries_on_tape(&tape, nodes, &qv).unwrap();
        let (sum, n) = caption_terms(&tape, memory, &cap, &model.params.bind_decoder(&tape, false), model.vocab.len()).unwrap();
        let loss = tape.scale(sum, 1.0 / n as f64);
        let grads = tape.backward(loss);
        let analytic = grads.get_or_zeros(qv.queries, model.params.query.queries.len());
        for i in 0..analytic.len() {
            let h = 1e-6;
            let eval = |delta: f64| {
                let mut p = model.params.clone();
                p.query.queries.data[i] += delta;
                caption_loss(&[(g.clone(), cap.clone())], &model.encoder, &p, &model.vocab).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!((analytic[i] - numeric).abs() / denom < 1e-4, "query {i}: {} vs {numeric}", analytic[i]);
        }
    }
}

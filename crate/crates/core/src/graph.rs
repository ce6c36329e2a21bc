//! Stroke-level sketch graphs and the graph convolutional encoder.
//!
//! Every stroke becomes a node carrying a raster patch of that stroke. Edges
//! join temporally adjacent strokes and strokes whose padded bounding boxes
//! overlap; every node has a self-loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::linalg::Matrix;
use crate::sketch::{rasterize_in, BoundingBox, SketchError, VectorSketch};
use crate::tensor::{ParamSet, Tensor};
use crate::Scalar;

pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const DEFAULT_SPATIAL_RADIUS: f64 = 0.02;
pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_DIM: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchGraph<T> {
    /// One flattened `patch_size²` raster patch per stroke.
    pub node_patches: Matrix<T>,
    /// Node input features; equal to the patches until a patch embedding is
    /// applied with [`SketchGraph::with_features`].
    pub node_features: Matrix<T>,
    /// Symmetric 0/1 adjacency with a unit diagonal.
    pub adjacency: Matrix<T>,
    pub node_order: Vec<usize>,
    pub patch_size: usize,
}

impl<T: Scalar> SketchGraph<T> {
    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn with_features(mut self, features: Matrix<T>) -> Result<Self, GraphError> {
        if features.rows() != self.node_count() {
            return Err(GraphError::DimensionMismatch(format!("{} feature rows for {} nodes", features.rows(), self.node_count())));
        }
        self.node_features = features;
        Ok(self)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[(i, j)] != T::zero()
    }

    /// Reorders nodes by `perm` (new node `k` is old node `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.node_count();
        assert_eq!(perm.len(), n, "permutation length must equal node count");
        let rows = |m: &Matrix<T>| Matrix::from_fn(n, m.cols(), |i, j| m[(perm[i], j)]);
        Self {
            node_patches: rows(&self.node_patches),
            node_features: rows(&self.node_features),
            adjacency: Matrix::from_fn(n, n, |i, j| self.adjacency[(perm[i], perm[j])]),
            node_order: perm.iter().map(|&p| self.node_order[p]).collect(),
            patch_size: self.patch_size,
        }
    }

    /// `D^{-1/2} A D^{-1/2}` of the self-looped adjacency.
    pub fn normalized_adjacency(&self) -> Matrix<T> {
        let n = self.node_count();
        let inv_sqrt_deg: Vec<T> = (0..n).map(|i| (0..n).map(|j| self.adjacency[(i, j)]).sum::<T>()).map(|d| T::one() / d.sqrt()).collect();
        Matrix::from_fn(n, n, |i, j| inv_sqrt_deg[i] * self.adjacency[(i, j)] * inv_sqrt_deg[j])
    }
}

/// Builds the stroke graph of a normalised sketch.
pub fn build_graph<T: Scalar>(sketch: &VectorSketch<T>, patch_size: usize, spatial_radius: T) -> Result<SketchGraph<T>, GraphError> {
    let strokes = sketch.stroke_points();
    let n = strokes.len();
    let boxes: Vec<BoundingBox<T>> = strokes.iter().map(|s| BoundingBox::enclosing(s.iter().copied()).expect("strokes are non-empty")).collect();

    let mut patches = Matrix::zeros(n, patch_size * patch_size);
    for (k, stroke) in strokes.iter().enumerate() {
        let single = VectorSketch::from_absolute_strokes(std::slice::from_ref(stroke))?;
        let canvas = patch_canvas(&boxes[k]);
        let raster = rasterize_in(&single, &canvas, patch_size, 1)?;
        patches.row_mut(k).copy_from_slice(raster.data());
    }

    let mut adjacency = Matrix::identity(n);
    for i in 0..n {
        if i + 1 < n {
            adjacency[(i, i + 1)] = T::one();
            adjacency[(i + 1, i)] = T::one();
        }
        for j in i + 1..n {
            if boxes[i].inflate(spatial_radius).intersects(&boxes[j].inflate(spatial_radius)) {
                adjacency[(i, j)] = T::one();
                adjacency[(j, i)] = T::one();
            }
        }
    }

    Ok(SketchGraph { node_features: patches.clone(), node_patches: patches, adjacency, node_order: (0..n).collect(), patch_size })
}

/// Square crop window around a stroke: its box padded by 10% of the longer
/// side (with a floor for point-like strokes), centred.
fn patch_canvas<T: Scalar>(b: &BoundingBox<T>) -> BoundingBox<T> {
    let side = b.width().max(b.height()).max(T::of(1e-3)) * T::of(1.2);
    let (cx, cy) = b.center();
    let half = side * T::of(0.5);
    BoundingBox::new(cx - half, cy - half, cx + half, cy + half)
}

/// Weights of a GCN stack; layer `l` maps `dims[l] → dims[l + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnParams<T> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Scalar> GcnParams<T> {
    /// Glorot-scaled Gaussian init.
    pub fn init(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "a GCN needs at least one layer");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims.windows(2).map(|w| Tensor::randn(&[w[0], w[1]], (2.0 / (w[0] + w[1]) as f64).sqrt(), &mut rng)).collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Tensor<T>>) -> Result<Self, GraphError> {
        for (k, w) in layers.windows(2).enumerate() {
            if w[0].shape[1] != w[1].shape[0] {
                return Err(GraphError::DimensionMismatch(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    w[0].shape[1],
                    k + 1,
                    w[1].shape[0]
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").shape[1]
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Tensor::is_finite)
    }
}

const GCN_LAYER_NAMES: [&str; 8] = ["gcn.w0", "gcn.w1", "gcn.w2", "gcn.w3", "gcn.w4", "gcn.w5", "gcn.w6", "gcn.w7"];

impl<T: Scalar> ParamSet<T> for GcnParams<T> {
    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        assert!(self.layers.len() <= GCN_LAYER_NAMES.len(), "at most 8 GCN layers are supported");
        GCN_LAYER_NAMES.iter().copied().zip(self.layers.iter()).collect()
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        assert!(self.layers.len() <= GCN_LAYER_NAMES.len(), "at most 8 GCN layers are supported");
        GCN_LAYER_NAMES.iter().copied().zip(self.layers.iter_mut()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchEmbedding<T> {
    pub node_embeddings: Matrix<T>,
    pub pooled: Vec<T>,
}

/// `H ← ReLU(Â H W)` per layer, then a mean over nodes.
pub fn gcn_forward<T: Scalar>(graph: &SketchGraph<T>, params: &GcnParams<T>) -> Result<SketchEmbedding<T>, GraphError> {
    let tape = Tape::new();
    let features = tape.constant(graph.node_features.as_slice().to_vec(), &[graph.node_count(), graph.node_features.cols()]);
    let weights: Vec<Var> = params.layers.iter().map(|w| w.on_tape(&tape, false)).collect();
    let (nodes, pooled) = gcn_on_tape(&tape, graph, features, &weights)?;
    let n = graph.node_count();
    let d = params.output_dim();
    Ok(SketchEmbedding { node_embeddings: Matrix::from_vec(n, d, tape.value(nodes).to_vec()), pooled: tape.value(pooled).to_vec() })
}

/// Differentiable GCN pass; returns `(node_embeddings [n, d], pooled [d])`.
pub fn gcn_on_tape<T: Scalar>(tape: &Tape<T>, graph: &SketchGraph<T>, features: Var, weights: &[Var]) -> Result<(Var, Var), GraphError> {
    let n = graph.node_count();
    let fs = tape.shape(features);
    if fs != [n, fs[1]] {
        return Err(GraphError::DimensionMismatch(format!("features {fs:?} for {n} nodes")));
    }
    let a_hat = graph.normalized_adjacency();
    let a_hat = tape.constant(a_hat.into_vec(), &[n, n]);
    let mut h = features;
    for (l, &w) in weights.iter().enumerate() {
        let ws = tape.shape(w);
        let hs = tape.shape(h);
        if ws[0] != hs[1] {
            return Err(GraphError::DimensionMismatch(format!("layer {l} expects {} inputs, got {}", ws[0], hs[1])));
        }
        let hw = tape.matmul(h, w);
        h = tape.relu(tape.matmul(a_hat, hw));
    }
    let pooled = tape.mean_rows(h);
    Ok((h, pooled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigen;
    use rand::Rng;

    fn sketch(strokes: &[Vec<(f64, f64)>]) -> VectorSketch<f64> {
        VectorSketch::from_absolute_strokes(strokes).unwrap()
    }

    #[test]
    fn single_stroke_graph() {
        let g = build_graph(&sketch(&[vec![(0.1, 0.1), (0.9, 0.9)]]), 8, 0.02).unwrap();
        assert_eq!(g.node_count(), 1);
        assert_eq!(g.adjacency, Matrix::identity(1));
        assert_eq!(g.node_patches.cols(), 64);
        assert!(g.node_patches.as_slice().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn distant_consecutive_strokes_only_temporal() {
        let g = build_graph(&sketch(&[vec![(0.05, 0.05), (0.2, 0.1)], vec![(0.8, 0.8), (0.95, 0.9)]]), 8, 0.0).unwrap();
        assert_eq!(g.adjacency, Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]));
    }

    #[test]
    fn spatial_edges_follow_box_intersection() {
        // stroke 0 and 2 overlap, stroke 1 is far away from both
        let strokes = vec![vec![(0.1, 0.1), (0.3, 0.3)], vec![(0.8, 0.8), (0.9, 0.9)], vec![(0.25, 0.1), (0.4, 0.2)]];
        let g = build_graph(&sketch(&strokes), 8, 0.02).unwrap();
        let boxes: Vec<BoundingBox<f64>> = strokes.iter().map(|s| BoundingBox::enclosing(s.iter().copied()).unwrap().inflate(0.02)).collect();
        for i in 0..3 {
            for j in 0..3 {
                let expected = i == j || usize::abs_diff(i, j) == 1 || boxes[i].intersects(&boxes[j]);
                assert_eq!(g.has_edge(i, j), expected, "edge ({i},{j})");
            }
        }
        assert!(g.has_edge(0, 2));
    }

    #[test]
    fn single_node_identity_layer_is_relu() {
        let g = build_graph(&sketch(&[vec![(0.1, 0.1), (0.9, 0.9)]]), 8, 0.02).unwrap();
        let feats = Matrix::from_rows(&[vec![0.5, -1.0, 2.0, -0.25]]);
        let g = g.with_features(feats).unwrap();
        let params = GcnParams::from_layers(vec![Tensor::from(Matrix::identity(4))]).unwrap();
        let emb = gcn_forward(&g, &params).unwrap();
        assert_eq!(emb.node_embeddings.row(0), &[0.5, 0.0, 2.0, 0.0]);
        assert_eq!(emb.pooled, vec![0.5, 0.0, 2.0, 0.0]);
    }

    fn random_graph(n: usize, d: usize, rng: &mut ChaCha8Rng) -> SketchGraph<f64> {
        let mut adjacency = Matrix::identity(n);
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.5) {
                    adjacency[(i, j)] = 1.0;
                    adjacency[(j, i)] = 1.0;
                }
            }
        }
        let feats = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        SketchGraph { node_patches: feats.clone(), node_features: feats, adjacency, node_order: (0..n).collect(), patch_size: 0 }
    }

    #[test]
    fn shape_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_graph(4, 6, &mut rng);
        let params = GcnParams::init(&[6, 16, 16], 3);
        let emb = gcn_forward(&g, &params).unwrap();
        assert_eq!(emb.node_embeddings.shape(), (4, 16));
        let perm = [2, 0, 3, 1];
        let emb_p = gcn_forward(&g.permuted(&perm), &params).unwrap();
        for (a, b) in emb.pooled.iter().zip(&emb_p.pooled) {
            assert!((a - b).abs() < 1e-6);
        }
        for (k, &p) in perm.iter().enumerate() {
            for (a, b) in emb_p.node_embeddings.row(k).iter().zip(emb.node_embeddings.row(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalized_adjacency_spectral_radius_at_most_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..7 {
            let g = random_graph(n, 2, &mut rng);
            let eig = symmetric_eigen(&g.normalized_adjacency());
            let radius = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(radius <= 1.0 + 1e-9, "spectral radius {radius}");
        }
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_graph(3, 5, &mut rng);
        let params = GcnParams::init(&[4, 8], 0);
        assert!(matches!(gcn_forward(&g, &params), Err(GraphError::DimensionMismatch(_))));
        let bad = GcnParams::<f64>::from_layers(vec![Tensor::zeros(&[4, 8]), Tensor::zeros(&[7, 2])]);
        assert!(bad.is_err());
    }

    #[test]
    fn pooled_norm_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = random_graph(3, 5, &mut rng);
        let params = GcnParams::<f64>::init(&[5, 6, 4], 8);
        let pooled_norm = |p: &GcnParams<f64>| -> f64 { gcn_forward(&g, p).unwrap().pooled.iter().map(|v| v * v).sum::<f64>().sqrt() };
        let tape = Tape::new();
        let feats = tape.constant(g.node_features.as_slice().to_vec(), &[3, 5]);
        let ws: Vec<Var> = params.layers.iter().map(|w| w.on_tape(&tape, true)).collect();
        let (_, pooled) = gcn_on_tape(&tape, &g, feats, &ws).unwrap();
        let norm = tape.sqrt(tape.sum(tape.square(pooled)));
        let grads = tape.backward(norm);
        for (l, &w) in ws.iter().enumerate() {
            let analytic = grads.get_or_zeros(w, params.layers[l].len());
            for i in 0..params.layers[l].len() {
                let h = 1e-6;
                let mut plus = params.clone();
                plus.layers[l].data[i] += h;
                let mut minus = params.clone();
                minus.layers[l].data[i] -= h;
                let numeric = (pooled_norm(&plus) - pooled_norm(&minus)) / (2.0 * h);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
                assert!((analytic[i] - numeric).abs() / denom < 1e-4, "layer {l} weight {i}: {} vs {numeric}", analytic[i]);
            }
        }
    }
}

//! Minimal reverse-mode automatic differentiation over flat tensors.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! records in reverse creation order, which is always a valid topological
//! order. Tapes are single-threaded and cheap; training builds one per sample
//! and reduces gradients afterwards.

use std::cell::RefCell;
use std::rc::Rc;

use rayon::prelude::*;

use crate::Scalar;

/// Computes parent gradients from the output gradient. `needs[k]` tells
/// whether parent `k` wants a gradient; entries may be `None` otherwise.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Rc<Vec<T>>,
    shape: Vec<usize>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` did not influence
    /// the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<T>, shape: Vec<usize>, parents: Vec<usize>, backward: Option<BackwardFn<T>>) -> Var {
        debug_assert_eq!(value.len(), numel(&shape), "value length does not match shape {shape:?}");
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = backward.is_some() && parents.iter().any(|&p| nodes[p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        nodes.push(Node { value: Rc::new(value), shape, parents, requires_grad, backward });
        Var(nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Vec<T>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), numel(shape), "param length does not match shape {shape:?}");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), shape: shape.to_vec(), parents: Vec::new(), requires_grad: true, backward: None });
        Var(nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Vec<T>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), numel(shape), "constant length does not match shape {shape:?}");
        self.push(value, shape.to_vec(), Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> Rc<Vec<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    /// The single element of a one-element tensor.
    pub fn scalar(&self, v: Var) -> T {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "scalar() on a tensor with {} elements", value.len());
        value[0]
    }

    /// Records a user-defined operation.
    pub fn custom(&self, parents: &[Var], value: Vec<T>, shape: &[usize], backward: BackwardFn<T>) -> Var {
        self.push(value, shape.to_vec(), parents.iter().map(|p| p.0).collect(), Some(backward))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, need) else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let x = self.value(a);
        let y: Rc<Vec<T>> = Rc::new(x.iter().map(|&v| f(v)).collect());
        let y_keep = Rc::clone(&y);
        let shape = self.shape(a);
        self.push(
            y.to_vec(),
            shape,
            vec![a.0],
            Some(Box::new(move |g, _| vec![Some(g.iter().zip(x.iter()).zip(y_keep.iter()).map(|((&g, &x), &y)| g * df(x, y)).collect())])),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |v| T::one() / (T::one() + (-v).exp()), |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(
            a,
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |v| v * v, |x, _| T::of(2.0) * x)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, |v| v.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        self.unary(a, move |v| v + c, |_, _| T::one())
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, move |v| v.max(lo).min(hi), move |x, _| if x > lo && x < hi { T::one() } else { T::zero() })
    }

    fn binary_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, da: impl Fn(T, T) -> T + 'static, db: impl Fn(T, T) -> T + 'static) -> Var {
        let sa = self.shape(a);
        assert_eq!(numel(&sa), numel(&self.shape(b)), "elementwise op on mismatched sizes");
        let x = self.value(a);
        let y = self.value(b);
        let out = x.iter().zip(y.iter()).map(|(&p, &q)| f(p, q)).collect();
        self.push(
            out,
            sa,
            vec![a.0, b.0],
            Some(Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().zip(x.iter().zip(y.iter())).map(|(&g, (&p, &q))| g * da(p, q)).collect());
                let gb = needs[1].then(|| g.iter().zip(x.iter().zip(y.iter())).map(|(&g, (&p, &q))| g * db(p, q)).collect());
                vec![ga, gb]
            })),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |p, q| p + q, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |p, q| p - q, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |p, q| p * q, |_, q| q, |p, _| p)
    }

    /// `a [n, m] + bias [m]` broadcast over rows.
    pub fn add_row_bias(&self, a: Var, bias: Var) -> Var {
        let sa = self.shape(a);
        let m = *sa.last().expect("add_row_bias on scalar");
        assert_eq!(numel(&self.shape(bias)), m, "bias length must equal the row width");
        let x = self.value(a);
        let b = self.value(bias);
        let out = x.iter().enumerate().map(|(k, &v)| v + b[k % m]).collect();
        self.push(
            out,
            sa,
            vec![a.0, bias.0],
            Some(Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.to_vec());
                let gb = needs[1].then(|| {
                    let mut acc = vec![T::zero(); m];
                    for (k, &gv) in g.iter().enumerate() {
                        acc[k % m] += gv;
                    }
                    acc
                });
                vec![ga, gb]
            })),
        )
    }

    /// `a / s` with `s` a one-element tensor.
    pub fn div_by(&self, a: Var, s: Var) -> Var {
        let x = self.value(a);
        let sv = self.scalar(s);
        let out = x.iter().map(|&v| v / sv).collect();
        self.push(
            out,
            self.shape(a),
            vec![a.0, s.0],
            Some(Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().map(|&g| g / sv).collect());
                let gs = needs[1].then(|| {
                    let dot: T = g.iter().zip(x.iter()).map(|(&g, &x)| g * x).sum();
                    vec![-dot / (sv * sv)]
                });
                vec![ga, gs]
            })),
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len();
        let total = x.iter().copied().sum();
        self.push(vec![total], vec![1], vec![a.0], Some(Box::new(move |g, _| vec![Some(vec![g[0]; n])])))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = numel(&self.shape(a));
        let s = self.sum(a);
        self.scale(s, T::one() / T::of_usize(n.max(1)))
    }

    /// Column means of `a [n, m]`, shape `[m]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa.len(), 2, "mean_rows expects a matrix");
        let (n, m) = (sa[0], sa[1]);
        let x = self.value(a);
        let inv = T::one() / T::of_usize(n.max(1));
        let mut out = vec![T::zero(); m];
        for i in 0..n {
            for j in 0..m {
                out[j] += x[i * m + j];
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(
            out,
            vec![m],
            vec![a.0],
            Some(Box::new(move |g, _| {
                let mut ga = vec![T::zero(); n * m];
                for i in 0..n {
                    for j in 0..m {
                        ga[i * m + j] = g[j] * inv;
                    }
                }
                vec![Some(ga)]
            })),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(&self.shape(a)), numel(shape), "reshape changes element count");
        let x = self.value(a);
        self.push(x.to_vec(), shape.to_vec(), vec![a.0], Some(Box::new(|g, _| vec![Some(g.to_vec())])))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa.len(), 2, "transpose expects a matrix");
        let (n, m) = (sa[0], sa[1]);
        let x = self.value(a);
        let out = transpose_buf(&x, n, m);
        self.push(out, vec![m, n], vec![a.0], Some(Box::new(move |g, _| vec![Some(transpose_buf(g, m, n))])))
    }

    /// `a [n, k] · b [k, m]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects matrices, got {sa:?} and {sb:?}");
        assert_eq!(sa[1], sb[0], "matmul inner dimension mismatch: {sa:?} x {sb:?}");
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let x = self.value(a);
        let y = self.value(b);
        let out = matmul_buf(&x, &y, n, k, m);
        self.push(
            out,
            vec![n, m],
            vec![a.0, b.0],
            Some(Box::new(move |g, needs| {
                let ga = needs[0].then(|| matmul_buf(g, &transpose_buf(&y, k, m), n, m, k));
                let gb = needs[1].then(|| matmul_buf(&transpose_buf(&x, n, k), g, k, n, m));
                vec![ga, gb]
            })),
        )
    }

    /// Row-wise softmax of `a [n, m]`. With `causal`, row `i` only spans
    /// columns `0..=i` and the rest get probability zero.
    pub fn softmax_rows(&self, a: Var, causal: bool) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa.len(), 2, "softmax_rows expects a matrix");
        let (n, m) = (sa[0], sa[1]);
        let x = self.value(a);
        let y = Rc::new(softmax_buf(&x, n, m, causal));
        let y_keep = Rc::clone(&y);
        self.push(
            y.to_vec(),
            sa,
            vec![a.0],
            Some(Box::new(move |g, _| {
                let mut ga = vec![T::zero(); n * m];
                for i in 0..n {
                    let row = i * m..(i + 1) * m;
                    let dot: T = g[row.clone()].iter().zip(&y_keep[row.clone()]).map(|(&g, &y)| g * y).sum();
                    for j in row {
                        ga[j] = y_keep[j] * (g[j] - dot);
                    }
                }
                vec![Some(ga)]
            })),
        )
    }

    /// Mean cross-entropy of `logits [n, v]` against `targets`; rows whose
    /// target is `None` are excluded from both the sum and the count.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Var {
        let sl = self.shape(logits);
        assert_eq!(sl.len(), 2, "cross_entropy expects a matrix");
        let (n, v) = (sl[0], sl[1]);
        assert_eq!(targets.len(), n, "one target per logit row");
        let x = self.value(logits);
        let probs = softmax_buf(&x, n, v, false);
        let count = targets.iter().flatten().count();
        let inv = if count == 0 { T::zero() } else { T::one() / T::of_usize(count) };
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                assert!(t < v, "target {t} outside vocabulary of {v}");
                let row = &x[i * v..(i + 1) * v];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
                total += lse - row[t];
            }
        }
        let targets = targets.to_vec();
        self.push(
            vec![total * inv],
            vec![1],
            vec![logits.0],
            Some(Box::new(move |g, _| {
                let mut ga = vec![T::zero(); n * v];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..v {
                            ga[i * v + j] = probs[i * v + j] * inv * g[0];
                        }
                        ga[i * v + t] -= inv * g[0];
                    }
                }
                vec![Some(ga)]
            })),
        )
    }

    /// `out[k] = a[indices[k]]`; repeated indices accumulate on the way back.
    pub fn gather(&self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Var {
        assert_eq!(indices.len(), numel(shape), "gather index count does not match shape");
        let x = self.value(a);
        let len = x.len();
        let out = indices.iter().map(|&i| x[i]).collect();
        self.push(
            out,
            shape.to_vec(),
            vec![a.0],
            Some(Box::new(move |g, _| {
                let mut ga = vec![T::zero(); len];
                for (&i, &gv) in indices.iter().zip(g) {
                    ga[i] += gv;
                }
                vec![Some(ga)]
            })),
        )
    }

    /// Selects rows of `table [r, m]`, producing `[ids.len(), m]`.
    pub fn rows(&self, table: Var, ids: &[usize]) -> Var {
        let st = self.shape(table);
        assert_eq!(st.len(), 2, "rows expects a matrix");
        let m = st[1];
        let indices = ids.iter().flat_map(|&r| (r * m)..(r * m + m)).collect();
        self.gather(table, indices, &[ids.len(), m])
    }

    /// Average pooling of a `[h, w]` (or `[1, h, w]`) map onto an `oh × ow`
    /// grid; output cell `(r, c)` averages the input pixels whose scaled
    /// coordinates `(y·oh/h, x·ow/w)` floor to it.
    pub fn block_mean(&self, a: Var, oh: usize, ow: usize) -> Var {
        let sa = self.shape(a);
        let (h, w) = match sa.as_slice() {
            [h, w] | [1, h, w] => (*h, *w),
            other => panic!("block_mean expects a single-channel map, got {other:?}"),
        };
        assert!(oh <= h && ow <= w, "block_mean cannot upsample");
        let x = self.value(a);
        let cell: Vec<usize> = (0..h * w).map(|k| ((k / w) * oh / h) * ow + (k % w) * ow / w).collect();
        let mut counts = vec![0usize; oh * ow];
        cell.iter().for_each(|&c| counts[c] += 1);
        let inv: Vec<T> = counts.iter().map(|&c| T::one() / T::of_usize(c.max(1))).collect();
        let mut out = vec![T::zero(); oh * ow];
        for (k, &c) in cell.iter().enumerate() {
            out[c] += x[k];
        }
        out.iter_mut().zip(&inv).for_each(|(o, &i)| *o *= i);
        self.push(out, vec![oh, ow], vec![a.0], Some(Box::new(move |g, _| vec![Some(cell.iter().map(|&c| g[c] * inv[c]).collect())])))
    }

    /// 2-D convolution of a single image `x [c, h, w]` with `weight
    /// [o, c, k, k]` and `bias [o]`, zero padding `pad` on every side.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x);
        let sw = self.shape(weight);
        assert_eq!(sx.len(), 3, "conv2d input must be [c, h, w], got {sx:?}");
        assert_eq!(sw.len(), 4, "conv2d weight must be [o, c, k, k], got {sw:?}");
        assert_eq!(sx[0], sw[1], "conv2d channel mismatch: input {sx:?}, weight {sw:?}");
        assert_eq!(numel(&self.shape(bias)), sw[0], "conv2d bias must have one entry per output channel");
        let geo = ConvGeometry::new(sx[0], sx[1], sx[2], sw[0], sw[2], stride, pad);
        let xv = self.value(x);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let out = conv_forward(&geo, &xv, &wv, &bv);
        self.push(
            out,
            vec![geo.out_c, geo.out_h, geo.out_w],
            vec![x.0, weight.0, bias.0],
            Some(Box::new(move |g, needs| {
                let gx = needs[0].then(|| conv_backward_input(&geo, g, &wv));
                let gw = needs[1].then(|| conv_backward_weight(&geo, g, &xv));
                let gb = needs[2].then(|| {
                    let plane = geo.out_h * geo.out_w;
                    (0..geo.out_c).map(|o| g[o * plane..(o + 1) * plane].iter().copied().sum()).collect()
                });
                vec![gx, gw, gb]
            })),
        )
    }

    /// Nearest-neighbour ×2 upsampling of `x [c, h, w]`.
    pub fn upsample2x(&self, x: Var) -> Var {
        let sx = self.shape(x);
        assert_eq!(sx.len(), 3, "upsample2x expects [c, h, w]");
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let indices: Vec<usize> =
            (0..c).flat_map(|ch| (0..2 * h).flat_map(move |y| (0..2 * w).map(move |xx| ch * h * w + (y / 2) * w + xx / 2))).collect();
        self.gather(x, indices, &[c, 2 * h, 2 * w])
    }
}

fn transpose_buf<T: Scalar>(x: &[T], n: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = x[i * m + j];
        }
    }
    out
}

fn matmul_buf<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softmax_buf<T: Scalar>(x: &[T], n: usize, m: usize, causal: bool) -> Vec<T> {
    let mut y = vec![T::zero(); n * m];
    for i in 0..n {
        let width = if causal { (i + 1).min(m) } else { m };
        let row = &x[i * m..i * m + width];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            y[i * m + j] = e;
            total += e;
        }
        for j in 0..width {
            y[i * m + j] /= total;
        }
    }
    y
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(in_c: usize, in_h: usize, in_w: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1, "conv stride must be positive");
        assert!(in_h + 2 * pad >= k && in_w + 2 * pad >= k, "conv kernel larger than padded input");
        let out_h = (in_h + 2 * pad - k) / stride + 1;
        let out_w = (in_w + 2 * pad - k) / stride + 1;
        Self { in_c, in_h, in_w, out_c, out_h, out_w, k, stride, pad }
    }

    /// Output columns `ox` whose input column `ox*stride + kj - pad` is in range.
    #[inline]
    fn valid_range(&self, kk: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        // ox*stride + kk >= pad  and  ox*stride + kk - pad < in_len
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(self.stride) };
        let hi_excl = if in_len + self.pad > kk { (in_len + self.pad - kk).div_ceil(self.stride) } else { 0 };
        (lo, hi_excl.min(out_len))
    }
}

fn conv_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.out_c * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(o, dst)| {
        dst.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.in_c {
            let src = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ki in 0..g.k {
                let (oy0, oy1) = g.valid_range(ki, g.out_h, g.in_h);
                for kj in 0..g.k {
                    let wv = w[((o * g.in_c + c) * g.k + ki) * g.k + kj];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kj, g.out_w, g.in_w);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad;
                        let src_row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                        let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in ox0..ox1 {
                            dst_row[ox] += wv * src_row[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_backward_input<T: Scalar>(g: &ConvGeometry, grad: &[T], w: &[T]) -> Vec<T> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut gx = vec![T::zero(); g.in_c * in_plane];
    gx.par_chunks_mut(in_plane).enumerate().for_each(|(c, dst)| {
        for o in 0..g.out_c {
            let src = &grad[o * out_plane..(o + 1) * out_plane];
            for ki in 0..g.k {
                let (oy0, oy1) = g.valid_range(ki, g.out_h, g.in_h);
                for kj in 0..g.k {
                    let wv = w[((o * g.in_c + c) * g.k + ki) * g.k + kj];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kj, g.out_w, g.in_w);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad;
                        let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                        let dst_row = &mut dst[iy * g.in_w..(iy + 1) * g.in_w];
                        for ox in ox0..ox1 {
                            dst_row[ox * g.stride + kj - g.pad] += wv * src_row[ox];
                        }
                    }
                }
            }
        }
    });
    gx
}

fn conv_backward_weight<T: Scalar>(g: &ConvGeometry, grad: &[T], x: &[T]) -> Vec<T> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let per_out = g.in_c * g.k * g.k;
    let mut gw = vec![T::zero(); g.out_c * per_out];
    gw.par_chunks_mut(per_out).enumerate().for_each(|(o, dst)| {
        let src = &grad[o * out_plane..(o + 1) * out_plane];
        for c in 0..g.in_c {
            let xin = &x[c * in_plane..(c + 1) * in_plane];
            for ki in 0..g.k {
                let (oy0, oy1) = g.valid_range(ki, g.out_h, g.in_h);
                for kj in 0..g.k {
                    let (ox0, ox1) = g.valid_range(kj, g.out_w, g.in_w);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad;
                        let g_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                        let x_row = &xin[iy * g.in_w..(iy + 1) * g.in_w];
                        for ox in ox0..ox1 {
                            acc += g_row[ox] * x_row[ox * g.stride + kj - g.pad];
                        }
                    }
                    dst[(c * g.k + ki) * g.k + kj] = acc;
                }
            }
        }
    });
    gw
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of `f` with respect to a single leaf.
    fn check_grad(shape: &[usize], seed: u64, f: impl Fn(&Tape<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(shape.iter().product(), &mut rng);
        let tape = Tape::new();
        let x = tape.param(x0.clone(), shape);
        let loss = f(&tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get_or_zeros(x, x0.len());
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xs = x0.clone();
                xs[i] += delta;
                let t = Tape::new();
                let v = t.param(xs, shape);
                let l = f(&t, v);
                t.scalar(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!((analytic[i] - numeric).abs() / denom < 1e-5, "component {i}: analytic {} vs numeric {numeric}", analytic[i]);
        }
    }

    #[test]
    fn matmul_and_softmax_gradients() {
        check_grad(&[3, 4], 1, |t, x| {
            let w = t.constant((0..8).map(|k| (k as f64 * 0.37).sin()).collect(), &[4, 2]);
            let y = t.matmul(x, w);
            let s = t.softmax_rows(y, false);
            let sq = t.square(s);
            t.sum(sq)
        });
    }

    #[test]
    fn causal_softmax_gradients() {
        check_grad(&[4, 4], 2, |t, x| {
            let s = t.softmax_rows(x, true);
            let w = t.constant((0..16).map(|k| k as f64 * 0.1).collect(), &[4, 4]);
            let p = t.mul(s, w);
            t.sum(p)
        });
    }

    #[test]
    fn causal_softmax_masks_future() {
        let t = Tape::<f64>::new();
        let x = t.constant(vec![1.0, 5.0, 2.0, 3.0], &[2, 2]);
        let s = t.value(t.softmax_rows(x, true));
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], 0.0);
        assert!((s[2] + s[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_and_masking() {
        check_grad(&[3, 5], 3, |t, x| t.cross_entropy(x, &[Some(1), None, Some(4)]));
        let t = Tape::<f64>::new();
        let x = t.constant(vec![0.0; 10], &[2, 5]);
        let l = t.cross_entropy(x, &[Some(0), Some(3)]);
        assert!((t.scalar(l) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn conv_gradients_strided_and_padded() {
        let weight: Vec<f64> = (0..2 * 3 * 3 * 3).map(|k| ((k * 7 % 11) as f64 - 5.0) * 0.1).collect();
        check_grad(&[3, 6, 5], 4, move |t, x| {
            let w = t.constant(weight.clone(), &[2, 3, 3, 3]);
            let b = t.constant(vec![0.1, -0.2], &[2]);
            let y = t.conv2d(x, w, b, 2, 1);
            let y = t.square(y);
            t.sum(y)
        });
        let input: Vec<f64> = (0..2 * 5 * 5).map(|k| ((k * 5 % 13) as f64 - 6.0) * 0.1).collect();
        check_grad(&[3, 2, 3, 3], 5, move |t, w| {
            let x = t.constant(input.clone(), &[2, 5, 5]);
            let b = t.constant(vec![0.0; 3], &[3]);
            let y = t.conv2d(x, w, b, 1, 1);
            let y = t.sigmoid(y);
            t.sum(y)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let t = Tape::<f64>::new();
        let x = t.constant((0..16).map(|v| v as f64).collect(), &[1, 4, 4]);
        let w = t.constant(vec![1.0; 9], &[1, 1, 3, 3]);
        let b = t.constant(vec![0.5], &[1]);
        let y = t.value(t.conv2d(x, w, b, 1, 1));
        // corner (0,0) sums x[0,0], x[0,1], x[1,0], x[1,1] = 0 + 1 + 4 + 5
        assert_eq!(y[0], 10.5);
        // centre (1,1) sums the 3x3 block rows 0..3, cols 0..3
        assert_eq!(y[5], (0 + 1 + 2 + 4 + 5 + 6 + 8 + 9 + 10) as f64 + 0.5);
        let y2 = t.conv2d(x, w, b, 2, 1);
        assert_eq!(t.shape(y2), vec![1, 2, 2]);
    }

    #[test]
    fn pooling_upsampling_and_gather_gradients() {
        check_grad(&[1, 6, 6], 6, |t, x| {
            let p = t.block_mean(x, 3, 2);
            let q = t.square(p);
            t.sum(q)
        });
        check_grad(&[2, 2, 3], 7, |t, x| {
            let u = t.upsample2x(x);
            let w = t.constant((0..48).map(|k| k as f64 * 0.01).collect(), &[2, 4, 6]);
            let p = t.mul(u, w);
            let p = t.tanh(p);
            t.sum(p)
        });
    }

    #[test]
    fn elementwise_gradients() {
        check_grad(&[2, 3], 8, |t, x| {
            let b = t.constant(vec![0.3, -0.1, 0.2], &[3]);
            let y = t.add_row_bias(x, b);
            let y = t.relu(y);
            let z = t.mean_rows(x);
            let n = t.sum(t.square(z));
            let n = t.add_scalar(n, 1.0);
            let n = t.sqrt(n);
            let y = t.div_by(y, n);
            let a = t.abs(t.sub(y, x));
            let c = t.clamp(x, -0.5, 0.5);
            let m = t.mul(a, c);
            t.mean(m)
        });
    }
}

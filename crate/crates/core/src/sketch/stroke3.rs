use serde::{Deserialize, Serialize};

use super::geometry::{AffineTransform, BoundingBox};
use super::{Result, SketchError};
use crate::Scalar;

/// One relative pen move `(dx, dy, pen_lift)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenMove<T> {
    pub dx: T,
    pub dy: T,
    /// The stroke ends after this point.
    pub pen_lift: bool,
}

impl<T: Scalar> PenMove<T> {
    pub fn new(dx: T, dy: T, pen_lift: bool) -> Self {
        Self { dx, dy, pen_lift }
    }

    pub fn to_triple(self) -> [T; 3] {
        [self.dx, self.dy, if self.pen_lift { T::one() } else { T::zero() }]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsPoint<T> {
    pub x: T,
    pub y: T,
    pub stroke: usize,
}

/// A sketch as an ordered list of pen moves. Always non-empty and always
/// terminated by a pen lift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorSketch<T> {
    moves: Vec<PenMove<T>>,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseOptions {
    /// Map any non-zero pen value to 1 (and count it) instead of failing.
    pub coerce_nonzero_pen: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { coerce_nonzero_pen: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseReport {
    /// Pen flags rewritten to 1, including a forced lift on the last move.
    pub coerced_pen_flags: usize,
}

/// Parses raw `(dx, dy, p)` triples with lenient pen-flag coercion.
pub fn parse_stroke3<T: Scalar>(raw: &[[T; 3]]) -> Result<VectorSketch<T>> {
    let (sketch, report) = parse_stroke3_with(raw, ParseOptions::default())?;
    if report.coerced_pen_flags > 0 {
        log::warn!("coerced {} pen flag(s) to 1 while parsing stroke-3 input", report.coerced_pen_flags);
    }
    Ok(sketch)
}

pub fn parse_stroke3_with<T: Scalar>(raw: &[[T; 3]], options: ParseOptions) -> Result<(VectorSketch<T>, ParseReport)> {
    if raw.is_empty() {
        return Err(SketchError::EmptySketch);
    }
    let mut report = ParseReport::default();
    let mut moves = Vec::with_capacity(raw.len());
    for (index, &[dx, dy, p]) in raw.iter().enumerate() {
        if !p.is_finite() {
            return Err(SketchError::InvalidPenFlag { index, value: p.f64() });
        }
        let flag = p.round();
        let pen_lift = if flag == T::zero() {
            false
        } else if flag == T::one() {
            true
        } else if options.coerce_nonzero_pen {
            report.coerced_pen_flags += 1;
            true
        } else {
            return Err(SketchError::InvalidPenFlag { index, value: p.f64() });
        };
        moves.push(PenMove { dx, dy, pen_lift });
    }
    let last = moves.last_mut().expect("non-empty");
    if !last.pen_lift {
        last.pen_lift = true;
        report.coerced_pen_flags += 1;
    }
    Ok((VectorSketch { moves, source_id: String::new() }, report))
}

impl<T: Scalar> VectorSketch<T> {
    /// Builds a sketch from moves, enforcing the terminal pen lift.
    pub fn from_moves(moves: Vec<PenMove<T>>) -> Result<Self> {
        let mut moves = moves;
        match moves.last_mut() {
            None => return Err(SketchError::EmptySketch),
            Some(last) => last.pen_lift = true,
        }
        Ok(Self { moves, source_id: String::new() })
    }

    /// Builds a sketch from per-stroke absolute coordinates; the pen starts
    /// at the origin.
    pub fn from_absolute_strokes(strokes: &[Vec<(T, T)>]) -> Result<Self> {
        let mut moves = Vec::new();
        let (mut px, mut py) = (T::zero(), T::zero());
        for stroke in strokes.iter().filter(|s| !s.is_empty()) {
            for (k, &(x, y)) in stroke.iter().enumerate() {
                moves.push(PenMove { dx: x - px, dy: y - py, pen_lift: k + 1 == stroke.len() });
                px = x;
                py = y;
            }
        }
        Self::from_moves(moves)
    }

    /// Rebuilds moves from absolute points, keeping the stroke partition of
    /// `self`.
    fn with_points(&self, points: &[(T, T)]) -> Self {
        let mut moves = Vec::with_capacity(self.moves.len());
        let (mut px, mut py) = (T::zero(), T::zero());
        for (m, &(x, y)) in self.moves.iter().zip(points) {
            moves.push(PenMove { dx: x - px, dy: y - py, pen_lift: m.pen_lift });
            px = x;
            py = y;
        }
        Self { moves, source_id: self.source_id.clone() }
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn moves(&self) -> &[PenMove<T>] {
        &self.moves
    }

    pub fn len(&self) -> usize {
        self.moves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }

    pub fn to_stroke3(&self) -> Vec<[T; 3]> {
        self.moves.iter().map(|m| m.to_triple()).collect()
    }

    /// Moves grouped into strokes, split after every pen lift.
    pub fn strokes(&self) -> impl Iterator<Item = &[PenMove<T>]> {
        self.moves.split_inclusive(|m| m.pen_lift)
    }

    pub fn stroke_count(&self) -> usize {
        self.moves.iter().filter(|m| m.pen_lift).count()
    }

    /// Prefix sums of the offsets, starting from the origin.
    pub fn absolute_points(&self) -> Vec<AbsPoint<T>> {
        let mut out = Vec::with_capacity(self.moves.len());
        let (mut x, mut y) = (T::zero(), T::zero());
        let mut stroke = 0;
        for m in &self.moves {
            x += m.dx;
            y += m.dy;
            out.push(AbsPoint { x, y, stroke });
            if m.pen_lift {
                stroke += 1;
            }
        }
        out
    }

    /// Absolute points grouped per stroke.
    pub fn stroke_points(&self) -> Vec<Vec<(T, T)>> {
        let mut strokes: Vec<Vec<(T, T)>> = Vec::new();
        for p in self.absolute_points() {
            if strokes.len() <= p.stroke {
                strokes.push(Vec::new());
            }
            strokes[p.stroke].push((p.x, p.y));
        }
        strokes
    }

    pub fn bounding_box(&self) -> BoundingBox<T> {
        BoundingBox::enclosing(self.absolute_points().iter().map(|p| (p.x, p.y))).expect("sketch is non-empty")
    }

    /// Centres the sketch in the unit square with its longest side equal to
    /// [`NORMALIZED_LONG_SIDE`](super::NORMALIZED_LONG_SIDE).
    pub fn normalize(&self) -> Result<Self> {
        let t = self.normalizing_transform()?;
        self.apply_affine(&t)
    }

    pub fn normalizing_transform(&self) -> Result<AffineTransform<T>> {
        let bbox = self.bounding_box();
        let long = bbox.width().max(bbox.height());
        if !(long > T::epsilon() * (T::one() + bbox.x_max.abs().max(bbox.y_max.abs()))) {
            return Err(SketchError::DegenerateExtent);
        }
        let s = T::of(super::NORMALIZED_LONG_SIDE) / long;
        let (cx, cy) = bbox.center();
        let half = T::of(0.5);
        AffineTransform::new([[s, T::zero(), half - s * cx], [T::zero(), s, half - s * cy]])
    }

    pub fn apply_affine(&self, t: &AffineTransform<T>) -> Result<Self> {
        t.check_invertible()?;
        let points: Vec<(T, T)> = self.absolute_points().iter().map(|p| t.apply(p.x, p.y)).collect();
        Ok(self.with_points(&points))
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        self.apply_affine(&AffineTransform::translation(dx, dy)).expect("translation is invertible")
    }

    /// Sub-sketch holding only stroke `index`, positioned absolutely.
    pub fn stroke_sketch(&self, index: usize) -> Option<Self> {
        let strokes = self.stroke_points();
        let stroke = strokes.get(index)?;
        Self::from_absolute_strokes(std::slice::from_ref(stroke)).ok().map(|s| s.with_source_id(self.source_id.clone()))
    }

    pub fn cast<U: Scalar>(&self) -> VectorSketch<U> {
        VectorSketch {
            moves: self.moves.iter().map(|m| PenMove { dx: U::of(m.dx.f64()), dy: U::of(m.dy.f64()), pen_lift: m.pen_lift }).collect(),
            source_id: self.source_id.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triples(v: &[(f64, f64, f64)]) -> Vec<[f64; 3]> {
        v.iter().map(|&(a, b, c)| [a, b, c]).collect()
    }

    #[test]
    fn empty_input_is_rejected() {
        assert_eq!(parse_stroke3::<f64>(&[]), Err(SketchError::EmptySketch));
    }

    #[test]
    fn single_point_single_stroke() {
        let s = parse_stroke3(&triples(&[(0.0, 0.0, 1.0)])).unwrap();
        assert_eq!(s.stroke_count(), 1);
        assert_eq!(s.strokes().map(<[_]>::len).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn splits_at_pen_lifts() {
        let raw = triples(&[(10.0, 0.0, 0.0), (0.0, 10.0, 0.0), (-10.0, 0.0, 1.0), (5.0, 5.0, 0.0), (1.0, 1.0, 1.0)]);
        let s = parse_stroke3(&raw).unwrap();
        assert_eq!(s.strokes().map(<[_]>::len).collect::<Vec<_>>(), vec![3, 2]);
        assert_eq!(s.to_stroke3(), raw);
    }

    #[test]
    fn pen_flag_coercion_and_strict_mode() {
        let raw = triples(&[(1.0, 0.0, 2.0), (1.0, 1.0, 1.0)]);
        let (s, report) = parse_stroke3_with(&raw, ParseOptions::default()).unwrap();
        assert_eq!(report.coerced_pen_flags, 1);
        assert_eq!(s.stroke_count(), 2);
        let strict = parse_stroke3_with(&raw, ParseOptions { coerce_nonzero_pen: false });
        assert!(matches!(strict, Err(SketchError::InvalidPenFlag { index: 0, .. })));
        let nan = parse_stroke3(&triples(&[(0.0, 0.0, f64::NAN)]));
        assert!(matches!(nan, Err(SketchError::InvalidPenFlag { .. })));
    }

    #[test]
    fn absolute_points_prefix_sums() {
        let s = parse_stroke3(&triples(&[(1.0, 0.0, 0.0), (0.0, 1.0, 1.0)])).unwrap();
        let pts: Vec<_> = s.absolute_points().iter().map(|p| (p.x, p.y, p.stroke)).collect();
        assert_eq!(pts, vec![(1.0, 0.0, 0), (1.0, 1.0, 0)]);
        let zero = parse_stroke3(&triples(&[(0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 0.0, 1.0)])).unwrap();
        assert!(zero.absolute_points().iter().all(|p| p.x == 0.0 && p.y == 0.0));
    }

    #[test]
    fn bounding_box_and_scaling() {
        let s = parse_stroke3(&triples(&[(0.0, 0.0, 0.0), (2.0, 3.0, 1.0)])).unwrap();
        let b = s.bounding_box();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (0.0, 0.0, 2.0, 3.0));
        let scaled = s.apply_affine(&AffineTransform::scale(2.0, 2.0)).unwrap();
        let b = scaled.bounding_box();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (0.0, 0.0, 4.0, 6.0));
    }

    #[test]
    fn normalize_rejects_single_point() {
        let s = parse_stroke3(&triples(&[(3.0, 4.0, 1.0)])).unwrap();
        assert_eq!(s.normalize(), Err(SketchError::DegenerateExtent));
    }

    #[test]
    fn normalize_frame() {
        let s = parse_stroke3(&triples(&[(10.0, 20.0, 0.0), (40.0, 0.0, 0.0), (0.0, 20.0, 1.0)])).unwrap();
        let n = s.normalize().unwrap();
        let b = n.bounding_box();
        assert!((b.width() - 0.9).abs() < 1e-12);
        assert!((b.height() - 0.45).abs() < 1e-12);
        let (cx, cy) = b.center();
        assert!((cx - 0.5).abs() < 1e-12 && (cy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_and_translation() {
        let s = parse_stroke3(&triples(&[(1.0, 2.0, 0.0), (3.0, -1.0, 1.0)])).unwrap();
        assert_eq!(s.apply_affine(&AffineTransform::identity()).unwrap(), s);
        let b0 = s.bounding_box();
        let b1 = s.translate(5.0, 7.0).bounding_box();
        assert_eq!((b1.x_min - b0.x_min, b1.y_min - b0.y_min), (5.0, 7.0));
        assert_eq!((b1.x_max - b0.x_max, b1.y_max - b0.y_max), (5.0, 7.0));
    }

    #[test]
    fn singular_transform_rejected() {
        let s = parse_stroke3(&triples(&[(1.0, 2.0, 1.0)])).unwrap();
        let t = AffineTransform::from_matrix([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]]);
        assert!(matches!(s.apply_affine(&t), Err(SketchError::SingularTransform { .. })));
    }

    fn arb_sketch() -> impl Strategy<Value = VectorSketch<f64>> {
        prop::collection::vec((-50i32..50, -50i32..50, prop::bool::weighted(0.2)), 2..40).prop_filter_map("needs extent", |moves| {
            let raw: Vec<[f64; 3]> = moves.iter().map(|&(x, y, p)| [x as f64, y as f64, p as u8 as f64]).collect();
            let s = parse_stroke3(&raw).ok()?;
            s.normalize().ok().map(|_| s)
        })
    }

    proptest! {
        #[test]
        fn parse_serialize_round_trip(moves in prop::collection::vec((-255i32..255, -255i32..255, prop::bool::ANY), 1..60)) {
            let mut raw: Vec<[f64; 3]> = moves.iter().map(|&(x, y, p)| [x as f64, y as f64, p as u8 as f64]).collect();
            raw.last_mut().unwrap()[2] = 1.0;
            let s = parse_stroke3(&raw).unwrap();
            prop_assert_eq!(s.to_stroke3(), raw);
        }

        #[test]
        fn diffs_of_absolute_points_recover_moves(s in arb_sketch()) {
            let pts = s.absolute_points();
            let mut prev = (0.0, 0.0);
            for (m, p) in s.moves().iter().zip(&pts) {
                prop_assert!((p.x - prev.0 - m.dx).abs() < 1e-9);
                prop_assert!((p.y - prev.1 - m.dy).abs() < 1e-9);
                prev = (p.x, p.y);
            }
            prop_assert!(pts.windows(2).all(|w| w[0].stroke <= w[1].stroke));
        }

        #[test]
        fn bounding_box_matches_point_scan(s in arb_sketch()) {
            let b = s.bounding_box();
            let pts = s.absolute_points();
            let xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.y).collect();
            prop_assert_eq!(b.x_min, xs.iter().cloned().fold(f64::INFINITY, f64::min));
            prop_assert_eq!(b.x_max, xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            prop_assert_eq!(b.y_min, ys.iter().cloned().fold(f64::INFINITY, f64::min));
            prop_assert_eq!(b.y_max, ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }

        #[test]
        fn normalize_is_idempotent_and_translation_invariant(s in arb_sketch(), tx in -100.0f64..100.0, ty in -100.0f64..100.0) {
            let n = s.normalize().unwrap();
            let nn = n.normalize().unwrap();
            let nt = s.translate(tx, ty).normalize().unwrap();
            for ((a, b), c) in n.absolute_points().iter().zip(nn.absolute_points()).zip(nt.absolute_points()) {
                prop_assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6);
                prop_assert!((a.x - c.x).abs() < 1e-6 && (a.y - c.y).abs() < 1e-6);
            }
        }

        #[test]
        fn affine_composition_is_matrix_product(
            s in arb_sketch(),
            a in prop::array::uniform6(-2.0f64..2.0),
            b in prop::array::uniform6(-2.0f64..2.0),
        ) {
            let ta = AffineTransform::from_matrix([[a[0], a[1], a[2]], [a[3], a[4], a[5]]]);
            let tb = AffineTransform::from_matrix([[b[0], b[1], b[2]], [b[3], b[4], b[5]]]);
            prop_assume!(ta.determinant().abs() > 1e-3 && tb.determinant().abs() > 1e-3);
            let stepwise = s.apply_affine(&ta).unwrap().apply_affine(&tb).unwrap();
            // explicit 3x3 product B·A written out by hand
            let (ma, mb) = (ta.matrix(), tb.matrix());
            let mut prod = [[0.0; 3]; 2];
            for r in 0..2 {
                for c in 0..3 {
                    prod[r][c] = mb[r][0] * ma[0][c] + mb[r][1] * ma[1][c] + if c == 2 { mb[r][2] } else { 0.0 };
                }
            }
            let direct = s.apply_affine(&AffineTransform::from_matrix(prod)).unwrap();
            for (p, q) in stepwise.absolute_points().iter().zip(direct.absolute_points()) {
                prop_assert!((p.x - q.x).abs() < 1e-6 && (p.y - q.y).abs() < 1e-6);
            }
        }
    }
}

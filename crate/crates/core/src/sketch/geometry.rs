use serde::{Deserialize, Serialize};

use super::{Result, SketchError};
use crate::Scalar;

/// Axis-aligned box in absolute canvas coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Scalar> BoundingBox<T> {
    /// Panics if the corners are out of order.
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Self {
        assert!(x_min <= x_max && y_min <= y_max, "bounding box corners out of order");
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn unit() -> Self {
        Self::new(T::zero(), T::zero(), T::one(), T::one())
    }

    pub fn enclosing(points: impl IntoIterator<Item = (T, T)>) -> Option<Self> {
        let mut it = points.into_iter();
        let (x, y) = it.next()?;
        let mut b = Self { x_min: x, y_min: y, x_max: x, y_max: y };
        for (x, y) in it {
            b.x_min = b.x_min.min(x);
            b.y_min = b.y_min.min(y);
            b.x_max = b.x_max.max(x);
            b.y_max = b.y_max.max(y);
        }
        Some(b)
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (T, T) {
        let half = T::of(0.5);
        ((self.x_min + self.x_max) * half, (self.y_min + self.y_max) * half)
    }

    pub fn inflate(&self, margin: T) -> Self {
        Self { x_min: self.x_min - margin, y_min: self.y_min - margin, x_max: self.x_max + margin, y_max: self.y_max + margin }
    }

    /// Closed-interval intersection test; touching boxes intersect.
    pub fn intersects(&self, other: &Self) -> bool {
        self.x_min <= other.x_max && other.x_min <= self.x_max && self.y_min <= other.y_max && other.y_min <= self.y_max
    }

    pub fn contains(&self, other: &Self, tolerance: T) -> bool {
        other.x_min >= self.x_min - tolerance
            && other.y_min >= self.y_min - tolerance
            && other.x_max <= self.x_max + tolerance
            && other.y_max <= self.y_max + tolerance
    }
}

/// `[[a, b, tx], [c, d, ty]]` acting on column vectors `(x, y, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform<T> {
    m: [[T; 3]; 2],
}

impl<T: Scalar> AffineTransform<T> {
    /// Fails with [`SketchError::SingularTransform`] when the linear block
    /// has zero determinant.
    pub fn new(m: [[T; 3]; 2]) -> Result<Self> {
        let t = Self { m };
        t.check_invertible()?;
        Ok(t)
    }

    /// Unchecked constructor; singular matrices are rejected when applied.
    pub fn from_matrix(m: [[T; 3]; 2]) -> Self {
        Self { m }
    }

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { m: [[o, z, z], [z, o, z]] }
    }

    pub fn translation(tx: T, ty: T) -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { m: [[o, z, tx], [z, o, ty]] }
    }

    pub fn scale(sx: T, sy: T) -> Self {
        let z = T::zero();
        Self { m: [[sx, z, z], [z, sy, z]] }
    }

    pub fn matrix(&self) -> [[T; 3]; 2] {
        self.m
    }

    pub fn determinant(&self) -> T {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn check_invertible(&self) -> Result<()> {
        let det = self.determinant();
        if det == T::zero() || !det.is_finite() {
            return Err(SketchError::SingularTransform { determinant: det.f64() });
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, x: T, y: T) -> (T, T) {
        let m = &self.m;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    /// The transform that applies `self` first, then `next`.
    pub fn then(&self, next: &Self) -> Self {
        let (a, b) = (&self.m, &next.m);
        let mut out = [[T::zero(); 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                out[r][c] = b[r][0] * a[0][c] + b[r][1] * a[1][c];
            }
            out[r][2] += b[r][2];
        }
        Self { m: out }
    }
}

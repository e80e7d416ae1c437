//! Axis-aligned boxes in corner form.

use crate::scalar::Scalar;

/// `(x_min, y_min, x_max, y_max)`. Coordinates are normalized to `[0, 1]` for
/// anchors and augmentation, and in pixels for dataset records and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox<T> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Self {
        let (hw, hh) = (w / T::two(), h / T::two());
        Self::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }

    pub fn width(&self) -> T {
        (self.x_max - self.x_min).max(T::zero())
    }

    pub fn height(&self) -> T {
        (self.y_max - self.y_min).max(T::zero())
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        (
            (self.x_min + self.x_max) / T::two(),
            (self.y_min + self.y_max) / T::two(),
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    pub fn intersection(&self, other: &Self) -> T {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    /// Clamps every coordinate into `[lo, hi]`.
    pub fn clamp(&self, lo: T, hi: T) -> Self {
        let c = |v: T| v.max(lo).min(hi);
        Self::new(c(self.x_min), c(self.y_min), c(self.x_max), c(self.y_max))
    }

    pub fn scale(&self, sx: T, sy: T) -> Self {
        Self::new(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)
    }

    pub fn contains_point(&self, x: T, y: T) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Intersection over union. Two zero-area boxes give 0.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        (inter / union).min(T::one())
    }
}

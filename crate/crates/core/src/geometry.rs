//! Axis-aligned boxes in pixel coordinates and the geometry every stage shares.
//!
//! Boxes are stored corner-format (`x_min, y_min, x_max, y_max`) with the origin
//! at the top-left of the image. Center format only exists at the head boundary
//! via [`CenterBox`].

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Detection or annotation box. `score` is `None` for ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
    pub class_id: u32,
    pub score: Option<T>,
}

/// Center/size representation `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BoundingBox<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T, class_id: u32) -> Self {
        Self { x_min, y_min, x_max, y_max, class_id, score: None }
    }

    pub fn with_score(mut self, score: T) -> Self {
        self.score = Some(score);
        self
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    /// Area, zero for degenerate boxes.
    pub fn area(&self) -> T {
        let w = self.width().max(T::zero());
        let h = self.height().max(T::zero());
        w * h
    }

    /// Strictly positive extent on both axes with finite coordinates.
    pub fn is_proper(&self) -> bool {
        let finite = self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite();
        finite && self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
            ..*self
        }
    }

    pub fn scale(&self, sx: T, sy: T) -> Self {
        Self {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
            ..*self
        }
    }

    pub fn to_center(&self) -> CenterBox<T> {
        box_convert_to_center(self)
    }

    pub fn cast<U: Scalar>(&self) -> BoundingBox<U> {
        let c = |v: T| U::lit(v.as_f64());
        BoundingBox {
            x_min: c(self.x_min),
            y_min: c(self.y_min),
            x_max: c(self.x_max),
            y_max: c(self.y_max),
            class_id: self.class_id,
            score: self.score.map(c),
        }
    }
}

/// Area of the intersection of two boxes.
pub fn intersection<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= T::zero() || h <= T::zero() {
        T::zero()
    } else {
        w * h
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let inter = intersection(a, b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

/// Default fraction of the original area a clipped box must keep.
pub const DEFAULT_MIN_AREA_FRAC: f64 = 0.25;

/// Clips `b` to `[0, width] x [0, height]`.
///
/// Returns `None` when the clipped box is degenerate or keeps less than
/// `min_area_frac` of its original area.
pub fn clip_box<T: Scalar>(
    b: &BoundingBox<T>,
    width: T,
    height: T,
    min_area_frac: T,
) -> Option<BoundingBox<T>> {
    clip_box_to_rect(b, T::zero(), T::zero(), width, height, min_area_frac)
}

/// Clips `b` to an arbitrary rectangle, same drop rule as [`clip_box`].
pub fn clip_box_to_rect<T: Scalar>(
    b: &BoundingBox<T>,
    x0: T,
    y0: T,
    x1: T,
    y1: T,
    min_area_frac: T,
) -> Option<BoundingBox<T>> {
    let original = b.area();
    let clipped = BoundingBox {
        x_min: b.x_min.max(x0).min(x1),
        y_min: b.y_min.max(y0).min(y1),
        x_max: b.x_max.min(x1).max(x0),
        y_max: b.y_max.min(y1).max(y0),
        ..*b
    };
    if !clipped.is_proper() {
        return None;
    }
    if clipped.area() < min_area_frac * original {
        return None;
    }
    Some(clipped)
}

pub fn box_convert_to_center<T: Scalar>(b: &BoundingBox<T>) -> CenterBox<T> {
    let w = b.x_max - b.x_min;
    let h = b.y_max - b.y_min;
    CenterBox { cx: b.x_min + w * T::half(), cy: b.y_min + h * T::half(), w, h }
}

pub fn box_convert_to_corner<T: Scalar>(c: &CenterBox<T>, class_id: u32) -> BoundingBox<T> {
    let hw = c.w * T::half();
    let hh = c.h * T::half();
    BoundingBox::new(c.cx - hw, c.cy - hh, c.cx + hw, c.cy + hh, class_id)
}

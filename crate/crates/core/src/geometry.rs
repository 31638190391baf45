//! Axis-aligned boxes in continuous scene coordinates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box {0:?} has non-positive width or height")]
    Degenerate(BBox),
    #[error("offsets {0:?} are not finite")]
    NonFinite(Offsets),
}

/// Corner-encoded box with `x2 >= x1`, `y2 >= y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// RCNN box-regression targets relative to a reference box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offsets {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl Offsets {
    pub const ZERO: Offsets = Offsets {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 >= self.x1 && self.y2 >= self.y1
    }

    pub fn has_positive_size(&self) -> bool {
        self.is_valid() && self.width() > 0.0 && self.height() > 0.0
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        BBox {
            x1,
            y1,
            x2: self.x2.clamp(x1, width.max(x1)),
            y2: self.y2.clamp(y1, height.max(y1)),
        }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn encode_offsets(anchor: &BBox, gt: &BBox) -> Result<Offsets, GeometryError> {
    if !anchor.has_positive_size() {
        return Err(GeometryError::Degenerate(*anchor));
    }
    if !gt.has_positive_size() {
        return Err(GeometryError::Degenerate(*gt));
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (gx, gy) = gt.center();
    Ok(Offsets {
        tx: (gx - ax) / aw,
        ty: (gy - ay) / ah,
        tw: (gt.width() / aw).ln(),
        th: (gt.height() / ah).ln(),
    })
}

/// Inverse of [`encode_offsets`], optionally clipped to a `(width, height)` scene.
pub fn decode_offsets(anchor: &BBox, t: &Offsets, scene: Option<(f64, f64)>) -> Result<BBox, GeometryError> {
    if !anchor.has_positive_size() {
        return Err(GeometryError::Degenerate(*anchor));
    }
    if !t.is_finite() {
        return Err(GeometryError::NonFinite(*t));
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let b = BBox::from_center(ax + t.tx * aw, ay + t.ty * ah, aw * t.tw.exp(), ah * t.th.exp());
    if !b.is_valid() {
        return Err(GeometryError::NonFinite(*t));
    }
    Ok(match scene {
        Some((w, h)) => b.clip(w, h),
        None => b,
    })
}

/// Scales width and height by `factor` about the center, then clips to the scene.
pub fn enlarge(b: &BBox, factor: f64, scene: (f64, f64)) -> BBox {
    assert!(factor > 0.0, "enlarge factor must be positive");
    let (cx, cy) = b.center();
    BBox::from_center(cx, cy, b.width() * factor, b.height() * factor).clip(scene.0, scene.1)
}

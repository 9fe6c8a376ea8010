//! Axis-aligned boxes, ground-truth annotations and scored detections.
//!
//! Boxes are `(x, y, w, h)` with a top-left origin, in pixels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum BoxError {
    #[error("box origin must be non-negative and finite, got ({x}, {y})")]
    Origin { x: f64, y: f64 },
    #[error("box extent must be positive and finite, got {w}x{h}")]
    Extent { w: f64, h: f64 },
    #[error("detection score {0} outside [0, 1]")]
    Score(f64),
    #[error("class id {class_id} out of range for {class_count} classes")]
    ClassRange { class_id: usize, class_count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        if !(x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0) {
            return Err(BoxError::Origin { x, y });
        }
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(BoxError::Extent { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Area of the overlap with `other`; zero when the boxes are disjoint or only touch.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    /// Per-coordinate difference `self - other` as an `(x, y, w, h)` tuple, the form a
    /// box-regression correction takes.
    pub fn delta(&self, other: &BBox) -> [f64; 4] {
        [self.x - other.x, self.y - other.y, self.w - other.w, self.h - other.h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

impl GroundTruth {
    pub fn new(bbox: BBox, class_id: usize) -> Self {
        Self { bbox, class_id }
    }

    /// Checks the class id against a declared class count.
    pub fn check_class(&self, class_count: usize) -> Result<(), BoxError> {
        if self.class_id >= class_count {
            return Err(BoxError::ClassRange {
                class_id: self.class_id,
                class_count,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, score: f64) -> Result<Self, BoxError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(BoxError::Score(score));
        }
        Ok(Self {
            bbox,
            class_id,
            score,
        })
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

//! Shared geometric and tensor domain types.

use std::path::PathBuf;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::image::GrayImage;
use crate::Result;

/// Axis-aligned box in pixel units, stored as top-left corner plus size.
///
/// Coordinates are continuous: interpolation produces sub-pixel boxes, and
/// rounding happens only at image-crop boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Build a box, enforcing the type invariants (`w > 0`, `h > 0`,
    /// all coordinates finite).
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::Data(format!(
                "bounding box has non-finite component: ({x}, {y}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Data(format!(
                "bounding box must have positive size, got w={w}, h={h}"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Box with the same center scaled to `factor` times the size.
    pub fn scaled_about_center(&self, factor: f64) -> Self {
        let (cx, cy) = self.center();
        let w = self.w * factor;
        let h = self.h * factor;
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// True when all components are finite and the size is positive.
    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }
}

/// Intersection-over-union of two boxes; 0 when disjoint, 1 when identical.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.area() + b.area() - inter)
}

/// Euclidean distance between box centers, in pixels.
pub fn center_error(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Named role of a feature tensor as it moves through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    BackboneBlock,
    Concatenated,
    BridgedTemplate,
    BridgedSearch,
    Correlation,
}

/// A `channels x height x width` real tensor with a named role.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub role: Role,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, role: Role) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "feature map must be non-empty, got {c}x{h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature map contains non-finite entries".into()));
        }
        Ok(Self { data, role })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Where a sequence draws its frames from.
#[derive(Debug, Clone)]
pub enum FrameSource {
    /// Image files on disk, loaded on demand.
    Paths(Vec<PathBuf>),
    /// Frames already decoded in memory (synthetic data, tests).
    Memory(Vec<GrayImage>),
}

/// Ordered frames of one video plus optional ground truth and attributes.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub name: String,
    pub frames: FrameSource,
    pub ground_truth: Option<Vec<BoundingBox>>,
    pub attributes: Vec<String>,
}

impl FrameSequence {
    pub fn from_memory(
        name: impl Into<String>,
        frames: Vec<GrayImage>,
        ground_truth: Option<Vec<BoundingBox>>,
    ) -> Result<Self> {
        let seq = Self {
            name: name.into(),
            frames: FrameSource::Memory(frames),
            ground_truth,
            attributes: Vec::new(),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn from_paths(
        name: impl Into<String>,
        paths: Vec<PathBuf>,
        ground_truth: Option<Vec<BoundingBox>>,
    ) -> Result<Self> {
        let seq = Self {
            name: name.into(),
            frames: FrameSource::Paths(paths),
            ground_truth,
            attributes: Vec::new(),
        };
        seq.validate()?;
        Ok(seq)
    }

    fn validate(&self) -> Result<()> {
        if self.len() == 0 {
            return Err(Error::Data(format!(
                "sequence '{}' has no frames",
                self.name
            )));
        }
        if let Some(gt) = &self.ground_truth {
            if gt.len() != self.len() {
                return Err(Error::Data(format!(
                    "sequence '{}': {} ground-truth boxes for {} frames",
                    self.name,
                    gt.len(),
                    self.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        match &self.frames {
            FrameSource::Paths(p) => p.len(),
            FrameSource::Memory(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Load (or fetch) frame `index` as grayscale.
    pub fn frame(&self, index: usize) -> Result<GrayImage> {
        match &self.frames {
            FrameSource::Paths(p) => {
                let path = p.get(index).ok_or_else(|| {
                    Error::Range(format!(
                        "frame index {index} out of range for '{}' ({} frames)",
                        self.name,
                        p.len()
                    ))
                })?;
                GrayImage::load(path)
            }
            FrameSource::Memory(m) => m.get(index).cloned().ok_or_else(|| {
                Error::Range(format!(
                    "frame index {index} out of range for '{}' ({} frames)",
                    self.name,
                    m.len()
                ))
            }),
        }
    }
}

/// Per-frame origin of a box inside a [`BoxTrack`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameProvenance {
    /// Chosen by the dynamic-programming linker.
    Selected,
    /// Filled in by linear interpolation between selected frames.
    Interpolated,
    /// No box for this frame.
    Missing,
}

/// Per-frame boxes produced by object discovery, with provenance tags.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxTrack {
    pub boxes: Vec<Option<BoundingBox>>,
    pub provenance: Vec<FrameProvenance>,
}

impl BoxTrack {
    pub fn new(boxes: Vec<Option<BoundingBox>>, provenance: Vec<FrameProvenance>) -> Result<Self> {
        if boxes.len() != provenance.len() {
            return Err(Error::Data(format!(
                "box track length mismatch: {} boxes vs {} provenance tags",
                boxes.len(),
                provenance.len()
            )));
        }
        for (i, (b, p)) in boxes.iter().zip(&provenance).enumerate() {
            match (b, p) {
                (Some(_), FrameProvenance::Missing) => {
                    return Err(Error::Data(format!(
                        "frame {i} tagged missing but carries a box"
                    )))
                }
                (None, FrameProvenance::Selected | FrameProvenance::Interpolated) => {
                    return Err(Error::Data(format!(
                        "frame {i} tagged {p:?} but carries no box"
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { boxes, provenance })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Indices of frames tagged `Selected`.
    pub fn selected_frames(&self) -> Vec<usize> {
        self.provenance
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == FrameProvenance::Selected)
            .map(|(i, _)| i)
            .collect()
    }
}

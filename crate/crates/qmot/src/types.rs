//! Shared domain types: predictions, ground-truth annotations, raw frames.

use crate::geom::BoundingBox;
use crate::{Error, Result};

/// One per-query output of the model: class distribution plus a box.
/// Class index 0 is background; `score` is the best non-background
/// probability.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub class_probs: Vec<f64>,
    pub box_: BoundingBox,
}

impl Prediction {
    pub fn new(class_probs: Vec<f64>, box_: BoundingBox) -> Result<Self> {
        let sum: f64 = class_probs.iter().sum();
        if class_probs.len() < 2 {
            return Err(Error::Invalid(
                "class_probs needs background plus at least one class".into(),
            ));
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "class probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Prediction { class_probs, box_ })
    }

    /// Max probability over non-background classes.
    pub fn score(&self) -> f64 {
        self.class_probs[1..].iter().cloned().fold(0.0, f64::max)
    }

    /// Argmax over non-background classes (1-based class id).
    pub fn best_class(&self) -> usize {
        let mut best = 1;
        for (i, p) in self.class_probs.iter().enumerate().skip(1) {
            if *p > self.class_probs[best] {
                best = i;
            }
        }
        best
    }
}

/// One annotated object in one frame.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GtEntry {
    pub track_id: u64,
    pub class_id: usize,
    pub box_: BoundingBox,
    pub visible: bool,
}

/// Ground truth for a single frame. Track ids are unique within a frame.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct FrameAnnotations {
    pub frame_index: usize,
    pub entries: Vec<GtEntry>,
}

impl FrameAnnotations {
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u64> = self.entries.iter().map(|e| e.track_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.entries.len() {
            return Err(Error::Invalid(format!(
                "duplicate track ids in frame {}",
                self.frame_index
            )));
        }
        Ok(())
    }

    /// Entries that are visible in this frame.
    pub fn visible(&self) -> impl Iterator<Item = &GtEntry> {
        self.entries.iter().filter(|e| e.visible)
    }
}

/// Raw RGB frame, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Frame {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// One annotated video: frames plus per-frame ground truth.
#[derive(Debug, Clone)]
pub struct VideoItem {
    pub frames: Vec<Frame>,
    pub annotations: Vec<FrameAnnotations>,
}

/// A split of annotated videos.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub items: Vec<VideoItem>,
    pub split: String,
}

//! Detections and the detection-sequence JSON format.
//!
//! A sequence file is an array of frames; each frame is an array of
//! `{frame, x, y, confidence, embedding, gt_id?}` records.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed object instance in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "DetectionRecord", into = "DetectionRecord")]
pub struct Detection {
    pub frame: usize,
    pub position: [f64; 2],
    pub confidence: f64,
    pub embedding: Vec<f64>,
    pub gt_id: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    frame: usize,
    x: f64,
    y: f64,
    confidence: f64,
    embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_id: Option<u32>,
}

impl From<DetectionRecord> for Detection {
    fn from(r: DetectionRecord) -> Self {
        Detection {
            frame: r.frame,
            position: [r.x, r.y],
            confidence: r.confidence,
            embedding: r.embedding,
            gt_id: r.gt_id,
        }
    }
}

impl From<Detection> for DetectionRecord {
    fn from(d: Detection) -> Self {
        DetectionRecord {
            frame: d.frame,
            x: d.position[0],
            y: d.position[1],
            confidence: d.confidence,
            embedding: d.embedding,
            gt_id: d.gt_id,
        }
    }
}

impl Detection {
    pub fn new(frame: usize, position: [f64; 2], embedding: Vec<f64>) -> Self {
        Detection {
            frame,
            position,
            confidence: 1.0,
            embedding,
            gt_id: None,
        }
    }

    pub fn with_gt(mut self, id: u32) -> Self {
        self.gt_id = Some(id);
        self
    }
}

/// Reference to a detection by frame index and index within that frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DetRef {
    pub frame: usize,
    pub index: usize,
}

/// Checks the per-sequence invariants: confidences in [0,1], one embedding
/// dimension, frame fields matching their slot.
pub fn validate_sequence(frames: &[Vec<Detection>]) -> Result<()> {
    let mut dim = None;
    for (t, frame) in frames.iter().enumerate() {
        for d in frame {
            if d.frame != t {
                return Err(Error::InvalidConfig(format!(
                    "detection tagged frame {} stored in slot {}",
                    d.frame, t
                )));
            }
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(Error::InvalidConfig(format!(
                    "confidence {} outside [0,1]",
                    d.confidence
                )));
            }
            match dim {
                None => dim = Some(d.embedding.len()),
                Some(k) if k != d.embedding.len() => {
                    return Err(Error::DimensionMismatch {
                        expected: k,
                        got: d.embedding.len(),
                    })
                }
                _ => {}
            }
        }
    }
    Ok(())
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<Vec<Vec<Detection>>> {
    let text = std::fs::read_to_string(path)?;
    let frames: Vec<Vec<Detection>> = serde_json::from_str(&text)?;
    validate_sequence(&frames)?;
    Ok(frames)
}

pub fn write_sequence(path: impl AsRef<Path>, frames: &[Vec<Detection>]) -> Result<()> {
    let text = serde_json::to_string_pretty(frames)?;
    std::fs::write(path, text)?;
    Ok(())
}

//! Decoding head outputs into scored boxes.

use serde::{Deserialize, Serialize};

use super::grid::decode_box;
use super::model::DetectorModel;
use super::scene::Frame;
use crate::eval::{iou, BBox, Detection};
use crate::mining::SCALE_COUNT;
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Cells below this objectness are not decoded.
    pub min_confidence: f64,
    /// Greedy NMS suppresses boxes overlapping a kept one by more than this.
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            min_confidence: 0.001,
            nms_iou: 0.5,
            max_detections: 10,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::config(format!("min_confidence {} outside [0, 1]", self.min_confidence)));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::config(format!("nms_iou {} outside [0, 1]", self.nms_iou)));
        }
        if self.max_detections == 0 {
            return Err(Error::config("max_detections must be at least 1"));
        }
        Ok(())
    }
}

/// Detections for one frame, most confident first.
pub fn detect<T: Scalar>(model: &DetectorModel<T>, frame: &Frame, cfg: &InferenceConfig) -> Result<Vec<Detection<T>>> {
    cfg.validate()?;
    let grid = model.grid();
    if frame.size != grid.image_size {
        return Err(Error::structural(format!(
            "frame {} is {} px, model expects {} px",
            frame.id, frame.size, grid.image_size
        )));
    }
    let pass = model.forward(&DetectorModel::<T>::input_from_pixels(&frame.pixels))?;
    let side = T::from_usize(grid.image_size).unwrap();
    let floor = T::of(cfg.min_confidence);

    let mut candidates = Vec::new();
    for s in 0..SCALE_COUNT {
        let head = &pass.heads[s];
        for c in 0..head.cells() {
            let confidence = head.objectness(c);
            if confidence < floor {
                continue;
            }
            let raw = decode_box(&head.offsets(c), c, head.side, grid.stride(s));
            let clipped = BBox {
                x1: raw.x1.max(T::zero()),
                y1: raw.y1.max(T::zero()),
                x2: raw.x2.min(side),
                y2: raw.y2.min(side),
            };
            if clipped.validate().is_ok() {
                candidates.push(Detection { frame: frame.id, bbox: clipped, confidence });
            }
        }
    }
    // stable: equal scores keep fine-to-coarse, row-major order
    candidates.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).expect("finite confidence"));

    let nms = T::of(cfg.nms_iou);
    let mut kept: Vec<Detection<T>> = Vec::new();
    for cand in candidates {
        if kept.len() == cfg.max_detections {
            break;
        }
        let mut suppressed = false;
        for k in &kept {
            if iou(&k.bbox, &cand.bbox)? > nms {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(cand);
        }
    }
    Ok(kept)
}

/// Runs [`detect`] on every frame, in frame order.
pub fn detect_all<T: Scalar>(
    model: &DetectorModel<T>,
    frames: &[Frame],
    cfg: &InferenceConfig,
) -> Result<Vec<Detection<T>>> {
    let mut out = Vec::new();
    for f in frames {
        out.extend(detect(model, f, cfg)?);
    }
    Ok(out)
}

use serde::Serialize;

use super::boxes::iou;
use super::outcome::{classify_frames, group_by_frame, Detection, FrameOutcome, GroundTruth, Thresholds, Verdict};
use crate::{Result, Scalar};

/// IoU thresholds 0.50, 0.55, ..., 0.95, each the correctly rounded value
/// of `(50 + 5i) / 100`.
pub fn coco_thresholds<T: Scalar>() -> [T; 10] {
    std::array::from_fn(|i| T::of((50 + 5 * i) as f64 / 100.0))
}

/// Frame-level precision `TP / (TP + FP)` and recall `TP / (TP + FN)`.
/// A ratio with an empty denominator is `None`.
pub fn precision_recall<T: Scalar>(outcomes: &[FrameOutcome]) -> (Option<T>, Option<T>) {
    let count = |v: Verdict| outcomes.iter().filter(|o| o.verdict == v).count();
    let (tp, fp, fn_) = (count(Verdict::Tp), count(Verdict::Fp), count(Verdict::Fn));
    let ratio = |num: usize, den: usize| {
        (den > 0).then(|| T::from_usize(num).unwrap() / T::from_usize(den).unwrap())
    };
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

/// Single-class average precision at one IoU threshold.
///
/// Detections are ranked by descending confidence (input order breaks
/// ties) and greedily matched: a detection is a hit when its frame's box is
/// still unmatched and `IoU >= iou_thr`. AP is the area under the
/// all-points interpolated precision/recall curve. Returns `None` when no
/// frame holds a ground-truth box.
pub fn average_precision<T: Scalar>(
    dets: &[Detection<T>],
    gts: &[GroundTruth<T>],
    iou_thr: T,
) -> Result<Option<T>> {
    // validates boxes, confidences and frame ids
    group_by_frame(dets, gts)?;
    let positives = gts.iter().filter(|g| g.bbox.is_some()).count();
    if positives == 0 {
        return Ok(None);
    }

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .expect("confidences validated")
    });

    let mut matched = std::collections::BTreeSet::new();
    let gt_of: std::collections::BTreeMap<u64, _> = gts.iter().map(|g| (g.frame, g.bbox)).collect();
    let mut hits = Vec::with_capacity(dets.len());
    for &i in &order {
        let d = &dets[i];
        let hit = match gt_of[&d.frame] {
            Some(g) if !matched.contains(&d.frame) && iou(&d.bbox, &g)? >= iou_thr => {
                matched.insert(d.frame);
                true
            }
            _ => false,
        };
        hits.push(hit);
    }
    Ok(Some(area_under_pr(&hits, positives)))
}

/// All-points interpolated area for a ranked hit list.
fn area_under_pr<T: Scalar>(hits: &[bool], positives: usize) -> T {
    let total = T::from_usize(positives).unwrap();
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (rank, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        recall.push(T::from_usize(tp).unwrap() / total);
        precision.push(T::from_usize(tp).unwrap() / T::from_usize(rank + 1).unwrap());
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut area = T::zero();
    let mut prev_recall = T::zero();
    for (r, p) in recall.into_iter().zip(precision) {
        if r > prev_recall {
            area += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    area
}

/// Mean of AP over IoU thresholds 0.50:0.05:0.95.
pub fn map_50_95<T: Scalar>(dets: &[Detection<T>], gts: &[GroundTruth<T>]) -> Result<Option<T>> {
    let mut sum = T::zero();
    for thr in coco_thresholds::<T>() {
        match average_precision(dets, gts, thr)? {
            Some(ap) => sum += ap,
            None => return Ok(None),
        }
    }
    Ok(Some(sum / T::of(10.0)))
}

/// Precision, recall, mAP@0.5 and mAP@0.5:0.95 as fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport<T> {
    pub precision: Option<T>,
    pub recall: Option<T>,
    pub map_50: Option<T>,
    pub map_50_95: Option<T>,
}

impl<T: Scalar> MetricsReport<T> {
    pub fn compute(
        dets: &[Detection<T>],
        gts: &[GroundTruth<T>],
        thresholds: &Thresholds<T>,
    ) -> Result<Self> {
        let outcomes = classify_frames(dets, gts, thresholds)?;
        let (precision, recall) = precision_recall(&outcomes);
        Ok(Self {
            precision,
            recall,
            map_50: average_precision(dets, gts, T::of(0.5))?,
            map_50_95: map_50_95(dets, gts)?,
        })
    }

    /// The four metrics as percentages, in column order.
    pub fn percentages(&self) -> [Option<f64>; 4] {
        [self.precision, self.recall, self.map_50, self.map_50_95]
            .map(|v| v.map(|x| 100.0 * x.as_f64()))
    }
}

//! Frame verdicts and the pairwise comparison of two methods.
//!
//! A frame is judged by its single most confident detection. Two methods
//! are compared by pairing their verdicts frame by frame; the off-diagonal
//! pairs (FN-TP, FP-TN against TP-FN, TN-FP) measure which method handles
//! the examples the other one misses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::boxes::{iou, BBox};
use crate::{Error, Result, Scalar};

/// A scored box predicted for one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Detection<T> {
    pub frame: u64,
    #[serde(rename = "box")]
    pub bbox: BBox<T>,
    pub confidence: T,
}

impl<T: Scalar> Detection<T> {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(self.confidence >= T::zero() && self.confidence <= T::one()) {
            return Err(Error::domain(format!(
                "frame {}: confidence {} outside [0, 1]",
                self.frame, self.confidence
            )));
        }
        Ok(())
    }
}

/// The reference box of a frame, if the frame contains a target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct GroundTruth<T> {
    pub frame: u64,
    #[serde(rename = "box")]
    pub bbox: Option<BBox<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "TP")]
    Tp,
    #[serde(rename = "FP")]
    Fp,
    #[serde(rename = "TN")]
    Tn,
    #[serde(rename = "FN")]
    Fn,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Tp => "TP",
            Verdict::Fp => "FP",
            Verdict::Tn => "TN",
            Verdict::Fn => "FN",
        }
    }

    pub fn is_correct(self) -> bool {
        matches!(self, Verdict::Tp | Verdict::Tn)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameOutcome {
    pub frame: u64,
    pub verdict: Verdict,
}

/// Verdicts of two methods on the same frame, `(M1, M2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutcomePair {
    pub frame: u64,
    pub m1: Verdict,
    pub m2: Verdict,
}

/// Thresholds for frame verdicts. Both comparisons are strict.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds<T> {
    pub confidence: T,
    pub iou: T,
}

impl<T: Scalar> Default for Thresholds<T> {
    fn default() -> Self {
        Self {
            confidence: T::of(0.5),
            iou: T::of(0.5),
        }
    }
}

/// Verdict for one frame from its detections and optional ground truth.
///
/// Only the most confident detection counts (earliest one on ties). A
/// detection above the confidence threshold is a TP when it overlaps the
/// ground truth by more than the IoU threshold and an FP otherwise. With no
/// confident detection the frame is an FN if it holds a target, else a TN.
pub fn classify_frame<T: Scalar>(
    dets: &[Detection<T>],
    gt: Option<&BBox<T>>,
    thresholds: &Thresholds<T>,
) -> Result<Verdict> {
    let mut best: Option<&Detection<T>> = None;
    for d in dets {
        if best.is_none_or(|b| d.confidence > b.confidence) {
            best = Some(d);
        }
    }
    let confident = best.filter(|d| d.confidence > thresholds.confidence);
    Ok(match (confident, gt) {
        (Some(d), Some(g)) if iou(&d.bbox, g)? > thresholds.iou => Verdict::Tp,
        (Some(_), _) => Verdict::Fp,
        (None, Some(_)) => Verdict::Fn,
        (None, None) => Verdict::Tn,
    })
}

/// Detections grouped by frame; every detection must name a known frame.
pub(crate) fn group_by_frame<T: Scalar>(
    dets: &[Detection<T>],
    gts: &[GroundTruth<T>],
) -> Result<BTreeMap<u64, Vec<Detection<T>>>> {
    let mut by_frame: BTreeMap<u64, Vec<Detection<T>>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for g in gts {
        if !seen.insert(g.frame) {
            return Err(Error::structural(format!("duplicate ground truth for frame {}", g.frame)));
        }
        if let Some(b) = &g.bbox {
            b.validate()?;
        }
        by_frame.insert(g.frame, Vec::new());
    }
    for d in dets {
        d.validate()?;
        match by_frame.get_mut(&d.frame) {
            Some(list) => list.push(*d),
            None => {
                return Err(Error::structural(format!(
                    "detection for frame {} which has no ground-truth record",
                    d.frame
                )))
            }
        }
    }
    Ok(by_frame)
}

/// One verdict per ground-truth frame, ordered by frame id.
pub fn classify_frames<T: Scalar>(
    dets: &[Detection<T>],
    gts: &[GroundTruth<T>],
    thresholds: &Thresholds<T>,
) -> Result<Vec<FrameOutcome>> {
    let by_frame = group_by_frame(dets, gts)?;
    let gt_of: BTreeMap<u64, Option<BBox<T>>> = gts.iter().map(|g| (g.frame, g.bbox)).collect();
    by_frame
        .iter()
        .map(|(&frame, frame_dets)| {
            let verdict = classify_frame(frame_dets, gt_of[&frame].as_ref(), thresholds)?;
            Ok(FrameOutcome { frame, verdict })
        })
        .collect()
}

/// Pairs the verdicts of two methods frame by frame.
pub fn pair_outcomes(m1: &[FrameOutcome], m2: &[FrameOutcome]) -> Result<Vec<OutcomePair>> {
    let index = |outcomes: &[FrameOutcome], name: &str| -> Result<BTreeMap<u64, Verdict>> {
        let mut map = BTreeMap::new();
        for o in outcomes {
            if map.insert(o.frame, o.verdict).is_some() {
                return Err(Error::structural(format!("{name} has two verdicts for frame {}", o.frame)));
            }
        }
        Ok(map)
    };
    let a = index(m1, "M1")?;
    let b = index(m2, "M2")?;
    let only_a: Vec<u64> = a.keys().filter(|k| !b.contains_key(k)).copied().collect();
    let only_b: Vec<u64> = b.keys().filter(|k| !a.contains_key(k)).copied().collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(Error::structural(format!(
            "frame sets differ: only in M1 {}, only in M2 {}",
            preview(&only_a),
            preview(&only_b)
        )));
    }
    Ok(a.iter()
        .map(|(&frame, &v1)| OutcomePair { frame, m1: v1, m2: b[&frame] })
        .collect())
}

fn preview(ids: &[u64]) -> String {
    const SHOWN: usize = 10;
    let mut s = format!("{:?}", &ids[..ids.len().min(SHOWN)]);
    if ids.len() > SHOWN {
        s.push_str(&format!(" (+{} more)", ids.len() - SHOWN));
    }
    s
}

/// Rows reported by the pairwise table, in table order.
pub const TABLE_ROWS: [(Verdict, Verdict); 7] = [
    (Verdict::Fn, Verdict::Tp),
    (Verdict::Fp, Verdict::Tn),
    (Verdict::Tp, Verdict::Fn),
    (Verdict::Tn, Verdict::Fp),
    (Verdict::Fp, Verdict::Fp),
    (Verdict::Fn, Verdict::Fn),
    (Verdict::Tp, Verdict::Tp),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PairRow {
    pub m1: Verdict,
    pub m2: Verdict,
    pub count: u64,
    /// Percentage of all pairs in hundredths of a percent, rounded half up.
    pub hundredths: u64,
    /// False for combinations outside the seven table rows (TN-TN and any
    /// residual pairing such as TP-FP).
    pub in_table: bool,
}

impl PairRow {
    pub fn percent(&self) -> f64 {
        self.hundredths as f64 / 100.0
    }
}

/// Counts and percentages of every verdict pairing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PairwiseReport {
    /// The seven table rows first (always present, possibly zero), then any
    /// other combination that occurred, in verdict order.
    pub rows: Vec<PairRow>,
    pub total: u64,
    /// `(FN->TP + FP->TN) - (TP->FN + TN->FP)`: frames M2 fixed minus frames
    /// M2 broke.
    pub net_delta: i64,
}

/// `100 * count / total` in hundredths, rounded half up, in exact integer
/// arithmetic.
pub fn percent_hundredths(count: u64, total: u64) -> u64 {
    assert!(total > 0, "percentage of an empty total");
    let num = 20_000u128 * count as u128 + total as u128;
    (num / (2 * total as u128)) as u64
}

impl PairwiseReport {
    /// Report from pre-tallied counts; repeated combinations are summed.
    pub fn from_counts(counts: &[(Verdict, Verdict, u64)]) -> Result<Self> {
        let mut tally: BTreeMap<(Verdict, Verdict), u64> = BTreeMap::new();
        for &(a, b, n) in counts {
            *tally.entry((a, b)).or_default() += n;
        }
        let total: u64 = tally.values().sum();
        if total == 0 {
            return Err(Error::structural("pairwise report needs at least one pair"));
        }
        let row = |(m1, m2): (Verdict, Verdict), count: u64, in_table: bool| PairRow {
            m1,
            m2,
            count,
            hundredths: percent_hundredths(count, total),
            in_table,
        };
        let mut rows: Vec<PairRow> = TABLE_ROWS
            .iter()
            .map(|&key| row(key, tally.get(&key).copied().unwrap_or(0), true))
            .collect();
        rows.extend(
            tally
                .iter()
                .filter(|(key, &n)| n > 0 && !TABLE_ROWS.contains(key))
                .map(|(&key, &n)| row(key, n, false)),
        );
        let get = |a, b| tally.get(&(a, b)).copied().unwrap_or(0) as i64;
        use Verdict::*;
        let net_delta = get(Fn, Tp) + get(Fp, Tn) - get(Tp, Fn) - get(Tn, Fp);
        Ok(Self { rows, total, net_delta })
    }

    pub fn count(&self, m1: Verdict, m2: Verdict) -> u64 {
        self.rows
            .iter()
            .find(|r| r.m1 == m1 && r.m2 == m2)
            .map_or(0, |r| r.count)
    }

    pub fn row(&self, m1: Verdict, m2: Verdict) -> Option<&PairRow> {
        self.rows.iter().find(|r| r.m1 == m1 && r.m2 == m2)
    }

    /// Net delta as a percentage of all pairs.
    pub fn net_delta_percent(&self) -> f64 {
        100.0 * self.net_delta as f64 / self.total as f64
    }
}

/// Tallies verdict pairings into a report.
pub fn pairwise_report(pairs: &[OutcomePair]) -> Result<PairwiseReport> {
    if pairs.is_empty() {
        return Err(Error::structural("pairwise report needs at least one pair"));
    }
    let counts: Vec<(Verdict, Verdict, u64)> = pairs.iter().map(|p| (p.m1, p.m2, 1)).collect();
    PairwiseReport::from_counts(&counts)
}

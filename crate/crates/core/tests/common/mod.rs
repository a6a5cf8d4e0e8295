#![allow(dead_code)]

use std::path::Path;

use hardmine::eval::io::write_jsonl;
use hardmine::{BBox, Detection, GroundTruth, OutcomePair, Verdict};

use Verdict::{Fn, Fp, Tn, Tp};

/// Reference pairwise tables: frame counts and printed percentages in row
/// order FN-TP, FP-TN, TP-FN, TN-FP, FP-FP, FN-FN, TP-TP.
pub struct ReferenceTable {
    pub name: &'static str,
    pub counts: [u64; 7],
    pub total: u64,
    pub percent: [f64; 7],
}

pub const ROWS: [(Verdict, Verdict); 7] = [(Fn, Tp), (Fp, Tn), (Tp, Fn), (Tn, Fp), (Fp, Fp), (Fn, Fn), (Tp, Tp)];

pub const TABLES: [ReferenceTable; 6] = [
    ReferenceTable {
        name: "reference 1",
        counts: [9, 17, 122, 7, 4, 215, 1140],
        total: 1514,
        percent: [0.59, 1.12, 8.06, 0.46, 0.26, 14.20, 75.30],
    },
    ReferenceTable {
        name: "reference 2",
        counts: [63, 14, 12, 16, 7, 161, 1250],
        total: 1523,
        percent: [4.14, 0.92, 0.79, 1.05, 0.46, 10.57, 82.07],
    },
    ReferenceTable {
        name: "reference 3",
        counts: [75, 14, 5, 16, 7, 149, 1257],
        total: 1523,
        percent: [4.92, 0.92, 0.33, 1.05, 0.46, 9.78, 82.53],
    },
    ReferenceTable {
        name: "reference 4",
        counts: [83, 16, 9, 9, 5, 141, 1253],
        total: 1516,
        percent: [5.47, 1.06, 0.59, 0.59, 0.33, 9.30, 82.65],
    },
    ReferenceTable {
        name: "reference 5",
        counts: [23, 17, 19, 8, 6, 131, 1313],
        total: 1517,
        percent: [1.52, 1.12, 1.25, 0.53, 0.40, 8.64, 86.55],
    },
    ReferenceTable {
        name: "reference 6",
        counts: [34, 15, 11, 6, 8, 139, 1302],
        total: 1515,
        percent: [2.24, 0.99, 0.73, 0.40, 0.53, 9.17, 85.94],
    },
];

pub fn pairs_from_counts(counts: &[u64; 7]) -> Vec<OutcomePair> {
    let mut pairs = Vec::new();
    for (&(m1, m2), &n) in ROWS.iter().zip(counts) {
        for _ in 0..n {
            pairs.push(OutcomePair { frame: pairs.len() as u64, m1, m2 });
        }
    }
    pairs
}

const TARGET: [f64; 4] = [10.0, 10.0, 20.0, 20.0];
const ELSEWHERE: [f64; 4] = [40.0, 40.0, 50.0, 50.0];

fn detection_for(frame: u64, verdict: Verdict) -> Option<Detection<f64>> {
    let bbox = match verdict {
        Tp => TARGET,
        Fp => ELSEWHERE,
        Tn | Fn => return None,
    };
    Some(Detection { frame, bbox: BBox::from(bbox), confidence: 0.9 })
}

/// Ground truth and two detection files whose frame verdicts reproduce
/// `counts`.
pub fn write_table_fixture(dir: &Path, counts: &[u64; 7]) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let mut gts = Vec::new();
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    for p in pairs_from_counts(counts) {
        let has_target = [p.m1, p.m2].iter().any(|v| matches!(v, Tp | Fn));
        gts.push(GroundTruth { frame: p.frame, bbox: has_target.then(|| BBox::from(TARGET)) });
        d1.extend(detection_for(p.frame, p.m1));
        d2.extend(detection_for(p.frame, p.m2));
    }
    let paths = (dir.join("gt.jsonl"), dir.join("m1.jsonl"), dir.join("m2.jsonl"));
    write_jsonl(&paths.0, &gts).unwrap();
    write_jsonl(&paths.1, &d1).unwrap();
    write_jsonl(&paths.2, &d2).unwrap();
    paths
}

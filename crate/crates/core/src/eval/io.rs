//! JSON-lines record files and CSV / plain-text report rendering.
//!
//! Detections: `{"frame": 3, "box": [x1, y1, x2, y2], "confidence": 0.91}`
//! Ground truth: `{"frame": 3, "box": [x1, y1, x2, y2]}` or `{"frame": 4, "box": null}`

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::metrics::MetricsReport;
use super::outcome::{Detection, GroundTruth, PairwiseReport};
use crate::{Error, Result, Scalar};

pub fn read_jsonl<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::data(path, format!("line {}: {e}", n + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::data(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection<f64>>> {
    let dets: Vec<Detection<f64>> = read_jsonl(path)?;
    for d in &dets {
        d.validate().map_err(|e| Error::data(path, e.to_string()))?;
    }
    Ok(dets)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth<f64>>> {
    let gts: Vec<GroundTruth<f64>> = read_jsonl(path)?;
    for g in &gts {
        if let Some(b) = &g.bbox {
            b.validate().map_err(|e| Error::data(path, format!("frame {}: {e}", g.frame)))?;
        }
    }
    Ok(gts)
}

pub fn pairwise_csv(report: &PairwiseReport) -> String {
    let mut s = String::from("m1,m2,frames,percent,in_table\n");
    for r in &report.rows {
        let _ = writeln!(s, "{},{},{},{:.2},{}", r.m1, r.m2, r.count, r.percent(), r.in_table);
    }
    let _ = writeln!(s, "total,,{},100.00,", report.total);
    let _ = writeln!(s, "net_delta,,{},{:.2},", report.net_delta, report.net_delta_percent());
    s
}

pub fn pairwise_table(report: &PairwiseReport, m1: &str, m2: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "M1: {m1}, M2: {m2}");
    let _ = writeln!(s, "| M1 | M2 | # Fr. | Fr. % |");
    let _ = writeln!(s, "|----|----|-------|-------|");
    let mut printed_other = false;
    for r in &report.rows {
        if !r.in_table && !printed_other {
            let _ = writeln!(s, "| other pairings                |");
            printed_other = true;
        }
        let _ = writeln!(s, "| {} | {} | {:>5} | {:>5.2} |", r.m1, r.m2, r.count, r.percent());
    }
    let _ = writeln!(s, "total pairs: {}", report.total);
    let _ = writeln!(
        s,
        "net hard-example delta (M2 gains - losses): {:+} ({:+.2}%)",
        report.net_delta,
        report.net_delta_percent()
    );
    s
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.1}"))
}

pub fn metrics_csv<T: Scalar>(rows: &[(&str, MetricsReport<T>)]) -> String {
    let mut s = String::from("method,precision,recall,map_50,map_50_95\n");
    for (name, m) in rows {
        let [p, r, a, b] = m.percentages().map(fmt_pct);
        let _ = writeln!(s, "{name},{p},{r},{a},{b}");
    }
    s
}

pub fn metrics_table<T: Scalar>(rows: &[(&str, MetricsReport<T>)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut s = String::new();
    let _ = writeln!(s, "| {:<width$} | Prec. |  Rec. | mAP0.5 | mAP0.5:0.95 |", "Method");
    let _ = writeln!(s, "|{}|-------|-------|--------|-------------|", "-".repeat(width + 2));
    for (name, m) in rows {
        let [p, r, a, b] = m.percentages().map(fmt_pct);
        let _ = writeln!(s, "| {name:<width$} | {p:>5} | {r:>5} | {a:>6} | {b:>11} |");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{BBox, Verdict};

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.jsonl");
        let dets = vec![
            Detection { frame: 1, bbox: BBox::new(1.0, 2.0, 3.0, 4.0).unwrap(), confidence: 0.5 },
            Detection { frame: 2, bbox: BBox::new(0.0, 0.0, 8.5, 8.0).unwrap(), confidence: 0.25 },
        ];
        write_jsonl(&path, &dets).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"frame":1,"box":[1.0,2.0,3.0,4.0],"confidence":0.5}"#));
        assert_eq!(read_detections(&path).unwrap(), dets);
    }

    #[test]
    fn ground_truth_accepts_null_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.jsonl");
        fs::write(&path, "{\"frame\":0,\"box\":null}\n\n{\"frame\":1,\"box\":[0,0,4,4]}\n").unwrap();
        let gts = read_ground_truth(&path).unwrap();
        assert_eq!(gts.len(), 2);
        assert!(gts[0].bbox.is_none());
        assert_eq!(gts[1].bbox.unwrap().x2, 4.0);
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"frame\":0,\"box\":null}\n{\"frame\":\"x\"}\n").unwrap();
        let err = read_ground_truth(&path).unwrap_err();
        assert!(matches!(err, Error::Data { ref detail, .. } if detail.contains("line 2")));
        fs::write(&path, "{\"frame\":0,\"box\":[0,0,0,4]}\n").unwrap();
        assert!(matches!(read_ground_truth(&path), Err(Error::Data { .. })));
    }

    #[test]
    fn table_layout() {
        use Verdict::*;
        let report = PairwiseReport::from_counts(&[(Fn, Tp, 1), (Tp, Tp, 3)]).unwrap();
        let table = pairwise_table(&report, "a", "b");
        assert!(table.contains("| FN | TP |     1 | 25.00 |"));
        assert!(table.contains("net hard-example delta (M2 gains - losses): +1 (+25.00%)"));
        let csv = pairwise_csv(&report);
        assert!(csv.lines().any(|l| l == "TP,TP,3,75.00,true"));
    }
}

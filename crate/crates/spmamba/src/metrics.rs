//! Detection evaluation: greedy matching, precision/recall, average precision
//! and mAP, plus the CSV formats the tools read and write.
//!
//! Everything here is exact arithmetic over the detections it is given. AP
//! uses the all-point method: sweep a confidence threshold over every distinct
//! score, take the monotone precision envelope, and integrate it over recall.
//! There is no 11-point or 101-point sampling, so numbers from small inputs
//! can be checked by hand.
//!
//! Conventions that the underlying math leaves open, fixed here:
//! * precision and recall are 0 when their denominator is 0;
//! * matching is greedy in confidence order (ties broken by ingest order),
//!   each detection taking the unmatched ground truth of highest IoU at or
//!   above the threshold (ties broken by lowest ground-truth index);
//! * classes with no ground truth are excluded from the mAP average.

use std::io::Write;

use crate::error::{Error, Result};

/// Axis-aligned box in absolute pixel coordinates, `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        for v in [x1, y1, x2, y2] {
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "box coordinate is not finite: ({x1}, {y1}, {x2}, {y2})"
                )));
            }
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::Data(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2}): need x2 > x1 and y2 > y1"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Intersection over union of two valid boxes. 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(image_id: usize, class_id: usize, bbox: BBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Data(format!(
                "detection confidence {score} outside [0, 1]"
            )));
        }
        Ok(Self { image_id, class_id, bbox, score })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// One point of a precision/recall sweep: the measured precision and recall
/// with the confidence threshold that produced them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub confidence: f64,
}

/// Precision/recall curve for one class at one IoU threshold. Points are in
/// sweep order (threshold descending), so recall never decreases.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub class_id: usize,
    pub iou_thresh: f64,
    pub points: Vec<PrPoint>,
}

/// Result of greedy matching within one (image, class) group. `tp[i]` refers
/// to the i-th detection in the order they were passed in.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub tp: Vec<bool>,
    pub false_negatives: usize,
}

/// Greedy matcher for a single (image, class) group. Detections are visited
/// in confidence order, highest first, ties by ingest order; each takes the
/// unmatched ground truth of highest IoU if that IoU reaches `iou_thresh`
/// (ties: lowest ground-truth index). Every ground truth matches at most one
/// detection; the leftovers are false negatives.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> MatchOutcome {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score));

    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let ov = iou(&dets[di].bbox, &gt.bbox);
            // Strict > keeps the lowest index on ties.
            if best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        if let Some((gi, ov)) = best {
            if ov >= iou_thresh {
                taken[gi] = true;
                tp[di] = true;
            }
        }
    }
    let matched = taken.iter().filter(|&&t| t).count();
    MatchOutcome { tp, false_negatives: gts.len() - matched }
}

/// Precision and recall from raw counts, with 0/0 defined as 0.
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    (p, r)
}

/// All-point average precision for one class at one IoU threshold.
///
/// `scored` pairs each detection's confidence with its matched/unmatched
/// label, across all images; `num_gt` is the total ground-truth count for the
/// class. Returns `None` when `num_gt` is 0: AP is undefined there and the
/// class is excluded from averaging.
///
/// The sweep visits every distinct confidence value from high to low, so tied
/// detections enter together and contribute a single curve point.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> Option<(f64, Vec<PrPoint>)> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&i, &j| scored[j].0.total_cmp(&scored[i].0));

    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut idx = 0usize;
    while idx < order.len() {
        let threshold = scored[order[idx]].0;
        while idx < order.len() && scored[order[idx]].0 == threshold {
            if scored[order[idx]].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        points.push(PrPoint {
            recall: tp as f64 / num_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
            confidence: threshold,
        });
    }

    // Envelope: highest precision achievable at this recall or beyond.
    let mut env = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].precision);
        env[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (pt, &e) in points.iter().zip(&env) {
        ap += (pt.recall - prev_recall) * e;
        prev_recall = pt.recall;
    }
    Some((ap, points))
}

/// The ten IoU thresholds behind mAP@0.5:0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Per-class evaluation summary. `ap50` / `ap` are `None` for classes with no
/// ground truth, which are excluded from the mAP averages.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub num_gt: usize,
    pub num_det: usize,
    /// AP at IoU 0.5.
    pub ap50: Option<f64>,
    /// AP averaged over the 0.50:0.05:0.95 thresholds.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub map50: f64,
    pub map5095: f64,
    pub per_class: Vec<ClassMetrics>,
    /// One curve per evaluated class, at IoU 0.5.
    pub curves: Vec<PrCurve>,
}

/// Full evaluation: greedy matching per (image, class), AP per class and IoU
/// threshold, means across classes and thresholds.
///
/// Errors with `Error::Eval` when no class has any ground truth, and with
/// `Error::Data` when a class id is out of range.
pub fn mean_ap(dets: &[Detection], gts: &[GroundTruth], num_classes: usize) -> Result<MapReport> {
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    for d in dets {
        if d.class_id >= num_classes {
            return Err(Error::Data(format!(
                "detection class id {} out of range (num_classes {num_classes})",
                d.class_id
            )));
        }
    }
    for g in gts {
        if g.class_id >= num_classes {
            return Err(Error::Data(format!(
                "ground-truth class id {} out of range (num_classes {num_classes})",
                g.class_id
            )));
        }
    }
    if gts.is_empty() {
        return Err(Error::Eval(
            "no ground truth for any class; mAP is undefined".into(),
        ));
    }

    let thresholds = map_thresholds();
    let mut per_class = Vec::with_capacity(num_classes);
    let mut curves = Vec::new();
    let mut map50_sum = 0.0;
    let mut map5095_sum = 0.0;
    let mut evaluated = 0usize;

    for class_id in 0..num_classes {
        let class_dets: Vec<&Detection> =
            dets.iter().filter(|d| d.class_id == class_id).collect();
        let class_gts: Vec<&GroundTruth> =
            gts.iter().filter(|g| g.class_id == class_id).collect();
        let num_gt = class_gts.len();

        if num_gt == 0 {
            per_class.push(ClassMetrics {
                class_id,
                num_gt,
                num_det: class_dets.len(),
                ap50: None,
                ap: None,
            });
            continue;
        }

        // Image ids present for this class, in first-seen order so matching
        // is deterministic regardless of id values.
        let mut image_ids: Vec<usize> = Vec::new();
        for d in &class_dets {
            if !image_ids.contains(&d.image_id) {
                image_ids.push(d.image_id);
            }
        }
        for g in &class_gts {
            if !image_ids.contains(&g.image_id) {
                image_ids.push(g.image_id);
            }
        }

        let mut ap50 = 0.0;
        let mut ap_sum = 0.0;
        for (ti, &t) in thresholds.iter().enumerate() {
            let mut scored: Vec<(f64, bool)> = Vec::new();
            for &img in &image_ids {
                let img_dets: Vec<Detection> = class_dets
                    .iter()
                    .filter(|d| d.image_id == img)
                    .map(|d| (*d).clone())
                    .collect();
                let img_gts: Vec<GroundTruth> = class_gts
                    .iter()
                    .filter(|g| g.image_id == img)
                    .map(|g| (*g).clone())
                    .collect();
                let outcome = match_detections(&img_dets, &img_gts, t);
                for (d, &is_tp) in img_dets.iter().zip(&outcome.tp) {
                    scored.push((d.score, is_tp));
                }
            }
            let (ap, points) = average_precision(&scored, num_gt)
                .expect("num_gt > 0 checked above");
            ap_sum += ap;
            if ti == 0 {
                ap50 = ap;
                curves.push(PrCurve { class_id, iou_thresh: t, points });
            }
        }
        let ap_mean = ap_sum / thresholds.len() as f64;
        per_class.push(ClassMetrics {
            class_id,
            num_gt,
            num_det: class_dets.len(),
            ap50: Some(ap50),
            ap: Some(ap_mean),
        });
        map50_sum += ap50;
        map5095_sum += ap_mean;
        evaluated += 1;
    }

    // gts is non-empty, so at least one class was evaluated.
    Ok(MapReport {
        map50: map50_sum / evaluated as f64,
        map5095: map5095_sum / evaluated as f64,
        per_class,
        curves,
    })
}

// ---------------------------------------------------------------------------
// CSV formats
// ---------------------------------------------------------------------------

pub const DETECTIONS_CSV_HEADER: &str = "image_id,class_id,x1,y1,x2,y2,score";
pub const PR_CSV_HEADER: &str = "recall,precision,confidence";
pub const CLASS_METRICS_CSV_HEADER: &str = "class_id,num_gt,num_det,ap50,ap5095";

pub fn write_detections_csv<W: Write>(w: &mut W, dets: &[Detection]) -> Result<()> {
    writeln!(w, "{DETECTIONS_CSV_HEADER}")?;
    for d in dets {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            d.image_id, d.class_id, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.score
        )?;
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    field: &str,
    what: &str,
    file: &str,
    line: usize,
) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        file: file.into(),
        line,
        msg: format!("bad {what}: {field:?}"),
    })
}

/// Parse the detections CSV produced by [`write_detections_csv`]. Rejects a
/// missing or wrong header, short/long rows, unparsable numbers and invalid
/// boxes or scores. Blank lines are allowed and skipped.
pub fn parse_detections_csv(text: &str, file: &str) -> Result<Vec<Detection>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == DETECTIONS_CSV_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse {
                file: file.into(),
                line: 1,
                msg: format!("expected header {DETECTIONS_CSV_HEADER:?}, got {h:?}"),
            })
        }
        None => {
            return Err(Error::Parse {
                file: file.into(),
                line: 1,
                msg: "empty detections file".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let row = raw.trim_end();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                file: file.into(),
                line: line_no,
                msg: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let image_id: usize = parse_field(fields[0], "image id", file, line_no)?;
        let class_id: usize = parse_field(fields[1], "class id", file, line_no)?;
        let x1: f64 = parse_field(fields[2], "x1", file, line_no)?;
        let y1: f64 = parse_field(fields[3], "y1", file, line_no)?;
        let x2: f64 = parse_field(fields[4], "x2", file, line_no)?;
        let y2: f64 = parse_field(fields[5], "y2", file, line_no)?;
        let score: f64 = parse_field(fields[6], "score", file, line_no)?;
        let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| Error::Parse {
            file: file.into(),
            line: line_no,
            msg: e.to_string(),
        })?;
        let det = Detection::new(image_id, class_id, bbox, score).map_err(|e| Error::Parse {
            file: file.into(),
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push(det);
    }
    Ok(out)
}

pub fn write_pr_curve_csv<W: Write>(w: &mut W, curve: &PrCurve) -> Result<()> {
    writeln!(w, "{PR_CSV_HEADER}")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.recall, p.precision, p.confidence)?;
    }
    Ok(())
}

pub fn write_class_metrics_csv<W: Write>(w: &mut W, report: &MapReport) -> Result<()> {
    writeln!(w, "{CLASS_METRICS_CSV_HEADER}")?;
    for c in &report.per_class {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{}",
            c.class_id,
            c.num_gt,
            c.num_det,
            fmt(c.ap50),
            fmt(c.ap)
        )?;
    }
    Ok(())
}

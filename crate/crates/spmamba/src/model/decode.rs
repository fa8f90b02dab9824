//! Turn raw head maps into scored boxes: sigmoid the objectness and class
//! logits, expand the ltrb offsets around each cell center, threshold, then
//! greedy per-class NMS. All plain f64 math, nothing here touches the tape.

use crate::error::Result;
use crate::metrics::{iou, BBox, Detection};
use crate::tensor::ops::sigmoid_scalar;

use super::RawPrediction;

/// Confidence floor when the caller wants boxes a person would look at.
pub const CONF_INFERENCE: f64 = 0.25;
/// Confidence floor for evaluation; mAP wants the whole tail of the ranking.
pub const CONF_EVAL: f64 = 0.001;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// Greedy non-maximum suppression within one class of one image. `order`
/// holds indices into `dets` sorted by descending score; returns the kept
/// subset in that order.
fn nms_group(dets: &[Detection], order: &[usize], iou_thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    'cand: for &i in order {
        for &j in &kept {
            if iou(&dets[j].bbox, &dets[i].bbox) > iou_thresh {
                continue 'cand;
            }
        }
        kept.push(i);
    }
    kept
}

/// Suppress overlapping detections, per image and per class. Input order
/// breaks score ties (earlier wins). Returns survivors sorted by descending
/// score, ties again in input order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry((d.image_id, d.class_id)).or_default().push(i);
    }
    let mut survivors: Vec<usize> = Vec::new();
    for (_, mut order) in groups {
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        survivors.extend(nms_group(dets, &order, iou_thresh));
    }
    survivors.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    survivors.into_iter().map(|i| dets[i].clone()).collect()
}

/// Decode a batch of raw predictions into detections. `image_ids` maps batch
/// slots to stable image identifiers for downstream matching.
pub fn decode(
    pred: &RawPrediction,
    image_ids: &[usize],
    conf_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let nc = pred.num_classes;
    let size = pred.input_size as f64;
    let mut raw: Vec<Detection> = Vec::new();
    for level in &pred.levels {
        let shape = level.map.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let stride = level.stride as f64;
        let data = level.map.data();
        let at = |img: usize, ch: usize, row: usize, col: usize| {
            data[((img * c + ch) * h + row) * w + col]
        };
        for img in 0..n {
            for row in 0..h {
                for col in 0..w {
                    let obj = sigmoid_scalar(at(img, 4, row, col));
                    if obj * 1.0 < conf_thresh {
                        // Even a perfect class score cannot rescue this cell.
                        continue;
                    }
                    let cx = (col as f64 + 0.5) * stride;
                    let cy = (row as f64 + 0.5) * stride;
                    let x1 = (cx - sigmoid_scalar(at(img, 0, row, col)) * 2.0 * stride).clamp(0.0, size);
                    let y1 = (cy - sigmoid_scalar(at(img, 1, row, col)) * 2.0 * stride).clamp(0.0, size);
                    let x2 = (cx + sigmoid_scalar(at(img, 2, row, col)) * 2.0 * stride).clamp(0.0, size);
                    let y2 = (cy + sigmoid_scalar(at(img, 3, row, col)) * 2.0 * stride).clamp(0.0, size);
                    if x2 <= x1 || y2 <= y1 {
                        continue;
                    }
                    let bbox = BBox::new(x1, y1, x2, y2)?;
                    for class_id in 0..nc {
                        let score = obj * sigmoid_scalar(at(img, 5 + class_id, row, col));
                        if score >= conf_thresh {
                            raw.push(Detection::new(image_ids[img], class_id, bbox, score)?);
                        }
                    }
                }
            }
        }
    }
    Ok(nms(&raw, nms_iou))
}

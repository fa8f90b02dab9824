//! Detection loss: IoU box term on assigned cells, binary cross-entropy for
//! objectness over every cell, binary cross-entropy for class scores on
//! assigned cells.
//!
//! total = 5 * box + 1 * obj + 1 * cls, each term a mean (so magnitudes are
//! comparable across batch and image sizes). Assignment is anchor-free: a
//! ground-truth box goes to the pyramid level whose stride is nearest its
//! size in log2, and every cell of that level whose center falls inside the
//! box is positive. If rounding leaves no such cell, the cell containing the
//! box center steps in, so no ground truth trains nothing.

use crate::data::labels::Label;
use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

use super::RawPrediction;

pub const LAMBDA_BOX: f64 = 5.0;
pub const LAMBDA_OBJ: f64 = 1.0;
pub const LAMBDA_CLS: f64 = 1.0;

/// One positive cell: image, level, grid cell, and the pixel-space target.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub level: usize,
    /// (image, row, col) on that level's grid.
    pub cell: (usize, usize, usize),
    pub class_id: usize,
    /// Ground-truth corners in input pixels.
    pub gt: [f64; 4],
}

/// Pick the level whose stride is nearest the box size in log2; ties go to
/// the finer level.
fn level_for(size: f64, strides: &[usize]) -> usize {
    let target = size.log2();
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, &s) in strides.iter().enumerate() {
        let d = (target - (s as f64).log2()).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Compute positive-cell assignments for a batch of targets. `grids` gives
/// (h, w) per level. Cells are claimed first come, first served in target
/// order, so the result is deterministic.
pub fn assign_targets(
    targets: &[Vec<Label>],
    input_size: usize,
    strides: &[usize],
    grids: &[(usize, usize)],
    num_classes: usize,
) -> Result<Vec<Assignment>> {
    let s = input_size as f64;
    let mut taken: Vec<std::collections::HashSet<(usize, usize, usize)>> =
        vec![Default::default(); strides.len()];
    let mut out = Vec::new();
    for (img, labels) in targets.iter().enumerate() {
        for label in labels {
            label.validate(num_classes)?;
            let (x1, y1, x2, y2) = label.corners();
            let gt = [x1 * s, y1 * s, x2 * s, y2 * s];
            let (w_px, h_px) = (gt[2] - gt[0], gt[3] - gt[1]);
            let level = level_for((w_px * h_px).sqrt(), strides);
            let stride = strides[level] as f64;
            let (gh, gw) = grids[level];

            let mut cells: Vec<(usize, usize, usize)> = Vec::new();
            // Grid rows/cols whose center can lie inside the box.
            let row_lo = ((gt[1] / stride - 0.5).ceil().max(0.0)) as usize;
            let col_lo = ((gt[0] / stride - 0.5).ceil().max(0.0)) as usize;
            for row in row_lo..gh {
                let cy = (row as f64 + 0.5) * stride;
                if cy > gt[3] {
                    break;
                }
                if cy < gt[1] {
                    continue;
                }
                for col in col_lo..gw {
                    let cx = (col as f64 + 0.5) * stride;
                    if cx > gt[2] {
                        break;
                    }
                    if cx >= gt[0] {
                        cells.push((img, row, col));
                    }
                }
            }
            if cells.is_empty() {
                // Center-cell fallback for boxes that straddle cell centers.
                let row = ((gt[1] + gt[3]) / 2.0 / stride).floor().min(gh as f64 - 1.0) as usize;
                let col = ((gt[0] + gt[2]) / 2.0 / stride).floor().min(gw as f64 - 1.0) as usize;
                cells.push((img, row, col));
            }
            for cell in cells {
                if taken[level].insert(cell) {
                    out.push(Assignment {
                        level,
                        cell,
                        class_id: label.class_id,
                        gt,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub struct LossParts {
    /// Weighted total, the backward root.
    pub total: Tensor,
    /// Unweighted components, for logging.
    pub bbox: Tensor,
    pub obj: Tensor,
    pub cls: Tensor,
}

/// Per-level grid shapes of a prediction.
fn grids_of(pred: &RawPrediction) -> Vec<(usize, usize)> {
    pred.levels
        .iter()
        .map(|l| {
            let s = l.map.shape();
            (s[2], s[3])
        })
        .collect()
}

pub fn compute_loss(
    tape: &mut Tape,
    pred: &RawPrediction,
    targets: &[Vec<Label>],
) -> Result<LossParts> {
    let nc = pred.num_classes;
    let batch = pred.levels[0].map.shape()[0];
    if targets.len() != batch {
        return Err(Error::Dim(format!(
            "{} target lists for a batch of {batch}",
            targets.len()
        )));
    }
    let strides: Vec<usize> = pred.levels.iter().map(|l| l.stride).collect();
    let grids = grids_of(pred);
    let assignments = assign_targets(targets, pred.input_size, &strides, &grids, nc)?;

    // Objectness: BCE-with-logits over every cell of every level,
    // softplus(x) - t*x, averaged across the whole pyramid.
    let mut total_cells = 0usize;
    let mut obj_sum: Option<Tensor> = None;
    for (li, level) in pred.levels.iter().enumerate() {
        let shape = level.map.shape().to_vec();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let parts = ops::split_channels(tape, &level.map, &[4, 1, nc])?;
        let obj_map = &parts[1];
        let mut t = Tensor::zeros(&[n, 1, h, w]);
        for a in &assignments {
            if a.level == li {
                let (img, row, col) = a.cell;
                t.data_mut()[(img * h + row) * w + col] = 1.0;
            }
        }
        let sp = ops::softplus(tape, obj_map)?;
        let tx = ops::mul(tape, &t, obj_map)?;
        let bce = ops::sub(tape, &sp, &tx)?;
        let level_sum = ops::sum_all(tape, &bce)?;
        total_cells += n * h * w;
        obj_sum = Some(match obj_sum {
            None => level_sum,
            Some(acc) => ops::add(tape, &acc, &level_sum)?,
        });
    }
    let obj_loss = ops::scale(tape, &obj_sum.expect("at least one level"), 1.0 / total_cells as f64)?;

    // Box and class terms over the positive cells, gathered level by level.
    let k_total = assignments.len();
    let mut box_sum: Option<Tensor> = None;
    let mut cls_sum: Option<Tensor> = None;
    for (li, level) in pred.levels.iter().enumerate() {
        let level_assign: Vec<&Assignment> =
            assignments.iter().filter(|a| a.level == li).collect();
        if level_assign.is_empty() {
            continue;
        }
        let stride = level.stride as f64;
        let k = level_assign.len();
        let cells: Vec<(usize, usize, usize)> =
            level_assign.iter().map(|a| a.cell).collect();

        let ltrb = ops::gather_cells(tape, &level.map, &cells, 0, 4)?;
        // Bounded encoding: offsets live in (0, 2) cells. The box always
        // keeps its cell center inside, so overlap with the ground truth
        // never vanishes and the IoU gradient cannot flatline the way an
        // unbounded encoding lets it after a momentum overshoot.
        let off = ops::sigmoid(tape, &ltrb)?;
        let off_px = ops::scale(tape, &off, 2.0 * stride)?;
        let l_off = ops::column(tape, &off_px, 0)?;
        let t_off = ops::column(tape, &off_px, 1)?;
        let r_off = ops::column(tape, &off_px, 2)?;
        let b_off = ops::column(tape, &off_px, 3)?;

        // Constant tensors: cell centers and ground-truth geometry.
        let centers_x =
            Tensor::new(&[k], cells.iter().map(|c| (c.2 as f64 + 0.5) * stride).collect())?;
        let centers_y =
            Tensor::new(&[k], cells.iter().map(|c| (c.1 as f64 + 0.5) * stride).collect())?;
        let gx1 = Tensor::new(&[k], level_assign.iter().map(|a| a.gt[0]).collect())?;
        let gy1 = Tensor::new(&[k], level_assign.iter().map(|a| a.gt[1]).collect())?;
        let gx2 = Tensor::new(&[k], level_assign.iter().map(|a| a.gt[2]).collect())?;
        let gy2 = Tensor::new(&[k], level_assign.iter().map(|a| a.gt[3]).collect())?;
        let g_area = Tensor::new(
            &[k],
            level_assign
                .iter()
                .map(|a| (a.gt[2] - a.gt[0]) * (a.gt[3] - a.gt[1]))
                .collect(),
        )?;

        let px1 = ops::sub(tape, &centers_x, &l_off)?;
        let py1 = ops::sub(tape, &centers_y, &t_off)?;
        let px2 = ops::add(tape, &centers_x, &r_off)?;
        let py2 = ops::add(tape, &centers_y, &b_off)?;

        let ix2 = ops::emin(tape, &px2, &gx2)?;
        let ix1 = ops::emax(tape, &px1, &gx1)?;
        let iy2 = ops::emin(tape, &py2, &gy2)?;
        let iy1 = ops::emax(tape, &py1, &gy1)?;
        let iw_raw = ops::sub(tape, &ix2, &ix1)?;
        let ih_raw = ops::sub(tape, &iy2, &iy1)?;
        let iw = ops::relu(tape, &iw_raw)?;
        let ih = ops::relu(tape, &ih_raw)?;
        let inter = ops::mul(tape, &iw, &ih)?;
        let pw = ops::sub(tape, &px2, &px1)?;
        let ph = ops::sub(tape, &py2, &py1)?;
        let p_area = ops::mul(tape, &pw, &ph)?;
        let both = ops::add(tape, &p_area, &g_area)?;
        let union = ops::sub(tape, &both, &inter)?;
        let iou = ops::div(tape, &inter, &union)?;
        let neg = ops::scale(tape, &iou, -1.0)?;
        let one_minus = ops::add_const(tape, &neg, 1.0)?;
        let s = ops::sum_all(tape, &one_minus)?;
        box_sum = Some(match box_sum {
            None => s,
            Some(acc) => ops::add(tape, &acc, &s)?,
        });

        let logits = ops::gather_cells(tape, &level.map, &cells, 5, nc)?;
        let mut onehot = Tensor::zeros(&[k, nc]);
        for (row, a) in level_assign.iter().enumerate() {
            onehot.data_mut()[row * nc + a.class_id] = 1.0;
        }
        let sp = ops::softplus(tape, &logits)?;
        let tx = ops::mul(tape, &onehot, &logits)?;
        let bce = ops::sub(tape, &sp, &tx)?;
        let s = ops::sum_all(tape, &bce)?;
        cls_sum = Some(match cls_sum {
            None => s,
            Some(acc) => ops::add(tape, &acc, &s)?,
        });
    }

    let (box_loss, cls_loss) = if k_total == 0 {
        (Tensor::scalar(0.0), Tensor::scalar(0.0))
    } else {
        (
            ops::scale(tape, &box_sum.expect("positives exist"), 1.0 / k_total as f64)?,
            ops::scale(
                tape,
                &cls_sum.expect("positives exist"),
                1.0 / (k_total * nc) as f64,
            )?,
        )
    };

    let wb = ops::scale(tape, &box_loss, LAMBDA_BOX)?;
    let wo = ops::scale(tape, &obj_loss, LAMBDA_OBJ)?;
    let wc = ops::scale(tape, &cls_loss, LAMBDA_CLS)?;
    let partial = ops::add(tape, &wb, &wo)?;
    let total = ops::add(tape, &partial, &wc)?;
    Ok(LossParts {
        total,
        bbox: box_loss,
        obj: obj_loss,
        cls: cls_loss,
    })
}

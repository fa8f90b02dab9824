//! Whole-model oracles: grid arithmetic, batch independence, a finite-
//! difference check through the assembled detector, loss fixed points,
//! assignment geometry, NMS against a brute-force reference, and the
//! training loop's determinism and resume behavior.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spmamba::data::labels::Label;
use spmamba::data::load::LoadedSample;
use spmamba::error::Error;
use spmamba::metrics::{iou, BBox, Detection};
use spmamba::model::decode::{decode, nms, CONF_EVAL, DEFAULT_NMS_IOU};
use spmamba::model::loss::{assign_targets, compute_loss};
use spmamba::model::train::{train_model, TrainConfig, TrainState};
use spmamba::model::{LevelPred, Model, ModelConfig, PsaLevel, RawPrediction};
use spmamba::nn::Slot;
use spmamba::tensor::gradcheck::{grad_check, LossFn};
use spmamba::tensor::ops::sigmoid_scalar;
use spmamba::tensor::tape::Tape;
use spmamba::tensor::Tensor;

/// Small config the heavier tests share: width 8, 32x32 input.
fn small_cfg() -> ModelConfig {
    ModelConfig {
        width: 8,
        input_size: 32,
        state_dim: 4,
        ..Default::default()
    }
}

fn rand_image(r: &mut ChaCha8Rng, n: usize, s: usize) -> Tensor {
    let numel = n * 3 * s * s;
    Tensor::new(
        &[n, 3, s, s],
        (0..numel).map(|_| r.gen::<f64>()).collect::<Vec<_>>(),
    )
    .unwrap()
}

/// A deterministic in-memory sample with one centered object.
fn toy_sample(name: &str, size: usize, class_id: usize) -> LoadedSample {
    let pixels: Vec<u8> = (0..size * size * 3)
        .map(|i| ((i * 37 + name.len() * 11) % 251) as u8)
        .collect();
    LoadedSample {
        name: name.to_string(),
        width: size,
        height: size,
        pixels,
        labels: vec![Label {
            class_id,
            cx: 0.5,
            cy: 0.5,
            w: 0.75,
            h: 0.75,
        }],
    }
}

// ---------------------------------------------------------------------------
// forward shapes and batch independence
// ---------------------------------------------------------------------------

#[test]
fn forward_grid_sizes_follow_strides() {
    let cfg = ModelConfig {
        input_size: 96,
        ..small_cfg()
    };
    let mut model = Model::build(&cfg, 1).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = rand_image(&mut r, 1, 96);
    let mut tape = Tape::training();
    let pred = model.forward(&mut tape, &x, true).unwrap();
    let ch = 4 + 1 + cfg.num_classes;
    assert_eq!(pred.levels.len(), 3);
    assert_eq!(pred.levels[0].stride, 8);
    assert_eq!(pred.levels[0].map.shape(), &[1, ch, 12, 12]);
    assert_eq!(pred.levels[1].stride, 16);
    assert_eq!(pred.levels[1].map.shape(), &[1, ch, 6, 6]);
    assert_eq!(pred.levels[2].stride, 32);
    assert_eq!(pred.levels[2].map.shape(), &[1, ch, 3, 3]);
    assert_eq!(pred.input_size, 96);
}

#[test]
fn forward_rejects_bad_input_shapes() {
    let mut model = Model::build(&small_cfg(), 1).unwrap();
    let mut tape = Tape::training();
    // Side not a multiple of 32.
    let x = Tensor::zeros(&[1, 3, 48, 48]);
    assert!(matches!(model.forward(&mut tape, &x, true), Err(Error::Dim(_))));
    // Non-square.
    let x = Tensor::zeros(&[1, 3, 32, 64]);
    assert!(matches!(model.forward(&mut tape, &x, true), Err(Error::Dim(_))));
    // Wrong channel count.
    let x = Tensor::zeros(&[1, 1, 32, 32]);
    assert!(matches!(model.forward(&mut tape, &x, true), Err(Error::Dim(_))));
}

#[test]
fn eval_forward_is_batch_independent() {
    let cfg = small_cfg();
    let mut model = Model::build(&cfg, 3).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    // One training batch populates the BN running stats.
    let warm = rand_image(&mut r, 2, 32);
    let mut tape = Tape::training();
    model.forward(&mut tape, &warm, true).unwrap();

    let a = rand_image(&mut r, 1, 32);
    let b = rand_image(&mut r, 1, 32);
    let mut ab_data = a.data().to_vec();
    ab_data.extend_from_slice(b.data());
    let ab = Tensor::new(&[2, 3, 32, 32], ab_data).unwrap();

    let mut t1 = Tape::inference();
    let joint = model.forward(&mut t1, &ab, false).unwrap();
    let mut t2 = Tape::inference();
    let solo_a = model.forward(&mut t2, &a, false).unwrap();
    let mut t3 = Tape::inference();
    let solo_b = model.forward(&mut t3, &b, false).unwrap();

    for li in 0..3 {
        let j = joint.levels[li].map.data();
        let half = j.len() / 2;
        for (i, (&ja, &sa)) in j[..half].iter().zip(solo_a.levels[li].map.data()).enumerate() {
            assert!(
                (ja - sa).abs() <= 1e-12,
                "level {li} image 0 coord {i}: joint {ja} vs solo {sa}"
            );
        }
        for (i, (&jb, &sb)) in j[half..].iter().zip(solo_b.levels[li].map.data()).enumerate() {
            assert!(
                (jb - sb).abs() <= 1e-12,
                "level {li} image 1 coord {i}: joint {jb} vs solo {sb}"
            );
        }
    }
}

// ---------------------------------------------------------------------------
// finite differences through the whole detector
// ---------------------------------------------------------------------------

#[test]
fn full_model_gradcheck_over_seeds() {
    let label = Label {
        class_id: 2,
        cx: 0.5,
        cy: 0.5,
        w: 0.4,
        h: 0.4,
    };
    for seed in 0..5u64 {
        let model = RefCell::new(Model::build(&small_cfg(), 40 + seed).unwrap());
        let mut r = ChaCha8Rng::seed_from_u64(70 + seed);
        let mut inputs = vec![rand_image(&mut r, 1, 32)];
        model.borrow_mut().visit(&mut |_, slot, t| {
            if slot != Slot::Buffer {
                inputs.push(t.clone());
            }
        });
        let targets = vec![vec![label.clone()]];
        let f: LossFn = &|tape, xs| {
            let mut m = model.borrow_mut();
            let mut i = 1usize;
            m.visit(&mut |_, slot, t| {
                if slot != Slot::Buffer {
                    *t = xs[i].clone();
                    i += 1;
                }
            });
            let pred = m.forward(tape, &xs[0], true)?;
            Ok(compute_loss(tape, &pred, &targets)?.total)
        };
        // Two probed coordinates per tensor keeps five seeds inside the time
        // budget; the analytic side still covers every parameter exactly.
        let report = grad_check(f, &inputs, 1e-5, Some(2)).unwrap();
        assert!(
            report.max_rel_err <= 1e-3,
            "seed {seed}: full-model gradient mismatch rel err {:.3e} at input {} coord {} \
             (analytic {:.6e}, numeric {:.6e})",
            report.max_rel_err,
            report.worst_input,
            report.worst_coord,
            report.analytic_at_worst,
            report.numeric_at_worst
        );
    }
}

// ---------------------------------------------------------------------------
// loss fixed points and assignment geometry
// ---------------------------------------------------------------------------

const NC: usize = 4;
const HEAD_CH: usize = 4 + 1 + NC;

/// Build a three-level prediction for a square input, all channels at
/// `fill_obj` on the objectness plane and zero elsewhere.
fn blank_pred(size: usize, fill_obj: f64) -> RawPrediction {
    let levels = [8usize, 16, 32]
        .iter()
        .map(|&stride| {
            let g = size / stride;
            let mut map = Tensor::zeros(&[1, HEAD_CH, g, g]);
            for i in 0..g * g {
                map.data_mut()[4 * g * g + i] = fill_obj;
            }
            LevelPred { stride, map }
        })
        .collect();
    RawPrediction {
        levels,
        input_size: size,
        num_classes: NC,
    }
}

fn set_cell(pred: &mut RawPrediction, level: usize, ch: usize, row: usize, col: usize, v: f64) {
    let g = pred.levels[level].map.shape()[2];
    pred.levels[level].map.data_mut()[(ch * g + row) * g + col] = v;
}

#[test]
fn loss_without_targets_and_cold_logits_is_tiny() {
    let pred = blank_pred(96, -50.0);
    let mut tape = Tape::new();
    let parts = compute_loss(&mut tape, &pred, &[vec![]]).unwrap();
    assert!(parts.total.data()[0] >= 0.0);
    assert!(
        parts.total.data()[0] < 1e-9,
        "empty-scene loss should vanish, got {}",
        parts.total.data()[0]
    );
}

#[test]
fn loss_on_perfect_construction_is_tiny() {
    // One 16x16 box centered on cell (2, 3) of the stride-16 grid of
    // a 96x96 input: exactly one positive cell, offsets half a cell each way.
    let label = Label {
        class_id: 1,
        cx: 56.0 / 96.0,
        cy: 40.0 / 96.0,
        w: 16.0 / 96.0,
        h: 16.0 / 96.0,
    };
    let mut pred = blank_pred(96, -50.0);
    // sigmoid(off) * 2 = 0.5 cells.
    let off = (0.25f64 / 0.75).ln();
    for ch in 0..4 {
        set_cell(&mut pred, 1, ch, 2, 3, off);
    }
    set_cell(&mut pred, 1, 4, 2, 3, 50.0);
    for c in 0..NC {
        let v = if c == 1 { 50.0 } else { -50.0 };
        set_cell(&mut pred, 1, 5 + c, 2, 3, v);
    }
    let mut tape = Tape::new();
    let parts = compute_loss(&mut tape, &pred, &[vec![label]]).unwrap();
    assert!(
        parts.total.data()[0] < 1e-6,
        "perfect construction should zero the loss, got {}",
        parts.total.data()[0]
    );
}

#[test]
fn loss_is_nonnegative_on_random_inputs() {
    let mut r = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..10 {
        let mut pred = blank_pred(96, 0.0);
        for level in &mut pred.levels {
            let data = level.map.data_mut();
            for v in data.iter_mut() {
                *v = r.gen::<f64>() * 6.0 - 3.0;
            }
        }
        let labels: Vec<Label> = (0..3)
            .map(|_| {
                let w = 0.05 + r.gen::<f64>() * 0.3;
                let h = 0.05 + r.gen::<f64>() * 0.3;
                Label {
                    class_id: r.gen_range(0..NC),
                    cx: w / 2.0 + r.gen::<f64>() * (1.0 - w),
                    cy: h / 2.0 + r.gen::<f64>() * (1.0 - h),
                    w,
                    h,
                }
            })
            .collect();
        let mut tape = Tape::new();
        let parts = compute_loss(&mut tape, &pred, &[labels]).unwrap();
        for (name, t) in [
            ("total", &parts.total),
            ("box", &parts.bbox),
            ("obj", &parts.obj),
            ("cls", &parts.cls),
        ] {
            assert!(t.data()[0] >= 0.0, "{name} loss went negative: {}", t.data()[0]);
        }
    }
}

#[test]
fn loss_rejects_out_of_range_targets() {
    let pred = blank_pred(96, 0.0);
    let bad = Label {
        class_id: 0,
        cx: 1.2,
        cy: 0.5,
        w: 0.1,
        h: 0.1,
    };
    let mut tape = Tape::new();
    assert!(matches!(
        compute_loss(&mut tape, &pred, &[vec![bad]]),
        Err(Error::Data(_))
    ));
}

const GRIDS_96: [(usize, usize); 3] = [(12, 12), (6, 6), (3, 3)];

fn one_label(cx: f64, cy: f64, w: f64, h: f64) -> Vec<Vec<Label>> {
    vec![vec![Label {
        class_id: 0,
        cx,
        cy,
        w,
        h,
    }]]
}

#[test]
fn assignment_routes_by_box_size() {
    let strides = [8, 16, 32];
    // 8 px box: log2 sqrt(area) = 3, exactly stride 8.
    let a = assign_targets(&one_label(0.5, 0.5, 8.0 / 96.0, 8.0 / 96.0), 96, &strides, &GRIDS_96, NC)
        .unwrap();
    assert!(a.iter().all(|x| x.level == 0), "8 px boxes belong to P3");
    // 32 px box routes to stride 32.
    let a = assign_targets(
        &one_label(0.5, 0.5, 32.0 / 96.0, 32.0 / 96.0),
        96,
        &strides,
        &GRIDS_96,
        NC,
    )
    .unwrap();
    assert!(a.iter().all(|x| x.level == 2), "32 px boxes belong to P5");
    // sqrt(8*16) = 2^3.5 is equidistant from strides 8 and 16 in log2;
    // the finer level wins the tie.
    let a = assign_targets(
        &one_label(0.5, 0.5, 8.0 / 96.0, 16.0 / 96.0),
        96,
        &strides,
        &GRIDS_96,
        NC,
    )
    .unwrap();
    assert!(!a.is_empty());
    assert!(a.iter().all(|x| x.level == 0), "log2 ties go to the finer level");
}

#[test]
fn assignment_collects_every_covered_cell_center() {
    // 32x32 px box spanning x, y in [16, 48]: stride-32 centers at 16 and 48
    // sit exactly on the closed boundary, giving a 2x2 block of positives.
    let strides = [8, 16, 32];
    let a = assign_targets(
        &one_label(32.0 / 96.0, 32.0 / 96.0, 32.0 / 96.0, 32.0 / 96.0),
        96,
        &strides,
        &GRIDS_96,
        NC,
    )
    .unwrap();
    let mut cells: Vec<(usize, usize, usize)> = a.iter().map(|x| x.cell).collect();
    cells.sort();
    assert_eq!(
        cells,
        vec![(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)],
        "every covered center must be positive"
    );
    assert!(a.iter().all(|x| x.level == 2));
}

#[test]
fn assignment_falls_back_to_center_cell() {
    // A 2 px box strung between stride-8 cell centers covers none of them;
    // the cell containing the box center steps in.
    let strides = [8, 16, 32];
    let a = assign_targets(
        &one_label(8.0 / 96.0, 8.0 / 96.0, 2.0 / 96.0, 2.0 / 96.0),
        96,
        &strides,
        &GRIDS_96,
        NC,
    )
    .unwrap();
    assert_eq!(a.len(), 1, "fallback must produce exactly one cell");
    assert_eq!(a[0].level, 0);
    assert_eq!(a[0].cell, (0, 1, 1));
}

#[test]
fn assignment_first_target_keeps_contested_cells() {
    let strides = [8, 16, 32];
    let label = Label {
        class_id: 0,
        cx: 0.5,
        cy: 0.5,
        w: 8.0 / 96.0,
        h: 8.0 / 96.0,
    };
    let second = Label {
        class_id: 3,
        ..label.clone()
    };
    let a = assign_targets(&vec![vec![label, second]], 96, &strides, &GRIDS_96, NC).unwrap();
    let classes: Vec<usize> = a.iter().map(|x| x.class_id).collect();
    assert!(
        classes.iter().all(|&c| c == 0),
        "contested cells stay with the earlier target, got {classes:?}"
    );
}

// ---------------------------------------------------------------------------
// flag soundness, parameter counts, checkpoint determinism
// ---------------------------------------------------------------------------

fn flag_cfg(mamba: bool, psa: bool, sppelan: bool) -> ModelConfig {
    ModelConfig {
        enable_mamba: mamba,
        enable_psa: psa,
        enable_sppelan: sppelan,
        ..small_cfg()
    }
}

#[test]
fn disabling_flags_removes_their_parameters() {
    let mut bare = Model::build(&flag_cfg(false, false, false), 1).unwrap();
    for (name, _) in bare.key_inventory() {
        assert!(
            !name.contains("ss2d") && !name.contains("psa") && !name.contains("sppelan"),
            "baseline model leaked module key {name:?}"
        );
    }
    let mut full = Model::build(&flag_cfg(true, true, true), 1).unwrap();
    let keys = full.key_inventory();
    for module in ["ss2d", "psa", "sppelan"] {
        assert!(
            keys.iter().any(|(name, _)| name.contains(module)),
            "full model is missing {module} keys"
        );
    }
}

#[test]
fn param_counts_grow_with_each_module() {
    // Table-style flag groups, bare to full.
    let combos = [
        (false, false, false),
        (true, false, false),
        (false, true, false),
        (false, false, true),
        (true, true, false),
        (true, false, true),
        (true, true, true),
    ];
    let counts: Vec<usize> = combos
        .iter()
        .map(|&(m, p, s)| Model::build(&flag_cfg(m, p, s), 1).unwrap().param_counts().0)
        .collect();
    let bare = counts[0];
    let full = counts[6];
    for (i, &c) in counts.iter().enumerate().skip(1).take(5) {
        assert!(c > bare, "group {} must exceed the baseline", i + 1);
        assert!(full > c, "full model must exceed group {}", i + 1);
    }
    assert!(full > bare);
}

#[test]
fn same_seed_builds_identical_checkpoints() {
    let cfg = small_cfg();
    let a = Model::build(&cfg, 5).unwrap().to_checkpoint().to_bytes();
    let b = Model::build(&cfg, 5).unwrap().to_checkpoint().to_bytes();
    assert_eq!(a, b, "same seed must give identical checkpoint bytes");
    let c = Model::build(&cfg, 6).unwrap().to_checkpoint().to_bytes();
    assert_ne!(a, c, "different seeds should differ");
}

#[test]
fn checkpoint_round_trips_through_the_model() {
    let cfg = small_cfg();
    let mut model = Model::build(&cfg, 9).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let warm = rand_image(&mut r, 2, 32);
    let mut tape = Tape::training();
    model.forward(&mut tape, &warm, true).unwrap();

    let bytes = model.to_checkpoint().to_bytes();
    let ck = spmamba::checkpoint::Checkpoint::from_bytes(&bytes).unwrap();
    let mut restored = Model::from_checkpoint(&ck).unwrap();
    assert_eq!(restored.cfg, cfg);

    let x = rand_image(&mut r, 1, 32);
    let mut t1 = Tape::inference();
    let before = model.forward(&mut t1, &x, false).unwrap();
    let mut t2 = Tape::inference();
    let after = restored.forward(&mut t2, &x, false).unwrap();
    for li in 0..3 {
        assert_eq!(
            before.levels[li].map.data(),
            after.levels[li].map.data(),
            "restored model must reproduce level {li} bit-exactly"
        );
    }
}

// ---------------------------------------------------------------------------
// decode and NMS
// ---------------------------------------------------------------------------

#[test]
fn decode_is_empty_when_objectness_is_cold() {
    let pred = blank_pred(96, -50.0);
    let dets = decode(&pred, &[0], CONF_EVAL, DEFAULT_NMS_IOU).unwrap();
    assert!(dets.is_empty(), "got {} detections from a cold map", dets.len());
}

#[test]
fn decode_box_geometry_matches_hand_computation() {
    // One confident cell on the stride-8 level of a 96x96 input at
    // (row 1, col 2): center (20, 12).
    let mut pred = blank_pred(96, -50.0);
    set_cell(&mut pred, 0, 4, 1, 2, 2.0);
    set_cell(&mut pred, 0, 5 + 1, 1, 2, 1.0);
    for c in 0..NC {
        if c != 1 {
            set_cell(&mut pred, 0, 5 + c, 1, 2, -50.0);
        }
    }
    // Offset logits zero: sigmoid(0) * 2 = one cell in every direction.
    let dets = decode(&pred, &[7], 0.25, DEFAULT_NMS_IOU).unwrap();
    assert_eq!(dets.len(), 1);
    let d = &dets[0];
    assert_eq!(d.image_id, 7);
    assert_eq!(d.class_id, 1);
    let want_score = sigmoid_scalar(2.0) * sigmoid_scalar(1.0);
    assert!((d.score - want_score).abs() < 1e-12);
    let r = sigmoid_scalar(0.0) * 2.0 * 8.0;
    assert!((d.bbox.x1 - (20.0 - r)).abs() < 1e-12);
    assert!((d.bbox.y1 - (12.0 - r)).abs() < 1e-12);
    assert!((d.bbox.x2 - (20.0 + r)).abs() < 1e-12);
    assert!((d.bbox.y2 - (12.0 + r)).abs() < 1e-12);
}

#[test]
fn decode_clamps_boxes_to_the_image() {
    let mut pred = blank_pred(96, -50.0);
    // Corner cell with huge offsets spills outside; decode must clamp.
    set_cell(&mut pred, 2, 4, 0, 0, 3.0);
    for ch in 0..4 {
        set_cell(&mut pred, 2, ch, 0, 0, 20.0);
    }
    set_cell(&mut pred, 2, 5, 0, 0, 3.0);
    let dets = decode(&pred, &[0], 0.25, DEFAULT_NMS_IOU).unwrap();
    assert!(!dets.is_empty());
    for d in &dets {
        assert!(d.bbox.x1 >= 0.0 && d.bbox.y1 >= 0.0);
        assert!(d.bbox.x2 <= 96.0 && d.bbox.y2 <= 96.0);
    }
}

fn det(image_id: usize, class_id: usize, b: [f64; 4], score: f64) -> Detection {
    Detection::new(image_id, class_id, BBox::new(b[0], b[1], b[2], b[3]).unwrap(), score).unwrap()
}

#[test]
fn nms_keeps_the_higher_scoring_duplicate() {
    let dets = vec![
        det(0, 2, [10.0, 10.0, 30.0, 30.0], 0.9),
        det(0, 2, [10.0, 10.0, 30.0, 30.0], 0.8),
    ];
    let kept = nms(&dets, DEFAULT_NMS_IOU);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].score, 0.9);
}

#[test]
fn nms_never_crosses_image_or_class_boundaries() {
    let dets = vec![
        det(0, 0, [10.0, 10.0, 30.0, 30.0], 0.9),
        det(1, 0, [10.0, 10.0, 30.0, 30.0], 0.8),
        det(0, 1, [10.0, 10.0, 30.0, 30.0], 0.7),
    ];
    let kept = nms(&dets, DEFAULT_NMS_IOU);
    assert_eq!(kept.len(), 3, "different images/classes never suppress each other");
}

/// Brute-force greedy reference: walk candidates in score order and keep
/// each one whose IoU against every kept box of the same (image, class)
/// stays at or below the threshold.
fn nms_oracle(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let ok = kept.iter().all(|&j| {
            dets[j].image_id != dets[i].image_id
                || dets[j].class_id != dets[i].class_id
                || iou(&dets[j].bbox, &dets[i].bbox) <= thresh
        });
        if ok {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

#[test]
fn nms_matches_the_bruteforce_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..20 {
        let n = 50;
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let x1 = r.gen::<f64>() * 80.0;
                let y1 = r.gen::<f64>() * 80.0;
                let w = 4.0 + r.gen::<f64>() * 30.0;
                let h = 4.0 + r.gen::<f64>() * 30.0;
                det(
                    r.gen_range(0..2),
                    r.gen_range(0..3),
                    [x1, y1, x1 + w, y1 + h],
                    r.gen::<f64>(),
                )
            })
            .collect();
        let got = nms(&dets, DEFAULT_NMS_IOU);
        let want = nms_oracle(&dets, DEFAULT_NMS_IOU);
        assert_eq!(got, want, "trial {trial}: NMS disagrees with the oracle");
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

fn collect_params(model: &mut Model) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit(&mut |name, slot, t| {
        if slot != Slot::Buffer {
            out.push((name.to_string(), t.data().to_vec()));
        }
    });
    out
}

#[test]
fn zero_learning_rate_freezes_the_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::build(&small_cfg(), 11).unwrap();
    let before = collect_params(&mut model);
    let data = vec![toy_sample("a", 32, 0), toy_sample("b", 32, 1)];
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 1,
        batch_size: 2,
        ..Default::default()
    };
    let mut state = TrainState::fresh();
    train_model(&mut model, &data, &[], &cfg, &mut state, dir.path()).unwrap();
    let after = collect_params(&mut model);
    assert_eq!(before, after, "lr = 0 must leave every weight untouched");
}

#[test]
fn single_sample_overfit_reaches_small_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg64 = ModelConfig {
        input_size: 64,
        ..small_cfg()
    };
    let mut model = Model::build(&cfg64, 13).unwrap();
    let data = vec![toy_sample("only", 64, 2)];
    // One step per epoch, cosine-annealed to zero so the box can settle.
    let cfg = TrainConfig {
        momentum: 0.9,
        lr_final_frac: 0.0,
        epochs: 200,
        batch_size: 1,
        ..Default::default()
    };
    let mut state = TrainState::fresh();
    let report = train_model(&mut model, &data, &[], &cfg, &mut state, dir.path()).unwrap();
    let last = report.rows.last().unwrap();
    let total = 5.0 * last.loss_box + last.loss_obj + last.loss_cls;
    assert!(
        total < 0.05,
        "single-sample overfit stalled: total loss {total:.4} after 200 steps \
         (box {:.4}, obj {:.4}, cls {:.4})",
        last.loss_box,
        last.loss_obj,
        last.loss_cls
    );
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = vec![
        toy_sample("a", 32, 0),
        toy_sample("b", 32, 1),
        toy_sample("c", 32, 2),
        toy_sample("d", 32, 3),
        toy_sample("e", 32, 0),
    ];
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        ..Default::default()
    };
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::build(&small_cfg(), 17).unwrap();
        let mut state = TrainState::fresh();
        let report = train_model(&mut model, &data, &data, &cfg, &mut state, dir.path()).unwrap();
        (report.rows, model.to_checkpoint().to_bytes())
    };
    let (rows_a, bytes_a) = run();
    let (rows_b, bytes_b) = run();
    assert_eq!(rows_a, rows_b, "same seed must give bitwise-equal epoch rows");
    assert_eq!(bytes_a, bytes_b, "same seed must give identical weights");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data: Vec<LoadedSample> = (0..6)
        .map(|i| toy_sample(&format!("s{i}"), 32, i % 4))
        .collect();
    let straight_cfg = TrainConfig {
        epochs: 4,
        batch_size: 2,
        ..Default::default()
    };

    let dir_a = tempfile::tempdir().unwrap();
    let mut model_a = Model::build(&small_cfg(), 23).unwrap();
    let mut state_a = TrainState::fresh();
    let report_a =
        train_model(&mut model_a, &data, &data, &straight_cfg, &mut state_a, dir_a.path()).unwrap();

    // Same run stopped after two epochs, then picked back up from disk.
    let dir_b = tempfile::tempdir().unwrap();
    let half_cfg = TrainConfig {
        epochs: 2,
        ..straight_cfg.clone()
    };
    let mut model_b = Model::build(&small_cfg(), 23).unwrap();
    let mut state_b = TrainState::fresh();
    train_model(&mut model_b, &data, &data, &half_cfg, &mut state_b, dir_b.path()).unwrap();

    let ck = spmamba::checkpoint::Checkpoint::load(&dir_b.path().join("last.ckpt")).unwrap();
    let mut resumed = Model::from_checkpoint(&ck).unwrap();
    let (_, mut state_c) = TrainState::load(&dir_b.path().join("train_state.ckpt")).unwrap();
    assert_eq!(state_c.epochs_done, 2);
    let report_c = train_model(
        &mut resumed,
        &data,
        &data,
        &straight_cfg,
        &mut state_c,
        dir_b.path(),
    )
    .unwrap();

    assert_eq!(
        &report_a.rows[2..],
        &report_c.rows[..],
        "resumed epochs must reproduce the uninterrupted sequence"
    );
    assert_eq!(
        model_a.to_checkpoint().to_bytes(),
        resumed.to_checkpoint().to_bytes(),
        "resumed run must land on identical weights"
    );
}

#[test]
fn divergent_training_aborts_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::build(&small_cfg(), 29).unwrap();
    let data = vec![toy_sample("a", 32, 0), toy_sample("b", 32, 1)];
    let cfg = TrainConfig {
        lr: 1e8,
        epochs: 5,
        batch_size: 2,
        ..Default::default()
    };
    let mut state = TrainState::fresh();
    let err = train_model(&mut model, &data, &[], &cfg, &mut state, dir.path());
    assert!(
        matches!(err, Err(Error::NonFinite(_))),
        "exploding run must abort with a NonFinite diagnostic, got {err:?}"
    );
}

#[test]
fn zero_epoch_training_still_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::build(&small_cfg(), 31).unwrap();
    let data = vec![toy_sample("a", 32, 0)];
    let cfg = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let mut state = TrainState::fresh();
    let report = train_model(&mut model, &data, &[], &cfg, &mut state, dir.path()).unwrap();
    assert!(report.rows.is_empty());
    let ck = spmamba::checkpoint::Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(ck.entries.len(), model.key_inventory().len());
}

// ---------------------------------------------------------------------------
// config plumbing
// ---------------------------------------------------------------------------

#[test]
fn model_config_round_trips_through_kv_text() {
    let cfg = ModelConfig {
        enable_psa: false,
        width: 24,
        depths: [2, 1, 1, 2],
        psa_level: PsaLevel::P4,
        ..Default::default()
    };
    let text = cfg.to_kv().to_text();
    let kv = spmamba::config::KvConfig::parse(&text, "round-trip").unwrap();
    let back = ModelConfig::from_kv(&kv).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn model_config_rejects_indivisible_psa_width() {
    let cfg = ModelConfig {
        width: 9,
        psa_level: PsaLevel::P3,
        psa_branches: 4,
        ..Default::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn train_config_accepts_paper_defaults() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr, 0.01);
    assert_eq!(cfg.momentum, 0.937);
    assert_eq!(cfg.weight_decay, 0.0005);
    assert_eq!(cfg.batch_size, 4);
    cfg.validate().unwrap();
    let bad = TrainConfig {
        momentum: 1.0,
        ..Default::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

//! SGD training loop with momentum and decoupled weight decay.
//!
//! Everything is replayable: the shuffle for epoch e comes from stream e of
//! the seed, optimizer velocity rides along in a sidecar state file, and
//! checkpoints carry the config. A run killed between epochs resumes from
//! `last.ckpt` + `train_state.ckpt` and produces the same remaining epochs
//! as an uninterrupted run.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::KvConfig;
use crate::data::load::LoadedSample;
use crate::error::{Error, Result};
use crate::metrics::{mean_ap, Detection, GroundTruth, MapReport};
use crate::nn::Slot;
use crate::tensor::tape::{Gradients, Tape};
use crate::tensor::Tensor;

use super::decode::{decode, CONF_EVAL, DEFAULT_NMS_IOU};
use super::loss::compute_loss;
use super::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 norm cap on the gradient before the momentum update.
    /// Without it the large early objectness gradients, compounded by
    /// momentum, throw the box logits into activation saturation they
    /// never escape. `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    /// Cosine-anneal the learning rate towards `lr * lr_final_frac` over
    /// the scheduled epochs. 1.0 keeps it constant.
    pub lr_final_frac: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 0.0005,
            clip_norm: 10.0,
            lr_final_frac: 1.0,
            batch_size: 4,
            epochs: 30,
            seed: 0,
        }
    }
}

pub const TRAIN_KEYS: [&str; 8] = [
    "lr",
    "momentum",
    "weight_decay",
    "clip_norm",
    "lr_final_frac",
    "batch_size",
    "epochs",
    "seed",
];

impl TrainConfig {
    /// lr = 0 is allowed: it freezes the weights, which the tests use to
    /// pin down the optimizer update rule.
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay {} must be finite and >= 0",
                self.weight_decay
            )));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "clip_norm {} must be positive (inf disables clipping)",
                self.clip_norm
            )));
        }
        if !(0.0..=1.0).contains(&self.lr_final_frac) {
            return Err(Error::Config(format!(
                "lr_final_frac {} must lie in [0, 1]",
                self.lr_final_frac
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("lr", self.lr);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("clip_norm", self.clip_norm);
        kv.set("lr_final_frac", self.lr_final_frac);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.require_known(&TRAIN_KEYS)?;
        let cfg = Self {
            lr: kv.get_f64("lr")?,
            momentum: kv.get_f64("momentum")?,
            weight_decay: kv.get_f64("weight_decay")?,
            clip_norm: kv.get_f64("clip_norm")?,
            lr_final_frac: kv.get_f64("lr_final_frac")?,
            batch_size: kv.get_usize("batch_size")?,
            epochs: kv.get_usize("epochs")?,
            seed: kv.get_usize("seed")? as u64,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Momentum SGD. Weight decay is decoupled: it scales the parameter directly
/// instead of being folded into the velocity, and only touches tensors the
/// model marks [`Slot::Decayed`] (conv and linear weights, not biases or
/// norm parameters).
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            velocity: HashMap::new(),
        }
    }

    /// g <- g * min(1, clip / ||g||);  v <- mu * v + g;  p <- p - lr * (v + wd * p)
    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        let mut gs: Vec<Tensor> = Vec::new();
        let mut sq = 0.0;
        let mut failure: Option<Error> = None;
        model.visit(&mut |_, slot, t| {
            if failure.is_some() || slot == Slot::Buffer {
                return;
            }
            match grads.wrt(t) {
                Ok(g) => {
                    sq += g.data().iter().map(|v| v * v).sum::<f64>();
                    gs.push(g);
                }
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };

        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        let mut next = 0usize;
        model.visit(&mut |name, slot, t| {
            if slot == Slot::Buffer {
                return;
            }
            let gd = gs[next].data();
            next += 1;
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; t.numel()]);
            let decay = if slot == Slot::Decayed { wd } else { 0.0 };
            let p = t.data_mut();
            for i in 0..p.len() {
                v[i] = mu * v[i] + scale * gd[i];
                p[i] -= lr * (v[i] + decay * p[i]);
            }
        });
        Ok(())
    }

    /// Velocity buffers in the model's visit order, for serialization.
    fn export(&self, model: &mut Model) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        model.visit(&mut |name, slot, t| {
            if slot == Slot::Buffer {
                return;
            }
            let v = self
                .velocity
                .get(name)
                .cloned()
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            out.push((
                name.to_string(),
                Tensor::new(&[v.len()], v).expect("velocity length matches"),
            ));
        });
        out
    }
}

/// Progress carried across an interrupted run.
pub struct TrainState {
    pub epochs_done: usize,
    pub best_epoch: usize,
    pub best_map50: f64,
    velocity: Vec<(String, Vec<f64>)>,
}

impl TrainState {
    pub fn fresh() -> Self {
        Self {
            epochs_done: 0,
            best_epoch: 0,
            best_map50: f64::NEG_INFINITY,
            velocity: Vec::new(),
        }
    }

    fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut kv = cfg.to_kv();
        kv.set("epochs_done", self.epochs_done);
        kv.set("best_epoch", self.best_epoch);
        kv.set("best_map50", self.best_map50);
        Checkpoint {
            config_text: kv.to_text(),
            entries: self
                .velocity
                .iter()
                .map(|(n, v)| {
                    (
                        n.clone(),
                        Tensor::new(&[v.len()], v.clone()).expect("length matches"),
                    )
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<(TrainConfig, Self)> {
        let ck = Checkpoint::load(path)?;
        let kv = KvConfig::parse(&ck.config_text, &path.to_string_lossy())?;
        let mut known: Vec<&str> = TRAIN_KEYS.to_vec();
        known.extend(["epochs_done", "best_epoch", "best_map50"]);
        kv.require_known(&known)?;
        let cfg = TrainConfig {
            lr: kv.get_f64("lr")?,
            momentum: kv.get_f64("momentum")?,
            weight_decay: kv.get_f64("weight_decay")?,
            clip_norm: kv.get_f64("clip_norm")?,
            lr_final_frac: kv.get_f64("lr_final_frac")?,
            batch_size: kv.get_usize("batch_size")?,
            epochs: kv.get_usize("epochs")?,
            seed: kv.get_usize("seed")? as u64,
        };
        cfg.validate()?;
        let state = Self {
            epochs_done: kv.get_usize("epochs_done")?,
            best_epoch: kv.get_usize("best_epoch")?,
            best_map50: kv.get_f64("best_map50")?,
            velocity: ck
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.data().to_vec()))
                .collect(),
        };
        Ok((cfg, state))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss_box: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub map50: f64,
    pub map5095: f64,
}

impl EpochRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.loss_box, self.loss_obj, self.loss_cls, self.map50, self.map5095
        )
    }
}

pub const LOG_HEADER: &str = "epoch,loss_box,loss_obj,loss_cls,map50,map5095";

#[derive(Debug)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_map50: f64,
}

/// Stack samples into one [N, 3, H, W] batch. All images must share one size.
pub fn batch_tensor(samples: &[&LoadedSample]) -> Result<Tensor> {
    let (w, h) = (samples[0].width, samples[0].height);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if s.width != w || s.height != h {
            return Err(Error::Data(format!(
                "sample {} is {}x{}, batch wants {}x{}",
                s.name, s.width, s.height, w, h
            )));
        }
        data.extend(s.image_tensor().data().iter());
    }
    Tensor::new(&[samples.len(), 3, h, w], data)
}

/// Run the model over a dataset in eval mode and score the detections.
/// Image ids are indices into `data`.
pub fn evaluate_model(
    model: &mut Model,
    data: &[LoadedSample],
    batch_size: usize,
    conf_thresh: f64,
) -> Result<(Vec<Detection>, Vec<GroundTruth>)> {
    let mut dets: Vec<Detection> = Vec::new();
    let mut gts: Vec<GroundTruth> = Vec::new();
    for (i, s) in data.iter().enumerate() {
        gts.extend(s.ground_truths(i)?);
    }
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(batch_size.max(1)) {
        let samples: Vec<&LoadedSample> = chunk.iter().map(|&i| &data[i]).collect();
        let x = batch_tensor(&samples)?;
        let mut tape = Tape::inference();
        let pred = model.forward(&mut tape, &x, false)?;
        dets.extend(decode(&pred, chunk, conf_thresh, DEFAULT_NMS_IOU)?);
    }
    Ok((dets, gts))
}

/// Detections plus mAP in one call, the shape most callers want.
pub fn evaluate_map(model: &mut Model, data: &[LoadedSample], batch_size: usize) -> Result<MapReport> {
    let (dets, gts) = evaluate_model(model, data, batch_size, CONF_EVAL)?;
    mean_ap(&dets, &gts, model.cfg.num_classes)
}

/// Train in place, logging one CSV row per epoch and writing `best.ckpt`
/// (highest validation mAP@0.5), `last.ckpt` and `train_state.ckpt` under
/// `out_dir`. Resume by reloading the model from `last.ckpt` and passing the
/// state from [`TrainState::load`].
pub fn train_model(
    model: &mut Model,
    train_data: &[LoadedSample],
    val_data: &[LoadedSample],
    cfg: &TrainConfig,
    state: &mut TrainState,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.csv");
    let mut log = if state.epochs_done == 0 {
        let mut f = fs::File::create(&log_path)?;
        writeln!(f, "{LOG_HEADER}")?;
        f
    } else {
        fs::OpenOptions::new().append(true).create(true).open(&log_path)?
    };

    let mut sgd = Sgd::new(cfg);
    for (name, v) in &state.velocity {
        sgd.velocity.insert(name.clone(), v.clone());
    }

    let mut rows = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        // The schedule depends only on the epoch index, so a resumed run
        // sees the same learning rates as an uninterrupted one.
        let f = cfg.lr_final_frac;
        let anneal = 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        sgd.lr = cfg.lr * (f + (1.0 - f) * anneal);

        // Stream e+1 of the seed shuffles epoch e; independent of how many
        // epochs actually ran before this one.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + epoch as u64);
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng);

        let (mut ep_box, mut ep_obj, mut ep_cls) = (0.0, 0.0, 0.0);
        let mut images_seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&LoadedSample> = chunk.iter().map(|&i| &train_data[i]).collect();
            let x = batch_tensor(&samples)?;
            let targets: Vec<Vec<_>> = samples.iter().map(|s| s.labels.clone()).collect();

            // Only parameters are leaves; the image batch stays off the tape
            // so backward never bothers with input gradients.
            let mut tape = Tape::training();
            model.visit(&mut |_, slot, t| {
                if slot != Slot::Buffer {
                    tape.leaf(t);
                }
            });

            let pred = model.forward(&mut tape, &x, true)?;
            let parts = compute_loss(&mut tape, &pred, &targets)?;
            let total = parts.total.data()[0];
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at epoch {epoch}, after {images_seen} images: \
                     box {} obj {} cls {}",
                    parts.bbox.data()[0],
                    parts.obj.data()[0],
                    parts.cls.data()[0]
                )));
            }
            let grads = tape.backward(&parts.total)?;
            sgd.step(model, &grads)?;

            let n = samples.len() as f64;
            ep_box += parts.bbox.data()[0] * n;
            ep_obj += parts.obj.data()[0] * n;
            ep_cls += parts.cls.data()[0] * n;
            images_seen += samples.len();
        }

        let (map50, map5095) = if val_data.is_empty() {
            (0.0, 0.0)
        } else {
            let report = evaluate_map(model, val_data, cfg.batch_size)?;
            (report.map50, report.map5095)
        };

        let row = EpochRow {
            epoch: epoch + 1,
            loss_box: ep_box / images_seen as f64,
            loss_obj: ep_obj / images_seen as f64,
            loss_cls: ep_cls / images_seen as f64,
            map50,
            map5095,
        };
        writeln!(log, "{}", row.csv_line())?;
        log.flush()?;
        rows.push(row);

        state.epochs_done = epoch + 1;
        if map50 > state.best_map50 {
            state.best_map50 = map50;
            state.best_epoch = epoch + 1;
            model.to_checkpoint().save(&out_dir.join("best.ckpt"))?;
        }
        model.to_checkpoint().save(&out_dir.join("last.ckpt"))?;
        state.velocity = sgd
            .export(model)
            .into_iter()
            .map(|(n, t)| (n, t.data().to_vec()))
            .collect();
        state.to_checkpoint(cfg).save(&out_dir.join("train_state.ckpt"))?;
    }

    // An epochs = 0 run still leaves a loadable checkpoint behind.
    if state.epochs_done == 0 {
        model.to_checkpoint().save(&out_dir.join("last.ckpt"))?;
    }

    Ok(TrainReport {
        rows,
        best_epoch: state.best_epoch,
        best_map50: state.best_map50,
    })
}

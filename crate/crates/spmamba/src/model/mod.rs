//! The full toy detector: backbone with selective-scan stages, PAFPN neck,
//! anchor-free heads at strides 8/16/32, plus the ablation switches that
//! turn the scan blocks, attention and pyramid pooling on and off.
//!
//! Scale is deliberately small (default width 16, input 96) so training and
//! finite-difference checks run on a desk. The wiring, not the capacity, is
//! the point.

pub mod decode;
pub mod loss;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{OdssBlock, PlainResidual, Psa, PsaConfig, Sppelan, StageBlock, Stem, Vcm};
use crate::checkpoint::Checkpoint;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnSilu, ParamFn, Slot};
use crate::tensor::ops;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

pub const STRIDES: [usize; 3] = [8, 16, 32];

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsaLevel {
    P3,
    P4,
    P5,
}

impl PsaLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            PsaLevel::P3 => "p3",
            PsaLevel::P4 => "p4",
            PsaLevel::P5 => "p5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "p3" => Ok(PsaLevel::P3),
            "p4" => Ok(PsaLevel::P4),
            "p5" => Ok(PsaLevel::P5),
            _ => Err(Error::Config(format!(
                "psa_level must be p3, p4 or p5, got {s:?}"
            ))),
        }
    }

    fn index(&self) -> usize {
        match self {
            PsaLevel::P3 => 0,
            PsaLevel::P4 => 1,
            PsaLevel::P5 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub enable_mamba: bool,
    pub enable_psa: bool,
    pub enable_sppelan: bool,
    /// Base channel count; levels P3/P4/P5 carry 2x/4x/8x this.
    pub width: usize,
    /// Stage-block repeats for the four backbone stages.
    pub depths: [usize; 4],
    pub psa_level: PsaLevel,
    pub num_classes: usize,
    pub input_size: usize,
    pub state_dim: usize,
    pub psa_branches: usize,
    pub psa_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enable_mamba: true,
            enable_psa: true,
            enable_sppelan: true,
            width: 16,
            depths: [1, 1, 1, 1],
            psa_level: PsaLevel::P5,
            num_classes: 4,
            input_size: 96,
            state_dim: 8,
            psa_branches: 4,
            psa_reduction: 4,
        }
    }
}

pub const CONFIG_KEYS: [&str; 11] = [
    "enable_mamba",
    "enable_psa",
    "enable_sppelan",
    "width",
    "depths",
    "psa_level",
    "num_classes",
    "input_size",
    "state_dim",
    "psa_branches",
    "psa_reduction",
];

impl ModelConfig {
    /// Channel count of pyramid level `idx` (0 = P3).
    pub fn level_width(&self, idx: usize) -> usize {
        self.width * (2 << idx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 {
            return Err(Error::Config("width must be at least 2".into()));
        }
        if self.input_size < 32 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.state_dim == 0 {
            return Err(Error::Config("state_dim must be positive".into()));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(Error::Config("stage depths must all be positive".into()));
        }
        if self.enable_psa {
            if self.psa_branches == 0 || self.psa_reduction == 0 {
                return Err(Error::Config(
                    "psa_branches and psa_reduction must be positive".into(),
                ));
            }
            let ch = self.level_width(self.psa_level.index());
            if ch % self.psa_branches != 0 {
                return Err(Error::Config(format!(
                    "psa at {} has {ch} channels, not divisible into {} branches",
                    self.psa_level.as_str(),
                    self.psa_branches
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("enable_mamba", self.enable_mamba);
        kv.set("enable_psa", self.enable_psa);
        kv.set("enable_sppelan", self.enable_sppelan);
        kv.set("width", self.width);
        kv.set(
            "depths",
            self.depths.map(|d| d.to_string()).join(","),
        );
        kv.set("psa_level", self.psa_level.as_str());
        kv.set("num_classes", self.num_classes);
        kv.set("input_size", self.input_size);
        kv.set("state_dim", self.state_dim);
        kv.set("psa_branches", self.psa_branches);
        kv.set("psa_reduction", self.psa_reduction);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.require_known(&CONFIG_KEYS)?;
        let depths_vec = kv.get_usize_list("depths")?;
        let depths: [usize; 4] = depths_vec.as_slice().try_into().map_err(|_| {
            Error::Config(format!("depths needs 4 entries, got {}", depths_vec.len()))
        })?;
        let cfg = Self {
            enable_mamba: kv.get_bool("enable_mamba")?,
            enable_psa: kv.get_bool("enable_psa")?,
            enable_sppelan: kv.get_bool("enable_sppelan")?,
            width: kv.get_usize("width")?,
            depths,
            psa_level: PsaLevel::parse(kv.get_str("psa_level")?)?,
            num_classes: kv.get_usize("num_classes")?,
            input_size: kv.get_usize("input_size")?,
            state_dim: kv.get_usize("state_dim")?,
            psa_branches: kv.get_usize("psa_branches")?,
            psa_reduction: kv.get_usize("psa_reduction")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One pyramid level of raw head output: `[N, 4 + 1 + num_classes, H, W]`
/// with channels ordered left, top, right, bottom offsets (sigmoid-encoded,
/// each spanning 0..2 cells), objectness logit, then class logits.
pub struct LevelPred {
    pub stride: usize,
    pub map: Tensor,
}

pub struct RawPrediction {
    /// P3, P4, P5 in order.
    pub levels: Vec<LevelPred>,
    /// Input image side in pixels, for decoding back to absolute boxes.
    pub input_size: usize,
    pub num_classes: usize,
}

/// A repeated run of stage blocks at constant width.
struct Stage {
    blocks: Vec<StageBlock>,
}

impl Stage {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig, channels: usize, depth: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(depth);
        for _ in 0..depth {
            blocks.push(if cfg.enable_mamba {
                StageBlock::Odss(OdssBlock::new(rng, channels, cfg.state_dim, 3, 2)?)
            } else {
                StageBlock::Plain(PlainResidual::new(rng, channels)?)
            });
        }
        Ok(Self { blocks })
    }

    fn forward(&mut self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for b in &mut self.blocks {
            y = b.forward(tape, &y, train)?;
        }
        Ok(y)
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &i.to_string()), f);
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    stem: Stem,
    s1: Stage,
    v1: Vcm,
    s2: Stage,
    v2: Vcm,
    s3: Stage,
    v3: Vcm,
    s4: Stage,
    sppelan: Option<Sppelan>,
    psa: Option<Psa>,
    // Top-down path.
    td_fuse4: ConvBnSilu,
    td_block4: StageBlock,
    td_fuse3: ConvBnSilu,
    td_block3: StageBlock,
    // Bottom-up path; convs alone do the downsampling.
    bu_down3: ConvBnSilu,
    bu_fuse4: ConvBnSilu,
    bu_block4: StageBlock,
    bu_down4: ConvBnSilu,
    bu_fuse5: ConvBnSilu,
    bu_block5: StageBlock,
    head3: Conv2d,
    head4: Conv2d,
    head5: Conv2d,
}

fn neck_block(rng: &mut ChaCha8Rng, cfg: &ModelConfig, channels: usize) -> Result<StageBlock> {
    Ok(if cfg.enable_mamba {
        StageBlock::Odss(OdssBlock::new(rng, channels, cfg.state_dim, 3, 2)?)
    } else {
        StageBlock::Plain(PlainResidual::new(rng, channels)?)
    })
}

impl Model {
    /// Deterministic build: one seeded stream feeds every initializer in a
    /// fixed order, so equal (config, seed) gives equal weights.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let w = cfg.width;
        let (c3, c4, c5) = (2 * w, 4 * w, 8 * w);
        let head_ch = 4 + 1 + cfg.num_classes;

        let stem = Stem::new(rng, 3, (w / 2).max(2), w)?;
        let s1 = Stage::new(rng, cfg, w, cfg.depths[0])?;
        let v1 = Vcm::new(rng, w, c3)?;
        let s2 = Stage::new(rng, cfg, c3, cfg.depths[1])?;
        let v2 = Vcm::new(rng, c3, c4)?;
        let s3 = Stage::new(rng, cfg, c4, cfg.depths[2])?;
        let v3 = Vcm::new(rng, c4, c5)?;
        let s4 = Stage::new(rng, cfg, c5, cfg.depths[3])?;

        let sppelan = if cfg.enable_sppelan {
            Some(Sppelan::new(rng, c5, c5 / 2, c5, 3)?)
        } else {
            None
        };
        let psa = if cfg.enable_psa {
            let channels = cfg.level_width(cfg.psa_level.index());
            Some(Psa::new(
                rng,
                PsaConfig {
                    channels,
                    branches: cfg.psa_branches,
                    reduction: cfg.psa_reduction,
                },
            )?)
        } else {
            None
        };

        let td_fuse4 = ConvBnSilu::new(rng, c5 + c4, c4, 1, 1, 0)?;
        let td_block4 = neck_block(rng, cfg, c4)?;
        let td_fuse3 = ConvBnSilu::new(rng, c4 + c3, c3, 1, 1, 0)?;
        let td_block3 = neck_block(rng, cfg, c3)?;
        let bu_down3 = ConvBnSilu::new(rng, c3, c3, 3, 2, 1)?;
        let bu_fuse4 = ConvBnSilu::new(rng, c3 + c4, c4, 1, 1, 0)?;
        let bu_block4 = neck_block(rng, cfg, c4)?;
        let bu_down4 = ConvBnSilu::new(rng, c4, c4, 3, 2, 1)?;
        let bu_fuse5 = ConvBnSilu::new(rng, c4 + c5, c5, 1, 1, 0)?;
        let bu_block5 = neck_block(rng, cfg, c5)?;

        let mut head3 = Conv2d::new(rng, c3, head_ch, 1, 1, 0, 1, true)?;
        let mut head4 = Conv2d::new(rng, c4, head_ch, 1, 1, 0, 1, true)?;
        let mut head5 = Conv2d::new(rng, c5, head_ch, 1, 1, 0, 1, true)?;
        // Start objectness strongly negative so the dense background does
        // not swamp the early loss.
        for h in [&mut head3, &mut head4, &mut head5] {
            if let Some(b) = h.b.as_mut() {
                b.data_mut()[4] = -4.0;
            }
        }

        Ok(Model {
            cfg: cfg.clone(),
            stem,
            s1,
            v1,
            s2,
            v2,
            s3,
            v3,
            s4,
            sppelan,
            psa,
            td_fuse4,
            td_block4,
            td_fuse3,
            td_block3,
            bu_down3,
            bu_fuse4,
            bu_block4,
            bu_down4,
            bu_fuse5,
            bu_block5,
            head3,
            head4,
            head5,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<RawPrediction> {
        self.forward_inner(tape, x, train, None)
    }

    /// Forward pass that also clones out the named intermediate feature maps
    /// (the dump-features inventory). Optional blocks only appear when built.
    pub fn forward_features(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        train: bool,
    ) -> Result<(RawPrediction, Vec<(String, Tensor)>)> {
        let mut taps = Vec::new();
        let pred = self.forward_inner(tape, x, train, Some(&mut taps))?;
        Ok((pred, taps))
    }

    fn forward_inner(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        train: bool,
        mut taps: Option<&mut Vec<(String, Tensor)>>,
    ) -> Result<RawPrediction> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != 3 || xs[2] != xs[3] {
            return Err(Error::Dim(format!(
                "forward wants [N, 3, S, S] images, got {xs:?}"
            )));
        }
        let s = xs[2];
        if s % 32 != 0 || s == 0 {
            return Err(Error::Dim(format!("image side {s} is not a multiple of 32")));
        }
        let tap = |name: &str, t: &Tensor, taps: &mut Option<&mut Vec<(String, Tensor)>>| {
            if let Some(v) = taps.as_deref_mut() {
                v.push((name.to_string(), t.detached()));
            }
        };

        let y = self.stem.forward(tape, x, train)?;
        tap("stem", &y, &mut taps);
        let y = self.s1.forward(tape, &y, train)?;
        let y = self.v1.forward(tape, &y, train)?;
        let mut p3 = self.s2.forward(tape, &y, train)?;
        tap("backbone.p3", &p3, &mut taps);
        let y = self.v2.forward(tape, &p3, train)?;
        let mut p4 = self.s3.forward(tape, &y, train)?;
        tap("backbone.p4", &p4, &mut taps);
        let y = self.v3.forward(tape, &p4, train)?;
        let mut p5 = self.s4.forward(tape, &y, train)?;
        tap("backbone.p5", &p5, &mut taps);

        if let Some(sp) = self.sppelan.as_mut() {
            p5 = sp.forward(tape, &p5)?;
            tap("sppelan", &p5, &mut taps);
        }
        if let Some(psa) = self.psa.as_mut() {
            match self.cfg.psa_level {
                PsaLevel::P3 => p3 = psa.forward(tape, &p3)?,
                PsaLevel::P4 => p4 = psa.forward(tape, &p4)?,
                PsaLevel::P5 => p5 = psa.forward(tape, &p5)?,
            }
            let t = match self.cfg.psa_level {
                PsaLevel::P3 => &p3,
                PsaLevel::P4 => &p4,
                PsaLevel::P5 => &p5,
            };
            tap("psa", t, &mut taps);
        }

        // Top-down: coarse features upsampled into finer levels.
        let up5 = ops::upsample_nearest2(tape, &p5)?;
        let cat4 = ops::concat_channels(tape, &[&up5, &p4])?;
        let t4 = self.td_fuse4.forward(tape, &cat4, train)?;
        let n4 = self.td_block4.forward(tape, &t4, train)?;
        let up4 = ops::upsample_nearest2(tape, &n4)?;
        let cat3 = ops::concat_channels(tape, &[&up4, &p3])?;
        let t3 = self.td_fuse3.forward(tape, &cat3, train)?;
        let n3 = self.td_block3.forward(tape, &t3, train)?;

        // Bottom-up: stride-2 convs push detail back down the pyramid.
        let d3 = self.bu_down3.forward(tape, &n3, train)?;
        let cat4b = ops::concat_channels(tape, &[&d3, &n4])?;
        let b4 = self.bu_fuse4.forward(tape, &cat4b, train)?;
        let o4 = self.bu_block4.forward(tape, &b4, train)?;
        let d4 = self.bu_down4.forward(tape, &o4, train)?;
        let cat5b = ops::concat_channels(tape, &[&d4, &p5])?;
        let b5 = self.bu_fuse5.forward(tape, &cat5b, train)?;
        let o5 = self.bu_block5.forward(tape, &b5, train)?;
        tap("neck.p3", &n3, &mut taps);
        tap("neck.p4", &o4, &mut taps);
        tap("neck.p5", &o5, &mut taps);

        let m3 = self.head3.forward(tape, &n3)?;
        let m4 = self.head4.forward(tape, &o4)?;
        let m5 = self.head5.forward(tape, &o5)?;
        Ok(RawPrediction {
            levels: vec![
                LevelPred { stride: 8, map: m3 },
                LevelPred { stride: 16, map: m4 },
                LevelPred { stride: 32, map: m5 },
            ],
            input_size: s,
            num_classes: self.cfg.num_classes,
        })
    }

    pub fn visit(&mut self, f: &mut ParamFn) {
        self.stem.visit("stem", f);
        self.s1.visit("backbone.s1", f);
        self.v1.visit("backbone.v1", f);
        self.s2.visit("backbone.s2", f);
        self.v2.visit("backbone.v2", f);
        self.s3.visit("backbone.s3", f);
        self.v3.visit("backbone.v3", f);
        self.s4.visit("backbone.s4", f);
        if let Some(sp) = self.sppelan.as_mut() {
            sp.visit("sppelan", f);
        }
        if let Some(psa) = self.psa.as_mut() {
            psa.visit("psa", f);
        }
        self.td_fuse4.visit("neck.tf4", f);
        self.td_block4.visit("neck.tb4", f);
        self.td_fuse3.visit("neck.tf3", f);
        self.td_block3.visit("neck.tb3", f);
        self.bu_down3.visit("neck.d3", f);
        self.bu_fuse4.visit("neck.bf4", f);
        self.bu_block4.visit("neck.bb4", f);
        self.bu_down4.visit("neck.d4", f);
        self.bu_fuse5.visit("neck.bf5", f);
        self.bu_block5.visit("neck.bb5", f);
        self.head3.visit("head3", f);
        self.head4.visit("head4", f);
        self.head5.visit("head5", f);
    }

    /// (trainable scalars, buffer scalars) over the whole model.
    pub fn param_counts(&mut self) -> (usize, usize) {
        let mut trainable = 0usize;
        let mut buffers = 0usize;
        self.visit(&mut |_, slot, t| {
            if slot == Slot::Buffer {
                buffers += t.numel();
            } else {
                trainable += t.numel();
            }
        });
        (trainable, buffers)
    }

    /// Ordered (name, slot) inventory of every tensor in the model.
    pub fn key_inventory(&mut self) -> Vec<(String, Slot)> {
        let mut keys = Vec::new();
        self.visit(&mut |name, slot, _| keys.push((name.to_string(), slot)));
        keys
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        let mut entries = Vec::new();
        self.visit(&mut |name, _, t| entries.push((name.to_string(), t.detached())));
        Checkpoint {
            config_text: self.cfg.to_kv().to_text(),
            entries,
        }
    }

    /// Rebuild a model from a checkpoint: the embedded config decides the
    /// architecture, then every entry must match the model's inventory
    /// exactly (same names, same order, same shapes).
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        let kv = KvConfig::parse(&ck.config_text, "checkpoint config")?;
        let cfg = ModelConfig::from_kv(&kv)?;
        let mut model = Model::build(&cfg, 0)?;
        let mut idx = 0usize;
        let mut mismatch: Option<String> = None;
        model.visit(&mut |name, _, t| {
            if mismatch.is_some() {
                return;
            }
            match ck.entries.get(idx) {
                None => mismatch = Some(format!("checkpoint is missing entry {name:?}")),
                Some((ck_name, ck_t)) => {
                    if ck_name != name {
                        mismatch = Some(format!(
                            "checkpoint entry {idx} is {ck_name:?}, model expects {name:?}"
                        ));
                    } else if ck_t.shape() != t.shape() {
                        mismatch = Some(format!(
                            "entry {name:?} has shape {:?}, model expects {:?}",
                            ck_t.shape(),
                            t.shape()
                        ));
                    } else {
                        *t = ck_t.detached();
                    }
                }
            }
            idx += 1;
        });
        if let Some(msg) = mismatch {
            return Err(Error::Data(msg));
        }
        if idx != ck.entries.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} extra entries (first: {:?})",
                ck.entries.len() - idx,
                ck.entries[idx].0
            )));
        }
        Ok(model)
    }
}

//! Architectural units: Simple Stem, Vision Clue Merge, LS/RG/ODSS blocks,
//! pyramid-split attention, and SPPELAN pooling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvBnSilu, LayerNormChannels, Linear, ParamFn, Slot};
use crate::ssm::{ss2d_scan, SelectiveProjection, SsmChannelParams};
use crate::tensor::ops;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

// ---------------------------------------------------------------------------
// Simple Stem
// ---------------------------------------------------------------------------

/// Two k3/s2/p1 conv-BN-SiLU stages; H/4 x W/4 for divisible inputs.
pub struct Stem {
    pub c1: ConvBnSilu,
    pub c2: ConvBnSilu,
}

impl Stem {
    pub fn new<R: Rng>(rng: &mut R, in_ch: usize, mid_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            c1: ConvBnSilu::new(rng, in_ch, mid_ch, 3, 2, 1)?,
            c2: ConvBnSilu::new(rng, mid_ch, out_ch, 3, 2, 1)?,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[2] < 4 || s[3] < 4 {
            return Err(Error::Dim(format!(
                "stem: want NCHW with H, W >= 4, got {:?}",
                s
            )));
        }
        let y = self.c1.forward(tape, x, train)?;
        self.c2.forward(tape, &y, train)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        self.c1.visit(&join(prefix, "c1"), f);
        self.c2.visit(&join(prefix, "c2"), f);
    }
}

// ---------------------------------------------------------------------------
// Vision Clue Merge
// ---------------------------------------------------------------------------

/// Lossless 2x2 phase rearrangement (C -> 4C, spatial halved) followed by a
/// 1x1 conv-BN-SiLU projection.
pub struct Vcm {
    pub fuse: ConvBnSilu,
}

impl Vcm {
    pub fn new<R: Rng>(rng: &mut R, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            fuse: ConvBnSilu::new(rng, 4 * in_ch, out_ch, 1, 1, 0)?,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<Tensor> {
        let stacked = ops::phase_split(tape, x)?;
        self.fuse.forward(tape, &stacked, train)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        self.fuse.visit(&join(prefix, "fuse"), f);
    }
}

// ---------------------------------------------------------------------------
// LS block
// ---------------------------------------------------------------------------

/// Local detail branch: x + pointwise(SiLU(BN(depthwise3x3(x)))).
pub struct LsBlock {
    pub dw: Conv2d,
    pub bn: BatchNorm2d,
    pub pw: Conv2d,
}

impl LsBlock {
    pub fn new<R: Rng>(rng: &mut R, channels: usize, kernel: usize) -> Result<Self> {
        let pad = (kernel - 1) / 2;
        Ok(Self {
            dw: Conv2d::new(rng, channels, channels, kernel, 1, pad, channels, false)?,
            bn: BatchNorm2d::new(channels),
            pw: Conv2d::new(rng, channels, channels, 1, 1, 0, 1, true)?,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.dw.forward(tape, x)?;
        let y = self.bn.forward(tape, &y, train)?;
        let y = ops::silu(tape, &y)?;
        let y = self.pw.forward(tape, &y)?;
        ops::add(tape, x, &y)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        self.dw.visit(&join(prefix, "dw"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.pw.visit(&join(prefix, "pw"), f);
    }
}

// ---------------------------------------------------------------------------
// RG block
// ---------------------------------------------------------------------------

/// Residual gate: u = expand(x); y = x + contract(u * sigmoid(dw3x3(u))).
pub struct RgBlock {
    pub expand: Conv2d,
    pub gate: Conv2d,
    pub contract: Conv2d,
}

impl RgBlock {
    pub fn new<R: Rng>(rng: &mut R, channels: usize, expansion: usize) -> Result<Self> {
        let e = channels * expansion.max(1);
        Ok(Self {
            expand: Conv2d::new(rng, channels, e, 1, 1, 0, 1, true)?,
            gate: Conv2d::new(rng, e, e, 3, 1, 1, e, true)?,
            contract: Conv2d::new(rng, e, channels, 1, 1, 0, 1, true)?,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let u = self.expand.forward(tape, x)?;
        let g = self.gate.forward(tape, &u)?;
        let g = ops::sigmoid(tape, &g)?;
        let gated = ops::mul(tape, &u, &g)?;
        let y = self.contract.forward(tape, &gated)?;
        ops::add(tape, x, &y)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.gate.visit(&join(prefix, "gate"), f);
        self.contract.visit(&join(prefix, "contract"), f);
    }
}

// ---------------------------------------------------------------------------
// SS2D layer: norm + projections around the four-route scan
// ---------------------------------------------------------------------------

pub struct Ss2dLayer {
    pub norm: LayerNormChannels,
    pub proj_in: Conv2d,
    pub params: SsmChannelParams,
    pub proj: SelectiveProjection,
    pub proj_out: Conv2d,
}

impl Ss2dLayer {
    pub fn new<R: Rng>(rng: &mut R, channels: usize, state_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNormChannels::new(channels),
            proj_in: Conv2d::new(rng, channels, channels, 1, 1, 0, 1, true)?,
            params: SsmChannelParams::init(channels, state_dim)?,
            proj: SelectiveProjection::init(channels, state_dim, rng)?,
            proj_out: Conv2d::new(rng, channels, channels, 1, 1, 0, 1, true)?,
        })
    }

    /// norm -> 1x1 in-projection -> four-route scan -> 1x1 out-projection.
    /// The caller adds the residual.
    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let y = self.norm.forward(tape, x)?;
        let y = self.proj_in.forward(tape, &y)?;
        let y = ss2d_scan(tape, &y, &self.params, &self.proj)?;
        self.proj_out.forward(tape, &y)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.proj_in.visit(&join(prefix, "pin"), f);
        f(&join(prefix, "a_log"), Slot::Plain, &mut self.params.a_log);
        f(&join(prefix, "d_skip"), Slot::Plain, &mut self.params.d_skip);
        f(&join(prefix, "w_delta"), Slot::Plain, &mut self.proj.w_delta);
        f(&join(prefix, "b_delta"), Slot::Plain, &mut self.proj.b_delta);
        f(&join(prefix, "w_b"), Slot::Plain, &mut self.proj.w_b);
        f(&join(prefix, "w_c"), Slot::Plain, &mut self.proj.w_c);
        self.proj_out.visit(&join(prefix, "pout"), f);
    }
}

// ---------------------------------------------------------------------------
// ODSS block
// ---------------------------------------------------------------------------

/// LS -> (norm + SS2D, residual) -> RG; shape preserving.
pub struct OdssBlock {
    pub ls: LsBlock,
    pub ss2d: Ss2dLayer,
    pub rg: RgBlock,
}

impl OdssBlock {
    pub fn new<R: Rng>(
        rng: &mut R,
        channels: usize,
        state_dim: usize,
        ls_kernel: usize,
        rg_expansion: usize,
    ) -> Result<Self> {
        Ok(Self {
            ls: LsBlock::new(rng, channels, ls_kernel)?,
            ss2d: Ss2dLayer::new(rng, channels, state_dim)?,
            rg: RgBlock::new(rng, channels, rg_expansion)?,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<Tensor> {
        let y1 = self.ls.forward(tape, x, train)?;
        let scan = self.ss2d.forward(tape, &y1)?;
        let y2 = ops::add(tape, &y1, &scan)?;
        self.rg.forward(tape, &y2)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        self.ls.visit(&join(prefix, "ls"), f);
        self.ss2d.visit(&join(prefix, "ss2d"), f);
        self.rg.visit(&join(prefix, "rg"), f);
    }
}

/// Baseline stand-in for ODSS when the scan is ablated away:
/// x + ConvBnSilu(1x1). The 1x1 kernel keeps this arm strictly smaller in
/// parameters than the ODSS block it replaces.
pub struct PlainResidual {
    pub body: ConvBnSilu,
}

impl PlainResidual {
    pub fn new<R: Rng>(rng: &mut R, channels: usize) -> Result<Self> {
        Ok(Self {
            body: ConvBnSilu::new(rng, channels, channels, 1, 1, 0)?,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.body.forward(tape, x, train)?;
        ops::add(tape, x, &y)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        self.body.visit(&join(prefix, "body"), f);
    }
}

/// Either arm of the mamba ablation switch, so the model stores one type.
pub enum StageBlock {
    Odss(OdssBlock),
    Plain(PlainResidual),
}

impl StageBlock {
    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            StageBlock::Odss(b) => b.forward(tape, x, train),
            StageBlock::Plain(b) => b.forward(tape, x, train),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        match self {
            StageBlock::Odss(b) => b.visit(prefix, f),
            StageBlock::Plain(b) => b.visit(prefix, f),
        }
    }
}

// ---------------------------------------------------------------------------
// Pyramid-split attention
// ---------------------------------------------------------------------------

pub struct PsaConfig {
    pub channels: usize,
    pub branches: usize,
    pub reduction: usize,
}

impl PsaConfig {
    pub fn kernel(&self, i: usize) -> usize {
        3 + 2 * i
    }

    pub fn groups(&self, i: usize, branch_ch: usize) -> usize {
        let canon = [1usize, 4, 8, 16];
        gcd(canon[i.min(3)], branch_ch)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub struct PsaBranch {
    pub conv: Conv2d,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Split into S channel groups, convolve each at its own scale, weight each
/// branch by a squeeze-excite descriptor, normalize weights across branches
/// with a softmax, recalibrate, and concatenate.
pub struct Psa {
    pub cfg: PsaConfig,
    pub branches: Vec<PsaBranch>,
}

impl Psa {
    pub fn new<R: Rng>(rng: &mut R, cfg: PsaConfig) -> Result<Self> {
        if cfg.branches == 0 || cfg.channels % cfg.branches != 0 {
            return Err(Error::Config(format!(
                "psa: channels {} not divisible by branches {}",
                cfg.channels, cfg.branches
            )));
        }
        let bc = cfg.channels / cfg.branches;
        let hidden = (cfg.channels / (cfg.branches * cfg.reduction)).max(1);
        let mut branches = Vec::with_capacity(cfg.branches);
        for i in 0..cfg.branches {
            let k = cfg.kernel(i);
            let g = cfg.groups(i, bc);
            branches.push(PsaBranch {
                conv: Conv2d::new(rng, bc, bc, k, 1, (k - 1) / 2, g, true)?,
                fc1: Linear::new(rng, bc, hidden)?,
                fc2: Linear::new(rng, hidden, bc)?,
            });
        }
        Ok(Self { cfg, branches })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.channels {
            return Err(Error::Dim(format!(
                "psa: want NCHW with C = {}, got {:?}",
                self.cfg.channels, s
            )));
        }
        let n = s[0];
        let bc = self.cfg.channels / self.cfg.branches;
        let xs = ops::split_channels(tape, x, &vec![bc; self.cfg.branches])?;

        let mut feats = Vec::with_capacity(self.cfg.branches);
        let mut weights = Vec::with_capacity(self.cfg.branches);
        for (xi, br) in xs.iter().zip(self.branches.iter()) {
            let fi = br.conv.forward(tape, xi)?;
            // descriptor pools the split input, so a constant input v yields
            // g_c = v exactly regardless of the branch conv
            let d = ops::global_avg_pool(tape, xi)?;
            let d = ops::reshape(tape, &d, &[n, bc])?;
            let h = br.fc1.forward(tape, &d)?;
            let h = ops::relu(tape, &h)?;
            let w = br.fc2.forward(tape, &h)?;
            let w = ops::sigmoid(tape, &w)?;
            weights.push(ops::reshape(tape, &w, &[n, 1, bc])?);
            feats.push(fi);
        }
        // softmax across the branch axis, per (image, channel slot)
        let stacked = {
            let refs: Vec<&Tensor> = weights.iter().collect();
            ops::concat_axis(tape, &refs, 1)?
        };
        let norm = ops::softmax_axis(tape, &stacked, 1)?;
        let parts = ops::split_axis(tape, &norm, 1, &vec![1; self.cfg.branches])?;

        let mut out = Vec::with_capacity(self.cfg.branches);
        for (fi, wi) in feats.iter().zip(parts.iter()) {
            let wi = ops::reshape(tape, wi, &[n, bc])?;
            out.push(ops::scale_channels(tape, fi, &wi)?);
        }
        let refs: Vec<&Tensor> = out.iter().collect();
        ops::concat_channels(tape, &refs)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        for (i, br) in self.branches.iter_mut().enumerate() {
            br.conv.visit(&join(prefix, &format!("b{i}.conv")), f);
            br.fc1.visit(&join(prefix, &format!("b{i}.fc1")), f);
            br.fc2.visit(&join(prefix, &format!("b{i}.fc2")), f);
        }
    }
}

// ---------------------------------------------------------------------------
// SPPELAN
// ---------------------------------------------------------------------------

/// 1x1 reduce, N cascaded 5x5/s1/p2 max pools, concat of all stages, 1x1
/// fuse. The convs are linear (no norm or activation) per the defining
/// equations.
pub struct Sppelan {
    pub reduce: Conv2d,
    pub fuse: Conv2d,
    pub stages: usize,
}

impl Sppelan {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        hidden_ch: usize,
        out_ch: usize,
        stages: usize,
    ) -> Result<Self> {
        if stages == 0 {
            return Err(Error::Config("sppelan: need at least one pool stage".into()));
        }
        Ok(Self {
            reduce: Conv2d::new(rng, in_ch, hidden_ch, 1, 1, 0, 1, true)?,
            fuse: Conv2d::new(rng, (stages + 1) * hidden_ch, out_ch, 1, 1, 0, 1, true)?,
            stages,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let f0 = self.reduce.forward(tape, x)?;
        let mut stages = vec![f0];
        for _ in 0..self.stages {
            let prev = stages.last().unwrap();
            stages.push(ops::maxpool2d(tape, prev, 5, 1, 2)?);
        }
        let refs: Vec<&Tensor> = stages.iter().collect();
        let cat = ops::concat_channels(tape, &refs)?;
        self.fuse.forward(tape, &cat)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.fuse.visit(&join(prefix, "fuse"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_x(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen::<f64>() - 0.5).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn stem_stride_arithmetic() {
        let mut r = rng(1);
        let mut stem = Stem::new(&mut r, 3, 16, 32).unwrap();
        let mut tape = Tape::new();
        let x = rand_x(&mut r, &[1, 3, 64, 64]);
        let y = stem.forward(&mut tape, &x, true).unwrap();
        assert_eq!(y.shape(), &[1, 32, 16, 16]);
        let x7 = rand_x(&mut r, &[1, 3, 7, 7]);
        let y7 = stem.forward(&mut tape, &x7, true).unwrap();
        assert_eq!(y7.shape(), &[1, 32, 2, 2]);
        let tiny = rand_x(&mut r, &[1, 3, 3, 3]);
        assert!(stem.forward(&mut tape, &tiny, true).is_err());
    }

    #[test]
    fn vcm_halves_spatial() {
        let mut r = rng(2);
        let mut vcm = Vcm::new(&mut r, 8, 16).unwrap();
        let mut tape = Tape::new();
        let x = rand_x(&mut r, &[2, 8, 6, 10]);
        let y = vcm.forward(&mut tape, &x, true).unwrap();
        assert_eq!(y.shape(), &[2, 16, 3, 5]);
        let odd = rand_x(&mut r, &[1, 8, 5, 6]);
        assert!(vcm.forward(&mut tape, &odd, true).is_err());
    }

    #[test]
    fn ls_zero_inner_weights_is_identity() {
        let mut r = rng(3);
        let mut ls = LsBlock::new(&mut r, 4, 3).unwrap();
        ls.pw.zero();
        let mut tape = Tape::new();
        let x = rand_x(&mut r, &[1, 4, 5, 5]);
        let y = ls.forward(&mut tape, &x, true).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn rg_zero_contract_is_identity() {
        let mut r = rng(4);
        let mut rg = RgBlock::new(&mut r, 4, 2).unwrap();
        rg.contract.zero();
        let mut tape = Tape::new();
        let x = rand_x(&mut r, &[1, 4, 5, 5]);
        let y = rg.forward(&mut tape, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn rg_saturated_gate_equals_ungated() {
        let mut r = rng(5);
        let mut rg = RgBlock::new(&mut r, 3, 2).unwrap();
        // push the gate conv bias to +50: sigmoid ~ 1 - 2e-22
        rg.gate.w.data_mut().fill(0.0);
        rg.gate.b.as_mut().unwrap().data_mut().fill(50.0);
        let mut tape = Tape::new();
        let x = rand_x(&mut r, &[1, 3, 4, 4]);
        let gated = rg.forward(&mut tape, &x).unwrap();
        // ungated variant computed by hand: x + contract(expand(x))
        let u = rg.expand.forward(&mut tape, &x).unwrap();
        let v = rg.contract.forward(&mut tape, &u).unwrap();
        let want = ops::add(&mut tape, &x, &v).unwrap();
        for (a, b) in gated.data().iter().zip(want.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn odss_preserves_shape_and_reduces_to_identity() {
        let mut r = rng(6);
        let mut blk = OdssBlock::new(&mut r, 8, 2, 3, 2).unwrap();
        let mut tape = Tape::new();
        let x = rand_x(&mut r, &[1, 8, 6, 10]);
        let y = blk.forward(&mut tape, &x, true).unwrap();
        assert_eq!(y.shape(), x.shape());

        blk.ls.pw.zero();
        blk.ss2d.proj_out.zero();
        blk.rg.contract.zero();
        let y2 = blk.forward(&mut tape, &x, true).unwrap();
        assert_eq!(y2.data(), x.data());
    }

    #[test]
    fn psa_shape_and_config_errors() {
        let mut r = rng(7);
        let mut psa = Psa::new(
            &mut r,
            PsaConfig {
                channels: 16,
                branches: 4,
                reduction: 4,
            },
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = rand_x(&mut r, &[2, 16, 4, 4]);
        let y = psa.forward(&mut tape, &x).unwrap();
        assert_eq!(y.shape(), x.shape());

        assert!(Psa::new(
            &mut r,
            PsaConfig {
                channels: 10,
                branches: 4,
                reduction: 4,
            },
        )
        .is_err());
    }

    #[test]
    fn psa_single_branch_attention_is_noop() {
        let mut r = rng(8);
        let mut psa = Psa::new(
            &mut r,
            PsaConfig {
                channels: 6,
                branches: 1,
                reduction: 2,
            },
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = rand_x(&mut r, &[1, 6, 3, 3]);
        let y = psa.forward(&mut tape, &x).unwrap();
        // softmax over one branch is exactly 1.0, so output == branch conv
        let want = psa.branches[0].conv.forward(&mut tape, &x).unwrap();
        assert_eq!(y.data(), want.data());
    }

    #[test]
    fn sppelan_channel_arithmetic() {
        let mut r = rng(9);
        let mut spp = Sppelan::new(&mut r, 32, 16, 32, 3).unwrap();
        assert_eq!(spp.fuse.w.shape(), &[32, 64, 1, 1]);
        let mut tape = Tape::new();
        let x = rand_x(&mut r, &[1, 32, 6, 6]);
        let y = spp.forward(&mut tape, &x).unwrap();
        assert_eq!(y.shape(), &[1, 32, 6, 6]);
    }

    #[test]
    fn sppelan_constant_input_passthrough() {
        let mut r = rng(10);
        let mut spp = Sppelan::new(&mut r, 4, 3, 5, 3).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::full(&[1, 4, 5, 5], 0.75);
        let y = spp.forward(&mut tape, &x).unwrap();
        // constant in -> F_0 constant per channel -> pools change nothing ->
        // output is the fused conv of the constant, itself constant
        for c in 0..5 {
            let v = y.data()[c * 25];
            for p in 0..25 {
                assert_eq!(y.data()[c * 25 + p], v);
            }
        }
    }
}

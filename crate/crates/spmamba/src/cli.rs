//! Command-line front end: dataset generation, training, evaluation,
//! gradient checking, the module ablation sweep and feature-map dumps.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.
//! Flag resolution for train goes defaults, then `--config`, then `--set`,
//! then explicit flags; the effective result is echoed to
//! `config.resolved.txt` in the output directory.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{LsBlock, OdssBlock, Psa, PsaConfig, RgBlock, Sppelan, Stem, Vcm};
use crate::checkpoint::Checkpoint;
use crate::config::KvConfig;
use crate::data::labels::Label;
use crate::data::load::{load_dir, LoadedSample};
use crate::data::ppm::{parse_ppm, write_ppm};
use crate::data::{generate, SceneSpec, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{
    match_detections, mean_ap, write_class_metrics_csv, write_detections_csv, write_pr_curve_csv,
    parse_detections_csv, Detection, GroundTruth,
};
use crate::model::decode::{decode, CONF_EVAL, CONF_INFERENCE, DEFAULT_NMS_IOU};
use crate::model::loss::compute_loss;
use crate::model::train::{
    batch_tensor, evaluate_map, train_model, TrainConfig, TrainState, TRAIN_KEYS,
};
use crate::model::{Model, ModelConfig, CONFIG_KEYS};
use crate::nn::Slot;
use crate::ssm::{ss2d_scan, ssm_scan, SelectiveProjection, SsmChannelParams};
use crate::tensor::gradcheck::{grad_check, LossFn};
use crate::tensor::ops;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

#[derive(Parser)]
#[command(
    name = "spmamba",
    version,
    about = "Selective state-space toy detector: data, training, evaluation, checks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic four-class detection dataset
    GenData(GenDataArgs),
    /// Train a detector on a generated dataset
    Train(TrainArgs),
    /// Score a checkpoint (or a detections CSV) against a dataset
    Eval(EvalArgs),
    /// Finite-difference gradient checks for every block and the full model
    Gradcheck(GradcheckArgs),
    /// Module ablation sweep over the seven enable-flag combinations
    Ablate(AblateArgs),
    /// Dump intermediate feature maps as grayscale PPM channel mosaics
    DumpFeatures(DumpFeaturesArgs),
}

/// Parse the process arguments and dispatch. Returns the process exit code;
/// clap itself exits 2 on malformed flags and 0 on --help.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let out = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::Gradcheck(a) => cmd_gradcheck(&a),
        Cmd::Ablate(a) => cmd_ablate(&a),
        Cmd::DumpFeatures(a) => cmd_dump_features(&a),
    };
    match out {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenDataArgs {
    /// Number of images to render
    #[arg(long)]
    n: usize,
    /// Scene preset: paper-like (degraded, cluttered) or easy (clean, large
    /// objects)
    #[arg(long, default_value = "paper-like")]
    difficulty: String,
    /// Square image side in pixels [default: 96 from the preset]
    #[arg(long)]
    size: Option<usize>,
    /// Generator seed; every output byte is a function of it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

fn spec_config(difficulty: &str, spec: &SceneSpec) -> KvConfig {
    let mut kv = KvConfig::new();
    kv.set("difficulty", difficulty);
    kv.set("image_size", spec.image_size);
    kv.set("min_instances", spec.min_instances);
    kv.set("max_instances", spec.max_instances);
    kv.set(
        "mixture",
        spec.mixture.map(|w| w.to_string()).join(","),
    );
    kv.set("min_size_frac", spec.min_size_frac);
    kv.set("max_size_frac", spec.max_size_frac);
    kv.set("overlap_cap", spec.overlap_cap);
    kv.set("seed", spec.seed);
    let d = &spec.degradation;
    kv.set("gain_r", d.gain_r);
    kv.set("gain_g", d.gain_g);
    kv.set("gain_b", d.gain_b);
    kv.set("blur_sigma", d.blur_sigma);
    kv.set("contrast", d.contrast);
    kv.set("noise_sigma", d.noise_sigma);
    kv
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<i32> {
    let mut spec = match a.difficulty.as_str() {
        "easy" => SceneSpec::easy(a.seed),
        "paper-like" => SceneSpec::standard(a.seed),
        other => {
            return Err(Error::Usage(format!(
                "difficulty {other:?} is not one of easy, paper-like"
            )))
        }
    };
    if let Some(size) = a.size {
        spec.image_size = size;
    }
    let summary = generate(&spec, a.n, &a.out)?;
    write_file(
        &a.out.join("config.resolved.txt"),
        spec_config(&a.difficulty, &spec).to_text().as_bytes(),
    )?;
    println!(
        "wrote {} images, {} objects (per class {:?}) to {}",
        summary.images,
        summary.objects,
        summary.per_class,
        a.out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Training dataset directory (paired .ppm/.txt files)
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset directory [default: the training directory]
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory for checkpoints, the log CSV and the resolved config
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` config file applied over built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single key=value override, repeatable, applied after --config
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from OUT/last.ckpt + OUT/train_state.ckpt; the stored
    /// configuration governs and the flags below are ignored
    #[arg(long)]
    resume: bool,

    /// Learning rate [default: 0.01]
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum [default: 0.937]
    #[arg(long)]
    momentum: Option<f64>,
    /// Decoupled weight decay on conv and linear weights [default: 0.0005]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Global gradient-norm clip [default: 10]
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Cosine-anneal the lr to this fraction of its start value; 1 keeps it
    /// constant [default: 1]
    #[arg(long)]
    lr_final_frac: Option<f64>,
    /// Images per batch [default: 4]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training epochs [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for weight init and epoch shuffles [default: 0]
    #[arg(long)]
    seed: Option<u64>,

    /// Base channel width [default: 16]
    #[arg(long)]
    width: Option<usize>,
    /// Input image side, a multiple of 32 [default: 96]
    #[arg(long)]
    input_size: Option<usize>,
    /// SSM state dimension per channel [default: 8]
    #[arg(long)]
    state_dim: Option<usize>,
    /// Replace the ODSS blocks with plain residual blocks
    #[arg(long)]
    no_mamba: bool,
    /// Drop the PSA attention stage
    #[arg(long)]
    no_psa: bool,
    /// Drop the SPPELAN pooling stage
    #[arg(long)]
    no_sppelan: bool,
    /// Pyramid level carrying PSA: p3, p4 or p5 [default: p5]
    #[arg(long)]
    psa_level: Option<String>,
}

fn all_config_keys() -> Vec<&'static str> {
    CONFIG_KEYS.iter().chain(TRAIN_KEYS.iter()).copied().collect()
}

/// defaults -> --config file -> --set pairs -> explicit flags.
fn resolve_configs(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let known = all_config_keys();
    let mut kv = ModelConfig::default().to_kv();
    let tdefaults = TrainConfig::default().to_kv();
    for k in tdefaults.keys().map(str::to_string).collect::<Vec<_>>() {
        kv.set(&k, tdefaults.get(&k).expect("own key"));
    }

    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)?;
        let file_kv = KvConfig::parse(&text, &path.display().to_string())?;
        for k in file_kv.keys() {
            if !known.contains(&k) {
                return Err(Error::Usage(format!(
                    "unknown config key {k:?} in {}",
                    path.display()
                )));
            }
        }
        for k in file_kv.keys().map(str::to_string).collect::<Vec<_>>() {
            kv.set(&k, file_kv.get(&k).expect("own key"));
        }
    }
    for pair in &a.set {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(Error::Usage(format!("--set wants key=value, got {pair:?}")));
        };
        let (k, v) = (k.trim(), v.trim());
        if !known.contains(&k) {
            return Err(Error::Usage(format!("--set: unknown config key {k:?}")));
        }
        if v.is_empty() {
            return Err(Error::Usage(format!("--set: empty value for {k:?}")));
        }
        kv.set(k, v);
    }

    if let Some(v) = a.lr {
        kv.set("lr", v);
    }
    if let Some(v) = a.momentum {
        kv.set("momentum", v);
    }
    if let Some(v) = a.weight_decay {
        kv.set("weight_decay", v);
    }
    if let Some(v) = a.clip_norm {
        kv.set("clip_norm", v);
    }
    if let Some(v) = a.lr_final_frac {
        kv.set("lr_final_frac", v);
    }
    if let Some(v) = a.batch_size {
        kv.set("batch_size", v);
    }
    if let Some(v) = a.epochs {
        kv.set("epochs", v);
    }
    if let Some(v) = a.seed {
        kv.set("seed", v);
    }
    if let Some(v) = a.width {
        kv.set("width", v);
    }
    if let Some(v) = a.input_size {
        kv.set("input_size", v);
    }
    if let Some(v) = a.state_dim {
        kv.set("state_dim", v);
    }
    if a.no_mamba {
        kv.set("enable_mamba", false);
    }
    if a.no_psa {
        kv.set("enable_psa", false);
    }
    if a.no_sppelan {
        kv.set("enable_sppelan", false);
    }
    if let Some(v) = &a.psa_level {
        kv.set("psa_level", v);
    }

    let mut model_kv = KvConfig::new();
    let mut train_kv = KvConfig::new();
    for k in kv.keys().map(str::to_string).collect::<Vec<_>>() {
        let v = kv.get(&k).expect("own key");
        if CONFIG_KEYS.contains(&k.as_str()) {
            model_kv.set(&k, v);
        } else {
            train_kv.set(&k, v);
        }
    }
    Ok((ModelConfig::from_kv(&model_kv)?, TrainConfig::from_kv(&train_kv)?))
}

fn resolved_text(mcfg: &ModelConfig, tcfg: &TrainConfig) -> String {
    let mut text = mcfg.to_kv().to_text();
    text.push_str(&tcfg.to_kv().to_text());
    text
}

fn load_split(dir: &Path, what: &str) -> Result<Vec<LoadedSample>> {
    let data = load_dir(dir)?;
    if data.is_empty() {
        return Err(Error::Data(format!(
            "{what} directory {} has no samples",
            dir.display()
        )));
    }
    Ok(data)
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let train_data = load_split(&a.data, "training")?;
    let val_owned;
    let val: &[LoadedSample] = match &a.val {
        Some(p) => {
            val_owned = load_split(p, "validation")?;
            &val_owned
        }
        None => &train_data,
    };

    let started = Instant::now();
    let (mut model, tcfg, mut state) = if a.resume {
        let (cfg, state) = TrainState::load(&a.out.join("train_state.ckpt"))?;
        let ck = Checkpoint::load(&a.out.join("last.ckpt"))?;
        let model = Model::from_checkpoint(&ck)?;
        println!(
            "resuming at epoch {} of {} from {}",
            state.epochs_done,
            cfg.epochs,
            a.out.display()
        );
        (model, cfg, state)
    } else {
        let (mcfg, tcfg) = resolve_configs(a)?;
        let model = Model::build(&mcfg, tcfg.seed)?;
        (model, tcfg, TrainState::fresh())
    };

    fs::create_dir_all(&a.out)?;
    write_file(
        &a.out.join("config.resolved.txt"),
        resolved_text(&model.cfg.clone(), &tcfg).as_bytes(),
    )?;
    let (params, buffers) = model.param_counts();
    println!(
        "{params} trainable parameters ({buffers} buffer scalars); logging to {}",
        a.out.join("train_log.csv").display()
    );

    let report = train_model(&mut model, &train_data, val, &tcfg, &mut state, &a.out)?;
    if let Some(last) = report.rows.last() {
        println!(
            "epoch {}: box {:.4} obj {:.4} cls {:.4} mAP@0.5 {:.4}",
            last.epoch, last.loss_box, last.loss_obj, last.loss_cls, last.map50
        );
        println!(
            "done in {:.1}s; best mAP@0.5 {:.4} at epoch {} ({})",
            started.elapsed().as_secs_f64(),
            report.best_map50,
            report.best_epoch,
            a.out.join("best.ckpt").display()
        );
    } else {
        println!(
            "no epochs to run; wrote {}",
            a.out.join("last.ckpt").display()
        );
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score; not needed with --dets-csv
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset directory with images and labels
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the CSVs
    #[arg(long)]
    out: PathBuf,
    /// Decoder confidence threshold [default: 0.001]
    #[arg(long)]
    conf: Option<f64>,
    /// NMS IoU threshold [default: 0.45]
    #[arg(long)]
    nms_iou: Option<f64>,
    /// Score this detections CSV instead of running the model
    #[arg(long)]
    dets_csv: Option<PathBuf>,
    /// Images per forward batch
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
}

/// Run the model over `data` and decode with explicit thresholds. Image ids
/// are lexicographic sample indices, matching [`load_dir`] order.
fn run_detector(
    model: &mut Model,
    data: &[LoadedSample],
    batch_size: usize,
    conf: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut dets = Vec::new();
    for chunk in ids.chunks(batch_size.max(1)) {
        let samples: Vec<&LoadedSample> = chunk.iter().map(|&i| &data[i]).collect();
        let x = batch_tensor(&samples)?;
        let mut tape = Tape::inference();
        let pred = model.forward(&mut tape, &x, false)?;
        dets.extend(decode(&pred, chunk, conf, nms_iou)?);
    }
    Ok(dets)
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let data = load_split(&a.data, "dataset")?;
    let mut gts: Vec<GroundTruth> = Vec::new();
    for (i, s) in data.iter().enumerate() {
        gts.extend(s.ground_truths(i)?);
    }

    let (dets, num_classes) = if let Some(path) = &a.dets_csv {
        let text = fs::read_to_string(path)?;
        (
            parse_detections_csv(&text, &path.display().to_string())?,
            NUM_CLASSES,
        )
    } else {
        let Some(ckpt) = &a.ckpt else {
            return Err(Error::Usage("eval needs --ckpt or --dets-csv".into()));
        };
        let ck = Checkpoint::load(ckpt)?;
        let mut model = Model::from_checkpoint(&ck)?;
        let dets = run_detector(
            &mut model,
            &data,
            a.batch_size,
            a.conf.unwrap_or(CONF_EVAL),
            a.nms_iou.unwrap_or(DEFAULT_NMS_IOU),
        )?;
        (dets, model.cfg.num_classes)
    };

    let report = mean_ap(&dets, &gts, num_classes)?;
    fs::create_dir_all(&a.out)?;
    let mut buf = Vec::new();
    write_detections_csv(&mut buf, &dets)?;
    write_file(&a.out.join("detections.csv"), &buf)?;
    buf.clear();
    write_class_metrics_csv(&mut buf, &report)?;
    write_file(&a.out.join("class_metrics.csv"), &buf)?;
    for curve in &report.curves {
        buf.clear();
        write_pr_curve_csv(&mut buf, curve)?;
        write_file(
            &a.out.join(format!("pr_class{}.csv", curve.class_id)),
            &buf,
        )?;
    }
    println!(
        "mAP@0.5 {:.6}  mAP@0.5:0.95 {:.6}  ({} detections, {} ground truths)",
        report.map50,
        report.map5095,
        dets.len(),
        gts.len()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    /// Print the check inventory and exit
    #[arg(long)]
    list: bool,
    /// Run only the named check; repeatable [default: all]
    #[arg(long = "only", value_name = "NAME")]
    only: Vec<String>,
    /// Seeds per check
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Corrupt the named check's backward pass so it must fail
    #[arg(long, value_name = "NAME")]
    inject_fault: Option<String>,
}

/// The odss composite and the full model route parameters through a double
/// exponential whose third derivative central differences cannot resolve
/// past ~1e-3; everything else holds the tight tolerance.
const CHECKS: [(&str, f64); 10] = [
    ("stem", 1e-4),
    ("vcm", 1e-4),
    ("ls", 1e-4),
    ("rg", 1e-4),
    ("odss", 1e-3),
    ("psa", 1e-4),
    ("sppelan", 1e-4),
    ("ssm_scan", 1e-4),
    ("ss2d", 1e-4),
    ("model", 1e-3),
];

fn rand_x(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen::<f64>() - 0.5).collect::<Vec<_>>())
        .expect("shape matches data")
}

fn random_seq(l: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        &[l, c],
        (0..l * c).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect::<Vec<_>>(),
    )
    .expect("shape matches data")
}

/// Forward-identity, backward times 1.02: finite differences keep seeing the
/// true loss while the analytic gradient is scaled, so a faulted check fails
/// with a rel err around 2e-2.
fn fault_wrap(tape: &mut Tape, loss: Tensor, fault: bool) -> Result<Tensor> {
    if fault {
        ops::scale_grad(tape, &loss, 1.02)
    } else {
        Ok(loss)
    }
}

macro_rules! collect_params {
    ($block:expr, $inputs:expr) => {
        $block.visit("", &mut |_, slot, t| {
            if slot != Slot::Buffer {
                $inputs.push(t.clone());
            }
        });
    };
}

macro_rules! assign_params {
    ($block:expr, $xs:expr) => {{
        let mut i = 1usize;
        $block.visit("", &mut |_, slot, t| {
            if slot != Slot::Buffer {
                *t = $xs[i].clone();
                i += 1;
            }
        });
    }};
}

/// One named check at one seed; returns the worst relative error.
fn run_check(name: &str, seed: u64, fault: bool) -> Result<f64> {
    macro_rules! block_check {
        ($base:expr, $make:expr, $shape:expr, $fwd:expr) => {{
            let mut r = ChaCha8Rng::seed_from_u64($base + seed);
            let blk = RefCell::new($make(&mut r)?);
            let mut inputs = vec![rand_x(&mut r, $shape)];
            collect_params!(blk.borrow_mut(), inputs);
            let f: LossFn = &|tape, xs| {
                let mut b = blk.borrow_mut();
                assign_params!(b, xs);
                let y = $fwd(&mut *b, tape, &xs[0])?;
                let y2 = ops::mul(tape, &y, &y)?;
                let l = ops::mean_all(tape, &y2)?;
                fault_wrap(tape, l, fault)
            };
            Ok(grad_check(f, &inputs, 1e-5, None)?.max_rel_err)
        }};
    }

    match name {
        "stem" => block_check!(
            100,
            |r: &mut ChaCha8Rng| Stem::new(r, 3, 4, 4),
            &[1, 3, 8, 8],
            |b: &mut Stem, tape: &mut Tape, x: &Tensor| b.forward(tape, x, true)
        ),
        "vcm" => block_check!(
            200,
            |r: &mut ChaCha8Rng| Vcm::new(r, 2, 4),
            &[1, 2, 4, 4],
            |b: &mut Vcm, tape: &mut Tape, x: &Tensor| b.forward(tape, x, true)
        ),
        "ls" => block_check!(
            300,
            |r: &mut ChaCha8Rng| LsBlock::new(r, 4, 3),
            &[1, 4, 6, 6],
            |b: &mut LsBlock, tape: &mut Tape, x: &Tensor| b.forward(tape, x, true)
        ),
        "rg" => block_check!(
            400,
            |r: &mut ChaCha8Rng| RgBlock::new(r, 4, 2),
            &[1, 4, 5, 5],
            |b: &mut RgBlock, tape: &mut Tape, x: &Tensor| b.forward(tape, x)
        ),
        "odss" => block_check!(
            500,
            |r: &mut ChaCha8Rng| OdssBlock::new(r, 8, 2, 3, 2),
            &[1, 8, 6, 6],
            |b: &mut OdssBlock, tape: &mut Tape, x: &Tensor| b.forward(tape, x, true)
        ),
        "psa" => block_check!(
            600,
            |r: &mut ChaCha8Rng| Psa::new(
                r,
                PsaConfig {
                    channels: 8,
                    branches: 4,
                    reduction: 4,
                }
            ),
            &[1, 8, 4, 4],
            |b: &mut Psa, tape: &mut Tape, x: &Tensor| b.forward(tape, x)
        ),
        "sppelan" => block_check!(
            700,
            |r: &mut ChaCha8Rng| Sppelan::new(r, 4, 3, 4, 3),
            &[1, 4, 5, 5],
            |b: &mut Sppelan, tape: &mut Tape, x: &Tensor| b.forward(tape, x)
        ),
        "ssm_scan" => check_scan(seed, fault, false),
        "ss2d" => check_scan(seed, fault, true),
        "model" => check_model(seed, fault),
        other => Err(Error::Usage(format!("no gradient check named {other:?}"))),
    }
}

fn check_scan(seed: u64, fault: bool, two_d: bool) -> Result<f64> {
    let state_dim = 2;
    let f: LossFn = &move |tape, xs| {
        let params = SsmChannelParams {
            a_log: xs[1].clone(),
            d_skip: xs[2].clone(),
            state_dim,
        };
        let proj = SelectiveProjection {
            w_delta: xs[3].clone(),
            b_delta: xs[4].clone(),
            w_b: xs[5].clone(),
            w_c: xs[6].clone(),
        };
        let y = if two_d {
            ss2d_scan(tape, &xs[0], &params, &proj)?
        } else {
            ssm_scan(tape, &xs[0], &params, &proj)?
        };
        let y2 = ops::mul(tape, &y, &y)?;
        let l = ops::sum_all(tape, &y2)?;
        fault_wrap(tape, l, fault)
    };
    let (params, proj, x) = if two_d {
        let p = SsmChannelParams::init(2, state_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(901 + seed);
        let proj = SelectiveProjection::init(2, state_dim, &mut rng)?;
        let mut xr = ChaCha8Rng::seed_from_u64(902 + seed);
        (p, proj, rand_x(&mut xr, &[1, 2, 2, 3]))
    } else {
        let p = SsmChannelParams::init(3, state_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(77 + seed);
        let proj = SelectiveProjection::init(3, state_dim, &mut rng)?;
        (p, proj, random_seq(5, 3, 78 + seed))
    };
    let inputs = vec![
        x,
        params.a_log,
        params.d_skip,
        proj.w_delta,
        proj.b_delta,
        proj.w_b,
        proj.w_c,
    ];
    Ok(grad_check(f, &inputs, 1e-5, None)?.max_rel_err)
}

fn check_model(seed: u64, fault: bool) -> Result<f64> {
    let cfg = ModelConfig {
        width: 8,
        input_size: 32,
        state_dim: 4,
        ..Default::default()
    };
    let label = Label {
        class_id: 2,
        cx: 0.5,
        cy: 0.5,
        w: 0.4,
        h: 0.4,
    };
    let model = RefCell::new(Model::build(&cfg, 40 + seed)?);
    let mut r = ChaCha8Rng::seed_from_u64(70 + seed);
    let mut inputs = vec![rand_x(&mut r, &[1, 3, 32, 32])];
    model.borrow_mut().visit(&mut |_, slot, t| {
        if slot != Slot::Buffer {
            inputs.push(t.clone());
        }
    });
    let targets = vec![vec![label]];
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
        let l = compute_loss(tape, &pred, &targets)?.total;
        fault_wrap(tape, l, fault)
    };
    // Two probed coordinates per tensor; the analytic side still covers
    // every parameter exactly.
    Ok(grad_check(f, &inputs, 1e-5, Some(2))?.max_rel_err)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    if a.list {
        for (name, tol) in CHECKS {
            println!("{name:<9} tol {tol:.0e}");
        }
        return Ok(0);
    }
    let names: Vec<&str> = CHECKS.iter().map(|(n, _)| *n).collect();
    for sel in &a.only {
        if !names.contains(&sel.as_str()) {
            return Err(Error::Usage(format!("no gradient check named {sel:?}")));
        }
    }
    if let Some(fault) = &a.inject_fault {
        if !names.contains(&fault.as_str()) {
            return Err(Error::Usage(format!("no gradient check named {fault:?}")));
        }
    }
    if a.seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }

    let started = Instant::now();
    let mut failures = 0usize;
    let mut ran = 0usize;
    for (name, tol) in CHECKS {
        if !a.only.is_empty() && !a.only.iter().any(|s| s == name) {
            continue;
        }
        let fault = a.inject_fault.as_deref() == Some(name);
        let mut worst: f64 = 0.0;
        for s in 0..a.seeds {
            worst = worst.max(run_check(name, s, fault)?);
        }
        let ok = worst <= tol;
        println!(
            "{name:<9} max rel err {worst:10.3e}  tol {tol:.0e}  {}",
            if ok { "pass" } else { "FAIL" }
        );
        ran += 1;
        if !ok {
            failures += 1;
        }
    }
    if failures == 0 {
        println!(
            "{ran} checks passed in {:.1}s",
            started.elapsed().as_secs_f64()
        );
        Ok(0)
    } else {
        println!("{failures} of {ran} checks failed");
        Ok(1)
    }
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct AblateArgs {
    /// Training dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset directory [default: the training directory]
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory; each run writes under OUT/g<group>_s<seed>
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seed list
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Epochs per run
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Base channel width of every model
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Images per batch
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Learning rate
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Cosine-anneal the lr to this fraction of its start value
    #[arg(long, default_value_t = 1.0)]
    lr_final_frac: f64,
}

/// (mamba, psa, sppelan) per ablation group 1..=7.
const GROUPS: [(bool, bool, bool); 7] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, false),
    (true, false, true),
    (true, true, true),
];

struct AblateRow {
    group: usize,
    seed: u64,
    precision: f64,
    recall: f64,
    map50: f64,
    map5095: f64,
    params: usize,
}

/// Micro-averaged precision/recall at inference confidence and IoU 0.5,
/// grouped per (image, class) as the matcher expects.
fn micro_pr(dets: &[Detection], gts: &[GroundTruth]) -> (f64, f64) {
    use std::collections::BTreeMap;
    let mut det_groups: BTreeMap<(usize, usize), Vec<Detection>> = BTreeMap::new();
    let mut gt_groups: BTreeMap<(usize, usize), Vec<GroundTruth>> = BTreeMap::new();
    for d in dets {
        det_groups
            .entry((d.image_id, d.class_id))
            .or_default()
            .push(d.clone());
    }
    for g in gts {
        gt_groups
            .entry((g.image_id, g.class_id))
            .or_default()
            .push(g.clone());
    }
    let mut keys: Vec<(usize, usize)> = det_groups.keys().chain(gt_groups.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for key in keys {
        let empty_d = Vec::new();
        let empty_g = Vec::new();
        let d = det_groups.get(&key).unwrap_or(&empty_d);
        let g = gt_groups.get(&key).unwrap_or(&empty_g);
        let outcome = match_detections(d, g, 0.5);
        let hits = outcome.tp.iter().filter(|&&t| t).count();
        tp += hits;
        fp += d.len() - hits;
        fn_ += outcome.false_negatives;
    }
    crate::metrics::precision_recall(tp, fp, fn_)
}

fn run_ablation(
    a: &AblateArgs,
    data: &[LoadedSample],
    val: &[LoadedSample],
    group: usize,
    seed: u64,
) -> Result<AblateRow> {
    let (mamba, psa, sppelan) = GROUPS[group - 1];
    let mcfg = ModelConfig {
        enable_mamba: mamba,
        enable_psa: psa,
        enable_sppelan: sppelan,
        width: a.width,
        ..Default::default()
    };
    let mut model = Model::build(&mcfg, seed)?;
    let params = model.param_counts().0;
    let tcfg = TrainConfig {
        lr: a.lr,
        lr_final_frac: a.lr_final_frac,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed,
        ..Default::default()
    };
    let run_dir = a.out.join(format!("g{group}_s{seed}"));
    let mut state = TrainState::fresh();
    train_model(&mut model, data, val, &tcfg, &mut state, &run_dir)?;

    // Score the best epoch, not the last one.
    let ck = Checkpoint::load(&run_dir.join("best.ckpt"))?;
    let mut best = Model::from_checkpoint(&ck)?;
    let report = evaluate_map(&mut best, val, a.batch_size)?;
    let confident = run_detector(&mut best, val, a.batch_size, CONF_INFERENCE, DEFAULT_NMS_IOU)?;
    let mut gts = Vec::new();
    for (i, s) in val.iter().enumerate() {
        gts.extend(s.ground_truths(i)?);
    }
    let (precision, recall) = micro_pr(&confident, &gts);
    Ok(AblateRow {
        group,
        seed,
        precision,
        recall,
        map50: report.map50,
        map5095: report.map5095,
        params,
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn cmd_ablate(a: &AblateArgs) -> Result<i32> {
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("bad seed {s:?} in --seeds")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Usage("--seeds needs at least one seed".into()));
    }
    let data = load_split(&a.data, "training")?;
    let val_owned;
    let val: &[LoadedSample] = match &a.val {
        Some(p) => {
            val_owned = load_split(p, "validation")?;
            &val_owned
        }
        None => &data,
    };
    fs::create_dir_all(&a.out)?;

    let jobs: Vec<(usize, u64)> = (1..=GROUPS.len())
        .flat_map(|g| seeds.iter().map(move |&s| (g, s)))
        .collect();
    let threads = std::env::var("SPMAMBA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .clamp(1, jobs.len());

    let started = Instant::now();
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<(usize, AblateRow)>> = Mutex::new(Vec::new());
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() || first_err.lock().expect("no poison").is_some() {
                    break;
                }
                let (g, s) = jobs[i];
                match run_ablation(a, &data, val, g, s) {
                    Ok(row) => {
                        println!(
                            "group {g} seed {s}: mAP@0.5 {:.4} ({} params)",
                            row.map50, row.params
                        );
                        done.lock().expect("no poison").push((i, row));
                    }
                    Err(e) => {
                        *first_err.lock().expect("no poison") = Some(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = first_err.into_inner().expect("no poison") {
        return Err(e);
    }
    let mut rows = done.into_inner().expect("no poison");
    rows.sort_by_key(|(i, _)| *i);
    let rows: Vec<AblateRow> = rows.into_iter().map(|(_, r)| r).collect();

    let mut csv = String::from("group,seed,precision,recall,map50,map5095,params\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.group, r.seed, r.precision, r.recall, r.map50, r.map5095, r.params
        ));
    }
    write_file(&a.out.join("ablation.csv"), csv.as_bytes())?;

    let mut agg = String::from("group,precision,recall,map50,map5095,params\n");
    for g in 1..=GROUPS.len() {
        let of = |f: &dyn Fn(&AblateRow) -> f64| {
            median(rows.iter().filter(|r| r.group == g).map(f).collect())
        };
        let params = rows
            .iter()
            .find(|r| r.group == g)
            .map(|r| r.params)
            .unwrap_or(0);
        agg.push_str(&format!(
            "{},{},{},{},{},{}\n",
            g,
            of(&|r| r.precision),
            of(&|r| r.recall),
            of(&|r| r.map50),
            of(&|r| r.map5095),
            params
        ));
    }
    write_file(&a.out.join("ablation_median.csv"), agg.as_bytes())?;
    println!(
        "{} runs in {:.1}s; tables in {}",
        rows.len(),
        started.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// dump-features
// ---------------------------------------------------------------------------

#[derive(Args)]
struct DumpFeaturesArgs {
    /// Checkpoint to visualize
    #[arg(long)]
    ckpt: PathBuf,
    /// Input PPM image, square with side a multiple of 32
    #[arg(long)]
    image: Option<PathBuf>,
    /// Output directory for the mosaics
    #[arg(long)]
    out: Option<PathBuf>,
    /// Layer to dump; repeatable [default: every layer in the inventory]
    #[arg(long = "layer", value_name = "NAME")]
    layers: Vec<String>,
    /// Print the layer inventory for this checkpoint and exit
    #[arg(long)]
    list: bool,
}

fn tap_inventory(cfg: &ModelConfig) -> Vec<&'static str> {
    let mut v = vec!["stem", "backbone.p3", "backbone.p4", "backbone.p5"];
    if cfg.enable_sppelan {
        v.push("sppelan");
    }
    if cfg.enable_psa {
        v.push("psa");
    }
    v.extend(["neck.p3", "neck.p4", "neck.p5"]);
    v
}

/// Tile the channels of image 0 into a near-square grid, each channel
/// min-max normalized to 8-bit gray. Constant channels come out mid-gray.
fn channel_mosaic(t: &Tensor) -> (usize, usize, Vec<u8>) {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let (mw, mh) = (cols * w, rows * h);
    let mut rgb = vec![0u8; mw * mh * 3];
    for ch in 0..c {
        let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let flat = hi - lo <= 1e-12;
        let (r0, c0) = (ch / cols, ch % cols);
        for y in 0..h {
            for x in 0..w {
                let g = if flat {
                    128
                } else {
                    (((plane[y * w + x] - lo) / (hi - lo)) * 255.0).round() as u8
                };
                let o = ((r0 * h + y) * mw + c0 * w + x) * 3;
                rgb[o] = g;
                rgb[o + 1] = g;
                rgb[o + 2] = g;
            }
        }
    }
    (mw, mh, rgb)
}

fn cmd_dump_features(a: &DumpFeaturesArgs) -> Result<i32> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let mut model = Model::from_checkpoint(&ck)?;
    let inventory = tap_inventory(&model.cfg);
    if a.list {
        for name in &inventory {
            println!("{name}");
        }
        return Ok(0);
    }
    let Some(image) = &a.image else {
        return Err(Error::Usage("dump-features needs --image".into()));
    };
    let Some(out) = &a.out else {
        return Err(Error::Usage("dump-features needs --out".into()));
    };
    for sel in &a.layers {
        if !inventory.iter().any(|n| n == sel) {
            return Err(Error::Usage(format!(
                "layer {sel:?} is not in the inventory (try --list)"
            )));
        }
    }

    let ppm = parse_ppm(&fs::read(image)?, &image.display().to_string())?;
    if ppm.width != ppm.height || ppm.width % 32 != 0 {
        return Err(Error::Data(format!(
            "image is {}x{}, want square with side a multiple of 32",
            ppm.width, ppm.height
        )));
    }
    let (side, px) = (ppm.width, &ppm.pixels);
    let mut data = vec![0.0; 3 * side * side];
    for i in 0..side * side {
        for ch in 0..3 {
            data[ch * side * side + i] = px[i * 3 + ch] as f64 / 255.0;
        }
    }
    let x = Tensor::new(&[1, 3, side, side], data)?;

    let mut tape = Tape::inference();
    let (_, taps) = model.forward_features(&mut tape, &x, false)?;
    fs::create_dir_all(out)?;
    let mut written = 0usize;
    for (name, t) in &taps {
        if !a.layers.is_empty() && !a.layers.iter().any(|s| s == name) {
            continue;
        }
        let (mw, mh, rgb) = channel_mosaic(t);
        let mut buf = Vec::new();
        write_ppm(&mut buf, mw, mh, &rgb)?;
        let path = out.join(format!("{}.ppm", name.replace('.', "_")));
        write_file(&path, &buf)?;
        let s = t.shape();
        println!(
            "{name}: {} channels of {}x{} -> {}",
            s[1],
            s[3],
            s[2],
            path.display()
        );
        written += 1;
    }
    if written == 0 {
        return Err(Error::Usage("no layers matched".into()));
    }
    Ok(0)
}

//! Central-difference gradient checking.
//!
//! The checker treats the graph builder as a black box: it runs the forward
//! twice to confirm bitwise determinism, takes the analytic gradient from the
//! tape, then probes coordinates with central differences.

use crate::error::{Error, Result};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Builds a scalar loss from leaf inputs. The closure must register no leaves
/// of its own and must be deterministic.
pub type LossFn<'a> = &'a dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor>;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn eval_scalar(f: LossFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::inference();
    let mut owned: Vec<Tensor> = inputs.to_vec();
    for t in &mut owned {
        tape.leaf(t);
    }
    let y = f(&mut tape, &owned)?;
    if y.numel() != 1 {
        return Err(Error::Usage(format!(
            "grad_check: loss must be scalar, got shape {:?}",
            y.shape()
        )));
    }
    Ok(y.data()[0])
}

/// Deterministic coordinate subset: all coordinates when they fit in the
/// budget, otherwise an evenly strided sample with a seed-dependent offset.
fn sample_coords(numel: usize, budget: Option<usize>, seed: u64) -> Vec<usize> {
    match budget {
        None => (0..numel).collect(),
        Some(b) if b >= numel => (0..numel).collect(),
        Some(b) => {
            let b = b.max(1);
            let offset = (seed as usize) % numel;
            (0..b)
                .map(|i| (offset + i * numel / b) % numel)
                .collect()
        }
    }
}

/// Compare analytic gradients against central differences for every input.
///
/// Relative error uses `|a - n| / max(|a|, |n|, 1e-6)` so that zero gradients
/// compare cleanly. The floor sits above the subtraction noise of the central
/// difference (about `|f| * 1e-11` at `h = 1e-5`), which a dead coordinate
/// would otherwise divide by its own tiny magnitude; below the floor the
/// difference is all roundoff and carries no signal either way.
/// `budget_per_input = None` checks every coordinate.
pub fn grad_check(
    f: LossFn,
    inputs: &[Tensor],
    h: f64,
    budget_per_input: Option<usize>,
) -> Result<GradCheckReport> {
    if inputs.is_empty() {
        return Err(Error::Usage("grad_check: no inputs".into()));
    }
    // Determinism gate: two independent forward passes must agree bitwise.
    let y_a = eval_scalar(f, inputs)?;
    let y_b = eval_scalar(f, inputs)?;
    if y_a.to_bits() != y_b.to_bits() {
        return Err(Error::Determinism(format!(
            "forward pass not reproducible: {y_a:?} vs {y_b:?}"
        )));
    }

    // Analytic pass on a recording tape.
    let mut tape = Tape::new();
    let mut owned: Vec<Tensor> = inputs.to_vec();
    for t in &mut owned {
        tape.leaf(t);
    }
    let y = f(&mut tape, &owned)?;
    if y.numel() != 1 {
        return Err(Error::Usage(format!(
            "grad_check: loss must be scalar, got shape {:?}",
            y.shape()
        )));
    }
    let grads = tape.backward(&y)?;
    let analytic: Vec<Tensor> = owned
        .iter()
        .map(|t| grads.wrt(t))
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let coords = sample_coords(t.numel(), budget_per_input, 0x9e37_79b9 ^ ti as u64);
        for &ci in &coords {
            let orig = t.data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let y_plus = eval_scalar(f, &work)?;
            work[ti].data_mut()[ci] = orig - h;
            let y_minus = eval_scalar(f, &work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (y_plus - y_minus) / (2.0 * h);
            let a = analytic[ti].data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = ti;
                report.worst_coord = ci;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Panic with a readable message unless the check passes at `tol`.
pub fn assert_grad_check(f: LossFn, inputs: &[Tensor], h: f64, tol: f64) {
    let report = grad_check(f, inputs, h, None).expect("grad check failed to run");
    assert!(
        report.passes(tol),
        "gradient mismatch: rel err {:.3e} > {:.1e} at input {} coord {} (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_err,
        tol,
        report.worst_input,
        report.worst_coord,
        report.analytic_at_worst,
        report.numeric_at_worst,
    );
}

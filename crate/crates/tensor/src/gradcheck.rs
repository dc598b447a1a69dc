//! Central finite-difference verification of the recorded backward pass.

use crate::{Tape, Tensor, Var};

/// Step size for central differences. With f32 forward math this balances
/// truncation (~h^2) against round-off (~eps/h).
pub const DEFAULT_STEP: f32 = 1e-3;
/// Default relative tolerance on analytic-vs-numeric gradients.
pub const DEFAULT_REL_TOL: f64 = 1e-3;
/// Absolute floor below which a discrepancy is considered noise.
pub const DEFAULT_ABS_TOL: f64 = 1e-5;
/// Absolute floor for multi-layer composite graphs: the centered-difference
/// round-off on a loss of magnitude m is about eps·m/(2h) ≈ 1e-4·m, so a
/// single-op floor of 1e-5 false-alarms once several layers stack up. Any
/// genuinely wrong backward still trips the relative criterion, which this
/// floor does not loosen.
pub const COMPOSITE_ABS_TOL: f64 = 2e-4;
/// Probe step for wide composite graphs (whole feature maps rather than a
/// handful of elements). Every f32-stored intermediate re-rounds
/// independently between the two probe evaluations, so the centered
/// difference carries noise ~ √n·eps·|intermediate| / (2h); widening the
/// step keeps that under [`COMPOSITE_ABS_TOL`], while the h² truncation
/// error stays negligible for the smooth blocks checked this way.
pub const COMPOSITE_STEP: f32 = 2e-2;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op_name: String,
    /// Max over inputs of (max |analytic - numeric| within the input) /
    /// (max |numeric| within the input, floored at `abs_tol`). Normalizing
    /// per input rather than per element keeps the measure well-conditioned:
    /// with f32 forward math the finite-difference noise on any element is
    /// on the order of eps·|loss|/h, which dwarfs near-zero gradients and
    /// would make per-element ratios meaningless. A backward that is wrong
    /// by any uniform factor still scores near 1 here.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
    /// Populated on failure: structural problems (non-scalar output,
    /// forward error) or the index of the worst-offending input.
    pub detail: Option<String>,
}

impl GradCheckReport {
    fn failure(op_name: &str, detail: String) -> Self {
        GradCheckReport {
            op_name: op_name.to_string(),
            max_rel_err: f64::INFINITY,
            max_abs_err: f64::INFINITY,
            passed: false,
            detail: Some(detail),
        }
    }
}

/// Checks the gradient of a scalar-valued closure w.r.t. every element of
/// every input, by central differences with step [`DEFAULT_STEP`].
///
/// `build` receives a tape plus one [`Var`] per input tensor and must return
/// a scalar var (sum-reduce inside the closure; use a random-weighted sum
/// for ops like softmax whose plain sum has a degenerate gradient).
pub fn grad_check<F, E>(op_name: &str, inputs: &[Tensor], rel_tol: f64, abs_tol: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: std::fmt::Display,
{
    grad_check_with_step(op_name, inputs, rel_tol, abs_tol, DEFAULT_STEP, build)
}

/// [`grad_check`] with an explicit probe step; composite checks over whole
/// feature maps pass [`COMPOSITE_STEP`] to stay above the f32 rounding
/// noise of their wide forward graphs.
pub fn grad_check_with_step<F, E>(
    op_name: &str,
    inputs: &[Tensor],
    rel_tol: f64,
    abs_tol: f64,
    step: f32,
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: std::fmt::Display,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = match build(&mut tape, &vars) {
        Ok(v) => v,
        Err(e) => return GradCheckReport::failure(op_name, format!("forward failed: {e}")),
    };
    if tape.value(out).numel() != 1 {
        return GradCheckReport::failure(
            op_name,
            format!("closure must be scalar-valued, got shape {:?}", tape.value(out).shape()),
        );
    }
    if let Err(e) = tape.backward(out) {
        return GradCheckReport::failure(op_name, format!("backward failed: {e}"));
    }
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad_slice(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    // Numeric pass.
    let eval = |probe: &[Tensor]| -> std::result::Result<f64, E> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item() as f64)
    };

    let h = step;
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut worst_rel_input: Option<(usize, f64, f64)> = None;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut input_abs: f64 = 0.0;
        let mut input_scale: f64 = 0.0;
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = match eval(&probe) {
                Ok(v) => v,
                Err(e) => return GradCheckReport::failure(op_name, format!("numeric probe failed: {e}")),
            };
            probe[i].data_mut()[j] = orig - h;
            let minus = match eval(&probe) {
                Ok(v) => v,
                Err(e) => return GradCheckReport::failure(op_name, format!("numeric probe failed: {e}")),
            };
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h as f64);
            let a = analytic[i][j] as f64;
            input_abs = input_abs.max((a - numeric).abs());
            input_scale = input_scale.max(numeric.abs());
        }
        max_abs = max_abs.max(input_abs);
        // Inputs whose worst discrepancy sits under the absolute floor are
        // within finite-difference noise; their ratios carry no signal.
        if input_abs > abs_tol {
            let rel = input_abs / input_scale.max(abs_tol);
            if rel > max_rel {
                max_rel = rel;
                worst_rel_input = Some((i, input_abs, input_scale));
            }
        }
    }

    let passed = max_rel <= rel_tol || max_abs <= abs_tol;
    let detail = if passed {
        None
    } else {
        worst_rel_input.map(|(i, abs, scale)| format!("worst input #{i}: abs {abs:.3e}, numeric scale {scale:.3e}"))
    };
    GradCheckReport { op_name: op_name.to_string(), max_rel_err: max_rel, max_abs_err: max_abs, passed, detail }
}

/// Convenience wrapper with the default tolerances.
pub fn grad_check_default<F, E>(op_name: &str, inputs: &[Tensor], build: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: std::fmt::Display,
{
    grad_check(op_name, inputs, DEFAULT_REL_TOL, DEFAULT_ABS_TOL, build)
}

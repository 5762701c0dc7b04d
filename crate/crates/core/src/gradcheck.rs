//! Central finite-difference verification of tape gradients.
//!
//! Always runs in `f64`: at 32-bit precision the difference quotient is
//! dominated by rounding and cannot resolve errors near 1e-5.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Maximum admissible relative error.
    pub tol: f64,
    /// Lower bound of the relative-error denominator, so that entries whose
    /// true gradient is ~0 are judged on absolute error.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-5,
            floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// `(input, element)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), track))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck needs a scalar-valued function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    Ok((tape, vars, out))
}

/// Compares the tape gradient of scalar `f` at `inputs` against central
/// finite differences, element by element.
///
/// `f` must be deterministic: any randomness has to be re-seeded inside it.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(&f, inputs, true)?;
    let grads = tape.backward(out)?;

    let mut worst = None;
    let mut max_err = 0.0f64;
    let mut checked = 0;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + opts.eps;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let plus = t.value(o).data()[0];
            probe[i].data_mut()[e] = orig - opts.eps;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let minus = t.value(o).data()[0];
            probe[i].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic.data()[e], numeric, opts.floor);
            checked += 1;
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((i, e));
            }
        }
    }
    Ok(GradcheckReport {
        name: String::new(),
        max_rel_error: max_err,
        worst,
        checked,
        tol: opts.tol,
        passed: max_err < opts.tol,
    })
}

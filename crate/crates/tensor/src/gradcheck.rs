//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale: the
/// relative error denominator is `max(|autodiff|, |numeric|, FLOOR)`.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over every checked element.
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} (tol {:.0e}, {} elements, worst input {} elem {})",
            if self.passed { "ok" } else { "FAIL" },
            self.max_rel_error,
            self.tol,
            self.checked,
            self.worst.0,
            self.worst.1
        )
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR)
}

/// Check a scalar function of one tensor.
pub fn grad_check<F, G>(f: G, x: &Tensor<F>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Real,
    G: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), step, tol)
}

/// Check a scalar function of several tensors against central differences
/// with the given `step`, perturbing every element of every input.
pub fn grad_check_many<F, G>(
    f: G,
    inputs: &[Tensor<F>],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Real,
    G: Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<F>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item()?.as_f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        tol,
        passed: true,
    };
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let auto = grads.get(*var).expect("leaf gradient").data().to_vec();
        for e in 0..inputs[which].numel() {
            let orig = inputs[which].data()[e];
            work[which].data_mut()[e] = F::of(orig.as_f64() + step);
            let plus = eval(&work)?;
            work[which].data_mut()[e] = F::of(orig.as_f64() - step);
            let minus = eval(&work)?;
            work[which].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_error(auto[e].as_f64(), numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (which, e);
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

/// Absolute error below which an entry passes regardless of relative error.
pub const ABS_FALLBACK: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, element, analytic, numeric)` of the worst failing entry,
    /// or of the worst entry overall when everything passed.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} ({} entries, max rel {:.3e}, max abs {:.3e}",
            if self.passed { "pass" } else { "FAIL" },
            self.checked,
            self.max_rel_err,
            self.max_abs_err
        )?;
        if let Some((i, j, a, n)) = self.worst {
            write!(f, ", worst input {i}[{j}] analytic {a:.6e} numeric {n:.6e}")?;
        }
        write!(f, ")")
    }
}

struct Tally {
    report: GradCheckReport,
    worst_score: f64,
}

impl Tally {
    fn new() -> Self {
        Tally {
            report: GradCheckReport {
                passed: true,
                checked: 0,
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                worst: None,
            },
            worst_score: -1.0,
        }
    }

    fn push(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64, tol: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        let ok = abs <= ABS_FALLBACK || rel < tol;
        let r = &mut self.report;
        r.checked += 1;
        r.max_abs_err = r.max_abs_err.max(abs);
        if abs > ABS_FALLBACK {
            r.max_rel_err = r.max_rel_err.max(rel);
        }
        // failures always outrank passes when picking the entry to report
        let score = if ok { rel.min(1.0) } else { 2.0 + rel };
        if score > self.worst_score {
            self.worst_score = score;
            r.worst = Some((input, elem, analytic, numeric));
        }
        r.passed &= ok;
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} evaluated to {v}")))
    }
}

/// Compares `grad` against central differences of `value` at `x`.
pub fn check_gradient(
    value: impl Fn(&Tensor) -> f64,
    grad: &Tensor,
    x: &Tensor,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let mut tally = Tally::new();
    let mut probe = x.clone();
    for j in 0..x.len() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + eps;
        let fp = finite(value(&probe), "f(x+eps)")?;
        probe.data_mut()[j] = orig - eps;
        let fm = finite(value(&probe), "f(x-eps)")?;
        probe.data_mut()[j] = orig;
        tally.push(0, j, grad.data()[j], (fp - fm) / (2.0 * eps), tol);
    }
    Ok(tally.report)
}

/// Builds `f` on a fresh tape from `inputs` and checks the gradient of its
/// (summed) output with respect to every input entry.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let eval = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let out = if tape.value(out).len() == 1 {
            out
        } else {
            tape.sum(out)
        };
        Ok((tape, vars, out))
    };
    let scalar = |xs: &[Tensor]| -> Result<f64> {
        let (tape, _, out) = eval(xs)?;
        finite(tape.value(out).data()[0], "f")
    };

    let (tape, vars, out) = eval(inputs)?;
    finite(tape.value(out).data()[0], "f")?;
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| grads.get_or_zeros(v, t))
        .collect();

    let mut tally = Tally::new();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, ga) in analytic.iter().enumerate() {
        for j in 0..ga.len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let fp = scalar(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let fm = scalar(&probe)?;
            probe[i].data_mut()[j] = orig;
            tally.push(i, j, ga.data()[j], (fp - fm) / (2.0 * eps), tol);
        }
    }
    Ok(tally.report)
}

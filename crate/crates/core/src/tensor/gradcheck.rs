//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::{PdseError, Result};

/// Smallest denominator of the relative error, as a fraction of `max(1, |f|)`.
/// Gradients below it sit under the round-off floor of a central difference
/// at `h = 1e-5`, so they are compared against this magnitude instead.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a − n| / max(|a|, |n|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    /// Distance of the base point to the nearest non-differentiable point.
    pub kink_margin: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if self.checked == 0 {
            *self = other.clone();
            return;
        }
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
        self.kink_margin = self.kink_margin.min(other.kink_margin);
        self.passed &= other.passed;
    }
}

/// Evaluates `f` on fresh leaves holding `inputs`; returns the scalar value.
fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(PdseError::invalid("finite_diff_check", "function must return a scalar"));
    }
    Ok(g.value(out).item())
}

/// Analytic gradients of `f` w.r.t. every input plus the kink margin of the base point.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>, f64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out).item();
    let margin = g.kink_margin();
    let grads = g.backward(out)?;
    let ts = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("leaf gradient"))
        .collect();
    Ok((value, ts, margin))
}

/// Checks the gradient of `f` w.r.t. all of `inputs` with central differences
/// `(f(x+h) − f(x−h)) / 2h`.
pub fn check_inputs<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_inputs_with(f, inputs, h, tol, None)
}

/// As [`check_inputs`], optionally injecting a sign fault into one gradient rule.
pub fn check_inputs_with<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
    fault: Option<super::OpKind>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (value, analytic, kink_margin) = if fault.is_some() {
        let faulty = |g: &mut Graph<f64>, v: &[Var]| {
            g.inject_fault(fault);
            f(g, v)
        };
        analytic_grads(&faulty, inputs)?
    } else {
        analytic_grads(&f, inputs)?
    };
    let again = eval(&f, inputs)?;
    if again.to_bits() != value.to_bits() {
        return Err(PdseError::invalid(
            "finite_diff_check",
            format!("function is not deterministic ({value} vs {again})"),
        ));
    }
    let mut report = GradCheckReport {
        kink_margin,
        passed: true,
        ..Default::default()
    };
    let floor = RELATIVE_FLOOR * value.abs().max(1.0);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[e];
            work[ti].data_mut()[e] = orig + h;
            let plus = eval(&f, &work)?;
            work[ti].data_mut()[e] = orig - h;
            let minus = eval(&f, &work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[e];
            let diff = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(diff);
            let rel = diff / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, e));
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}

/// Single-input form: checks `d f(x) / dx`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    check_inputs(|g, v| f(g, v[0]), std::slice::from_ref(x), h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new(&[5], vec![0.3, -1.0, 2.0, 7.5, -0.01]).unwrap();
        let r = finite_diff_check(|g, v| g.sum(v), &x, 1e-5, 1e-9).unwrap();
        assert!(r.passed, "{r:?}");
        let (_, grads, _) = analytic_grads(&|g: &mut Graph<f64>, v: &[Var]| g.sum(v[0]), &[x]).unwrap();
        assert!(grads[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_at_zero_has_quarter_slope() {
        let x = Tensor::zeros(&[4]);
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let s = g.sigmoid(v[0])?;
            g.sum(s)
        };
        let (_, grads, _) = analytic_grads(&f, std::slice::from_ref(&x)).unwrap();
        assert!(grads[0].data().iter().all(|&v| v == 0.25));
        assert!(check_inputs(f, &[x], 1e-5, 1e-4).unwrap().passed);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::new(&[3], vec![0.5, 1.5, -2.0]).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let s = g.mul(v[0], v[0])?;
            g.sum(s)
        };
        let r = check_inputs_with(f, &[x], 1e-5, 1e-4, Some(super::super::OpKind::Mul)).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn nondeterminism_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let res = finite_diff_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let s = g.scale(v, calls.get())?;
                g.sum(s)
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(res.is_err());
    }
}

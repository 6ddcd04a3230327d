//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport<T> {
    pub max_relative_error: T,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: Vec<T>,
    pub numeric: Vec<T>,
}

fn evaluate<T: Scalar, F>(f: &F, x: &Tensor<T>) -> Result<T>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = f(&mut g, v)?;
    Ok(g.value(out).item())
}

/// Analytic gradient of `f` at `x` through [`Graph::backward`].
pub fn analytic_gradient<T: Scalar, F>(f: &F, x: &Tensor<T>) -> Result<Vec<T>>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    g.backward(out)?;
    Ok(g.grad(v)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![T::zero(); x.numel()]))
}

/// Compares `analytic` against central differences of `f` around `x`.
///
/// Per-coordinate error is `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn compare_with_central_differences<T: Scalar, F>(
    f: &F,
    analytic: Vec<T>,
    x: &Tensor<T>,
    eps: T,
) -> Result<GradCheckReport<T>>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if !(eps > T::zero() && eps <= T::of(1e-2)) {
        return Err(invalid("gradient_check", format!("eps {eps} outside (0, 1e-2]")));
    }
    if analytic.len() != x.numel() {
        return Err(invalid("gradient_check", "analytic gradient has the wrong length"));
    }
    let two = T::of(2.0);
    let floor = T::of(1e-12);
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (two * eps));
    }
    let mut worst = (T::zero(), 0);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(floor);
        let err = (a - n).abs() / denom;
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}

/// Full report for a scalar function of one tensor.
pub fn gradient_check_report<T: Scalar, F>(f: F, x: &Tensor<T>, eps: T) -> Result<GradCheckReport<T>>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, x)?;
    compare_with_central_differences(&f, analytic, x, eps)
}

/// Maximum relative error between the backward-pass gradient of `f` and
/// central finite differences with step `eps`.
pub fn gradient_check<T: Scalar, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    Ok(gradient_check_report(f, x, eps)?.max_relative_error)
}

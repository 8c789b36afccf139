//! Central-difference gradient checking.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Gradient check of a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = grad_check_many(|g, vars| f(g, vars[0]), core::slice::from_ref(point), eps, |_| true)?;
    Ok(report.max_rel_error)
}

/// Gradient check over several input tensors; `select(i)` chooses which
/// inputs have their coordinates perturbed.
pub fn grad_check_many<F, S>(f: F, points: &[Tensor], eps: f64, select: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    S: Fn(usize) -> bool,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| g.grad_tensor(*v)).collect();
    drop(g);

    let mut work: Vec<Tensor> = points.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    for (pi, grad) in analytic.iter().enumerate() {
        if !select(pi) {
            continue;
        }
        for c in 0..grad.numel() {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = libm::fabs(grad.data()[c] - numeric) / libm::fabs(numeric).max(1.0);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}

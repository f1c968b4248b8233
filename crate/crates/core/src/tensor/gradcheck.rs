use crate::error::{Result, VillmError};

use super::Tensor;

/// A scalar function of a list of parameter tensors together with its
/// analytic gradient.
pub trait Objective {
    fn value(&mut self, params: &[Tensor]) -> Result<f64>;
    fn gradient(&mut self, params: &[Tensor]) -> Result<Vec<Tensor>>;
}

/// Adapts a pair of closures into an [`Objective`].
pub struct FnObjective<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: FnMut(&[Tensor]) -> Result<f64>,
    G: FnMut(&[Tensor]) -> Result<Vec<Tensor>>,
{
    fn value(&mut self, params: &[Tensor]) -> Result<f64> {
        (self.value)(params)
    }

    fn gradient(&mut self, params: &[Tensor]) -> Result<Vec<Tensor>> {
        (self.gradient)(params)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |a − n| / max(1, |a|, |n|)
    pub max_relative_error: f64,
    /// (tensor index, flat element index) where the maximum occurred
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

/// Compares the analytic gradient with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` on every coordinate of every parameter.
pub fn grad_check<O: Objective>(objective: &mut O, params: &[Tensor], h: f64) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(VillmError::Config(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    let analytic = objective.gradient(params)?;
    if analytic.len() != params.len()
        || analytic.iter().zip(params).any(|(g, p)| g.dims() != p.dims())
    {
        return Err(VillmError::Config(
            "objective gradient does not match parameter shapes".into(),
        ));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let up = objective.value(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let down = objective.value(&work)?;
            work[pi].data_mut()[ei] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(VillmError::NonFinite(format!(
                    "objective at parameter {pi} element {ei}"
                )));
            }
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[ei];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (pi, ei);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

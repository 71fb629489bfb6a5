//! Central-difference audit of tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation size for the central difference.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor: errors are measured relative to
    /// `max(|analytic|, |numeric|, floor)`, so gradients far below the
    /// floor are judged on their absolute error instead.
    pub floor: f64,
    /// Checks at most this many evenly strided entries per input; `None`
    /// checks every entry.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-6, tol: 1e-4, floor: 1e-4, max_entries: None }
    }
}

/// Indices visited for an input of `n` entries.
fn probe_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|k| k * n / m).collect(),
        _ => (0..n).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(move |e| e.rel_error >= self.tol)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok((g, vars, out))
}

/// Compares the backward-pass gradient of the scalar `f(inputs)` against
/// central differences, element by element, for every input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor], config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(&f, inputs)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).expect("leaf requires grad")).collect();

    let mut report = GradCheckReport { tol: config.tol, ..Default::default() };
    let mut perturbed = inputs.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        for index in probe_indices(grad.numel(), config.max_entries) {
            let orig = inputs[input].data()[index];
            perturbed[input].data_mut()[index] = orig + config.eps;
            let plus = evaluate(&f, &perturbed)?;
            let plus = plus.0.value(plus.2).item();
            perturbed[input].data_mut()[index] = orig - config.eps;
            let minus = evaluate(&f, &perturbed)?;
            let minus = minus.0.value(minus.2).item();
            perturbed[input].data_mut()[index] = orig;

            let numeric = (plus - minus) / (2.0 * config.eps);
            let a = grad.data()[index];
            let rel_error = relative_error(a, numeric, config.floor);
            report.max_rel_error = report.max_rel_error.max(rel_error);
            report.entries.push(GradCheckEntry { input, index, analytic: a, numeric, rel_error });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[Tensor::from_vec(vec![1.0, 2.0])],
            GradCheckConfig { tol: 1e-8, ..Default::default() },
        )
        .unwrap();
        let grads: Vec<f64> = report.entries.iter().map(|e| e.analytic).collect();
        assert_eq!(grads, vec![2.0, 4.0]);
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let report = grad_check(
            |g, v| {
                let z = g.scale(v[0], 0.0)?;
                let s = g.sum(z)?;
                let c = g.constant(Tensor::scalar(3.0));
                g.add(s, c)
            },
            &[Tensor::from_vec(vec![0.3, -1.2, 4.0])],
            GradCheckConfig::default(),
        )
        .unwrap();
        for e in &report.entries {
            assert_eq!(e.analytic, 0.0);
            assert!(e.numeric.abs() < 1e-8);
        }
    }

    #[test]
    fn strided_subset() {
        assert_eq!(probe_indices(10, Some(4)), vec![0, 2, 5, 7]);
        assert_eq!(probe_indices(3, Some(4)), vec![0, 1, 2]);
    }
}

//! Central finite-difference verification of [`Graph`] gradients.
//!
//! The numerical side only ever runs forward passes; the analytic side comes
//! from [`Graph::backward`]. Checks run in `f64`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Floor for the relative-error denominator.
    pub floor: f64,
    /// Coordinates probed per input; `None` probes all of them.
    pub max_probes: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, tolerance: 1e-3, floor: 1e-4, max_probes: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: usize,
    pub worst: Option<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |p| p.rel_error)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / floor.max(a.abs()).max(b.abs())
}

/// Evenly spaced coordinate indices, always including the first and last.
fn probe_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n && m > 1 => (0..m).map(|i| i * (n - 1) / (m - 1)).collect(),
        Some(1) if n > 1 => vec![n / 2],
        _ => (0..n).collect(),
    }
}

/// Compares the gradient of the scalar built by `f` with respect to each
/// input against central differences.
pub fn check<F>(inputs: &[Tensor<f64>], config: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar(&g, out)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut values = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*var).unwrap_or(&zero);
        for idx in probe_indices(inputs[i].numel(), config.max_probes) {
            let original = inputs[i].data()[idx];
            values[i].data_mut()[idx] = original + config.step;
            let plus = eval(&values)?;
            values[i].data_mut()[idx] = original - config.step;
            let minus = eval(&values)?;
            values[i].data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic.data()[idx];
            let rel = rel_error(a, numeric, config.floor);
            report.probes += 1;
            if report.worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                report.worst = Some(Probe { input: i, index: idx, analytic: a, numeric, rel_error: rel });
            }
        }
    }
    Ok(report)
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::contract(format!("gradient check needs a scalar output, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probes_span_the_range() {
        assert_eq!(probe_indices(5, None), vec![0, 1, 2, 3, 4]);
        assert_eq!(probe_indices(10, Some(3)), vec![0, 4, 9]);
        assert_eq!(probe_indices(2, Some(8)), vec![0, 1]);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(x ⊙ x) has gradient 2x; weighted_sum with constant weights x
        // would report x, so feed it through mul to get the right answer.
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let ok = check(std::slice::from_ref(&x), GradCheckConfig::default(), |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(ok.passed(1e-6), "{ok:?}");
        let bad = check(std::slice::from_ref(&x), GradCheckConfig::default(), move |g, v| {
            let w = g.value(v[0]).clone();
            g.weighted_sum(v[0], w)
        })
        .unwrap();
        assert!(bad.max_rel_error() > 0.4);
    }
}

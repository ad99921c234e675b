//! Central finite-difference verification of backward rules.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

mod suite;

pub use suite::{run_check, run_suite, CheckReport, SUITE_CHECKS, SUITE_THRESHOLD};

/// Default perturbation in 64-bit mode.
pub const DEFAULT_EPS: f64 = 1e-4;

const REL_FLOOR: f64 = 1e-8;

/// Largest relative disagreement between the analytic gradient of the scalar
/// function `f` at `x` and its central difference:
/// `max_i |a_i - cd_i| / max(|a_i|, |cd_i|, 1e-8)`.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    gradient_check(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps, usize::MAX)
}

/// Multi-input form of [`finite_difference_check`]. When an input has more
/// than `max_probes` elements, an evenly strided subset of that many is probed.
pub fn gradient_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64, max_probes: usize) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let probes = probe_gradients(f, inputs, eps, max_probes, 0)?;
    Ok(probes.iter().map(Probe::rel_error).fold(0.0, f64::max))
}

/// One probed element: analytic gradient against central difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub central: f64,
    /// Some ReLU6 input sat on different sides of a kink in the two
    /// perturbed evaluations, even at the smallest step tried.
    pub straddles_kink: bool,
}

impl Probe {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.central).abs() / self.analytic.abs().max(self.central.abs()).max(REL_FLOOR)
    }
}

/// Which side of the kinks at 0 and 6 each ReLU6 input lies on.
fn kink_pattern<T: Scalar>(g: &Graph<T>) -> Vec<u8> {
    let six = T::from_f64_lossy(6.0);
    g.vars()
        .filter(|&v| g.node(v).op() == "relu6")
        .flat_map(|v| g.value(g.node(v).inputs()[0]).data().iter())
        .map(|&x| (x > T::zero()) as u8 + (x >= six) as u8)
        .collect()
}

/// The raw probes behind [`gradient_check`]. A probe whose two evaluations
/// disagree on a ReLU6 kink is retried up to `kink_retries` times, each with
/// a tenfold smaller step.
pub fn probe_gradients<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
    max_probes: usize,
    kink_retries: usize,
) -> Result<Vec<Probe>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!(
            "finite-difference eps must be positive, got {eps}"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<(f64, Vec<u8>)> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let pattern = if kink_retries > 0 { kink_pattern(&g) } else { Vec::new() };
        Ok((g.value(out).item()?.to_f64_lossy(), pattern))
    };

    let mut out = Vec::new();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.len();
        let probes = n.min(max_probes);
        for p in 0..probes {
            let i = if probes == n { p } else { p * n / probes };
            let orig = input.data()[i];
            let base = orig.to_f64_lossy();
            let mut step = eps;
            let mut attempt = 0;
            let (central, straddles_kink) = loop {
                work[which].data_mut()[i] = T::from_f64_lossy(base + step);
                let (up, up_pattern) = eval(&work)?;
                work[which].data_mut()[i] = T::from_f64_lossy(base - step);
                let (down, down_pattern) = eval(&work)?;
                work[which].data_mut()[i] = orig;
                let straddles = up_pattern != down_pattern;
                if !straddles || attempt == kink_retries {
                    break ((up - down) / (2.0 * step), straddles);
                }
                attempt += 1;
                step /= 10.0;
            };

            let probe = Probe {
                input: which,
                index: i,
                analytic: analytic[which].data()[i].to_f64_lossy(),
                central,
                straddles_kink,
            };
            if !probe.rel_error().is_finite() {
                return Err(Error::NonFinite {
                    op: "finite_difference_check".into(),
                    step: None,
                });
            }
            out.push(probe);
        }
    }
    Ok(out)
}

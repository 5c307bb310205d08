//! Finite-difference verification of reverse-mode gradients.
//!
//! Each checked entry is compared against the central difference
//! `(f(p + h) - f(p - h)) / 2h`. The relative error of an entry is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
//!
//! Piecewise networks (ReLU, margin fallback) are only differentiable away
//! from their kinks. When a perturbed evaluation lands on a different
//! branch pattern than the unperturbed one, the step is divided by ten (at
//! most four times) and, failing that, the entry is reported as skipped.

use std::fmt;

use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::params::Module;
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Checks a seeded random subset of larger tensors.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn new(tolerance: f64) -> Self {
        Self {
            step: 1e-3,
            tolerance,
            floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
        }
    }

    pub fn sampled(mut self, per_param: usize) -> Self {
        self.max_entries_per_param = Some(per_param);
        self
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Entries whose step had to shrink to stay off a kink.
    pub shrunk: usize,
    /// Entries that could not be evaluated away from a kink.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_rel_error >= self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<32} checked {:>5}  max rel err {:.3e}  {}{}",
                p.name,
                p.checked,
                p.max_rel_error,
                if p.max_rel_error < self.tolerance { "ok" } else { "FAIL" },
                if p.skipped > 0 {
                    format!("  ({} skipped at kinks)", p.skipped)
                } else {
                    String::new()
                }
            )?;
        }
        write!(
            f,
            "{} (tolerance {:.1e}, worst {:.3e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance,
            self.max_rel_error()
        )
    }
}

fn evaluate<N, F>(net: &N, objective: &F) -> Result<(f64, u64)>
where
    N: Module<f64>,
    F: Fn(&N, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::inference();
    let root = objective(net, &mut g)?;
    Ok((g.value(root).item(), g.kink_signature()))
}

/// Reverse-mode gradient of the objective for every parameter tensor.
pub fn analytic_gradients<N, F>(net: &N, objective: &F) -> Result<Vec<Vec<f64>>>
where
    N: Module<f64>,
    F: Fn(&N, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = objective(net, &mut g)?;
    g.backward(root)?;
    let mut store = net.params().clone();
    store.zero_grad();
    store.accumulate_grads(&g);
    Ok(store.iter().map(|p| p.grad.clone()).collect())
}

/// Compares given gradients against central differences of the objective.
pub fn compare_with_finite_differences<N, F>(
    net: &mut N,
    objective: &F,
    analytic: &[Vec<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    N: Module<f64>,
    F: Fn(&N, &mut Graph<f64>) -> Result<Var>,
{
    let (_, base_sig) = evaluate(net, objective)?;
    let mut sampler = rng::stream(cfg.seed, "gradcheck", 0);
    let ids: Vec<_> = net.params().ids().collect();
    let mut report = GradCheckReport {
        tolerance: cfg.tolerance,
        params: Vec::new(),
    };
    for (pi, id) in ids.into_iter().enumerate() {
        let len = net.params().value(id).len();
        let name = net.params().iter().nth(pi).map(|p| p.name.clone()).unwrap_or_default();
        let entries: Vec<usize> = match cfg.max_entries_per_param {
            Some(n) if n < len => {
                let mut v = sample(&mut sampler, len, n).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut check = ParamCheck {
            name,
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            shrunk: 0,
            skipped: 0,
        };
        for idx in entries {
            let original = net.params().value(id).data()[idx];
            let mut h = cfg.step;
            let mut numeric = None;
            for attempt in 0..5 {
                net.params_mut().value_mut(id).data_mut()[idx] = original + h;
                let (fp, sp) = evaluate(net, objective)?;
                net.params_mut().value_mut(id).data_mut()[idx] = original - h;
                let (fm, sm) = evaluate(net, objective)?;
                net.params_mut().value_mut(id).data_mut()[idx] = original;
                if sp == base_sig && sm == base_sig {
                    numeric = Some((fp - fm) / (2.0 * h));
                    if attempt > 0 {
                        check.shrunk += 1;
                    }
                    break;
                }
                h /= 10.0;
            }
            let Some(numeric) = numeric else {
                check.skipped += 1;
                continue;
            };
            let a = analytic[pi][idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            check.checked += 1;
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                check.worst_index = idx;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

/// Checks the reverse-mode gradient of a scalar objective against finite
/// differences, for every parameter tensor of `net`.
pub fn grad_check<N, F>(net: &mut N, objective: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    N: Module<f64>,
    F: Fn(&N, &mut Graph<f64>) -> Result<Var>,
{
    let analytic = analytic_gradients(net, &objective)?;
    compare_with_finite_differences(net, &objective, &analytic, cfg)
}

/// A module with a single-input forward pass.
pub trait Forward<T: crate::tensor::Element>: Module<T> {
    fn forward(&self, g: &mut Graph<T>, input: Var) -> Result<Var>;
}

/// Gradient check of `net` on a fixed input. The scalar objective is a
/// fixed random projection of the output, which exercises every output
/// entry with a distinct weight.
pub fn grad_check_network<N: Forward<f64>>(
    net: &mut N,
    input: &Tensor<f64>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let probe = {
        let mut g = Graph::inference();
        let x = g.constant(input.clone())?;
        let y = net.forward(&mut g, x)?;
        let shape = g.shape(y).to_vec();
        let mut r = rng::stream(0, "gradcheck-probe", 0);
        Tensor::from_fn(&shape, |_| rand::Rng::random_range(&mut r, -1.0..1.0))
    };
    let objective = |n: &N, g: &mut Graph<f64>| {
        let x = g.constant(input.clone())?;
        let y = n.forward(g, x)?;
        let w = g.constant(probe.clone())?;
        let p = g.mul(y, w)?;
        g.sum(p)
    };
    grad_check(net, objective, &GradCheckConfig::new(tolerance))
}

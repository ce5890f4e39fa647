//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::{ParameterStore, Tensor};
use crate::Result;

/// Denominator floor for relative error.
pub const REL_FLOOR: f64 = 1e-5;

/// One-sided slopes disagreeing by more than this (relative) mark a
/// coordinate sitting on a ReLU or SmoothL1 kink.
pub const KINK_TOL: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because the function is not smooth there.
    pub kinks: usize,
    pub max_rel_error: f64,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares tape gradients of the scalar `f` with central differences over
/// the named parameters.
///
/// `f` builds its graph from the store it is given and returns a scalar
/// output. At most `max_per_tensor` coordinates per parameter are probed,
/// picked with `seed`. Coordinates whose forward and backward one-sided
/// slopes disagree (a kink within `eps`) are counted in `kinks` and not
/// compared; callers should bound that count.
pub fn check_params<F>(
    store: &ParameterStore,
    f: F,
    eps: f64,
    max_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        g.backward(out)?;
        g.param_grads()
    };
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::inference(s);
        let out = f(&mut g)?;
        Ok(g.value(out).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let f0 = eval(&work)?;
    let mut report = GradCheckReport {
        checked: 0,
        kinks: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for name in store.names() {
        let Some(grad) = analytic.get(name) else { continue };
        let n = grad.len();
        let idx: Vec<usize> = if n <= max_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_per_tensor).into_vec()
        };
        for i in idx {
            let orig = work.get(name).unwrap().data[i];
            work.get_mut(name).unwrap().data[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data[i] = orig;
            if relative_error((up - f0) / eps, (f0 - down) / eps) > KINK_TOL {
                report.kinks += 1;
                continue;
            }
            let num = (up - down) / (2.0 * eps);
            let e = relative_error(grad[i], num);
            report.checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Gradient check for a function of plain input tensors.
///
/// Inputs are registered as parameters `in0`, `in1`, ... so the same
/// machinery applies.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut store = ParameterStore::new();
    for (k, t) in inputs.iter().enumerate() {
        store.insert(format!("in{k}"), t.clone())?;
    }
    let n = inputs.len();
    check_params(
        &store,
        |g| {
            let vars = (0..n).map(|k| g.param(&format!("in{k}"))).collect::<Result<Vec<_>>>()?;
            f(g, &vars)
        },
        eps,
        usize::MAX,
        0,
    )
}

/// `Σ out ∘ weights`, turning a tensor output into a scalar with a generic
/// gradient.
pub fn weighted_sum(g: &mut Graph<'_>, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

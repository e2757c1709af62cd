use super::{DoubleDouble, Float, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i |analytic_i − numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    fn from_pairs(analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        let mut max_rel_error = 0.0;
        let mut worst_index = 0;
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            if err > max_rel_error {
                max_rel_error = err;
                worst_index = i;
            }
        }
        GradCheck {
            max_rel_error,
            worst_index,
            analytic,
            numeric,
        }
    }
}

/// Checks `f`'s gradient with respect to a single parameter tensor.
///
/// `f` receives a fresh evaluation-mode graph and the parameter leaf and
/// returns a scalar. It must be deterministic; two evaluations at the base
/// point that differ are reported as [`Error::NonDeterministic`].
pub fn finite_difference_check<Fun>(params: &Tensor<f64>, epsilon: f64, f: Fun) -> Result<GradCheck>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("params", params.clone());
    check_params(&store, epsilon, None, |g, s| {
        let p = g.param(s, id);
        f(g, p)
    })
}

/// Reverse-mode gradient of `f` at `store`, after confirming that two
/// evaluations agree bit for bit.
fn analytic<Fun>(store: &ParamStore<f64>, f: &Fun) -> Result<Vec<f64>>
where
    Fun: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &analytic_store)?;
    g.backward(loss)?;
    g.accumulate_into(&mut analytic_store);
    let first = g.value(loss).item();
    let mut g = Graph::new();
    let l = f(&mut g, store)?;
    g.check_finite()?;
    let second = g.value(l).item();
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    Ok(analytic_store.flatten_grads())
}

/// A scalar function of a parameter store, evaluable at any precision.
pub trait ScalarFn {
    fn eval<F: Float>(&self, g: &mut Graph<F>, params: &ParamStore<F>) -> Result<Var>;
}

/// Like [`check_params`], with the analytic side in `f64` and the central
/// differences evaluated in [`DoubleDouble`].
///
/// An `f64` difference quotient of a loss `L` moves in steps of
/// `ulp(L) / 2ε`, about `4e-11` for `L ≈ 4` and `ε = 1e-5`.
pub fn check_params_extended<S: ScalarFn>(
    store: &ParamStore<f64>,
    epsilon: f64,
    coords: Option<&[usize]>,
    f: &S,
) -> Result<GradCheck> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let grads = analytic(store, &|g: &mut Graph<f64>, s: &ParamStore<f64>| f.eval(g, s))?;
    let eval = |s: &ParamStore<DoubleDouble>| -> Result<DoubleDouble> {
        let mut g = Graph::new();
        let l = f.eval(&mut g, s)?;
        g.check_finite()?;
        Ok(g.value(l).item())
    };
    let base = store.flatten();
    let all: Vec<usize> = (0..base.len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut probe: ParamStore<DoubleDouble> = store.cast();
    let mut flat = probe.flatten();
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in coords {
        flat[i] = DoubleDouble::sum_of(base[i], epsilon);
        probe.unflatten(&flat)?;
        let plus = eval(&probe)?;
        flat[i] = DoubleDouble::sum_of(base[i], -epsilon);
        probe.unflatten(&flat)?;
        let minus = eval(&probe)?;
        flat[i] = DoubleDouble::new(base[i]);
        analytic.push(grads[i]);
        numeric.push(((plus - minus) / DoubleDouble::new(2.0 * epsilon)).f64());
    }
    Ok(GradCheck::from_pairs(analytic, numeric))
}

/// Checks the gradient of `f` with respect to every value in `store`, or only
/// the flattened coordinates listed in `coords`.
pub fn check_params<Fun>(
    store: &ParamStore<f64>,
    epsilon: f64,
    coords: Option<&[usize]>,
    f: Fun,
) -> Result<GradCheck>
where
    Fun: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        g.check_finite()?;
        Ok(g.value(l).item())
    };
    let grads = analytic(store, &f)?;
    let base = store.flatten();
    let all: Vec<usize> = (0..base.len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut probe = store.clone();
    let mut flat = base.clone();
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in coords {
        flat[i] = base[i] + epsilon;
        probe.unflatten(&flat)?;
        let plus = eval(&probe)?;
        flat[i] = base[i] - epsilon;
        probe.unflatten(&flat)?;
        let minus = eval(&probe)?;
        flat[i] = base[i];
        analytic.push(grads[i]);
        numeric.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(GradCheck::from_pairs(analytic, numeric))
}

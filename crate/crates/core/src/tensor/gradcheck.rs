use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Checks `d f(x) / dx` from [`Graph::backward`] against
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
///
/// `f` receives a fresh graph and the leaf holding `x` and must return a
/// scalar node.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::contract(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |data: Vec<T>, coord: usize| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut g, v)?;
        let y = g.value(out).item().as_f64();
        if !y.is_finite() {
            return Err(Error::NonFinite { what: "grad_check objective".into(), index: coord });
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let v = g.leaf(Tensor::new(x.shape().to_vec(), x.data().to_vec())?.with_requires_grad(true));
    let out = f(&mut g, v)?;
    if !g.value(out).item().as_f64().is_finite() {
        return Err(Error::NonFinite { what: "grad_check objective".into(), index: 0 });
    }
    g.backward(out)?;
    let analytic: Vec<f64> = match g.grad(v) {
        Some(gr) => gr.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.len()],
    };

    let mut numeric = Vec::with_capacity(x.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] = T::of(plus[i].as_f64() + h);
        minus[i] = T::of(minus[i].as_f64() - h);
        let fd = (eval(plus, i)? - eval(minus, i)?) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        if err > max_rel_error || i == 0 {
            max_rel_error = err;
            worst_index = i;
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport { max_rel_error, worst_index, analytic, numeric })
}

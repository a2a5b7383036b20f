use super::{Graph, Tensor, Var};
use crate::{Error, Result};

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    if g.value(out).len() != 1 {
        return Err(Error::shape("grad_check", g.shape(out), &[1]));
    }
    Ok(g.scalar_value(out))
}

/// Central finite differences of a scalar function of `x`.
pub fn central_gradient<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Max over entries of `|analytic - central| / (|central| + 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    if g.value(out).len() != 1 {
        return Err(Error::shape("grad_check", g.shape(out), &[1]));
    }
    let analytic = g.backward(out)?.tensor(v);
    let numeric = central_gradient(&f, x, h)?;
    Ok(relative_error(analytic.data(), &numeric))
}

pub(crate) fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, c)| (a - c).abs() / (c.abs() + 1e-8))
        .fold(0.0, f64::max)
}

use crate::error::{contract, Result};
use crate::math;
use crate::{Graph, Tensor, Var};

/// Compare the analytic gradient of a scalar function against central finite
/// differences.
///
/// `f` receives a fresh graph and the leaf holding `point`, and must return a
/// scalar node. The result is the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(contract!("grad_check: step must be positive, got {}", h));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    if g.value(y).len() != 1 {
        return Err(contract!("grad_check: function output has shape {:?}, expected a scalar", g.value(y).shape()));
    }
    g.backward(y)?;
    let analytic = g.grad(x).expect("param leaf carries a gradient").clone();

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        g.value(y).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = math::abs(a - numeric) / f64::max(1.0, math::abs(a));
        worst = worst.max(err);
    }
    Ok(worst)
}

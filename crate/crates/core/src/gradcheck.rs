//! Central finite-difference checks of the gradients produced by
//! [`Graph::backward`].

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// Max relative error between the analytic gradient of `f` at `point` and a
/// central difference with the given `step`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), step)
}

/// Like [`grad_check`], over several input tensors at once. Every
/// coordinate of every input is probed.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).expect("params carry gradients"))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite value while probing".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = points.to_vec();
    for (which, point) in points.iter().enumerate() {
        for i in 0..point.len() {
            let base = point.data()[i];
            probe[which] = shifted(point, i, base + step)?;
            let up = eval(&probe)?;
            probe[which] = shifted(point, i, base - step)?;
            let down = eval(&probe)?;
            probe[which] = point.clone();

            let numeric = (up - down) / (2.0 * step);
            let exact = analytic[which].data()[i];
            let denom = exact.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn shifted(point: &Tensor, i: usize, value: f64) -> Result<Tensor> {
    let mut data = point.data().to_vec();
    data[i] = value;
    Tensor::new(point.shape().to_vec(), data)
}

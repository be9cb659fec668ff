//! Central-difference gradient oracle.

use super::Tensor;
use crate::error::{Error, Result};

/// Maximum relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `eps`:
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<Fun>(f: Fun, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    Fun: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    finite_diff_check_inputs(|xs| f(&xs[0]), std::slice::from_ref(x), eps, None)
}

/// Multi-input variant. When `max_coords` is set, at most that many
/// coordinates per input are probed, evenly strided through the tensor.
pub fn finite_diff_check_inputs<Fun>(f: Fun, xs: &[Tensor<f64>], eps: f64, max_coords: Option<usize>) -> Result<f64>
where
    Fun: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = xs.iter().map(|x| x.detach_requires_grad()).collect();
    let y = f(&leaves)?;
    if y.numel() != 1 {
        return Err(Error::Oracle(format!("function must be scalar, got {:?}", y.shape())));
    }
    let again = f(&leaves)?;
    if again.item().to_bits() != y.item().to_bits() {
        return Err(Error::Oracle("function is not deterministic".into()));
    }
    y.backward()?;

    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let n = leaf.numel();
        let step = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(step) {
            let eval = |delta: f64| -> Result<f64> {
                let mut inputs: Vec<Tensor<f64>> = xs.iter().map(|x| x.detach()).collect();
                let mut v = xs[i].to_vec();
                v[j] += delta;
                inputs[i] = Tensor::new(v, xs[i].shape())?;
                Ok(f(&inputs)?.item())
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

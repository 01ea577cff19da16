//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker re-runs the caller's graph builder with perturbed copies of
//! each input, so it stays independent of the backward implementation it is
//! checking.

use super::{Graph, Tensor, Var};
use crate::Result;

/// Relative error between an analytic and a numeric derivative, floored so
/// near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Checks gradients of a scalar-valued graph against central finite
/// differences with step `h`. `build` receives leaf vars in the order of
/// `inputs` and must return the scalar loss. Returns the worst relative
/// error over every element of every input that has `requires_grad` set.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).data[0];
        g.backward(loss)?;
        let grads = vars.iter().map(|&v| g.grad(v).map(|s| s.to_vec())).collect();
        Ok((value, grads))
    };

    let (_, grads) = eval(inputs)?;
    let mut worst: f64 = 0.0;
    for (pi, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let analytic = grads[pi]
            .as_ref()
            .ok_or_else(|| crate::Error::Contract(format!("input {pi} received no gradient")))?;
        for ei in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[pi].data[ei] += h;
            let mut minus = inputs.to_vec();
            minus[pi].data[ei] -= h;
            let fp = eval(&plus)?.0;
            let fm = eval(&minus)?.0;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[ei], numeric));
        }
    }
    Ok(worst)
}

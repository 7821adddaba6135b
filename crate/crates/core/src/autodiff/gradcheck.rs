//! Central finite-difference oracle for taped functions.
//!
//! The check only ever evaluates the forward pass on fresh graphs, so it is
//! independent of every backward rule it verifies.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient comparison, one entry per input tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// Norm-wise relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)` per input.
    pub rel_err: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Evaluates `f` at `inputs` and returns its scalar value.
pub fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    g.item(out)
}

/// Compares the taped gradient of scalar `f` against central differences
/// with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut est = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval_scalar(&work, &f)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval_scalar(&work, &f)?;
            work[i].data_mut()[j] = orig;
            est.data_mut()[j] = (up - down) / (2.0 * h);
        }
        numeric.push(est);
    }

    let rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff = norm(a.data().iter().zip(n.data()).map(|(x, y)| x - y));
            let scale = norm(a.data().iter().copied()) + norm(n.data().iter().copied());
            diff / scale.max(1e-12)
        })
        .collect();
    Ok(GradCheck {
        analytic,
        numeric,
        rel_err,
    })
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|v| v * v).sum::<f64>().sqrt()
}

//! Minimal reverse-mode automatic differentiation over `f32` tensors.

mod adam;
mod graph;
pub mod kernels;
mod tensor;

pub use adam::{Adam, AdamConfig, Parameter};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("node {0} does not contribute to the output")]
    NotInGraph(usize),
    #[error("second-order gradient through {0} is not supported")]
    SecondOrderUnsupported(&'static str),
    #[error("warp failed: {0}")]
    Warp(String),
}

/// Per-sample input-gradient norm penalty `mean((‖∇ₓ s‖₂ - 1)²)` where `s`
/// is the scalar `score` and `x` a batched input with `requires_grad`.
/// The result stays differentiable with respect to everything `score`
/// depends on.
pub fn gradient_penalty(g: &mut Graph, score: Var, x: Var) -> Result<Var, TensorError> {
    let gx = g.grad(score, &[x], true)?[0];
    let sq = g.square(gx);
    let per = g.sum_per_sample(sq);
    let norm = g.sqrt(per);
    let dev = g.add_scalar(norm, -1.0);
    let dev2 = g.square(dev);
    Ok(g.mean_all(dev2))
}

/// Per-sample `‖∇ₓ s‖₂`, evaluated without recording.
pub fn input_gradient_norms(g: &mut Graph, score: Var, x: Var) -> Result<Vec<f64>, TensorError> {
    let gx = g.grad(score, &[x], false)?[0];
    let t = g.value(gx);
    let per = t.numel() / t.batch();
    Ok(t
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt())
        .collect())
}

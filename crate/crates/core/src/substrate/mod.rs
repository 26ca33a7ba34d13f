//! Reverse-mode differentiable tensor computation.
//!
//! A [`Graph`] records every operation as it is evaluated; the backward pass
//! walks the record in exact reverse order. [`finite_diff_check`] compares the
//! result against central differences.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} is not part of this graph")]
    UnknownNode(usize),
    #[error("node {0} does not track gradients")]
    NotDifferentiable(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Names of the differentiable primitives [`Graph`] provides.
pub fn op_catalog() -> &'static [&'static str] {
    &[
        "add",
        "sub",
        "mul",
        "div",
        "maximum",
        "minimum",
        "neg",
        "abs",
        "exp",
        "log",
        "pow",
        "affine",
        "clamp",
        "matmul",
        "transpose",
        "conv2d",
        "conv_transpose2d",
        "leaky_relu",
        "relu",
        "tanh",
        "sigmoid",
        "softmax",
        "mean",
        "sum",
        "mean_all",
        "sum_all",
        "l2_normalize",
        "instance_norm",
        "reshape",
        "gather",
        "concat",
    ]
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference gradient of `f` at `t`.
pub fn numerical_gradient<F>(f: &F, t: &Tensor, step: f64) -> Result<Tensor, TensorError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>,
{
    if !(step > 0.0) {
        return Err(TensorError::Invalid(format!(
            "step must be positive, got {step}"
        )));
    }
    let eval = |x: Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let id = g.constant(x)?;
        let out = f(&mut g, id)?;
        let v = g.scalar_value(out)?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff",
                node: out.index(),
            });
        }
        Ok(v)
    };
    let mut grad = Vec::with_capacity(t.numel());
    let mut probe = t.clone();
    for i in 0..t.numel() {
        let orig = t.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(t.shape().to_vec(), grad)
}

/// Autodiff gradient of `f` at `t`.
pub fn autodiff_gradient<F>(f: &F, t: &Tensor) -> Result<Tensor, TensorError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>,
{
    let mut g = Graph::new();
    let id = g.param(t.clone())?;
    let out = f(&mut g, id)?;
    Ok(g.gradients(out, &[id])?.remove(0))
}

/// Largest elementwise [`relative_error`] between two gradients.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

/// Compare the autodiff gradient of scalar `f` at `t` with central
/// differences; returns the maximum relative error.
pub fn finite_diff_check<F>(f: F, t: &Tensor, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>,
{
    let numeric = numerical_gradient(&f, t, step)?;
    let analytic = autodiff_gradient(&f, t)?;
    Ok(max_relative_error(&analytic, &numeric))
}

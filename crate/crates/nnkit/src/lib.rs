//! Minimal dense-network kit.
//!
//! Everything a small actor-critic stack needs and nothing more:
//!
//! - [`ParamVector`]: flat `f32` storage with a named tensor layout.
//! - [`MlpSpec`] and the [`mlp`] functions: multilayer perceptrons, evaluated
//!   either directly (inference) or on a [`Tape`] (training).
//! - [`Tape`]: reverse-mode automatic differentiation over row-major matrices,
//!   generic over the scalar type so gradients can be checked in `f64`.
//! - [`heads`]: diagonal Gaussian (optionally tanh-squashed) and categorical
//!   log-densities.
//! - [`Adam`]: adaptive-moment optimizer.
//! - [`checkpoint`]: bit-exact directory checkpoints.
//!
//! Parameters are stored as `f32`; sums over batches and matrix products
//! accumulate in `f64`.

pub mod checkpoint;
mod error;
pub mod heads;
pub mod mlp;
mod optim;
mod params;
mod real;
mod tape;

pub use checkpoint::{Checkpoint, NamedParams};
pub use error::{NnError, Result};
pub use heads::{categorical_logprob, gaussian_logprob, GaussianHead};
pub use mlp::{forward, Activation, MlpSpec};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamVector, TensorLayout};
pub use real::Real;
pub use tape::{Gradients, ParamVars, Tape, Tensor, Var};

/// Differentiates a scalar loss with respect to every tensor of `params`.
///
/// `loss_fn` receives a fresh tape and the parameter leaves and must return a
/// `1 x 1` node. Returns the loss value and a gradient with the same layout as
/// `params`. A non-finite loss is reported with the first tape operation that
/// produced a non-finite value.
pub fn grad<T, F>(params: &ParamVector, loss_fn: F) -> Result<(f64, ParamVector)>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, &ParamVars) -> Var,
{
    let mut tape = Tape::<T>::new();
    let vars = tape.params(params);
    let loss = loss_fn(&mut tape, &vars);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        let term = tape
            .first_non_finite()
            .map(|(idx, op)| format!("{op} (node {idx})"))
            .unwrap_or_else(|| "loss".to_owned());
        return Err(NnError::Numerical {
            term,
            detail: format!("loss evaluated to {value}"),
        });
    }
    let grads = tape.backward(loss);
    let flat = grads.collect(&vars);
    Ok((value, ParamVector::new(params.layout().to_vec(), flat)?))
}

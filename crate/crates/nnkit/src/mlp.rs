//! Multilayer perceptrons.
//!
//! Layer `l` owns two tensors in the parameter layout: `l{l}.weight` with
//! shape `(out, in)` and `l{l}.bias` with shape `(out,)`. Hidden layers apply
//! the `MlpSpec` activation; the output layer is linear.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use sha2::{Digest, Sha256};

use crate::params::{ParamVector, TensorLayout};
use crate::real::Real;
use crate::tape::{ParamVars, Tape, Tensor, Var};
use crate::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, activation: Activation, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            activation,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(NnError::Config("input and output dims must be >= 1".into()));
        }
        if self.hidden.is_empty() {
            return Err(NnError::Config("hidden layer list must be non-empty".into()));
        }
        if self.hidden.contains(&0) {
            return Err(NnError::Config("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    /// `(in, out)` per layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn layout(&self) -> Vec<TensorLayout> {
        self.layer_dims()
            .iter()
            .enumerate()
            .flat_map(|(l, &(i, o))| {
                [
                    TensorLayout::new(format!("l{l}.weight"), vec![o, i]),
                    TensorLayout::new(format!("l{l}.bias"), vec![o]),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Short stable digest of the architecture, stored in checkpoints.
    pub fn hash(&self) -> String {
        let canon = format!(
            "mlp;in={};hidden={:?};act={};out={}",
            self.input_dim,
            self.hidden,
            self.activation.name(),
            self.output_dim
        );
        let digest = Sha256::digest(canon.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout() != self.layout().as_slice() {
            return Err(NnError::Config(format!(
                "parameter layout does not match spec {}",
                self.hash()
            )));
        }
        Ok(())
    }

    /// He-uniform hidden layers, zero biases, output layer scaled by
    /// `output_scale` (0 gives an exactly zero output layer).
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, output_scale: f32) -> Result<ParamVector> {
        self.validate()?;
        let dims = self.layer_dims();
        let mut values = Vec::with_capacity(self.num_params());
        for (l, &(inp, out)) in dims.iter().enumerate() {
            let limit = (6.0 / inp as f32).sqrt();
            let scale = if l + 1 == dims.len() { output_scale } else { 1.0 };
            let dist = Uniform::new_inclusive(-limit, limit)
                .map_err(|e| NnError::Config(format!("init range: {e}")))?;
            for _ in 0..inp * out {
                let w: f32 = dist.sample(rng);
                values.push(w * scale);
            }
            values.extend(std::iter::repeat_n(0.0, out));
        }
        ParamVector::new(self.layout(), values)
    }

    /// Records the network on a tape. `x` is `[B x input_dim]`.
    pub fn forward_tape<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Var {
        let n_layers = self.hidden.len() + 1;
        assert_eq!(vars.len(), 2 * n_layers, "parameter leaves for spec");
        let mut h = x;
        for l in 0..n_layers {
            let z = tape.matmul_t(h, vars.get(2 * l));
            let z = tape.add_row(z, vars.get(2 * l + 1));
            h = if l + 1 < n_layers {
                match self.activation {
                    Activation::Relu => tape.relu(z),
                    Activation::Tanh => tape.tanh(z),
                }
            } else {
                z
            };
        }
        h
    }

    /// Batched evaluation without a tape: `inputs` holds `rows` samples.
    pub fn forward_rows(&self, params: &ParamVector, inputs: &[f32], rows: usize) -> Result<Vec<f32>> {
        self.check_params(params)?;
        if inputs.len() != rows * self.input_dim {
            return Err(NnError::dim("mlp input", rows * self.input_dim, inputs.len()));
        }
        let dims = self.layer_dims();
        let mut h: Vec<f64> = inputs.iter().map(|&v| v as f64).collect();
        let mut offset = 0;
        for (l, &(inp, out)) in dims.iter().enumerate() {
            let w = &params.values()[offset..offset + inp * out];
            let b = &params.values()[offset + inp * out..offset + inp * out + out];
            offset += inp * out + out;
            let mut next = vec![0.0f64; rows * out];
            for r in 0..rows {
                let x = &h[r * inp..(r + 1) * inp];
                for o in 0..out {
                    let wrow = &w[o * inp..(o + 1) * inp];
                    let mut acc = b[o] as f64;
                    for (xi, wi) in x.iter().zip(wrow) {
                        acc += xi * (*wi as f64);
                    }
                    next[r * out + o] = if l + 1 < dims.len() {
                        self.activation.apply(acc)
                    } else {
                        acc
                    };
                }
            }
            // Round between layers the same way the f32 tape does.
            h = next.into_iter().map(|v| v as f32 as f64).collect();
        }
        Ok(h.into_iter().map(|v| v as f32).collect())
    }

    /// Batched evaluation on a tape, returned as a plain tensor.
    pub fn forward_tensor(&self, params: &ParamVector, x: Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_params(params)?;
        if x.cols != self.input_dim {
            return Err(NnError::dim("mlp input", self.input_dim, x.cols));
        }
        let mut tape = Tape::<f32>::new();
        let vars = tape.frozen_params(params);
        let xv = tape.constant(x);
        let y = self.forward_tape(&mut tape, &vars, xv);
        Ok(tape.value(y).clone())
    }
}

/// Evaluates a single input vector.
pub fn forward(params: &ParamVector, spec: &MlpSpec, input: &[f32]) -> Result<Vec<f32>> {
    spec.validate()?;
    if input.len() != spec.input_dim {
        return Err(NnError::dim("mlp input", spec.input_dim, input.len()));
    }
    spec.forward_rows(params, input, 1)
}

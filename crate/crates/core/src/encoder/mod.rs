//! Projection encoder mapping input features to embeddings, plus its
//! optimizer, training loop and checkpoint format.

mod adamw;
mod checkpoint;
mod train;

pub use adamw::{AdamWConfig, AdamWState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use train::{
    eval_split_for, init_params, train, EpochLog, EvalTarget, TextProjector, TrainConfig, TrainLog,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// One affine map `y = x·W + b` with `W` stored `inputs × outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(weights: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::DimensionMismatch(format!(
                "bias of length {} for a layer with {} outputs",
                bias.len(),
                weights.cols()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) || !weights.is_finite() {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.cols()
    }

    /// Uniform in `±1/√fan_in`, zero bias.
    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let values = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weights: DenseMatrix::from_vec(inputs, outputs, values).expect("finite init"),
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        let (n, din) = x.shape();
        let dout = self.outputs();
        let mut y = DenseMatrix::zeros(n, dout);
        for r in 0..n {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            yr.copy_from_slice(&self.bias);
            for (i, xi) in xr.iter().enumerate().take(din) {
                if *xi == 0.0 {
                    continue;
                }
                let w = self.weights.row(i);
                for (o, wv) in w.iter().enumerate() {
                    yr[o] += xi * wv;
                }
            }
        }
        y
    }
}

/// One or two affine layers; two-layer encoders apply `tanh` in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    layers: Vec<Layer>,
}

impl EncoderParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() || layers.len() > 2 {
            return Err(Error::InvalidConfig(format!(
                "encoder needs 1 or 2 layers, got {}",
                layers.len()
            )));
        }
        for w in layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::DimensionMismatch(format!(
                    "layer output {} feeds layer input {}",
                    w[0].outputs(),
                    w[1].inputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Single layer with identity weights and zero bias.
    pub fn identity(d: usize) -> Self {
        Self {
            layers: vec![Layer {
                weights: DenseMatrix::identity(d),
                bias: vec![0.0; d],
            }],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// All parameters in a fixed order: per layer, weights then bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.values(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.values_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: DenseMatrix::zeros(l.inputs(), l.outputs()),
                    bias: vec![0.0; l.outputs()],
                })
                .collect(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.d_in() {
            return Err(Error::DimensionMismatch(format!(
                "encoder expects {} input features, got {}",
                self.d_in(),
                x.cols()
            )));
        }
        Ok(())
    }
}

/// Row-wise encoder output (not normalized).
pub fn forward(params: &EncoderParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    params.check_input(x)?;
    let mut h = params.layers[0].apply(x);
    for layer in &params.layers[1..] {
        h.values_mut().iter_mut().for_each(|v| *v = v.tanh());
        h = layer.apply(&h);
    }
    Ok(h)
}

/// Gradients of a scalar loss whose gradient w.r.t. the encoder output is
/// `grad_output`.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub params: EncoderParams,
    pub input: DenseMatrix,
}

pub fn backward(
    params: &EncoderParams,
    x: &DenseMatrix,
    grad_output: &DenseMatrix,
) -> Result<EncoderGrads> {
    params.check_input(x)?;
    if grad_output.shape() != (x.rows(), params.d_out()) {
        return Err(Error::DimensionMismatch(format!(
            "output gradient {:?}, expected {:?}",
            grad_output.shape(),
            (x.rows(), params.d_out())
        )));
    }

    // inputs to every layer, post-activation
    let mut inputs = vec![x.clone()];
    for layer in &params.layers[..params.layers.len() - 1] {
        let mut h = layer.apply(inputs.last().unwrap());
        h.values_mut().iter_mut().for_each(|v| *v = v.tanh());
        inputs.push(h);
    }

    let mut grads = params.zeros_like();
    let mut upstream = grad_output.clone();
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let input = &inputs[li];
        let g = &mut grads.layers[li];
        for r in 0..input.rows() {
            let xr = input.row(r);
            let ur = upstream.row(r);
            for (b, u) in g.bias.iter_mut().zip(ur) {
                *b += u;
            }
            for (i, xi) in xr.iter().enumerate() {
                let gw = g.weights.row_mut(i);
                for (o, u) in ur.iter().enumerate() {
                    gw[o] += xi * u;
                }
            }
        }
        let mut down = DenseMatrix::zeros(input.rows(), layer.inputs());
        for r in 0..input.rows() {
            let ur = upstream.row(r);
            let dr = down.row_mut(r);
            for (i, d) in dr.iter_mut().enumerate() {
                *d = crate::numerics::dot(layer.weights.row(i), ur);
            }
        }
        if li > 0 {
            // through tanh: d/dx tanh = 1 - tanh²
            for (d, h) in down.values_mut().iter_mut().zip(input.values()) {
                *d *= 1.0 - h * h;
            }
        }
        upstream = down;
    }
    Ok(EncoderGrads {
        params: grads,
        input: upstream,
    })
}

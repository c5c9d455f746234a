use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => math::sigmoid(z),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

/// One fully connected layer, `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = math::sqrt(6.0 / (input + output) as f64);
        let mut weight = Matrix::zeros(output, input);
        for w in weight.as_mut_slice() {
            *w = rng.gen_range(-limit..=limit);
        }
        Dense {
            weight,
            bias: alloc::vec![0.0; output],
            activation,
        }
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        for r in 0..x.rows() {
            let xr = x.row(r);
            let dst = out.row_mut(r);
            for (o, d) in dst.iter_mut().enumerate() {
                *d = self
                    .activation
                    .apply(dot(self.weight.row(o), xr) + self.bias[o]);
            }
        }
        out
    }
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseNetRepr", into = "DenseNetRepr")]
pub struct DenseNet {
    layers: Vec<Dense>,
}

#[derive(Serialize, Deserialize)]
struct DenseNetRepr {
    layers: Vec<Dense>,
}

impl TryFrom<DenseNetRepr> for DenseNet {
    type Error = Error;
    fn try_from(r: DenseNetRepr) -> Result<Self> {
        DenseNet::new(r.layers)
    }
}

impl From<DenseNet> for DenseNetRepr {
    fn from(n: DenseNet) -> Self {
        DenseNetRepr { layers: n.layers }
    }
}

/// Activations recorded during a forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    // inputs[i] feeds layer i; outputs[i] is its post-activation output
    inputs: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

impl Tape {
    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn output(&self) -> Option<&Matrix> {
        self.outputs.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter gradients of a [`DenseNet`] plus the gradient w.r.t. its input.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<DenseGrad>,
    pub input: Matrix,
}

impl NetGrads {
    /// Flattened in the same order as [`DenseNet::params`].
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.flatten_into(&mut v);
        v
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        for l in &layers {
            ensure_dim("layer bias", l.output_dim(), l.bias.len())?;
        }
        for pair in layers.windows(2) {
            ensure_dim(
                "adjacent layer dimensions",
                pair[0].output_dim(),
                pair[1].input_dim(),
            )?;
        }
        Ok(Self { layers })
    }

    /// Glorot-initialized network with layer widths `dims[0] → dims[1] → …`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert_eq!(
            dims.len(),
            activations.len() + 1,
            "one activation per layer"
        );
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &a)| Dense::glorot(w[0], w[1], a, rng))
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        ensure_dim("network input", self.input_dim(), batch.cols())?;
        let mut x = self.layers[0].forward(batch);
        for l in &self.layers[1..] {
            x = l.forward(&x);
        }
        Ok(x)
    }

    pub fn forward_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward(&m)?.into_vec())
    }

    /// Forward pass that records what [`DenseNet::backward`] needs.
    pub fn forward_taped(&self, batch: &Matrix, tape: &mut Tape) -> Result<Matrix> {
        ensure_dim("network input", self.input_dim(), batch.cols())?;
        tape.inputs.clear();
        tape.outputs.clear();
        let mut x = batch.clone();
        for l in &self.layers {
            let y = l.forward(&x);
            tape.inputs.push(x);
            x = y.clone();
            tape.outputs.push(y);
        }
        Ok(x)
    }

    /// Backpropagates `upstream` (dLoss/dOutput, `batch × out`) through the
    /// recorded pass.
    pub fn backward(&self, tape: &Tape, upstream: &Matrix) -> Result<NetGrads> {
        if tape.is_empty() {
            return Err(Error::NoForwardPass);
        }
        ensure_dim("tape depth", self.layers.len(), tape.outputs.len())?;
        let batch = tape.inputs[0].rows();
        ensure_dim("upstream rows", batch, upstream.rows())?;
        ensure_dim("upstream cols", self.output_dim(), upstream.cols())?;

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta_out = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &tape.outputs[i];
            let input = &tape.inputs[i];
            let (n_out, n_in) = (layer.output_dim(), layer.input_dim());
            // delta = upstream ⊙ σ'(z)
            let mut delta = delta_out;
            for (d, &a) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                *d *= layer.activation.derivative_from_output(a);
            }
            let mut gw = Matrix::zeros(n_out, n_in);
            let mut gb = alloc::vec![0.0; n_out];
            let mut prev = Matrix::zeros(batch, n_in);
            for r in 0..batch {
                let dr = delta.row(r);
                let xr = input.row(r);
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &x) in gw.row_mut(o).iter_mut().zip(xr) {
                        *g += d * x;
                    }
                    for (p, &w) in prev.row_mut(r).iter_mut().zip(layer.weight.row(o)) {
                        *p += d * w;
                    }
                }
            }
            grads.push(DenseGrad {
                weight: gw,
                bias: gb,
            });
            delta_out = prev;
        }
        grads.reverse();
        Ok(NetGrads {
            layers: grads,
            input: delta_out,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn params_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.params_into(&mut v);
        v
    }

    /// Inverse of [`DenseNet::params_into`]; returns how many values were consumed.
    pub fn set_params(&mut self, src: &[f64]) -> Result<usize> {
        let n = self.num_params();
        if src.len() < n {
            return Err(Error::Dimension {
                context: "parameter vector",
                expected: n,
                found: src.len(),
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&src[at..at + w.len()]);
            at += w.len();
            let b = l.bias.len();
            l.bias.copy_from_slice(&src[at..at + b]);
            at += b;
        }
        Ok(at)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

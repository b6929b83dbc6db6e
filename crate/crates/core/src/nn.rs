//! Dense layers shared by the CVAE and the predictors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// `y = x · W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` initialization for weights and biases.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::new(vec![inputs, outputs], weight).expect("sized"),
            bias: Tensor::vector(bias),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph) -> BoundLinear {
        BoundLinear {
            weight: g.parameter(self.weight.clone()),
            bias: g.parameter(self.bias.clone()),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let xw = g.matmul(x, self.weight)?;
        g.add_row(xw, self.bias)
    }
}

/// Two-layer perceptron: `out(tanh(hidden(x)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMlp {
    pub hidden: BoundLinear,
    pub output: BoundLinear,
}

impl Mlp {
    pub fn init<R: Rng>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::init(inputs, hidden, rng),
            output: Linear::init(hidden, outputs, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        BoundMlp {
            hidden: self.hidden.bind(g),
            output: self.output.bind(g),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(4);
        out.extend(self.hidden.params_mut());
        out.extend(self.output.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(4);
        out.extend(self.hidden.params());
        out.extend(self.output.params());
        out
    }
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(g, x)?;
        let h = g.tanh(h)?;
        self.output.forward(g, h)
    }
}

/// Row sums of an `m×n` node as an `m×1` node.
pub fn row_sums(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let n = g.value(x).cols();
    let ones = g.constant(Tensor::ones(&[n, 1]));
    g.matmul(x, ones)
}

/// `Σ_i w_i · column_i` for an `m×1` node as a scalar node.
pub fn weighted_sum(g: &mut Graph, column: NodeId, weights: &[f64]) -> Result<NodeId> {
    let w = g.constant(Tensor::matrix(1, weights.len(), weights.to_vec())?);
    let total = g.matmul(w, column)?;
    Ok(g.reduce_sum(total))
}

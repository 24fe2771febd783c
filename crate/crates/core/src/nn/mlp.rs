use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Feed-forward network: affine layers with `activation` between them and a linear output.
///
/// Weights are stored `in x out` so a batch `x` (rows are samples) maps as `x W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Checkpoint", try_from = "Checkpoint")]
pub struct Mlp {
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// On-disk form of an [`Mlp`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<Mlp> for Checkpoint {
    fn from(net: Mlp) -> Self {
        Checkpoint {
            layer_dims: net.layer_dims,
            activation: net.activation,
            weights: net
                .weights
                .iter()
                .map(|w| w.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            biases: net.biases.iter().map(|b| b.iter().copied().collect()).collect(),
        }
    }
}

impl TryFrom<Checkpoint> for Mlp {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        validate_dims(&c.layer_dims)?;
        let layers = c.layer_dims.len() - 1;
        if c.weights.len() != layers || c.biases.len() != layers {
            return Err(shape_err(
                "checkpoint",
                format!("{} layers declared, {} weights, {} biases", layers, c.weights.len(), c.biases.len()),
            ));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (l, (w, b)) in c.weights.into_iter().zip(c.biases).enumerate() {
            let (fan_in, fan_out) = (c.layer_dims[l], c.layer_dims[l + 1]);
            if w.len() != fan_in || w.iter().any(|r| r.len() != fan_out) || b.len() != fan_out {
                return Err(shape_err(
                    "checkpoint",
                    format!("layer {l} does not match {fan_in}x{fan_out}"),
                ));
            }
            let flat: Vec<f64> = w.into_iter().flatten().collect();
            weights.push(Array2::from_shape_vec((fan_in, fan_out), flat).expect("checked"));
            biases.push(Array2::from_shape_vec((1, fan_out), b).expect("checked"));
        }
        Ok(Mlp {
            layer_dims: c.layer_dims,
            activation: c.activation,
            weights,
            biases,
        })
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer dims must list at least two positive widths, got {dims:?}"
        )));
    }
    Ok(())
}

/// Parameter nodes of one network inside a [`Graph`], in `w0, b0, w1, b1, ...` order.
#[derive(Clone, Debug)]
pub struct Bound {
    params: Vec<Var>,
}

impl Bound {
    pub fn weight(&self, layer: usize) -> Var {
        self.params[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> Var {
        self.params[2 * layer + 1]
    }

    /// Gradients for every parameter, zero where the loss did not depend on it.
    pub fn grads(&self, net: &Mlp, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(net.params())
            .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Array2::zeros(p.dim())))
            .collect()
    }
}

impl Mlp {
    /// Glorot-uniform initialized network with zero biases.
    pub fn new<R: Rng + ?Sized>(layer_dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.random_range(-limit..limit)
            }));
            biases.push(Array2::zeros((1, fan_out)));
        }
        Ok(Mlp {
            layer_dims: layer_dims.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        validate_dims(layer_dims)?;
        let (weights, biases) = layer_dims
            .windows(2)
            .map(|p| (Array2::zeros((p[0], p[1])), Array2::zeros((1, p[1]))))
            .unzip();
        Ok(Mlp {
            layer_dims: layer_dims.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Parameters in `w0, b0, w1, b1, ...` order.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }

    pub fn num_params(&self) -> usize {
        self.params().map(|p| p.len()).sum()
    }

    /// Plain forward pass (no graph).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.ncols() != self.input_dim() {
            return Err(shape_err(
                "forward",
                format!("input has {} columns, network expects {}", x.ncols(), self.input_dim()),
            ));
        }
        let last = self.num_layers() - 1;
        let mut h = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(w) + b;
            if l < last {
                h.mapv_inplace(|v| self.activation.apply(v));
            }
        }
        Ok(h)
    }

    /// Adds this network's parameters to `g` as leaves.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            params: self.params().map(|p| g.leaf(p.clone())).collect(),
        }
    }

    fn activate(&self, g: &mut Graph, v: Var) -> Var {
        match self.activation {
            Activation::Relu => g.relu(v),
            Activation::Tanh => g.tanh(v),
        }
    }

    /// Forward pass recorded on `g`.
    pub fn forward_on(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        if g.value(x).ncols() != self.input_dim() {
            return Err(shape_err(
                "forward",
                format!("input has {} columns, network expects {}", g.value(x).ncols(), self.input_dim()),
            ));
        }
        self.forward_from(g, p, x, 0)
    }

    fn forward_from(&self, g: &mut Graph, p: &Bound, mut h: Var, first_layer: usize) -> Result<Var> {
        let last = self.num_layers() - 1;
        for l in first_layer..self.num_layers() {
            let z = g.matmul(h, p.weight(l))?;
            h = g.add_row(z, p.bias(l))?;
            if l < last {
                h = self.activate(g, h);
            }
        }
        Ok(h)
    }

    /// Evaluates the network on every pair `[x_i, y_j]` without materializing the
    /// concatenated inputs: the first layer is split into its `x` and `y` row blocks.
    /// Output row `i * y_rows + j` belongs to pair `(i, j)`.
    pub fn forward_pairs_on(&self, g: &mut Graph, p: &Bound, x: Var, y: Var) -> Result<Var> {
        let (xd, yd) = (g.value(x).ncols(), g.value(y).ncols());
        if xd + yd != self.input_dim() {
            return Err(shape_err(
                "forward_pairs",
                format!("{xd} + {yd} columns, network expects {}", self.input_dim()),
            ));
        }
        let wx = g.slice_rows(p.weight(0), 0, xd)?;
        let wy = g.slice_rows(p.weight(0), xd, xd + yd)?;
        let hx = g.matmul(x, wx)?;
        let hy = g.matmul(y, wy)?;
        let hy = g.add_row(hy, p.bias(0))?;
        let mut h = g.pair_sum(hx, hy)?;
        if self.num_layers() == 1 {
            return Ok(h);
        }
        h = self.activate(g, h);
        self.forward_from(g, p, h, 1)
    }

    /// Scales every parameter by `c`; used to build degenerate test networks.
    pub fn scale_params(&mut self, c: f64) {
        for p in self.params_mut() {
            p.mapv_inplace(|v| v * c);
        }
    }

    /// Mean of the absolute parameter values, a cheap health indicator.
    pub fn mean_abs_param(&self) -> f64 {
        let n = self.num_params() as f64;
        self.params().map(|p| p.mapv(f64::abs).sum()).sum::<f64>() / n
    }
}

/// Horizontally concatenates row-aligned matrices.
pub fn hcat(parts: &[&Tensor]) -> Result<Tensor> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).map_err(|e| shape_err("hcat", e.to_string()))
}

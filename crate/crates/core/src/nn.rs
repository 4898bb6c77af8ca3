//! Fully connected ELU network with exact input Jacobians, backpropagation
//! and a decoupled-weight-decay Adam optimizer.
//!
//! Layer `i` maps `R^{d_i} → R^{d_{i+1}}` affinely; every layer except the
//! last is followed by `ELU(t) = t` for `t ≥ 0`, `e^t − 1` otherwise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GeoError, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

#[inline]
pub fn elu(t: f64) -> f64 {
    if t >= 0.0 {
        t
    } else {
        t.exp_m1()
    }
}

/// Derivative of [`elu`], taking the right limit `1` at `t = 0`.
#[inline]
pub fn elu_derivative(t: f64) -> f64 {
    if t >= 0.0 {
        1.0
    } else {
        t.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in` weight matrix.
    pub weights: Matrix,
    pub bias: Vector,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weights: Matrix::zeros(self.weights.nrows(), self.weights.ncols()),
            bias: Vector::zeros(self.bias.len()),
        }
    }
}

/// Parameter-shaped container used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Layer>,
}

impl Params {
    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Params,
}

/// Activations recorded by a batched forward pass, one column per sample.
struct Trace {
    /// Input of each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Matrix>,
    output: Matrix,
}

impl Mlp {
    /// Glorot-uniform weights `U(−b, b)`, `b = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound)),
                    bias: Vector::zeros(fan_out),
                }
            })
            .collect();
        Ok(Mlp {
            dims: dims.to_vec(),
            params: Params { layers },
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| GeoError::InvalidArgument("network needs at least one layer".into()))?;
        let mut dims = vec![first.weights.ncols()];
        for layer in &layers {
            check_dim("layer input", *dims.last().expect("nonempty"), layer.weights.ncols())?;
            check_dim("layer bias", layer.weights.nrows(), layer.bias.len())?;
            dims.push(layer.weights.nrows());
        }
        validate_dims(&dims)?;
        let model = Mlp {
            dims,
            params: Params { layers },
        };
        if !model.params.slices().flatten().all(|v| v.is_finite()) {
            return Err(GeoError::InvalidArgument("network parameters must be finite".into()));
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims validated nonempty")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.params.layers
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn zero_params(&self) -> Params {
        Params {
            layers: self.params.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    fn last_index(&self) -> usize {
        self.params.layers.len() - 1
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        check_dim("network input", self.input_dim(), x.len())?;
        let last = self.last_index();
        let mut h = x.clone();
        for (i, layer) in self.params.layers.iter().enumerate() {
            let mut z = &layer.weights * &h + &layer.bias;
            if i < last {
                z.apply(|t| *t = elu(*t));
            }
            h = z;
        }
        Ok(h)
    }

    /// Output together with the exact Jacobian `d output / d input`.
    pub fn forward_with_jacobian(&self, x: &Vector) -> Result<(Vector, Matrix)> {
        check_dim("network input", self.input_dim(), x.len())?;
        let last = self.last_index();
        let mut h = x.clone();
        let mut jac = Matrix::identity(x.len(), x.len());
        for (i, layer) in self.params.layers.iter().enumerate() {
            let mut z = &layer.weights * &h + &layer.bias;
            jac = &layer.weights * jac;
            if i < last {
                for (r, t) in z.iter_mut().enumerate() {
                    let d = elu_derivative(*t);
                    jac.row_mut(r).iter_mut().for_each(|v| *v *= d);
                    *t = elu(*t);
                }
            }
            h = z;
        }
        Ok((h, jac))
    }

    pub fn input_jacobian(&self, x: &Vector) -> Result<Matrix> {
        Ok(self.forward_with_jacobian(x)?.1)
    }

    /// Forward pass over the columns of `xs`.
    pub fn forward_batch(&self, xs: &Matrix) -> Result<Matrix> {
        Ok(self.trace(xs)?.output)
    }

    fn trace(&self, xs: &Matrix) -> Result<Trace> {
        check_dim("network batch input", self.input_dim(), xs.nrows())?;
        let last = self.last_index();
        let mut inputs = Vec::with_capacity(self.params.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = xs.clone();
        for (i, layer) in self.params.layers.iter().enumerate() {
            let mut z = &layer.weights * &h;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            inputs.push(h);
            if i < last {
                let mut a = z.clone();
                a.apply(|t| *t = elu(*t));
                pre.push(z);
                h = a;
            } else {
                h = z;
            }
        }
        Ok(Trace { inputs, pre, output: h })
    }

    /// Gradients of `Σ_j ⟨upstream_j, output_j⟩` over the batch columns.
    fn backward(&self, trace: &Trace, upstream: &Matrix) -> Params {
        let last = self.last_index();
        let mut layers: Vec<Layer> = Vec::with_capacity(last + 1);
        let mut g = upstream.clone();
        for i in (0..=last).rev() {
            let layer = &self.params.layers[i];
            if i < last {
                for (gv, t) in g.iter_mut().zip(trace.pre[i].iter()) {
                    *gv *= elu_derivative(*t);
                }
            }
            let weights = &g * trace.inputs[i].transpose();
            let bias = g.column_sum();
            if i > 0 {
                g = layer.weights.transpose() * &g;
            }
            layers.push(Layer { weights, bias });
        }
        layers.reverse();
        Params { layers }
    }

    /// Gradient of `⟨upstream, f(x)⟩` with respect to every weight and bias.
    pub fn param_gradients(&self, x: &Vector, upstream: &Vector) -> Result<Params> {
        check_dim("upstream gradient", self.output_dim(), upstream.len())?;
        let xs = Matrix::from_column_slice(x.len(), 1, x.as_slice());
        let trace = self.trace(&xs)?;
        let up = Matrix::from_column_slice(upstream.len(), 1, upstream.as_slice());
        Ok(self.backward(&trace, &up))
    }

    /// Batched forward pass followed by backpropagation of `upstream(output)`.
    ///
    /// The closure receives the batch output and returns a scalar together
    /// with its gradient with respect to that output.
    pub fn value_and_param_gradients<F>(&self, xs: &Matrix, loss: F) -> Result<(f64, Params)>
    where
        F: FnOnce(&Matrix) -> (f64, Matrix),
    {
        let trace = self.trace(xs)?;
        let (value, upstream) = loss(&trace.output);
        check_dim("batch upstream rows", self.output_dim(), upstream.nrows())?;
        check_dim("batch upstream columns", xs.ncols(), upstream.ncols())?;
        Ok((value, self.backward(&trace, &upstream)))
    }

    fn check_shape(&self, other: &Params) -> Result<()> {
        check_dim("parameter layers", self.params.layers.len(), other.layers.len())?;
        for (a, b) in self.params.layers.iter().zip(&other.layers) {
            check_dim("parameter weights", a.weights.len(), b.weights.len())?;
            check_dim("parameter weight rows", a.weights.nrows(), b.weights.nrows())?;
            check_dim("parameter bias", a.bias.len(), b.bias.len())?;
        }
        Ok(())
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(GeoError::InvalidArgument(format!(
            "layer dims need at least two entries, all ≥ 1, got {dims:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Params,
    second_moment: Params,
    step_count: u64,
}

impl AdamState {
    pub fn new(model: &Mlp, config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: model.zero_params(),
            second_moment: model.zero_params(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update. Weight decay is decoupled: parameters
    /// are first scaled by `1 − lr · wd`.
    pub fn step(&mut self, model: &mut Mlp, grads: &Params) -> Result<()> {
        model.check_shape(grads)?;
        model.check_shape(&self.first_moment)?;
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        let slots = model
            .params
            .slices_mut()
            .zip(grads.slices())
            .zip(self.first_moment.slices_mut().zip(self.second_moment.slices_mut()));
        for ((theta, g), (m, v)) in slots {
            for i in 0..theta.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] = theta[i] * decay - lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Portable JSON checkpoint of a trained projection network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_dims: Vec<usize>,
    /// Row-major `out × in` weights, one flat array per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: String,
    pub sigma: f64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_model(model: &Mlp, sigma: f64, seed: u64) -> Self {
        let weights = model
            .layers()
            .iter()
            .map(|l| {
                let (rows, cols) = l.weights.shape();
                (0..rows)
                    .flat_map(|r| (0..cols).map(move |c| (r, c)))
                    .map(|(r, c)| l.weights[(r, c)])
                    .collect()
            })
            .collect();
        Checkpoint {
            layer_dims: model.layer_dims().to_vec(),
            weights,
            biases: model.layers().iter().map(|l| l.bias.as_slice().to_vec()).collect(),
            activation: "elu".to_string(),
            sigma,
            seed,
        }
    }

    pub fn to_model(&self) -> Result<Mlp> {
        if self.activation != "elu" {
            return Err(GeoError::parse("checkpoint", "activation", format!("unsupported `{}`", self.activation)));
        }
        validate_dims(&self.layer_dims).map_err(|e| GeoError::parse("checkpoint", "layer_dims", e.to_string()))?;
        let n = self.layer_dims.len() - 1;
        if self.weights.len() != n {
            return Err(GeoError::parse("checkpoint", "weights", format!("expected {n} layers, got {}", self.weights.len())));
        }
        if self.biases.len() != n {
            return Err(GeoError::parse("checkpoint", "biases", format!("expected {n} layers, got {}", self.biases.len())));
        }
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (self.layer_dims[i], self.layer_dims[i + 1]);
                if self.weights[i].len() != fan_in * fan_out {
                    return Err(GeoError::parse(
                        format!("checkpoint layer {i}"),
                        "weights",
                        format!("expected {} values, got {}", fan_in * fan_out, self.weights[i].len()),
                    ));
                }
                if self.biases[i].len() != fan_out {
                    return Err(GeoError::parse(
                        format!("checkpoint layer {i}"),
                        "biases",
                        format!("expected {fan_out} values, got {}", self.biases[i].len()),
                    ));
                }
                Ok(Layer {
                    weights: Matrix::from_row_slice(fan_out, fan_in, &self.weights[i]),
                    bias: Vector::from_column_slice(&self.biases[i]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers)
    }
}

//! Feedforward student network with hand-written backpropagation.
//!
//! Batches are row-major `[batch × features]`; a layer computes
//! `z = x · Wᵀ + b` with `W` stored as `[fan_out × fan_in]`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `[fan_out × fan_in]`
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub activation: Activation,
}

impl<T: Scalar> Layer<T> {
    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }
}

/// Gradient (or velocity) for one layer, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> LayerGrad<T> {
    fn zeros_like(layer: &Layer<T>) -> Self {
        LayerGrad {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients<T> {
    pub layers: Vec<LayerGrad<T>>,
}

/// Multi-layer perceptron: ReLU hidden layers, identity output layer.
///
/// Equality compares parameters, velocity and seed; the cache generation is ignored.
#[derive(Debug, Clone)]
pub struct MlpModel<T> {
    layers: Vec<Layer<T>>,
    velocity: Vec<LayerGrad<T>>,
    /// Seed the parameters were drawn from; carried into checkpoints.
    seed: u64,
    /// Bumped on every parameter update so stale forward caches are detected.
    generation: u64,
}

impl<T: PartialEq> PartialEq for MlpModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.velocity == other.velocity && self.seed == other.seed
    }
}

/// Activations recorded by [`MlpModel::forward`] for a single batch.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input: Array2<T>,
    pre: Vec<Array2<T>>,
    post: Vec<Array2<T>>,
    generation: u64,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

/// Kaiming-normal hidden layers, Xavier-uniform output layer, zero biases.
pub fn init_mlp<T: Scalar>(layer_sizes: &[usize], seed: u64) -> Result<MlpModel<T>> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "need at least input and output sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = layer_sizes.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for (k, pair) in layer_sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let is_output = k + 1 == n_layers;
        let weights = if is_output {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            Array2::from_shape_simple_fn((fan_out, fan_in), || T::lit(dist.sample(&mut rng)))
        } else {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn((fan_out, fan_in), || T::lit(dist.sample(&mut rng)))
        };
        layers.push(Layer {
            weights,
            bias: Array1::zeros(fan_out),
            activation: if is_output {
                Activation::Identity
            } else {
                Activation::Relu
            },
        });
    }
    MlpModel::from_layers(layers, seed)
}

impl<T: Scalar> MlpModel<T> {
    /// Builds a model from explicit layers with zeroed velocity.
    pub fn from_layers(layers: Vec<Layer<T>>, seed: u64) -> Result<Self> {
        let velocity = layers.iter().map(LayerGrad::zeros_like).collect();
        let model = MlpModel {
            layers,
            velocity,
            seed,
            generation: 0,
        };
        model.validate()?;
        Ok(model)
    }

    pub(crate) fn from_parts(
        layers: Vec<Layer<T>>,
        velocity: Vec<LayerGrad<T>>,
        seed: u64,
    ) -> Result<Self> {
        let model = MlpModel {
            layers,
            velocity,
            seed,
            generation: 0,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::Shape(format!(
                    "layer {k}: bias length {} != fan_out {}",
                    layer.bias.len(),
                    layer.fan_out()
                )));
            }
            if k > 0 && layer.fan_in() != self.layers[k - 1].fan_out() {
                return Err(Error::Shape(format!(
                    "layer {k}: fan_in {} does not chain with previous fan_out {}",
                    layer.fan_in(),
                    self.layers[k - 1].fan_out()
                )));
            }
            let v = &self.velocity[k];
            if v.weights.dim() != layer.weights.dim() || v.bias.len() != layer.bias.len() {
                return Err(Error::Shape(format!(
                    "layer {k}: velocity shape does not mirror parameters"
                )));
            }
            if !layer.weights.iter().chain(layer.bias.iter()).all(|x| x.is_finite()) {
                return Err(Error::Numeric(format!("layer {k}: non-finite parameter")));
            }
        }
        if self.velocity.len() != self.layers.len() {
            return Err(Error::Shape("velocity depth differs from layer count".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Mutable parameter access. Invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn velocity(&self) -> &[LayerGrad<T>] {
        &self.velocity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `[input, hidden..., output]`
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].fan_in()];
        sizes.extend(self.layers.iter().map(Layer::fan_out));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(Layer::fan_out).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Logits only, no cache.
    pub fn predict(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.check_input(x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = affine(h.view(), layer);
            if layer.activation == Activation::Relu {
                h.mapv_inplace(relu);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let input = x.to_owned();
        for layer in &self.layers {
            let prev = post.last().unwrap_or(&input);
            let z = affine(prev.view(), layer);
            let a = match layer.activation {
                Activation::Relu => z.mapv(relu),
                Activation::Identity => z.clone(),
            };
            pre.push(z);
            post.push(a);
        }
        let logits = post.last().expect("at least one layer").clone();
        Ok((
            logits,
            ForwardCache {
                input,
                pre,
                post,
                generation: self.generation,
            },
        ))
    }

    fn check_input(&self, x: ArrayView2<'_, T>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "feature dimension {} does not match model input {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Exact gradients of a scalar loss given its gradient with respect to the logits.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_logits: ArrayView2<'_, T>,
    ) -> Result<ParamGradients<T>> {
        if cache.generation != self.generation || cache.depth() != self.layers.len() {
            return Err(Error::Contract(
                "forward cache does not belong to the current model parameters".into(),
            ));
        }
        let out_shape = cache.post.last().expect("non-empty cache").dim();
        if d_logits.dim() != out_shape {
            return Err(Error::Shape(format!(
                "logit gradient shape {:?} does not match forward output {:?}",
                d_logits.dim(),
                out_shape
            )));
        }
        let mut grads: Vec<LayerGrad<T>> = Vec::with_capacity(self.layers.len());
        let mut delta = d_logits.to_owned();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if layer.activation == Activation::Relu {
                Zip::from(&mut delta)
                    .and(&cache.pre[k])
                    .for_each(|d, &z| {
                        if z <= T::zero() {
                            *d = T::zero();
                        }
                    });
            }
            let input = if k == 0 { &cache.input } else { &cache.post[k - 1] };
            let gw = delta.t().dot(input);
            let gb = delta.sum_axis(Axis(0));
            if k > 0 {
                delta = delta.dot(&layer.weights);
            }
            grads.push(LayerGrad {
                weights: gw,
                bias: gb,
            });
        }
        grads.reverse();
        Ok(ParamGradients { layers: grads })
    }

    /// Classic momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
    pub fn sgd_momentum_step(
        &mut self,
        grads: &ParamGradients<T>,
        lr: T,
        momentum: T,
    ) -> Result<()> {
        check_step_params(lr, momentum)?;
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "gradient depth {} != model depth {}",
                grads.layers.len(),
                self.layers.len()
            )));
        }
        for (k, (g, layer)) in grads.layers.iter().zip(&self.layers).enumerate() {
            if g.weights.dim() != layer.weights.dim() || g.bias.len() != layer.bias.len() {
                return Err(Error::Shape(format!("layer {k}: gradient shape mismatch")));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in layer {k}")));
            }
        }
        for ((layer, v), g) in self
            .layers
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(&grads.layers)
        {
            momentum_update(&mut layer.weights, &mut v.weights, &g.weights, lr, momentum);
            momentum_update_1d(&mut layer.bias, &mut v.bias, &g.bias, lr, momentum);
        }
        self.generation += 1;
        Ok(())
    }
}

pub(crate) fn check_step_params<T: Scalar>(lr: T, momentum: T) -> Result<()> {
    if !(lr >= T::zero()) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
    }
    if !(momentum >= T::zero() && momentum < T::one()) {
        return Err(Error::Config(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    Ok(())
}

pub(crate) fn momentum_update<T: Scalar>(
    param: &mut Array2<T>,
    vel: &mut Array2<T>,
    grad: &Array2<T>,
    lr: T,
    momentum: T,
) {
    Zip::from(param).and(vel).and(grad).for_each(|p, v, &g| {
        *v = momentum * *v + g;
        *p -= lr * *v;
    });
}

fn momentum_update_1d<T: Scalar>(
    param: &mut Array1<T>,
    vel: &mut Array1<T>,
    grad: &Array1<T>,
    lr: T,
    momentum: T,
) {
    Zip::from(param).and(vel).and(grad).for_each(|p, v, &g| {
        *v = momentum * *v + g;
        *p -= lr * *v;
    });
}

fn affine<T: Scalar>(x: ArrayView2<'_, T>, layer: &Layer<T>) -> Array2<T> {
    let mut z = x.dot(&layer.weights.t());
    z += &layer.bias;
    z
}

#[inline]
fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// Max-subtracted softmax of one logit vector.
pub fn softmax<T: Scalar>(logits: ArrayView1<'_, T>) -> Array1<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut out = logits.mapv(|v| (v - max).exp());
    let total: T = out.sum();
    out.mapv_inplace(|v| v / total);
    out
}

/// Row-wise softmax of a logit batch.
pub fn softmax_rows<T: Scalar>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (src, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        dst.assign(&softmax(src));
    }
    out
}

/// Pulls a gradient with respect to probabilities back through a row-wise softmax:
/// `∂L/∂o = q ⊙ (g − ⟨g, q⟩)`.
pub fn softmax_backward<T: Scalar>(
    probs: ArrayView2<'_, T>,
    d_probs: ArrayView2<'_, T>,
) -> Array2<T> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((q, g), mut o) in probs.rows().into_iter().zip(d_probs.rows()).zip(out.rows_mut()) {
        let inner = q.dot(&g);
        Zip::from(&mut o).and(q).and(g).for_each(|o, &q, &g| *o = q * (g - inner));
    }
    out
}

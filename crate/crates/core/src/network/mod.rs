//! Periodic convolutional correction networks.

mod surrogate;

pub use surrogate::{Mode, SurrogateKind, SurrogateModel, TcTendency};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvShape};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub filters: usize,
    pub window: usize,
    pub activation: Activation,
}

impl ConvLayerSpec {
    pub fn weight_len(&self) -> usize {
        self.filters * self.in_channels * self.window
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.filters
    }
}

/// Stack of periodic convolution layers mapping one channel to one channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub name: String,
    pub layers: Vec<ConvLayerSpec>,
}

const FILTERS: usize = 16;
const WINDOW: usize = 5;

impl CnnSpec {
    /// `depth` hidden layers of 16 filters with window 5, then a 16-to-1
    /// projection with window 1 and no activation.
    pub fn stack(name: &str, depth: usize, activation: Activation) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        for i in 0..depth {
            layers.push(ConvLayerSpec {
                in_channels: if i == 0 { 1 } else { FILTERS },
                filters: FILTERS,
                window: WINDOW,
                activation,
            });
        }
        layers.push(ConvLayerSpec {
            in_channels: if depth == 0 { 1 } else { FILTERS },
            filters: 1,
            window: 1,
            activation: Activation::None,
        });
        Self {
            name: name.to_string(),
            layers,
        }
    }

    pub fn cnn_a() -> Self {
        Self::stack("cnn-a", 4, Activation::Tanh)
    }

    pub fn cnn_b() -> Self {
        Self::stack("cnn-b", 1, Activation::None)
    }

    pub fn cnn_c() -> Self {
        Self::stack("cnn-c", 1, Activation::Tanh)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.layers.first() else {
            return Err(Error::Config(format!("{}: no layers", self.name)));
        };
        if first.in_channels != 1 || self.layers.last().map(|l| l.filters) != Some(1) {
            return Err(Error::Config(format!(
                "{}: network must map one channel to one channel",
                self.name
            )));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].filters != pair[1].in_channels {
                return Err(Error::Config(format!(
                    "{}: layer {} emits {} channels, layer {} expects {}",
                    self.name,
                    i,
                    pair[0].filters,
                    i + 1,
                    pair[1].in_channels
                )));
            }
        }
        if let Some(l) = self.layers.iter().find(|l| l.window % 2 == 0 || l.filters == 0) {
            return Err(Error::Config(format!("{}: invalid layer {l:?}", self.name)));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayerSpec::param_len).sum()
    }

    /// Offsets of each layer's `(weights, bias)` blocks in the flat vector.
    pub fn layout(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let w = off;
                off += l.param_len();
                (w, w + l.weight_len())
            })
            .collect()
    }
}

pub fn param_count(spec: &CnnSpec) -> usize {
    spec.param_count()
}

/// Weights and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `[filters][in_channels][window]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Flat parameter vector: for each layer, its weights then its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(spec: &CnnSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
        }
    }

    pub fn from_vec(spec: &CnnSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "{} expects {} parameters, got {}",
                spec.name,
                spec.param_count(),
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn unflatten(&self, spec: &CnnSpec) -> Result<Vec<LayerParams>> {
        if self.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "{} expects {} parameters, got {}",
                spec.name,
                spec.param_count(),
                self.len()
            )));
        }
        Ok(spec
            .layers
            .iter()
            .zip(spec.layout())
            .map(|(l, (w, b))| LayerParams {
                weights: self.values[w..b].to_vec(),
                bias: self.values[b..b + l.filters].to_vec(),
            })
            .collect())
    }

    pub fn flatten(spec: &CnnSpec, layers: &[LayerParams]) -> Result<Self> {
        if layers.len() != spec.layers.len() {
            return Err(Error::Shape(format!(
                "{} has {} layers, got {}",
                spec.name,
                spec.layers.len(),
                layers.len()
            )));
        }
        let mut values = Vec::with_capacity(spec.param_count());
        for (l, p) in spec.layers.iter().zip(layers) {
            if p.weights.len() != l.weight_len() || p.bias.len() != l.filters {
                return Err(Error::Shape(format!("layer block sizes do not match {l:?}")));
            }
            values.extend_from_slice(&p.weights);
            values.extend_from_slice(&p.bias);
        }
        Ok(Self { values })
    }
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))` for a layer, with
/// fans counted over the convolution window.
pub fn init_scale(layer: &ConvLayerSpec) -> f64 {
    let fan_in = (layer.in_channels * layer.window) as f64;
    let fan_out = (layer.filters * layer.window) as f64;
    (6.0 / (fan_in + fan_out)).sqrt()
}

/// Random hidden weights, zero hidden biases, and an all-zero final layer, so
/// the initial network output is exactly zero.
pub fn init_params(spec: &CnnSpec, seed_value: u64) -> ParamVector {
    let mut rng = seed::rng_from(seed_value);
    let mut p = ParamVector::zeros(spec);
    let last = spec.layers.len() - 1;
    for (i, (l, (w, b))) in spec.layers.iter().zip(spec.layout()).enumerate() {
        if i == last {
            break;
        }
        let a = init_scale(l);
        for v in &mut p.values[w..b] {
            *v = rng.random_range(-a..a);
        }
    }
    p
}

fn conv_shape(l: &ConvLayerSpec, batch: usize, n: usize) -> ConvShape {
    ConvShape {
        batch,
        cin: l.in_channels,
        cout: l.filters,
        n,
        window: l.window,
    }
}

fn check_input(spec: &CnnSpec, params: &ParamVector, len: usize, n: usize) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "{} expects {} parameters, got {}",
            spec.name,
            spec.param_count(),
            params.len()
        )));
    }
    if n == 0 || !len.is_multiple_of(n) {
        return Err(Error::Shape(format!("input length {len} is not a multiple of {n}")));
    }
    if let Some(l) = spec.layers.iter().find(|l| l.window > n) {
        return Err(Error::Shape(format!("window {} exceeds ring length {n}", l.window)));
    }
    Ok(())
}

/// Applies the network to each length-`n` ring in `x` into `out`.
pub(crate) fn cnn_apply(spec: &CnnSpec, params: &[f64], x: &[f64], n: usize, out: &mut [f64]) {
    let batch = x.len() / n;
    let mut cur = x.to_vec();
    let mut next = Vec::new();
    for (l, (w, b)) in spec.layers.iter().zip(spec.layout()) {
        let shape = conv_shape(l, batch, n);
        next.resize(shape.output_len(), 0.0);
        kernels::conv_forward(shape, &cur, &params[w..b], &params[b..b + l.filters], &mut next);
        if l.activation == Activation::Tanh {
            for v in &mut next {
                *v = kernels::tanh(*v);
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    out.copy_from_slice(&cur);
}

/// Network output for a batch of rings of length `n` stored back to back.
pub fn cnn_forward_batch(spec: &CnnSpec, params: &ParamVector, x: &[f64], n: usize) -> Result<Vec<f64>> {
    check_input(spec, params, x.len(), n)?;
    let mut out = vec![0.0; x.len()];
    cnn_apply(spec, params.as_slice(), x, n, &mut out);
    Ok(out)
}

/// Network output for a single ring.
pub fn cnn_forward(spec: &CnnSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    cnn_forward_batch(spec, params, x, x.len())
}

/// Per-layer weight and bias handles sliced once from a parameter node.
#[derive(Debug, Clone)]
pub struct CnnVars {
    layers: Vec<(Var, Var)>,
}

impl CnnVars {
    pub fn new(g: &mut Graph, spec: &CnnSpec, params: Var) -> Self {
        let layers = spec
            .layers
            .iter()
            .zip(spec.layout())
            .map(|(l, (w, b))| (g.slice(params, w, b - w), g.slice(params, b, l.filters)))
            .collect();
        Self { layers }
    }

    /// Taped network applied to each length-`n` ring of `x`.
    pub fn apply(&self, g: &mut Graph, spec: &CnnSpec, x: Var, n: usize) -> Var {
        let batch = g.dim(x) / n.max(1);
        let mut cur = x;
        for (l, &(w, b)) in spec.layers.iter().zip(&self.layers) {
            cur = g.conv(cur, w, b, conv_shape(l, batch, n));
            if l.activation == Activation::Tanh {
                cur = g.tanh(cur);
            }
        }
        cur
    }
}

//! Named parameter storage and the small layers the detector is built from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvShape, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    #[serde(skip)]
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on;
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, on: bool) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.trainable[i] = on;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), ParamId(i)))
            .collect();
    }

    /// Copies values of every parameter present in `other` under the same
    /// name and shape; returns how many were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(j) = other.names.iter().position(|m| m == name) {
                if other.values[j].shape() == self.values[i].shape() {
                    self.values[i] = other.values[j].clone();
                    n += 1;
                }
            }
        }
        n
    }
}

/// Uniform initialization with the Glorot bound.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// `y = x·W + b` over token rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, inputs, outputs, inputs, outputs));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, outputs));
        Self { w, b, inputs, outputs }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(inputs, outputs));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, outputs));
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.affine(x, w, b)
    }
}

/// Stack of linear layers with an activation between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`. With `zero_last`, the final layer
    /// starts at zero so the network initially outputs zeros.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        zero_last: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i == n - 1 {
                    Linear::zeroed(store, &lname, dims[i], dims[i + 1])
                } else {
                    Linear::new(store, &lname, dims[i], dims[i + 1], rng)
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h);
            if i + 1 < self.layers.len() {
                h = self.activation.apply(g, h);
            }
        }
        h
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty MLP")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}

/// Square-kernel convolution over `[C × H·W]` maps.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        // He-uniform for ReLU stacks
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::from_vec(
            out_channels,
            fan_in,
            (0..out_channels * fan_in)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        );
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(out_channels, 1)),
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.shape(h, w).out_hw()
    }

    fn shape(&self, height: usize, width: usize) -> ConvShape {
        ConvShape {
            in_channels: self.in_channels,
            height,
            width,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let shape = self.shape(h, w);
        let (ho, wo) = shape.out_hw();
        let wv = g.param(self.w);
        let bv = g.param(self.b);
        (g.conv2d(x, wv, bv, shape), ho, wo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_round_trips_names_and_flags() {
        let mut s = ParamStore::new();
        let a = s.add("enc.a", Tensor::zeros(2, 2));
        let b = s.add("dec.b", Tensor::zeros(1, 3));
        s.set_trainable_prefix("enc.", false);
        assert!(!s.is_trainable(a));
        assert!(s.is_trainable(b));
        assert_eq!(s.find("dec.b"), Some(b));
        assert_eq!(s.num_scalars(), 7);
        let json = serde_json::to_string(&s).unwrap();
        let mut back: ParamStore = serde_json::from_str(&json).unwrap();
        back.reindex();
        assert_eq!(back.find("enc.a"), Some(a));
        assert!(!back.is_trainable(a));
    }

    #[test]
    fn zero_last_mlp_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let m = Mlp::new(&mut s, "m", &[3, 8, 2], Activation::Gelu, true, &mut rng);
        let mut g = Graph::with_params(&s);
        let x = g.constant(Tensor::full(4, 3, 0.7));
        let y = m.forward(&mut g, x);
        assert_eq!(g.value(y), &Tensor::zeros(4, 2));
    }

    #[test]
    fn conv_output_shape_follows_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let c = Conv::new(&mut s, "c", 3, 5, 3, 2, &mut rng);
        assert_eq!(c.out_hw(64, 128), (32, 64));
        assert_eq!(c.out_hw(3, 5), (2, 3));
    }
}

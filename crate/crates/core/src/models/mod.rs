//! Gated generator, patch discriminator with auxiliary classifier, and the
//! parameter storage they share.

mod discriminator;
mod generator;

pub use discriminator::{
    probe_receptive_field, receptive_field, DiscriminatorConfig, DiscriminatorParams, LayerSpec,
};
pub use generator::{crop_top_left, pad_to_multiple_of_4, GeneratorConfig, GeneratorParams, ParamGroup};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Activation, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the Gaussian used for every convolution kernel.
pub const INIT_STD: f64 = 0.02;

/// Epsilon inside instance normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<f32>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Record every parameter on `tape`; those selected by `trainable`
    /// become tracked leaves, the rest constants.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: impl Fn(ParamId) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let v = t.cast::<T>();
                if trainable(ParamId(i)) {
                    tape.param(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Order-sensitive digest of every parameter bit, for freeze checks.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            n.hash(&mut h);
            t.shape().hash(&mut h);
            t.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub(crate) fn fingerprint_of(&self, ids: impl Iterator<Item = ParamId>) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for id in ids {
            self.tensors[id.0].to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

pub(crate) fn gaussian<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<f32> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
}

/// Convolution optionally followed by instance normalization and an
/// activation. Normalized layers carry no bias (the mean removal cancels it).
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub norm: Option<(ParamId, ParamId)>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Option<Activation>,
}

pub(crate) struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub norm: bool,
    pub activation: Option<Activation>,
}

impl ConvLayer {
    pub(crate) fn create<R: Rng>(store: &mut ParamStore, prefix: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let k = spec.kernel;
        let weight = store.add(format!("{prefix}/weight"), gaussian(&[spec.out_c, spec.in_c, k, k], INIT_STD, rng));
        let (bias, norm) = if spec.norm {
            let g = store.add(format!("{prefix}/gamma"), Tensor::full(&[spec.out_c], 1.0));
            let b = store.add(format!("{prefix}/beta"), Tensor::zeros(&[spec.out_c]));
            (None, Some((g, b)))
        } else {
            (Some(store.add(format!("{prefix}/bias"), Tensor::zeros(&[spec.out_c]))), None)
        };
        ConvLayer { weight, bias, norm, kernel: k, stride: spec.stride, padding: spec.padding, activation: spec.activation }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut y = tape.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, self.padding)?;
        if let Some((g, b)) = self.norm {
            y = tape.instance_norm(y, p.var(g), p.var(b), NORM_EPS)?;
        }
        if let Some(act) = self.activation {
            y = tape.activation(y, act)?;
        }
        Ok(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        if let Some((g, b)) = self.norm {
            v.extend([g, b]);
        }
        v
    }
}

/// Two 3×3 convolutions with a skip connection around them.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: ConvLayer,
    pub second: ConvLayer,
}

impl ResBlock {
    pub(crate) fn create<R: Rng>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Self {
        let spec = |activation| ConvSpec {
            in_c: channels,
            out_c: channels,
            kernel: 3,
            stride: 1,
            padding: Padding::Zero(1),
            norm: true,
            activation,
        };
        let first = ConvLayer::create(store, &format!("{prefix}/conv1"), spec(Some(Activation::Relu)), rng);
        let second = ConvLayer::create(store, &format!("{prefix}/conv2"), spec(None), rng);
        ResBlock { first, second }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = self.second.forward(tape, p, h)?;
        tape.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.first.params();
        v.extend(self.second.params());
        v
    }
}

/// Fractionally-strided convolution (×2), instance norm, relu.
#[derive(Clone, Debug)]
pub struct UpLayer {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl UpLayer {
    pub(crate) fn create<R: Rng>(store: &mut ParamStore, prefix: &str, in_c: usize, out_c: usize, rng: &mut R) -> Self {
        UpLayer {
            weight: store.add(format!("{prefix}/weight"), gaussian(&[in_c, out_c, 3, 3], INIT_STD, rng)),
            gamma: store.add(format!("{prefix}/gamma"), Tensor::full(&[out_c], 1.0)),
            beta: store.add(format!("{prefix}/beta"), Tensor::zeros(&[out_c])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d_transpose(x, p.var(self.weight), None, 2)?;
        let y = tape.instance_norm(y, p.var(self.gamma), p.var(self.beta), NORM_EPS)?;
        tape.relu(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.gamma, self.beta]
    }
}

/// Convex gate weights over the style branches.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleWeights {
    alpha: Vec<f64>,
}

impl StyleWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Invalid("style weights need at least one entry".into()));
        }
        if alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Invalid(format!("style weights must be non-negative: {alpha:?}")));
        }
        let s: f64 = alpha.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("style weights sum to {s}, expected 1")));
        }
        Ok(StyleWeights { alpha })
    }

    pub fn one_hot(styles: usize, c: usize) -> Result<Self> {
        if c >= styles {
            return Err(Error::Index(format!("style {c} of {styles}")));
        }
        let mut alpha = vec![0.0; styles];
        alpha[c] = 1.0;
        Ok(StyleWeights { alpha })
    }

    /// `alpha` on `first`, `1 - alpha` on `second`.
    pub fn blend(styles: usize, first: usize, second: usize, alpha: f64) -> Result<Self> {
        if first >= styles || second >= styles {
            return Err(Error::Index(format!("styles {first}, {second} of {styles}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Invalid(format!("blend weight {alpha} outside [0, 1]")));
        }
        let mut w = vec![0.0; styles];
        w[first] += alpha;
        w[second] += 1.0 - alpha;
        Self::new(w)
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.alpha
    }
}

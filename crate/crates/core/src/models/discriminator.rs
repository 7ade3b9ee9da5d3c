use rand::Rng;

use super::generator::scaled;
use super::{gaussian, Bound, ConvLayer, ConvSpec, ParamStore, INIT_STD};
use crate::autodiff::{Activation, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Kernel extent of every discriminator convolution.
const KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub styles: usize,
    pub width_scale: f64,
}

/// One layer of a chain whose receptive field is to be computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { kernel: usize, stride: usize },
    Pool { kernel: usize, stride: usize },
    TransposedConv { kernel: usize, up: usize },
    GlobalPool,
}

/// Receptive field of one output unit of a chain of local layers, by the
/// backward recurrence `r ← (r − 1)·s + k`.
pub fn receptive_field(layers: &[LayerSpec]) -> Result<usize> {
    layers.iter().rev().try_fold(1usize, |r, layer| match *layer {
        LayerSpec::Conv { kernel, stride } | LayerSpec::Pool { kernel, stride } => {
            if kernel == 0 || stride == 0 {
                return Err(Error::Invalid(format!("degenerate layer {layer:?}")));
            }
            Ok((r - 1) * stride + kernel)
        }
        other => Err(Error::Invalid(format!("receptive field of {other:?} is not supported"))),
    })
}

impl DiscriminatorConfig {
    /// `(in, out, stride, normalized)` per trunk layer.
    fn trunk_plan(&self) -> Vec<(usize, usize, usize, bool)> {
        let w = |c| scaled(c, self.width_scale);
        vec![(3, w(64), 2, false), (w(64), w(128), 2, true), (w(128), w(256), 2, true), (w(256), w(512), 1, true)]
    }

    pub fn trunk_channels(&self) -> usize {
        scaled(512, self.width_scale)
    }

    /// Trunk followed by one head.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut v: Vec<LayerSpec> =
            self.trunk_plan().iter().map(|&(_, _, stride, _)| LayerSpec::Conv { kernel: KERNEL, stride }).collect();
        v.push(LayerSpec::Conv { kernel: KERNEL, stride: 1 });
        v
    }

    /// Left edge (in input pixels, possibly negative) of output unit 0 and
    /// the distance between neighbouring output units.
    pub fn unit_offset(&self) -> (isize, usize) {
        let mut left = 0isize;
        let mut jump = 1usize;
        for spec in self.layer_specs() {
            if let LayerSpec::Conv { stride, .. } = spec {
                left -= jump as isize; // every layer pads by 1
                jump *= stride;
            }
        }
        (left, jump)
    }
}

/// 70×70 patch discriminator whose trunk also feeds the style classifier.
#[derive(Clone, Debug)]
pub struct DiscriminatorParams {
    config: DiscriminatorConfig,
    store: ParamStore,
    trunk: Vec<ConvLayer>,
    adv_head: ConvLayer,
    cls_head: ConvLayer,
}

impl DiscriminatorParams {
    pub fn new<R: Rng>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if config.styles == 0 {
            return Err(Error::Config("discriminator needs at least one style class".into()));
        }
        if !(config.width_scale > 0.0 && config.width_scale.is_finite()) {
            return Err(Error::Config(format!("width_scale {}", config.width_scale)));
        }
        let mut store = ParamStore::default();
        let trunk = config
            .trunk_plan()
            .into_iter()
            .enumerate()
            .map(|(i, (in_c, out_c, stride, norm))| {
                ConvLayer::create(
                    &mut store,
                    &format!("trunk/{i}"),
                    ConvSpec {
                        in_c,
                        out_c,
                        kernel: KERNEL,
                        stride,
                        padding: Padding::Zero(1),
                        norm,
                        activation: Some(Activation::LEAKY),
                    },
                    rng,
                )
            })
            .collect();
        let head = |out_c| ConvSpec {
            in_c: config.trunk_channels(),
            out_c,
            kernel: KERNEL,
            stride: 1,
            padding: Padding::Zero(1),
            norm: false,
            activation: None,
        };
        let adv_head = ConvLayer::create(&mut store, "adv_head", head(1), rng);
        let cls_head = ConvLayer::create(&mut store, "cls_head", head(config.styles), rng);
        Ok(DiscriminatorParams { config, store, trunk, adv_head, cls_head })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn styles(&self) -> usize {
        self.config.styles
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.store.bind(tape, |_| trainable)
    }

    pub fn trunk_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.trunk_with(tape, p, x, true)
    }

    fn trunk_with<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, normalize: bool) -> Result<Var> {
        match tape.value(x).shape() {
            [_, 3, _, _] => {}
            s => return Err(Error::shape(format!("expected a N×3×H×W image, got {s:?}"))),
        }
        let mut h = self.pad_to_minimum(tape, x)?;
        for layer in &self.trunk {
            if normalize {
                h = layer.forward(tape, p, h)?;
            } else {
                let stripped = ConvLayer { norm: None, ..layer.clone() };
                h = stripped.forward(tape, p, h)?;
            }
        }
        Ok(h)
    }

    /// Smallest square input whose score map is at least 1×1.
    pub fn min_input_extent(&self) -> usize {
        let out = |mut n: usize| {
            for spec in self.config.layer_specs() {
                if let LayerSpec::Conv { kernel, stride } = spec {
                    if n + 2 < kernel {
                        return 0;
                    }
                    n = (n + 2 - kernel) / stride + 1;
                }
            }
            n
        };
        (1..).find(|&n| out(n) >= 1).expect("some extent yields an output")
    }

    /// Inputs smaller than one patch are zero-padded evenly on every side,
    /// so the score map degenerates to 1×1 instead of vanishing.
    fn pad_to_minimum<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        let min = self.min_input_extent();
        if h >= min && w >= min {
            return Ok(x);
        }
        let pad = (min - h.min(w)).div_ceil(2);
        let eye = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { T::one() } else { T::zero() });
        let eye = tape.constant(eye);
        tape.conv2d(x, eye, None, 1, Padding::Zero(pad))
    }

    /// One-channel patch score map from trunk features.
    pub fn adv_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, features: Var) -> Result<Var> {
        self.adv_head.forward(tape, p, features)
    }

    /// K-channel patch logit map from trunk features.
    pub fn cls_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, features: Var) -> Result<Var> {
        self.cls_head.forward(tape, p, features)
    }

    /// Class logits per sample: the logit map averaged over patches.
    pub fn pooled_logits<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, features: Var) -> Result<Var> {
        let map = self.cls_forward(tape, p, features)?;
        tape.spatial_mean(map)
    }

    pub fn discriminate(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.score_and_classify(x)?.0)
    }

    /// Logit map and the softmax of its spatial average.
    pub fn classify_style(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (_, map, probs) = self.score_and_classify(x)?;
        Ok((map, probs))
    }

    /// Both heads on a single trunk evaluation: `(scores, logit map, pooled
    /// class distribution)`.
    pub fn score_and_classify(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::<f32>::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let feat = self.trunk_forward(&mut tape, &p, xv)?;
        let scores = self.adv_forward(&mut tape, &p, feat)?;
        let map = self.cls_forward(&mut tape, &p, feat)?;
        let pooled = tape.spatial_mean(map)?;
        let probs = softmax_rows(tape.value(pooled));
        Ok((tape.value(scores).clone(), tape.value(map).clone(), probs))
    }

    /// Most likely class per sample.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        let (_, _, probs) = self.score_and_classify(x)?;
        let k = self.styles();
        Ok(probs
            .data()
            .chunks(k)
            .map(|row| {
                row.iter().enumerate().fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
            })
            .collect())
    }

    /// Grow the classifier by one class. Existing class rows are copied, the
    /// new row drawn like a fresh initialisation.
    pub fn add_class<R: Rng>(&mut self, rng: &mut R) -> Result<usize> {
        let k = self.config.styles;
        let wid = self.cls_head.weight;
        let old = self.store.get(wid).clone();
        let (_, c, kh, kw) = old.dims4()?;
        let fresh = gaussian(&[1, c, kh, kw], INIT_STD, rng);
        let mut data = old.into_data();
        data.extend_from_slice(fresh.data());
        *self.store.get_mut(wid) = Tensor::new(&[k + 1, c, kh, kw], data)?;
        if let Some(bid) = self.cls_head.bias {
            let mut b = self.store.get(bid).clone().into_data();
            b.push(0.0);
            *self.store.get_mut(bid) = Tensor::new(&[k + 1], b)?;
        }
        self.config.styles = k + 1;
        Ok(k)
    }

    /// Patch score map with every normalization removed, evaluated at
    /// `f64`. Instance normalization couples all spatial positions, so
    /// locality probes run on this stripped network.
    pub fn local_scores(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::<f64>::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let feat = self.trunk_with(&mut tape, &p, xv, false)?;
        let s = self.adv_forward(&mut tape, &p, feat)?;
        Ok(tape.value(s).clone())
    }
}

fn softmax_rows(logits: &Tensor<f32>) -> Tensor<f32> {
    let k = *logits.shape().last().unwrap();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v as f64;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / z) as f32;
        }
    }
    out
}

/// Measure the receptive field by perturbation: flip single input pixels
/// along a row and a column through one interior output unit and count the
/// pixels that change it. Runs on the normalization-free network.
pub fn probe_receptive_field<R: Rng>(config: &DiscriminatorConfig, input: usize, rng: &mut R) -> Result<usize> {
    let disc = DiscriminatorParams::new(config.clone(), rng)?;
    let analytic = receptive_field(&config.layer_specs())?;
    let (left0, jump) = config.unit_offset();
    // an output unit whose analytic field lies inside the image, if any
    let unit = (0..input)
        .find(|&i| left0 + (i * jump) as isize >= 0)
        .filter(|&i| left0 + (i * jump + analytic) as isize <= input as isize)
        .ok_or_else(|| Error::Invalid(format!("input {input} too small to contain a full receptive field")))?;
    let centre = (left0 + (unit * jump + analytic / 2) as isize) as usize;

    let base = Tensor::<f64>::from_fn(&[1, 3, input, input], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
    let reference = disc.local_scores(&base)?;
    let (_, _, oh, ow) = reference.dims4()?;
    let idx = unit * ow + unit;
    if unit >= oh || unit >= ow {
        return Err(Error::Invalid("probe unit outside the score map".into()));
    }
    let extent = |horizontal: bool| -> Result<usize> {
        let mut hit = Vec::new();
        for pos in 0..input {
            let (y, x) = if horizontal { (centre, pos) } else { (pos, centre) };
            let mut img = base.clone();
            for ch in 0..3 {
                img.data_mut()[(ch * input + y) * input + x] += 10.0;
            }
            let s = disc.local_scores(&img)?;
            if s.data()[idx] != reference.data()[idx] {
                hit.push(pos);
            }
        }
        Ok(match (hit.first(), hit.last()) {
            (Some(a), Some(b)) => b - a + 1,
            _ => 0,
        })
    };
    Ok(extent(true)?.max(extent(false)?))
}

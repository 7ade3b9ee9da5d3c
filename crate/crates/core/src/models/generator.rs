use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Bound, ConvLayer, ConvSpec, ParamId, ParamStore, ResBlock, StyleWeights, UpLayer};
use crate::autodiff::{Activation, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub styles: usize,
    /// Multiplier on every channel count; 1.0 is the reference network.
    pub width_scale: f64,
    /// Residual blocks per style branch (1 or 2).
    pub branch_depth: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { styles: 1, width_scale: 1.0, branch_depth: 1 }
    }
}

pub(crate) fn scaled(base: usize, width_scale: f64) -> usize {
    ((base as f64 * width_scale).round() as usize).max(1)
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.styles == 0 {
            return Err(Error::Config("at least one style is required".into()));
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return Err(Error::Config(format!("width_scale {}", self.width_scale)));
        }
        if !(1..=2).contains(&self.branch_depth) {
            return Err(Error::Config(format!("branch_depth {} (expected 1 or 2)", self.branch_depth)));
        }
        Ok(())
    }

    /// Channel widths `(32, 64, 128)` scaled.
    pub fn widths(&self) -> (usize, usize, usize) {
        (scaled(32, self.width_scale), scaled(64, self.width_scale), scaled(128, self.width_scale))
    }
}

/// Which part of the generator a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Branch(usize),
    Decoder,
}

/// Number of style-shared residual blocks at the start of the decoder.
pub const DECODER_BLOCKS: usize = 5;

/// Encoder, per-style residual branches and decoder of the gated generator.
#[derive(Clone, Debug)]
pub struct GeneratorParams {
    config: GeneratorConfig,
    store: ParamStore,
    groups: Vec<ParamGroup>,
    encoder: Vec<ConvLayer>,
    branches: Vec<Vec<ResBlock>>,
    decoder_blocks: Vec<ResBlock>,
    up: Vec<UpLayer>,
    output: ConvLayer,
}

impl GeneratorParams {
    pub fn new<R: Rng>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c1, c2, c3) = config.widths();
        let mut store = ParamStore::default();
        let mut groups = Vec::new();
        let tag = |store: &ParamStore, groups: &mut Vec<ParamGroup>, g: ParamGroup| {
            groups.resize(store.len(), g);
        };

        let conv = |in_c, out_c, kernel, stride, padding| ConvSpec {
            in_c,
            out_c,
            kernel,
            stride,
            padding,
            norm: true,
            activation: Some(Activation::Relu),
        };
        let encoder = vec![
            ConvLayer::create(&mut store, "encoder/0", conv(3, c1, 7, 1, Padding::Reflect(3)), rng),
            ConvLayer::create(&mut store, "encoder/1", conv(c1, c2, 3, 2, Padding::Zero(1)), rng),
            ConvLayer::create(&mut store, "encoder/2", conv(c2, c3, 3, 2, Padding::Zero(1)), rng),
        ];
        tag(&store, &mut groups, ParamGroup::Encoder);

        let mut branches = Vec::with_capacity(config.styles);
        for c in 0..config.styles {
            branches.push(Self::make_branch(&mut store, c, c3, config.branch_depth, rng));
            tag(&store, &mut groups, ParamGroup::Branch(c));
        }

        let decoder_blocks = (0..DECODER_BLOCKS)
            .map(|i| ResBlock::create(&mut store, &format!("decoder/res/{i}"), c3, rng))
            .collect();
        let up = vec![
            UpLayer::create(&mut store, "decoder/up/0", c3, c2, rng),
            UpLayer::create(&mut store, "decoder/up/1", c2, c1, rng),
        ];
        let output = ConvLayer::create(
            &mut store,
            "decoder/out",
            ConvSpec {
                in_c: c1,
                out_c: 3,
                kernel: 7,
                stride: 1,
                padding: Padding::Reflect(3),
                norm: false,
                activation: Some(Activation::Tanh),
            },
            rng,
        );
        tag(&store, &mut groups, ParamGroup::Decoder);

        Ok(GeneratorParams { config, store, groups, encoder, branches, decoder_blocks, up, output })
    }

    fn make_branch<R: Rng>(store: &mut ParamStore, c: usize, channels: usize, depth: usize, rng: &mut R) -> Vec<ResBlock> {
        (0..depth).map(|i| ResBlock::create(store, &format!("branch/{c}/{i}"), channels, rng)).collect()
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn styles(&self) -> usize {
        self.branches.len()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.index()]
    }

    /// Feature channels at the gate.
    pub fn feature_channels(&self) -> usize {
        self.config.widths().2
    }

    pub fn branch_param_count(&self, c: usize) -> usize {
        self.store.ids().filter(|&id| self.group(id) == ParamGroup::Branch(c)).map(|id| self.store.get(id).len()).sum()
    }

    pub fn group_param_count(&self, g: ParamGroup) -> usize {
        self.store.ids().filter(|&id| self.group(id) == g).map(|id| self.store.get(id).len()).sum()
    }

    /// Digest of every parameter in the selected groups.
    pub fn fingerprint_where(&self, pick: impl Fn(ParamGroup) -> bool) -> u64 {
        self.store.fingerprint_of(self.store.ids().filter(|&id| pick(self.group(id))))
    }

    /// Append a freshly initialised branch and return its style index.
    pub fn add_branch<R: Rng>(&mut self, rng: &mut R) -> usize {
        let c = self.branches.len();
        let channels = self.feature_channels();
        let branch = Self::make_branch(&mut self.store, c, channels, self.config.branch_depth, rng);
        self.branches.push(branch);
        self.groups.resize(self.store.len(), ParamGroup::Branch(c));
        self.config.styles = self.branches.len();
        c
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        self.store.bind(tape, |id| trainable(self.group(id)))
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, 3, h, w] if h % 4 == 0 && w % 4 == 0 && *h >= 4 && *w >= 4 => Ok(()),
            [_, 3, h, w] => Err(Error::shape(format!("image extents {h}x{w} must be positive multiples of 4"))),
            s => Err(Error::shape(format!("expected a N×3×H×W image, got {s:?}"))),
        }
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.check_image(tape.value(x).shape())?;
        self.encoder.iter().try_fold(x, |h, layer| layer.forward(tape, p, h))
    }

    fn check_features(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, c, _, _] if *c == self.feature_channels() => Ok(()),
            s => Err(Error::shape(format!("features {s:?} do not match {} gate channels", self.feature_channels()))),
        }
    }

    /// Branch `c` applied alone.
    pub fn branch<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, f: Var, c: usize) -> Result<Var> {
        let blocks = self.branches.get(c).ok_or_else(|| Error::Index(format!("style {c} of {}", self.styles())))?;
        self.check_features(tape.value(f).shape())?;
        blocks.iter().try_fold(f, |h, b| b.forward(tape, p, h))
    }

    /// Convex combination of branch outputs. Zero-weight branches are not
    /// evaluated and a unit weight is not multiplied, so one-hot weights
    /// reproduce the single branch exactly.
    pub fn transform<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, f: Var, w: &StyleWeights) -> Result<Var> {
        if w.len() != self.styles() {
            return Err(Error::shape(format!("{} style weights for {} branches", w.len(), self.styles())));
        }
        let mut acc: Option<Var> = None;
        for (c, &a) in w.weights().iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let mut y = self.branch(tape, p, f, c)?;
            if a != 1.0 {
                y = tape.scale(y, a)?;
            }
            acc = Some(match acc {
                None => y,
                Some(prev) => tape.add(prev, y)?,
            });
        }
        acc.ok_or_else(|| Error::Invalid("all style weights are zero".into()))
    }

    pub fn decode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, f: Var) -> Result<Var> {
        self.check_features(tape.value(f).shape())?;
        let mut h = self.decoder_blocks.iter().try_fold(f, |h, b| b.forward(tape, p, h))?;
        for u in &self.up {
            h = u.forward(tape, p, h)?;
        }
        self.output.forward(tape, p, h)
    }

    /// `Dec(T(Enc(x), c))`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, c: usize) -> Result<Var> {
        if c >= self.styles() {
            return Err(Error::Index(format!("style {c} of {}", self.styles())));
        }
        let f = self.encode(tape, p, x)?;
        let t = self.branch(tape, p, f, c)?;
        self.decode(tape, p, t)
    }

    /// `Dec(Enc(x))`, the gate skipped entirely.
    pub fn reconstruct_on<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let f = self.encode(tape, p, x)?;
        self.decode(tape, p, f)
    }

    fn eval(&self, input: &Tensor<f32>, f: impl FnOnce(&mut Tape<f32>, &Bound, Var) -> Result<Var>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, |_| false);
        let x = tape.constant(input.clone());
        let y = f(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn encoder_forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.eval(x, |t, p, x| self.encode(t, p, x))
    }

    pub fn gated_transform(&self, f: &Tensor<f32>, w: &StyleWeights) -> Result<Tensor<f32>> {
        self.eval(f, |t, p, f| self.transform(t, p, f, w))
    }

    pub fn branch_forward(&self, f: &Tensor<f32>, c: usize) -> Result<Tensor<f32>> {
        self.eval(f, |t, p, f| self.branch(t, p, f, c))
    }

    pub fn decoder_forward(&self, f: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.eval(f, |t, p, f| self.decode(t, p, f))
    }

    pub fn generate(&self, x: &Tensor<f32>, c: usize) -> Result<Tensor<f32>> {
        self.eval(x, |t, p, x| self.forward(t, p, x, c))
    }

    /// Generate with convex gate weights.
    pub fn generate_blended(&self, x: &Tensor<f32>, w: &StyleWeights) -> Result<Tensor<f32>> {
        self.eval(x, |t, p, x| {
            let f = self.encode(t, p, x)?;
            let g = self.transform(t, p, f, w)?;
            self.decode(t, p, g)
        })
    }

    pub fn reconstruct(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.eval(x, |t, p, x| self.reconstruct_on(t, p, x))
    }

    /// [`generate_blended`](Self::generate_blended) at any resolution: the
    /// input is reflect-padded at the bottom and right to multiples of 4 and
    /// the output cropped back. Identical to it when no padding is needed.
    pub fn stylize_native(&self, x: &Tensor<f32>, w: &StyleWeights) -> Result<Tensor<f32>> {
        let (padded, h, wd) = pad_to_multiple_of_4(x)?;
        crop_top_left(&self.generate_blended(&padded, w)?, h, wd)
    }

    /// Decode a feature map that is zero except for one channel filled with
    /// Gaussian noise of the given magnitude, after passing it through
    /// branch `branch`.
    pub fn visualize_branch_feature<R: Rng>(
        &self,
        branch: usize,
        channel: usize,
        magnitude: f64,
        extent: (usize, usize),
        rng: &mut R,
    ) -> Result<Tensor<f32>> {
        let ch = self.feature_channels();
        if branch >= self.styles() {
            return Err(Error::Index(format!("branch {branch} of {}", self.styles())));
        }
        if channel >= ch {
            return Err(Error::Index(format!("channel {channel} of {ch}")));
        }
        let (h, w) = extent;
        if h == 0 || w == 0 {
            return Err(Error::shape("feature extent must be positive"));
        }
        let mut f = Tensor::zeros(&[1, ch, h, w]);
        for v in &mut f.data_mut()[channel * h * w..(channel + 1) * h * w] {
            let z: f64 = StandardNormal.sample(rng);
            *v = (z * magnitude) as f32;
        }
        self.eval(&f, |t, p, f| {
            let y = self.branch(t, p, f, branch)?;
            self.decode(t, p, y)
        })
    }
}

/// Reflect-pad a batch at the bottom and right so both extents are multiples
/// of 4; returns the original extents.
pub fn pad_to_multiple_of_4(img: &Tensor<f32>) -> Result<(Tensor<f32>, usize, usize)> {
    let (n, c, h, w) = img.dims4()?;
    let (ph, pw) = ((4 - h % 4) % 4, (4 - w % 4) % 4);
    if ph == 0 && pw == 0 {
        return Ok((img.clone(), h, w));
    }
    if ph >= h || pw >= w {
        return Err(Error::shape(format!("image {h}×{w} is too small to pad for inference")));
    }
    let (hh, ww) = (h + ph, w + pw);
    let src = img.data();
    let reflect = |i: usize, len: usize| if i < len { i } else { 2 * (len - 1) - i };
    let mut out = Vec::with_capacity(n * c * hh * ww);
    for plane in 0..n * c {
        for y in 0..hh {
            for x in 0..ww {
                out.push(src[(plane * h + reflect(y, h)) * w + reflect(x, w)]);
            }
        }
    }
    Ok((Tensor::new(&[n, c, hh, ww], out)?, h, w))
}

/// Top-left `h×w` window of every plane.
pub fn crop_top_left(img: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (n, c, hh, ww) = img.dims4()?;
    if h > hh || w > ww {
        return Err(Error::shape(format!("crop {h}×{w} of a {hh}×{ww} image")));
    }
    if (hh, ww) == (h, w) {
        return Ok(img.clone());
    }
    let d = img.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            out.extend_from_slice(&d[(plane * hh + y) * ww..][..w]);
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

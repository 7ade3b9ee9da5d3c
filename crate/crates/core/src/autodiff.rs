//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node whose inputs already exist on the tape,
//! so node order is topological by construction and `backward` is a single
//! reverse sweep. Nodes only carry gradients when at least one input does;
//! constants (frozen parameters, detached images) cost nothing on the way
//! back.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    Reflect(usize),
}

impl Padding {
    pub fn amount(self) -> usize {
        match self {
            Padding::Zero(p) | Padding::Reflect(p) => p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    /// Leaky relu with the 0.2 slope used throughout the discriminator.
    pub const LEAKY: Activation = Activation::LeakyRelu(0.2);
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    /// zero padding applied inside im2col/col2im
    pad: usize,
    /// extents of the image the column matrix is gathered from
    img_h: usize,
    img_w: usize,
    /// extents of the column grid
    grid_h: usize,
    grid_w: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        reflect: usize,
        in_h: usize,
        in_w: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SpatialMean(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    TotalVariation {
        x: Var,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

fn im2col<T: Scalar>(src: &[T], c: usize, g: &ConvGeom, dst: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.pad as isize);
    let (h, w) = (g.img_h as isize, g.img_w as isize);
    let l = g.grid_h * g.grid_w;
    for ci in 0..c {
        let plane = &src[ci * g.img_h * g.img_w..(ci + 1) * g.img_h * g.img_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut dst[((ci * k + ky) * k + kx) * l..][..l];
                for oy in 0..g.grid_h {
                    let iy = oy as isize * s + ky as isize - p;
                    let out = &mut row[oy * g.grid_w..(oy + 1) * g.grid_w];
                    if iy < 0 || iy >= h {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.img_w..][..g.img_w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *o = if ix < 0 || ix >= w { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the image.
fn col2im<T: Scalar>(cols: &[T], c: usize, g: &ConvGeom, dst: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.pad as isize);
    let (h, w) = (g.img_h as isize, g.img_w as isize);
    let l = g.grid_h * g.grid_w;
    for ci in 0..c {
        let plane = &mut dst[ci * g.img_h * g.img_w..(ci + 1) * g.img_h * g.img_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * l..][..l];
                for oy in 0..g.grid_h {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.img_w..][..g.img_w];
                    for ox in 0..g.grid_w {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w {
                            dst_row[ix as usize] += row[oy * g.grid_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn reflect_pad<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); c * hp * wp];
    for ci in 0..c {
        for py in 0..hp {
            let iy = reflect_index(py as isize - p as isize, h);
            for px in 0..wp {
                let ix = reflect_index(px as isize - p as isize, w);
                out[(ci * hp + py) * wp + px] = src[(ci * h + iy) * w + ix];
            }
        }
    }
    out
}

fn reflect_unpad_add<T: Scalar>(grad: &[T], c: usize, h: usize, w: usize, p: usize, dst: &mut [T]) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    for ci in 0..c {
        for py in 0..hp {
            let iy = reflect_index(py as isize - p as isize, h);
            for px in 0..wp {
                let ix = reflect_index(px as isize - p as isize, w);
                dst[(ci * h + iy) * w + ix] += grad[(ci * hp + py) * wp + px];
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (co, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[co % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn sum_planes<T: Scalar>(grad: &[T], channels: usize, plane: usize, dst: &mut [T]) {
    for (idx, chunk) in grad.chunks(plane).enumerate() {
        dst[idx % channels] += chunk.iter().fold(T::zero(), |a, &v| a + v);
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input: no gradient is ever computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked input: `backward` reports its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.index].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Invalid("variable is not recorded on this tape".into()));
        }
        Ok(())
    }

    fn record(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let tracked = inputs.iter().any(|&v| self.nodes[v.index].tracked);
        Ok(self.push(value, op, tracked))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        self.value(a).check_same_shape(self.value(b))
    }

    /// 2-D cross-correlation. `kernel` is `[out_c, in_c, k, k]`, `bias` is
    /// `[out_c]`. Output extents are `floor((H + 2p - k) / s) + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let (n, c, h, w) = self.value(input).dims4()?;
        let (oc, kc, kh, kw) = self.value(kernel).dims4()?;
        if kc != c || kh != kw {
            return Err(Error::shape(format!(
                "conv2d kernel {:?} against input {:?}",
                self.value(kernel).shape(),
                self.value(input).shape()
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Invalid(format!("conv2d stride {stride} (expected 1 or 2)")));
        }
        if let Some(b) = bias {
            self.check(b)?;
            if self.value(b).shape() != [oc] {
                return Err(Error::shape(format!("conv2d bias {:?}, expected [{oc}]", self.value(b).shape())));
            }
        }
        let k = kh;
        let (reflect, zero) = match padding {
            Padding::Zero(p) => (0, p),
            Padding::Reflect(p) => {
                if p >= h || p >= w {
                    return Err(Error::Invalid(format!("reflect padding {p} needs extents > {p}, got {h}x{w}")));
                }
                (p, 0)
            }
        };
        let (img_h, img_w) = (h + 2 * reflect, w + 2 * reflect);
        if img_h + 2 * zero < k || img_w + 2 * zero < k {
            return Err(Error::Invalid(format!(
                "padding {} insufficient for kernel {k} on {h}x{w} input",
                padding.amount()
            )));
        }
        let grid_h = (img_h + 2 * zero - k) / stride + 1;
        let grid_w = (img_w + 2 * zero - k) / stride + 1;
        let geom = ConvGeom {
            batch: n,
            in_c: c,
            out_c: oc,
            kernel: k,
            stride,
            pad: zero,
            img_h,
            img_w,
            grid_h,
            grid_w,
        };
        let ckk = c * k * k;
        let l = grid_h * grid_w;
        let keep_cols = self.is_tracked(kernel);
        let mut cols_all = if keep_cols { vec![T::zero(); n * ckk * l] } else { Vec::new() };
        let mut scratch = vec![T::zero(); ckk * l];
        let mut out = vec![T::zero(); n * oc * l];
        {
            let x = self.value(input).data();
            let wt = self.value(kernel).data();
            for b in 0..n {
                let xb = &x[b * c * h * w..(b + 1) * c * h * w];
                let padded;
                let src = if reflect > 0 {
                    padded = reflect_pad(xb, c, h, w, reflect);
                    &padded[..]
                } else {
                    xb
                };
                let cols = if keep_cols { &mut cols_all[b * ckk * l..(b + 1) * ckk * l] } else { &mut scratch[..] };
                im2col(src, c, &geom, cols);
                T::gemm(oc, ckk, l, wt, false, cols, false, &mut out[b * oc * l..(b + 1) * oc * l], false);
            }
            if let Some(bv) = bias {
                add_bias(&mut out, self.value(bv).data(), l);
            }
        }
        let value = Tensor::new(&[n, oc, grid_h, grid_w], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.record(
            "conv2d",
            value,
            Op::Conv2d { x: input, w: kernel, b: bias, geom, reflect, in_h: h, in_w: w, cols: cols_all },
            &inputs,
        )
    }

    /// Fractionally-strided convolution doubling both spatial extents.
    /// `kernel` is `[in_c, out_c, 3, 3]`; this is the adjoint of a stride-2,
    /// zero-pad-1 convolution with output offset 1, so `H×W → 2H×2W`.
    pub fn conv2d_transpose(&mut self, input: Var, kernel: Var, bias: Option<Var>, up_factor: usize) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        if up_factor != 2 {
            return Err(Error::Invalid(format!("conv2d_transpose up factor {up_factor} (only 2 supported)")));
        }
        let (n, c, h, w) = self.value(input).dims4()?;
        let (kc, oc, kh, kw) = self.value(kernel).dims4()?;
        if kc != c || kh != 3 || kw != 3 {
            return Err(Error::shape(format!(
                "conv2d_transpose kernel {:?} against input {:?}",
                self.value(kernel).shape(),
                self.value(input).shape()
            )));
        }
        if let Some(b) = bias {
            self.check(b)?;
            if self.value(b).shape() != [oc] {
                return Err(Error::shape(format!("conv2d_transpose bias {:?}", self.value(b).shape())));
            }
        }
        let (stride, pad, k) = (2, 1, 3);
        let (oh, ow) = ((h - 1) * stride + k - 2 * pad + 1, (w - 1) * stride + k - 2 * pad + 1);
        debug_assert_eq!((oh, ow), (2 * h, 2 * w));
        let geom = ConvGeom {
            batch: n,
            in_c: c,
            out_c: oc,
            kernel: k,
            stride,
            pad,
            img_h: oh,
            img_w: ow,
            grid_h: h,
            grid_w: w,
        };
        let l = h * w;
        let okk = oc * k * k;
        let mut cols = vec![T::zero(); okk * l];
        let mut out = vec![T::zero(); n * oc * oh * ow];
        {
            let x = self.value(input).data();
            let wt = self.value(kernel).data();
            for b in 0..n {
                T::gemm(okk, c, l, wt, true, &x[b * c * l..(b + 1) * c * l], false, &mut cols, false);
                col2im(&cols, oc, &geom, &mut out[b * oc * oh * ow..(b + 1) * oc * oh * ow]);
            }
            if let Some(bv) = bias {
                add_bias(&mut out, self.value(bv).data(), oh * ow);
            }
        }
        let value = Tensor::new(&[n, oc, oh, ow], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.record("conv2d_transpose", value, Op::ConvTranspose2d { x: input, w: kernel, b: bias, geom }, &inputs)
    }

    /// Per-(sample, channel) normalization over the spatial extent followed by
    /// a per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("instance_norm eps {eps}")));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!("instance_norm affine terms must be [{c}]")));
        }
        let plane = h * w;
        let eps = T::from_f64_lossy(eps);
        let inv_plane = T::one() / T::from_usize(plane).unwrap();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); xv.len()];
        for (idx, chunk) in xv.chunks(plane).enumerate() {
            let ch = idx % c;
            let mean = chunk.iter().fold(T::zero(), |a, &v| a + v) * inv_plane;
            let var = chunk.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_plane;
            let is = T::one() / (var + eps).sqrt();
            inv_std[idx] = is;
            let xh = &mut xhat[idx * plane..(idx + 1) * plane];
            let o = &mut out[idx * plane..(idx + 1) * plane];
            for j in 0..plane {
                xh[j] = (chunk[j] - mean) * is;
                o[j] = g[ch] * xh[j] + bt[ch];
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        self.record("instance_norm", value, Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        self.check(x)?;
        let value = match kind {
            Activation::Relu => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::LeakyRelu(slope) => {
                let s = T::from_f64_lossy(slope);
                self.value(x).map(|v| if v > T::zero() { v } else { v * s })
            }
            Activation::Tanh => self.value(x).map(|v| v.tanh()),
        };
        self.record("activation", value, Op::Act { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.record("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.record("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.record("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let f = T::from_f64_lossy(factor);
        let v = self.value(a).map(|x| x * f);
        self.record("scale", v, Op::Scale(a, f), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        self.check(a)?;
        let o = T::from_f64_lossy(offset);
        let v = self.value(a).map(|x| x + o);
        self.record("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * x);
        self.record("square", v, Op::Square(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x.abs());
        self.record("abs", v, Op::Abs(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).sum());
        self.record("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).mean());
        self.record("mean", v, Op::Mean(a), &[a])
    }

    /// Global average pool: `[N, C, H, W] → [N, C]`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (n, c, h, w) = self.value(a).dims4()?;
        let plane = h * w;
        let inv = T::one() / T::from_usize(plane).unwrap();
        let data = self
            .value(a)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().fold(T::zero(), |acc, &v| acc + v) * inv)
            .collect();
        let v = Tensor::new(&[n, c], data)?;
        self.record("spatial_mean", v, Op::SpatialMean(a), &[a])
    }

    /// Mean over the batch of `-log softmax(logits)[target]`. Logits are
    /// `[N, K]` (or `[K]` for a single sample).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        let (n, k) = match lv.shape() {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            s => return Err(Error::shape(format!("logits must be [N, K], got {s:?}"))),
        };
        if k < 2 {
            return Err(Error::shape(format!("cross-entropy needs at least 2 classes, got {k}")));
        }
        if targets.len() != n {
            return Err(Error::shape(format!("{} targets for batch {n}", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target class {t} with {k} classes")));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (i, row) in lv.data().chunks(k).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() - (row[targets[i]] - max);
        }
        let loss = loss / T::from_usize(n).unwrap();
        self.record(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    /// Sum over every position with both a right and a lower neighbour of
    /// `sqrt(dx² + dy² + eps)`, per channel and sample.
    pub fn total_variation(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        let (_, _, h, w) = self.value(x).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::shape(format!("total variation needs extents >= 2, got {h}x{w}")));
        }
        let e = T::from_f64_lossy(eps);
        let mut total = T::zero();
        for plane in self.value(x).data().chunks(h * w) {
            for i in 0..h - 1 {
                for j in 0..w - 1 {
                    let c = plane[i * w + j];
                    let dh = plane[i * w + j + 1] - c;
                    let dv = plane[(i + 1) * w + j] - c;
                    total += (dh * dh + dv * dv + e).sqrt();
                }
            }
        }
        self.record("total_variation", Tensor::scalar(total), Op::TotalVariation { x, eps: e }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.index).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !(node.tracked && matches!(node.op, Op::Leaf)) {
                *g = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.index].tracked {
            return;
        }
        let slot = &mut grads[v.index];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.index].value.shape()));
        f(t.data_mut());
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, reflect, in_h, in_w, cols } => {
                let (n, c, oc, k) = (geom.batch, geom.in_c, geom.out_c, geom.kernel);
                let ckk = c * k * k;
                let l = geom.grid_h * geom.grid_w;
                if let Some(bv) = b {
                    self.acc(grads, *bv, |db| sum_planes(gd, oc, l, db));
                }
                if self.nodes[w.index].tracked {
                    self.acc(grads, *w, |dw| {
                        for bi in 0..n {
                            T::gemm(oc, l, ckk, &gd[bi * oc * l..(bi + 1) * oc * l], false, &cols[bi * ckk * l..(bi + 1) * ckk * l], true, dw, true);
                        }
                    });
                }
                if self.nodes[x.index].tracked {
                    let wt = self.nodes[w.index].value.data();
                    let mut dcols = vec![T::zero(); ckk * l];
                    let img = geom.img_h * geom.img_w;
                    let mut dimg = vec![T::zero(); c * img];
                    let (h, wd) = (*in_h, *in_w);
                    self.acc(grads, *x, |dx| {
                        for bi in 0..n {
                            T::gemm(ckk, oc, l, wt, true, &gd[bi * oc * l..(bi + 1) * oc * l], false, &mut dcols, false);
                            let dxb = &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd];
                            if *reflect > 0 {
                                dimg.iter_mut().for_each(|v| *v = T::zero());
                                col2im(&dcols, c, geom, &mut dimg);
                                reflect_unpad_add(&dimg, c, h, wd, *reflect, dxb);
                            } else {
                                col2im(&dcols, c, geom, dxb);
                            }
                        }
                    });
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (n, c, oc, k) = (geom.batch, geom.in_c, geom.out_c, geom.kernel);
                let okk = oc * k * k;
                let l = geom.grid_h * geom.grid_w;
                let img = geom.img_h * geom.img_w;
                if let Some(bv) = b {
                    self.acc(grads, *bv, |db| sum_planes(gd, oc, img, db));
                }
                let need_w = self.nodes[w.index].tracked;
                let need_x = self.nodes[x.index].tracked;
                if !(need_w || need_x) {
                    return;
                }
                let mut dcols_all = vec![T::zero(); n * okk * l];
                for bi in 0..n {
                    im2col(&gd[bi * oc * img..(bi + 1) * oc * img], oc, geom, &mut dcols_all[bi * okk * l..(bi + 1) * okk * l]);
                }
                if need_x {
                    let wt = self.nodes[w.index].value.data();
                    self.acc(grads, *x, |dx| {
                        for bi in 0..n {
                            T::gemm(c, okk, l, wt, false, &dcols_all[bi * okk * l..(bi + 1) * okk * l], false, &mut dx[bi * c * l..(bi + 1) * c * l], true);
                        }
                    });
                }
                if need_w {
                    let xv = self.nodes[x.index].value.data();
                    self.acc(grads, *w, |dw| {
                        for bi in 0..n {
                            T::gemm(c, l, okk, &xv[bi * c * l..(bi + 1) * c * l], false, &dcols_all[bi * okk * l..(bi + 1) * okk * l], true, dw, true);
                        }
                    });
                }
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let c = self.nodes[gamma.index].value.len();
                let plane = gd.len() / inv_std.len();
                let gm = self.nodes[gamma.index].value.data();
                self.acc(grads, *beta, |db| sum_planes(gd, c, plane, db));
                self.acc(grads, *gamma, |dg| {
                    for (idx, (gc, xc)) in gd.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                        dg[idx % c] += gc.iter().zip(xc).fold(T::zero(), |a, (&u, &v)| a + u * v);
                    }
                });
                let inv_plane = T::one() / T::from_usize(plane).unwrap();
                self.acc(grads, *x, |dx| {
                    for idx in 0..inv_std.len() {
                        let gamma_c = gm[idx % c];
                        let gc = &gd[idx * plane..(idx + 1) * plane];
                        let xc = &xhat[idx * plane..(idx + 1) * plane];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..plane {
                            let d = gc[j] * gamma_c;
                            s1 += d;
                            s2 += d * xc[j];
                        }
                        let (m1, m2) = (s1 * inv_plane, s2 * inv_plane);
                        let dxc = &mut dx[idx * plane..(idx + 1) * plane];
                        for j in 0..plane {
                            dxc[j] += inv_std[idx] * (gc[j] * gamma_c - m1 - xc[j] * m2);
                        }
                    }
                });
            }
            Op::Act { x, kind } => {
                let xv = self.nodes[x.index].value.data();
                let yv = node.value.data();
                self.acc(grads, *x, |dx| match *kind {
                    Activation::Relu => {
                        for i in 0..dx.len() {
                            if xv[i] > T::zero() {
                                dx[i] += gd[i];
                            }
                        }
                    }
                    Activation::LeakyRelu(slope) => {
                        let s = T::from_f64_lossy(slope);
                        for i in 0..dx.len() {
                            dx[i] += if xv[i] > T::zero() { gd[i] } else { gd[i] * s };
                        }
                    }
                    Activation::Tanh => {
                        for i in 0..dx.len() {
                            dx[i] += gd[i] * (T::one() - yv[i] * yv[i]);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g));
                self.acc(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g));
                self.acc(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.index].value.data();
                let bv = self.nodes[b.index].value.data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale(a, f) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * *f));
            }
            Op::AddScalar(a) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g));
            }
            Op::Square(a) => {
                let av = self.nodes[a.index].value.data();
                let two = T::from_f64_lossy(2.0);
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * two * av[i];
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.nodes[a.index].value.data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        if av[i] > T::zero() {
                            d[i] += gd[i];
                        } else if av[i] < T::zero() {
                            d[i] -= gd[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.index].value.len();
                let g0 = gd[0] / T::from_usize(n).unwrap();
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::SpatialMean(a) => {
                let n = self.nodes[a.index].value.len();
                let plane = n / gd.len();
                let inv = T::one() / T::from_usize(plane).unwrap();
                self.acc(grads, *a, |d| {
                    for (i, chunk) in d.chunks_mut(plane).enumerate() {
                        let v = gd[i] * inv;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                });
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let n = targets.len();
                let k = probs.len() / n;
                let scale = gd[0] / T::from_usize(n).unwrap();
                self.acc(grads, *logits, |d| {
                    for i in 0..n {
                        for j in 0..k {
                            let ind = if j == targets[i] { T::one() } else { T::zero() };
                            d[i * k + j] += scale * (probs[i * k + j] - ind);
                        }
                    }
                });
            }
            Op::TotalVariation { x, eps } => {
                let (_, _, h, w) = self.nodes[x.index].value.dims4().expect("rank 4");
                let xv = self.nodes[x.index].value.data();
                let g0 = gd[0];
                self.acc(grads, *x, |d| {
                    for (plane, dplane) in xv.chunks(h * w).zip(d.chunks_mut(h * w)) {
                        for i in 0..h - 1 {
                            for j in 0..w - 1 {
                                let c = plane[i * w + j];
                                let dh = plane[i * w + j + 1] - c;
                                let dv = plane[(i + 1) * w + j] - c;
                                let s = (dh * dh + dv * dv + *eps).sqrt();
                                let (gh, gv) = (g0 * dh / s, g0 * dv / s);
                                dplane[i * w + j + 1] += gh;
                                dplane[(i + 1) * w + j] += gv;
                                dplane[i * w + j] -= gh + gv;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Relative error with a unit floor on the scale, so elements whose gradient
/// is tiny are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compare given gradients of `f` at `inputs` against central differences.
pub fn compare_gradients<F>(f: &F, inputs: &[Tensor<f64>], analytic: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, tol };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        inputs[i].check_same_shape(grad)?;
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Check the tape gradient of scalar `f` with respect to every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    compare_gradients(&f, inputs, &analytic, GRAD_CHECK_STEP, tol)
}

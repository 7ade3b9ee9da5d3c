//! Scalar training objectives, all built on the tape so they differentiate.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Epsilon inside the total-variation square root.
pub const TV_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_tv: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cls: 1.0, lambda_tv: 1e-6, lambda_r: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cls", self.lambda_cls), ("lambda_tv", self.lambda_tv), ("lambda_r", self.lambda_r)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Discriminator side of the least-squares game:
/// `mean((D(y) − 1)²) + mean(D(G(x))²)`.
pub fn lsgan_d_loss<T: Scalar>(tape: &mut Tape<T>, scores_real: Var, scores_fake: Var) -> Result<Var> {
    let r = tape.add_scalar(scores_real, -1.0)?;
    let r = tape.square(r)?;
    let r = tape.mean(r)?;
    let f = tape.square(scores_fake)?;
    let f = tape.mean(f)?;
    tape.add(r, f)
}

/// Generator side: `mean((D(G(x)) − 1)²)`.
pub fn lsgan_g_loss<T: Scalar>(tape: &mut Tape<T>, scores_fake: Var) -> Result<Var> {
    let d = tape.add_scalar(scores_fake, -1.0)?;
    let d = tape.square(d)?;
    tape.mean(d)
}

/// Mean absolute error between an image and its reconstruction.
pub fn reconstruction_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    let d = tape.sub(x_hat, x)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Cross-entropy of the pooled classifier logits of real style images
/// against their collection index.
pub fn classifier_loss_real<T: Scalar>(tape: &mut Tape<T>, logits: Var, style: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, style)
}

/// Same cross-entropy on generated images; bind the classifier as constants
/// so only the generator receives gradient.
pub fn classifier_loss_generated<T: Scalar>(tape: &mut Tape<T>, logits: Var, style: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, style)
}

pub fn tv_loss<T: Scalar>(tape: &mut Tape<T>, img: Var) -> Result<Var> {
    tape.total_variation(img, TV_EPS)
}

/// `adv + λ_cls·cls + λ_tv·tv`. The reconstruction term is optimised in its
/// own step and is not part of this sum.
pub fn generator_objective<T: Scalar>(tape: &mut Tape<T>, adv: Var, cls: Var, tv: Var, w: &LossWeights) -> Result<Var> {
    let c = tape.scale(cls, w.lambda_cls)?;
    let t = tape.scale(tv, w.lambda_tv)?;
    let s = tape.add(adv, c)?;
    tape.add(s, t)
}

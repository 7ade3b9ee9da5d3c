use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Padding, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the embedding.
pub const EMBED_DIM: usize = 256;

const WIDTHS: [usize; 4] = [3, 64, 128, EMBED_DIM];

/// Fixed random convolutional feature extractor: three stride-2 3×3
/// convolutions with ReLU, then global average pooling.
#[derive(Clone, Debug)]
pub struct Embedder {
    seed: u64,
    kernels: Vec<Tensor<f32>>,
}

impl Embedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = WIDTHS
            .windows(2)
            .map(|w| {
                let fan_in = w[0] * 9;
                let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
                Tensor::from_fn(&[w[1], w[0], 3, 3], |_| normal.sample(&mut rng) as f32)
            })
            .collect();
        Embedder { seed, kernels }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One 256-vector per image of an `N×3×H×W` batch (H, W ≥ 8).
    pub fn embed(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let (n, c, h, w) = images.dims4()?;
        if c != 3 || h < 8 || w < 8 {
            return Err(Error::shape(format!("embedding expects N×3×H×W with H, W ≥ 8, got {:?}", images.shape())));
        }
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(32) {
            let chunk = Tensor::stack(&(start..n.min(start + 32)).map(|i| images.batch_item(i)).collect::<Result<Vec<_>>>()?)?;
            let mut tape = Tape::<f32>::new();
            let mut x = tape.constant(chunk);
            for k in &self.kernels {
                let kv = tape.constant(k.clone());
                x = tape.conv2d(x, kv, None, 2, Padding::Zero(1))?;
                x = tape.relu(x)?;
            }
            let pooled = tape.spatial_mean(x)?;
            out.extend(tape.value(pooled).data().chunks(EMBED_DIM).map(|r| r.iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }

    pub fn embed_all(&self, images: &[Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for img in images {
            out.extend(self.embed(img)?);
        }
        Ok(out)
    }
}

/// Embed a batch with the extractor of `seed`.
pub fn embed(images: &Tensor<f32>, seed: u64) -> Result<Vec<Vec<f64>>> {
    Embedder::new(seed).embed(images)
}

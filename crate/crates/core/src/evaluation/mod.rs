//! Fréchet distance on random-feature embeddings, style interpolation, and
//! the held-out probe classifier.

mod embed;
mod linalg;
mod probe;
mod stats;

pub use embed::{embed, Embedder, EMBED_DIM};
pub use linalg::{matrix_sqrt_psd, symmetric_eigen, trace_sqrt_psd, Matrix};
pub use probe::{probe_accuracy, train_probe, ProbeConfig};
pub use stats::{fid, GaussianStats, FID_CLAMP};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{GeneratorParams, StyleWeights};
use crate::tensor::Tensor;

/// Frames for `α = 0, 1/(steps−1), …, 1` where `α` weights `c1` and
/// `1 − α` weights `c2`.
pub fn render_interpolation(
    x: &Tensor<f32>,
    p: &GeneratorParams,
    c1: usize,
    c2: usize,
    steps: usize,
) -> Result<Vec<Tensor<f32>>> {
    let k = p.styles();
    if c1 >= k || c2 >= k {
        return Err(Error::Index(format!("styles {c1} and {c2} of {k}")));
    }
    if c1 == c2 {
        return Err(Error::Invalid("interpolation needs two different styles".into()));
    }
    if steps < 2 {
        return Err(Error::Invalid(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let features = p.encoder_forward(x)?;
    (0..steps)
        .map(|i| {
            let alpha = i as f64 / (steps - 1) as f64;
            let w = StyleWeights::blend(k, c1, c2, alpha)?;
            p.decoder_forward(&p.gated_transform(&features, &w)?)
        })
        .collect()
}

/// One line of a score report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub style: usize,
    pub n_real: usize,
    pub n_gen: usize,
    pub extractor_seed: u64,
    pub fid: f64,
}

impl ScoreRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn stats_of(embedder: &Embedder, images: &[Tensor<f32>]) -> Result<GaussianStats> {
    GaussianStats::from_features(EMBED_DIM, &embedder.embed_all(images)?)
}

/// Stylize every input with style `c` and compare against the real
/// collection.
pub fn evaluate_collection(
    generator: &GeneratorParams,
    inputs: &[Tensor<f32>],
    c: usize,
    real: &[Tensor<f32>],
    extractor_seed: u64,
) -> Result<ScoreRecord> {
    if inputs.is_empty() || real.is_empty() {
        return Err(Error::Dataset("FID needs non-empty generated and real sets".into()));
    }
    let w = StyleWeights::one_hot(generator.styles(), c)?;
    let generated = inputs.iter().map(|x| generator.stylize_native(x, &w)).collect::<Result<Vec<_>>>()?;
    let embedder = Embedder::new(extractor_seed);
    let score = fid(&stats_of(&embedder, real)?, &stats_of(&embedder, &generated)?)?;
    Ok(ScoreRecord { style: c, n_real: real.len(), n_gen: generated.len(), extractor_seed, fid: score })
}

/// Mean L1 distance over all pairs of samples.
pub fn pairwise_l1_diversity(samples: &[Tensor<f32>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Invalid("diversity needs at least two samples".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            total += samples[i].mean_abs_diff(&samples[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::{DiscriminatorConfig, DiscriminatorParams};
use crate::tensor::Tensor;
use crate::training::{augment_with, draw_plan, AdamState};

/// Settings of the held-out style classifier used to score generated samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub image_size: usize,
    pub scale_size: usize,
    pub width_scale: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 600,
            batch_size: 4,
            learning_rate: 2e-4,
            image_size: 32,
            scale_size: 36,
            width_scale: 0.25,
            seed: 0x5eed,
        }
    }
}

/// Train a classifier with the discriminator's trunk and class head on
/// augmented crops of real collections.
pub fn train_probe(collections: &[Vec<Tensor<f32>>], cfg: &ProbeConfig) -> Result<DiscriminatorParams> {
    if collections.is_empty() || collections.iter().any(|c| c.is_empty()) {
        return Err(Error::Dataset("probe training needs non-empty collections".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dcfg = DiscriminatorConfig { styles: collections.len(), width_scale: cfg.width_scale };
    let mut probe = DiscriminatorParams::new(dcfg, &mut rng)?;
    let mut opt = AdamState::default();
    for _ in 0..cfg.iterations {
        let mut imgs = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let c = rng.gen_range(0..collections.len());
            let src = &collections[c][rng.gen_range(0..collections[c].len())];
            let plan = draw_plan(cfg.scale_size, cfg.image_size, &mut rng);
            imgs.push(augment_with(src, cfg.image_size, cfg.scale_size, plan)?);
            labels.push(c);
        }
        let mut tape = Tape::<f32>::new();
        let p = probe.bind(&mut tape, true);
        let x = tape.constant(Tensor::stack(&imgs)?);
        let feat = probe.trunk_forward(&mut tape, &p, x)?;
        let logits = probe.pooled_logits(&mut tape, &p, feat)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        let mut g = tape.backward(loss)?;
        let grads: Vec<_> = probe.store().ids().filter_map(|id| g.take(p.var(id)).map(|t| (id, t))).collect();
        opt.step(probe.store_mut(), &grads, cfg.learning_rate)?;
    }
    Ok(probe)
}

/// Fraction of the `N×3×H×W` batch the probe assigns to `label`.
pub fn probe_accuracy(probe: &DiscriminatorParams, images: &Tensor<f32>, label: usize) -> Result<f64> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut hits = 0usize;
    for start in (0..n).step_by(32) {
        let chunk = Tensor::stack(&(start..n.min(start + 32)).map(|i| images.batch_item(i)).collect::<Result<Vec<_>>>()?)?;
        hits += probe.predict(&chunk)?.iter().filter(|&&p| p == label).count();
    }
    Ok(hits as f64 / n.max(1) as f64)
}

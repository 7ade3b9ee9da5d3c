use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::augment::augment;
use super::{AdamState, Mode, ReconSource, ReplayBuffer, TrainConfig, BUFFER_CAPACITY};
use crate::autodiff::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::losses;
use crate::models::{Bound, DiscriminatorParams, GeneratorParams, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_BUFFER: u64 = 2;
const STREAM_EXTEND: u64 = 3;

/// Independent ChaCha stream `stream` of the run seed.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// In-memory training images, each `1×3×H×W` in [−1, 1].
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub content: Vec<Tensor<f32>>,
    pub styles: Vec<Vec<Tensor<f32>>>,
}

impl TrainingData {
    pub fn validate(&self, cfg: &TrainConfig, styles: usize) -> Result<()> {
        if self.styles.len() != styles {
            return Err(Error::Dataset(format!("{} style collections for {styles} styles", self.styles.len())));
        }
        if let Some(c) = self.styles.iter().position(|s| s.is_empty()) {
            return Err(Error::Dataset(format!("style collection {c} is empty")));
        }
        let needs_content = cfg.mode == Mode::StyleTransfer || matches!(cfg.recon_source, ReconSource::Content | ReconSource::Mixed);
        if needs_content && self.content.is_empty() {
            return Err(Error::Dataset("content set is empty".into()));
        }
        for img in self.content.iter().chain(self.styles.iter().flatten()) {
            match img.shape() {
                [1, 3, h, w] if *h > 0 && *w > 0 => {}
                s => return Err(Error::Dataset(format!("training image of shape {s:?}, expected 1×3×H×W"))),
            }
        }
        Ok(())
    }
}

/// Inputs `x`, real style samples `y`, and their shared style index.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    pub style: usize,
    /// Content crops for the auto-encoder step in texture mode with
    /// `recon_source = content`.
    pub recon: Option<Tensor<f32>>,
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_cls: f64,
    pub tv: f64,
    pub recon: f64,
    pub wall_ms: u64,
}

/// Standard-normal generator input shaped like a training batch.
pub fn sample_noise<R: Rng>(cfg: &TrainConfig, rng: &mut R) -> Result<Tensor<f32>> {
    if cfg.mode != Mode::TextureSynthesis {
        return Err(Error::Config(format!("noise inputs need texture_synthesis mode, not {}", cfg.mode)));
    }
    let s = cfg.image_size;
    Ok(Tensor::from_fn(&[cfg.batch_size, 3, s, s], |_| rng.sample::<f32, _>(StandardNormal)))
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub opt_d: AdamState,
    pub opt_g: AdamState,
    pub opt_ae: AdamState,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha8Rng,
    /// Completed iterations.
    pub iteration: u64,
    /// Set while extending a trained model: the branch being trained.
    pub new_style: Option<usize>,
}

fn gradients_of(store: &ParamStore, bound: &Bound, grads: &mut Gradients<f32>) -> Vec<(ParamId, Tensor<f32>)> {
    store.ids().filter_map(|id| grads.take(bound.var(id)).map(|g| (id, g))).collect()
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = seeded_stream(config.seed, STREAM_INIT);
        let generator = GeneratorParams::new(config.generator_config(), &mut init)?;
        let discriminator = DiscriminatorParams::new(config.discriminator_config(), &mut init)?;
        Ok(TrainState {
            buffer: ReplayBuffer::new(BUFFER_CAPACITY, seeded_stream(config.seed, STREAM_BUFFER)),
            rng: seeded_stream(config.seed, STREAM_TRAIN),
            config,
            generator,
            discriminator,
            opt_d: AdamState::default(),
            opt_g: AdamState::default(),
            opt_ae: AdamState::default(),
            iteration: 0,
            new_style: None,
        })
    }

    pub fn styles(&self) -> usize {
        self.generator.styles()
    }

    fn wrap<T>(&self, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::NonFinite(m) => Error::Training { iteration: self.iteration, reason: format!("non-finite value: {m}") },
            e => e,
        })
    }

    fn check_loss(&self, name: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Training { iteration: self.iteration, reason: format!("{name} loss is {v}") })
        }
    }

    /// Draw the next batch for style `style` from the training stream.
    pub fn sample_batch_for(&mut self, data: &TrainingData, style: usize) -> Result<Batch> {
        let cfg = self.config.clone();
        let collection = data.styles.get(style).ok_or_else(|| Error::Index(format!("style {style} of {}", data.styles.len())))?;
        let mut xs = Vec::with_capacity(cfg.batch_size);
        let mut ys = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cfg.mode == Mode::StyleTransfer {
                let i = self.rng.gen_range(0..data.content.len());
                xs.push(augment(&data.content[i], &cfg, &mut self.rng)?);
            }
            let j = self.rng.gen_range(0..collection.len());
            ys.push(augment(&collection[j], &cfg, &mut self.rng)?);
        }
        let x = match cfg.mode {
            Mode::StyleTransfer => Tensor::stack(&xs)?,
            Mode::TextureSynthesis => sample_noise(&cfg, &mut self.rng)?,
        };
        let recon = if cfg.mode == Mode::TextureSynthesis && matches!(cfg.recon_source, ReconSource::Content | ReconSource::Mixed) {
            let mut crops = if cfg.recon_source == ReconSource::Mixed { ys.clone() } else { Vec::new() };
            let content = (0..cfg.batch_size)
                .map(|_| {
                    let i = self.rng.gen_range(0..data.content.len());
                    augment(&data.content[i], &cfg, &mut self.rng)
                })
                .collect::<Result<Vec<_>>>()?;
            crops.extend(content);
            Some(Tensor::stack(&crops)?)
        } else {
            None
        };
        Ok(Batch { x, y: Tensor::stack(&ys)?, style, recon })
    }

    /// Uniform style index, then a batch of it.
    pub fn sample_batch(&mut self, data: &TrainingData) -> Result<Batch> {
        let style = self.rng.gen_range(0..self.styles());
        self.sample_batch_for(data, style)
    }

    /// Discriminator and classifier update against buffered fakes. The
    /// generator only runs forward here.
    pub fn discriminator_phase(&mut self, batch: &Batch) -> Result<f64> {
        let n = batch.x.shape()[0];
        let fresh = self.wrap(self.generator.generate(&batch.x, batch.style))?;
        let mut fakes = Vec::with_capacity(n);
        for i in 0..n {
            fakes.push(self.buffer.query(fresh.batch_item(i)?, batch.style).0);
        }
        let fake = Tensor::stack(&fakes)?;

        let mut tape = Tape::<f32>::new();
        let p = self.discriminator.bind(&mut tape, true);
        let (loss, mut grads) = self.wrap((|| {
            let y = tape.constant(batch.y.clone());
            let f = tape.constant(fake);
            let feat_real = self.discriminator.trunk_forward(&mut tape, &p, y)?;
            let feat_fake = self.discriminator.trunk_forward(&mut tape, &p, f)?;
            let s_real = self.discriminator.adv_forward(&mut tape, &p, feat_real)?;
            let s_fake = self.discriminator.adv_forward(&mut tape, &p, feat_fake)?;
            let adv = losses::lsgan_d_loss(&mut tape, s_real, s_fake)?;
            let logits = self.discriminator.pooled_logits(&mut tape, &p, feat_real)?;
            let cls = losses::classifier_loss_real(&mut tape, logits, &vec![batch.style; n])?;
            let cls = tape.scale(cls, self.config.weights.lambda_cls)?;
            let total = tape.add(adv, cls)?;
            let grads = tape.backward(total)?;
            Ok((tape.value(total).item() as f64, grads))
        })())?;
        let loss = self.check_loss("discriminator", loss)?;
        let grads = gradients_of(self.discriminator.store(), &p, &mut grads);
        self.opt_d.step(self.discriminator.store_mut(), &grads, self.config.learning_rate)?;
        Ok(loss)
    }

    /// Generator update through a frozen discriminator. Returns
    /// `(adversarial, classification, total variation)`.
    pub fn generator_phase(&mut self, batch: &Batch, trainable: impl Fn(ParamGroup) -> bool) -> Result<(f64, f64, f64)> {
        let n = batch.x.shape()[0];
        let mut tape = Tape::<f32>::new();
        let pg = self.generator.bind(&mut tape, trainable);
        let pd = self.discriminator.bind(&mut tape, false);
        let (parts, mut grads) = self.wrap((|| {
            let x = tape.constant(batch.x.clone());
            let out = self.generator.forward(&mut tape, &pg, x, batch.style)?;
            let feat = self.discriminator.trunk_forward(&mut tape, &pd, out)?;
            let scores = self.discriminator.adv_forward(&mut tape, &pd, feat)?;
            let adv = losses::lsgan_g_loss(&mut tape, scores)?;
            let logits = self.discriminator.pooled_logits(&mut tape, &pd, feat)?;
            let cls = losses::classifier_loss_generated(&mut tape, logits, &vec![batch.style; n])?;
            let tv = losses::tv_loss(&mut tape, out)?;
            let total = losses::generator_objective(&mut tape, adv, cls, tv, &self.config.weights)?;
            let grads = tape.backward(total)?;
            let v = |var| tape.value(var).item() as f64;
            Ok(((v(adv), v(cls), v(tv), v(total)), grads))
        })())?;
        self.check_loss("generator", parts.3)?;
        let grads = gradients_of(self.generator.store(), &pg, &mut grads);
        self.opt_g.step(self.generator.store_mut(), &grads, self.config.learning_rate)?;
        Ok((parts.0, parts.1, parts.2))
    }

    /// `λ_r · |x − Dec(Enc(x))|` on encoder and decoder only. Returns the
    /// unweighted reconstruction error.
    pub fn autoencoder_phase(&mut self, x: &Tensor<f32>) -> Result<f64> {
        let mut tape = Tape::<f32>::new();
        let p = self.generator.bind(&mut tape, |g| matches!(g, ParamGroup::Encoder | ParamGroup::Decoder));
        let (recon, mut grads) = self.wrap((|| {
            let xv = tape.constant(x.clone());
            let xh = self.generator.reconstruct_on(&mut tape, &p, xv)?;
            let recon = losses::reconstruction_loss(&mut tape, xv, xh)?;
            let weighted = tape.scale(recon, self.config.weights.lambda_r)?;
            let grads = tape.backward(weighted)?;
            Ok((tape.value(recon).item() as f64, grads))
        })())?;
        let recon = self.check_loss("reconstruction", recon)?;
        let grads = gradients_of(self.generator.store(), &p, &mut grads);
        self.opt_ae.step(self.generator.store_mut(), &grads, self.config.learning_rate)?;
        Ok(recon)
    }

    /// Reconstruction error without updating anything.
    pub fn reconstruction_error(&self, x: &Tensor<f32>) -> Result<f64> {
        self.generator.reconstruct(x)?.mean_abs_diff(x)
    }

    /// Content in style transfer; in texture mode whatever `recon_source`
    /// names.
    pub fn autoencoder_input<'b>(&self, batch: &'b Batch) -> &'b Tensor<f32> {
        match (self.config.mode, self.config.recon_source) {
            (Mode::TextureSynthesis, ReconSource::Real) => &batch.y,
            (Mode::TextureSynthesis, ReconSource::Content | ReconSource::Mixed) => batch.recon.as_ref().unwrap_or(&batch.x),
            _ => &batch.x,
        }
    }

    /// One outer iteration of alternating updates on a given batch:
    /// `k_d` discriminator steps, `k_g` generator steps, one auto-encoder
    /// step (skipped when `λ_r = 0`).
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        if batch.style >= self.styles() {
            return Err(Error::Index(format!("style {} of {}", batch.style, self.styles())));
        }
        let mut d_loss = 0.0;
        for _ in 0..self.config.k_d {
            d_loss = self.discriminator_phase(batch)?;
        }
        let mut g = (0.0, 0.0, 0.0);
        for _ in 0..self.config.k_g {
            g = self.generator_phase(batch, |_| true)?;
        }
        let ae_input = self.autoencoder_input(batch);
        let recon = if self.config.weights.lambda_r > 0.0 {
            self.autoencoder_phase(ae_input)?
        } else {
            self.reconstruction_error(ae_input)?
        };
        Ok(LossRecord { iteration: self.iteration, d_loss, g_adv: g.0, g_cls: g.1, tv: g.2, recon, wall_ms: 0 })
    }

    /// Incremental iteration: the discriminator sees every style, the
    /// generator trains only the new branch. No auto-encoder step.
    fn extension_step(&mut self, data: &TrainingData, new_style: usize) -> Result<LossRecord> {
        let d_batch = self.sample_batch(data)?;
        let mut d_loss = 0.0;
        for _ in 0..self.config.k_d {
            d_loss = self.discriminator_phase(&d_batch)?;
        }
        let g_batch = Batch { style: new_style, ..self.sample_batch_for(data, new_style)? };
        let mut g = (0.0, 0.0, 0.0);
        for _ in 0..self.config.k_g {
            g = self.generator_phase(&g_batch, |grp| grp == ParamGroup::Branch(new_style))?;
        }
        let recon = self.reconstruction_error(self.autoencoder_input(&g_batch))?;
        Ok(LossRecord { iteration: self.iteration, d_loss, g_adv: g.0, g_cls: g.1, tv: g.2, recon, wall_ms: 0 })
    }

    /// Sample and train one iteration; advances `iteration`.
    pub fn step(&mut self, data: &TrainingData) -> Result<LossRecord> {
        let start = Instant::now();
        let mut record = match self.new_style {
            Some(c) => self.extension_step(data, c)?,
            None => {
                let batch = self.sample_batch(data)?;
                self.train_step(&batch)?
            }
        };
        if self.config.log_wall_time {
            record.wall_ms = start.elapsed().as_millis() as u64;
        }
        self.iteration += 1;
        Ok(record)
    }

    /// Train until `iteration == until`. `observe` sees the state after every
    /// iteration and the record on logging iterations.
    pub fn run(
        &mut self,
        data: &TrainingData,
        until: u64,
        mut observe: impl FnMut(&TrainState, Option<&LossRecord>) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        data.validate(&self.config, self.styles())?;
        let mut log = Vec::new();
        while self.iteration < until {
            let logged = self.iteration % self.config.log_interval == 0;
            let record = self.step(data)?;
            if logged {
                observe(self, Some(&record))?;
                log.push(record);
            } else {
                observe(self, None)?;
            }
        }
        Ok(log)
    }

    /// Append a fresh generator branch and classifier row, and switch to
    /// training only them. Optimizer states restart since the
    /// discriminator head changed shape.
    pub fn begin_extension(&mut self) -> Result<usize> {
        if self.new_style.is_some() {
            return Err(Error::Invalid("an extension is already in progress".into()));
        }
        let mut rng = seeded_stream(self.config.seed, STREAM_EXTEND);
        rng.set_word_pos(self.styles() as u128 * (1 << 20));
        let c = self.generator.add_branch(&mut rng);
        let c2 = self.discriminator.add_class(&mut rng)?;
        debug_assert_eq!(c, c2);
        self.config.style_count = self.generator.styles();
        self.opt_d = AdamState::default();
        self.opt_g = AdamState::default();
        self.opt_ae = AdamState::default();
        self.iteration = 0;
        self.new_style = Some(c);
        Ok(c)
    }
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub log: Vec<LossRecord>,
}

/// Train from scratch for `cfg.iterations`.
pub fn train(cfg: &TrainConfig, data: &TrainingData) -> Result<TrainOutcome> {
    let mut state = TrainState::new(cfg.clone())?;
    let log = state.run(data, cfg.iterations, |_, _| Ok(()))?;
    Ok(TrainOutcome { generator: state.generator, discriminator: state.discriminator, log })
}

/// Extend a trained state by one style and train the new branch for
/// `iterations`. `data` holds all collections, the new one last.
pub fn incremental_add_style(state: &mut TrainState, data: &TrainingData, iterations: u64) -> Result<Vec<LossRecord>> {
    if data.styles.len() != state.styles() + 1 {
        return Err(Error::Dataset(format!(
            "extension of a {}-style model needs {} collections, got {}",
            state.styles(),
            state.styles() + 1,
            data.styles.len()
        )));
    }
    if data.styles.last().is_none_or(|s| s.is_empty()) {
        return Err(Error::Dataset("new style collection is empty".into()));
    }
    state.begin_extension()?;
    state.run(data, iterations, |_, _| Ok(()))
}

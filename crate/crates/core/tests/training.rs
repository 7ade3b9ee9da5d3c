use gated_gan::autodiff::Tape;
use gated_gan::losses;
use gated_gan::models::ParamGroup;
use gated_gan::synthetic::{collection, content_set, Pattern};
use gated_gan::training::{
    augment, augment_with, incremental_add_style, resize_bilinear, sample_noise, train, Batch, CropPlan, Mode, ReconSource,
    ReplayBuffer,
    TrainConfig, TrainState, TrainingData,
};
use gated_gan::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(mode: Mode) -> TrainConfig {
    TrainConfig {
        image_size: 16,
        width_scale: 0.125,
        style_count: 2,
        iterations: 12,
        log_interval: 4,
        mode,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn data(styles: usize, size: usize) -> TrainingData {
    let patterns = [Pattern::Checkerboard, Pattern::DiagonalStripes, Pattern::Dots, Pattern::Waves];
    TrainingData {
        content: content_set(4, size, 1),
        styles: (0..styles).map(|i| collection(patterns[i], 3, size, 10 + i as u64)).collect(),
    }
}

fn fingerprints(s: &TrainState) -> (u64, u64, u64, u64, u64) {
    let g = &s.generator;
    (
        g.fingerprint_where(|p| p == ParamGroup::Encoder),
        g.fingerprint_where(|p| matches!(p, ParamGroup::Branch(_))),
        g.fingerprint_where(|p| p == ParamGroup::Decoder),
        s.discriminator.store().fingerprint(),
        g.store().fingerprint(),
    )
}

#[test]
fn one_iteration_steps_each_optimizer_once() {
    let d = data(2, 20);
    let mut s = TrainState::new(small(Mode::StyleTransfer)).unwrap();
    s.step(&d).unwrap();
    assert_eq!((s.opt_d.steps, s.opt_g.steps, s.opt_ae.steps), (1, 1, 1));
    assert_eq!(s.iteration, 1);

    let mut cfg = small(Mode::StyleTransfer);
    cfg.k_d = 2;
    cfg.k_g = 3;
    let mut s = TrainState::new(cfg).unwrap();
    s.step(&d).unwrap();
    assert_eq!((s.opt_d.steps, s.opt_g.steps, s.opt_ae.steps), (2, 3, 1));

    let mut cfg = small(Mode::StyleTransfer);
    cfg.weights.lambda_r = 0.0;
    let mut s = TrainState::new(cfg).unwrap();
    let before = s.generator.clone();
    let batch = s.sample_batch(&d).unwrap();
    let rec = s.train_step(&batch).unwrap();
    assert_eq!(s.opt_ae.steps, 0);
    assert!(rec.recon > 0.0);
    assert_ne!(before.store().fingerprint(), s.generator.store().fingerprint());
}

#[test]
fn each_phase_touches_only_its_parameters() {
    let d = data(2, 20);
    let mut s = TrainState::new(small(Mode::StyleTransfer)).unwrap();
    for _ in 0..3 {
        let batch = s.sample_batch(&d).unwrap();
        let other = 1 - batch.style;
        let branch_other = |s: &TrainState| s.generator.fingerprint_where(|p| p == ParamGroup::Branch(other));

        let (e, b, dec, disc, gen) = fingerprints(&s);
        s.discriminator_phase(&batch).unwrap();
        let after = fingerprints(&s);
        assert_eq!(after.4, gen, "discriminator phase changed the generator");
        assert_ne!(after.3, disc);

        let bo = branch_other(&s);
        s.generator_phase(&batch, |_| true).unwrap();
        let after = fingerprints(&s);
        assert_ne!(after.0, e);
        assert_ne!(after.1, b);
        assert_ne!(after.2, dec);
        assert_eq!(branch_other(&s), bo, "generator phase changed an unselected branch");
        let disc_now = after.3;
        assert_ne!(disc_now, disc);

        let (e, b, dec, disc, _) = fingerprints(&s);
        s.autoencoder_phase(&batch.x).unwrap();
        let after = fingerprints(&s);
        assert_eq!(after.1, b, "auto-encoder phase changed a branch");
        assert_eq!(after.3, disc, "auto-encoder phase changed the discriminator");
        assert_ne!(after.0, e);
        assert_ne!(after.2, dec);
    }
}

#[test]
fn generator_phase_leaves_the_discriminator_alone() {
    let d = data(2, 20);
    let mut s = TrainState::new(small(Mode::StyleTransfer)).unwrap();
    let batch = s.sample_batch(&d).unwrap();
    let disc = s.discriminator.store().fingerprint();
    s.generator_phase(&batch, |_| true).unwrap();
    assert_eq!(s.discriminator.store().fingerprint(), disc);
}

#[test]
fn buffered_images_carry_no_generator_gradient() {
    let s = TrainState::new(small(Mode::StyleTransfer)).unwrap();
    let x = content_set(1, 16, 2).remove(0);
    let mut buffer = ReplayBuffer::with_seed(0);
    let mut tape = Tape::<f32>::new();
    let pg = s.generator.bind(&mut tape, |_| true);
    let pd = s.discriminator.bind(&mut tape, true);
    let xv = tape.constant(x);
    let fresh = s.generator.forward(&mut tape, &pg, xv, 0).unwrap();
    let (stored, _) = buffer.query(tape.value(fresh).clone(), 0);
    let fake = tape.constant(stored);
    let feat = s.discriminator.trunk_forward(&mut tape, &pd, fake).unwrap();
    let scores = s.discriminator.adv_forward(&mut tape, &pd, feat).unwrap();
    let real = tape.constant(Tensor::zeros(tape.value(scores).shape()));
    let loss = losses::lsgan_d_loss(&mut tape, real, scores).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(s.generator.store().ids().all(|id| grads.get(pg.var(id)).is_none()));
    assert!(s.discriminator.store().ids().any(|id| grads.get(pd.var(id)).is_some()));
}

#[test]
fn zero_iterations_change_nothing() {
    let mut cfg = small(Mode::StyleTransfer);
    cfg.iterations = 0;
    let out = train(&cfg, &data(2, 20)).unwrap();
    let fresh = TrainState::new(cfg).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.generator.store().fingerprint(), fresh.generator.store().fingerprint());
    assert_eq!(out.discriminator.store().fingerprint(), fresh.discriminator.store().fingerprint());
}

#[test]
fn identical_configs_give_identical_traces() {
    let d = data(2, 20);
    for mode in [Mode::StyleTransfer, Mode::TextureSynthesis] {
        let a = train(&small(mode), &d).unwrap();
        let b = train(&small(mode), &d).unwrap();
        assert_eq!(serde_json::to_string(&a.log).unwrap(), serde_json::to_string(&b.log).unwrap());
        assert_eq!(a.generator.store().fingerprint(), b.generator.store().fingerprint());
        let mut other = small(mode);
        other.seed += 1;
        let c = train(&other, &d).unwrap();
        assert_ne!(a.generator.store().fingerprint(), c.generator.store().fingerprint());
    }
}

#[test]
fn log_length_is_ceiling_of_iterations_over_interval() {
    let d = data(2, 20);
    for (iterations, interval) in [(12, 4), (13, 4), (5, 1), (3, 10)] {
        let mut cfg = small(Mode::TextureSynthesis);
        cfg.iterations = iterations;
        cfg.log_interval = interval;
        let out = train(&cfg, &d).unwrap();
        assert_eq!(out.log.len() as u64, iterations.div_ceil(interval));
        assert!(out.log.iter().all(|r| r.iteration % interval == 0 && r.wall_ms == 0));
    }
}

#[test]
fn interrupted_runs_continue_exactly() {
    let d = data(2, 20);
    let cfg = small(Mode::StyleTransfer);
    let mut whole = TrainState::new(cfg.clone()).unwrap();
    let full_log = whole.run(&d, 12, |_, _| Ok(())).unwrap();
    let mut split = TrainState::new(cfg).unwrap();
    let mut log = split.run(&d, 5, |_, _| Ok(())).unwrap();
    let mut resumed = split.clone();
    log.extend(resumed.run(&d, 12, |_, _| Ok(())).unwrap());
    assert_eq!(resumed.generator.store().fingerprint(), whole.generator.store().fingerprint());
    assert_eq!(resumed.discriminator.store().fingerprint(), whole.discriminator.store().fingerprint());
    assert_eq!(serde_json::to_string(&log).unwrap(), serde_json::to_string(&full_log).unwrap());
}

#[test]
fn incremental_training_freezes_everything_but_the_new_branch() {
    let d2 = data(2, 20);
    let d3 = data(3, 20);
    let mut s = TrainState::new(small(Mode::TextureSynthesis)).unwrap();
    s.run(&d2, 6, |_, _| Ok(())).unwrap();
    let before = s.clone();
    let probe: Vec<Tensor<f32>> = (0..3).map(|i| sample_noise(&s.config, &mut ChaCha8Rng::seed_from_u64(i)).unwrap()).collect();

    assert!(matches!(incremental_add_style(&mut s.clone(), &d2, 3), Err(Error::Dataset(_))));
    let mut empty = d3.clone();
    empty.styles[2].clear();
    assert!(matches!(incremental_add_style(&mut s.clone(), &empty, 3), Err(Error::Dataset(_))));

    let log = incremental_add_style(&mut s, &d3, 8).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(s.styles(), 3);
    assert_eq!(s.config.style_count, 3);
    let per_branch = before.generator.branch_param_count(0);
    assert_eq!(s.generator.store().count(), before.generator.store().count() + per_branch);
    let head = before.discriminator.store().get(before.discriminator.store().find("cls_head/weight").unwrap()).shape().to_vec();
    assert_eq!(s.discriminator.store().count(), before.discriminator.store().count() + head[1] * head[2] * head[3] + 1);
    assert_eq!(
        s.generator.fingerprint_where(|g| g != ParamGroup::Branch(2)),
        before.generator.fingerprint_where(|_| true)
    );
    for x in &probe {
        for c in 0..2 {
            assert_eq!(s.generator.generate(x, c).unwrap().to_bits(), before.generator.generate(x, c).unwrap().to_bits());
        }
    }
    assert_ne!(s.discriminator.store().fingerprint(), before.discriminator.store().fingerprint());
    assert!(s.begin_extension().is_err());
}

#[test]
fn noise_inputs() {
    let cfg = small(Mode::TextureSynthesis);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let a = sample_noise(&cfg, &mut r).unwrap();
    assert_eq!(a.shape(), &[1, 3, 16, 16]);
    assert_eq!(a, sample_noise(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap());
    assert!(matches!(sample_noise(&small(Mode::StyleTransfer), &mut r), Err(Error::Config(_))));

    let big = TrainConfig { image_size: 180, batch_size: 1, ..cfg };
    let mut values = Vec::new();
    while values.len() < 100_000 {
        values.extend(sample_noise(&big, &mut r).unwrap().data().iter().map(|&v| v as f64));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // standard errors of the mean (1/√n) and of the variance (√(2/n))
    assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "variance {var}");
}

#[test]
fn augmentation_contract() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.scale_size(), 36);
    let img = collection(Pattern::Dots, 1, 50, 1).remove(0);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        assert_eq!(augment(&img, &cfg, &mut r).unwrap().shape(), &[1, 3, 32, 32]);
    }
    let resized = resize_bilinear(&img, 36, 36).unwrap();
    let fixed = augment_with(&img, 32, 36, CropPlan { flip: false, top: 0, left: 0 }).unwrap();
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(fixed.data()[(c * 32 + y) * 32 + x], resized.data()[(c * 36 + y) * 36 + x]);
            }
        }
    }
}

#[test]
fn non_finite_losses_abort_with_the_iteration() {
    let d = data(2, 20);
    let mut s = TrainState::new(small(Mode::StyleTransfer)).unwrap();
    s.run(&d, 2, |_, _| Ok(())).unwrap();
    let id = s.generator.store().find("decoder/out/bias").unwrap();
    s.generator.store_mut().get_mut(id).data_mut()[0] = f32::INFINITY;
    match s.step(&d) {
        Err(e @ Error::Training { iteration: 2, .. }) => assert_eq!(e.class(), "training"),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn mismatched_data_is_rejected() {
    let mut s = TrainState::new(small(Mode::StyleTransfer)).unwrap();
    assert!(matches!(s.run(&data(3, 20), 1, |_, _| Ok(())), Err(Error::Dataset(_))));
    let mut no_content = data(2, 20);
    no_content.content.clear();
    assert!(matches!(s.run(&no_content, 1, |_, _| Ok(())), Err(Error::Dataset(_))));
    let x = Tensor::zeros(&[1, 3, 16, 16]);
    let bad = Batch { x: x.clone(), y: x, style: 5, recon: None };
    assert!(matches!(s.train_step(&bad), Err(Error::Index(_))));
}

#[test]
fn reconstruction_only_improves_when_its_step_runs() {
    let d = data(2, 24);
    let crops: Vec<Tensor<f32>> = {
        let cfg = small(Mode::TextureSynthesis);
        let mut r = ChaCha8Rng::seed_from_u64(77);
        d.styles.iter().flatten().map(|img| augment(img, &cfg, &mut r).unwrap()).collect()
    };
    let error = |s: &TrainState| crops.iter().map(|c| s.reconstruction_error(c).unwrap()).sum::<f64>() / crops.len() as f64;
    let run = |lambda_r: f64| {
        let mut cfg = small(Mode::TextureSynthesis);
        cfg.weights.lambda_r = lambda_r;
        let mut s = TrainState::new(cfg).unwrap();
        let start = error(&s);
        s.run(&d, 150, |_, _| Ok(())).unwrap();
        (start, error(&s))
    };
    let (start_on, end_on) = run(10.0);
    let (start_off, end_off) = run(0.0);
    assert_eq!(start_on, start_off);
    assert!(end_on < 0.7 * start_on, "with the step: {start_on} -> {end_on}");
    assert!(end_off > end_on, "without the step: {start_off} -> {end_off}, with it {end_on}");
    eprintln!("reconstruction: {start_on:.3} -> {end_on:.3} with the step, -> {end_off:.3} without");
}

#[test]
fn texture_reconstruction_sources() {
    let d = data(2, 24);
    let batch_for = |source: ReconSource| {
        let mut cfg = small(Mode::TextureSynthesis);
        cfg.recon_source = source;
        cfg.batch_size = 2;
        let mut s = TrainState::new(cfg).unwrap();
        let b = s.sample_batch(&d).unwrap();
        let ae = s.autoencoder_input(&b).clone();
        (b, ae)
    };
    let (b, ae) = batch_for(ReconSource::Input);
    assert_eq!((b.recon, ae), (None, b.x));
    let (b, ae) = batch_for(ReconSource::Real);
    assert_eq!((b.recon, ae), (None, b.y));
    let (b, ae) = batch_for(ReconSource::Content);
    assert_eq!(ae.shape(), &[2, 3, 16, 16]);
    assert_eq!(b.recon.as_ref(), Some(&ae));
    let (b, ae) = batch_for(ReconSource::Mixed);
    assert_eq!(ae.shape(), &[4, 3, 16, 16]);
    assert_eq!(ae.batch_item(0).unwrap(), b.y.batch_item(0).unwrap());
    assert_eq!(ae.batch_item(1).unwrap(), b.y.batch_item(1).unwrap());

    for source in ["content", "mixed"] {
        let mut cfg = small(Mode::TextureSynthesis);
        cfg.recon_source = source.parse().unwrap();
        let mut s = TrainState::new(cfg).unwrap();
        let no_content = TrainingData { content: Vec::new(), styles: d.styles.clone() };
        assert!(matches!(s.run(&no_content, 1, |_, _| Ok(())), Err(Error::Dataset(_))), "{source}");
    }
}

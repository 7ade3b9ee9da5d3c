use std::fs;
use std::path::{Path, PathBuf};

use gated_gan::evaluation::Embedder;
use gated_gan::io::{
    byte_to_unit, check_styles, checkpoint_path, decode_checkpoint, encode_checkpoint, index_dataset, list_images,
    load_checkpoint, load_image, run_training, save_checkpoint, save_image, RunConfig, FINAL_CHECKPOINT, FORMAT_VERSION,
    MAGIC, METRICS_FILE,
};
use gated_gan::synthetic::{collection, content_set, Pattern};
use gated_gan::training::{Mode, TrainConfig, TrainState, TrainingData};
use gated_gan::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tempfile::tempdir;

fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * h * w).map(|_| byte_to_unit(rng.gen())).collect();
    Tensor::new(&[1, 3, h, w], data).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        image_size: 16,
        width_scale: 0.125,
        style_count: 2,
        iterations: 6,
        log_interval: 2,
        checkpoint_interval: 3,
        mode: Mode::StyleTransfer,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn small_data() -> TrainingData {
    TrainingData {
        content: content_set(3, 20, 1),
        styles: vec![collection(Pattern::Checkerboard, 2, 20, 2), collection(Pattern::Dots, 2, 20, 3)],
    }
}

fn trained_state() -> TrainState {
    let mut s = TrainState::new(small_config()).unwrap();
    let data = small_data();
    s.run(&data, 4, |_, _| Ok(())).unwrap();
    s
}

#[test]
fn images_round_trip_byte_identically() {
    let dir = tempdir().unwrap();
    for (name, h, w) in [("a.png", 7, 5), ("b.ppm", 4, 9)] {
        let img = random_image(h, w, h as u64);
        let p = dir.path().join(name);
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.shape(), &[1, 3, h, w]);
        assert_eq!(back.data(), img.data());
        let p2 = dir.path().join(format!("again_{name}"));
        save_image(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }
}

#[test]
fn byte_map_matches_the_linear_rule() {
    assert_eq!(byte_to_unit(0), -1.0);
    assert_eq!(byte_to_unit(255), 1.0);
    assert!((byte_to_unit(128) as f64 - (2.0 * 128.0 / 255.0 - 1.0)).abs() < 1e-7);
}

#[test]
fn bad_files_report_their_path() {
    let dir = tempdir().unwrap();
    let img = random_image(6, 6, 1);
    for name in ["t.png", "t.ppm"] {
        let p = dir.path().join(name);
        save_image(&img, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_image(&p).unwrap_err();
        assert!(matches!(err, Error::Decode { .. }), "{name}: {err}");
        assert_eq!(err.class(), "decode");
        assert!(err.to_string().contains(&p.display().to_string()));
    }

    let p = dir.path().join("bad.ppm");
    fs::write(&p, b"P6\n4 x\n255\n").unwrap();
    assert!(matches!(load_image(&p), Err(Error::Decode { .. })));

    let p = dir.path().join("notes.png");
    fs::write(&p, b"hello").unwrap();
    let err = load_image(&p).unwrap_err();
    assert_eq!(err.class(), "unsupported_format");
    assert!(err.to_string().contains("notes.png"));

    let err = save_image(&img, &dir.path().join("x.jpg")).unwrap_err();
    assert_eq!(err.class(), "unsupported_format");

    let missing = dir.path().join("missing.png");
    let err = load_image(&missing).unwrap_err();
    assert_eq!(err.class(), "io");
    assert!(err.to_string().contains("missing.png"));
}

fn write_collections(root: &Path, counts: &[usize]) -> Vec<PathBuf> {
    counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let dir = root.join(format!("style_{c}"));
            fs::create_dir_all(&dir).unwrap();
            // Reverse creation order so sorting is observable.
            for i in (0..n).rev() {
                save_image(&random_image(8, 8, (10 * c + i) as u64), &dir.join(format!("img_{i}.png"))).unwrap();
            }
            dir
        })
        .collect()
}

#[test]
fn dataset_index_counts_and_orders() {
    let root = tempdir().unwrap();
    let dirs = write_collections(root.path(), &[2, 3, 4]);
    fs::write(dirs[1].join("README.txt"), "not an image").unwrap();
    fs::create_dir(dirs[2].join("nested")).unwrap();

    let index = index_dataset(&dirs, None).unwrap();
    assert_eq!(index.styles(), 3);
    assert_eq!(index.counts(), vec![2, 3, 4]);
    assert_eq!(index.skipped, 2);
    for files in &index.style_collections {
        let mut sorted = files.clone();
        sorted.sort();
        assert_eq!(files, &sorted);
    }
    assert_eq!(index_dataset(&dirs, None).unwrap(), index);

    let data = index.load().unwrap();
    assert_eq!(data.styles.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 3, 4]);
    assert!(data.styles.iter().flatten().all(|t| t.shape() == [1, 3, 8, 8]));

    let (files, skipped) = list_images(&dirs[1]).unwrap();
    assert_eq!((files.len(), skipped), (3, 1));
}

#[test]
fn empty_collection_is_an_error() {
    let root = tempdir().unwrap();
    let mut dirs = write_collections(root.path(), &[2]);
    let empty = root.path().join("empty");
    fs::create_dir(&empty).unwrap();
    fs::write(empty.join("x.txt"), "").unwrap();
    dirs.push(empty);
    let err = index_dataset(&dirs, None).unwrap_err();
    assert_eq!(err.class(), "dataset");
    assert!(err.to_string().contains("empty"));
    assert_eq!(index_dataset(&[], None).unwrap_err().class(), "dataset");
    assert_eq!(index_dataset(&[root.path().join("nope")], None).unwrap_err().class(), "io");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let s = trained_state();
    assert!(!s.buffer.is_empty());
    let dir = tempdir().unwrap();
    let p = dir.path().join("s.ckpt");
    save_checkpoint(&s, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();

    assert_eq!(back.config, s.config);
    assert_eq!(back.iteration, s.iteration);
    for (a, b) in [
        (s.generator.store(), back.generator.store()),
        (s.discriminator.store(), back.discriminator.store()),
    ] {
        let xs: Vec<_> = a.iter().collect();
        let ys: Vec<_> = b.iter().collect();
        assert_eq!(xs.len(), ys.len());
        for ((_, na, ta), (_, nb, tb)) in xs.iter().zip(&ys) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
        }
    }
    for (a, b) in [(&s.opt_d, &back.opt_d), (&s.opt_g, &back.opt_g), (&s.opt_ae, &back.opt_ae)] {
        assert_eq!(a.steps, b.steps);
        let xs: Vec<_> = a.slots().collect();
        assert_eq!(xs.len(), b.slots().count());
        for (id, slot) in xs {
            assert_eq!(b.slot(id).unwrap(), slot);
        }
    }
    assert_eq!(back.buffer.len(), s.buffer.len());
    for ((ta, ca), (tb, cb)) in s.buffer.slots().iter().zip(back.buffer.slots()) {
        assert_eq!(ca, cb);
        assert_eq!(ta.data(), tb.data());
    }
    assert_eq!(back.rng, s.rng);
    assert_eq!(back.buffer.rng(), s.buffer.rng());
    assert_eq!(encode_checkpoint(&back), encode_checkpoint(&s));

    // Continuing from the copy matches continuing the original.
    let data = small_data();
    let (mut a, mut b) = (s, back);
    let ra = a.run(&data, 6, |_, _| Ok(())).unwrap();
    let rb = b.run(&data, 6, |_, _| Ok(())).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(encode_checkpoint(&a), encode_checkpoint(&b));
}

#[test]
fn checkpoint_bytes_are_deterministic() {
    let a = encode_checkpoint(&trained_state());
    let b = encode_checkpoint(&trained_state());
    assert_eq!(Sha256::digest(&a), Sha256::digest(&b));
    assert!(a.starts_with(MAGIC));
    assert_eq!(u32::from_le_bytes(a[8..12].try_into().unwrap()), FORMAT_VERSION);
}

#[test]
fn corrupted_checkpoints_are_refused() {
    let bytes = encode_checkpoint(&trained_state());
    for pos in [30, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        let err = decode_checkpoint(&bad).err().expect("corruption must be detected");
        assert_eq!(err.class(), "checkpoint");
        assert!(err.to_string().contains("checksum mismatch"), "{err}");
    }

    let mut newer = bytes.clone();
    newer[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let err = decode_checkpoint(&newer).err().unwrap();
    assert!(err.to_string().contains("version"), "{err}");

    assert!(decode_checkpoint(&bytes[..bytes.len() - 5]).is_err());
    assert!(decode_checkpoint(b"GGAN").is_err());

    let dir = tempdir().unwrap();
    let p = dir.path().join("bad.ckpt");
    let mut bad = bytes;
    bad[100] ^= 1;
    fs::write(&p, bad).unwrap();
    let err = load_checkpoint(&p).err().unwrap();
    assert!(err.to_string().contains("bad.ckpt"), "{err}");
}

#[test]
fn branch_count_must_match() {
    let s = trained_state();
    check_styles(&s, 2).unwrap();
    let err = check_styles(&s, 3).unwrap_err();
    assert_eq!(err.class(), "checkpoint");
    assert!(err.to_string().contains("2 style branches"));

    let mut grown = s;
    grown.begin_extension().unwrap();
    let back = decode_checkpoint(&encode_checkpoint(&grown)).unwrap();
    assert_eq!(back.styles(), 3);
    assert_eq!(back.new_style, Some(2));
    check_styles(&back, 3).unwrap();
}

#[test]
fn config_precedence_is_file_env_flags() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("run.cfg");
    fs::write(&p, "style_dirs = a, b, c\nseed = 1\nlambda_r = 5\nlearning_rate = 0.001\n").unwrap();
    let env = |k: &str| match k {
        "GATED_GAN_SEED" => Some("2".to_string()),
        "GATED_GAN_LAMBDA_R" => Some("7".to_string()),
        _ => None,
    };
    let overrides = vec![("seed".to_string(), "3".to_string())];
    let cfg = RunConfig::load(&p, env, &overrides).unwrap();
    assert_eq!(cfg.train.seed, 3);
    assert_eq!(cfg.train.weights.lambda_r, 7.0);
    assert_eq!(cfg.train.learning_rate, 1e-3);
    assert_eq!(cfg.train.style_count, 3);
    assert_eq!(cfg.style_dirs[0], dir.path().join("a"));
    assert_eq!(cfg.out_dir, dir.path().join("run"));

    let minimal = dir.path().join("min.cfg");
    fs::write(&minimal, "style_dirs = x\n").unwrap();
    let cfg = RunConfig::load(&minimal, |_| None, &[]).unwrap();
    assert_eq!(cfg.train, TrainConfig { style_count: 1, ..TrainConfig::default() });

    let err = RunConfig::load(&p, |_| None, &[("bogus".into(), "1".into())]).unwrap_err();
    assert_eq!(err.class(), "config");
    let err = RunConfig::load(&p, |k| (k == "GATED_GAN_BATCH_SIZE").then(|| "zero".into()), &[]).unwrap_err();
    assert_eq!(err.class(), "config");
}

#[test]
fn saved_outputs_re_embed_within_quantization() {
    let mut cfg = small_config();
    cfg.image_size = 32;
    let s = TrainState::new(cfg).unwrap();
    let embedder = Embedder::new(11);
    let dir = tempdir().unwrap();
    for (i, x) in content_set(4, 32, 9).iter().enumerate() {
        let y = s.generator.generate(x, i % 2).unwrap();
        let p = dir.path().join(format!("g{i}.png"));
        save_image(&y, &p).unwrap();
        let back = load_image(&p).unwrap();
        let fa = &embedder.embed(&y).unwrap()[0];
        let fb = &embedder.embed(&back).unwrap()[0];
        let l2 = fa.iter().zip(fb).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(l2 < 1e-2, "image {i}: feature change {l2}");
    }
}

#[test]
fn run_training_writes_metrics_and_checkpoints() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("run");
    let data = small_data();
    let mut s = TrainState::new(small_config()).unwrap();
    let records = run_training(&mut s, &data, 6, &out).unwrap();
    assert_eq!(records.len(), 3);

    let log = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);
    for (line, r) in log.lines().zip(&records) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["iteration"], r.iteration);
    }
    for it in [3, 6] {
        assert!(checkpoint_path(&out, it).is_file());
    }
    let last = load_checkpoint(&out.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(last.iteration, 6);
    assert_eq!(encode_checkpoint(&last), fs::read(checkpoint_path(&out, 6)).unwrap());

    // Resuming from the midpoint appends and ends in the same state.
    let mut resumed = load_checkpoint(&checkpoint_path(&out, 3)).unwrap();
    let out2 = dir.path().join("resumed");
    fs::create_dir_all(&out2).unwrap();
    let head: String = log.lines().take(2).map(|l| format!("{l}\n")).collect();
    fs::write(out2.join(METRICS_FILE), head).unwrap();
    run_training(&mut resumed, &data, 6, &out2).unwrap();
    assert_eq!(encode_checkpoint(&resumed), encode_checkpoint(&last));
    assert_eq!(fs::read_to_string(out2.join(METRICS_FILE)).unwrap(), log);
}

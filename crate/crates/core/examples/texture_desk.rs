use std::time::Instant;

use gated_gan::evaluation::{
    evaluate_collection, pairwise_l1_diversity, probe_accuracy, train_probe, ProbeConfig,
};
use gated_gan::synthetic::{collection, Pattern};
use gated_gan::training::{augment, sample_noise, Mode, ReconSource, TrainConfig, TrainState, TrainingData};
use gated_gan::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gated_gan::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lambda_r: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let recon = args.get(4).map(|s| s.parse::<ReconSource>()).transpose()?.unwrap_or_default();
    let mut cfg = TrainConfig { mode: Mode::TextureSynthesis, style_count: 3, iterations, seed, recon_source: recon, log_interval: 500, ..Default::default() };
    cfg.weights.lambda_r = lambda_r;
    let patterns = [Pattern::Checkerboard, Pattern::DiagonalStripes, Pattern::Dots];
    let styles: Vec<Vec<Tensor>> = patterns.iter().enumerate().map(|(i, &p)| collection(p, 16, 40, 100 + i as u64)).collect();
    let data = TrainingData { content: gated_gan::synthetic::content_set(64, 40, 5), styles: styles.clone() };
    let mut state = TrainState::new(cfg.clone())?;
    let start = Instant::now();
    state.run(&data, iterations, |s, r| {
        if let Some(r) = r {
            println!("{:>5} {:.1}s d {:.3} adv {:.3} cls {:.3} tv {:.1} rec {:.3}", s.iteration, start.elapsed().as_secs_f64(), r.d_loss, r.g_adv, r.g_cls, r.tv, r.recon);
        }
        if s.iteration % 1000 == 0 {
            let mut r2 = ChaCha8Rng::seed_from_u64(5);
            let mut e = 0.0;
            for i in 0..30 {
                let crop = augment(&data.styles[i % 3][i % 16], &s.config, &mut r2)?;
                e += s.reconstruction_error(&crop)?;
            }
            println!("      recon(train crops) {:.4}", e / 30.0);
        }
        Ok(())
    })?;
    println!("{:.2} ms/iter", start.elapsed().as_secs_f64() * 1e3 / iterations as f64);

    let held_out: Vec<Vec<Tensor>> = patterns.iter().enumerate().map(|(i, &p)| collection(p, 16, 40, 900 + i as u64)).collect();
    let t = Instant::now();
    let probe = train_probe(&held_out, &ProbeConfig::default())?;
    println!("probe trained in {:.1}s", t.elapsed().as_secs_f64());
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let noise_cfg = TrainConfig { batch_size: 1, ..cfg.clone() };
    let inputs: Vec<Tensor> = (0..300).map(|_| sample_noise(&noise_cfg, &mut rng)).collect::<Result<_, _>>()?;
    for c in 0..3 {
        let gen: Vec<Tensor> = inputs.iter().map(|x| state.generator.generate(x, c)).collect::<Result<_, _>>()?;
        let acc = probe_accuracy(&probe, &Tensor::stack(&gen)?, c)?;
        // real-data accuracy of the probe for reference
        let real: Vec<Tensor> = (0..100).map(|i| augment(&held_out[c][i % 16], &cfg, &mut rng)).collect::<Result<_, _>>()?;
        let racc = probe_accuracy(&probe, &Tensor::stack(&real)?, c)?;
        let div = pairwise_l1_diversity(&gen[..50])?;
        print!("branch {c}: probe {acc:.3} (real {racc:.3}) div {div:.4} fid");
        for c2 in 0..3 {
            let crops: Vec<Tensor> = (0..300).map(|i| augment(&held_out[c2][i % 16], &cfg, &mut rng)).collect::<Result<_, _>>()?;
            let s = evaluate_collection(&state.generator, &inputs, c, &crops, 7)?;
            print!(" {:.4}", s.fid);
        }
        println!();
    }
    let mut rec = 0.0;
    let mut per = [0.0; 3];
    for i in 0..99 {
        let crop = augment(&held_out[i % 3][i % 16], &cfg, &mut rng)?;
        let e = state.reconstruction_error(&crop)?;
        rec += e;
        per[i % 3] += e / 33.0;
    }
    println!("recon on held-out crops {:.4} per texture {:?}", rec / 99.0, per);
    let mut rt = 0.0;
    for i in 0..99 {
        let crop = augment(&styles[i % 3][i % 16], &cfg, &mut rng)?;
        rt += state.reconstruction_error(&crop)?;
    }
    println!("recon on training crops {:.4}", rt / 99.0);
    let mut recn = 0.0;
    for x in inputs.iter().take(100) {
        recn += state.reconstruction_error(x)?;
    }
    println!("recon on noise {:.4}", recn / 100.0);
    let held_content = gated_gan::synthetic::content_set(30, 40, 905);
    let mut rc = 0.0;
    for img in &held_content {
        rc += state.reconstruction_error(&augment(img, &cfg, &mut rng)?)?;
    }
    println!("recon on held-out content {:.4}", rc / 30.0);
    let mut styles4 = styles.clone();
    styles4.push(collection(Pattern::Waves, 16, 40, 103));
    let data4 = TrainingData { content: data.content.clone(), styles: styles4 };
    let before = state.generator.clone();
    gated_gan::training::incremental_add_style(&mut state, &data4, 2000)?;
    let mut held4 = held_out.clone();
    held4.push(collection(Pattern::Waves, 16, 40, 903));
    let probe4 = train_probe(&held4, &ProbeConfig::default())?;
    let gen: Vec<Tensor> = inputs.iter().map(|x| state.generator.generate(x, 3)).collect::<Result<_, _>>()?;
    let same = (0..3).all(|c| before.generate(&inputs[0], c).unwrap().data() == state.generator.generate(&inputs[0], c).unwrap().data());
    println!("extension: waves probe {:.3}, old unchanged {same}", probe_accuracy(&probe4, &Tensor::stack(&gen)?, 3)?);
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

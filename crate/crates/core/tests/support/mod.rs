#![allow(dead_code)]

use gated_gan::autodiff::{compare_gradients, grad_check, GradCheckReport};
use gated_gan::losses::{self, LossWeights};
use gated_gan::models::{DiscriminatorConfig, DiscriminatorParams, GeneratorConfig, GeneratorParams, StyleWeights};
use gated_gan::{Activation, Padding, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// A ramp plus bounded noise: neighbouring differences stay at least 0.1
/// from zero, away from the total-variation square root's kink.
pub fn tilted(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Tensor::from_fn(shape, |i| {
        let (y, x) = ((i / w) % h, i % w);
        0.3 * (x + y) as f64 + rng.gen_range(-0.1..0.1)
    })
}

pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values kept at least `gap` away from zero, so kinked ops are not probed
/// across their kink.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) { v } else { -v }
    })
}

/// Redraw inputs until every pre-activation computed by `pre` is at least
/// `margin` from zero, so a finite-difference step never crosses a kink.
fn clear_of_kinks(
    r: &mut ChaCha8Rng,
    draw: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    pre: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    margin: f64,
) -> Vec<Tensor<f64>> {
    loop {
        let inputs = draw(r);
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let v = pre(&mut t, &vars).unwrap();
        if t.value(v).data().iter().all(|x| x.abs() > margin) {
            return inputs;
        }
    }
}

pub type Case = (&'static str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>, Vec<Tensor<f64>>);

fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    // a fixed random projection makes every output element matter
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(uniform(&shape, &mut rng));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn tiny_generator(seed: u64) -> GeneratorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GeneratorParams::new(GeneratorConfig { styles: 2, width_scale: 1.0 / 8.0, branch_depth: 1 }, &mut rng).unwrap()
}

fn tiny_discriminator(seed: u64) -> DiscriminatorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DiscriminatorParams::new(DiscriminatorConfig { styles: 3, width_scale: 1.0 / 32.0 }, &mut rng).unwrap()
}

/// Every differentiable op, every loss and the composite networks, with
/// inputs drawn from `seed`.
pub fn gradient_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<Case> = Vec::new();
    let s = seed;

    cases.push((
        "conv2d zero padding stride 1",
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Zero(1))?;
            weighted_sum(t, y, s)
        }),
        vec![uniform(&[2, 2, 5, 5], r), uniform(&[3, 2, 3, 3], r), uniform(&[3], r)],
    ));
    cases.push((
        "conv2d zero padding stride 2",
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Zero(1))?;
            weighted_sum(t, y, s)
        }),
        vec![uniform(&[1, 2, 6, 7], r), uniform(&[2, 2, 4, 4], r), uniform(&[2], r)],
    ));
    cases.push((
        "conv2d reflect padding",
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, Padding::Reflect(3))?;
            weighted_sum(t, y, s)
        }),
        vec![uniform(&[1, 2, 5, 6], r), uniform(&[2, 2, 7, 7], r)],
    ));
    cases.push((
        "conv2d_transpose",
        Box::new(move |t, v| {
            let y = t.conv2d_transpose(v[0], v[1], Some(v[2]), 2)?;
            weighted_sum(t, y, s)
        }),
        vec![uniform(&[2, 3, 3, 4], r), uniform(&[3, 2, 3, 3], r), uniform(&[2], r)],
    ));
    cases.push((
        "instance_norm",
        Box::new(move |t, v| {
            let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, s)
        }),
        vec![uniform(&[2, 3, 4, 4], r), uniform(&[3], r), uniform(&[3], r)],
    ));
    for (name, act) in [("relu", Activation::Relu), ("leaky_relu", Activation::LEAKY), ("tanh", Activation::Tanh)] {
        cases.push((
            name,
            Box::new(move |t, v| {
                let y = t.activation(v[0], act)?;
                weighted_sum(t, y, s)
            }),
            vec![away_from_zero(&[2, 2, 3, 3], 0.01, r)],
        ));
    }
    cases.push((
        "add",
        Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        vec![uniform(&[2, 5], r), uniform(&[2, 5], r)],
    ));
    cases.push((
        "sub",
        Box::new(move |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        vec![uniform(&[2, 5], r), uniform(&[2, 5], r)],
    ));
    cases.push((
        "mul",
        Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, s)
        }),
        vec![uniform(&[3, 4], r), uniform(&[3, 4], r)],
    ));
    cases.push((
        "scale and add_scalar",
        Box::new(move |t, v| {
            let y = t.scale(v[0], -2.5)?;
            let y = t.add_scalar(y, 0.75)?;
            let y = t.square(y)?;
            t.mean(y)
        }),
        vec![uniform(&[4, 3], r)],
    ));
    cases.push((
        "abs",
        Box::new(move |t, v| {
            let y = t.abs(v[0])?;
            weighted_sum(t, y, s)
        }),
        vec![away_from_zero(&[3, 3], 0.01, r)],
    ));
    cases.push(("sum", Box::new(|t, v| t.sum(v[0])), vec![uniform(&[2, 3, 2], r)]));
    cases.push(("mean", Box::new(|t, v| t.mean(v[0])), vec![uniform(&[2, 3, 2], r)]));
    cases.push((
        "spatial_mean",
        Box::new(move |t, v| {
            let y = t.spatial_mean(v[0])?;
            weighted_sum(t, y, s)
        }),
        vec![uniform(&[2, 3, 3, 2], r)],
    ));
    let targets: Vec<usize> = (0..3).map(|_| r.gen_range(0..4)).collect();
    cases.push((
        "softmax_cross_entropy",
        Box::new(move |t, v| t.softmax_cross_entropy(v[0], &targets)),
        vec![uniform(&[3, 4], r).map(|x| 3.0 * x)],
    ));
    cases.push(("total_variation", Box::new(|t, v| t.total_variation(v[0], 1e-8)), vec![tilted(&[1, 3, 4, 5], r)]));

    cases.push(("lsgan_d_loss", Box::new(|t, v| losses::lsgan_d_loss(t, v[0], v[1])), vec![uniform(&[2, 1, 3, 3], r), uniform(&[2, 1, 3, 3], r)]));
    cases.push(("lsgan_g_loss", Box::new(|t, v| losses::lsgan_g_loss(t, v[0])), vec![uniform(&[2, 1, 3, 3], r)]));
    let x = uniform(&[1, 3, 4, 4], r);
    let gap = away_from_zero(&[1, 3, 4, 4], 0.01, r);
    let x_hat = Tensor::from_fn(x.shape(), |i| x.data()[i] + gap.data()[i]);
    cases.push(("reconstruction_loss", Box::new(|t, v| losses::reconstruction_loss(t, v[0], v[1])), vec![x, x_hat]));
    let styles: Vec<usize> = (0..2).map(|_| r.gen_range(0..3)).collect();
    let styles2 = styles.clone();
    cases.push((
        "classifier_loss_real",
        Box::new(move |t, v| losses::classifier_loss_real(t, v[0], &styles)),
        vec![uniform(&[2, 3], r)],
    ));
    cases.push((
        "classifier_loss_generated",
        Box::new(move |t, v| losses::classifier_loss_generated(t, v[0], &styles2)),
        vec![uniform(&[2, 3], r)],
    ));
    cases.push(("tv_loss", Box::new(|t, v| losses::tv_loss(t, v[0])), vec![tilted(&[2, 3, 3, 4], r)]));
    let weights = LossWeights { lambda_cls: r.gen_range(0.1..2.0), lambda_tv: r.gen_range(0.1..2.0), lambda_r: 10.0 };
    cases.push((
        "generator_objective",
        Box::new(move |t, v| {
            let adv = losses::lsgan_g_loss(t, v[0])?;
            let cls = losses::classifier_loss_generated(t, v[1], &[1])?;
            let tv = losses::tv_loss(t, v[2])?;
            losses::generator_objective(t, adv, cls, tv, &weights)
        }),
        vec![uniform(&[1, 1, 2, 2], r), uniform(&[1, 3], r), tilted(&[1, 3, 3, 3], r)],
    ));

    cases.push((
        "conv, instance norm, relu layer",
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, Padding::Zero(1))?;
            let y = t.instance_norm(y, v[2], v[3], 1e-5)?;
            let y = t.relu(y)?;
            weighted_sum(t, y, s)
        }),
        clear_of_kinks(
            r,
            |r| vec![uniform(&[1, 2, 8, 8], r), uniform(&[3, 2, 3, 3], r), uniform(&[3], r), uniform(&[3], r)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, 2, Padding::Zero(1))?;
                t.instance_norm(y, v[2], v[3], 1e-5)
            },
            0.02,
        ),
    ));
    cases.push((
        "residual block",
        Box::new(move |t, v| {
            let h = t.conv2d(v[0], v[1], None, 1, Padding::Zero(1))?;
            let h = t.instance_norm(h, v[2], v[3], 1e-5)?;
            let h = t.relu(h)?;
            let h = t.conv2d(h, v[4], None, 1, Padding::Zero(1))?;
            let h = t.instance_norm(h, v[5], v[6], 1e-5)?;
            let y = t.add(v[0], h)?;
            weighted_sum(t, y, s)
        }),
        clear_of_kinks(
            r,
            |r| {
                vec![
                    uniform(&[1, 2, 4, 4], r),
                    uniform(&[2, 2, 3, 3], r),
                    uniform(&[2], r),
                    uniform(&[2], r),
                    uniform(&[2, 2, 3, 3], r),
                    uniform(&[2], r),
                    uniform(&[2], r),
                ]
            },
            |t, v| {
                let h = t.conv2d(v[0], v[1], None, 1, Padding::Zero(1))?;
                t.instance_norm(h, v[2], v[3], 1e-5)
            },
            0.02,
        ),
    ));
    cases.push((
        "fractional convolution layer",
        Box::new(move |t, v| {
            let y = t.conv2d_transpose(v[0], v[1], None, 2)?;
            let y = t.instance_norm(y, v[2], v[3], 1e-5)?;
            let y = t.relu(y)?;
            weighted_sum(t, y, s)
        }),
        clear_of_kinks(
            r,
            |r| vec![uniform(&[1, 3, 3, 3], r), uniform(&[3, 2, 3, 3], r), uniform(&[2], r), uniform(&[2], r)],
            |t, v| {
                let y = t.conv2d_transpose(v[0], v[1], None, 2)?;
                t.instance_norm(y, v[2], v[3], 1e-5)
            },
            0.02,
        ),
    ));
    cases.push((
        "reflect-padded output layer",
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Reflect(3))?;
            let y = t.activation(y, Activation::Tanh)?;
            weighted_sum(t, y, s)
        }),
        vec![uniform(&[1, 2, 6, 6], r), uniform(&[3, 2, 7, 7], r).map(|w| 0.2 * w), uniform(&[3], r)],
    ));
    cases.push((
        "patch discriminator layer",
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, Padding::Zero(1))?;
            let y = t.instance_norm(y, v[2], v[3], 1e-5)?;
            let y = t.activation(y, Activation::LEAKY)?;
            weighted_sum(t, y, s)
        }),
        clear_of_kinks(
            r,
            |r| vec![uniform(&[1, 2, 8, 8], r), uniform(&[3, 2, 4, 4], r), uniform(&[3], r), uniform(&[3], r)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, 2, Padding::Zero(1))?;
                t.instance_norm(y, v[2], v[3], 1e-5)
            },
            0.02,
        ),
    ));
    cases.push((
        "gated blend",
        Box::new(move |t, v| {
            let a = t.scale(v[0], 0.3)?;
            let b = t.scale(v[1], 0.7)?;
            let y = t.add(a, b)?;
            weighted_sum(t, y, s)
        }),
        vec![uniform(&[1, 2, 3, 3], r), uniform(&[1, 2, 3, 3], r)],
    ));
    cases
}

pub fn run_gradient_suite(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    gradient_cases(seed)
        .into_iter()
        .map(|(name, f, inputs)| (name, grad_check(f, &inputs, GRAD_TOL).unwrap_or_else(|e| panic!("{name}: {e}"))))
        .collect()
}

/// Whole generator and discriminator paths, checked with respect to the
/// input image. These contain thousands of relu units, so the step is small
/// enough that no kink lies within it.
pub fn network_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let s = seed;
    let mut cases: Vec<Case> = Vec::new();
    let gen = tiny_generator(seed);
    let gen2 = gen.clone();
    let gen3 = gen.clone();
    cases.push((
        "generator forward",
        Box::new(move |t, v| {
            let p = gen.bind(t, |_| false);
            let y = gen.forward(t, &p, v[0], 1)?;
            weighted_sum(t, y, s)
        }),
        vec![uniform(&[1, 3, 16, 16], r)],
    ));
    cases.push((
        "auto-encoder reconstruction",
        Box::new(move |t, v| {
            let p = gen2.bind(t, |_| false);
            let y = gen2.reconstruct_on(t, &p, v[0])?;
            weighted_sum(t, y, s)
        }),
        vec![uniform(&[1, 3, 16, 16], r)],
    ));
    cases.push((
        "blended gate",
        Box::new(move |t, v| {
            let p = gen3.bind(t, |_| false);
            let w = StyleWeights::new(vec![0.3, 0.7])?;
            let f = gen3.encode(t, &p, v[0])?;
            let g = gen3.transform(t, &p, f, &w)?;
            weighted_sum(t, g, s)
        }),
        vec![uniform(&[1, 3, 16, 16], r)],
    ));
    let disc = tiny_discriminator(seed);
    let disc2 = disc.clone();
    cases.push((
        "discriminator adversarial head",
        Box::new(move |t, v| {
            let p = disc.bind(t, false);
            let f = disc.trunk_forward(t, &p, v[0])?;
            let sc = disc.adv_forward(t, &p, f)?;
            weighted_sum(t, sc, s)
        }),
        vec![uniform(&[1, 3, 48, 48], r)],
    ));
    cases.push((
        "discriminator classifier head",
        Box::new(move |t, v| {
            let p = disc2.bind(t, false);
            let f = disc2.trunk_forward(t, &p, v[0])?;
            let l = disc2.pooled_logits(t, &p, f)?;
            losses::classifier_loss_real(t, l, &[2])
        }),
        vec![uniform(&[1, 3, 48, 48], r)],
    ));
    cases
}

pub fn check_with_step(case: &Case, step: f64, tol: f64) -> GradCheckReport {
    let (name, f, inputs) = case;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap_or_else(|e| panic!("{name}: {e}"));
    let grads = tape.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v).cloned().unwrap()).collect();
    compare_gradients(f, inputs, &analytic, step, tol).unwrap()
}

/// Random Gaussian statistics of dimension `d`: mean uniform in [−2, 2],
/// covariance `B·Bᵀ/d` for a uniform random `B`.
pub fn random_stats(d: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum::<f64>() / d as f64;
        }
    }
    (mean, cov)
}

/// Fréchet distance by a different route: the trace term as the sum of
/// square roots of the eigenvalues of the non-symmetric product `Σx·Σg`,
/// found by nalgebra's Schur decomposition.
pub fn fid_oracle(mx: &[f64], cx: &[f64], mg: &[f64], cg: &[f64]) -> f64 {
    use nalgebra::DMatrix;
    let d = mx.len();
    let a = DMatrix::from_row_slice(d, d, cx);
    let b = DMatrix::from_row_slice(d, d, cg);
    let mean_term: f64 = mx.iter().zip(mg).map(|(x, y)| (x - y).powi(2)).sum();
    let cross: f64 = (&a * &b).complex_eigenvalues().iter().map(|z| z.re.max(0.0).sqrt()).sum();
    mean_term + a.trace() + b.trace() - 2.0 * cross
}

//! Procedural textures and content images for small-scale experiments.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Checkerboard,
    DiagonalStripes,
    Dots,
    Waves,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Checkerboard, Pattern::DiagonalStripes, Pattern::Dots, Pattern::Waves];
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::Checkerboard => "checkerboard",
            Pattern::DiagonalStripes => "stripes",
            Pattern::Dots => "dots",
            Pattern::Waves => "waves",
        })
    }
}

impl FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown pattern {s:?}")))
    }
}

type Rgb = [f32; 3];

fn jitter<R: Rng>(c: Rgb, amount: f32, rng: &mut R) -> Rgb {
    c.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(-1.0, 1.0))
}

fn image(size: usize, mut pixel: impl FnMut(f32, f32) -> Rgb) -> Tensor<f32> {
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let rgb = pixel(x as f32 + 0.5, y as f32 + 0.5);
            for (ch, v) in rgb.into_iter().enumerate() {
                data[(ch * size + y) * size + x] = v;
            }
        }
    }
    Tensor::new(&[1, 3, size, size], data).expect("consistent size")
}

fn mix(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
}

/// One `1×3×size×size` sample of `pattern` with random phase and colour
/// jitter.
pub fn render<R: Rng>(pattern: Pattern, size: usize, rng: &mut R) -> Tensor<f32> {
    let (ox, oy) = (rng.gen_range(0.0..16.0f32), rng.gen_range(0.0..16.0f32));
    match pattern {
        Pattern::Checkerboard => {
            let cell = rng.gen_range(4.0..5.0f32);
            let a = jitter([0.9, 0.9, 0.9], 0.05, rng);
            let b = jitter([-0.9, -0.9, -0.9], 0.05, rng);
            image(size, |x, y| {
                let parity = ((x + ox) / cell).floor() as i64 + ((y + oy) / cell).floor() as i64;
                if parity.rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            })
        }
        Pattern::DiagonalStripes => {
            let period = rng.gen_range(6.0..7.0f32);
            let a = jitter([-0.8, -0.5, 0.9], 0.05, rng);
            let b = jitter([0.9, 0.8, -0.6], 0.05, rng);
            image(size, |x, y| {
                let s = ((x + y + ox) / period).fract();
                // soft edges keep the pattern band-limited
                let t = (0.5 + 0.5 * (s * std::f32::consts::TAU).sin() * 3.0).clamp(0.0, 1.0);
                mix(a, b, t)
            })
        }
        Pattern::Dots => {
            let spacing = rng.gen_range(7.0..8.0f32);
            let radius = spacing * 0.3;
            let bg = jitter([0.85, 0.8, 0.7], 0.05, rng);
            let dot = jitter([0.8, -0.7, -0.6], 0.05, rng);
            image(size, |x, y| {
                let cx = (x + ox).rem_euclid(spacing) - spacing / 2.0;
                let cy = (y + oy).rem_euclid(spacing) - spacing / 2.0;
                let d = (cx * cx + cy * cy).sqrt();
                mix(dot, bg, (d - radius + 0.5).clamp(0.0, 1.0))
            })
        }
        Pattern::Waves => {
            let period = rng.gen_range(8.0..9.0f32);
            let amp = rng.gen_range(1.5..2.5f32);
            let a = jitter([-0.7, 0.7, -0.4], 0.05, rng);
            let b = jitter([0.2, -0.6, 0.8], 0.05, rng);
            image(size, |x, y| {
                let phase = (y + oy + amp * ((x + ox) * std::f32::consts::TAU / 12.0).sin()) / period;
                mix(a, b, 0.5 + 0.5 * (phase * std::f32::consts::TAU).sin())
            })
        }
    }
}

/// `count` samples of one pattern, seed-deterministic.
pub fn collection(pattern: Pattern, count: usize, size: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| render(pattern, size, &mut rng)).collect()
}

/// A smooth colour field with a few solid shapes, standing in for a photo.
pub fn content_image<R: Rng>(size: usize, rng: &mut R) -> Tensor<f32> {
    let top = [0, 1, 2].map(|_| rng.gen_range(-0.8..0.8f32));
    let bottom = [0, 1, 2].map(|_| rng.gen_range(-0.8..0.8f32));
    let shapes: Vec<(f32, f32, f32, bool, Rgb)> = (0..rng.gen_range(2..5))
        .map(|_| {
            let s = size as f32;
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(s * 0.1..s * 0.3),
                rng.gen_bool(0.5),
                [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0f32)),
            )
        })
        .collect();
    image(size, |x, y| {
        let mut c = mix(top, bottom, y / size as f32);
        for &(cx, cy, r, round, col) in &shapes {
            let inside = if round {
                (x - cx).powi(2) + (y - cy).powi(2) < r * r
            } else {
                (x - cx).abs() < r && (y - cy).abs() < r
            };
            if inside {
                c = col;
            }
        }
        c
    })
}

pub fn content_set(count: usize, size: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| content_image(size, &mut rng)).collect()
}

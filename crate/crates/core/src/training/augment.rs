use rand::Rng;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Random choices of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct CropPlan {
    pub flip: bool,
    pub top: usize,
    pub left: usize,
}

/// Bilinear resize of a `1×C×H×W` image with half-pixel sample centres.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (n, c, h, w) = img.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!("resize expects a single image, got batch {n}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize target must be non-empty"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let axis = |src: usize, dst: usize| -> Vec<(usize, usize, f32)> {
        let ratio = src as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[1, c, out_h, out_w], out)
}

pub fn draw_plan<R: Rng>(scale_size: usize, image_size: usize, rng: &mut R) -> CropPlan {
    let flip = rng.gen_bool(0.5);
    let span = scale_size.saturating_sub(image_size);
    let top = rng.gen_range(0..=span);
    let left = rng.gen_range(0..=span);
    CropPlan { flip, top, left }
}

/// Resize to `scale_size`², then flip and crop to `image_size`² per `plan`.
pub fn augment_with(img: &Tensor<f32>, image_size: usize, scale_size: usize, plan: CropPlan) -> Result<Tensor<f32>> {
    let scaled = resize_bilinear(img, scale_size, scale_size)?;
    if plan.top + image_size > scale_size || plan.left + image_size > scale_size {
        return Err(Error::shape(format!(
            "crop at ({}, {}) of size {image_size} leaves the {scale_size}² image",
            plan.top, plan.left
        )));
    }
    let c = scaled.shape()[1];
    let src = scaled.data();
    let mut out = Vec::with_capacity(c * image_size * image_size);
    for ch in 0..c {
        for y in 0..image_size {
            let row = &src[(ch * scale_size + plan.top + y) * scale_size..][..scale_size];
            for x in 0..image_size {
                let sx = if plan.flip { scale_size - 1 - (plan.left + x) } else { plan.left + x };
                out.push(row[sx]);
            }
        }
    }
    Tensor::new(&[1, c, image_size, image_size], out)
}

/// Training augmentation: bilinear rescale, random horizontal flip, random crop.
pub fn augment<R: Rng>(img: &Tensor<f32>, cfg: &TrainConfig, rng: &mut R) -> Result<Tensor<f32>> {
    let plan = draw_plan(cfg.scale_size(), cfg.image_size, rng);
    augment_with(img, cfg.image_size, cfg.scale_size(), plan)
}

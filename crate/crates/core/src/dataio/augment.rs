use ndarray::{s, Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{arg_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Pretrain,
    Finetune,
}

/// Stochastic transforms applied in a fixed order: random resized crop,
/// horizontal flip, color jitter, grayscale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPipeline {
    pub mode: PipelineMode,
    /// Fraction of the image area kept by the crop.
    pub crop_scale: (f64, f64),
    /// Aspect ratio range of the crop.
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    /// Reflection padding used by the fine-tuning crop.
    pub pad: usize,
}

impl Default for AugmentationPipeline {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl AugmentationPipeline {
    pub fn pretrain() -> Self {
        Self {
            mode: PipelineMode::Pretrain,
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
            pad: 4,
        }
    }

    /// A pretrain pipeline that returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            ..Self::pretrain()
        }
    }

    pub fn finetune() -> Self {
        Self {
            mode: PipelineMode::Finetune,
            ..Self::pretrain()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.crop_scale == (1.0, 1.0)
            && self.crop_ratio == (1.0, 1.0)
            && self.flip_p == 0.0
            && self.jitter_p == 0.0
            && self.grayscale_p == 0.0
    }

    /// Applies one independent draw of the pretrain transform chain.
    pub fn apply(&self, x: ArrayView3<'_, f64>, rng: &mut impl Rng) -> Image {
        let mut img = random_resized_crop(x, self.crop_scale, self.crop_ratio, rng);
        if self.flip_p > 0.0 && rng.random::<f64>() < self.flip_p {
            img = hflip(img.view());
        }
        if self.jitter_p > 0.0 && rng.random::<f64>() < self.jitter_p {
            color_jitter(&mut img, self, rng);
        }
        if self.grayscale_p > 0.0 && rng.random::<f64>() < self.grayscale_p {
            grayscale(&mut img);
        }
        img
    }
}

/// Two independent augmented views of `x`.
pub fn make_views(
    x: ArrayView3<'_, f64>,
    pipeline: &AugmentationPipeline,
    rng: &mut impl Rng,
) -> Result<(Image, Image)> {
    if pipeline.mode != PipelineMode::Pretrain {
        return arg_err("make_views requires a pretrain pipeline");
    }
    let a = pipeline.apply(x, rng);
    let b = pipeline.apply(x, rng);
    Ok((a, b))
}

pub fn hflip(x: ArrayView3<'_, f64>) -> Image {
    x.slice(s![.., .., ..;-1]).to_owned()
}

fn random_resized_crop(
    x: ArrayView3<'_, f64>,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut impl Rng,
) -> Image {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if scale == (1.0, 1.0) && ratio == (1.0, 1.0) && h == w {
        return x.to_owned();
    }
    let area = (h * w) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * sample(rng, scale.0, scale.1);
        let aspect = sample(rng, lr0, lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return resize_bilinear(x.slice(s![.., top..top + ch, left..left + cw]), h, w);
        }
    }
    x.to_owned()
}

fn sample(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn resize_bilinear(x: ArrayView3<'_, f64>, out_h: usize, out_w: usize) -> Image {
    let (c, h, w) = x.dim();
    if h == out_h && w == out_w {
        return x.to_owned();
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let top = x[[ch, y0, x0]] * (1.0 - wx) + x[[ch, y0, x1]] * wx;
                let bot = x[[ch, y1, x0]] * (1.0 - wx) + x[[ch, y1, x1]] * wx;
                out[[ch, oy, ox]] = (top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn luma(img: &Image) -> ndarray::Array2<f64> {
    if img.len_of(Axis(0)) != 3 {
        return img.index_axis(Axis(0), 0).to_owned();
    }
    &img.index_axis(Axis(0), 0) * 0.299
        + &img.index_axis(Axis(0), 1) * 0.587
        + &img.index_axis(Axis(0), 2) * 0.114
}

fn blend(img: &mut Image, other: &ndarray::Array2<f64>, factor: f64) {
    for mut ch in img.axis_iter_mut(Axis(0)) {
        ch.zip_mut_with(other, |p, &o| *p = (o + factor * (*p - o)).clamp(0.0, 1.0));
    }
}

fn color_jitter(img: &mut Image, p: &AugmentationPipeline, rng: &mut impl Rng) {
    if p.brightness > 0.0 {
        let f = sample(rng, (1.0 - p.brightness).max(0.0), 1.0 + p.brightness);
        img.mapv_inplace(|v| (v * f).clamp(0.0, 1.0));
    }
    if p.contrast > 0.0 {
        let f = sample(rng, (1.0 - p.contrast).max(0.0), 1.0 + p.contrast);
        let m = luma(img).mean().unwrap_or(0.0);
        img.mapv_inplace(|v| (m + f * (v - m)).clamp(0.0, 1.0));
    }
    if img.len_of(Axis(0)) != 3 {
        return;
    }
    if p.saturation > 0.0 {
        let f = sample(rng, (1.0 - p.saturation).max(0.0), 1.0 + p.saturation);
        let g = luma(img);
        blend(img, &g, f);
    }
    if p.hue > 0.0 {
        let shift = sample(rng, -p.hue, p.hue);
        let (_, h, w) = img.dim();
        for y in 0..h {
            for x in 0..w {
                let (hh, ss, vv) = rgb_to_hsv(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
                let (r, g, b) = hsv_to_rgb((hh + shift).rem_euclid(1.0), ss, vv);
                img[[0, y, x]] = r.clamp(0.0, 1.0);
                img[[1, y, x]] = g.clamp(0.0, 1.0);
                img[[2, y, x]] = b.clamp(0.0, 1.0);
            }
        }
    }
}

fn grayscale(img: &mut Image) {
    let g = luma(img);
    for mut ch in img.axis_iter_mut(Axis(0)) {
        ch.assign(&g);
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Draws a crop offset in `{0..=2·pad}²`.
pub fn sample_crop_offset(rng: &mut impl Rng, pad: usize) -> (usize, usize) {
    (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad))
}

/// Reflection-pad by `pad`, crop back to the input side at `offset`, optionally mirror.
pub fn finetune_augment_with(
    x: ArrayView3<'_, f64>,
    pad: usize,
    offset: (usize, usize),
    flip: bool,
) -> Result<Image> {
    let (c, h, w) = x.dim();
    if h <= 2 * pad || w <= 2 * pad {
        return arg_err(format!("side {h}x{w} too small for reflection padding {pad}"));
    }
    if offset.0 > 2 * pad || offset.1 > 2 * pad {
        return arg_err(format!("crop offset {offset:?} outside padded image"));
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            let sy = reflect(y as isize + offset.0 as isize - pad as isize, h);
            for xx in 0..w {
                let sx = reflect(xx as isize + offset.1 as isize - pad as isize, w);
                let dx = if flip { w - 1 - xx } else { xx };
                out[[ch, y, dx]] = x[[ch, sy, sx]];
            }
        }
    }
    Ok(out)
}

/// Pad-4 reflection crop plus random horizontal flip.
pub fn finetune_augment(x: ArrayView3<'_, f64>, rng: &mut impl Rng) -> Result<Image> {
    let pad = 4;
    let offset = sample_crop_offset(rng, pad);
    let flip = rng.random::<f64>() < 0.5;
    finetune_augment_with(x, pad, offset, flip)
}

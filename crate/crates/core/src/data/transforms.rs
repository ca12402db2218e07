use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ReidSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rotates a square `[c,s,s]` image by `k·90°` counter-clockwise. Pure index
/// permutation; no resampling.
pub fn rotate_image(img: &Tensor, k: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3("rotate_image")?;
    if h != w {
        return Err(Error::shape("rotate_image", format!("image must be square, got {h}x{w}")));
    }
    let s = h;
    let src = img.data();
    let k = k % 4;
    let out = Tensor::from_fn(&[c, s, s], |idx| {
        let (ch, i, j) = (idx / (s * s), (idx / s) % s, idx % s);
        let (si, sj) = match k {
            0 => (i, j),
            1 => (j, s - 1 - i),
            2 => (s - 1 - i, s - 1 - j),
            _ => (s - 1 - j, i),
        };
        src[ch * s * s + si * s + sj]
    });
    Ok(out)
}

/// Rotated copy of a training image with its pseudo-label.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationSample {
    pub image_rot: Tensor,
    /// `k` such that the image was rotated by `k·90°` counter-clockwise.
    pub pseudo_label: usize,
}

pub fn make_rotation_sample(sample: &ReidSample, rng: &mut impl Rng) -> Result<RotationSample> {
    let k = rng.random_range(0..4);
    Ok(RotationSample { image_rot: rotate_image(&sample.image, k)?, pseudo_label: k })
}

/// Mirrors an image left to right.
pub fn hflip(img: &Tensor) -> Tensor {
    let s = img.shape();
    let w = s[s.len() - 1];
    let src = img.data();
    Tensor::from_fn(s, |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    })
}

/// Fills the rectangle `[top, top+height) × [left, left+width)` of every
/// channel with that channel's fill value.
pub fn erase(img: &Tensor, top: usize, left: usize, height: usize, width: usize, fill: [f64; 3]) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = img.clone();
    let d = out.data_mut();
    for ch in 0..c {
        for y in top..(top + height).min(h) {
            for x in left..(left + width).min(w) {
                d[ch * h * w + y * w + x] = fill[ch.min(2)];
            }
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Training-time augmentation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Reflect padding before the random crop, in pixels.
    pub pad: usize,
    pub crop_p: f64,
    pub flip_p: f64,
    pub erase_p: f64,
    /// Erased area as a fraction of the image, `[min, max]`.
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    /// Per-channel fill value for erased rectangles (dataset mean).
    pub fill: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pad: 8,
            crop_p: 1.0,
            flip_p: 0.5,
            erase_p: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
            fill: [0.5; 3],
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { crop_p: 0.0, flip_p: 0.0, erase_p: 0.0, ..Self::default() }
    }
}

fn pad_crop(img: &Tensor, pad: usize, dy: usize, dx: usize) -> Tensor {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let src = img.data();
    Tensor::from_fn(s, |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let sy = reflect(y as isize + dy as isize - pad as isize, h);
        let sx = reflect(x as isize + dx as isize - pad as isize, w);
        src[ch * h * w + sy * w + sx]
    })
}

/// Random pad-and-crop, horizontal flip and random erasing, each applied
/// with its configured probability. Only for training images.
pub fn augment(img: &Tensor, rng: &mut impl Rng, cfg: &AugmentConfig) -> Result<Tensor> {
    let (_, h, w) = img.dims3("augment")?;
    let mut out = img.clone();
    if cfg.pad > 0 && rng.random::<f64>() < cfg.crop_p {
        let dy = rng.random_range(0..=2 * cfg.pad);
        let dx = rng.random_range(0..=2 * cfg.pad);
        out = pad_crop(&out, cfg.pad, dy, dx);
    }
    if rng.random::<f64>() < cfg.flip_p {
        out = hflip(&out);
    }
    if rng.random::<f64>() < cfg.erase_p {
        let area = (h * w) as f64;
        for _ in 0..100 {
            let target = area * rng.random_range(cfg.erase_area.0..=cfg.erase_area.1);
            let aspect = rng.random_range(cfg.erase_aspect.0..=cfg.erase_aspect.1);
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            if eh >= 1 && ew >= 1 && eh < h && ew < w {
                let top = rng.random_range(0..=h - eh);
                let left = rng.random_range(0..=w - ew);
                out = erase(&out, top, left, eh, ew, cfg.fill);
                break;
            }
        }
    }
    Ok(out)
}

/// Bilinear resize of `[c,h,w]` to `[c,out_h,out_w]` using pixel-center
/// alignment.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3("resize")?;
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let f = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, f - i0 as f64)
    };
    Ok(Tensor::from_fn(&[c, out_h, out_w], |i| {
        let (ch, y, x) = (i / (out_h * out_w), (i / out_w) % out_h, i % out_w);
        let (y0, y1, fy) = coord(y, h, out_h);
        let (x0, x1, fx) = coord(x, w, out_w);
        let at = |yy: usize, xx: usize| src[ch * h * w + yy * w + xx];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

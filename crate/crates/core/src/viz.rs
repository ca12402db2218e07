//! Attention-mask rendering and rotation consistency.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{rotate_image, write_pgm, write_ppm, ReidSample};
use crate::error::{Error, Result};
use crate::model::{attention_masks, ModelState, ROTATIONS};
use crate::tensor::Tensor;

/// Min-max scales values to `0..=255`; a constant map becomes all zeros.
pub fn min_max_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values.iter().map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }).collect()
}

/// Blends a blue-to-red rendering of `mask [h,w]`, nearest-neighbor upsampled
/// to the image size, onto `image [3,H,W]` with weight `alpha`.
pub fn overlay(image: &Tensor, mask: &Tensor, alpha: f64) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3("overlay")?;
    let (mh, mw) = mask.dims2("overlay")?;
    if c != 3 || mh == 0 || mw == 0 || h % mh != 0 || w % mw != 0 {
        return Err(Error::shape(
            "overlay",
            format!("mask {:?} does not tile image {:?}", mask.shape(), image.shape()),
        ));
    }
    let heat = min_max_u8(mask.data());
    let (fy, fx) = (h / mh, w / mw);
    let img = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            let v = heat[(y / fy) * mw + x / fx] as f64 / 255.0;
            let color = [v, 0.0, 1.0 - v];
            for ch in 0..3 {
                let blended = (1.0 - alpha) * img[ch * h * w + y * w + x] + alpha * color[ch];
                out.push((blended.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Masks of one image and of its three rotated copies.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionView {
    pub mask: Tensor,
    /// `Q(rot_k(x))` for `k = 1, 2, 3`.
    pub rotated: [Tensor; 3],
    /// Mean over `k` of `cos(rot_k(Q(x)), Q(rot_k(x)))`.
    pub consistency: f64,
}

/// Eval-mode attention of every image under all four rotations.
pub fn attention_views(state: &ModelState, images: &[Tensor]) -> Result<Vec<AttentionView>> {
    let mut batch = Vec::with_capacity(images.len() * ROTATIONS);
    for img in images {
        for k in 0..ROTATIONS {
            batch.push(rotate_image(img, k)?);
        }
    }
    let q = attention_masks(state, &Tensor::stack(&batch)?)?;
    let (_, h, w) = q.dims3("attention_views")?;
    let mask_at = |i: usize| Tensor::new(&[h, w], q.data()[i * h * w..(i + 1) * h * w].to_vec());
    let mut views = Vec::with_capacity(images.len());
    for i in 0..images.len() {
        let base = mask_at(i * ROTATIONS)?;
        let rotated = [mask_at(i * ROTATIONS + 1)?, mask_at(i * ROTATIONS + 2)?, mask_at(i * ROTATIONS + 3)?];
        let as_image = base.clone().reshape(&[1, h, w])?;
        let mut sum = 0.0;
        for (k, r) in rotated.iter().enumerate() {
            sum += cosine(rotate_image(&as_image, k + 1)?.data(), r.data());
        }
        views.push(AttentionView { mask: base, rotated, consistency: sum / 3.0 });
    }
    Ok(views)
}

/// Mean rotation consistency over a set of images.
pub fn rotation_consistency(state: &ModelState, images: &[Tensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Data("no images for rotation consistency".into()));
    }
    let views = attention_views(state, images)?;
    Ok(views.iter().map(|v| v.consistency).sum::<f64>() / views.len() as f64)
}

/// Per-image summary printed by the visualizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualizedImage {
    pub name: String,
    pub files: Vec<PathBuf>,
    pub consistency: f64,
}

fn stem(name: &str) -> String {
    Path::new(name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| name.to_string())
}

/// Writes `<stem>.mask.pgm`, the exact mask as `<stem>.mask.gatn` (entry
/// `mask` in the checkpoint container), `<stem>.overlay.ppm` and
/// `<stem>.rot{90,180,270}.overlay.ppm` for every sample.
pub fn write_attention_maps(
    state: &ModelState,
    samples: &[ReidSample],
    out_dir: &Path,
) -> Result<Vec<VisualizedImage>> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let views = attention_views(state, &images)?;
    let mut written = Vec::with_capacity(samples.len());
    for (sample, view) in samples.iter().zip(&views) {
        let stem = stem(&sample.name);
        let (_, h, w) = sample.image.dims3("write_attention_maps")?;
        let (mh, mw) = view.mask.dims2("write_attention_maps")?;
        let mut files = Vec::new();

        let mask_path = out_dir.join(format!("{stem}.mask.pgm"));
        write_pgm(&mask_path, mw, mh, &min_max_u8(view.mask.data()))?;
        files.push(mask_path);

        let raw_path = out_dir.join(format!("{stem}.mask.gatn"));
        checkpoint::save(&raw_path, &[("mask".to_string(), view.mask.clone())])?;
        files.push(raw_path);

        let overlay_path = out_dir.join(format!("{stem}.overlay.ppm"));
        write_ppm(&overlay_path, w, h, &overlay(&sample.image, &view.mask, 0.5)?)?;
        files.push(overlay_path);

        for (k, mask) in view.rotated.iter().enumerate() {
            let rotated = rotate_image(&sample.image, k + 1)?;
            let path = out_dir.join(format!("{stem}.rot{}.overlay.ppm", 90 * (k + 1)));
            write_ppm(&path, w, h, &overlay(&rotated, mask, 0.5)?)?;
            files.push(path);
        }
        written.push(VisualizedImage { name: sample.name.clone(), files, consistency: view.consistency });
    }
    Ok(written)
}

//! Samples, datasets and the training-time data pipeline.

mod manifest;
mod sampler;
mod synthetic;
mod transforms;

pub use manifest::{
    decode_pnm, load_image, load_manifest, save_image_ppm, save_manifest, write_dataset_layout, write_pgm, write_ppm,
};
pub use sampler::{pk_sample_batch, PkSampler};
pub use synthetic::{
    canonical_sprite, generate_synthetic_dataset, render_sprite, Landmark, Nuisance, SpriteParams, SyntheticDataset,
    SyntheticSpec,
};
pub use transforms::{
    augment, erase, hflip, make_rotation_sample, resize_bilinear, rotate_image, AugmentConfig, RotationSample,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labelled image: `[3,H,W]` with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReidSample {
    /// File name (relative to the dataset root) or a generated name.
    pub name: String,
    pub image: Tensor,
    pub identity: usize,
    pub camera: usize,
    pub track: Option<usize>,
}

impl ReidSample {
    pub fn validate(&self) -> Result<()> {
        let (c, ..) = self.image.dims3("sample")?;
        if c != 3 {
            return Err(Error::Data(format!("{}: expected 3 channels, got {c}", self.name)));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("{}: pixel values outside [0,1]", self.name)));
        }
        Ok(())
    }
}

/// Label columns of a sample set, aligned with the samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
    pub tracks: Option<Vec<usize>>,
}

impl Labels {
    /// Tracks are reported only when every sample carries one.
    pub fn of(samples: &[ReidSample]) -> Self {
        Self {
            identities: samples.iter().map(|s| s.identity).collect(),
            cameras: samples.iter().map(|s| s.camera).collect(),
            tracks: samples.iter().map(|s| s.track).collect(),
        }
    }
}

/// Stacks sample images into `[n,3,H,W]`.
pub fn stack_images(samples: &[ReidSample]) -> Result<Tensor> {
    let imgs: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&imgs)
}

/// Per-channel mean pixel value over a sample set.
pub fn channel_mean(samples: &[ReidSample]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for s in samples {
        let plane = s.image.len() / 3;
        for (c, acc) in sum.iter_mut().enumerate() {
            *acc += s.image.data()[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
        count += plane;
    }
    if count == 0 {
        return [0.0; 3];
    }
    sum.map(|s| s / count as f64)
}

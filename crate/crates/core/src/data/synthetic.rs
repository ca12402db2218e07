//! Procedural vehicle sprites with per-camera nuisance.
//!
//! Every identity is a side-view vehicle: a body rectangle, a roof trapezoid,
//! two wheel discs and a logo mark, each with identity-specific colors and
//! proportions. Images of an identity differ only by nuisance (placement,
//! brightness, background noise), grouped into camera clusters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ReidSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_TRANSLATION: f64 = 0.1;
const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
const MAX_ROTATION_DEG: f64 = 10.0;
const MAX_BRIGHTNESS: f64 = 0.1;

/// Generator settings. Nuisance magnitudes are upper bounds; each camera
/// draws a base offset within half of every range and each image adds
/// jitter within the other half.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub image_size: usize,
    pub seed: u64,
    pub num_cameras: usize,
    /// Fraction of the image side.
    pub max_translation: f64,
    pub scale_range: (f64, f64),
    pub max_rotation_deg: f64,
    pub max_brightness: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 20,
            images_per_identity: 20,
            image_size: 64,
            seed: 7,
            num_cameras: 4,
            max_translation: MAX_TRANSLATION,
            scale_range: SCALE_RANGE,
            max_rotation_deg: MAX_ROTATION_DEG,
            max_brightness: MAX_BRIGHTNESS,
            noise_sigma: 0.03,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_identities < 2 {
            return bad(format!("synthetic data needs ≥ 2 identities, got {}", self.num_identities));
        }
        if self.images_per_identity < 4 {
            return bad(format!("synthetic data needs ≥ 4 images per identity, got {}", self.images_per_identity));
        }
        if self.image_size < 8 {
            return bad(format!("image size must be ≥ 8, got {}", self.image_size));
        }
        if self.num_cameras == 0 || self.num_cameras > self.images_per_identity {
            return bad(format!("camera count must be in 1..={}, got {}", self.images_per_identity, self.num_cameras));
        }
        if !(0.0..=MAX_TRANSLATION).contains(&self.max_translation) {
            return bad(format!("translation must be in [0, {MAX_TRANSLATION}], got {}", self.max_translation));
        }
        let (lo, hi) = self.scale_range;
        if !(SCALE_RANGE.0 <= lo && lo <= 1.0 && 1.0 <= hi && hi <= SCALE_RANGE.1) {
            return bad(format!("scale range must lie in [0.9, 1.1] and contain 1, got {lo}..{hi}"));
        }
        if !(0.0..=MAX_ROTATION_DEG).contains(&self.max_rotation_deg) {
            return bad(format!("rotation must be in [0, {MAX_ROTATION_DEG}]°, got {}", self.max_rotation_deg));
        }
        if !(0.0..=MAX_BRIGHTNESS).contains(&self.max_brightness) {
            return bad(format!("brightness must be in [0, {MAX_BRIGHTNESS}], got {}", self.max_brightness));
        }
        if !(0.0..=0.5).contains(&self.noise_sigma) {
            return bad(format!("noise sigma must be in [0, 0.5], got {}", self.noise_sigma));
        }
        Ok(())
    }

    /// Identities `[0, n_train)` form the training split.
    pub fn num_train_identities(&self) -> usize {
        self.num_identities / 2
    }

    /// Cameras cover consecutive blocks of an identity's images.
    pub fn camera_of(&self, image_index: usize) -> usize {
        image_index * self.num_cameras / self.images_per_identity
    }

    pub fn track_of(&self, identity: usize, camera: usize) -> usize {
        identity * self.num_cameras + camera
    }
}

/// Identity appearance in canonical sprite coordinates: the sprite occupies
/// the unit square `[-0.5, 0.5]²` centered on the image, `y` pointing down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteParams {
    pub body_color: [f64; 3],
    pub roof_color: [f64; 3],
    pub wheel_color: [f64; 3],
    pub logo_color: [f64; 3],
    pub body_half_width: f64,
    pub body_top: f64,
    pub body_bottom: f64,
    /// Roof top edge as a fraction of the body width, and its height.
    pub roof_top_fraction: f64,
    pub roof_height: f64,
    /// Horizontal offset of the roof center.
    pub roof_shift: f64,
    pub wheel_radius: f64,
    /// Wheel centers sit at `±wheel_spread · body_half_width`.
    pub wheel_spread: f64,
    pub logo_x: f64,
    pub logo_half: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl SpriteParams {
    /// Deterministic appearance of `identity` under `seed`. Body hues follow
    /// a golden-ratio sequence, so identities never share a body color.
    pub fn for_identity(seed: u64, identity: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + identity as u64);
        let hue = (0.618_033_988_749_895 * identity as f64 + rng.random_range(0.0..0.05)).rem_euclid(1.0);
        let body_color = hsv(hue, rng.random_range(0.55..0.95), rng.random_range(0.6..0.95));
        let roof_color =
            hsv(hue + rng.random_range(0.25..0.75), rng.random_range(0.3..0.9), rng.random_range(0.4..0.9));
        let shade = rng.random_range(0.05..0.3);
        let wheel_color = [shade, shade, shade + rng.random_range(0.0..0.1)];
        let logo_color = hsv(rng.random::<f64>(), rng.random_range(0.0..1.0), rng.random_range(0.7..1.0));
        let body_half_width = rng.random_range(0.3..0.42);
        let body_bottom = rng.random_range(0.12..0.2);
        let body_top = body_bottom - rng.random_range(0.14..0.24);
        Self {
            body_color,
            roof_color,
            wheel_color,
            logo_color,
            body_half_width,
            body_top,
            body_bottom,
            roof_top_fraction: rng.random_range(0.35..0.7),
            roof_height: rng.random_range(0.1..0.17),
            roof_shift: rng.random_range(-0.08..0.08),
            wheel_radius: rng.random_range(0.06..0.1),
            wheel_spread: rng.random_range(0.55..0.8),
            logo_x: rng.random_range(-0.6..0.6) * body_half_width,
            logo_half: rng.random_range(0.025..0.045),
        }
    }

    fn wheel_centers(&self) -> [(f64, f64); 2] {
        let x = self.wheel_spread * self.body_half_width;
        [(-x, self.body_bottom), (x, self.body_bottom)]
    }

    fn roof_half_widths(&self) -> (f64, f64) {
        let bottom = 0.9 * self.body_half_width;
        (self.roof_top_fraction * bottom, bottom)
    }

    fn logo_center(&self) -> (f64, f64) {
        (self.logo_x, 0.5 * (self.body_top + self.body_bottom))
    }

    /// Color at canonical point `(x, y)`, or `None` for background.
    fn color_at(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        for (cx, cy) in self.wheel_centers() {
            if (x - cx).powi(2) + (y - cy).powi(2) <= self.wheel_radius.powi(2) {
                return Some(self.wheel_color);
            }
        }
        let (lx, ly) = self.logo_center();
        if (x - lx).abs() <= self.logo_half && (y - ly).abs() <= self.logo_half {
            return Some(self.logo_color);
        }
        if x.abs() <= self.body_half_width && (self.body_top..=self.body_bottom).contains(&y) {
            return Some(self.body_color);
        }
        let roof_bottom = self.body_top;
        let roof_top = roof_bottom - self.roof_height;
        if (roof_top..roof_bottom).contains(&y) {
            let (top_hw, bottom_hw) = self.roof_half_widths();
            let t = (y - roof_top) / self.roof_height;
            if (x - self.roof_shift).abs() <= top_hw + t * (bottom_hw - top_hw) {
                return Some(self.roof_color);
            }
        }
        None
    }

    /// Named structural points in canonical coordinates.
    fn landmarks(&self) -> Vec<(&'static str, (f64, f64))> {
        let [wl, wr] = self.wheel_centers();
        let (top_hw, bottom_hw) = self.roof_half_widths();
        let roof_top = self.body_top - self.roof_height;
        let hw = self.body_half_width;
        vec![
            ("wheel_left", wl),
            ("wheel_right", wr),
            ("body_top_left", (-hw, self.body_top)),
            ("body_top_right", (hw, self.body_top)),
            ("body_bottom_left", (-hw, self.body_bottom)),
            ("body_bottom_right", (hw, self.body_bottom)),
            ("roof_top_left", (self.roof_shift - top_hw, roof_top)),
            ("roof_top_right", (self.roof_shift + top_hw, roof_top)),
            ("roof_bottom_left", (self.roof_shift - bottom_hw, self.body_top)),
            ("roof_bottom_right", (self.roof_shift + bottom_hw, self.body_top)),
            ("logo", self.logo_center()),
        ]
    }
}

/// Placement and photometric nuisance of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    /// Translation as a fraction of the image side.
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub rotation_rad: f64,
    pub brightness: f64,
    pub background: [f64; 3],
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Nuisance {
    /// Centered, unscaled, unrotated placement on a mid-gray noiseless
    /// background.
    pub fn identity() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            scale: 1.0,
            rotation_rad: 0.0,
            brightness: 0.0,
            background: [0.5; 3],
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    /// Maps a canonical sprite point to pixel coordinates `(x, y)`.
    fn to_pixel(&self, p: (f64, f64), size: usize) -> (f64, f64) {
        let s = size as f64;
        let (sin, cos) = self.rotation_rad.sin_cos();
        let (x, y) = (p.0 * self.scale, p.1 * self.scale);
        let (x, y) = (cos * x - sin * y, sin * x + cos * y);
        ((x + 0.5 + self.dx) * s, (y + 0.5 + self.dy) * s)
    }

    /// Inverse of [`Self::to_pixel`].
    fn to_canonical(&self, px: f64, py: f64, size: usize) -> (f64, f64) {
        let s = size as f64;
        let (x, y) = (px / s - 0.5 - self.dx, py / s - 0.5 - self.dy);
        let (sin, cos) = self.rotation_rad.sin_cos();
        let (x, y) = (cos * x + sin * y, -sin * x + cos * y);
        (x / self.scale, y / self.scale)
    }
}

/// Renders a sprite with 2×2 supersampling and quantizes to 8-bit levels,
/// so the result equals what a PPM round trip would load.
pub fn render_sprite(params: &SpriteParams, nuisance: &Nuisance, size: usize) -> Tensor {
    let mut noise_rng = ChaCha8Rng::seed_from_u64(nuisance.noise_seed);
    let noise = Normal::new(0.0, nuisance.noise_sigma.max(0.0)).expect("finite sigma");
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0; 3];
            let mut background_hits = 0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let (x, y) = nuisance.to_canonical(px as f64 + ox, py as f64 + oy, size);
                let color = params.color_at(x, y).unwrap_or_else(|| {
                    background_hits += 1;
                    nuisance.background
                });
                for c in 0..3 {
                    acc[c] += 0.25 * color[c];
                }
            }
            let n = if background_hits > 0 && nuisance.noise_sigma > 0.0 {
                noise.sample(&mut noise_rng) * background_hits as f64 / 4.0
            } else {
                0.0
            };
            for c in 0..3 {
                let v = (acc[c] + nuisance.brightness + n).clamp(0.0, 1.0);
                data[c * plane + py * size + px] = (v * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("shape matches data")
}

/// The sprite at its canonical placement.
pub fn canonical_sprite(params: &SpriteParams, size: usize) -> Tensor {
    render_sprite(params, &Nuisance::identity(), size)
}

/// A named structural point of a rendered image, in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub image: String,
    pub name: String,
    pub x: f64,
    pub y: f64,
}

/// Generated splits plus ground-truth landmarks for every image. Landmarks
/// are diagnostic metadata and never enter training.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub train: Vec<ReidSample>,
    pub query: Vec<ReidSample>,
    pub gallery: Vec<ReidSample>,
    pub landmarks: Vec<Landmark>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.query.len() + self.gallery.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &ReidSample> {
        self.train.iter().chain(&self.query).chain(&self.gallery)
    }
}

fn symmetric(rng: &mut ChaCha8Rng, half_range: f64) -> f64 {
    if half_range > 0.0 {
        rng.random_range(-half_range..=half_range)
    } else {
        0.0
    }
}

struct CameraBase {
    dx: f64,
    dy: f64,
    log_scale: f64,
    rotation_deg: f64,
    brightness: f64,
    background: [f64; 3],
}

impl CameraBase {
    fn draw(spec: &SyntheticSpec, camera: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(u64::MAX - camera as u64);
        let (lo, hi) = spec.scale_range;
        let gray: f64 = rng.random_range(0.3..0.7);
        let tint = |rng: &mut ChaCha8Rng| -> f64 { (gray + rng.random_range(-0.06..0.06_f64)).clamp(0.0, 1.0) };
        Self {
            dx: symmetric(&mut rng, spec.max_translation / 2.0),
            dy: symmetric(&mut rng, spec.max_translation / 2.0),
            log_scale: if hi > lo { rng.random_range(lo.ln() / 2.0..=hi.ln() / 2.0) } else { 0.0 },
            rotation_deg: symmetric(&mut rng, spec.max_rotation_deg / 2.0),
            brightness: symmetric(&mut rng, spec.max_brightness / 2.0),
            background: [tint(&mut rng), tint(&mut rng), tint(&mut rng)],
        }
    }
}

fn image_nuisance(spec: &SyntheticSpec, base: &CameraBase, identity: usize, index: usize) -> Nuisance {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((identity as u64) << 32 | index as u64) ^ 0x5eed_0000_0000_0000);
    let (lo, hi) = spec.scale_range;
    let log_jitter = if hi > lo { rng.random_range(lo.ln() / 2.0..=hi.ln() / 2.0) } else { 0.0 };
    Nuisance {
        dx: base.dx + symmetric(&mut rng, spec.max_translation / 2.0),
        dy: base.dy + symmetric(&mut rng, spec.max_translation / 2.0),
        scale: (base.log_scale + log_jitter).exp().clamp(lo, hi),
        rotation_rad: (base.rotation_deg + symmetric(&mut rng, spec.max_rotation_deg / 2.0)).to_radians(),
        brightness: base.brightness + symmetric(&mut rng, spec.max_brightness / 2.0),
        background: base.background,
        noise_sigma: spec.noise_sigma,
        noise_seed: rng.random(),
    }
}

/// Renders the full dataset. The first half of the identities is the
/// training split; for every other identity the first image of each camera
/// is a query and the remaining images form the gallery.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let cameras: Vec<CameraBase> = (0..spec.num_cameras).map(|c| CameraBase::draw(spec, c)).collect();
    let n_train = spec.num_train_identities();
    let mut out = SyntheticDataset {
        spec: spec.clone(),
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
        landmarks: Vec::new(),
    };
    for identity in 0..spec.num_identities {
        let params = SpriteParams::for_identity(spec.seed, identity);
        let mut previous_camera = None;
        for index in 0..spec.images_per_identity {
            let camera = spec.camera_of(index);
            let nuisance = image_nuisance(spec, &cameras[camera], identity, index);
            let name = format!("images/{identity:04}_c{camera}_{index:03}.ppm");
            for (landmark, p) in params.landmarks() {
                let (x, y) = nuisance.to_pixel(p, spec.image_size);
                out.landmarks.push(Landmark { image: name.clone(), name: landmark.to_string(), x, y });
            }
            let sample = ReidSample {
                name,
                image: render_sprite(&params, &nuisance, spec.image_size),
                identity,
                camera,
                track: Some(spec.track_of(identity, camera)),
            };
            if identity < n_train {
                out.train.push(sample);
            } else if previous_camera != Some(camera) {
                out.query.push(sample);
            } else {
                out.gallery.push(sample);
            }
            previous_camera = Some(camera);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> SyntheticSpec {
        SyntheticSpec { num_identities: 4, images_per_identity: 8, image_size: 16, ..SyntheticSpec::default() }
    }

    #[test]
    fn identity_nuisance_gives_canonical_sprite() {
        let p = SpriteParams::for_identity(3, 1);
        assert_eq!(render_sprite(&p, &Nuisance::identity(), 32), canonical_sprite(&p, 32));
    }

    #[test]
    fn pixel_round_trip_through_nuisance() {
        let n = Nuisance { dx: 0.05, dy: -0.03, scale: 1.07, rotation_rad: 0.1, ..Nuisance::identity() };
        let (px, py) = n.to_pixel((0.2, -0.1), 64);
        let (x, y) = n.to_canonical(px, py, 64);
        assert!((x - 0.2).abs() < 1e-12 && (y + 0.1).abs() < 1e-12);
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv(0.5, 0.0, 0.4), [0.4, 0.4, 0.4]);
    }

    #[test]
    fn splits_and_labels() {
        let spec = small();
        let d = generate_synthetic_dataset(&spec).unwrap();
        assert_eq!(d.len(), 32);
        assert_eq!(d.train.len(), 16);
        // 2 test identities × 4 cameras
        assert_eq!(d.query.len(), 8);
        assert_eq!(d.gallery.len(), 8);
        let train_ids: BTreeSet<_> = d.train.iter().map(|s| s.identity).collect();
        assert!(d.query.iter().chain(&d.gallery).all(|s| !train_ids.contains(&s.identity)));
        for s in d.all_samples() {
            s.validate().unwrap();
            assert_eq!(s.track, Some(spec.track_of(s.identity, s.camera)));
        }
        assert_eq!(d.landmarks.len(), 32 * 11);
    }

    #[test]
    fn spec_bounds() {
        let bad = [
            SyntheticSpec { num_identities: 1, ..small() },
            SyntheticSpec { images_per_identity: 3, ..small() },
            SyntheticSpec { max_translation: 0.2, ..small() },
            SyntheticSpec { scale_range: (0.8, 1.0), ..small() },
            SyntheticSpec { max_rotation_deg: 12.0, ..small() },
            SyntheticSpec { max_brightness: 0.3, ..small() },
            SyntheticSpec { num_cameras: 9, ..small() },
        ];
        for spec in bad {
            assert!(matches!(generate_synthetic_dataset(&spec), Err(Error::Config(_))), "{spec:?}");
        }
    }
}

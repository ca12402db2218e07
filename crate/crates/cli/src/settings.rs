//! Run configuration: preset defaults, overridden by a `key = value` file,
//! overridden by command-line flags. The resolved table is echoed in the
//! same format so any run can be replayed from its output directory.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use geomattn::data::SyntheticSpec;
use geomattn::eval::EvalConfig;
use geomattn::model::ArchConfig;
use geomattn::optim::{Schedule, TrainConfig};

use crate::Failure;

pub const DEFAULT_PRESET: &str = "desk";

/// Every key the resolver understands, with its default under `preset`.
fn defaults(preset: &str) -> Result<BTreeMap<String, String>, Failure> {
    let t = TrainConfig::preset(preset).map_err(Failure::from)?;
    let s = SyntheticSpec::default();
    let e = EvalConfig::default();
    let o = &t.optim;
    let w = &t.loss.weights;
    let a = &t.augment;
    let list = |xs: &[usize]| xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let schedule = match o.schedule {
        Schedule::Multistep => "multistep",
        Schedule::WarmupCosine => "warmup_cosine",
    };
    let pairs: Vec<(&str, String)> = vec![
        ("preset", preset.into()),
        ("seed", "0".into()),
        ("out", "run".into()),
        ("data.dir", String::new()),
        ("data.synthetic", "false".into()),
        ("synthetic.ids", s.num_identities.to_string()),
        ("synthetic.images", s.images_per_identity.to_string()),
        ("synthetic.size", s.image_size.to_string()),
        ("synthetic.seed", String::new()),
        ("synthetic.cameras", s.num_cameras.to_string()),
        ("synthetic.max_translation", s.max_translation.to_string()),
        ("synthetic.scale_min", s.scale_range.0.to_string()),
        ("synthetic.scale_max", s.scale_range.1.to_string()),
        ("synthetic.max_rotation_deg", s.max_rotation_deg.to_string()),
        ("synthetic.max_brightness", s.max_brightness.to_string()),
        ("synthetic.noise_sigma", s.noise_sigma.to_string()),
        ("model.size", s.image_size.to_string()),
        ("acm.window", ArchConfig::desk(2).acm.window.to_string()),
        ("optim.lr0", o.lr0.to_string()),
        ("optim.beta1", o.beta1.to_string()),
        ("optim.beta2", o.beta2.to_string()),
        ("optim.eps", o.eps.to_string()),
        ("optim.weight_decay", o.weight_decay.to_string()),
        ("optim.decoupled_weight_decay", o.decoupled_weight_decay.to_string()),
        ("optim.epochs", o.epochs.to_string()),
        ("optim.schedule", schedule.into()),
        ("optim.milestones", list(&o.milestones)),
        ("optim.gamma", o.gamma.to_string()),
        ("optim.warmup_epochs", o.warmup_epochs.to_string()),
        ("optim.cosine_end_epoch", o.cosine_end_epoch.to_string()),
        ("optim.lr_floor", o.lr_floor.to_string()),
        ("loss.lambda_tri_gb", w.tri_gb.to_string()),
        ("loss.lambda_sce_gb", w.sce_gb.to_string()),
        ("loss.lambda_tri_ab", w.tri_ab.to_string()),
        ("loss.lambda_sce_ab", w.sce_ab.to_string()),
        ("loss.lambda_rot", w.rot.to_string()),
        ("loss.margin", t.loss.margin.to_string()),
        ("loss.smoothing", t.loss.smoothing.to_string()),
        ("loss.mixed_triplet_pool", t.loss.mixed_triplet_pool.to_string()),
        ("batch.p", t.p.to_string()),
        ("batch.k", t.k.to_string()),
        ("train.all_rotations", t.all_rotations.to_string()),
        ("train.checkpoint_every", "0".into()),
        ("augment.pad", a.pad.to_string()),
        ("augment.crop_p", a.crop_p.to_string()),
        ("augment.flip_p", a.flip_p.to_string()),
        ("augment.erase_p", a.erase_p.to_string()),
        ("augment.erase_area_min", a.erase_area.0.to_string()),
        ("augment.erase_area_max", a.erase_area.1.to_string()),
        ("eval.filter_same_camera", e.filter_same_camera.to_string()),
        ("eval.max_rank", e.max_rank.to_string()),
    ];
    Ok(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, origin: &Path) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Failure::config(format!("{}:{}: expected `key = value`, got {raw:?}", origin.display(), n + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Resolved key/value table.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Applies `overrides` in order on top of the defaults of the last
    /// `preset` they name.
    pub fn resolve(overrides: &[(String, String)]) -> Result<Self, Failure> {
        let preset = overrides.iter().rev().find(|(k, _)| k == "preset").map_or(DEFAULT_PRESET, |(_, v)| v.as_str());
        let mut values = defaults(preset)?;
        for (k, v) in overrides {
            match values.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(Failure::config(format!("unknown config key `{k}`"))),
            }
        }
        // The dataset seed follows the run seed unless pinned.
        if values["synthetic.seed"].is_empty() {
            let seed = values["seed"].clone();
            values.insert("synthetic.seed".into(), seed);
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| Failure::config(format!("config key `{key}`: cannot parse {raw:?}: {e}")))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.raw(key)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    /// The table in config-file syntax.
    pub fn echo(&self) -> String {
        let mut s = String::from("# resolved run configuration\n");
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec, Failure> {
        Ok(SyntheticSpec {
            num_identities: self.get("synthetic.ids")?,
            images_per_identity: self.get("synthetic.images")?,
            image_size: self.get("synthetic.size")?,
            seed: self.get("synthetic.seed")?,
            num_cameras: self.get("synthetic.cameras")?,
            max_translation: self.get("synthetic.max_translation")?,
            scale_range: (self.get("synthetic.scale_min")?, self.get("synthetic.scale_max")?),
            max_rotation_deg: self.get("synthetic.max_rotation_deg")?,
            max_brightness: self.get("synthetic.max_brightness")?,
            noise_sigma: self.get("synthetic.noise_sigma")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, Failure> {
        let mut t = TrainConfig::preset(self.raw("preset")).map_err(Failure::from)?;
        let o = &mut t.optim;
        o.lr0 = self.get("optim.lr0")?;
        o.beta1 = self.get("optim.beta1")?;
        o.beta2 = self.get("optim.beta2")?;
        o.eps = self.get("optim.eps")?;
        o.weight_decay = self.get("optim.weight_decay")?;
        o.decoupled_weight_decay = self.get("optim.decoupled_weight_decay")?;
        o.epochs = self.get("optim.epochs")?;
        o.schedule = match self.raw("optim.schedule") {
            "multistep" => Schedule::Multistep,
            "warmup_cosine" => Schedule::WarmupCosine,
            other => {
                return Err(Failure::config(format!(
                    "optim.schedule must be multistep or warmup_cosine, got {other:?}"
                )))
            }
        };
        o.milestones = self
            .raw("optim.milestones")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Failure::config(format!("optim.milestones: bad epoch {s:?}"))))
            .collect::<Result<_, _>>()?;
        o.gamma = self.get("optim.gamma")?;
        o.warmup_epochs = self.get("optim.warmup_epochs")?;
        o.cosine_end_epoch = self.get("optim.cosine_end_epoch")?;
        o.lr_floor = self.get("optim.lr_floor")?;
        let w = &mut t.loss.weights;
        w.tri_gb = self.get("loss.lambda_tri_gb")?;
        w.sce_gb = self.get("loss.lambda_sce_gb")?;
        w.tri_ab = self.get("loss.lambda_tri_ab")?;
        w.sce_ab = self.get("loss.lambda_sce_ab")?;
        w.rot = self.get("loss.lambda_rot")?;
        t.loss.margin = self.get("loss.margin")?;
        t.loss.smoothing = self.get("loss.smoothing")?;
        t.loss.mixed_triplet_pool = self.get("loss.mixed_triplet_pool")?;
        t.p = self.get("batch.p")?;
        t.k = self.get("batch.k")?;
        t.all_rotations = self.get("train.all_rotations")?;
        let a = &mut t.augment;
        a.pad = self.get("augment.pad")?;
        a.crop_p = self.get("augment.crop_p")?;
        a.flip_p = self.get("augment.flip_p")?;
        a.erase_p = self.get("augment.erase_p")?;
        a.erase_area = (self.get("augment.erase_area_min")?, self.get("augment.erase_area_max")?);
        t.validate().map_err(Failure::from)?;
        Ok(t)
    }

    pub fn eval_config(&self) -> Result<EvalConfig, Failure> {
        Ok(EvalConfig {
            filter_same_camera: self.get("eval.filter_same_camera")?,
            max_rank: self.get("eval.max_rank")?,
        })
    }
}

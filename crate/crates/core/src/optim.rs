//! Adam, learning-rate schedules and the joint training loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, make_rotation_sample, rotate_image, AugmentConfig, PkSampler, ReidSample};
use crate::error::{Error, Result};
use crate::losses::{overall_loss, LossComponents, LossConfig};
use crate::model::{Forward, Mode, ModelState, ROTATIONS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Multistep,
    WarmupCosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Shrink weights directly instead of adding `wd·θ` to the gradient.
    pub decoupled_weight_decay: bool,
    pub epochs: usize,
    pub schedule: Schedule,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub warmup_epochs: usize,
    /// Epoch at which the cosine phase reaches `lr_floor`.
    pub cosine_end_epoch: usize,
    pub lr_floor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            decoupled_weight_decay: false,
            epochs: 80,
            schedule: Schedule::Multistep,
            milestones: vec![20, 40, 60],
            gamma: 0.1,
            warmup_epochs: 10,
            cosine_end_epoch: 100,
            lr_floor: 1e-7,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0,1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.schedule == Schedule::WarmupCosine
            && !(self.warmup_epochs <= self.cosine_end_epoch && self.cosine_end_epoch <= self.epochs)
        {
            return bad(format!(
                "warmup-cosine needs warmup ≤ cosine end ≤ epochs, got {} ≤ {} ≤ {}",
                self.warmup_epochs, self.cosine_end_epoch, self.epochs
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Multistep => lr_multistep(epoch, self),
            Schedule::WarmupCosine => lr_warmup_cosine(epoch as f64, self),
        }
    }
}

/// `lr0 · γ^(milestones ≤ epoch)`.
pub fn lr_multistep(epoch: usize, cfg: &OptimConfig) -> f64 {
    let passed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    (0..passed).fold(cfg.lr0, |lr, _| lr * cfg.gamma)
}

/// Linear warmup from 0, cosine decay to `lr_floor` at `cosine_end_epoch`,
/// then linear decay to 0 at the final epoch.
pub fn lr_warmup_cosine(epoch: f64, cfg: &OptimConfig) -> f64 {
    let warmup = cfg.warmup_epochs as f64;
    let end = cfg.cosine_end_epoch as f64;
    let total = cfg.epochs as f64;
    if epoch < warmup {
        cfg.lr0 * epoch.max(0.0) / warmup
    } else if epoch <= end {
        let t = if end > warmup { (epoch - warmup) / (end - warmup) } else { 1.0 };
        cfg.lr_floor + (cfg.lr0 - cfg.lr_floor) * 0.5 * (1.0 + (PI * t).cos())
    } else if epoch < total {
        cfg.lr_floor * (total - epoch) / (total - end)
    } else {
        0.0
    }
}

/// Adam moments for every parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected first moment `m̂` of a parameter.
    pub fn first_moment_hat(&self, name: &str, beta1: f64) -> Option<Vec<f64>> {
        let c = 1.0 - beta1.powi(self.t as i32);
        self.m.get(name).map(|m| m.iter().map(|x| x / c).collect())
    }
}

/// One Adam update with bias correction. Gradients missing from `grads` are
/// treated as zero. The whole step is rejected if any gradient is
/// non-finite.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("`{name}`: grad {:?} vs param {:?}", g.shape(), p.shape())));
        }
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}` at element {i} ({})", g.data()[i])));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let wd = cfg.weight_decay;
    for (name, p) in params.iter_mut() {
        let n = p.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let g = grads.get(name).map(Tensor::data);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let mut gi = g.map_or(0.0, |g| g[i]);
            if !cfg.decoupled_weight_decay {
                gi += wd * *w;
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            if cfg.decoupled_weight_decay {
                *w -= lr * wd * *w;
            }
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Everything the training loop needs besides the model and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    /// Feed all four rotations of every image to the pretext task instead
    /// of one random rotation.
    pub all_rotations: bool,
}

impl TrainConfig {
    /// 80-epoch step-decay regime, batch 7×4, margin 0.5.
    pub fn veri() -> Self {
        Self {
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            p: 7,
            k: 4,
            all_rotations: false,
        }
    }

    /// 120-epoch warmup-cosine regime, batch 10×4, margin 0.7.
    pub fn vehicleid() -> Self {
        Self {
            optim: OptimConfig { epochs: 120, schedule: Schedule::WarmupCosine, ..OptimConfig::default() },
            loss: LossConfig { margin: 0.7, ..LossConfig::default() },
            p: 10,
            ..Self::veri()
        }
    }

    /// Short regime for the synthetic desk-scale data: 30 epochs, batch 4×4.
    pub fn desk() -> Self {
        Self {
            optim: OptimConfig { lr0: 1e-3, epochs: 30, milestones: vec![20, 25], ..OptimConfig::default() },
            p: 4,
            k: 4,
            ..Self::veri()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "veri" => Ok(Self::veri()),
            "vehicleid" => Ok(Self::vehicleid()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected veri, vehicleid or desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.loss.weights.validate()?;
        if !(self.loss.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be non-negative, got {}", self.loss.margin)));
        }
        if !(0.0..1.0).contains(&self.loss.smoothing) {
            return Err(Error::Config(format!("smoothing must lie in [0,1), got {}", self.loss.smoothing)));
        }
        if self.p < 2 || self.k == 0 {
            return Err(Error::Config(format!("need P ≥ 2 and K ≥ 1, got P={}, K={}", self.p, self.k)));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L_tri_gb")]
    pub tri_gb: f64,
    #[serde(rename = "L_sce_gb")]
    pub sce_gb: f64,
    #[serde(rename = "L_tri_ab")]
    pub tri_ab: f64,
    #[serde(rename = "L_sce_ab")]
    pub sce_ab: f64,
    #[serde(rename = "L_rot")]
    pub rot: f64,
    pub total: f64,
}

impl StepLog {
    fn new(epoch: usize, step: usize, lr: f64, c: &LossComponents, total: f64) -> Self {
        Self {
            epoch,
            step,
            lr,
            tri_gb: c.tri_gb,
            sce_gb: c.sce_gb,
            tri_ab: c.tri_ab,
            sce_ab: c.sce_ab,
            rot: c.rot,
            total,
        }
    }
}

/// Per-epoch means of the step logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean: LossComponents,
    pub mean_total: f64,
}

/// Training split with identity labels mapped to classifier indices.
#[derive(Clone, Debug)]
pub struct TrainSet<'a> {
    samples: &'a [ReidSample],
    classes: Vec<usize>,
    sampler: PkSampler,
}

impl<'a> TrainSet<'a> {
    pub fn new(samples: &'a [ReidSample], p: usize, k: usize) -> Result<Self> {
        let ids: BTreeMap<usize, usize> = {
            let mut sorted: Vec<usize> = samples.iter().map(|s| s.identity).collect();
            sorted.sort_unstable();
            sorted.dedup();
            sorted.into_iter().enumerate().map(|(c, id)| (id, c)).collect()
        };
        Ok(Self {
            samples,
            classes: samples.iter().map(|s| ids[&s.identity]).collect(),
            sampler: PkSampler::new(samples, p, k)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.sampler.num_identities()
    }

    /// `max(1, ⌊images / (P·K)⌋)`.
    pub fn steps_per_epoch(&self) -> usize {
        (self.samples.len() / self.sampler.batch_size()).max(1)
    }
}

#[derive(Serialize)]
struct BatchDump<'a> {
    epoch: usize,
    step: usize,
    images: Vec<&'a str>,
    classes: Vec<usize>,
    rotations: Vec<usize>,
}

/// Runs one epoch of joint training. Each step samples a P×K batch, augments
/// it for the global and attentional branches, rotates the un-augmented
/// images for the pretext task, evaluates the weighted objective and applies
/// a single Adam update to all parameters. `on_step` sees every step log.
pub fn train_epoch(
    state: &mut ModelState,
    data: &TrainSet<'_>,
    opt: &mut OptState,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut impl Rng,
    mut on_step: impl FnMut(&StepLog),
) -> Result<EpochLog> {
    if data.num_classes() != state.arch.num_identities {
        return Err(Error::Config(format!(
            "model has {} identity classes, training split has {}",
            state.arch.num_identities,
            data.num_classes()
        )));
    }
    let lr = cfg.optim.lr_at(epoch);
    let steps = data.steps_per_epoch();
    let mut sum = LossComponents::default();
    let mut sum_total = 0.0;
    for step in 0..steps {
        let batch = data.sampler.sample(rng);
        let labels: Vec<usize> = batch.iter().map(|&i| data.classes[i]).collect();
        let mut images = Vec::with_capacity(batch.len());
        for &i in &batch {
            images.push(augment(&data.samples[i].image, rng, &cfg.augment)?);
        }
        let mut rotated = Vec::new();
        let mut rot_labels = Vec::new();
        for &i in &batch {
            let sample = &data.samples[i];
            if cfg.all_rotations {
                for k in 0..ROTATIONS {
                    rotated.push(rotate_image(&sample.image, k)?);
                    rot_labels.push(k);
                }
            } else {
                let r = make_rotation_sample(sample, rng)?;
                rotated.push(r.image_rot);
                rot_labels.push(r.pseudo_label);
            }
        }

        let dump = |what: String| {
            let d = BatchDump {
                epoch,
                step,
                images: batch.iter().map(|&i| data.samples[i].name.as_str()).collect(),
                classes: labels.clone(),
                rotations: rot_labels.clone(),
            };
            let json = serde_json::to_string(&d).unwrap_or_default();
            log::error!("non-finite value at epoch {epoch} step {step}: {what}; batch {json}");
            Error::NonFinite(format!("{what} at epoch {epoch} step {step}; last batch: {json}"))
        };

        let (step_log, grads, updates) = {
            let mut fwd = Forward::new(state, Mode::Train, true);
            let x = fwd.input(Tensor::stack(&images)?)?;
            let (gb, shallow) = fwd.global_branch(x)?;
            let (ab, _) = fwd.attention_branch(x, shallow)?;
            let x_rot = fwd.input(Tensor::stack(&rotated)?)?;
            let ssl = fwd.ssl_branch(x_rot)?;
            let nodes = match overall_loss(&mut fwd.graph, &gb, &ab, ssl, &labels, &rot_labels, &cfg.loss) {
                Err(Error::NonFinite(what)) => return Err(dump(what)),
                other => other?,
            };
            let components = nodes.components(&fwd.graph);
            let total = fwd.graph.value(nodes.total).item();
            if !total.is_finite() {
                return Err(dump("total loss".into()));
            }
            let (mut graph, leaves, updates) = fwd.into_parts();
            let g = graph.backward(nodes.total)?;
            let grads: BTreeMap<String, Tensor> =
                leaves.into_iter().filter_map(|(name, id)| g.get(id).map(|t| (name, t.clone()))).collect();
            (StepLog::new(epoch, step, lr, &components, total), grads, updates)
        };
        match adam_step(state.params_mut(), &grads, opt, &cfg.optim, lr) {
            Err(Error::NonFinite(what)) => return Err(dump(what)),
            other => other?,
        }
        state.apply_bn_updates(&updates);

        on_step(&step_log);
        sum.tri_gb += step_log.tri_gb;
        sum.sce_gb += step_log.sce_gb;
        sum.tri_ab += step_log.tri_ab;
        sum.sce_ab += step_log.sce_ab;
        sum.rot += step_log.rot;
        sum_total += step_log.total;
    }
    let n = steps as f64;
    Ok(EpochLog {
        epoch,
        lr,
        steps,
        mean: LossComponents {
            tri_gb: sum.tri_gb / n,
            sce_gb: sum.sce_gb / n,
            tri_ab: sum.tri_ab / n,
            sce_ab: sum.sce_ab / n,
            rot: sum.rot / n,
        },
        mean_total: sum_total / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multistep_values() {
        let cfg = OptimConfig::default();
        assert_eq!(lr_multistep(0, &cfg), 1e-4);
        assert_eq!(lr_multistep(19, &cfg), 1e-4);
        assert!((lr_multistep(79, &cfg) / 1e-7 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_cosine_joins_are_continuous() {
        let cfg = TrainConfig::vehicleid().optim;
        let near = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300);
        assert!(near(lr_warmup_cosine(10.0 - 1e-12, &cfg), lr_warmup_cosine(10.0, &cfg)));
        assert!(near(lr_warmup_cosine(100.0 + 1e-12, &cfg), 1e-7));
        assert_eq!(lr_warmup_cosine(0.0, &cfg), 0.0);
        assert_eq!(lr_warmup_cosine(10.0, &cfg), 1e-4);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![0.3, -1.0]).unwrap())]);
        let before = params.clone();
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut st = OptState::new();
        for _ in 0..3 {
            adam_step(&mut params, &grads, &mut st, &cfg, 1e-3).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(st.steps(), 3);
    }

    #[test]
    fn non_finite_gradient_rejects_the_step() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::zeros(&[1]))]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::full(&[1], f64::NAN))]);
        let mut st = OptState::new();
        let err = adam_step(&mut params, &grads, &mut st, &OptimConfig::default(), 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("`w`")));
        assert_eq!(st.steps(), 0);
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::full(&[1], 2.0))]);
        let cfg = OptimConfig { weight_decay: 0.1, decoupled_weight_decay: true, ..OptimConfig::default() };
        adam_step(&mut params, &BTreeMap::new(), &mut OptState::new(), &cfg, 0.5).unwrap();
        assert!((params["w"].item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn presets() {
        assert_eq!(TrainConfig::preset("veri").unwrap().p * TrainConfig::preset("veri").unwrap().k, 28);
        let v = TrainConfig::preset("vehicleid").unwrap();
        assert_eq!((v.p * v.k, v.loss.margin, v.optim.epochs), (40, 0.7, 120));
        assert!(TrainConfig::preset("desk").unwrap().validate().is_ok());
        assert!(TrainConfig::preset("imagenet").is_err());
    }
}

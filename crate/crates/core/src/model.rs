//! Three-branch re-identification network.
//!
//! * Global branch: stem `P1` (three stride-2 conv stages, output at 1/8
//!   resolution, kept as the shallow features) followed by `P2` (two
//!   stride-1 residual blocks), global average pooling and a BNNeck.
//! * Attentional branch: the attention encoder `E` produces a local feature
//!   map, the ACM turns it into a mask `Q` that reweights every channel of
//!   the shallow features, and a copy `P2′` of `P2` with its own weights
//!   processes the result, followed by its own BNNeck.
//! * Self-supervised branch: `E` (same parameters) on rotated images, two
//!   residual blocks (the first at stride 2), pooling and a cosine classifier
//!   over the four rotations.
//!
//! At inference only the first two branches run; the post-BN features of
//! both are concatenated and L2-normalized.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::acm::{self, AcmConfig, AcmNodes, POSITIVITY_FLOOR};
use crate::autodiff::{BatchStats, BnMode, Graph, NodeId, RunningStats, BN_EPS, BN_MOMENTUM};
use crate::checkpoint::{self, Entries};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of rotation classes predicted by the self-supervised branch.
pub const ROTATIONS: usize = 4;

const L2_EPS: f64 = 1e-12;
const RUNNING_MEAN: &str = "/running_mean";
const RUNNING_VAR: &str = "/running_var";
const RUNNING_BATCHES: &str = "/running_batches";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Side length of the square input images.
    pub input_size: usize,
    /// Widths of the three stem stages followed by the two `P2` blocks.
    pub stage_widths: [usize; 5],
    pub attention_encoder_widths: [usize; 3],
    pub ssl_head_width: usize,
    /// Pooled feature width per branch; equals the last stage width.
    pub feature_dim: usize,
    pub num_identities: usize,
    /// Cosine classifier scale γ.
    pub cosine_scale: f64,
    pub acm: AcmConfig,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stage_widths: [16, 32, 64, 128, 128],
            attention_encoder_widths: [16, 32, 64],
            ssl_head_width: 128,
            feature_dim: 128,
            num_identities: 10,
            cosine_scale: 16.0,
            acm: AcmConfig::default(),
        }
    }
}

impl ArchConfig {
    /// Default widths with the 3×3 neighborhood used on 8×8 attention maps.
    pub fn desk(num_identities: usize) -> Self {
        Self { num_identities, acm: AcmConfig { window: 3 }, ..Self::default() }
    }

    /// A very narrow network on 16×16 inputs, small enough for exhaustive
    /// finite-difference checks.
    pub fn tiny(num_identities: usize) -> Self {
        Self {
            input_size: 16,
            stage_widths: [3, 4, 5, 6, 6],
            attention_encoder_widths: [3, 4, 5],
            ssl_head_width: 5,
            feature_dim: 6,
            num_identities,
            cosine_scale: 16.0,
            acm: AcmConfig { window: 3 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(8) {
            return Err(Error::Config(format!("input size {} must be a positive multiple of 8", self.input_size)));
        }
        if self.stage_widths.contains(&0) || self.attention_encoder_widths.contains(&0) || self.ssl_head_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.feature_dim != self.stage_widths[4] {
            return Err(Error::Config(format!(
                "feature_dim {} must equal the last stage width {}",
                self.feature_dim, self.stage_widths[4]
            )));
        }
        if self.num_identities < 2 {
            return Err(Error::Config("need at least two identities".into()));
        }
        if !(self.cosine_scale > 0.0) {
            return Err(Error::Config("cosine scale must be positive".into()));
        }
        AcmConfig::new(self.acm.window)?;
        Ok(())
    }

    /// Side length of the shallow features and attention maps.
    pub fn attention_size(&self) -> usize {
        self.input_size / 8
    }

    fn to_entries(&self) -> Entries {
        let v = |x: &[f64]| Tensor::new(&[x.len()], x.to_vec()).expect("rank-1");
        let u = |xs: &[usize]| xs.iter().map(|&x| x as f64).collect::<Vec<_>>();
        vec![
            ("arch/input_size".into(), v(&[self.input_size as f64])),
            ("arch/stage_widths".into(), v(&u(&self.stage_widths))),
            ("arch/attention_encoder_widths".into(), v(&u(&self.attention_encoder_widths))),
            ("arch/ssl_head_width".into(), v(&[self.ssl_head_width as f64])),
            ("arch/feature_dim".into(), v(&[self.feature_dim as f64])),
            ("arch/num_identities".into(), v(&[self.num_identities as f64])),
            ("arch/cosine_scale".into(), v(&[self.cosine_scale])),
            ("arch/acm_window".into(), v(&[self.acm.window as f64])),
        ]
    }

    fn from_entries(entries: &[(String, Tensor)], origin: &Path) -> Result<Self> {
        let get = |name: &str| -> Result<&[f64]> {
            checkpoint::find(entries, name)
                .map(|t| t.data())
                .ok_or_else(|| Error::format(origin, format!("checkpoint lacks `{name}`")))
        };
        let one = |name: &str| -> Result<usize> { Ok(get(name)?.first().copied().unwrap_or(0.0) as usize) };
        let arr = |name: &str, out: &mut [usize]| -> Result<()> {
            let d = get(name)?;
            if d.len() != out.len() {
                return Err(Error::format(origin, format!("`{name}` has {} values", d.len())));
            }
            out.iter_mut().zip(d).for_each(|(o, v)| *o = *v as usize);
            Ok(())
        };
        let mut cfg = Self {
            input_size: one("arch/input_size")?,
            ssl_head_width: one("arch/ssl_head_width")?,
            feature_dim: one("arch/feature_dim")?,
            num_identities: one("arch/num_identities")?,
            cosine_scale: get("arch/cosine_scale")?.first().copied().unwrap_or(0.0),
            acm: AcmConfig { window: one("arch/acm_window")? },
            ..Self::default()
        };
        arr("arch/stage_widths", &mut cfg.stage_widths)?;
        arr("arch/attention_encoder_widths", &mut cfg.attention_encoder_widths)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Outputs of the global or attentional branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    /// Pooled features before the BNNeck; used by the triplet loss.
    pub feat_triplet: NodeId,
    /// BNNeck output; used by the classifier and at inference.
    pub feat_bn: NodeId,
    pub logits: NodeId,
}

/// All learnable parameters and batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: ArchConfig,
    params: BTreeMap<String, Tensor>,
    running: BTreeMap<String, RunningStats>,
}

struct Init<'a> {
    rng: ChaCha8Rng,
    params: &'a mut BTreeMap<String, Tensor>,
    running: &'a mut BTreeMap<String, RunningStats>,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut self.rng));
        self.params.insert(name, t);
    }

    fn bn(&mut self, name: &str, channels: usize, shift: bool) {
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        if shift {
            self.params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        }
        self.running.insert(name.to_string(), RunningStats::new(channels));
    }

    fn conv_bn(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        let fan_in = (c_in * k * k) as f64;
        self.normal(format!("{name}.conv.w"), &[c_out, c_in, k, k], (2.0 / fan_in).sqrt());
        self.bn(&format!("{name}.bn"), c_out, true);
    }

    fn residual(&mut self, name: &str, c_in: usize, c_out: usize, stride: usize) {
        self.conv_bn(&format!("{name}.c1"), c_in, c_out, 3);
        self.conv_bn(&format!("{name}.c2"), c_out, c_out, 3);
        if c_in != c_out || stride != 1 {
            self.conv_bn(&format!("{name}.proj"), c_in, c_out, 1);
        }
    }
}

impl ModelState {
    /// Fresh parameters: He-normal convolutions, unit BN scales, small
    /// identity classifiers.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = BTreeMap::new();
        let mut running = BTreeMap::new();
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), params: &mut params, running: &mut running };
        let [s0, s1, s2, s3, s4] = arch.stage_widths;
        let [e0, e1, e2] = arch.attention_encoder_widths;
        let d = arch.feature_dim;

        init.conv_bn("gb.p1.s0", 3, s0, 3);
        init.conv_bn("gb.p1.s1", s0, s1, 3);
        init.conv_bn("gb.p1.s2", s1, s2, 3);
        for p2 in ["gb.p2", "ab.p2"] {
            init.residual(&format!("{p2}.b0"), s2, s3, 1);
            init.residual(&format!("{p2}.b1"), s3, s4, 1);
        }
        init.conv_bn("enc.s0", 3, e0, 3);
        init.conv_bn("enc.s1", e0, e1, 3);
        init.conv_bn("enc.s2", e1, e2, 3);
        init.residual("ssl.b0", e2, arch.ssl_head_width, 2);
        init.residual("ssl.b1", arch.ssl_head_width, arch.ssl_head_width, 1);
        init.normal("ssl.cos.w".into(), &[ROTATIONS, arch.ssl_head_width], 1.0);
        for branch in ["gb", "ab"] {
            init.bn(&format!("{branch}.neck.bn"), d, false);
            init.normal(format!("{branch}.cls.w"), &[d, arch.num_identities], 1e-3);
        }
        Ok(Self { arch, params, running })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Mutable view for optimizers; keys and shapes must be preserved.
    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &BTreeMap<String, RunningStats> {
        &self.running
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// True once every batch-norm layer has seen at least one batch.
    pub fn has_running_stats(&self) -> bool {
        self.running.values().all(RunningStats::is_initialized)
    }

    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) {
        for (name, stats) in updates {
            if let Some(r) = self.running.get_mut(name) {
                r.update(stats, BN_MOMENTUM);
            }
        }
    }

    /// Architecture, parameters and running statistics as container entries.
    pub fn to_entries(&self) -> Entries {
        let mut out = self.arch.to_entries();
        out.extend(self.params.iter().map(|(k, v)| (k.clone(), v.clone())));
        for (name, r) in &self.running {
            let c = r.mean.len();
            out.push((format!("{name}{RUNNING_MEAN}"), Tensor::new(&[c], r.mean.clone()).expect("rank-1")));
            out.push((format!("{name}{RUNNING_VAR}"), Tensor::new(&[c], r.var.clone()).expect("rank-1")));
            out.push((format!("{name}{RUNNING_BATCHES}"), Tensor::new(&[1], vec![r.batches as f64]).expect("rank-1")));
        }
        out
    }

    pub fn from_entries(entries: &[(String, Tensor)], origin: &Path) -> Result<Self> {
        let arch = ArchConfig::from_entries(entries, origin)?;
        // Start from the expected layout so missing or misshapen entries are caught.
        let mut state = Self::new(arch, 0)?;
        let mut seen = 0;
        for (name, t) in entries {
            if name.starts_with("arch/") {
                continue;
            }
            let mismatch = |expected: &[usize]| {
                Error::format(origin, format!("`{name}` has shape {:?}, expected {expected:?}", t.shape()))
            };
            if let Some(stem) = name.strip_suffix(RUNNING_MEAN) {
                let r = state
                    .running
                    .get_mut(stem)
                    .ok_or_else(|| Error::format(origin, format!("unknown entry `{name}`")))?;
                if t.len() != r.mean.len() {
                    return Err(mismatch(&[r.mean.len()]));
                }
                r.mean = t.data().to_vec();
            } else if let Some(stem) = name.strip_suffix(RUNNING_VAR) {
                let r = state
                    .running
                    .get_mut(stem)
                    .ok_or_else(|| Error::format(origin, format!("unknown entry `{name}`")))?;
                if t.len() != r.var.len() {
                    return Err(mismatch(&[r.var.len()]));
                }
                r.var = t.data().to_vec();
            } else if let Some(stem) = name.strip_suffix(RUNNING_BATCHES) {
                let r = state
                    .running
                    .get_mut(stem)
                    .ok_or_else(|| Error::format(origin, format!("unknown entry `{name}`")))?;
                r.batches = t.data().first().copied().unwrap_or(0.0) as u64;
            } else {
                let slot = state
                    .params
                    .get_mut(name)
                    .ok_or_else(|| Error::format(origin, format!("unknown parameter `{name}`")))?;
                if slot.shape() != t.shape() {
                    return Err(mismatch(slot.shape()));
                }
                *slot = t.clone();
                seen += 1;
            }
        }
        if seen != state.params.len() {
            return Err(Error::format(origin, format!("checkpoint holds {seen} of {} parameters", state.params.len())));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&checkpoint::load(path)?, path)
    }
}

/// One recorded forward pass through (parts of) the network.
///
/// Parameters become graph leaves on first use and are reused afterwards, so
/// the encoder shared by the attentional and self-supervised branches is a
/// single set of leaves and receives the sum of both gradients.
pub struct Forward<'s> {
    pub graph: Graph,
    state: &'s ModelState,
    mode: Mode,
    track_grads: bool,
    leaves: HashMap<String, NodeId>,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'s> Forward<'s> {
    pub fn new(state: &'s ModelState, mode: Mode, track_grads: bool) -> Self {
        Self { graph: Graph::new(), state, mode, track_grads, leaves: HashMap::new(), bn_updates: Vec::new() }
    }

    pub fn state(&self) -> &ModelState {
        self.state
    }

    /// Parameter leaves created so far, by name.
    pub fn leaves(&self) -> &HashMap<String, NodeId> {
        &self.leaves
    }

    /// Batch statistics gathered by train-mode batch norms, in call order.
    pub fn bn_updates(&self) -> &[(String, BatchStats)] {
        &self.bn_updates
    }

    pub fn into_parts(self) -> (Graph, HashMap<String, NodeId>, Vec<(String, BatchStats)>) {
        (self.graph, self.leaves, self.bn_updates)
    }

    pub fn input(&mut self, images: Tensor) -> Result<NodeId> {
        let (_, c, h, w) = images.dims4("input")?;
        let s = self.state.arch.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape("input", format!("expected [n,3,{s},{s}] images, got {:?}", images.shape())));
        }
        Ok(self.graph.constant(images))
    }

    fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            return Ok(id);
        }
        let t =
            self.state.param(name).ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))?.clone();
        let id = self.graph.leaf(t, self.track_grads);
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    fn bn(&mut self, name: &str, x: NodeId, shift: bool) -> Result<NodeId> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = if shift { Some(self.p(&format!("{name}.beta"))?) } else { None };
        let mode = match self.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => {
                let r = self
                    .state
                    .running
                    .get(name)
                    .filter(|r| r.is_initialized())
                    .ok_or_else(|| Error::MissingRunningStats(name.to_string()))?;
                BnMode::Eval { mean: &r.mean, var: &r.var }
            }
        };
        let (y, stats) = self.graph.batch_norm(x, gamma, beta, BN_EPS, mode)?;
        if let Some(stats) = stats {
            self.bn_updates.push((name.to_string(), stats));
        }
        Ok(y)
    }

    fn conv_bn(&mut self, name: &str, x: NodeId, stride: usize, relu: bool) -> Result<NodeId> {
        let w = self.p(&format!("{name}.conv.w"))?;
        let k = self.graph.value(w).shape()[2];
        let y = self.graph.conv2d(x, w, stride, k / 2)?;
        let y = self.bn(&format!("{name}.bn"), y, true)?;
        Ok(if relu { self.graph.relu(y) } else { y })
    }

    /// conv-BN-relu-conv-BN plus identity (or 1×1 projection), relu after the sum.
    fn residual(&mut self, name: &str, x: NodeId, stride: usize) -> Result<NodeId> {
        let h = self.conv_bn(&format!("{name}.c1"), x, stride, true)?;
        let h = self.conv_bn(&format!("{name}.c2"), h, 1, false)?;
        let proj = format!("{name}.proj");
        let shortcut = if self.state.param(&format!("{proj}.conv.w")).is_some() {
            self.conv_bn(&proj, x, stride, false)?
        } else {
            x
        };
        let sum = self.graph.add(h, shortcut)?;
        Ok(self.graph.relu(sum))
    }

    /// Bias-free BN followed by a bias-free linear classifier.
    pub fn bnneck(&mut self, prefix: &str, feat: NodeId) -> Result<BranchOutput> {
        let (_, d) = self.graph.value(feat).dims2("bnneck")?;
        if d != self.state.arch.feature_dim {
            return Err(Error::shape(
                "bnneck",
                format!("feature width {d} != configured {}", self.state.arch.feature_dim),
            ));
        }
        let feat_bn = self.bn(&format!("{prefix}.neck.bn"), feat, false)?;
        let w = self.p(&format!("{prefix}.cls.w"))?;
        let logits = self.graph.linear(feat_bn, w, None)?;
        Ok(BranchOutput { feat_triplet: feat, feat_bn, logits })
    }

    /// Global branch; also returns the shallow `P1` features.
    pub fn global_branch(&mut self, x: NodeId) -> Result<(BranchOutput, NodeId)> {
        let h = self.conv_bn("gb.p1.s0", x, 2, true)?;
        let h = self.conv_bn("gb.p1.s1", h, 2, true)?;
        let shallow = self.conv_bn("gb.p1.s2", h, 2, true)?;
        let h = self.residual("gb.p2.b0", shallow, 1)?;
        let h = self.residual("gb.p2.b1", h, 1)?;
        let feat = self.graph.global_avg_pool(h)?;
        Ok((self.bnneck("gb", feat)?, shallow))
    }

    /// Shared attention encoder `E`.
    pub fn encoder(&mut self, x: NodeId) -> Result<NodeId> {
        let h = self.conv_bn("enc.s0", x, 2, true)?;
        let h = self.conv_bn("enc.s1", h, 2, true)?;
        self.conv_bn("enc.s2", h, 2, false)
    }

    /// Attention mask `Q[n,h,w]` of the images in `x`.
    pub fn attention(&mut self, x: NodeId) -> Result<AcmNodes> {
        let e = self.encoder(x)?;
        let sp = self.graph.softplus(e);
        let local = self.graph.add_scalar(sp, POSITIVITY_FLOOR);
        acm::acm_forward(&mut self.graph, local, self.state.arch.acm)
    }

    /// Attentional branch: shallow features reweighted by the mask, then `P2′`.
    pub fn attention_branch(&mut self, x: NodeId, shallow: NodeId) -> Result<(BranchOutput, AcmNodes)> {
        let mask = self.attention(x)?;
        let (qs, ss) = (self.graph.value(mask.q).shape(), self.graph.value(shallow).shape());
        if ss.len() != 4 || qs[1..] != ss[2..] {
            return Err(Error::shape(
                "attention_branch",
                format!("mask {qs:?} does not match shallow features {ss:?}"),
            ));
        }
        let weighted = self.graph.mask_channels(shallow, mask.q)?;
        let h = self.residual("ab.p2.b0", weighted, 1)?;
        let h = self.residual("ab.p2.b1", h, 1)?;
        let feat = self.graph.global_avg_pool(h)?;
        Ok((self.bnneck("ab", feat)?, mask))
    }

    /// `γ · cos(feat_i, w_j)` with eps-guarded norms.
    pub fn cosine_classifier(&mut self, feat: NodeId, weights: NodeId, scale: f64) -> Result<NodeId> {
        let f = self.graph.l2_normalize(feat, L2_EPS)?;
        let w = self.graph.l2_normalize(weights, L2_EPS)?;
        let wt = self.graph.transpose(w)?;
        let cos = self.graph.matmul(f, wt)?;
        Ok(self.graph.scale(cos, scale))
    }

    /// Rotation logits `[n,4]` for already rotated images.
    pub fn ssl_branch(&mut self, x_rot: NodeId) -> Result<NodeId> {
        let e = self.encoder(x_rot)?;
        let h = self.residual("ssl.b0", e, 2)?;
        let h = self.residual("ssl.b1", h, 1)?;
        let feat = self.graph.global_avg_pool(h)?;
        let w = self.p("ssl.cos.w")?;
        self.cosine_classifier(feat, w, self.state.arch.cosine_scale)
    }

    /// Unit-norm concatenation of both post-BN branch features.
    pub fn reid_feature(&mut self, x: NodeId) -> Result<NodeId> {
        let (gb, shallow) = self.global_branch(x)?;
        let (ab, _) = self.attention_branch(x, shallow)?;
        let joint = self.graph.concat(gb.feat_bn, ab.feat_bn)?;
        self.graph.l2_normalize(joint, L2_EPS)
    }
}

const EVAL_CHUNK: usize = 32;

fn eval_chunks(
    state: &ModelState,
    images: &Tensor,
    mut run: impl FnMut(&mut Forward<'_>, NodeId) -> Result<NodeId>,
) -> Result<Tensor> {
    let (n, ..) = images.dims4("eval")?;
    let mut parts = Vec::new();
    let mut shape = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let mut fwd = Forward::new(state, Mode::Eval, false);
        let x = fwd.input(images.select(&idx))?;
        let out = run(&mut fwd, x)?;
        let v = fwd.graph.value(out);
        shape = v.shape().to_vec();
        parts.extend_from_slice(v.data());
    }
    shape[0] = n;
    Tensor::new(&shape, parts)
}

/// Inference features `[n, 2d]` (eval mode, self-supervised branch unused).
pub fn extract_reid_features(state: &ModelState, images: &Tensor) -> Result<Tensor> {
    eval_chunks(state, images, |f, x| f.reid_feature(x))
}

/// Eval-mode rotation logits `[n,4]`.
pub fn predict_rotation(state: &ModelState, images: &Tensor) -> Result<Tensor> {
    eval_chunks(state, images, |f, x| f.ssl_branch(x))
}

/// Eval-mode attention masks `[n,h,w]`.
pub fn attention_masks(state: &ModelState, images: &Tensor) -> Result<Tensor> {
    eval_chunks(state, images, |f, x| Ok(f.attention(x)?.q))
}

/// Runs every branch once in train mode without gradients and folds the
/// batch statistics into the running estimates.
pub fn calibrate_batch_norm(state: &mut ModelState, images: &Tensor) -> Result<()> {
    let updates = {
        let mut fwd = Forward::new(state, Mode::Train, false);
        let x = fwd.input(images.clone())?;
        let (_, shallow) = fwd.global_branch(x)?;
        fwd.attention_branch(x, shallow)?;
        fwd.ssl_branch(x)?;
        fwd.into_parts().2
    };
    state.apply_bn_updates(&updates);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_validation() {
        assert!(ArchConfig::desk(10).validate().is_ok());
        assert!(ArchConfig { input_size: 60, ..ArchConfig::desk(10) }.validate().is_err());
        assert!(ArchConfig { feature_dim: 64, ..ArchConfig::desk(10) }.validate().is_err());
        assert!(ArchConfig::tiny(1).validate().is_err());
    }

    #[test]
    fn bnneck_and_classifiers_are_bias_free() {
        let s = ModelState::new(ArchConfig::tiny(3), 1).unwrap();
        for b in ["gb", "ab"] {
            assert!(s.param(&format!("{b}.neck.bn.gamma")).is_some());
            assert!(s.param(&format!("{b}.neck.bn.beta")).is_none());
            assert!(s.param(&format!("{b}.cls.b")).is_none());
        }
        assert!(s.params().keys().all(|k| !k.starts_with("ssl.cos.") || k == "ssl.cos.w"));
    }

    #[test]
    fn p2_copies_share_shape_not_storage() {
        let s = ModelState::new(ArchConfig::tiny(3), 1).unwrap();
        let gb: Vec<_> = s.params().iter().filter(|(k, _)| k.starts_with("gb.p2.")).collect();
        let ab: Vec<_> = s.params().iter().filter(|(k, _)| k.starts_with("ab.p2.")).collect();
        assert_eq!(gb.len(), ab.len());
        for ((kg, tg), (ka, ta)) in gb.iter().zip(&ab) {
            assert_eq!(&kg[2..], &ka[2..]);
            assert_eq!(tg.shape(), ta.shape());
        }
        let w = "gb.p2.b0.c1.conv.w";
        assert_ne!(s.param(w), s.param(&w.replacen("gb", "ab", 1)));
    }

    #[test]
    fn eval_before_stats_fails() {
        let s = ModelState::new(ArchConfig::tiny(3), 1).unwrap();
        let x = Tensor::zeros(&[2, 3, 16, 16]);
        assert!(matches!(extract_reid_features(&s, &x), Err(Error::MissingRunningStats(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ModelState::new(ArchConfig::tiny(3), 5).unwrap();
        calibrate_batch_norm(&mut s, &Tensor::from_fn(&[2, 3, 16, 16], |i| (i % 7) as f64 / 7.0)).unwrap();
        let back = ModelState::from_entries(&s.to_entries(), Path::new("mem")).unwrap();
        assert_eq!(back, s);
    }
}

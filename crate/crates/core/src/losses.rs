//! Training objectives: batch-hard triplet loss, label-smoothed
//! cross-entropy, the rotation pretext loss and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::BranchOutput;
use crate::tensor::Tensor;

/// Label smoothing used for the identity classifiers.
pub const DEFAULT_SMOOTHING: f64 = 0.1;

/// Weights of the five loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub tri_gb: f64,
    pub sce_gb: f64,
    pub tri_ab: f64,
    pub sce_ab: f64,
    pub rot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { tri_gb: 0.5, sce_gb: 0.5, tri_ab: 0.5, sce_ab: 0.5, rot: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.tri_gb, self.sce_gb, self.tri_ab, self.sce_ab, self.rot];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Weighted total of already evaluated components.
    pub fn combine(&self, c: &LossComponents) -> f64 {
        self.tri_gb * c.tri_gb
            + self.sce_gb * c.sce_gb
            + self.tri_ab * c.tri_ab
            + self.sce_ab * c.sce_ab
            + self.rot * c.rot
    }
}

/// Unweighted values of each loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub tri_gb: f64,
    pub sce_gb: f64,
    pub tri_ab: f64,
    pub sce_ab: f64,
    pub rot: f64,
}

/// Node ids of every term of one overall-loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub tri_gb: NodeId,
    pub sce_gb: NodeId,
    pub tri_ab: NodeId,
    pub sce_ab: NodeId,
    pub rot: NodeId,
}

impl LossNodes {
    pub fn components(&self, graph: &Graph) -> LossComponents {
        let v = |id| graph.value(id).item();
        LossComponents {
            tri_gb: v(self.tri_gb),
            sce_gb: v(self.sce_gb),
            tri_ab: v(self.tri_ab),
            sce_ab: v(self.sce_ab),
            rot: v(self.rot),
        }
    }
}

/// Options of the overall objective besides the weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Triplet margin τ.
    pub margin: f64,
    pub smoothing: f64,
    /// Mine triplets from the union of global and attentional features
    /// instead of each branch separately.
    pub mixed_triplet_pool: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), margin: 0.5, smoothing: DEFAULT_SMOOTHING, mixed_triplet_pool: false }
    }
}

/// Features and identity labels for triplet mining.
#[derive(Clone, Debug)]
pub struct TripletBatch<'a> {
    pub features: &'a Tensor,
    pub labels: &'a [usize],
}

/// Hardest positive and negative chosen for one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletChoice {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// Whether the hinge is open (positive loss), i.e. gradients flow.
    pub active: bool,
    /// Number of anchors the loss is averaged over.
    pub(crate) anchors: usize,
}

fn row_distance(x: &Tensor, i: usize, j: usize) -> f64 {
    x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss over the anchors of a batch: for each anchor the
/// farthest positive and closest negative in Euclidean distance, hinge
/// `[τ + d(a,p) − d(a,n)]₊`, averaged over anchors.
pub fn hard_triplet_loss(batch: &TripletBatch<'_>, margin: f64) -> Result<f64> {
    let anchors: Vec<usize> = (0..batch.labels.len()).collect();
    hard_triplet_forward(batch.features, batch.labels, &anchors, margin).map(|(l, _)| l)
}

pub(crate) fn hard_triplet_forward(
    x: &Tensor,
    labels: &[usize],
    anchors: &[usize],
    margin: f64,
) -> Result<(f64, Vec<TripletChoice>)> {
    let (n, _) = x.dims2("hard_triplet_loss")?;
    if labels.len() != n {
        return Err(Error::shape("hard_triplet_loss", format!("{} labels for {n} rows", labels.len())));
    }
    if anchors.is_empty() {
        return Err(Error::shape("hard_triplet_loss", "no anchors"));
    }
    let mut choices = Vec::with_capacity(anchors.len());
    let mut total = 0.0;
    for &a in anchors {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = row_distance(x, a, j);
            if labels[j] == labels[a] {
                if hardest_pos.is_none_or(|(_, best)| d > best) {
                    hardest_pos = Some((j, d));
                }
            } else if hardest_neg.is_none_or(|(_, best)| d < best) {
                hardest_neg = Some((j, d));
            }
        }
        let (Some((p, dp)), Some((q, dn))) = (hardest_pos, hardest_neg) else {
            return Err(Error::Data(format!(
                "anchor {a} (identity {}) needs at least one positive and one negative in the batch",
                labels[a]
            )));
        };
        let hinge = margin + dp - dn;
        let active = hinge > 0.0;
        if active {
            total += hinge;
        }
        choices.push(TripletChoice { anchor: a, positive: p, negative: q, active, anchors: anchors.len() });
    }
    Ok((total / anchors.len() as f64, choices))
}

pub(crate) fn hard_triplet_backward(x: &Tensor, choices: &[TripletChoice], dy: f64, dx: &mut [f64]) {
    let d = x.shape()[1];
    // d‖a−b‖/da = (a−b)/‖a−b‖, taken as zero at coincident points.
    let mut push = |i: usize, j: usize, coeff: f64| {
        let dist = row_distance(x, i, j);
        if dist == 0.0 {
            return;
        }
        let (ri, rj) = (x.row(i), x.row(j));
        for k in 0..d {
            let g = coeff * (ri[k] - rj[k]) / dist;
            dx[i * d + k] += g;
            dx[j * d + k] -= g;
        }
    };
    for c in choices.iter().filter(|c| c.active) {
        let scale = dy / c.anchors as f64;
        push(c.anchor, c.positive, scale);
        push(c.anchor, c.negative, -scale);
    }
}

/// Mean label-smoothed cross-entropy; targets are `1−ε+ε/C` on the true
/// class and `ε/C` elsewhere.
pub fn smoothed_ce(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    smoothed_ce_forward(logits, labels, smoothing).map(|(l, _, _)| l)
}

/// Plain cross-entropy over the four rotation classes.
pub fn rotation_loss(logits: &Tensor, rot_labels: &[usize]) -> Result<f64> {
    let (_, c) = logits.dims2("rotation_loss")?;
    if c != 4 {
        return Err(Error::shape("rotation_loss", format!("expected 4 rotation classes, got {c}")));
    }
    smoothed_ce(logits, rot_labels, 0.0)
}

#[allow(clippy::type_complexity)]
pub(crate) fn smoothed_ce_forward(
    logits: &Tensor,
    labels: &[usize],
    smoothing: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (n, c) = logits.dims2("cross_entropy")?;
    if c < 2 {
        return Err(Error::shape("cross_entropy", "need at least two classes"));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::domain("cross_entropy", format!("smoothing must be in [0,1), got {smoothing}")));
    }
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::domain("cross_entropy", format!("label {bad} out of range for {c} classes")));
    }
    let off = smoothing / c as f64;
    let mut targets = vec![off; n * c];
    let mut probs = vec![0.0; n * c];
    let mut total = 0.0;
    for i in 0..n {
        targets[i * c + labels[i]] = 1.0 - smoothing + off;
        let row = logits.row(i);
        let arg = (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        let peak = row[arg];
        // ln Σ exp(z − peak) = ln(1 + rest); ln_1p keeps confident rows exact.
        let rest: f64 = (0..c).filter(|&j| j != arg).map(|j| (row[j] - peak).exp()).sum();
        let log_norm = rest.ln_1p();
        for j in 0..c {
            let logp = (row[j] - peak) - log_norm;
            probs[i * c + j] = logp.exp();
            total -= targets[i * c + j] * logp;
        }
    }
    Ok((total / n as f64, targets, probs))
}

pub(crate) fn smoothed_ce_backward(targets: &[f64], probs: &[f64], n: usize, dy: f64, dl: &mut [f64]) {
    let s = dy / n as f64;
    for ((g, p), q) in dl.iter_mut().zip(probs).zip(targets) {
        *g += s * (p - q);
    }
}

/// Records the weighted overall objective on `graph`.
///
/// Triplet terms use each branch's pre-BN features and classification terms
/// use the post-BN logits. With `mixed_triplet_pool`, both triplet terms mine
/// from the stacked global+attentional features; each still averages over
/// its own branch's anchors.
pub fn overall_loss(
    graph: &mut Graph,
    gb: &BranchOutput,
    ab: &BranchOutput,
    ssl_logits: NodeId,
    labels: &[usize],
    rot_labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossNodes> {
    cfg.weights.validate()?;
    let n = labels.len();
    let anchors: Vec<usize> = (0..n).collect();
    let (tri_gb, tri_ab) = if cfg.mixed_triplet_pool {
        let pool = graph.stack_rows(gb.feat_triplet, ab.feat_triplet)?;
        let pool_labels: Vec<usize> = labels.iter().chain(labels).copied().collect();
        let ab_anchors: Vec<usize> = (n..2 * n).collect();
        (
            graph.hard_triplet(pool, &pool_labels, &anchors, cfg.margin)?,
            graph.hard_triplet(pool, &pool_labels, &ab_anchors, cfg.margin)?,
        )
    } else {
        (
            graph.hard_triplet(gb.feat_triplet, labels, &anchors, cfg.margin)?,
            graph.hard_triplet(ab.feat_triplet, labels, &anchors, cfg.margin)?,
        )
    };
    let sce_gb = graph.smoothed_cross_entropy(gb.logits, labels, cfg.smoothing)?;
    let sce_ab = graph.smoothed_cross_entropy(ab.logits, labels, cfg.smoothing)?;
    let (_, rot_classes) = graph.value(ssl_logits).dims2("rotation_loss")?;
    if rot_classes != 4 {
        return Err(Error::shape("rotation_loss", format!("expected 4 rotation classes, got {rot_classes}")));
    }
    let rot = graph.smoothed_cross_entropy(ssl_logits, rot_labels, 0.0)?;

    let w = cfg.weights;
    let terms = [(tri_gb, w.tri_gb), (sce_gb, w.sce_gb), (tri_ab, w.tri_ab), (sce_ab, w.sce_ab), (rot, w.rot)];
    for (id, name) in terms.iter().map(|t| t.0).zip(["L_tri_gb", "L_sce_gb", "L_tri_ab", "L_sce_ab", "L_rot"]) {
        if !graph.value(id).item().is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let mut total = graph.scale(terms[0].0, terms[0].1);
    for &(id, weight) in &terms[1..] {
        let weighted = graph.scale(id, weight);
        total = graph.add(total, weighted)?;
    }
    Ok(LossNodes { total, tri_gb, sce_gb, tri_ab, sce_ab, rot })
}

//! Attention computing module.
//!
//! A positive local feature map `L[c,h,w]` is turned into a spatial
//! attention mask `Q[h,w]` in three steps:
//!
//! 1. `M(k,u,v) = exp L(k,u,v) / Σ_{(m,n)∈N(u,v)} exp L(k,m,n)`, a per-channel
//!    softmax over the `K×K` window around `(u,v)`. Windows are truncated at
//!    the border, so only in-bounds neighbors (center included) contribute.
//! 2. `G(k,u,v) = L(k,u,v) / max_t L(t,u,v)`, a channel-wise ratio to the
//!    strongest response at each location.
//! 3. `Q̃(u,v) = max_t M(t,u,v)·G(t,u,v)` and `Q = Q̃ / ΣQ̃`.
//!
//! Channel maxima break ties toward the lowest channel index, both for the
//! value and for routing gradients.
//!
//! Every step is also a differentiable [`Graph`] primitive operating on a
//! batch `[n,c,h,w]`; [`acm_forward`] wires them together.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added after the softplus so every entry of `L` is strictly positive.
pub const POSITIVITY_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcmConfig {
    /// Side length of the square neighborhood; odd.
    pub window: usize,
}

impl AcmConfig {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 || window.is_multiple_of(2) {
            return Err(Error::Config(format!("ACM neighborhood must be odd and positive, got {window}")));
        }
        Ok(Self { window })
    }
}

impl Default for AcmConfig {
    fn default() -> Self {
        Self { window: 7 }
    }
}

/// A strictly positive `[c,h,w]` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeatureMap(Tensor);

impl LocalFeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims3("local feature map")?;
        if let Some(bad) = values.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::domain("local feature map", format!("entries must be positive, found {bad}")));
        }
        Ok(Self(values))
    }

    /// Maps arbitrary activations into a valid feature map via
    /// `softplus(x) + 1e-6`.
    pub fn from_activations(x: &Tensor) -> Result<Self> {
        Self::new(x.map(|v| crate::autodiff::softplus(v) + POSITIVITY_FLOOR))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    fn batched(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.0.shape());
        self.0.clone().reshape(&shape).expect("same length")
    }
}

/// Normalized attention mask and the intermediates that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    /// `[h,w]`, nonnegative, sums to one.
    pub q: Tensor,
    /// Neighborhood softmax `M[c,h,w]`.
    pub m: Tensor,
    /// Channel suppression `G[c,h,w]`.
    pub g: Tensor,
    /// Unnormalized mask `Q̃[h,w]`.
    pub q_tilde: Tensor,
}

/// Node ids of one batched ACM evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AcmNodes {
    pub m: NodeId,
    pub g: NodeId,
    pub q_tilde: NodeId,
    pub q: NodeId,
}

/// Records the ACM on `local[n,c,h,w]` (already positive) and returns the
/// node ids of every stage; `q` has shape `[n,h,w]`.
pub fn acm_forward(graph: &mut Graph, local: NodeId, cfg: AcmConfig) -> Result<AcmNodes> {
    let m = graph.neighborhood_softmax(local, cfg.window)?;
    let g = graph.channel_nms(local)?;
    let mg = graph.mul(m, g)?;
    let q_tilde = graph.channel_max(mg)?;
    let q = graph.spatial_normalize(q_tilde)?;
    Ok(AcmNodes { m, g, q_tilde, q })
}

/// Neighborhood softmax of a single feature map.
pub fn neighborhood_softmax(local: &LocalFeatureMap, cfg: AcmConfig) -> Result<Tensor> {
    let (m, _) = neighborhood_softmax_forward(&local.batched(), cfg.window)?;
    m.reshape(local.0.shape())
}

/// Channel non-maximum suppression of a single feature map.
pub fn channel_nms(local: &LocalFeatureMap) -> Result<Tensor> {
    let (g, _) = channel_nms_forward(&local.batched())?;
    g.reshape(local.0.shape())
}

/// Full mask computation for a single feature map, keeping intermediates.
pub fn attention_mask(local: &LocalFeatureMap, cfg: AcmConfig) -> Result<AttentionMask> {
    let (c, h, w) = local.0.dims3("attention_mask")?;
    let mut graph = Graph::new();
    let x = graph.constant(local.batched());
    let nodes = acm_forward(&mut graph, x, cfg)?;
    let take = |id: NodeId, shape: &[usize]| graph.value(id).clone().reshape(shape);
    Ok(AttentionMask {
        q: take(nodes.q, &[h, w])?,
        m: take(nodes.m, &[c, h, w])?,
        g: take(nodes.g, &[c, h, w])?,
        q_tilde: take(nodes.q_tilde, &[h, w])?,
    })
}

/// Inclusive index range of the truncated window around `center`.
fn window_span(center: usize, radius: usize, extent: usize) -> std::ops::RangeInclusive<usize> {
    center.saturating_sub(radius)..=(center + radius).min(extent - 1)
}

pub(crate) fn neighborhood_softmax_forward(x: &Tensor, window: usize) -> Result<(Tensor, Vec<f64>)> {
    let (n, c, h, w) = x.dims4("neighborhood_softmax")?;
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::domain("neighborhood_softmax", format!("window must be odd, got {window}")));
    }
    let r = window / 2;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut lse = vec![0.0; src.len()];
    for plane_idx in 0..n * c {
        let plane = &src[plane_idx * h * w..(plane_idx + 1) * h * w];
        for u in 0..h {
            for v in 0..w {
                let mut peak = f64::NEG_INFINITY;
                for mu in window_span(u, r, h) {
                    for nv in window_span(v, r, w) {
                        peak = peak.max(plane[mu * w + nv]);
                    }
                }
                let mut s = 0.0;
                for mu in window_span(u, r, h) {
                    for nv in window_span(v, r, w) {
                        s += (plane[mu * w + nv] - peak).exp();
                    }
                }
                let i = plane_idx * h * w + u * w + v;
                lse[i] = peak + s.ln();
                out[i] = (plane[u * w + v] - lse[i]).exp();
            }
        }
    }
    Ok((Tensor::new(x.shape(), out)?, lse))
}

/// `∂/∂L(q) = dM(q)·M(q) − Σ_{p∈N(q)} dM(p)·M(p)·exp(L(q) − lse(p))`; the
/// truncated square window is symmetric, so `q ∈ N(p) ⇔ p ∈ N(q)`.
pub(crate) fn neighborhood_softmax_backward(
    x: &Tensor,
    m: &Tensor,
    lse: &[f64],
    window: usize,
    dm: &[f64],
    dx: &mut [f64],
) {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let r = window / 2;
    let (src, mv) = (x.data(), m.data());
    for plane_idx in 0..planes {
        let base = plane_idx * h * w;
        for u in 0..h {
            for v in 0..w {
                let q = base + u * w + v;
                let mut acc = dm[q] * mv[q];
                for pu in window_span(u, r, h) {
                    for pv in window_span(v, r, w) {
                        let p = base + pu * w + pv;
                        acc -= dm[p] * mv[p] * (src[q] - lse[p]).exp();
                    }
                }
                dx[q] += acc;
            }
        }
    }
}

/// Lowest channel index attaining the maximum at each `(batch, location)`.
fn channel_argmax(x: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("channel max")?;
    let hw = h * w;
    let d = x.data();
    let mut arg = vec![0; n * hw];
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for t in 1..c {
                if d[(b * c + t) * hw + p] > d[(b * c + best) * hw + p] {
                    best = t;
                }
            }
            arg[b * hw + p] = best;
        }
    }
    Ok((n, c, hw, arg))
}

pub(crate) fn channel_nms_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if let Some(bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::domain("channel_nms", format!("input must be positive, found {bad}")));
    }
    let (n, c, hw, arg) = channel_argmax(x)?;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for b in 0..n {
        for p in 0..hw {
            let peak = d[(b * c + arg[b * hw + p]) * hw + p];
            for t in 0..c {
                let i = (b * c + t) * hw + p;
                // The winner is exactly one, not a rounded quotient.
                out[i] = if t == arg[b * hw + p] { 1.0 } else { d[i] / peak };
            }
        }
    }
    Ok((Tensor::new(x.shape(), out)?, arg))
}

pub(crate) fn channel_nms_backward(x: &Tensor, arg: &[usize], dg: &[f64], dx: &mut [f64]) {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = x.data();
    for b in 0..n {
        for p in 0..hw {
            let win = arg[b * hw + p];
            let wi = (b * c + win) * hw + p;
            let peak = d[wi];
            let mut to_peak = 0.0;
            for t in 0..c {
                let i = (b * c + t) * hw + p;
                if t == win {
                    continue;
                }
                dx[i] += dg[i] / peak;
                to_peak -= dg[i] * d[i] / (peak * peak);
            }
            // G at the winner is identically one.
            dx[wi] += to_peak;
        }
    }
}

pub(crate) fn channel_max_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, hw, arg) = channel_argmax(x)?;
    let s = x.shape();
    let d = x.data();
    let out = (0..n * hw).map(|i| d[((i / hw) * c + arg[i]) * hw + i % hw]).collect();
    Ok((Tensor::new(&[n, s[2], s[3]], out)?, arg))
}

pub(crate) fn channel_max_backward(x: &Tensor, arg: &[usize], dy: &[f64], dx: &mut [f64]) {
    let s = x.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    for (i, d) in dy.iter().enumerate() {
        dx[((i / hw) * c + arg[i]) * hw + i % hw] += d;
    }
}

pub(crate) fn spatial_normalize_forward(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (n, h, w) = x.dims3("spatial_normalize")?;
    let hw = h * w;
    let sums: Vec<f64> = x.data().chunks(hw).map(|p| p.iter().sum()).collect();
    if let Some(bad) = sums.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::domain("spatial_normalize", format!("map sum must be positive, got {bad}")));
    }
    let out = x.data().iter().enumerate().map(|(i, v)| v / sums[i / hw]).collect();
    Ok((Tensor::new(&[n, h, w], out)?, sums))
}

pub(crate) fn spatial_normalize_backward(q: &Tensor, sums: &[f64], dq: &[f64], dx: &mut [f64]) {
    let s = q.shape();
    let hw = s[1] * s[2];
    for (b, sum) in sums.iter().enumerate() {
        let range = b * hw..(b + 1) * hw;
        let qb = &q.data()[range.clone()];
        let dqb = &dq[range.clone()];
        let dot: f64 = qb.iter().zip(dqb).map(|(a, b)| a * b).sum();
        for (g, d) in dx[range].iter_mut().zip(dqb) {
            *g += (d - dot) / sum;
        }
    }
}

pub(crate) fn mask_channels_forward(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("mask_channels")?;
    if mask.shape() != [n, h, w] {
        return Err(Error::shape(
            "mask_channels",
            format!("mask {:?} does not match features {:?}", mask.shape(), x.shape()),
        ));
    }
    let hw = h * w;
    let (xd, md) = (x.data(), mask.data());
    let out = (0..xd.len()).map(|i| xd[i] * md[(i / (c * hw)) * hw + i % hw]).collect();
    Tensor::new(x.shape(), out)
}

pub(crate) fn mask_channels_backward(
    x: &Tensor,
    mask: &Tensor,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dmask: Option<&mut [f64]>,
) {
    let s = x.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let (xd, md) = (x.data(), mask.data());
    let mi = |i: usize| (i / (c * hw)) * hw + i % hw;
    if let Some(dx) = dx {
        for i in 0..dy.len() {
            dx[i] += dy[i] * md[mi(i)];
        }
    }
    if let Some(dm) = dmask {
        for i in 0..dy.len() {
            dm[mi(i)] += dy[i] * xd[i];
        }
    }
}

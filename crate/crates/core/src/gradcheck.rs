//! Central-difference verification of reverse-mode gradients.
//!
//! Each check builds a scalar function of one or more tensors, differentiates
//! it once with [`Graph::backward`], and compares every coordinate against
//! `(f(x+h) − f(x−h)) / 2h`. A coordinate whose perturbations change a
//! piecewise choice (ReLU sign, argmax, mined triplet, hinge activity) sits
//! on a kink where the derivative does not exist; it is counted as skipped
//! rather than compared.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acm::{acm_forward, AcmConfig};
use crate::autodiff::{BnMode, Graph, NodeId, BN_EPS};
use crate::data::rotate_image;
use crate::error::{Error, Result};
use crate::losses::{overall_loss, LossConfig};
use crate::model::{ArchConfig, Forward, Mode, ModelState};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so coordinates whose true
/// derivative vanishes are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates on a kink.
    pub skipped: usize,
    /// `(tensor, index, analytic, numeric)` of the largest error.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl CheckResult {
    fn new(name: &str) -> Self {
        Self { name: name.to_string(), max_rel_error: 0.0, checked: 0, skipped: 0, worst: None }
    }

    fn record(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((tensor.to_string(), index, analytic, numeric));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

type Build<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a;

fn evaluate(build: &Build<'_>, inputs: &[Tensor]) -> Result<(f64, u64)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    let v = g.value(root);
    if v.len() != 1 {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok((v.item(), g.branch_signature()))
}

/// Compares analytic and numeric gradients of `build` with respect to every
/// coordinate of every input.
pub fn check(name: &str, inputs: &[Tensor], build: &Build<'_>) -> Result<CheckResult> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    let base_sig = g.branch_signature();
    let grads = g.backward(root)?;
    let mut result = CheckResult::new(name);
    let mut work = inputs.to_vec();
    for (t, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("param leaf").clone();
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + STEP;
            let (fp, sp) = evaluate(build, &work)?;
            work[t].data_mut()[i] = orig - STEP;
            let (fm, sm) = evaluate(build, &work)?;
            work[t].data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                result.skipped += 1;
                continue;
            }
            result.record(&format!("input{t}"), i, analytic.data()[i], (fp - fm) / (2.0 * STEP));
        }
    }
    Ok(result)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.1..2.0))
}

/// `Σ out ⊙ w` for a fixed random `w`, turning any output into a scalar with
/// a generic upstream gradient.
fn project(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = g.constant(randn(&mut rng, g.value(out).shape()));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Every differentiable primitive, on small random inputs.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, build: &Build<'_>| -> Result<()> {
        out.push(check(name, &inputs, build)?);
        Ok(())
    };
    let s = seed;

    run("add", vec![randn(r, &[3, 4]), randn(r, &[3, 4])], &|g, x| {
        let y = g.add(x[0], x[1])?;
        project(g, y, s)
    })?;
    run("sub", vec![randn(r, &[3, 4]), randn(r, &[3, 4])], &|g, x| {
        let y = g.sub(x[0], x[1])?;
        project(g, y, s)
    })?;
    run("mul", vec![randn(r, &[3, 4]), randn(r, &[3, 4])], &|g, x| {
        let y = g.mul(x[0], x[1])?;
        project(g, y, s)
    })?;
    run("scale", vec![randn(r, &[5])], &|g, x| {
        let y = g.scale(x[0], -2.5);
        project(g, y, s)
    })?;
    run("add_scalar", vec![randn(r, &[5])], &|g, x| {
        let y = g.add_scalar(x[0], 0.7);
        project(g, y, s)
    })?;
    run("relu", vec![randn(r, &[4, 5])], &|g, x| {
        let y = g.relu(x[0]);
        project(g, y, s)
    })?;
    run("exp", vec![randn(r, &[6])], &|g, x| {
        let y = g.exp(x[0]);
        project(g, y, s)
    })?;
    run("log", vec![positive(r, &[6])], &|g, x| {
        let y = g.log(x[0])?;
        project(g, y, s)
    })?;
    run("neg", vec![randn(r, &[6])], &|g, x| {
        let y = g.neg(x[0]);
        project(g, y, s)
    })?;
    run("softplus", vec![Tensor::from_fn(&[8], |_| r.random_range(-30.0..30.0))], &|g, x| {
        let y = g.softplus(x[0]);
        project(g, y, s)
    })?;
    run("matmul", vec![randn(r, &[3, 4]), randn(r, &[4, 5])], &|g, x| {
        let y = g.matmul(x[0], x[1])?;
        project(g, y, s)
    })?;
    run("add_row_bias", vec![randn(r, &[3, 4]), randn(r, &[4])], &|g, x| {
        let y = g.add_row_bias(x[0], x[1])?;
        project(g, y, s)
    })?;
    run("linear", vec![randn(r, &[3, 4]), randn(r, &[4, 2]), randn(r, &[2])], &|g, x| {
        let y = g.linear(x[0], x[1], Some(x[2]))?;
        project(g, y, s)
    })?;
    run("transpose", vec![randn(r, &[3, 4])], &|g, x| {
        let y = g.transpose(x[0])?;
        project(g, y, s)
    })?;
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
        run(
            &format!("conv2d_s{stride}_p{pad}_k{k}"),
            vec![randn(r, &[2, 3, 6, 5]), randn(r, &[4, 3, k, k])],
            &move |g, x| {
                let y = g.conv2d(x[0], x[1], stride, pad)?;
                project(g, y, s)
            },
        )?;
    }
    run("batch_norm_train_4d", vec![randn(r, &[3, 2, 3, 3]), positive(r, &[2]), randn(r, &[2])], &|g, x| {
        let (y, _) = g.batch_norm(x[0], x[1], Some(x[2]), BN_EPS, BnMode::Train)?;
        project(g, y, s)
    })?;
    run("batch_norm_train_2d_no_shift", vec![randn(r, &[5, 3]), positive(r, &[3])], &|g, x| {
        let (y, _) = g.batch_norm(x[0], x[1], None, BN_EPS, BnMode::Train)?;
        project(g, y, s)
    })?;
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 0.9]);
    run("batch_norm_eval", vec![randn(r, &[4, 3]), positive(r, &[3]), randn(r, &[3])], &|g, x| {
        let mode = BnMode::Eval { mean: &mean, var: &var };
        let (y, _) = g.batch_norm(x[0], x[1], Some(x[2]), BN_EPS, mode)?;
        project(g, y, s)
    })?;
    run("global_avg_pool", vec![randn(r, &[2, 3, 4, 4])], &|g, x| {
        let y = g.global_avg_pool(x[0])?;
        project(g, y, s)
    })?;
    run("concat", vec![randn(r, &[3, 2]), randn(r, &[3, 4])], &|g, x| {
        let y = g.concat(x[0], x[1])?;
        project(g, y, s)
    })?;
    run("stack_rows", vec![randn(r, &[2, 3]), randn(r, &[4, 3])], &|g, x| {
        let y = g.stack_rows(x[0], x[1])?;
        project(g, y, s)
    })?;
    run("l2_normalize", vec![randn(r, &[3, 5])], &|g, x| {
        let y = g.l2_normalize(x[0], 1e-12)?;
        project(g, y, s)
    })?;
    run("reshape", vec![randn(r, &[2, 6])], &|g, x| {
        let y = g.reshape(x[0], &[3, 4])?;
        project(g, y, s)
    })?;
    run("sum", vec![randn(r, &[7])], &|g, x| Ok(g.sum(x[0])))?;
    run("mean", vec![randn(r, &[7])], &|g, x| Ok(g.mean(x[0])))?;
    for window in [1, 3, 5] {
        run(&format!("neighborhood_softmax_k{window}"), vec![positive(r, &[2, 3, 5, 4])], &move |g, x| {
            let y = g.neighborhood_softmax(x[0], window)?;
            project(g, y, s)
        })?;
    }
    run("channel_nms", vec![positive(r, &[2, 4, 3, 3])], &|g, x| {
        let y = g.channel_nms(x[0])?;
        project(g, y, s)
    })?;
    run("channel_max", vec![positive(r, &[2, 4, 3, 3])], &|g, x| {
        let y = g.channel_max(x[0])?;
        project(g, y, s)
    })?;
    run("spatial_normalize", vec![positive(r, &[2, 3, 4])], &|g, x| {
        let y = g.spatial_normalize(x[0])?;
        project(g, y, s)
    })?;
    run("mask_channels", vec![randn(r, &[2, 3, 4, 4]), positive(r, &[2, 4, 4])], &|g, x| {
        let y = g.mask_channels(x[0], x[1])?;
        project(g, y, s)
    })?;
    let labels = [0, 0, 1, 1, 2, 2];
    let anchors: Vec<usize> = (0..labels.len()).collect();
    run("hard_triplet", vec![randn(r, &[6, 4])], &|g, x| g.hard_triplet(x[0], &labels, &anchors, 0.5))?;
    run("hard_triplet_large_margin", vec![randn(r, &[6, 4])], &|g, x| g.hard_triplet(x[0], &labels, &anchors, 5.0))?;
    run("smoothed_ce", vec![randn(r, &[4, 5])], &|g, x| g.smoothed_cross_entropy(x[0], &[0, 3, 4, 1], 0.1))?;
    run("cross_entropy", vec![randn(r, &[4, 4])], &|g, x| g.smoothed_cross_entropy(x[0], &[0, 1, 2, 3], 0.0))?;
    run("acm_pipeline", vec![randn(r, &[2, 3, 5, 5])], &|g, x| {
        let sp = g.softplus(x[0]);
        let local = g.add_scalar(sp, 1e-6);
        let q = acm_forward(g, local, AcmConfig { window: 3 })?.q;
        project(g, q, s)
    })?;
    Ok(out)
}

fn full_loss_batch(arch: &ArchConfig, seed: u64) -> (Tensor, Tensor, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = arch.input_size;
    let images = Tensor::from_fn(&[4, 3, s, s], |_| rng.random::<f64>());
    let rot_labels = vec![0, 1, 2, 3];
    let rotated: Vec<Tensor> = (0..4)
        .map(|i| {
            let img = Tensor::new(&[3, s, s], images.data()[i * 3 * s * s..(i + 1) * 3 * s * s].to_vec())
                .expect("image slice");
            rotate_image(&img, rot_labels[i]).expect("square image")
        })
        .collect();
    (images, Tensor::stack(&rotated).expect("equal shapes"), vec![0, 0, 1, 1], rot_labels)
}

/// Loss value, branch signature and, when requested, parameter gradients.
type LossProbe = (f64, u64, Option<BTreeMap<String, Tensor>>);

fn full_loss(
    state: &ModelState,
    images: &Tensor,
    rotated: &Tensor,
    labels: &[usize],
    rot: &[usize],
    grads: bool,
) -> Result<LossProbe> {
    let mut fwd = Forward::new(state, Mode::Train, grads);
    let x = fwd.input(images.clone())?;
    let (gb, shallow) = fwd.global_branch(x)?;
    let (ab, _) = fwd.attention_branch(x, shallow)?;
    let xr = fwd.input(rotated.clone())?;
    let ssl = fwd.ssl_branch(xr)?;
    let nodes = overall_loss(&mut fwd.graph, &gb, &ab, ssl, labels, rot, &LossConfig::default())?;
    let (mut graph, leaves, _) = fwd.into_parts();
    let value = graph.value(nodes.total).item();
    let sig = graph.branch_signature();
    if !grads {
        return Ok((value, sig, None));
    }
    let g = graph.backward(nodes.total)?;
    let map = leaves.into_iter().map(|(name, id)| (name, g.get(id).expect("param leaf").clone())).collect();
    Ok((value, sig, Some(map)))
}

/// The weighted overall objective of the tiny network on a 4-image 16×16
/// batch, checked against every parameter coordinate.
pub fn check_full_loss(seed: u64) -> Result<CheckResult> {
    let arch = ArchConfig::tiny(2);
    let mut state = ModelState::new(arch.clone(), seed)?;
    let (images, rotated, labels, rot) = full_loss_batch(&arch, seed);
    let (_, base_sig, grads) = full_loss(&state, &images, &rotated, &labels, &rot, true)?;
    let grads = grads.expect("gradients requested");
    let mut result = CheckResult::new("overall_loss");
    let names: Vec<String> = state.params().keys().cloned().collect();
    for name in names {
        let analytic = &grads[&name];
        for i in 0..analytic.len() {
            let orig = state.param(&name).expect("listed").data()[i];
            state.param_mut(&name).expect("listed").data_mut()[i] = orig + STEP;
            let (fp, sp, _) = full_loss(&state, &images, &rotated, &labels, &rot, false)?;
            state.param_mut(&name).expect("listed").data_mut()[i] = orig - STEP;
            let (fm, sm, _) = full_loss(&state, &images, &rotated, &labels, &rot, false)?;
            state.param_mut(&name).expect("listed").data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                result.skipped += 1;
                continue;
            }
            result.record(&name, i, analytic.data()[i], (fp - fm) / (2.0 * STEP));
        }
    }
    Ok(result)
}

/// Primitive suite followed by the full objective.
pub fn run(seed: u64) -> Result<GradcheckReport> {
    let mut checks = primitive_suite(seed)?;
    checks.push(check_full_loss(seed)?);
    Ok(GradcheckReport { step: STEP, checks })
}

//! Triplet and cross-entropy losses against exhaustive enumeration, and the
//! algebraic properties of the weighted objective.

use geomattn::autodiff::Graph;
use geomattn::losses::{hard_triplet_loss, overall_loss, smoothed_ce, LossConfig, LossWeights, TripletBatch};
use geomattn::model::BranchOutput;
use geomattn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dist(x: &Tensor, i: usize, j: usize) -> f64 {
    x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Mean over anchors of the largest hinge over every (positive, negative)
/// pair, enumerated explicitly.
fn brute_force_triplet(x: &Tensor, labels: &[usize], margin: f64) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                worst = worst.max((margin + dist(x, a, p) - dist(x, a, q)).max(0.0));
            }
        }
        total += worst;
    }
    total / n as f64
}

/// A batch where every identity appears at least twice and there are at
/// least two identities.
fn random_batch(rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let ids = rng.random_range(2..=8);
    let mut labels = Vec::new();
    for id in 0..ids {
        for _ in 0..rng.random_range(2..=4) {
            labels.push(id);
        }
    }
    labels.truncate(32);
    if labels.iter().filter(|&&l| l == labels[labels.len() - 1]).count() < 2 {
        labels.pop();
    }
    let d = rng.random_range(1..=16);
    let x = Tensor::from_fn(&[labels.len(), d], |_| rng.random_range(-1.0..1.0));
    (x, labels)
}

#[test]
fn batch_hard_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..200 {
        let (x, labels) = random_batch(&mut rng);
        let margin = rng.random_range(0.0..1.0);
        let got = hard_triplet_loss(&TripletBatch { features: &x, labels: &labels }, margin).unwrap();
        let want = brute_force_triplet(&x, &labels, margin);
        assert!((got - want).abs() <= 1e-12, "case {case}: {got} vs {want}");
    }
}

/// One anchor with the hardest positive at distance `dp` and the hardest
/// negative at `dn`, all on a line.
fn single_anchor_loss(dp: f64, dn: f64) -> f64 {
    // rows: anchor, positive, negative; only row 0 is an anchor
    let x = Tensor::new(&[3, 1], vec![0.0, dp, -dn]).unwrap();
    let labels = [0, 0, 1];
    let mut g = Graph::new();
    let ix = g.constant(x);
    let l = g.hard_triplet(ix, &labels, &[0], 0.5).unwrap();
    g.value(l).item()
}

#[test]
fn hand_evaluated_hinges() {
    assert_eq!(single_anchor_loss(1.0, 5.0), 0.0);
    assert!((single_anchor_loss(2.0, 1.5) - 1.0).abs() < 1e-15);
}

#[test]
fn overall_loss_is_the_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let labels = [0, 0, 1, 1, 2, 2];
    let rot = [0, 1, 2, 3, 0, 1];
    let feats: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[6, 5], |_| rng.random_range(-1.0..1.0))).collect();
    let logits_gb = Tensor::from_fn(&[6, 3], |_| rng.random_range(-2.0..2.0));
    let logits_ab = Tensor::from_fn(&[6, 3], |_| rng.random_range(-2.0..2.0));
    let ssl = Tensor::from_fn(&[6, 4], |_| rng.random_range(-2.0..2.0));
    let eval = |w: LossWeights| {
        let mut g = Graph::new();
        let gb = BranchOutput {
            feat_triplet: g.constant(feats[0].clone()),
            feat_bn: g.constant(feats[1].clone()),
            logits: g.constant(logits_gb.clone()),
        };
        let ab = BranchOutput {
            feat_triplet: g.constant(feats[2].clone()),
            feat_bn: g.constant(feats[3].clone()),
            logits: g.constant(logits_ab.clone()),
        };
        let s = g.constant(ssl.clone());
        let cfg = LossConfig { weights: w, ..LossConfig::default() };
        let nodes = overall_loss(&mut g, &gb, &ab, s, &labels, &rot, &cfg).unwrap();
        (g.value(nodes.total).item(), nodes.components(&g))
    };
    let base = LossWeights::default();
    let (total, c) = eval(base);
    assert!((total - base.combine(&c)).abs() < 1e-12);

    // linear in each weight with the others fixed
    let bump = |w: &mut LossWeights, i: usize, v: f64| match i {
        0 => w.tri_gb = v,
        1 => w.sce_gb = v,
        2 => w.tri_ab = v,
        3 => w.sce_ab = v,
        _ => w.rot = v,
    };
    let parts = [c.tri_gb, c.sce_gb, c.tri_ab, c.sce_ab, c.rot];
    for (i, part) in parts.iter().enumerate() {
        for v in [0.0, 0.3, 2.0] {
            let mut w = base;
            bump(&mut w, i, v);
            let (t, ci) = eval(w);
            assert_eq!(ci, c, "components do not depend on the weights");
            let mut zero = base;
            bump(&mut zero, i, 0.0);
            let (t0, _) = eval(zero);
            assert!((t - (t0 + v * part)).abs() < 1e-12);
        }
    }
}

#[test]
fn smoothing_targets() {
    // logits giving probabilities (1/2, 1/4, 1/4)
    let z = Tensor::new(&[1, 3], vec![2f64.ln(), 0.0, 0.0]).unwrap();
    let eps = 0.1;
    let want = -((1.0 - eps + eps / 3.0) * 0.5f64.ln() + 2.0 * (eps / 3.0) * 0.25f64.ln());
    assert!((smoothed_ce(&z, &[0], eps).unwrap() - want).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triplet_is_translation_invariant(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, labels) = random_batch(&mut rng);
        let d = x.shape()[1];
        let offsets: Vec<f64> = (0..d).map(|k| shift * (k as f64 + 1.0) / d as f64).collect();
        let moved = Tensor::from_fn(x.shape(), |i| x.data()[i] + offsets[i % d]);
        let a = hard_triplet_loss(&TripletBatch { features: &x, labels: &labels }, 0.5).unwrap();
        let b = hard_triplet_loss(&TripletBatch { features: &moved, labels: &labels }, 0.5).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn cross_entropy_is_shift_invariant(seed in any::<u64>(), c in -50.0f64..50.0, eps in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = (rng.random_range(1..6), rng.random_range(2..8));
        let z = Tensor::from_fn(&[n, k], |_| rng.random_range(-5.0..5.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let a = smoothed_ce(&z, &labels, eps).unwrap();
        let b = smoothed_ce(&z.map(|v| v + c), &labels, eps).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

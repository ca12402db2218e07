//! Structural guarantees of the network: parameter sharing, the bias-free
//! BNNeck and classifiers, inference behavior and gradient routing.

use std::collections::BTreeMap;

use geomattn::checkpoint;
use geomattn::data::{generate_synthetic_dataset, AugmentConfig, SyntheticSpec};
use geomattn::losses::{overall_loss, LossConfig, LossWeights};
use geomattn::model::{
    attention_masks, calibrate_batch_norm, extract_reid_features, predict_rotation, ArchConfig, Forward, Mode,
    ModelState,
};
use geomattn::optim::{train_epoch, OptState, TrainConfig, TrainSet};
use geomattn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, 16, 16], |_| rng.random())
}

fn calibrated(seed: u64) -> ModelState {
    let mut s = ModelState::new(ArchConfig::tiny(3), seed).unwrap();
    calibrate_batch_norm(&mut s, &images(6, 100 + seed)).unwrap();
    s
}

fn perturb(state: &ModelState, name: &str) -> ModelState {
    let mut s = state.clone();
    let p = s.param_mut(name).unwrap_or_else(|| panic!("no parameter {name}"));
    p.data_mut().iter_mut().for_each(|v| *v += 0.3);
    s
}

struct Outputs {
    gb: Tensor,
    ab: Tensor,
    ssl: Tensor,
}

fn outputs(state: &ModelState, x: &Tensor) -> Outputs {
    let mut f = Forward::new(state, Mode::Eval, false);
    let i = f.input(x.clone()).unwrap();
    let (gb, shallow) = f.global_branch(i).unwrap();
    let (ab, _) = f.attention_branch(i, shallow).unwrap();
    let ssl = f.ssl_branch(i).unwrap();
    Outputs {
        gb: f.graph.value(gb.feat_bn).clone(),
        ab: f.graph.value(ab.feat_bn).clone(),
        ssl: f.graph.value(ssl).clone(),
    }
}

#[test]
fn encoder_is_shared_and_p2_copies_are_not() {
    let s = calibrated(1);
    let x = images(2, 7);
    let base = outputs(&s, &x);

    let enc = outputs(&perturb(&s, "enc.s0.conv.w"), &x);
    assert_eq!(enc.gb, base.gb);
    assert_ne!(enc.ab, base.ab);
    assert_ne!(enc.ssl, base.ssl);

    let p2_prime = outputs(&perturb(&s, "ab.p2.b0.c1.conv.w"), &x);
    assert_eq!(p2_prime.gb, base.gb);
    assert_ne!(p2_prime.ab, base.ab);
    assert_eq!(p2_prime.ssl, base.ssl);

    let p2 = outputs(&perturb(&s, "gb.p2.b0.c1.conv.w"), &x);
    assert_ne!(p2.gb, base.gb);
    assert_eq!(p2.ab, base.ab);
}

#[test]
fn checkpoint_has_no_neck_shift_or_classifier_bias() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    calibrated(2).save(&path).unwrap();
    let entries = checkpoint::load(&path).unwrap();
    let names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
    for branch in ["gb", "ab"] {
        assert!(names.contains(&format!("{branch}.neck.bn.gamma").as_str()));
        assert!(!names.iter().any(|n| n.starts_with(&format!("{branch}.neck.bn.beta"))));
        assert!(!names.iter().any(|n| n.starts_with(&format!("{branch}.cls.")) && !n.ends_with(".w")));
    }
    assert!(names.contains(&"ssl.cos.w"));
    assert!(!names.iter().any(|n| n.starts_with("ssl.cos.") && *n != "ssl.cos.w"));
    let reloaded = ModelState::load(&path).unwrap();
    assert_eq!(reloaded, calibrated(2));
}

#[test]
fn cosine_logits_ignore_feature_scale() {
    let s = ModelState::new(ArchConfig::tiny(3), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let feats = Tensor::from_fn(&[5, 5], |_| rng.random_range(-2.0..2.0));
    let logits = |scale: f64| {
        let mut f = Forward::new(&s, Mode::Eval, false);
        let x = f.graph.constant(feats.map(|v| v * scale));
        let w = f.graph.constant(s.param("ssl.cos.w").unwrap().clone());
        let z = f.cosine_classifier(x, w, 16.0).unwrap();
        f.graph.value(z).clone()
    };
    let base = logits(1.0);
    assert!(base.data().iter().all(|v| v.abs() <= 16.0 + 1e-12));
    for alpha in [0.1, 10.0] {
        assert!(logits(alpha).max_abs_diff(&base) <= 1e-10);
    }
}

#[test]
fn inference_is_per_image_and_unit_norm() {
    let s = calibrated(4);
    let x = images(5, 8);
    let batch = extract_reid_features(&s, &x).unwrap();
    assert_eq!(batch.shape(), &[5, 12]);
    for i in 0..5 {
        let alone = extract_reid_features(&s, &x.select(&[i])).unwrap();
        let diff = alone.row(0).iter().zip(batch.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12, "image {i}: {diff}");
        let norm = batch.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-10);
    }
    assert_eq!(extract_reid_features(&s, &x).unwrap(), batch);

    let q = attention_masks(&s, &x).unwrap();
    assert_eq!(q.shape(), &[5, 2, 2]);
    for i in 0..5 {
        assert!((q.data()[i * 4..(i + 1) * 4].iter().sum::<f64>() - 1.0).abs() <= 1e-10);
    }
    assert_eq!(predict_rotation(&s, &x).unwrap().shape(), &[5, 4]);
}

/// Encoder gradients of the weighted objective with `λ_rot = 0`.
fn encoder_grads(state: &ModelState, with_ssl: bool) -> BTreeMap<String, Tensor> {
    let x = images(4, 9);
    let labels = [0, 0, 1, 1];
    let mut f = Forward::new(state, Mode::Train, true);
    let i = f.input(x.clone()).unwrap();
    let (gb, shallow) = f.global_branch(i).unwrap();
    let (ab, _) = f.attention_branch(i, shallow).unwrap();
    let total = if with_ssl {
        let r = f.input(x).unwrap();
        let ssl = f.ssl_branch(r).unwrap();
        let cfg = LossConfig { weights: LossWeights { rot: 0.0, ..LossWeights::default() }, ..LossConfig::default() };
        overall_loss(&mut f.graph, &gb, &ab, ssl, &labels, &[0, 1, 2, 3], &cfg).unwrap().total
    } else {
        let g = &mut f.graph;
        let anchors = [0, 1, 2, 3];
        let terms = [
            g.hard_triplet(gb.feat_triplet, &labels, &anchors, 0.5).unwrap(),
            g.smoothed_cross_entropy(gb.logits, &labels, 0.1).unwrap(),
            g.hard_triplet(ab.feat_triplet, &labels, &anchors, 0.5).unwrap(),
            g.smoothed_cross_entropy(ab.logits, &labels, 0.1).unwrap(),
        ];
        let mut total = g.scale(terms[0], 0.5);
        for &t in &terms[1..] {
            let w = g.scale(t, 0.5);
            total = g.add(total, w).unwrap();
        }
        total
    };
    let (mut graph, leaves, _) = f.into_parts();
    let grads = graph.backward(total).unwrap();
    leaves
        .into_iter()
        .filter(|(n, _)| n.starts_with("enc."))
        .map(|(n, id)| (n, grads.get(id).expect("encoder gradient").clone()))
        .collect()
}

#[test]
fn zero_rotation_weight_leaves_only_the_attentional_path() {
    let s = ModelState::new(ArchConfig::tiny(2), 5).unwrap();
    let with = encoder_grads(&s, true);
    let without = encoder_grads(&s, false);
    assert_eq!(with.keys().collect::<Vec<_>>(), without.keys().collect::<Vec<_>>());
    for (name, g) in &with {
        let scale = g.data().iter().fold(1e-12_f64, |m, v| m.max(v.abs()));
        assert!(g.max_abs_diff(&without[name]) <= 1e-12 * scale, "{name}");
    }
}

fn tiny_training(cfg: &TrainConfig, seed: u64, epochs: usize) -> ModelState {
    let data = generate_synthetic_dataset(&SyntheticSpec {
        num_identities: 6,
        images_per_identity: 8,
        image_size: 16,
        seed: 1,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let set = TrainSet::new(&data.train, cfg.p, cfg.k).unwrap();
    let mut state = ModelState::new(ArchConfig::tiny(set.num_classes()), seed).unwrap();
    let mut opt = OptState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in 0..epochs {
        train_epoch(&mut state, &set, &mut opt, cfg, e, &mut rng, |_| {}).unwrap();
    }
    state
}

fn tiny_config() -> TrainConfig {
    TrainConfig { p: 3, k: 4, augment: AugmentConfig { pad: 2, ..AugmentConfig::default() }, ..TrainConfig::desk() }
}

#[test]
fn training_is_bitwise_reproducible() {
    let a = tiny_training(&tiny_config(), 3, 2);
    let b = tiny_training(&tiny_config(), 3, 2);
    assert_eq!(checkpoint::encode(&a.to_entries()), checkpoint::encode(&b.to_entries()));
    assert_ne!(a, tiny_training(&tiny_config(), 4, 2));
}

/// Without loss terms and without decay Adam sees only zero gradients; the
/// batch-norm running statistics still move.
#[test]
fn zero_weights_and_no_decay_freeze_parameters() {
    let mut cfg = tiny_config();
    cfg.loss.weights = LossWeights { tri_gb: 0.0, sce_gb: 0.0, tri_ab: 0.0, sce_ab: 0.0, rot: 0.0 };
    cfg.optim.weight_decay = 0.0;
    let trained = tiny_training(&cfg, 6, 1);
    let fresh = ModelState::new(trained.arch.clone(), 6).unwrap();
    assert_eq!(trained.params(), fresh.params());
    assert!(trained.has_running_stats());
}

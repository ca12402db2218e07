//! Ranking metrics against exhaustive definitions and invariances.

use geomattn::eval::{
    average_precision, evaluate_image_to_image, evaluate_image_to_track, random_ranking_ap, EvalConfig, FeatureTable,
};
use geomattn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// AP by its textbook definition: precision@k summed at relevant ranks,
/// with precision@k recomputed from scratch every time.
fn brute_force_ap(rel: &[bool]) -> Option<f64> {
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut sum = 0.0;
    for k in 1..=rel.len() {
        if rel[k - 1] {
            let hits = rel[..k].iter().filter(|&&r| r).count();
            sum += hits as f64 / k as f64;
        }
    }
    Some(sum / total as f64)
}

#[test]
fn ap_matches_precision_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for case in 0..500 {
        let n = rng.random_range(1..=64);
        let p = rng.random_range(0.0..1.0);
        let rel: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        match (average_precision(&rel), brute_force_ap(&rel)) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "case {case}"),
            (a, b) => assert_eq!(a, b, "case {case}"),
        }
    }
}

#[test]
fn ap_hand_case() {
    assert!((average_precision(&[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
}

/// Exact expectation over all n! orderings for small n.
#[test]
fn random_ranking_expectation_by_enumeration() {
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }
    for n in 1..=6 {
        let perms = permutations(n);
        for r in 1..=n {
            let mean = perms
                .iter()
                .map(|p| brute_force_ap(&p.iter().map(|&i| i < r).collect::<Vec<_>>()).unwrap())
                .sum::<f64>()
                / perms.len() as f64;
            assert!((random_ranking_ap(n, r) - mean).abs() < 1e-12, "n={n} r={r}");
        }
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(&[n, d], data).unwrap()
}

struct Instance {
    query: FeatureTable,
    gallery: FeatureTable,
}

/// Random query/gallery tables where every query has a relevant entry
/// from another camera.
fn instance(rng: &mut ChaCha8Rng, tracks: Option<fn(usize) -> usize>) -> Instance {
    let d = rng.random_range(2..8);
    let ids = rng.random_range(2..6);
    let nq = rng.random_range(1..6);
    let ng = rng.random_range(ids..ids + 20);
    let q_ids: Vec<usize> = (0..nq).map(|_| rng.random_range(0..ids)).collect();
    let mut g_ids: Vec<usize> = (0..ng).map(|_| rng.random_range(0..ids)).collect();
    g_ids[..ids].iter_mut().enumerate().for_each(|(i, v)| *v = i);
    let g_cams: Vec<usize> = (0..ng).map(|j| if j < ids { 1 } else { rng.random_range(0..3) }).collect();
    Instance {
        query: FeatureTable::new(unit_rows(rng, nq, d), q_ids, vec![0; nq], None).unwrap(),
        gallery: FeatureTable::new(unit_rows(rng, ng, d), g_ids, g_cams, tracks.map(|f| (0..ng).map(f).collect()))
            .unwrap(),
    }
}

#[test]
fn singleton_tracks_reproduce_image_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for case in 0..50 {
        let inst = instance(&mut rng, Some(|j| 1000 + j));
        let cfg = EvalConfig::default();
        let image = evaluate_image_to_image(&inst.query, &inst.gallery, &cfg).unwrap();
        let track = evaluate_image_to_track(&inst.query, &inst.gallery, &cfg).unwrap();
        assert!((image.map - track.map).abs() <= 1e-12, "case {case}");
        assert_eq!(image.cmc, track.cmc);
    }
}

/// Duplicating every gallery row doubles each relevant run in the ranking;
/// the metrics follow from the duplicated relevance list directly.
#[test]
fn doubled_gallery_matches_duplicated_relevance_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..30 {
        let inst = instance(&mut rng, None);
        let g = &inst.gallery;
        let n = g.len();
        let doubled_rows: Vec<usize> = (0..n).flat_map(|j| [j, j]).collect();
        let doubled = FeatureTable::new(
            g.features.select(&doubled_rows),
            doubled_rows.iter().map(|&j| g.identities[j]).collect(),
            doubled_rows.iter().map(|&j| g.cameras[j]).collect(),
            None,
        )
        .unwrap();
        let cfg = EvalConfig::default();
        let single = evaluate_image_to_image(&inst.query, g, &cfg).unwrap();
        let twice = evaluate_image_to_image(&inst.query, &doubled, &cfg).unwrap();
        for (i, (a, b)) in single.per_query_ap.iter().zip(&twice.per_query_ap).enumerate() {
            // rebuild the single-gallery ranking and duplicate each entry
            let q = inst.query.features.row(i);
            let mut order: Vec<usize> = (0..n)
                .filter(|&j| inst.query.identities[i] != g.identities[j] || inst.query.cameras[i] != g.cameras[j])
                .collect();
            let dist = |j: usize| g.features.row(j).iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            order.sort_by(|&x, &y| dist(x).total_cmp(&dist(y)));
            let rel: Vec<bool> = order.iter().flat_map(|&j| [g.identities[j] == inst.query.identities[i]; 2]).collect();
            let want = brute_force_ap(&rel);
            assert_eq!(a.is_some(), want.is_some());
            if let (Some(b), Some(w)) = (b, want) {
                assert!((b - w).abs() <= 1e-12);
            }
        }
    }
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    // Gram-Schmidt on a random square matrix
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn rotate_table(t: &FeatureTable, m: &[Vec<f64>]) -> FeatureTable {
    let (n, d) = t.features.dims2("rotate").unwrap();
    let data = (0..n)
        .flat_map(|i| (0..d).map(move |k| (i, k)))
        .map(|(i, k)| m[k].iter().zip(t.features.row(i)).map(|(a, b)| a * b).sum())
        .collect();
    FeatureTable::new(Tensor::new(&[n, d], data).unwrap(), t.identities.clone(), t.cameras.clone(), t.tracks.clone())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_are_invariant_under_orthogonal_maps(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = instance(&mut rng, None);
        let m = random_orthogonal(&mut rng, inst.query.features.shape()[1]);
        let cfg = EvalConfig::default();
        let a = evaluate_image_to_image(&inst.query, &inst.gallery, &cfg).unwrap();
        let b = evaluate_image_to_image(&rotate_table(&inst.query, &m), &rotate_table(&inst.gallery, &m), &cfg).unwrap();
        prop_assert!((a.map - b.map).abs() <= 1e-12);
        prop_assert_eq!(a.cmc, b.cmc);
    }

    #[test]
    fn cmc_is_monotone_and_reaches_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = instance(&mut rng, None);
        let cfg = EvalConfig { max_rank: inst.gallery.len(), ..EvalConfig::default() };
        let r = evaluate_image_to_image(&inst.query, &inst.gallery, &cfg).unwrap();
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
    }
}

//! Retrieval evaluation: Euclidean ranking with junk filtering, image and
//! track mean average precision, and CMC curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{rotate_image, stack_images, ReidSample};
use crate::error::{Error, Result};
use crate::model::{extract_reid_features, predict_rotation, ModelState, ROTATIONS};
use crate::tensor::Tensor;

const UNIT_NORM_TOL: f64 = 1e-8;

/// Features with aligned labels. Rows are unit-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub features: Tensor,
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
    pub tracks: Option<Vec<usize>>,
}

impl FeatureTable {
    pub fn new(
        features: Tensor,
        identities: Vec<usize>,
        cameras: Vec<usize>,
        tracks: Option<Vec<usize>>,
    ) -> Result<Self> {
        let (n, _) = features.dims2("feature_table")?;
        let aligned = identities.len() == n && cameras.len() == n && tracks.as_ref().is_none_or(|t| t.len() == n);
        if !aligned {
            return Err(Error::shape(
                "feature_table",
                format!("{n} feature rows but {} identities / {} cameras", identities.len(), cameras.len()),
            ));
        }
        for i in 0..n {
            let norm = features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::domain("feature_table", format!("row {i} has norm {norm}, expected 1")));
            }
        }
        Ok(Self { features, identities, cameras, tracks })
    }

    /// Table over samples whose features were extracted in the same order.
    pub fn from_samples(features: Tensor, samples: &[ReidSample]) -> Result<Self> {
        let tracks = samples.iter().map(|s| s.track).collect();
        Self::new(
            features,
            samples.iter().map(|s| s.identity).collect(),
            samples.iter().map(|s| s.camera).collect(),
            tracks,
        )
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// `D[i,j] = ‖q_i − g_j‖₂`.
pub fn pairwise_distances(q: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (nq, d) = q.dims2("pairwise_distances")?;
    let (ng, dg) = g.dims2("pairwise_distances")?;
    if d != dg {
        return Err(Error::shape("pairwise_distances", format!("query dim {d} vs gallery dim {dg}")));
    }
    Ok(Tensor::from_fn(&[nq, ng], |idx| {
        let (a, b) = (q.row(idx / ng), g.row(idx % ng));
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Drop gallery entries that share both identity and camera with the query.
    pub filter_same_camera: bool,
    /// Longest CMC rank reported.
    pub max_rank: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { filter_same_camera: true, max_rank: 50 }
    }
}

/// Per-gallery validity for one query.
pub fn filter_valid_gallery(
    query_identity: usize,
    query_camera: usize,
    gallery: &FeatureTable,
    enabled: bool,
) -> Vec<bool> {
    gallery
        .identities
        .iter()
        .zip(&gallery.cameras)
        .map(|(&id, &cam)| !enabled || id != query_identity || cam != query_camera)
        .collect()
}

/// Mean of precision at every relevant rank, or `None` without relevant
/// entries.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, _) in ranked_relevance.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (rank + 1) as f64;
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Expected AP of a uniformly random ranking of `n` entries, `r ≥ 1` of them
/// relevant.
pub fn random_ranking_ap(n: usize, r: usize) -> f64 {
    assert!(r >= 1 && r <= n, "need 1 ≤ r ≤ n");
    if n == 1 {
        return 1.0;
    }
    let nf = n as f64;
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    h / nf + (r - 1) as f64 / (nf * (nf - 1.0)) * (nf - h)
}

/// Valid gallery indices sorted by distance, ties by index.
fn ranking(distances: &[f64], valid: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).filter(|&j| valid[j]).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    order
}

/// Ranking metrics over a set of queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// Mean AP over queries with at least one relevant entry; 0 when none.
    pub map: f64,
    /// `cmc[k-1]`: fraction of evaluated queries with a hit in the top `k`.
    pub cmc: Vec<f64>,
    pub per_query_ap: Vec<Option<f64>>,
    pub evaluated_queries: usize,
    pub excluded_queries: usize,
}

fn summarize(per_query: Vec<(Option<f64>, Option<usize>)>, max_rank: usize) -> RetrievalMetrics {
    let evaluated: Vec<_> = per_query.iter().filter_map(|(ap, first)| ap.zip(*first)).collect();
    let n = evaluated.len();
    let map = if n == 0 { 0.0 } else { evaluated.iter().map(|(ap, _)| ap).sum::<f64>() / n as f64 };
    let cmc = (1..=max_rank)
        .map(|k| if n == 0 { 0.0 } else { evaluated.iter().filter(|(_, f)| *f < k).count() as f64 / n as f64 })
        .collect();
    RetrievalMetrics {
        map,
        cmc,
        excluded_queries: per_query.len() - n,
        evaluated_queries: n,
        per_query_ap: per_query.into_iter().map(|(ap, _)| ap).collect(),
    }
}

fn check_dims(q: &FeatureTable, g: &FeatureTable) -> Result<Tensor> {
    if g.is_empty() {
        return Err(Error::Data("gallery is empty".into()));
    }
    pairwise_distances(&q.features, &g.features)
}

/// Image-to-image retrieval: relevance is identity equality.
pub fn evaluate_image_to_image(q: &FeatureTable, g: &FeatureTable, cfg: &EvalConfig) -> Result<RetrievalMetrics> {
    let dist = check_dims(q, g)?;
    let ng = g.len();
    let mut per_query = Vec::with_capacity(q.len());
    for i in 0..q.len() {
        let valid = filter_valid_gallery(q.identities[i], q.cameras[i], g, cfg.filter_same_camera);
        let order = ranking(&dist.data()[i * ng..(i + 1) * ng], &valid);
        if order.is_empty() {
            return Err(Error::Data(format!("query {i} has no valid gallery entries")));
        }
        let rel: Vec<bool> = order.iter().map(|&j| g.identities[j] == q.identities[i]).collect();
        per_query.push((average_precision(&rel), rel.iter().position(|&r| r)));
    }
    Ok(summarize(per_query, cfg.max_rank))
}

/// Image-to-track retrieval: a track's distance is the minimum over its
/// valid member images; tracks tie-break by first appearance in the gallery.
pub fn evaluate_image_to_track(q: &FeatureTable, g: &FeatureTable, cfg: &EvalConfig) -> Result<RetrievalMetrics> {
    let tracks = g.tracks.as_ref().ok_or_else(|| Error::Data("gallery has no track ids".into()))?;
    let dist = check_dims(q, g)?;
    let ng = g.len();

    // Track order by first appearance, with identity consistency enforced.
    let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
    let mut track_identity = Vec::new();
    let mut member_of = Vec::with_capacity(ng);
    for (j, &t) in tracks.iter().enumerate() {
        let next = track_identity.len();
        let s = *slot.entry(t).or_insert(next);
        if s == next {
            track_identity.push(g.identities[j]);
        } else if track_identity[s] != g.identities[j] {
            return Err(Error::Data(format!(
                "track {t} mixes identities {} and {}",
                track_identity[s], g.identities[j]
            )));
        }
        member_of.push(s);
    }

    let mut per_query = Vec::with_capacity(q.len());
    for i in 0..q.len() {
        let valid = filter_valid_gallery(q.identities[i], q.cameras[i], g, cfg.filter_same_camera);
        let row = &dist.data()[i * ng..(i + 1) * ng];
        let mut track_dist = vec![f64::INFINITY; track_identity.len()];
        let mut track_valid = vec![false; track_identity.len()];
        for j in (0..ng).filter(|&j| valid[j]) {
            let s = member_of[j];
            track_valid[s] = true;
            track_dist[s] = track_dist[s].min(row[j]);
        }
        let order = ranking(&track_dist, &track_valid);
        if order.is_empty() {
            return Err(Error::Data(format!("query {i} has no valid gallery tracks")));
        }
        let rel: Vec<bool> = order.iter().map(|&s| track_identity[s] == q.identities[i]).collect();
        per_query.push((average_precision(&rel), rel.iter().position(|&r| r)));
    }
    Ok(summarize(per_query, cfg.max_rank))
}

/// Mean expected AP of random rankings under the same filtering, over the
/// queries that have at least one relevant entry.
pub fn random_ranking_map(q: &FeatureTable, g: &FeatureTable, cfg: &EvalConfig) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..q.len() {
        let valid = filter_valid_gallery(q.identities[i], q.cameras[i], g, cfg.filter_same_camera);
        let n = valid.iter().filter(|&&v| v).count();
        let r = (0..g.len()).filter(|&j| valid[j] && g.identities[j] == q.identities[i]).count();
        if r > 0 {
            sum += random_ranking_ap(n, r);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Serialized evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "imAP")]
    pub imap: f64,
    #[serde(rename = "tmAP", skip_serializing_if = "Option::is_none", default)]
    pub tmap: Option<f64>,
    /// Top-k accuracy for `k = 1..=max_rank`.
    pub cmc: BTreeMap<usize, f64>,
    pub evaluated_queries: usize,
    pub excluded_queries: usize,
    pub per_query_ap: Vec<Option<f64>>,
    pub config: EvalConfig,
}

impl MetricsReport {
    pub fn top(&self, k: usize) -> f64 {
        self.cmc.get(&k).copied().unwrap_or(0.0)
    }
}

/// Report from already extracted tables. `tmAP` is included only when the
/// gallery carries tracks.
pub fn report(q: &FeatureTable, g: &FeatureTable, cfg: &EvalConfig) -> Result<MetricsReport> {
    let image = evaluate_image_to_image(q, g, cfg)?;
    let tmap = match g.tracks {
        Some(_) => Some(evaluate_image_to_track(q, g, cfg)?.map),
        None => None,
    };
    Ok(MetricsReport {
        imap: image.map,
        tmap,
        cmc: image.cmc.iter().enumerate().map(|(k, v)| (k + 1, *v)).collect(),
        evaluated_queries: image.evaluated_queries,
        excluded_queries: image.excluded_queries,
        per_query_ap: image.per_query_ap,
        config: cfg.clone(),
    })
}

/// Extracts eval-mode features for both sets and reports all metrics. No
/// re-ranking or other post-processing.
pub fn evaluate(
    state: &ModelState,
    query: &[ReidSample],
    gallery: &[ReidSample],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let (q, g) = feature_tables(state, query, gallery)?;
    report(&q, &g, cfg)
}

pub fn feature_tables(
    state: &ModelState,
    query: &[ReidSample],
    gallery: &[ReidSample],
) -> Result<(FeatureTable, FeatureTable)> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Data("query and gallery sets must be non-empty".into()));
    }
    let q = FeatureTable::from_samples(extract_reid_features(state, &stack_images(query)?)?, query)?;
    let g = FeatureTable::from_samples(extract_reid_features(state, &stack_images(gallery)?)?, gallery)?;
    Ok((q, g))
}

/// Fraction of the `4·n` rotated copies of `samples` whose rotation the
/// pretext head predicts correctly.
pub fn rotation_accuracy(state: &ModelState, samples: &[ReidSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples for rotation accuracy".into()));
    }
    let mut images = Vec::with_capacity(samples.len() * ROTATIONS);
    for s in samples {
        for k in 0..ROTATIONS {
            images.push(rotate_image(&s.image, k)?);
        }
    }
    let logits = predict_rotation(state, &Tensor::stack(&images)?)?;
    let correct = (0..images.len())
        .filter(|&i| {
            let row = logits.row(i);
            let best = (0..ROTATIONS).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == i % ROTATIONS
        })
        .count();
    Ok(correct as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[[f64; 2]], ids: &[usize], cams: &[usize], tracks: Option<Vec<usize>>) -> FeatureTable {
        let data = rows.iter().flatten().copied().collect();
        FeatureTable::new(Tensor::new(&[rows.len(), 2], data).unwrap(), ids.to_vec(), cams.to_vec(), tracks).unwrap()
    }

    #[test]
    fn ap_hand_cases() {
        assert!((average_precision(&[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true; 7]), Some(1.0));
        assert_eq!(average_precision(&[false, false, false, true]), Some(0.25));
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn distances_of_unit_vectors() {
        let a = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = pairwise_distances(&a, &a).unwrap();
        assert_eq!(d.data()[0], 0.0);
        assert!((d.data()[1] - 2f64.sqrt()).abs() < 1e-15);
        assert!(pairwise_distances(&a, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn junk_filter_rule() {
        let g = table(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], &[1, 1, 2], &[1, 2, 1], None);
        assert_eq!(filter_valid_gallery(1, 1, &g, true), vec![false, true, true]);
        assert_eq!(filter_valid_gallery(1, 1, &g, false), vec![true; 3]);
    }

    #[test]
    fn duplicate_plus_impostor() {
        let q = table(&[[1.0, 0.0]], &[0], &[0], None);
        let g = table(&[[0.0, 1.0], [1.0, 0.0]], &[1, 0], &[1, 1], None);
        let m = evaluate_image_to_image(&q, &g, &EvalConfig::default()).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.cmc[0], 1.0);
    }

    #[test]
    fn disjoint_identities_are_excluded() {
        let q = table(&[[1.0, 0.0]], &[0], &[0], None);
        let g = table(&[[0.0, 1.0]], &[1], &[1], None);
        let m = evaluate_image_to_image(&q, &g, &EvalConfig::default()).unwrap();
        assert_eq!((m.map, m.evaluated_queries, m.excluded_queries), (0.0, 0, 1));
    }

    #[test]
    fn empty_valid_gallery_is_an_error() {
        let q = table(&[[1.0, 0.0]], &[0], &[0], None);
        let g = table(&[[0.0, 1.0]], &[0], &[0], None);
        assert!(matches!(evaluate_image_to_image(&q, &g, &EvalConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn track_distance_is_the_member_minimum() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // query at (1,0); track 7 (identity 1) has members far and near, track 3 (identity 0) in between
        let q = table(&[[1.0, 0.0]], &[0], &[0], None);
        let g = table(&[[-1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], &[1, 0, 1], &[1, 1, 1], Some(vec![7, 3, 7]));
        let m = evaluate_image_to_track(&q, &g, &EvalConfig::default()).unwrap();
        assert_eq!(m.map, 0.5);
        let g2 = table(&[[s, s], [0.0, 1.0]], &[0, 0], &[1, 1], Some(vec![1, 1]));
        assert_eq!(evaluate_image_to_track(&q, &g2, &EvalConfig::default()).unwrap().map, 1.0);
    }

    #[test]
    fn random_ranking_expectation() {
        assert_eq!(random_ranking_ap(1, 1), 1.0);
        assert!((random_ranking_ap(5, 5) - 1.0).abs() < 1e-15);
        // one relevant among n: mean of 1/r over ranks
        let h4 = 1.0 + 0.5 + 1.0 / 3.0 + 0.25;
        assert!((random_ranking_ap(4, 1) - h4 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn report_json_keys() {
        let q = table(&[[1.0, 0.0]], &[0], &[0], Some(vec![0]));
        let g = table(&[[0.0, 1.0], [1.0, 0.0]], &[1, 0], &[1, 1], Some(vec![5, 6]));
        let r = report(&q, &g, &EvalConfig::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["imAP", "tmAP", "cmc", "excluded_queries"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["cmc"]["1"], 1.0);
        let no_tracks = table(&[[0.0, 1.0], [1.0, 0.0]], &[1, 0], &[1, 1], None);
        let v = serde_json::to_value(report(&q, &no_tracks, &EvalConfig::default()).unwrap()).unwrap();
        assert!(v.get("tmAP").is_none());
    }
}

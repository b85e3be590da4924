//! Organ inference from query embeddings, retrieval metrics and
//! embedding-space analyses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::SoraModel;
use crate::anchors::OrganAnchorPair;
use crate::corpus::SymptomRecord;
use crate::error::{Error, Result};
use crate::fusion::FusedFeatureSet;
use crate::ops;
use crate::stats::pearson;
use crate::tensor::{write_atomic, Tensor};
use crate::volume::OrganVolume;

/// Per-organ gallery: the mean of the unit-normalized fused rows of every
/// held-out volume of that organ.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub centroids: Vec<Vec<f64>>,
    /// Mean fused row per organ (not normalized).
    pub means: Vec<Vec<f64>>,
    pub n_rows: Vec<usize>,
}

impl Gallery {
    pub fn build(sets: &[FusedFeatureSet], n_organs: usize) -> Result<Self> {
        let d = sets
            .first()
            .map(|s| s.fused.cols())
            .ok_or_else(|| Error::Contract("empty gallery".into()))?;
        let mut centroids = vec![vec![0.0; d]; n_organs];
        let mut means = vec![vec![0.0; d]; n_organs];
        let mut n_rows = vec![0; n_organs];
        for s in sets {
            if s.organ_id >= n_organs || s.fused.cols() != d {
                return Err(Error::Contract(format!(
                    "gallery entry for organ {} is malformed",
                    s.organ_id
                )));
            }
            for r in 0..s.fused.rows() {
                let row = s.fused.row(r);
                let unit = ops::normalized(row)?;
                centroids[s.organ_id].iter_mut().zip(&unit).for_each(|(a, b)| *a += b);
                means[s.organ_id].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                n_rows[s.organ_id] += 1;
            }
        }
        if let Some(o) = n_rows.iter().position(|&c| c == 0) {
            return Err(Error::Contract(format!("gallery has no volume for organ {o}")));
        }
        for ((c, m), &k) in centroids.iter_mut().zip(means.iter_mut()).zip(&n_rows) {
            c.iter_mut().for_each(|x| *x /= k as f64);
            m.iter_mut().for_each(|x| *x /= k as f64);
        }
        Ok(Gallery {
            centroids,
            means,
            n_rows,
        })
    }

    pub fn n_organs(&self) -> usize {
        self.centroids.len()
    }
}

/// `(avgSim(fused_i, W·MLP(q)) + 1) / 2` for each organ.
pub fn infer_organ_scores(model: &SoraModel, gallery: &Gallery, query: &[f64]) -> Result<Vec<f64>> {
    feature_organ_scores(model, gallery, &model.text_feature(query)?)
}

/// Scores for a vector already in the projected text-feature space.
pub fn feature_organ_scores(model: &SoraModel, gallery: &Gallery, feature: &[f64]) -> Result<Vec<f64>> {
    check_gallery(model, gallery)?;
    let d = gallery.centroids[0].len();
    if feature.len() != d {
        return Err(Error::shape("feature_organ_scores", &[d], &[feature.len()]));
    }
    let f = ops::normalized(feature)?;
    Ok(gallery
        .centroids
        .iter()
        .map(|c| ((ops::dot(c, &f)).clamp(-1.0, 1.0) + 1.0) / 2.0)
        .collect())
}

/// Anchor variant: `(cos(W·MLP(v_i⁺), mean fused_i) + 1) / 2`. The scores do
/// not depend on any query.
pub fn anchor_organ_scores(model: &SoraModel, gallery: &Gallery, anchors: &[OrganAnchorPair]) -> Result<Vec<f64>> {
    check_gallery(model, gallery)?;
    if anchors.len() != gallery.n_organs() {
        return Err(Error::Contract(format!(
            "{} anchors for {} organs",
            anchors.len(),
            gallery.n_organs()
        )));
    }
    anchors
        .iter()
        .zip(&gallery.means)
        .map(|(a, m)| Ok((ops::cosine_similarity(&model.text_feature(&a.v_plus)?, m)? + 1.0) / 2.0))
        .collect()
}

fn check_gallery(model: &SoraModel, gallery: &Gallery) -> Result<()> {
    if gallery.n_organs() != model.n_organs() {
        return Err(Error::Contract(format!(
            "gallery covers {} organs, model has {}",
            gallery.n_organs(),
            model.n_organs()
        )));
    }
    Ok(())
}

/// Organ ids sorted by descending score, ties by ascending id.
pub fn rank_organs(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// One scored query. `labels[0]` is the primary organ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
    pub labels: Vec<usize>,
}

impl RetrievalResult {
    pub fn new(scores: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() || labels.iter().any(|&l| l >= scores.len()) {
            return Err(Error::Contract(format!(
                "labels {labels:?} invalid for {} organs",
                scores.len()
            )));
        }
        Ok(RetrievalResult {
            ranking: rank_organs(&scores),
            scores,
            labels,
        })
    }

    pub fn primary(&self) -> usize {
        self.labels[0]
    }
}

/// Fraction of queries whose primary organ is among the top `k`.
pub fn rank_k_accuracy(results: &[RetrievalResult], k: usize) -> Result<f64> {
    let n = results.first().map_or(0, |r| r.scores.len());
    if k == 0 || k > n {
        return Err(Error::Config(format!("k must lie in [1, {n}], got {k}")));
    }
    let hits = results.iter().filter(|r| r.ranking[..k].contains(&r.primary())).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Average precision of a ranked relevance list.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Per organ class over queries ranked by that organ's score, then
    /// macro-averaged.
    #[default]
    ClassWise,
    /// Per query over its organ ranking, then averaged.
    QueryWise,
}

/// Mean average precision. Classes without positives are skipped.
pub fn mean_average_precision(results: &[RetrievalResult], mode: ApMode) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Contract("no retrieval results".into()));
    }
    let aps: Vec<f64> = match mode {
        ApMode::QueryWise => results
            .iter()
            .filter_map(|r| average_precision(&r.ranking.iter().map(|o| r.labels.contains(o)).collect::<Vec<_>>()))
            .collect(),
        ApMode::ClassWise => {
            let n = results[0].scores.len();
            (0..n)
                .filter_map(|c| {
                    let mut order: Vec<usize> = (0..results.len()).collect();
                    order.sort_by(|&a, &b| results[b].scores[c].total_cmp(&results[a].scores[c]).then(a.cmp(&b)));
                    let rel: Vec<bool> = order.iter().map(|&q| results[q].labels.contains(&c)).collect();
                    let ap = average_precision(&rel);
                    if ap.is_none() {
                        log::warn!("organ {c} has no positive query; excluded from mAP");
                    }
                    ap
                })
                .collect()
        }
    };
    if aps.is_empty() {
        return Err(Error::Contract("no class has a positive query".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Scores every query record; ground truth is the record's label set at
/// `label_threshold`, primary organ first.
pub fn evaluate_queries(
    model: &SoraModel,
    gallery: &Gallery,
    queries: &[SymptomRecord],
    label_threshold: f64,
) -> Result<Vec<RetrievalResult>> {
    queries
        .iter()
        .map(|q| {
            let mut labels = q.label_set(label_threshold);
            labels.retain(|&l| l != q.organ_id);
            labels.insert(0, q.organ_id);
            RetrievalResult::new(infer_organ_scores(model, gallery, &q.embedding)?, labels)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank2: f64,
    pub rank3: f64,
    pub map: f64,
    pub n_queries: usize,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn from_results(results: &[RetrievalResult], mode: ApMode, config_hash: &str) -> Result<Self> {
        let n = results.first().map_or(0, |r| r.scores.len());
        let rank = |k: usize| rank_k_accuracy(results, k.min(n));
        Ok(MetricsReport {
            rank1: rank(1)?,
            rank2: rank(2)?,
            rank3: rank(3)?,
            map: mean_average_precision(results, mode)?,
            n_queries: results.len(),
            config_hash: config_hash.to_string(),
        })
    }
}

/// Nearest and farthest `n` records from `anchor` by Euclidean distance,
/// each as `(record index, distance)`. Ties resolve by record id.
pub fn closest_farthest(
    anchor: &[f64],
    records: &[SymptomRecord],
    n: usize,
) -> Result<(Vec<(usize, f64)>, Vec<(usize, f64)>)> {
    let mut dist = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.embedding.len() != anchor.len() {
            return Err(Error::shape("closest_farthest", &[anchor.len()], &[r.embedding.len()]));
        }
        let d2: f64 = r.embedding.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum();
        dist.push((i, d2.sqrt()));
    }
    let n = if n > records.len() {
        log::warn!("requested {n} records from a corpus of {}; clamping", records.len());
        records.len()
    } else {
        n
    };
    let by_id = |a: &(usize, f64), b: &(usize, f64)| records[a.0].id.cmp(&records[b.0].id);
    let mut near = dist.clone();
    near.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| by_id(a, b)));
    let mut far = dist;
    far.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| by_id(a, b)));
    near.truncate(n);
    far.truncate(n);
    Ok((near, far))
}

/// Pearson correlation between organ columns of the soft-label matrix.
/// Pairs involving a constant column are set to 0; the diagonal is 1.
pub fn organ_correlation_matrix(labels: &[Vec<f64>]) -> Result<Tensor> {
    if labels.len() < 2 {
        return Err(Error::Contract("correlation needs at least two records".into()));
    }
    let n = labels[0].len();
    if labels.iter().any(|l| l.len() != n) {
        return Err(Error::Contract("soft-label rows differ in length".into()));
    }
    let cols: Vec<Vec<f64>> = (0..n).map(|k| labels.iter().map(|l| l[k]).collect()).collect();
    let mut out = Tensor::identity(n);
    for a in 0..n {
        for b in a + 1..n {
            let c = pearson(&cols[a], &cols[b]).unwrap_or_else(|| {
                log::warn!("organ {a} or {b} has a constant soft-label column; correlation set to 0");
                0.0
            });
            out.data_mut()[a * n + b] = c;
            out.data_mut()[b * n + a] = c;
        }
    }
    Ok(out)
}

pub fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Binary PGM rendering of a correlation matrix, `[-1, 1]` mapped to
/// `[0, 255]`, each entry drawn as a `cell × cell` block.
pub fn correlation_pgm(m: &Tensor, cell: usize) -> Vec<u8> {
    let (r, c) = (m.rows(), m.cols());
    let mut out = format!("P5\n{} {}\n255\n", c * cell, r * cell).into_bytes();
    for i in 0..r * cell {
        for j in 0..c * cell {
            let v = m.row(i / cell)[j / cell].clamp(-1.0, 1.0);
            out.push(((v + 1.0) / 2.0 * 255.0).round() as u8);
        }
    }
    out
}

/// Voxel `v` holds the largest score among organs whose mask covers it.
pub fn probability_overlay(volumes: &[OrganVolume], scores: &[f64]) -> Result<Tensor> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::Contract("no volumes for overlay".into()))?;
    let shape = first.mask.shape().to_vec();
    let mut out = Tensor::zeros(&shape);
    for v in volumes {
        if v.mask.shape() != shape.as_slice() {
            return Err(Error::shape("probability_overlay", &shape, v.mask.shape()));
        }
        let s = *scores
            .get(v.organ_id)
            .ok_or_else(|| Error::Contract(format!("no score for organ {}", v.organ_id)))?;
        for (o, &m) in out.data_mut().iter_mut().zip(v.mask.data()) {
            if m != 0.0 && s > *o {
                *o = s;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlaySidecar {
    pub case: usize,
    pub scores: Vec<f64>,
    pub shape: Vec<usize>,
}

/// Writes the overlay tensor to `path` and its scores to `path.json`.
pub fn export_probability_overlay(volumes: &[OrganVolume], scores: &[f64], path: &Path) -> Result<Tensor> {
    let overlay = probability_overlay(volumes, scores)?;
    overlay.save(path)?;
    let sidecar = OverlaySidecar {
        case: volumes[0].case,
        scores: scores.to_vec(),
        shape: overlay.shape().to_vec(),
    };
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    write_atomic(Path::new(&side), &serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(overlay)
}

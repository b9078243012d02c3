//! Stage-2 knowledge transfer: per-class Gaussian estimates over the
//! compact predicate/triplet features, head/tail splits, covariance
//! calibration from distribution-similar head classes, synthetic feature
//! sampling, balanced-set construction, and classifier fine-tuning.

use crate::model::{classify_relation, DrmModel};
use crate::synthgraph::FrequencyTable;
use crate::tensor::{Matrix, Tape};
use crate::train::{RelationFeatures, Sgd};
use crate::{derive_seed, DrmError, Result};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Covariance shrinkage jitter.
pub const EPSILON: f64 = 1e-6;

/// Per-class Gaussian summary of a feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub mean: Array1<f64>,
    pub covariance: Matrix,
    pub count: usize,
    /// True when the class had a single point and fell back to eps * I.
    pub degenerate: bool,
}

/// Unbiased mean/covariance per class key. Single-member classes fall
/// back to an eps-scaled identity covariance and are flagged.
pub fn estimate_class_stats(
    features: &Matrix,
    labels: &[u64],
) -> Result<BTreeMap<u64, ClassStats>> {
    if features.nrows() != labels.len() {
        return Err(DrmError::ShapeMismatch {
            op: "estimate_class_stats".into(),
            details: format!("{} rows vs {} labels", features.nrows(), labels.len()),
        });
    }
    let d = features.ncols();
    let mut by_class: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut out = BTreeMap::new();
    for (class, rows) in by_class {
        let n = rows.len();
        let mut mean = Array1::<f64>::zeros(d);
        for &r in &rows {
            mean += &features.row(r);
        }
        mean /= n as f64;
        let (covariance, degenerate) = if n < 2 {
            (Matrix::eye(d) * EPSILON, true)
        } else {
            let mut cov = Matrix::zeros((d, d));
            for &r in &rows {
                let diff = &features.row(r) - &mean;
                for i in 0..d {
                    let di = diff[i];
                    if di == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        cov[(i, j)] += di * diff[j];
                    }
                }
            }
            cov /= (n - 1) as f64;
            (cov, false)
        };
        out.insert(
            class,
            ClassStats {
                mean,
                covariance,
                count: n,
                degenerate,
            },
        );
    }
    Ok(out)
}

/// Head/tail partition of predicates and triplet types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTailSplit {
    /// Most frequent half of the predicates (ties to the lower id).
    pub head_predicates: Vec<usize>,
    pub tail_predicates: Vec<usize>,
    /// Triplet types under head predicates with count > threshold.
    pub head_triplets: Vec<(usize, usize, usize)>,
    /// All triplet types under tail predicates.
    pub tail_triplets: Vec<(usize, usize, usize)>,
    pub triplet_threshold: usize,
}

/// Sort predicates by descending count (ties by ascending id), take the
/// first half as head; head triplets are the frequent types inside head
/// predicates, tail triplets everything under tail predicates.
pub fn split_head_tail(
    freq: &FrequencyTable,
    num_predicates: usize,
    triplet_threshold: usize,
) -> HeadTailSplit {
    let order = freq.predicates_by_count_desc(num_predicates);
    let head_count = num_predicates.div_ceil(2);
    let head_predicates: Vec<usize> = order[..head_count].to_vec();
    let tail_predicates: Vec<usize> = order[head_count..].to_vec();
    let is_head = |p: usize| head_predicates.contains(&p);
    let mut head_triplets = Vec::new();
    let mut tail_triplets = Vec::new();
    for (&(s, p, o), &count) in &freq.triplet_counts {
        if is_head(p) {
            if count > triplet_threshold {
                head_triplets.push((s, p, o));
            }
        } else {
            tail_triplets.push((s, p, o));
        }
    }
    HeadTailSplit {
        head_predicates,
        tail_predicates,
        head_triplets,
        tail_triplets,
        triplet_threshold,
    }
}

/// Similarity weights of a tail class over head classes: the softmax of
/// negative center distances, so closer heads share more.
pub fn transfer_weights(tail_mean: &Array1<f64>, head_means: &[Array1<f64>]) -> Vec<f64> {
    assert!(!head_means.is_empty(), "need at least one head class");
    let neg_dists: Vec<f64> = head_means
        .iter()
        .map(|h| {
            let diff = tail_mean - h;
            -diff.dot(&diff).sqrt()
        })
        .collect();
    let max = neg_dists.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = neg_dists.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

/// Calibrated covariance: keep the real-data share at n/q and fill the
/// rest with the similarity-weighted head covariances. With n == q the
/// input passes through bit-identically.
pub fn calibrate_covariance(
    tail_cov: &Matrix,
    head_covs: &[&Matrix],
    alpha: &[f64],
    n: usize,
    q: usize,
) -> Result<Matrix> {
    if n == 0 || q == 0 {
        return Err(DrmError::InvalidConfig(
            "calibration needs positive counts".into(),
        ));
    }
    if n >= q {
        // No synthesis needed; identity passthrough.
        return Ok(tail_cov.clone());
    }
    if head_covs.len() != alpha.len() {
        return Err(DrmError::ShapeMismatch {
            op: "calibrate_covariance".into(),
            details: format!("{} head covs vs {} weights", head_covs.len(), alpha.len()),
        });
    }
    let ratio = n as f64 / q as f64;
    let mut out = tail_cov * ratio;
    let rest = 1.0 - ratio;
    for (cov, &a) in head_covs.iter().zip(alpha) {
        if a != 0.0 {
            out.scaled_add(rest * a, cov);
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor of a symmetric PSD matrix, or None
/// when a pivot goes non-positive.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut l = Matrix::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Draw n samples from N(mean, cov + eps I) via the Cholesky factor.
/// Deterministic given the seed.
pub fn sample_synthetic(
    mean: &Array1<f64>,
    cov: &Matrix,
    n: usize,
    seed: u64,
) -> Result<Matrix> {
    let d = mean.len();
    let jittered = cov + &(Matrix::eye(d) * EPSILON);
    let l = cholesky(&jittered).ok_or(DrmError::CholeskyFailed { dim: d })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut out = Matrix::zeros((n, d));
    let mut z = Array1::<f64>::zeros(d);
    for mut row in out.outer_iter_mut() {
        for v in z.iter_mut() {
            *v = normal.sample(&mut rng);
        }
        for i in 0..d {
            let mut acc = mean[i];
            for k in 0..=i {
                acc += l[(i, k)] * z[k];
            }
            row[i] = acc;
        }
    }
    Ok(out)
}

/// One record of the balanced fine-tuning set.
#[derive(Debug, Clone)]
pub struct BalancedRecord {
    pub p_feature: Array1<f64>,
    pub t_feature: Array1<f64>,
    pub predicate: usize,
    pub synthetic: bool,
}

#[derive(Debug, Default)]
pub struct BalancedSet {
    pub records: Vec<BalancedRecord>,
    pub target_per_class: usize,
}

impl BalancedSet {
    pub fn class_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for r in &self.records {
            *h.entry(r.predicate).or_insert(0) += 1;
        }
        h
    }
}

/// Which granularities transfer knowledge during calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DktMode {
    None,
    PredicateOnly,
    TripletOnly,
    Both,
}

impl DktMode {
    pub fn calibrates_predicates(&self) -> bool {
        matches!(self, DktMode::PredicateOnly | DktMode::Both)
    }

    pub fn calibrates_triplets(&self) -> bool {
        matches!(self, DktMode::TripletOnly | DktMode::Both)
    }
}

/// Everything stage 2 derives from the frozen stage-1 features.
#[derive(Debug)]
pub struct DktArtifacts {
    pub split: HeadTailSplit,
    /// Per-predicate stats over p'.
    pub predicate_stats: BTreeMap<u64, ClassStats>,
    /// Per-triplet-type stats over t'.
    pub triplet_stats: BTreeMap<u64, ClassStats>,
    /// Calibrated covariances for tail predicates (p' space).
    pub predicate_calibrated: BTreeMap<usize, CalibratedStats>,
    /// Calibrated covariances for tail triplet types (t' space).
    pub triplet_calibrated: BTreeMap<u64, CalibratedStats>,
    /// The balancing target: the smallest head-predicate count.
    pub q: usize,
}

/// Calibrated covariance plus its provenance.
#[derive(Debug, Clone)]
pub struct CalibratedStats {
    pub mean: Array1<f64>,
    pub covariance: Matrix,
    /// Similarity weights over the head classes used for the transfer.
    pub alpha: Vec<f64>,
    pub real_count: usize,
    pub target_count: usize,
}

/// Estimate stats, split head/tail, and calibrate tail covariances in
/// both feature spaces.
pub fn run_calibration(
    features: &RelationFeatures,
    freq: &FrequencyTable,
    num_predicates: usize,
    triplet_threshold: usize,
    mode: DktMode,
    q_override: Option<usize>,
) -> Result<DktArtifacts> {
    let split = split_head_tail(freq, num_predicates, triplet_threshold);
    let predicate_labels: Vec<u64> = features.predicates.iter().map(|&p| p as u64).collect();
    let predicate_stats = estimate_class_stats(&features.p, &predicate_labels)?;
    let triplet_stats = estimate_class_stats(&features.t, &features.triplet_keys)?;

    // Q: the smallest head-predicate count (identical for every tail
    // predicate), unless overridden.
    let q = match q_override {
        Some(q) => q,
        None => split
            .head_predicates
            .iter()
            .map(|&p| freq.predicate_count(p))
            .min()
            .unwrap_or(0),
    };
    if q == 0 {
        return Err(DrmError::InvalidConfig(
            "balancing target Q must be positive".into(),
        ));
    }

    // Predicate-space calibration over head predicates present in stats.
    let head_pred_stats: Vec<(usize, &ClassStats)> = split
        .head_predicates
        .iter()
        .filter_map(|&p| predicate_stats.get(&(p as u64)).map(|s| (p, s)))
        .collect();
    let mut predicate_calibrated = BTreeMap::new();
    for &p in &split.tail_predicates {
        let Some(stats) = predicate_stats.get(&(p as u64)) else {
            continue;
        };
        let (covariance, alpha) = if mode.calibrates_predicates() && !head_pred_stats.is_empty() {
            let head_means: Vec<Array1<f64>> = head_pred_stats
                .iter()
                .map(|(_, s)| s.mean.clone())
                .collect();
            let alpha = transfer_weights(&stats.mean, &head_means);
            let head_covs: Vec<&Matrix> =
                head_pred_stats.iter().map(|(_, s)| &s.covariance).collect();
            let cov = calibrate_covariance(
                &stats.covariance,
                &head_covs,
                &alpha,
                stats.count.min(q),
                q,
            )?;
            (cov, alpha)
        } else {
            (stats.covariance.clone(), Vec::new())
        };
        predicate_calibrated.insert(
            p,
            CalibratedStats {
                mean: stats.mean.clone(),
                covariance,
                alpha,
                real_count: stats.count,
                target_count: q,
            },
        );
    }

    // Triplet-space calibration: tail triplet types borrow from head
    // triplet types; each type's target grows proportionally with its
    // owning predicate (same n/q mixing ratio as the predicate level).
    let head_tpt_stats: Vec<(u64, &ClassStats)> = split
        .head_triplets
        .iter()
        .filter_map(|&(s, p, o)| {
            let key = crate::model::triplet_key(s, p, o);
            triplet_stats.get(&key).map(|st| (key, st))
        })
        .collect();
    let mut triplet_calibrated = BTreeMap::new();
    for &(s, p, o) in &split.tail_triplets {
        let key = crate::model::triplet_key(s, p, o);
        let Some(stats) = triplet_stats.get(&key) else {
            continue;
        };
        let pred_real = freq.predicate_count(p).max(1);
        let type_target =
            ((stats.count as f64) * (q as f64) / (pred_real as f64)).ceil() as usize;
        let type_target = type_target.max(stats.count);
        let (covariance, alpha) = if mode.calibrates_triplets() && !head_tpt_stats.is_empty() {
            let head_means: Vec<Array1<f64>> =
                head_tpt_stats.iter().map(|(_, s)| s.mean.clone()).collect();
            let alpha = transfer_weights(&stats.mean, &head_means);
            let head_covs: Vec<&Matrix> =
                head_tpt_stats.iter().map(|(_, s)| &s.covariance).collect();
            let cov = calibrate_covariance(
                &stats.covariance,
                &head_covs,
                &alpha,
                stats.count.min(type_target),
                type_target,
            )?;
            (cov, alpha)
        } else {
            (stats.covariance.clone(), Vec::new())
        };
        triplet_calibrated.insert(
            key,
            CalibratedStats {
                mean: stats.mean.clone(),
                covariance,
                alpha,
                real_count: stats.count,
                target_count: type_target,
            },
        );
    }

    Ok(DktArtifacts {
        split,
        predicate_stats,
        triplet_stats,
        predicate_calibrated,
        triplet_calibrated,
        q,
    })
}

/// Build the balanced fine-tuning set: heads uniformly under-sampled to
/// Q real records, tail classes topped up to Q with synthetic (p', t')
/// pairs drawn from their calibrated distributions.
pub fn build_balanced_set(
    features: &RelationFeatures,
    artifacts: &DktArtifacts,
    seed: u64,
) -> Result<BalancedSet> {
    let q = artifacts.q;
    if q == 0 {
        return Err(DrmError::InvalidConfig("Q must be positive".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &p) in features.predicates.iter().enumerate() {
        by_class.entry(p).or_default().push(i);
    }
    let mut records = Vec::new();

    // Head predicates: uniform under-sample to exactly Q real records.
    for &p in &artifacts.split.head_predicates {
        let Some(rows) = by_class.get(&p) else { continue };
        let mut rows = rows.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("undersample/{p}")));
        for i in (1..rows.len()).rev() {
            let j = rng.random_range(0..=i);
            rows.swap(i, j);
        }
        for &r in rows.iter().take(q) {
            records.push(BalancedRecord {
                p_feature: features.p.row(r).to_owned(),
                t_feature: features.t.row(r).to_owned(),
                predicate: p,
                synthetic: false,
            });
        }
    }

    // Tail predicates: all real records (capped at Q), then synthetic
    // fill. Synthetic p' comes from the predicate's calibrated Gaussian;
    // synthetic t' from the tail-triplet-type distributions of that
    // predicate, allocated proportionally to their real frequency.
    for &p in &artifacts.split.tail_predicates {
        let rows = by_class.get(&p).cloned().unwrap_or_default();
        for &r in rows.iter().take(q) {
            records.push(BalancedRecord {
                p_feature: features.p.row(r).to_owned(),
                t_feature: features.t.row(r).to_owned(),
                predicate: p,
                synthetic: false,
            });
        }
        let real = rows.len().min(q);
        let missing = q - real;
        if missing == 0 {
            continue;
        }
        let Some(pred_cal) = artifacts.predicate_calibrated.get(&p) else {
            return Err(DrmError::EmptyClass(format!("predicate {p}")));
        };
        let p_synth = sample_synthetic(
            &pred_cal.mean,
            &pred_cal.covariance,
            missing,
            derive_seed(seed, &format!("synth-p/{p}")),
        )?;

        // Allocate the missing t' draws across this predicate's triplet
        // types, proportionally to their real counts.
        let types: Vec<(u64, &CalibratedStats)> = artifacts
            .triplet_calibrated
            .iter()
            .filter(|(&key, _)| crate::model::split_triplet_key(key).1 == p)
            .map(|(&key, cal)| (key, cal))
            .collect();
        let mut t_rows: Vec<Array1<f64>> = Vec::with_capacity(missing);
        if types.is_empty() {
            // No triplet stats for this predicate (no annotated types):
            // reuse the predicate-level t' mean via its real rows.
            return Err(DrmError::EmptyClass(format!(
                "predicate {p} has no triplet types for synthesis"
            )));
        }
        let total_real: usize = types.iter().map(|(_, c)| c.real_count).sum();
        let mut allocated = 0usize;
        let mut plan: Vec<(u64, usize)> = Vec::with_capacity(types.len());
        for (idx, (key, cal)) in types.iter().enumerate() {
            let share = if idx + 1 == types.len() {
                missing - allocated
            } else {
                ((cal.real_count as f64 / total_real as f64) * missing as f64).floor() as usize
            };
            let share = share.min(missing - allocated);
            allocated += share;
            plan.push((*key, share));
        }
        for (key, share) in plan {
            if share == 0 {
                continue;
            }
            let cal = artifacts.triplet_calibrated[&key].clone();
            let draws = sample_synthetic(
                &cal.mean,
                &cal.covariance,
                share,
                derive_seed(seed, &format!("synth-t/{key}")),
            )?;
            for row in draws.outer_iter() {
                t_rows.push(row.to_owned());
            }
        }
        for (i, t_feature) in t_rows.into_iter().enumerate() {
            records.push(BalancedRecord {
                p_feature: p_synth.row(i).to_owned(),
                t_feature,
                predicate: p,
                synthetic: true,
            });
        }
    }

    Ok(BalancedSet {
        records,
        target_per_class: q,
    })
}

/// Fine-tuning hyper-parameters for the relation classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

/// Fine-tune only the relation classifier on the balanced set. All other
/// parameters are frozen; the caller can digest-check them.
pub fn finetune_classifier(
    model: &mut DrmModel,
    balanced: &BalancedSet,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<()> {
    if balanced.records.is_empty() {
        return Err(DrmError::InvalidConfig("balanced set is empty".into()));
    }
    let classifier_ids = model.params.classifier_ids();
    let frozen_before = model.encoder_digest();
    let d = model.dims.d;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, model.store.len());
    let mut order: Vec<usize> = (0..balanced.records.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("finetune/{epoch}")));
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let mut p = Matrix::zeros((chunk.len(), d));
            let mut t = Matrix::zeros((chunk.len(), d));
            let mut labels = Vec::with_capacity(chunk.len());
            for (row, &idx) in chunk.iter().enumerate() {
                let rec = &balanced.records[idx];
                p.row_mut(row).assign(&rec.p_feature);
                t.row_mut(row).assign(&rec.t_feature);
                labels.push(rec.predicate);
            }
            let mut tape = Tape::new(&model.store);
            let p_node = tape.constant(p);
            let t_node = tape.constant(t);
            let logits = classify_relation(&mut tape, p_node, t_node, &model.params)?;
            let loss = tape.cross_entropy_mean(logits, std::sync::Arc::new(labels));
            if !tape.scalar(loss).is_finite() {
                return Err(DrmError::NonFiniteLoss {
                    term: "finetune CE".into(),
                });
            }
            let grads = tape.backward(loss);
            sgd.step(&mut model.store, &grads, &classifier_ids);
        }
    }
    debug_assert_eq!(
        model.encoder_digest(),
        frozen_before,
        "frozen parameters must not move"
    );
    Ok(())
}

/// JSON stats dump: class key -> mean, row-major covariance, count.
#[derive(Serialize, Deserialize)]
struct StatsDumpEntry {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    n: usize,
}

pub fn save_stats_dump(
    predicate_stats: &BTreeMap<u64, ClassStats>,
    triplet_stats: &BTreeMap<u64, ClassStats>,
    path: &Path,
) -> Result<()> {
    let mut doc = BTreeMap::new();
    let encode = |stats: &BTreeMap<u64, ClassStats>, prefix: &str| {
        stats
            .iter()
            .map(|(k, s)| {
                (
                    format!("{prefix}{k}"),
                    StatsDumpEntry {
                        mu: s.mean.to_vec(),
                        sigma: s.covariance.iter().copied().collect(),
                        n: s.count,
                    },
                )
            })
            .collect::<Vec<_>>()
    };
    for (k, v) in encode(predicate_stats, "predicate/") {
        doc.insert(k, v);
    }
    for (k, v) in encode(triplet_stats, "triplet/") {
        doc.insert(k, v);
    }
    let body = serde_json::to_string_pretty(&doc).expect("stats serialize");
    std::fs::write(path, body).map_err(|e| DrmError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_point_class_matches_hand_algebra() {
        // Points x and -x: mean 0, covariance 2 x x^T (n - 1 = 1).
        let mut features = Matrix::zeros((2, 3));
        features.row_mut(0).assign(&Array1::from(vec![1.0, 2.0, -1.0]));
        features.row_mut(1).assign(&Array1::from(vec![-1.0, -2.0, 1.0]));
        let stats = estimate_class_stats(&features, &[5, 5]).unwrap();
        let s = &stats[&5];
        assert_eq!(s.count, 2);
        assert!(!s.degenerate);
        for v in s.mean.iter() {
            assert_abs_diff_eq!(*v, 0.0);
        }
        let x = [1.0, 2.0, -1.0];
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(s.covariance[(i, j)], 2.0 * x[i] * x[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_point_class_falls_back_to_jitter() {
        let mut features = Matrix::zeros((1, 4));
        features.row_mut(0).assign(&Array1::from(vec![3.0, 1.0, 0.0, -2.0]));
        let stats = estimate_class_stats(&features, &[9]).unwrap();
        let s = &stats[&9];
        assert!(s.degenerate);
        assert_abs_diff_eq!(s.mean[0], 3.0);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { EPSILON } else { 0.0 };
                assert_abs_diff_eq!(s.covariance[(i, j)], expect);
            }
        }
    }

    #[test]
    fn monte_carlo_estimates_recover_known_gaussian() {
        // Draw from a known Gaussian and verify the estimator.
        let d = 4;
        let mean = Array1::from(vec![0.5, -1.0, 2.0, 0.0]);
        let mut cov = Matrix::eye(d) * 0.5;
        cov[(0, 1)] = 0.2;
        cov[(1, 0)] = 0.2;
        cov[(2, 3)] = -0.1;
        cov[(3, 2)] = -0.1;
        let draws = sample_synthetic(&mean, &cov, 10_000, 77).unwrap();
        let labels = vec![0u64; 10_000];
        let stats = estimate_class_stats(&draws, &labels).unwrap();
        let s = &stats[&0];
        for i in 0..d {
            assert!((s.mean[i] - mean[i]).abs() < 0.05, "mean off at {i}");
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..d {
            for j in 0..d {
                let expect = cov[(i, j)] + if i == j { EPSILON } else { 0.0 };
                num += (s.covariance[(i, j)] - expect).powi(2);
                den += expect * expect;
            }
        }
        assert!((num / den).sqrt() < 0.1, "covariance rel err too large");
    }

    #[test]
    fn head_tail_split_matches_hand_example() {
        let mut freq = FrequencyTable::default();
        for (p, c) in [(0usize, 100usize), (1, 50), (2, 10), (3, 5)] {
            freq.predicate_counts.insert(p, c);
        }
        let split = split_head_tail(&freq, 4, 8);
        assert_eq!(split.head_predicates, vec![0, 1]);
        assert_eq!(split.tail_predicates, vec![2, 3]);
    }

    #[test]
    fn equal_counts_split_by_id_tie_break() {
        let mut freq = FrequencyTable::default();
        for p in 0..4 {
            freq.predicate_counts.insert(p, 7);
        }
        let split = split_head_tail(&freq, 4, 8);
        assert_eq!(split.head_predicates, vec![0, 1]);
        assert_eq!(split.tail_predicates, vec![2, 3]);
    }

    #[test]
    fn high_threshold_empties_head_triplets() {
        let mut freq = FrequencyTable::default();
        freq.predicate_counts.insert(0, 20);
        freq.predicate_counts.insert(1, 2);
        freq.triplet_counts.insert((1, 0, 2), 20);
        freq.triplet_counts.insert((3, 1, 4), 2);
        let split = split_head_tail(&freq, 2, 1000);
        assert!(split.head_triplets.is_empty());
        assert_eq!(split.tail_triplets, vec![(3, 1, 4)]);
    }

    #[test]
    fn transfer_weights_hand_examples() {
        let tail = Array1::from(vec![0.0, 0.0]);
        // Single head -> weight 1.
        let one = transfer_weights(&tail, &[Array1::from(vec![3.0, 4.0])]);
        assert_eq!(one, vec![1.0]);
        // Two equidistant heads -> 0.5 each.
        let two = transfer_weights(
            &tail,
            &[Array1::from(vec![1.0, 0.0]), Array1::from(vec![0.0, 1.0])],
        );
        assert_abs_diff_eq!(two[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(two[1], 0.5, epsilon = 1e-12);
        // Distances 1 and 3 -> softmax(-1, -3).
        let skew = transfer_weights(
            &tail,
            &[Array1::from(vec![1.0, 0.0]), Array1::from(vec![3.0, 0.0])],
        );
        let e1 = (-1.0f64).exp();
        let e3 = (-3.0f64).exp();
        assert_abs_diff_eq!(skew[0], e1 / (e1 + e3), epsilon = 1e-12);
        assert_abs_diff_eq!(skew[1], e3 / (e1 + e3), epsilon = 1e-12);
        assert_abs_diff_eq!(skew[0], 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(skew[1], 0.1192, epsilon = 1e-4);
    }

    #[test]
    fn transfer_weights_are_translation_invariant() {
        let tail = Array1::from(vec![0.3, -0.7, 1.1]);
        let heads = vec![
            Array1::from(vec![1.0, 0.0, 0.5]),
            Array1::from(vec![-0.2, 0.4, 2.0]),
            Array1::from(vec![0.0, 0.0, 0.0]),
        ];
        let base = transfer_weights(&tail, &heads);
        let shift = Array1::from(vec![5.0, -3.0, 100.0]);
        let shifted: Vec<Array1<f64>> = heads.iter().map(|h| h + &shift).collect();
        let moved = transfer_weights(&(&tail + &shift), &shifted);
        for (a, b) in base.iter().zip(&moved) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn calibration_identity_and_mixture() {
        let tail = Matrix::eye(3) * 4.0;
        let head = Matrix::eye(3) * 8.0;
        // n == q: bitwise passthrough.
        let same = calibrate_covariance(&tail, &[&head], &[1.0], 10, 10).unwrap();
        assert_eq!(same, tail);
        // n/q = 0.25 with one head: 0.25 tail + 0.75 head, entrywise.
        let mixed = calibrate_covariance(&tail, &[&head], &[1.0], 5, 20).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = 0.25 * tail[(i, j)] + 0.75 * head[(i, j)];
                assert_abs_diff_eq!(mixed[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let normal = StandardNormal;
        let a = Matrix::from_shape_fn((d, d), |_| {
            let z: f64 = normal.sample(rng);
            z
        });
        a.dot(&a.t()) / d as f64
    }

    #[test]
    fn calibrated_covariances_stay_choleskyable() {
        // Property fuzz: convex combinations of PSD inputs factor with
        // the standard jitter.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for case in 0..200 {
            let d = 2 + (case % 6);
            let tail = random_psd(d, &mut rng);
            let heads: Vec<Matrix> = (0..3).map(|_| random_psd(d, &mut rng)).collect();
            let head_refs: Vec<&Matrix> = heads.iter().collect();
            let mean_tail = Array1::from(vec![0.0; d]);
            let head_means: Vec<Array1<f64>> = (0..3)
                .map(|i| Array1::from(vec![i as f64; d]))
                .collect();
            let alpha = transfer_weights(&mean_tail, &head_means);
            let n = 1 + (case % 5);
            let q = n + 1 + (case % 7);
            let cal = calibrate_covariance(&tail, &head_refs, &alpha, n, q).unwrap();
            // Symmetric.
            for i in 0..d {
                for j in 0..d {
                    assert_abs_diff_eq!(cal[(i, j)], cal[(j, i)], epsilon = 1e-9);
                }
            }
            let jittered = &cal + &(Matrix::eye(d) * EPSILON);
            assert!(
                cholesky(&jittered).is_some(),
                "fuzz case {case}: cholesky failed"
            );
        }
    }

    #[test]
    fn degenerate_covariance_samples_collapse_to_mean() {
        let mean = Array1::from(vec![1.0, -2.0, 0.5]);
        let cov = Matrix::zeros((3, 3));
        let draws = sample_synthetic(&mean, &cov, 100, 3).unwrap();
        for row in draws.outer_iter() {
            for (v, m) in row.iter().zip(mean.iter()) {
                assert!((v - m).abs() < 1e-2, "eps-scale noise only");
            }
        }
    }

    #[test]
    fn synthetic_sampling_is_deterministic() {
        let mean = Array1::from(vec![0.0, 1.0]);
        let mut cov = Matrix::eye(2);
        cov[(0, 1)] = 0.3;
        cov[(1, 0)] = 0.3;
        let a = sample_synthetic(&mean, &cov, 50, 9).unwrap();
        let b = sample_synthetic(&mean, &cov, 50, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_synthetic(&mean, &cov, 50, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn moment_matching_at_scale() {
        // Large-sample empirical moments must approach the target.
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let normal = StandardNormal;
        let mean = Array1::from_shape_fn(d, |_| {
            let z: f64 = normal.sample(&mut rng);
            z
        });
        let cov = random_psd(d, &mut rng);
        let n = 50_000;
        let draws = sample_synthetic(&mean, &cov, n, 8).unwrap();
        let stats = estimate_class_stats(&draws, &vec![0u64; n]).unwrap();
        let s = &stats[&0];
        let mean_err = (&s.mean - &mean).mapv(f64::abs).sum() / d as f64;
        let mean_norm = mean.dot(&mean).sqrt();
        assert!(
            mean_err < 0.02 * (mean_norm + 1.0),
            "mean error {mean_err} too large"
        );
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..d {
            for j in 0..d {
                let expect = cov[(i, j)] + if i == j { EPSILON } else { 0.0 };
                num += (s.covariance[(i, j)] - expect).powi(2);
                den += expect * expect;
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.05, "covariance Frobenius rel err {rel}");
    }
}

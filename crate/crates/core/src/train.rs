//! Stage-1 training: SGD over the full objective (entity and relation
//! cross-entropies plus the two supervised-contrastive constraints), with
//! per-epoch validation mean recall, plus the shared prediction and
//! feature-extraction paths used by evaluation and stage 2.

use crate::metrics::{self, GroundTruth, RankedPrediction, Task};
use crate::model::{
    forward_sample, supervised_contrastive, two_view_augment, AblationFlags, AugmentConfig,
    DrmModel, FeatureView, LossWeights, PreparedSample,
};
use crate::tensor::{softmax_matrix, Gradients, Matrix, NodeId, Tape};
use crate::{derive_seed, DrmError, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Stage-1 hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-4,
            momentum: 0.9,
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            flags: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(DrmError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(DrmError::InvalidConfig("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DrmError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.flags.use_c && !self.flags.use_a {
            return Err(DrmError::InvalidConfig(
                "contrastive constraints require augmentation (use_c implies use_a)".into(),
            ));
        }
        Ok(())
    }
}

/// Unweighted per-term loss values plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_e: f64,
    pub l_r: f64,
    pub l_p: f64,
    pub l_t: f64,
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub l_e: f64,
    pub l_r: f64,
    pub l_p: f64,
    pub l_t: f64,
    pub val_mr50: f64,
}

#[derive(Debug)]
pub struct Stage1Output {
    pub model: DrmModel,
    pub log: Vec<EpochRecord>,
    /// Set when training aborted on a non-finite loss; the model carries
    /// the last good parameters.
    pub diverged: Option<usize>,
}

/// SGD with classical momentum over a fixed parameter set.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Option<Matrix>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, n_params: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![None; n_params],
        }
    }

    pub fn step(
        &mut self,
        store: &mut crate::tensor::ParamStore,
        grads: &Gradients,
        ids: &[usize],
    ) {
        for &id in ids {
            let Some(g) = grads.get(id) else { continue };
            match &mut self.velocity[id] {
                Some(v) => {
                    v.mapv_inplace(|x| x * self.momentum);
                    *v += g;
                }
                slot => *slot = Some(g.clone()),
            }
            let v = self.velocity[id].as_ref().expect("velocity set");
            let p = store.value_mut(id);
            p.zip_mut_with(v, |pv, vv| *pv -= self.lr * vv);
        }
    }
}

/// Tape nodes one sample's forward exposes to the batch-level losses.
struct SampleNodes {
    local_scalar: NodeId,
    l_e: f64,
    l_r: Option<f64>,
    /// Projection rows of annotated pairs, one node per view.
    p_sel: Vec<NodeId>,
    t_sel: Vec<NodeId>,
}

/// Whole forward pass for one sample's views on a fresh tape. Both
/// gradient passes rebuild exactly this graph.
fn sample_tape_forward(
    tape: &mut Tape,
    model: &DrmModel,
    prepared: &PreparedSample,
    views: &[FeatureView],
    weights: &LossWeights,
    flags: &AblationFlags,
) -> Result<SampleNodes> {
    let ent_labels = Arc::new(prepared.ent_labels.clone());
    let rel_labels = Arc::new(prepared.rel_labels.clone());
    let rel_rows = Arc::new(prepared.rel_rows.clone());
    let mut ce_ent = Vec::new();
    let mut ce_rel = Vec::new();
    let mut p_sel = Vec::new();
    let mut t_sel = Vec::new();
    for view in views {
        let fwd = forward_sample(
            tape,
            &model.params,
            &model.tables,
            prepared,
            view,
            Some(&prepared.ent_labels),
            flags,
            None,
        )?;
        ce_ent.push(tape.cross_entropy_mean(fwd.ent_logits, Arc::clone(&ent_labels)));
        if !prepared.rel_rows.is_empty() {
            let rel_logits = tape.gather_rows(fwd.rel_logits, Arc::clone(&rel_rows));
            ce_rel.push(tape.cross_entropy_mean(rel_logits, Arc::clone(&rel_labels)));
            if flags.use_c {
                p_sel.push(tape.gather_rows(fwd.p_contrast, Arc::clone(&rel_rows)));
                t_sel.push(tape.gather_rows(fwd.t_contrast, Arc::clone(&rel_rows)));
            }
        }
    }
    let inv_views = 1.0 / views.len() as f64;
    fn mean_of(tape: &mut Tape, nodes: &[NodeId], inv: f64) -> NodeId {
        let mut acc = nodes[0];
        for &n in &nodes[1..] {
            acc = tape.add(acc, n);
        }
        tape.scale(acc, inv)
    }
    let l_e_node = mean_of(tape, &ce_ent, inv_views);
    let l_e = tape.scalar(l_e_node);
    let mut local = tape.scale(l_e_node, weights.lambda_e);
    let l_r = if ce_rel.is_empty() {
        None
    } else {
        let l_r_node = mean_of(tape, &ce_rel, inv_views);
        let weighted = tape.scale(l_r_node, weights.lambda_r);
        local = tape.add(local, weighted);
        Some(tape.scalar(l_r_node))
    };
    Ok(SampleNodes {
        local_scalar: local,
        l_e,
        l_r,
        p_sel,
        t_sel,
    })
}

struct PassAOutput<'a> {
    /// The forward tape, kept alive so the backward pass can reuse it.
    tape: Tape<'a>,
    nodes: SampleNodes,
    l_e: f64,
    l_r: Option<f64>,
    /// Values of the selected projection rows, one matrix per view.
    p_vals: Vec<Matrix>,
    t_vals: Vec<Matrix>,
}

fn views_for_sample(
    prepared: &PreparedSample,
    augment: &AugmentConfig,
    flags: &AblationFlags,
    step_seed: u64,
) -> Vec<FeatureView> {
    if flags.use_a {
        let seed = derive_seed(step_seed, &prepared.sample_id);
        let (a, b) = two_view_augment(&prepared.bundle, augment, seed);
        vec![a, b]
    } else {
        vec![FeatureView::from_bundle(&prepared.bundle)]
    }
}

/// Stack per-(sample, view) projection matrices into one batch matrix and
/// repeat the matching labels.
fn stack_projections<'t>(
    pass_a: &'t [PassAOutput<'t>],
    batch: &[&PreparedSample],
    select: impl for<'o> Fn(&'o PassAOutput<'t>) -> &'o [Matrix],
    proj_dim: usize,
) -> (Matrix, Vec<u64>, Vec<u64>) {
    let total: usize = pass_a
        .iter()
        .map(|o| select(o).iter().map(|m| m.nrows()).sum::<usize>())
        .sum();
    let mut stacked = Matrix::zeros((total, proj_dim));
    let mut predicate_labels = Vec::with_capacity(total);
    let mut triplet_labels = Vec::with_capacity(total);
    let mut row = 0;
    for (output, prepared) in pass_a.iter().zip(batch) {
        for view_m in select(output) {
            for (r, view_row) in view_m.outer_iter().enumerate() {
                stacked.row_mut(row).assign(&view_row);
                predicate_labels.push(prepared.rel_labels[r] as u64);
                triplet_labels.push(prepared.triplet_keys[r]);
                row += 1;
            }
        }
    }
    (stacked, predicate_labels, triplet_labels)
}

/// Split a stacked gradient back into per-(sample, view) slices.
fn split_gradient<'t>(
    grad: &Matrix,
    pass_a: &'t [PassAOutput<'t>],
    select: impl for<'o> Fn(&'o PassAOutput<'t>) -> &'o [Matrix],
    scale: f64,
) -> Vec<Vec<Matrix>> {
    let mut out = Vec::with_capacity(pass_a.len());
    let mut row = 0;
    for output in pass_a {
        let mut per_view = Vec::new();
        for view_m in select(output) {
            let n = view_m.nrows();
            let slice = grad.slice(ndarray::s![row..row + n, ..]).to_owned() * scale;
            per_view.push(slice);
            row += n;
        }
        out.push(per_view);
    }
    out
}

/// Compute the full objective over one mini-batch, optionally with
/// gradients.
///
/// The contrastive terms couple every relation in the batch, so the pass
/// runs in three phases: per-sample forwards (parallel, tapes kept), the
/// batch-level contrastive losses over the pooled projections, and a
/// per-sample backward seeded with both the local losses and the
/// contrastive input gradients. Per-sample gradients are summed in batch
/// order, so results are bit-identical regardless of thread count.
pub fn batch_step(
    model: &DrmModel,
    batch: &[&PreparedSample],
    cfg: &TrainConfig,
    step_seed: u64,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    assert!(!batch.is_empty(), "empty batch");
    let weights = &cfg.weights;
    let flags = &cfg.flags;
    let inv_batch = 1.0 / batch.len() as f64;

    // Phase 1: per-sample forwards; tapes stay alive for the backward.
    let pass_a: Vec<PassAOutput> = batch
        .par_iter()
        .map(|prepared| -> Result<PassAOutput> {
            let views = views_for_sample(prepared, &cfg.augment, flags, step_seed);
            let mut tape = Tape::new(&model.store);
            let nodes = sample_tape_forward(&mut tape, model, prepared, &views, weights, flags)?;
            Ok(PassAOutput {
                l_e: nodes.l_e,
                l_r: nodes.l_r,
                p_vals: nodes.p_sel.iter().map(|&n| tape.value(n).clone()).collect(),
                t_vals: nodes.t_sel.iter().map(|&n| tape.value(n).clone()).collect(),
                tape,
                nodes,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let l_e = pass_a.iter().map(|o| o.l_e).sum::<f64>() * inv_batch;
    let rel_samples = pass_a.iter().filter(|o| o.l_r.is_some()).count();
    let l_r = if rel_samples == 0 {
        0.0
    } else {
        pass_a.iter().filter_map(|o| o.l_r).sum::<f64>() / rel_samples as f64
    };
    for (term, value) in [("L_e", l_e), ("L_r", l_r)] {
        if !value.is_finite() {
            return Err(DrmError::NonFiniteLoss { term: term.into() });
        }
    }

    // Phase 2: contrastive losses over the pooled projections.
    let total_rows: usize = pass_a
        .iter()
        .map(|o| o.p_vals.iter().map(|m| m.nrows()).sum::<usize>())
        .sum();
    let contrastive = flags.use_c && total_rows > 0;
    let (l_p, l_t, p_seeds, t_seeds) = if contrastive {
        let (zp, pred_labels, _) =
            stack_projections(&pass_a, batch, |o| &o.p_vals, model.dims.proj_dim);
        let (zt, _, tpt_labels) =
            stack_projections(&pass_a, batch, |o| &o.t_vals, model.dims.proj_dim);
        let mut tape = Tape::new(&model.store);
        let zp_node = tape.constant(zp);
        let zt_node = tape.constant(zt);
        let lp_node = supervised_contrastive(&mut tape, zp_node, &pred_labels, weights.tau_p)?;
        let lt_node = supervised_contrastive(&mut tape, zt_node, &tpt_labels, weights.tau_t)?;
        let l_p = tape.scalar(lp_node);
        let l_t = tape.scalar(lt_node);
        for (term, value) in [("L_p", l_p), ("L_t", l_t)] {
            if !value.is_finite() {
                return Err(DrmError::NonFiniteLoss { term: term.into() });
            }
        }
        if with_grads {
            let (_, dzp) = tape.backward_collect(lp_node, &[zp_node]);
            let (_, dzt) = tape.backward_collect(lt_node, &[zt_node]);
            let p_seeds = split_gradient(&dzp[0], &pass_a, |o| &o.p_vals, weights.lambda_p);
            let t_seeds = split_gradient(&dzt[0], &pass_a, |o| &o.t_vals, weights.lambda_t);
            (l_p, l_t, Some(p_seeds), Some(t_seeds))
        } else {
            (l_p, l_t, None, None)
        }
    } else {
        (0.0, 0.0, None, None)
    };

    let total = weights.lambda_e * l_e
        + weights.lambda_r * l_r
        + weights.lambda_p * l_p
        + weights.lambda_t * l_t;

    if !with_grads {
        return Ok((
            LossBreakdown {
                total,
                l_e,
                l_r,
                l_p,
                l_t,
            },
            None,
        ));
    }

    // Phase 3: seeded backward over the kept tapes.
    let per_sample: Vec<Gradients> = pass_a
        .par_iter()
        .enumerate()
        .map(|(b, out)| {
            let mut seeds = vec![(
                out.nodes.local_scalar,
                Matrix::from_elem((1, 1), inv_batch),
            )];
            if let (Some(ps), Some(ts)) = (&p_seeds, &t_seeds) {
                for (view_idx, node) in out.nodes.p_sel.iter().enumerate() {
                    seeds.push((*node, ps[b][view_idx].clone()));
                }
                for (view_idx, node) in out.nodes.t_sel.iter().enumerate() {
                    seeds.push((*node, ts[b][view_idx].clone()));
                }
            }
            out.tape.backward_seeded(&seeds, &[]).0
        })
        .collect();

    let mut grads = Gradients::zeros(model.store.len());
    for g in &per_sample {
        grads.accumulate(g);
    }
    Ok((
        LossBreakdown {
            total,
            l_e,
            l_r,
            l_p,
            l_t,
        },
        Some(grads),
    ))
}

/// Score one sample for evaluation.
///
/// PredCls scores are predicate probabilities over all ordered pairs;
/// SGCls multiplies in the predicted subject/object label confidences and
/// reports the predicted labels.
pub fn predict_sample(
    model: &DrmModel,
    prepared: &PreparedSample,
    task: Task,
    flags: &AblationFlags,
) -> Result<RankedPrediction> {
    let view = FeatureView::from_bundle(&prepared.bundle);
    let sem_labels = match task {
        Task::PredCls => Some(prepared.ent_labels.as_slice()),
        Task::SGCls => None,
    };
    let mut tape = Tape::new(&model.store);
    let fwd = forward_sample(
        &mut tape,
        &model.params,
        &model.tables,
        prepared,
        &view,
        sem_labels,
        flags,
        None,
    )?;
    let rel_probs = softmax_matrix(tape.value(fwd.rel_logits), None);
    let ent_probs = softmax_matrix(tape.value(fwd.ent_logits), None);
    let predicted_labels = crate::model::argmax_rows(tape.value(fwd.ent_logits));

    let mut triplets = Vec::with_capacity(rel_probs.len());
    for (row, &(i, j)) in prepared.bundle.pair_index.iter().enumerate() {
        for p in 0..model.dims.num_predicate_categories {
            let mut score = rel_probs[(row, p)];
            if task == Task::SGCls {
                score *= ent_probs[(i, predicted_labels[i])] * ent_probs[(j, predicted_labels[j])];
            }
            triplets.push((i, j, p, score));
        }
    }
    triplets.sort_by(|a, b| {
        b.3.partial_cmp(&a.3)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    Ok(RankedPrediction {
        sample_id: prepared.sample_id.clone(),
        triplets,
        entity_labels: match task {
            Task::PredCls => None,
            Task::SGCls => Some(predicted_labels),
        },
    })
}

/// Predict a whole split in input order (parallel, deterministic).
pub fn predict_split(
    model: &DrmModel,
    prepared: &[PreparedSample],
    task: Task,
    flags: &AblationFlags,
) -> Result<Vec<RankedPrediction>> {
    prepared
        .par_iter()
        .map(|p| predict_sample(model, p, task, flags))
        .collect()
}

/// Constrained mean recall at K=50 under PredCls; the per-epoch
/// validation signal.
pub fn val_mean_recall50(
    model: &DrmModel,
    prepared: &[PreparedSample],
    ground_truth: &[GroundTruth],
    flags: &AblationFlags,
) -> Result<f64> {
    let preds = predict_split(model, prepared, Task::PredCls, flags)?;
    let tally = metrics::recall_tally(&preds, ground_truth, 50, true, Task::PredCls)?;
    metrics::mean_recall_at_k(&tally)
}

/// Featurize and index a list of samples (parallel, deterministic order).
pub fn prepare_split(
    samples: &[crate::synthgraph::SceneGraphSample],
    tables: &crate::featurizer::EmbeddingTables,
    featurize_seed: u64,
) -> Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .map(|s| crate::model::prepare_sample(s, tables, featurize_seed))
        .collect()
}

/// Run stage-1 training. Deterministic given (dataset, config, seed).
pub fn train_stage1(
    dataset: &crate::synthgraph::Dataset,
    dims: crate::model::ModelDims,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Stage1Output> {
    cfg.validate()?;
    let mut model = DrmModel::init(dims, seed);
    let featurize_seed = derive_seed(seed, "featurize");
    let prepared_train = prepare_split(&dataset.train, &model.tables, featurize_seed)?;
    let prepared_val = prepare_split(&dataset.val, &model.tables, featurize_seed)?;
    let val_gt: Vec<GroundTruth> = dataset.val.iter().map(GroundTruth::from_sample).collect();

    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, model.store.len());
    let all_ids = model.params.all_ids();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.store.clone();
    let mut diverged = None;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared_train.len()).collect();
        shuffle(&mut order, derive_seed(seed, &format!("epoch/{epoch}")));

        let mut sums = LossBreakdown {
            total: 0.0,
            l_e: 0.0,
            l_r: 0.0,
            l_p: 0.0,
            l_t: 0.0,
        };
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared_train[i]).collect();
            let step_seed = derive_seed(seed, &format!("step/{epoch}/{step}"));
            match batch_step(&model, &batch, cfg, step_seed, true) {
                Ok((breakdown, grads)) => {
                    let grads = grads.expect("gradients requested");
                    sgd.step(&mut model.store, &grads, &all_ids);
                    sums.total += breakdown.total;
                    sums.l_e += breakdown.l_e;
                    sums.l_r += breakdown.l_r;
                    sums.l_p += breakdown.l_p;
                    sums.l_t += breakdown.l_t;
                    steps += 1;
                }
                Err(DrmError::NonFiniteLoss { .. }) => {
                    model.store = last_good.clone();
                    diverged = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let inv = 1.0 / steps.max(1) as f64;
        let val_mr50 = val_mean_recall50(&model, &prepared_val, &val_gt, &cfg.flags)?;
        log.push(EpochRecord {
            epoch,
            loss: sums.total * inv,
            l_e: sums.l_e * inv,
            l_r: sums.l_r * inv,
            l_p: sums.l_p * inv,
            l_t: sums.l_t * inv,
            val_mr50,
        });
        last_good = model.store.clone();
    }

    Ok(Stage1Output {
        model,
        log,
        diverged,
    })
}

/// Fisher-Yates with a seeded stream.
fn shuffle(items: &mut [usize], seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Per-relation compact features extracted under the frozen stage-1
/// model: rows of p' and t' plus labels, in dataset order.
#[derive(Debug, Clone)]
pub struct RelationFeatures {
    pub p: Matrix,
    pub t: Matrix,
    pub p_contrast: Matrix,
    pub t_contrast: Matrix,
    pub predicates: Vec<usize>,
    pub triplet_keys: Vec<u64>,
}

/// Extract p'/t' (and projection-head outputs) for every annotated
/// relation of a prepared split, without augmentation.
pub fn extract_relation_features(
    model: &DrmModel,
    prepared: &[PreparedSample],
    flags: &AblationFlags,
) -> Result<RelationFeatures> {
    struct PerSample {
        p: Matrix,
        t: Matrix,
        pc: Matrix,
        tc: Matrix,
    }
    let outputs: Vec<Option<PerSample>> = prepared
        .par_iter()
        .map(|ps| -> Result<Option<PerSample>> {
            if ps.rel_rows.is_empty() {
                return Ok(None);
            }
            let view = FeatureView::from_bundle(&ps.bundle);
            let mut tape = Tape::new(&model.store);
            let fwd = forward_sample(
                &mut tape,
                &model.params,
                &model.tables,
                ps,
                &view,
                Some(&ps.ent_labels),
                flags,
                None,
            )?;
            let rows = Arc::new(ps.rel_rows.clone());
            let p = tape.gather_rows(fwd.p_prime, Arc::clone(&rows));
            let t = tape.gather_rows(fwd.t_prime, Arc::clone(&rows));
            let pc = tape.gather_rows(fwd.p_contrast, Arc::clone(&rows));
            let tc = tape.gather_rows(fwd.t_contrast, rows);
            Ok(Some(PerSample {
                p: tape.value(p).clone(),
                t: tape.value(t).clone(),
                pc: tape.value(pc).clone(),
                tc: tape.value(tc).clone(),
            }))
        })
        .collect::<Result<Vec<_>>>()?;

    let total: usize = prepared.iter().map(|p| p.rel_rows.len()).sum();
    let d = model.dims.d;
    let pd = model.dims.proj_dim;
    let mut p = Matrix::zeros((total, d));
    let mut t = Matrix::zeros((total, d));
    let mut pc = Matrix::zeros((total, pd));
    let mut tc = Matrix::zeros((total, pd));
    let mut predicates = Vec::with_capacity(total);
    let mut triplet_keys = Vec::with_capacity(total);
    let mut row = 0;
    for (ps, out) in prepared.iter().zip(outputs) {
        let Some(out) = out else { continue };
        for r in 0..ps.rel_rows.len() {
            p.row_mut(row).assign(&out.p.row(r));
            t.row_mut(row).assign(&out.t.row(r));
            pc.row_mut(row).assign(&out.pc.row(r));
            tc.row_mut(row).assign(&out.tc.row(r));
            predicates.push(ps.rel_labels[r]);
            triplet_keys.push(ps.triplet_keys[r]);
            row += 1;
        }
    }
    Ok(RelationFeatures {
        p,
        t,
        p_contrast: pc,
        t_contrast: tc,
        predicates,
        triplet_keys,
    })
}

/// Mean intra-class and inter-class cosine similarity over unit-norm rows.
/// Classes with a single member contribute only inter-class pairs.
pub fn cluster_similarity(reps: &Matrix, labels: &[u64]) -> Option<(f64, f64)> {
    let n = reps.nrows();
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let sim: f64 = reps.row(i).iter().zip(reps.row(j).iter()).map(|(a, b)| a * b).sum();
            if labels[i] == labels[j] {
                intra.0 += sim;
                intra.1 += 1;
            } else {
                inter.0 += sim;
                inter.1 += 1;
            }
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return None;
    }
    Some((intra.0 / intra.1 as f64, inter.0 / inter.1 as f64))
}

/// Weighted-total loss over one batch without gradients; the per-term
/// breakdown reports unweighted values.
pub fn total_loss(
    model: &DrmModel,
    batch: &[&PreparedSample],
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<LossBreakdown> {
    batch_step(model, batch, cfg, step_seed, false).map(|(b, _)| b)
}

//! Stage-1 relation model: predicate and triplet cue encoders over the
//! refined entity context, projection heads with supervised-contrastive
//! constraints, and the relation/entity classifiers.

use crate::attention::{
    attention_unit, AttnUnitParams, EntityEncoderParams, HaLayerParams, LayerNormParams,
    LinearParams,
};
use crate::featurizer::{EmbeddingTables, FeatureBundle};
use crate::synthgraph::SceneGraphSample;
use crate::tensor::{Mask, Matrix, NodeId, ParamId, ParamStore, Tape};
use crate::{derive_seed, DrmError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Model dimensions. The entity and union feature dims must both equal
/// `d`; the semantic stream is projected up from `d_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub d_s: usize,
    pub heads: usize,
    pub proj_dim: usize,
    pub entity_layers: usize,
    pub cue_layers: usize,
    pub num_entity_categories: usize,
    pub num_predicate_categories: usize,
}

impl ModelDims {
    pub fn desk_default(num_entity_categories: usize, num_predicate_categories: usize) -> Self {
        Self {
            d: crate::featurizer::ENTITY_DIM,
            d_s: crate::featurizer::SEMANTIC_DIM,
            heads: 4,
            proj_dim: 32,
            entity_layers: 4,
            cue_layers: 2,
            num_entity_categories,
            num_predicate_categories,
        }
    }
}

/// Branch toggles for ablations. Disabling a branch bypasses its cue
/// encoder (the raw initialization flows straight to the classifier);
/// both feature paths always exist so downstream stages stay well formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_p: bool,
    pub use_t: bool,
    pub use_a: bool,
    pub use_c: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_p: true,
            use_t: true,
            use_a: true,
            use_c: true,
        }
    }
}

/// Loss-term weights and contrastive temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_e: f64,
    pub lambda_p: f64,
    pub lambda_t: f64,
    pub tau_p: f64,
    pub tau_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 3.0,
            lambda_e: 0.5,
            lambda_p: 0.1,
            lambda_t: 0.1,
            tau_p: 0.2,
            tau_t: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau_p <= 0.0 || self.tau_t <= 0.0 {
            return Err(DrmError::InvalidConfig(
                "temperatures must be positive".into(),
            ));
        }
        for (name, v) in [
            ("lambda_r", self.lambda_r),
            ("lambda_e", self.lambda_e),
            ("lambda_p", self.lambda_p),
            ("lambda_t", self.lambda_t),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(DrmError::InvalidConfig(format!(
                    "{name} must be a non-negative real"
                )));
            }
        }
        Ok(())
    }
}

/// All trainable parameter handles of the stage-1 model.
#[derive(Debug, Clone)]
pub struct DrmParams {
    pub entity_enc: EntityEncoderParams,
    /// Entity context e = [v', v] is normalized and projected to d for the
    /// predicate encoder's entity stream.
    pub e_ln: LayerNormParams,
    pub e_proj: LinearParams,
    pub prd_layers: Vec<HaLayerParams>,
    /// Triplet init t = [e_i, p_ij, e_j] (5d) -> d.
    pub t_ln: LayerNormParams,
    pub t_proj: LinearParams,
    /// Semantic pair [s'_i, s'_j] (2 d_s) -> d.
    pub tpt_sem_proj: LinearParams,
    pub tpt_layers: Vec<HaLayerParams>,
    pub proj_p: (LinearParams, LinearParams),
    pub proj_t: (LinearParams, LinearParams),
    pub cls_rel: (LinearParams, LinearParams),
    pub cls_ent: LinearParams,
}

impl DrmParams {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, dims: &ModelDims) -> Self {
        let d = dims.d;
        let h = dims.heads;
        Self {
            entity_enc: EntityEncoderParams::init(
                store,
                rng,
                dims.d_s,
                d,
                h,
                dims.entity_layers,
            ),
            e_ln: LayerNormParams::init(store, "prd.e_ln", 2 * d),
            e_proj: LinearParams::init(store, rng, "prd.e_proj", 2 * d, d),
            prd_layers: (0..dims.cue_layers)
                .map(|l| HaLayerParams::init(store, rng, &format!("prd.ha{l}"), d, h))
                .collect(),
            t_ln: LayerNormParams::init(store, "tpt.t_ln", 5 * d),
            t_proj: LinearParams::init(store, rng, "tpt.t_proj", 5 * d, d),
            tpt_sem_proj: LinearParams::init(store, rng, "tpt.sem_proj", 2 * dims.d_s, d),
            tpt_layers: (0..dims.cue_layers)
                .map(|l| HaLayerParams::init(store, rng, &format!("tpt.ha{l}"), d, h))
                .collect(),
            proj_p: (
                LinearParams::init(store, rng, "proj_p.fc1", d, dims.proj_dim),
                LinearParams::init(store, rng, "proj_p.fc2", dims.proj_dim, dims.proj_dim),
            ),
            proj_t: (
                LinearParams::init(store, rng, "proj_t.fc1", d, dims.proj_dim),
                LinearParams::init(store, rng, "proj_t.fc2", dims.proj_dim, dims.proj_dim),
            ),
            cls_rel: (
                LinearParams::init(store, rng, "cls_rel.fc1", 2 * d, d),
                LinearParams::init(
                    store,
                    rng,
                    "cls_rel.fc2",
                    d,
                    dims.num_predicate_categories,
                ),
            ),
            cls_ent: LinearParams::init(store, rng, "cls_ent", d, dims.num_entity_categories),
        }
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        self.entity_enc.collect_ids(&mut out);
        self.e_ln.collect_ids(&mut out);
        self.e_proj.collect_ids(&mut out);
        for l in &self.prd_layers {
            l.collect_ids(&mut out);
        }
        self.t_ln.collect_ids(&mut out);
        self.t_proj.collect_ids(&mut out);
        self.tpt_sem_proj.collect_ids(&mut out);
        for l in &self.tpt_layers {
            l.collect_ids(&mut out);
        }
        self.proj_p.0.collect_ids(&mut out);
        self.proj_p.1.collect_ids(&mut out);
        self.proj_t.0.collect_ids(&mut out);
        self.proj_t.1.collect_ids(&mut out);
        self.cls_rel.0.collect_ids(&mut out);
        self.cls_rel.1.collect_ids(&mut out);
        self.cls_ent.collect_ids(&mut out);
        out
    }

    /// Relation-classifier parameters (the only group stage 2 updates).
    pub fn classifier_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        self.cls_rel.0.collect_ids(&mut out);
        self.cls_rel.1.collect_ids(&mut out);
        out
    }

    /// Everything except the relation classifier; frozen during stage 2.
    pub fn frozen_ids(&self) -> Vec<ParamId> {
        let cls: std::collections::BTreeSet<ParamId> =
            self.classifier_ids().into_iter().collect();
        self.all_ids()
            .into_iter()
            .filter(|id| !cls.contains(id))
            .collect()
    }
}

/// The full stage-1 model: frozen tables plus trainable parameters.
#[derive(Debug, Clone)]
pub struct DrmModel {
    pub dims: ModelDims,
    pub tables: EmbeddingTables,
    pub store: ParamStore,
    pub params: DrmParams,
    pub seed: u64,
}

impl DrmModel {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let tables = EmbeddingTables::new(dims.num_entity_categories, derive_seed(seed, "tables"));
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
        let params = DrmParams::init(&mut store, &mut rng, &dims);
        Self {
            dims,
            tables,
            store,
            params,
            seed,
        }
    }

    pub fn encoder_digest(&self) -> [u8; 32] {
        self.store.digest(&self.params.frozen_ids())
    }
}

/// Cross-attention masks for the predicate cue encoder.
#[derive(Debug, Clone)]
pub struct PrdMasks {
    /// M x N: pair row (i, j) may attend entities i and j only.
    pub ca_xy: Arc<Mask>,
    /// N x M: entity k may attend only pairs incident to k.
    pub ca_yx: Arc<Mask>,
}

/// Build the predicate-encoder masks from the ordered pair list.
pub fn prd_masks(pair_index: &[(usize, usize)], num_entities: usize) -> PrdMasks {
    let m = pair_index.len();
    let mut ca_xy = Mask::from_elem((m, num_entities), false);
    let mut ca_yx = Mask::from_elem((num_entities, m), false);
    for (row, &(i, j)) in pair_index.iter().enumerate() {
        ca_xy[(row, i)] = true;
        ca_xy[(row, j)] = true;
        ca_yx[(i, row)] = true;
        ca_yx[(j, row)] = true;
    }
    PrdMasks {
        ca_xy: Arc::new(ca_xy),
        ca_yx: Arc::new(ca_yx),
    }
}

/// A sample with everything the training/eval forward needs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample_id: String,
    pub bundle: FeatureBundle,
    pub masks: PrdMasks,
    pub ent_labels: Vec<usize>,
    /// Pair-row index of each annotated relation.
    pub rel_rows: Vec<usize>,
    pub rel_labels: Vec<usize>,
    pub triplet_keys: Vec<u64>,
}

/// Pack a (subject category, predicate, object category) type into a key.
pub fn triplet_key(s_cat: usize, predicate: usize, o_cat: usize) -> u64 {
    ((s_cat as u64) << 40) | ((predicate as u64) << 20) | o_cat as u64
}

/// Unpack a [`triplet_key`].
pub fn split_triplet_key(key: u64) -> (usize, usize, usize) {
    (
        (key >> 40) as usize,
        ((key >> 20) & 0xfffff) as usize,
        (key & 0xfffff) as usize,
    )
}

/// Featurize and index one sample for the model.
pub fn prepare_sample(
    sample: &SceneGraphSample,
    tables: &EmbeddingTables,
    featurize_seed: u64,
) -> Result<PreparedSample> {
    let bundle = crate::featurizer::featurize(sample, tables, featurize_seed)?;
    let masks = prd_masks(&bundle.pair_index, bundle.num_entities());
    let ent_labels: Vec<usize> = sample.entities.iter().map(|e| e.category_id).collect();
    let mut rel_rows = Vec::with_capacity(sample.relations.len());
    let mut rel_labels = Vec::with_capacity(sample.relations.len());
    let mut triplet_keys = Vec::with_capacity(sample.relations.len());
    for rel in &sample.relations {
        let row = bundle
            .pair_row(rel.subject_index, rel.object_index)
            .ok_or_else(|| DrmError::InvalidRecord {
                record: sample.sample_id.clone(),
                reason: format!(
                    "relation ({}, {}) has no pair row",
                    rel.subject_index, rel.object_index
                ),
            })?;
        rel_rows.push(row);
        rel_labels.push(rel.predicate_id);
        triplet_keys.push(triplet_key(
            ent_labels[rel.subject_index],
            rel.predicate_id,
            ent_labels[rel.object_index],
        ));
    }
    Ok(PreparedSample {
        sample_id: sample.sample_id.clone(),
        bundle,
        masks,
        ent_labels,
        rel_rows,
        rel_labels,
        triplet_keys,
    })
}

/// Feature-level augmentation: Gaussian noise plus feature dropout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub dropout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            dropout: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            noise_sigma: 0.0,
            dropout: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.noise_sigma == 0.0 && self.dropout == 0.0
    }
}

fn augment_matrix<R: Rng>(x: &Matrix, cfg: &AugmentConfig, rng: &mut R) -> Matrix {
    let normal = StandardNormal;
    let mut out = x.clone();
    for v in out.iter_mut() {
        if cfg.dropout > 0.0 && rng.random_range(0.0..1.0) < cfg.dropout {
            *v = 0.0;
        } else if cfg.noise_sigma > 0.0 {
            let z: f64 = normal.sample(rng);
            *v += z * cfg.noise_sigma;
        }
    }
    out
}

/// Feature tensors for one view of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureView {
    pub entity: Arc<Matrix>,
    pub semantic: Arc<Matrix>,
    pub union: Arc<Matrix>,
}

impl FeatureView {
    pub fn from_bundle(bundle: &FeatureBundle) -> Self {
        Self {
            entity: Arc::new(bundle.entity_features.clone()),
            semantic: Arc::new(bundle.semantic.clone()),
            union: Arc::new(bundle.union.clone()),
        }
    }
}

/// Produce two stochastic views of a sample's input features. Labels are
/// untouched; with a zero-noise config both views equal the input.
pub fn two_view_augment(
    bundle: &FeatureBundle,
    cfg: &AugmentConfig,
    seed: u64,
) -> (FeatureView, FeatureView) {
    if cfg.is_identity() {
        let v = FeatureView::from_bundle(bundle);
        return (v.clone(), v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "two-view"));
    let view = |rng: &mut ChaCha8Rng| FeatureView {
        entity: Arc::new(augment_matrix(&bundle.entity_features, cfg, rng)),
        semantic: Arc::new(augment_matrix(&bundle.semantic, cfg, rng)),
        union: Arc::new(augment_matrix(&bundle.union, cfg, rng)),
    };
    let a = view(&mut rng);
    let b = view(&mut rng);
    (a, b)
}

/// Node handles produced by one sample forward pass.
pub struct SampleForward {
    pub v_prime: NodeId,
    pub p_prime: NodeId,
    pub t_prime: NodeId,
    /// Unit-norm projection-head outputs for the contrastive losses.
    pub p_contrast: NodeId,
    pub t_contrast: NodeId,
    pub rel_logits: NodeId,
    pub ent_logits: NodeId,
}

/// Collects attention-weight nodes of the predicate-to-entity CA units so
/// tests can assert exact mask sparsity on the live forward pass.
#[derive(Default)]
pub struct AttnProbe {
    pub prd_ca_xy_weights: Vec<NodeId>,
}

/// Fused relation head over both cue granularities: two fully connected
/// layers on [p', t'].
pub fn classify_relation(
    tape: &mut Tape,
    p_prime: NodeId,
    t_prime: NodeId,
    params: &DrmParams,
) -> Result<NodeId> {
    let dp = tape.value(p_prime).ncols();
    let dt = tape.value(t_prime).ncols();
    let expected = tape.store_ref().value(params.cls_rel.0.w).nrows();
    if dp + dt != expected {
        return Err(DrmError::ShapeMismatch {
            op: "classify_relation".into(),
            details: format!("p' {dp} + t' {dt} != classifier input {expected}"),
        });
    }
    let cat = tape.concat_cols(&[p_prime, t_prime]);
    let h = tape.linear(cat, params.cls_rel.0.w, params.cls_rel.0.b);
    let h = tape.relu(h);
    Ok(tape.linear(h, params.cls_rel.1.w, params.cls_rel.1.b))
}

/// Entity label head over refined entity features.
pub fn classify_entity(tape: &mut Tape, v_prime: NodeId, params: &DrmParams) -> Result<NodeId> {
    let d = tape.value(v_prime).ncols();
    let expected = tape.store_ref().value(params.cls_ent.w).nrows();
    if d != expected {
        return Err(DrmError::ShapeMismatch {
            op: "classify_entity".into(),
            details: format!("v' dim {d} != classifier input {expected}"),
        });
    }
    Ok(tape.linear(v_prime, params.cls_ent.w, params.cls_ent.b))
}

fn projection_head(
    tape: &mut Tape,
    x: NodeId,
    head: &(LinearParams, LinearParams),
) -> NodeId {
    let h = tape.linear(x, head.0.w, head.0.b);
    let h = tape.relu(h);
    let h = tape.linear(h, head.1.w, head.1.b);
    tape.l2_normalize_rows(h)
}

fn run_ha_stack(
    tape: &mut Tape,
    mut x: NodeId,
    mut y: NodeId,
    layers: &[HaLayerParams],
    ca_xy: Option<Arc<Mask>>,
    ca_yx: Option<Arc<Mask>>,
    mut probe: Option<&mut AttnProbe>,
) -> Result<(NodeId, NodeId)> {
    for layer in layers {
        let sa_x = attention_unit(tape, x, None, None, &layer.sa_x)?;
        let ca_x = cross_unit_probed(tape, x, y, ca_xy.clone(), &layer.ca_xy, probe.as_deref_mut())?;
        let nx = tape.add(sa_x, ca_x);
        let sa_y = attention_unit(tape, y, None, None, &layer.sa_y)?;
        let ca_y = attention_unit(tape, y, Some(x), ca_yx.clone(), &layer.ca_yx)?;
        let ny = tape.add(sa_y, ca_y);
        x = nx;
        y = ny;
    }
    Ok((x, y))
}

fn cross_unit_probed(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    mask: Option<Arc<Mask>>,
    params: &AttnUnitParams,
    probe: Option<&mut AttnProbe>,
) -> Result<NodeId> {
    match probe {
        None => attention_unit(tape, x, Some(y), mask, params),
        Some(p) => {
            // Mirror attention_unit but capture the per-head weight nodes.
            let q = params.ln_q.apply(tape, x);
            let kv = params
                .ln_kv
                .as_ref()
                .expect("cross unit has ln_kv")
                .apply(tape, y);
            let (attn, weights) = crate::attention::multi_head_attention_probed(
                tape,
                q,
                kv,
                kv,
                mask,
                &params.attn,
            )?;
            p.prd_ca_xy_weights.extend(weights);
            let h = tape.add(x, attn);
            let hn = params.ln_ff.apply(tape, h);
            let f = tape.linear(hn, params.ff1.w, params.ff1.b);
            let f = tape.relu(f);
            let f = tape.linear(f, params.ff2.w, params.ff2.b);
            Ok(tape.add(h, f))
        }
    }
}

/// Full stage-1 forward for one view of one sample.
///
/// `sem_labels` selects the entity labels whose embeddings feed the
/// triplet branch: ground-truth labels during training and for protocols
/// that provide them, or `None` to use the entity head's own predictions
/// (label-prediction evaluation).
pub fn forward_sample(
    tape: &mut Tape,
    params: &DrmParams,
    tables: &EmbeddingTables,
    prepared: &PreparedSample,
    view: &FeatureView,
    sem_labels: Option<&[usize]>,
    flags: &AblationFlags,
    mut probe: Option<&mut AttnProbe>,
) -> Result<SampleForward> {
    let v = tape.constant_arc(Arc::clone(&view.entity));
    let s = tape.constant_arc(Arc::clone(&view.semantic));
    let u = tape.constant_arc(Arc::clone(&view.union));

    // Entity refinement (the hybrid-attention stack over both streams).
    let v_prime = crate::attention::entity_encoder(tape, v, s, &params.entity_enc)?;
    let ent_logits = classify_entity(tape, v_prime, params)?;

    // Label embeddings for the triplet branch; the tape is eager, so
    // predicted labels can be read off the entity head mid-forward.
    let s_prime = match sem_labels {
        Some(labels) => Arc::new(tables.semantic_matrix(labels)),
        None => {
            let labels = argmax_rows(tape.value(ent_logits));
            Arc::new(tables.semantic_matrix(&labels))
        }
    };

    // Entity context e = [v', v], normalized and projected for the
    // predicate encoder's entity stream.
    let e = tape.concat_cols(&[v_prime, v]);
    let e_norm = params.e_ln.apply(tape, e);
    let e_proj = tape.linear(e_norm, params.e_proj.w, params.e_proj.b);

    // Predicate cue branch: X = predicates (init union features), Y =
    // entity contexts. Predicates may only cross-attend their own subject
    // and object; entities only their incident pairs.
    let p_prime = if flags.use_p {
        let (px, _) = run_ha_stack(
            tape,
            u,
            e_proj,
            &params.prd_layers,
            Some(Arc::clone(&prepared.masks.ca_xy)),
            Some(Arc::clone(&prepared.masks.ca_yx)),
            probe.as_deref_mut(),
        )?;
        px
    } else {
        u
    };

    // Triplet cue branch: X = [e_i, p_ij, e_j] projected, Y = projected
    // label-embedding pairs; output is the sum of the final streams.
    let subj_idx: Vec<usize> = prepared.bundle.pair_index.iter().map(|&(i, _)| i).collect();
    let obj_idx: Vec<usize> = prepared.bundle.pair_index.iter().map(|&(_, j)| j).collect();
    let e_subj = tape.gather_rows(e, Arc::new(subj_idx.clone()));
    let e_obj = tape.gather_rows(e, Arc::new(obj_idx.clone()));
    let t0 = tape.concat_cols(&[e_subj, u, e_obj]);
    let t_norm = params.t_ln.apply(tape, t0);
    let t_in = tape.linear(t_norm, params.t_proj.w, params.t_proj.b);

    let sp = tape.constant_arc(s_prime);
    let sp_subj = tape.gather_rows(sp, Arc::new(subj_idx));
    let sp_obj = tape.gather_rows(sp, Arc::new(obj_idx));
    let sem_pair = tape.concat_cols(&[sp_subj, sp_obj]);
    let sem_in = tape.linear(sem_pair, params.tpt_sem_proj.w, params.tpt_sem_proj.b);

    let t_prime = if flags.use_t {
        let (tx, ty) = run_ha_stack(tape, t_in, sem_in, &params.tpt_layers, None, None, None)?;
        tape.add(tx, ty)
    } else {
        t_in
    };

    let p_contrast = projection_head(tape, p_prime, &params.proj_p);
    let t_contrast = projection_head(tape, t_prime, &params.proj_t);
    let rel_logits = classify_relation(tape, p_prime, t_prime, params)?;

    Ok(SampleForward {
        v_prime,
        p_prime,
        t_prime,
        p_contrast,
        t_contrast,
        rel_logits,
        ent_logits,
    })
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Supervised contrastive loss over unit-norm representations.
///
/// For each anchor with at least one same-label batch member, averages
/// `-log( exp(sim/tau) / sum_B exp(sim/tau) )` over its positives, where
/// B is the batch without the anchor; anchors without positives are
/// skipped and the result is the mean over contributing anchors.
pub fn supervised_contrastive(
    tape: &mut Tape,
    reps: NodeId,
    labels: &[u64],
    tau: f64,
) -> Result<NodeId> {
    let n = tape.value(reps).nrows();
    if n != labels.len() {
        return Err(DrmError::ShapeMismatch {
            op: "supervised_contrastive".into(),
            details: format!("{n} reps vs {} labels", labels.len()),
        });
    }
    if tau <= 0.0 {
        return Err(DrmError::InvalidConfig("temperature must be positive".into()));
    }
    let mut pos_mask = Matrix::zeros((n, n));
    let mut batch_mask = Mask::from_elem((n, n), false);
    let mut pos_counts = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            batch_mask[(i, j)] = true;
            if labels[i] == labels[j] {
                pos_mask[(i, j)] = 1.0;
                pos_counts[i] += 1;
            }
        }
    }
    let anchors: Vec<usize> = (0..n).filter(|&i| pos_counts[i] > 0).collect();
    if anchors.is_empty() {
        return Err(DrmError::NoPositivePair);
    }

    let sim = tape.matmul_tb(reps, reps);
    let scaled = tape.scale(sim, 1.0 / tau);
    let lse = tape.logsumexp_rows(scaled, Arc::new(batch_mask));

    // Mean positive similarity per anchor: rows of (scaled o pos_mask)
    // summed and divided by the positive count.
    let pos_sim = tape.mul_const(scaled, Arc::new(pos_mask));
    let ones = tape.constant(Matrix::from_elem((n, 1), 1.0));
    let pos_sum = tape.matmul(pos_sim, ones);
    let recip = Matrix::from_shape_fn((n, 1), |(i, _)| {
        if pos_counts[i] > 0 {
            1.0 / pos_counts[i] as f64
        } else {
            0.0
        }
    });
    let pos_mean = tape.mul_const(pos_sum, Arc::new(recip));

    // Per-anchor loss = lse - mean positive similarity; average over
    // anchors that have positives.
    let per_anchor = tape.sub(lse, pos_mean);
    let weights = Matrix::from_shape_fn((1, n), |(_, i)| {
        if pos_counts[i] > 0 {
            1.0 / anchors.len() as f64
        } else {
            0.0
        }
    });
    let w = tape.constant(weights);
    Ok(tape.matmul(w, per_anchor))
}

/// Serialized model state: version tag, config snapshot, tables, and all
/// parameter tensors by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config: serde_json::Value,
    pub dims: ModelDims,
    pub tables: EmbeddingTables,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub const CHECKPOINT_VERSION: &str = "drm-v1";

impl DrmModel {
    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        let params = self
            .store
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                rows: t.nrows(),
                cols: t.ncols(),
                data: t.iter().copied().collect(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            config,
            dims: self.dims,
            tables: self.tables.clone(),
            seed: self.seed,
            params,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(DrmError::Checkpoint(format!(
                "unsupported version {:?}, expected {CHECKPOINT_VERSION:?}",
                ckpt.version
            )));
        }
        let mut model = DrmModel::init(ckpt.dims, ckpt.seed);
        model.tables = ckpt.tables.clone();
        if model.store.len() != ckpt.params.len() {
            return Err(DrmError::Checkpoint(format!(
                "parameter count mismatch: model has {}, checkpoint has {}",
                model.store.len(),
                ckpt.params.len()
            )));
        }
        for (id, entry) in ckpt.params.iter().enumerate() {
            if model.store.name(id) != entry.name {
                return Err(DrmError::Checkpoint(format!(
                    "parameter order mismatch at {id}: {} vs {}",
                    model.store.name(id),
                    entry.name
                )));
            }
            let m = Matrix::from_shape_vec((entry.rows, entry.cols), entry.data.clone())
                .map_err(|e| DrmError::Checkpoint(format!("bad shape for {}: {e}", entry.name)))?;
            model.store.set(id, m);
        }
        Ok(model)
    }
}

/// Atomic checkpoint write: serialize to a temp file, then rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let body = serde_json::to_vec(ckpt).expect("checkpoint serializes");
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &body).map_err(|e| DrmError::Io {
        path: tmp.display().to_string(),
        source: e,
    })?;
    std::fs::rename(&tmp, path).map_err(|e| DrmError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let body = std::fs::read(path).map_err(|e| DrmError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_slice(&body).map_err(|e| DrmError::Parse {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgraph::{BBox, EntityInstance, RelationAnnotation};
    use approx::assert_abs_diff_eq;

    fn toy_sample(n: usize) -> SceneGraphSample {
        let entities = (0..n)
            .map(|i| {
                let off = 0.8 * (i as f64) / (n as f64);
                EntityInstance {
                    category_id: i % 3,
                    bbox: BBox::new(0.05 + off * 0.5, 0.05 + off, 0.2 + off * 0.5, 0.15 + off),
                    appearance_seed: 42 + i as u64,
                }
            })
            .collect();
        let relations = if n >= 2 {
            vec![RelationAnnotation {
                subject_index: 0,
                object_index: 1,
                predicate_id: 0,
            }]
        } else {
            Vec::new()
        };
        SceneGraphSample {
            sample_id: "toy".into(),
            entities,
            relations,
        }
    }

    fn toy_model() -> DrmModel {
        DrmModel::init(ModelDims::desk_default(3, 4), 7)
    }

    #[test]
    fn prd_mask_has_exactly_two_entities_per_pair() {
        // N=2: pair (0,1) attends only entities {0,1}.
        let masks = prd_masks(&[(0, 1), (1, 0)], 2);
        assert_eq!(masks.ca_xy.dim(), (2, 2));
        for row in masks.ca_xy.outer_iter() {
            assert_eq!(row.iter().filter(|&&b| b).count(), 2);
        }
        // N=3: entity 0 attends exactly the 4 incident pairs.
        let pairs = vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];
        let masks = prd_masks(&pairs, 3);
        let row0 = masks.ca_yx.row(0);
        let allowed: Vec<usize> = row0
            .iter()
            .enumerate()
            .filter_map(|(c, &b)| b.then_some(c))
            .collect();
        let expect: Vec<usize> = pairs
            .iter()
            .enumerate()
            .filter_map(|(c, &(i, j))| (i == 0 || j == 0).then_some(c))
            .collect();
        assert_eq!(allowed, expect);
        assert_eq!(allowed.len(), 4);
    }

    #[test]
    fn forward_shapes_and_unit_norm_projections() {
        let model = toy_model();
        let prepared = prepare_sample(&toy_sample(3), &model.tables, 0).unwrap();
        let view = FeatureView::from_bundle(&prepared.bundle);
        let mut tape = Tape::new(&model.store);
        let fwd = forward_sample(
            &mut tape,
            &model.params,
            &model.tables,
            &prepared,
            &view,
            Some(&prepared.ent_labels),
            &AblationFlags::default(),
            None,
        )
        .unwrap();
        assert_eq!(tape.value(fwd.rel_logits).dim(), (6, 4));
        assert_eq!(tape.value(fwd.ent_logits).dim(), (3, 3));
        assert_eq!(tape.value(fwd.p_contrast).dim(), (6, 32));
        // Projection rows are unit-norm within 1e-6.
        for rep in [fwd.p_contrast, fwd.t_contrast] {
            for row in tape.value(rep).outer_iter() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-6);
            }
        }
        // Entity softmax rows sum to 1.
        let probs = crate::tensor::softmax_matrix(tape.value(fwd.ent_logits), None);
        for row in probs.outer_iter() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn forward_is_pure_given_inputs() {
        let model = toy_model();
        let prepared = prepare_sample(&toy_sample(4), &model.tables, 0).unwrap();
        let view = FeatureView::from_bundle(&prepared.bundle);
        let run = || {
            let mut tape = Tape::new(&model.store);
            let fwd = forward_sample(
                &mut tape,
                &model.params,
                &model.tables,
                &prepared,
                &view,
                Some(&prepared.ent_labels),
                &AblationFlags::default(),
                None,
            )
            .unwrap();
            tape.value(fwd.rel_logits).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn branch_bypass_changes_outputs_but_keeps_shapes() {
        let model = toy_model();
        let prepared = prepare_sample(&toy_sample(3), &model.tables, 0).unwrap();
        let view = FeatureView::from_bundle(&prepared.bundle);
        let logits = |use_p: bool, use_t: bool| {
            let mut tape = Tape::new(&model.store);
            let flags = AblationFlags {
                use_p,
                use_t,
                use_a: false,
                use_c: false,
            };
            let fwd = forward_sample(
                &mut tape,
                &model.params,
                &model.tables,
                &prepared,
                &view,
                Some(&prepared.ent_labels),
                &flags,
                None,
            )
            .unwrap();
            tape.value(fwd.rel_logits).clone()
        };
        let full = logits(true, true);
        let p_only = logits(true, false);
        let t_only = logits(false, true);
        let neither = logits(false, false);
        assert_eq!(full.dim(), p_only.dim());
        assert_ne!(full, p_only);
        assert_ne!(full, t_only);
        assert_ne!(p_only, neither);
    }

    #[test]
    fn probed_ca_weights_are_zero_off_subject_object() {
        let model = toy_model();
        let prepared = prepare_sample(&toy_sample(4), &model.tables, 0).unwrap();
        let view = FeatureView::from_bundle(&prepared.bundle);
        let mut tape = Tape::new(&model.store);
        let mut probe = AttnProbe::default();
        forward_sample(
            &mut tape,
            &model.params,
            &model.tables,
            &prepared,
            &view,
            Some(&prepared.ent_labels),
            &AblationFlags::default(),
            Some(&mut probe),
        )
        .unwrap();
        // cue_layers x heads weight matrices.
        assert_eq!(
            probe.prd_ca_xy_weights.len(),
            model.dims.cue_layers * model.dims.heads
        );
        for &w in &probe.prd_ca_xy_weights {
            let weights = tape.value(w);
            assert_eq!(weights.dim(), (prepared.bundle.num_pairs(), 4));
            for (row, &(i, j)) in prepared.bundle.pair_index.iter().enumerate() {
                let mut row_sum = 0.0;
                for c in 0..weights.ncols() {
                    if c != i && c != j {
                        assert_eq!(weights[(row, c)], 0.0, "leak at pair {row} entity {c}");
                    }
                    row_sum += weights[(row, c)];
                }
                assert_abs_diff_eq!(row_sum, 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn augment_identity_and_determinism() {
        let model = toy_model();
        let prepared = prepare_sample(&toy_sample(3), &model.tables, 0).unwrap();
        let off = AugmentConfig::disabled();
        let (a, b) = two_view_augment(&prepared.bundle, &off, 5);
        assert_eq!(a.entity, b.entity);
        assert_eq!(*a.entity, prepared.bundle.entity_features);

        let on = AugmentConfig::default();
        let (a1, b1) = two_view_augment(&prepared.bundle, &on, 5);
        let (a2, b2) = two_view_augment(&prepared.bundle, &on, 5);
        assert_eq!(a1.entity, a2.entity);
        assert_eq!(b1.entity, b2.entity);
        assert_ne!(a1.entity, b1.entity);
        let (a3, _) = two_view_augment(&prepared.bundle, &on, 6);
        assert_ne!(a1.entity, a3.entity);
    }

    fn unit_rows(rows: Vec<Vec<f64>>) -> Matrix {
        let n = rows.len();
        let d = rows[0].len();
        let mut m = Matrix::zeros((n, d));
        for (i, r) in rows.iter().enumerate() {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, &v) in r.iter().enumerate() {
                m[(i, j)] = v / norm;
            }
        }
        m
    }

    #[test]
    fn contrastive_twin_pair_is_zero_loss() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let reps = tape.constant(unit_rows(vec![vec![1.0, 0.0], vec![1.0, 0.0]]));
        let loss = supervised_contrastive(&mut tape, reps, &[3, 3], 1.0).unwrap();
        assert_abs_diff_eq!(tape.scalar(loss), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn contrastive_hand_computed_example() {
        // Batch {x, x, -x} labels {A, A, B}: anchor losses are
        // log(1 + e^-2) for the two A anchors; the B anchor is skipped.
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let reps = tape.constant(unit_rows(vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
        ]));
        let loss = supervised_contrastive(&mut tape, reps, &[0, 0, 1], 1.0).unwrap();
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert_abs_diff_eq!(tape.scalar(loss), expected, epsilon = 1e-12);
    }

    #[test]
    fn contrastive_errors_without_positives() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let reps = tape.constant(unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        let err = supervised_contrastive(&mut tape, reps, &[0, 1], 1.0).unwrap_err();
        assert!(matches!(err, DrmError::NoPositivePair));
    }

    #[test]
    fn contrastive_is_nonnegative_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = StandardNormal;
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..5).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let labels: Vec<u64> = vec![0, 1, 0, 2, 1, 2, 0, 1];
        let store = ParamStore::new();

        let eval = |order: &[usize]| {
            let mut tape = Tape::new(&store);
            let m = unit_rows(order.iter().map(|&i| rows[i].clone()).collect());
            let l: Vec<u64> = order.iter().map(|&i| labels[i]).collect();
            let reps = tape.constant(m);
            let loss = supervised_contrastive(&mut tape, reps, &l, 0.5).unwrap();
            tape.scalar(loss)
        };
        let base = eval(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let perm = eval(&[5, 2, 7, 0, 3, 6, 1, 4]);
        assert!(base >= 0.0);
        assert_abs_diff_eq!(base, perm, epsilon = 1e-10);
    }

    #[test]
    fn contrastive_is_rotation_invariant() {
        // A global rotation preserves cosine similarities.
        let rows = vec![
            vec![1.0, 0.2, 0.0],
            vec![0.9, -0.1, 0.3],
            vec![-0.5, 0.8, 0.1],
            vec![0.2, 0.4, -0.9],
        ];
        let labels = [0u64, 0, 1, 1];
        let store = ParamStore::new();
        let theta: f64 = 0.83;
        // Rotation in the (0, 2) plane.
        let rot = |v: &[f64]| {
            vec![
                v[0] * theta.cos() - v[2] * theta.sin(),
                v[1],
                v[0] * theta.sin() + v[2] * theta.cos(),
            ]
        };
        let mut t1 = Tape::new(&store);
        let r1 = t1.constant(unit_rows(rows.clone()));
        let l1 = supervised_contrastive(&mut t1, r1, &labels, 0.3).unwrap();
        let mut t2 = Tape::new(&store);
        let r2 = t2.constant(unit_rows(rows.iter().map(|r| rot(r)).collect()));
        let l2 = supervised_contrastive(&mut t2, r2, &labels, 0.3).unwrap();
        assert_abs_diff_eq!(t1.scalar(l1), t2.scalar(l2), epsilon = 1e-10);
    }

    #[test]
    fn lower_temperature_sharpens_hard_easy_gap() {
        // Hard negatives sit even closer to the anchor than its positive,
        // easy ones far away; the loss gap must then grow monotonically as
        // the temperature drops.
        let hard = vec![
            vec![1.0, 0.0],
            vec![0.995, 0.0998],
            vec![0.9998, 0.02],
            vec![0.999, -0.045],
        ];
        let easy = vec![
            vec![1.0, 0.0],
            vec![0.995, 0.0998],
            vec![-1.0, 0.2],
            vec![-0.9, -0.5],
        ];
        let labels = [0u64, 0, 1, 2];
        let store = ParamStore::new();
        let loss_at = |rows: &Vec<Vec<f64>>, tau: f64| {
            let mut tape = Tape::new(&store);
            let reps = tape.constant(unit_rows(rows.clone()));
            let l = supervised_contrastive(&mut tape, reps, &labels, tau).unwrap();
            tape.scalar(l)
        };
        let mut prev_gap = f64::NEG_INFINITY;
        for tau in [1.0, 0.5, 0.2, 0.1] {
            let gap = loss_at(&hard, tau) - loss_at(&easy, tau);
            assert!(
                gap > prev_gap,
                "gap must grow as tau shrinks: {gap} <= {prev_gap} at tau={tau}"
            );
            prev_gap = gap;
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_forward() {
        let model = toy_model();
        let prepared = prepare_sample(&toy_sample(3), &model.tables, 0).unwrap();
        let view = FeatureView::from_bundle(&prepared.bundle);

        let forward = |m: &DrmModel| {
            let mut tape = Tape::new(&m.store);
            let fwd = forward_sample(
                &mut tape,
                &m.params,
                &m.tables,
                &prepared,
                &view,
                Some(&prepared.ent_labels),
                &AblationFlags::default(),
                None,
            )
            .unwrap();
            tape.value(fwd.rel_logits).clone()
        };
        let before = forward(&model);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = model.to_checkpoint(serde_json::json!({"test": true}));
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.version, CHECKPOINT_VERSION);
        let restored = DrmModel::from_checkpoint(&loaded).unwrap();
        let after = forward(&restored);
        assert_eq!(before, after, "restored forward must be bit-identical");
        assert_eq!(model.encoder_digest(), restored.encoder_digest());
    }

    #[test]
    fn triplet_key_round_trips() {
        let key = triplet_key(19, 9, 7);
        assert_eq!(split_triplet_key(key), (19, 9, 7));
    }
}

//! Multi-head attention, self/cross-attention units, the two-stream
//! hybrid-attention layer, and the stacked entity encoder.
//!
//! Each unit is the conventional pre-norm transformer block: attention with
//! a residual, then a two-layer feed-forward with a residual. A hybrid
//! layer runs one self-attention unit and one cross-attention unit per
//! stream and fuses their outputs by addition.

use crate::tensor::{xavier_init, zeros, Mask, Matrix, NodeId, ParamId, ParamStore, Tape};
use crate::{DrmError, Result};
use rand::Rng;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self::init_scaled(store, rng, name, d_in, d_out, 1.0)
    }

    /// Xavier init with an extra scale factor; residual-block output
    /// projections start small so deep stacks stay stable under SGD.
    pub fn init_scaled<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        scale: f64,
    ) -> Self {
        let mut w = xavier_init(d_in, d_out, rng);
        if scale != 1.0 {
            w.mapv_inplace(|v| v * scale);
        }
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), zeros(1, d_out)),
        }
    }

    pub fn collect_ids(&self, out: &mut Vec<ParamId>) {
        out.push(self.w);
        out.push(self.b);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::from_elem((1, d), 1.0)),
            beta: store.add(format!("{name}.beta"), zeros(1, d)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm_rows(x, g, b)
    }

    pub fn collect_ids(&self, out: &mut Vec<ParamId>) {
        out.push(self.gamma);
        out.push(self.beta);
    }
}

/// Projection weights for one multi-head attention module.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must divide into heads");
        Self {
            wq: LinearParams::init(store, rng, &format!("{name}.wq"), dim, dim),
            wk: LinearParams::init(store, rng, &format!("{name}.wk"), dim, dim),
            wv: LinearParams::init(store, rng, &format!("{name}.wv"), dim, dim),
            wo: LinearParams::init(store, rng, &format!("{name}.wo"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn collect_ids(&self, out: &mut Vec<ParamId>) {
        self.wq.collect_ids(out);
        self.wk.collect_ids(out);
        self.wv.collect_ids(out);
        self.wo.collect_ids(out);
    }
}

/// Validate an attention mask: shape n_q x n_k with at least one allowed
/// key per query row.
pub fn validate_mask(mask: &Mask, n_q: usize, n_k: usize) -> Result<()> {
    if mask.dim() != (n_q, n_k) {
        return Err(DrmError::ShapeMismatch {
            op: "multi_head_attention".into(),
            details: format!(
                "mask is {:?}, queries x keys is ({n_q}, {n_k})",
                mask.dim()
            ),
        });
    }
    for (row, r) in mask.outer_iter().enumerate() {
        if !r.iter().any(|&allowed| allowed) {
            return Err(DrmError::AllMaskedRow { row });
        }
    }
    Ok(())
}

/// Scaled dot-product multi-head attention with optional masking.
///
/// Masked logits are dropped before the softmax, so disallowed keys get
/// exactly zero weight.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    mask: Option<Arc<Mask>>,
    params: &AttentionParams,
) -> Result<NodeId> {
    multi_head_attention_probed(tape, q_in, k_in, v_in, mask, params).map(|(out, _)| out)
}

/// Like [`multi_head_attention`], additionally returning the per-head
/// post-softmax weight nodes for inspection.
pub fn multi_head_attention_probed(
    tape: &mut Tape,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    mask: Option<Arc<Mask>>,
    params: &AttentionParams,
) -> Result<(NodeId, Vec<NodeId>)> {
    let d = params.dim;
    let (n_q, dq) = tape.value(q_in).dim();
    let (n_k, dk) = tape.value(k_in).dim();
    let (n_v, dv) = tape.value(v_in).dim();
    if dq != d || dk != d || dv != d || n_k != n_v {
        return Err(DrmError::ShapeMismatch {
            op: "multi_head_attention".into(),
            details: format!(
                "q {n_q}x{dq}, k {n_k}x{dk}, v {n_v}x{dv} against model dim {d}"
            ),
        });
    }
    if let Some(m) = &mask {
        validate_mask(m, n_q, n_k)?;
    }

    let q = tape.linear(q_in, params.wq.w, params.wq.b);
    let k = tape.linear(k_in, params.wk.w, params.wk.b);
    let v = tape.linear(v_in, params.wv.w, params.wv.b);

    let d_head = d / params.heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(params.heads);
    let mut weight_nodes = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let lo = h * d_head;
        let hi = lo + d_head;
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let scores = tape.matmul_tb(qh, kh);
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores, mask.clone());
        weight_nodes.push(weights);
        head_outputs.push(tape.matmul(weights, vh));
    }
    let merged = tape.concat_cols(&head_outputs);
    Ok((tape.linear(merged, params.wo.w, params.wo.b), weight_nodes))
}

/// One pre-norm attention unit: attention + residual, feed-forward + residual.
/// Self-attention units leave `ln_kv` unset and attend over their own input.
#[derive(Debug, Clone)]
pub struct AttnUnitParams {
    pub ln_q: LayerNormParams,
    pub ln_kv: Option<LayerNormParams>,
    pub attn: AttentionParams,
    pub ln_ff: LayerNormParams,
    pub ff1: LinearParams,
    pub ff2: LinearParams,
}

impl AttnUnitParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        cross: bool,
    ) -> Self {
        let unit = Self {
            ln_q: LayerNormParams::init(store, &format!("{name}.ln_q"), dim),
            ln_kv: cross.then(|| LayerNormParams::init(store, &format!("{name}.ln_kv"), dim)),
            attn: AttentionParams::init(store, rng, &format!("{name}.attn"), dim, heads),
            ln_ff: LayerNormParams::init(store, &format!("{name}.ln_ff"), dim),
            ff1: LinearParams::init(store, rng, &format!("{name}.ff1"), dim, dim),
            ff2: LinearParams::init_scaled(store, rng, &format!("{name}.ff2"), dim, dim, 0.25),
        };
        // Damp the attention output projection the same way.
        let wo = store.value(unit.attn.wo.w).clone() * 0.25;
        store.set(unit.attn.wo.w, wo);
        unit
    }

    pub fn collect_ids(&self, out: &mut Vec<ParamId>) {
        self.ln_q.collect_ids(out);
        if let Some(ln) = &self.ln_kv {
            ln.collect_ids(out);
        }
        self.attn.collect_ids(out);
        self.ln_ff.collect_ids(out);
        self.ff1.collect_ids(out);
        self.ff2.collect_ids(out);
    }
}

/// Run one unit. `context` is None for self-attention; for cross-attention
/// it supplies the key/value stream and the optional mask restricts which
/// context rows each query may attend.
pub fn attention_unit(
    tape: &mut Tape,
    x: NodeId,
    context: Option<NodeId>,
    mask: Option<Arc<Mask>>,
    params: &AttnUnitParams,
) -> Result<NodeId> {
    let q = params.ln_q.apply(tape, x);
    let kv = match context {
        Some(y) => params
            .ln_kv
            .as_ref()
            .expect("cross unit has ln_kv")
            .apply(tape, y),
        None => q,
    };
    let attn = multi_head_attention(tape, q, kv, kv, mask, &params.attn)?;
    let h = tape.add(x, attn);
    let hn = params.ln_ff.apply(tape, h);
    let f = tape.linear(hn, params.ff1.w, params.ff1.b);
    let f = tape.relu(f);
    let f = tape.linear(f, params.ff2.w, params.ff2.b);
    Ok(tape.add(h, f))
}

/// Two self-attention and two cross-attention units, one pair per stream.
#[derive(Debug, Clone)]
pub struct HaLayerParams {
    pub sa_x: AttnUnitParams,
    pub sa_y: AttnUnitParams,
    pub ca_xy: AttnUnitParams,
    pub ca_yx: AttnUnitParams,
}

impl HaLayerParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            sa_x: AttnUnitParams::init(store, rng, &format!("{name}.sa_x"), dim, heads, false),
            sa_y: AttnUnitParams::init(store, rng, &format!("{name}.sa_y"), dim, heads, false),
            ca_xy: AttnUnitParams::init(store, rng, &format!("{name}.ca_xy"), dim, heads, true),
            ca_yx: AttnUnitParams::init(store, rng, &format!("{name}.ca_yx"), dim, heads, true),
        }
    }

    pub fn collect_ids(&self, out: &mut Vec<ParamId>) {
        self.sa_x.collect_ids(out);
        self.sa_y.collect_ids(out);
        self.ca_xy.collect_ids(out);
        self.ca_yx.collect_ids(out);
    }
}

/// Cross-attention masks for one hybrid layer; self-attention is unmasked.
#[derive(Debug, Clone, Default)]
pub struct HaMasks {
    /// Restricts X-stream queries over Y-stream keys.
    pub ca_xy: Option<Arc<Mask>>,
    /// Restricts Y-stream queries over X-stream keys.
    pub ca_yx: Option<Arc<Mask>>,
}

/// One hybrid-attention layer:
/// X' = SA(X) + CA(X, Y) and Y' = SA(Y) + CA(Y, X).
pub fn ha_layer(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    params: &HaLayerParams,
    masks: &HaMasks,
) -> Result<(NodeId, NodeId)> {
    let dx = tape.value(x).ncols();
    let dy = tape.value(y).ncols();
    if dx != dy {
        return Err(DrmError::ShapeMismatch {
            op: "ha_layer".into(),
            details: format!("stream dims differ: {dx} vs {dy}"),
        });
    }
    let sa_x = attention_unit(tape, x, None, None, &params.sa_x)?;
    let ca_x = attention_unit(tape, x, Some(y), masks.ca_xy.clone(), &params.ca_xy)?;
    let x_out = tape.add(sa_x, ca_x);

    let sa_y = attention_unit(tape, y, None, None, &params.sa_y)?;
    let ca_y = attention_unit(tape, y, Some(x), masks.ca_yx.clone(), &params.ca_yx)?;
    let y_out = tape.add(sa_y, ca_y);
    Ok((x_out, y_out))
}

/// Entity encoder: project the semantic stream to the model dim, run the
/// hybrid-attention stack, and sum the final streams.
#[derive(Debug, Clone)]
pub struct EntityEncoderParams {
    pub sem_proj: LinearParams,
    pub layers: Vec<HaLayerParams>,
}

impl EntityEncoderParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        d_semantic: usize,
        dim: usize,
        heads: usize,
        num_layers: usize,
    ) -> Self {
        Self {
            sem_proj: LinearParams::init(store, rng, "ent.sem_proj", d_semantic, dim),
            layers: (0..num_layers)
                .map(|l| HaLayerParams::init(store, rng, &format!("ent.ha{l}"), dim, heads))
                .collect(),
        }
    }

    pub fn collect_ids(&self, out: &mut Vec<ParamId>) {
        self.sem_proj.collect_ids(out);
        for layer in &self.layers {
            layer.collect_ids(out);
        }
    }
}

/// Refine entity features with semantic context: returns X + Y of the last
/// hybrid layer.
pub fn entity_encoder(
    tape: &mut Tape,
    entity_features: NodeId,
    semantic: NodeId,
    params: &EntityEncoderParams,
) -> Result<NodeId> {
    let n = tape.value(entity_features).nrows();
    if n == 0 {
        return Err(DrmError::ShapeMismatch {
            op: "entity_encoder".into(),
            details: "no entities".into(),
        });
    }
    if tape.value(semantic).nrows() != n {
        return Err(DrmError::ShapeMismatch {
            op: "entity_encoder".into(),
            details: format!(
                "entity rows {n} vs semantic rows {}",
                tape.value(semantic).nrows()
            ),
        });
    }
    let mut x = entity_features;
    let mut y = tape.linear(semantic, params.sem_proj.w, params.sem_proj.b);
    let masks = HaMasks::default();
    for layer in &params.layers {
        let (nx, ny) = ha_layer(tape, x, y, layer, &masks)?;
        x = nx;
        y = ny;
    }
    Ok(tape.add(x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff, gaussian_init, rel_err};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Identity-projection attention params (wq=wk=wv=wo=I, b=0) so the
    /// output exposes raw attention weights.
    fn identity_attention(store: &mut ParamStore, dim: usize, heads: usize) -> AttentionParams {
        let eye = Matrix::from_shape_fn((dim, dim), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let lin = |store: &mut ParamStore, name: &str| LinearParams {
            w: store.add(format!("{name}.w"), eye.clone()),
            b: store.add(format!("{name}.b"), zeros(1, dim)),
        };
        AttentionParams {
            wq: lin(store, "wq"),
            wk: lin(store, "wk"),
            wv: lin(store, "wv"),
            wo: lin(store, "wo"),
            heads,
            dim,
        }
    }

    #[test]
    fn single_key_gets_weight_one() {
        let mut store = ParamStore::new();
        let p = identity_attention(&mut store, 4, 2);
        let mut tape = Tape::new(&store);
        let q = tape.constant(gaussian_init(3, 4, 1.0, &mut rng(0)));
        let kv = tape.constant(gaussian_init(1, 4, 1.0, &mut rng(1)));
        let out = multi_head_attention(&mut tape, q, kv, kv, None, &p).unwrap();
        // One key: every query returns exactly that value row.
        let kv_row = tape.value(kv).row(0).to_owned();
        for r in 0..3 {
            for c in 0..4 {
                assert_abs_diff_eq!(tape.value(out)[(r, c)], kv_row[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mask_restricting_to_one_key_selects_it_exactly() {
        let mut store = ParamStore::new();
        let p = identity_attention(&mut store, 4, 2);
        let mut tape = Tape::new(&store);
        let q = tape.constant(gaussian_init(2, 4, 1.0, &mut rng(2)));
        let kv = tape.constant(gaussian_init(5, 4, 1.0, &mut rng(3)));
        // Query 0 may only see key 3, query 1 only key 1.
        let mask = Arc::new(Mask::from_shape_fn((2, 5), |(r, c)| {
            (r == 0 && c == 3) || (r == 1 && c == 1)
        }));
        let out = multi_head_attention(&mut tape, q, kv, kv, Some(mask), &p).unwrap();
        for c in 0..4 {
            assert_abs_diff_eq!(tape.value(out)[(0, c)], tape.value(kv)[(3, c)], epsilon = 1e-12);
            assert_abs_diff_eq!(tape.value(out)[(1, c)], tape.value(kv)[(1, c)], epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_keys_average_values_uniformly() {
        let mut store = ParamStore::new();
        let p = identity_attention(&mut store, 4, 2);
        let mut tape = Tape::new(&store);
        let q = tape.constant(gaussian_init(2, 4, 1.0, &mut rng(4)));
        // All keys identical -> equal logits -> 1/n_k weights; values differ.
        let k = tape.constant(Matrix::from_elem((3, 4), 0.7));
        let v = tape.constant(gaussian_init(3, 4, 1.0, &mut rng(5)));
        let out = multi_head_attention(&mut tape, q, k, v, None, &p).unwrap();
        let mean = tape.value(v).sum_axis(ndarray::Axis(0)) / 3.0;
        for r in 0..2 {
            for c in 0..4 {
                assert_abs_diff_eq!(tape.value(out)[(r, c)], mean[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn all_masked_row_is_an_error() {
        let mut store = ParamStore::new();
        let p = identity_attention(&mut store, 4, 2);
        let mut tape = Tape::new(&store);
        let q = tape.constant(gaussian_init(2, 4, 1.0, &mut rng(6)));
        let kv = tape.constant(gaussian_init(3, 4, 1.0, &mut rng(7)));
        let mask = Arc::new(Mask::from_shape_fn((2, 3), |(r, _)| r != 1));
        let err = multi_head_attention(&mut tape, q, kv, kv, Some(mask), &p).unwrap_err();
        assert!(matches!(err, DrmError::AllMaskedRow { row: 1 }));
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let mut r = rng(8);
        let p = AttentionParams::init(&mut store, &mut r, "attn", 4, 2);
        let mut tape = Tape::new(&store);
        let q = tape.constant(gaussian_init(2, 6, 1.0, &mut r));
        let kv = tape.constant(gaussian_init(3, 4, 1.0, &mut r));
        assert!(matches!(
            multi_head_attention(&mut tape, q, kv, kv, None, &p),
            Err(DrmError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn single_token_ha_layer_is_defined_and_additive() {
        let mut store = ParamStore::new();
        let mut r = rng(9);
        let p = HaLayerParams::init(&mut store, &mut r, "ha", 8, 2);
        let xv = gaussian_init(1, 8, 1.0, &mut r);
        let yv = gaussian_init(1, 8, 1.0, &mut r);

        let mut tape = Tape::new(&store);
        let x = tape.constant(xv.clone());
        let y = tape.constant(yv.clone());
        let (xo, yo) = ha_layer(&mut tape, x, y, &p, &HaMasks::default()).unwrap();

        // X' must equal SA(X) + CA(X, Y) computed unit by unit.
        let mut check = Tape::new(&store);
        let x2 = check.constant(xv);
        let y2 = check.constant(yv);
        let sa = attention_unit(&mut check, x2, None, None, &p.sa_x).unwrap();
        let ca = attention_unit(&mut check, x2, Some(y2), None, &p.ca_xy).unwrap();
        let expect = check.add(sa, ca);
        for c in 0..8 {
            assert_abs_diff_eq!(
                tape.value(xo)[(0, c)],
                check.value(expect)[(0, c)],
                epsilon = 1e-12
            );
        }
        assert_eq!(tape.value(yo).dim(), (1, 8));
    }

    #[test]
    fn swapping_streams_and_params_swaps_outputs() {
        let mut store = ParamStore::new();
        let mut r = rng(10);
        let p = HaLayerParams::init(&mut store, &mut r, "ha", 8, 2);
        let swapped = HaLayerParams {
            sa_x: p.sa_y.clone(),
            sa_y: p.sa_x.clone(),
            ca_xy: p.ca_yx.clone(),
            ca_yx: p.ca_xy.clone(),
        };
        let xv = gaussian_init(3, 8, 1.0, &mut r);
        let yv = gaussian_init(2, 8, 1.0, &mut r);

        let mut t1 = Tape::new(&store);
        let x = t1.constant(xv.clone());
        let y = t1.constant(yv.clone());
        let (xo, yo) = ha_layer(&mut t1, x, y, &p, &HaMasks::default()).unwrap();

        let mut t2 = Tape::new(&store);
        let y2 = t2.constant(yv);
        let x2 = t2.constant(xv);
        let (yo2, xo2) = ha_layer(&mut t2, y2, x2, &swapped, &HaMasks::default()).unwrap();

        assert_eq!(t1.value(xo), t2.value(xo2));
        assert_eq!(t1.value(yo), t2.value(yo2));
    }

    #[test]
    fn entity_encoder_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut r = rng(11);
        let p = EntityEncoderParams::init(&mut store, &mut r, 4, 8, 2, 2);
        let v = gaussian_init(4, 8, 1.0, &mut r);
        let s = gaussian_init(4, 4, 1.0, &mut r);
        let perm = [2usize, 0, 3, 1];

        let mut t1 = Tape::new(&store);
        let vn = t1.constant(v.clone());
        let sn = t1.constant(s.clone());
        let out = entity_encoder(&mut t1, vn, sn, &p).unwrap();

        let vp = Matrix::from_shape_fn((4, 8), |(i, j)| v[(perm[i], j)]);
        let sp = Matrix::from_shape_fn((4, 4), |(i, j)| s[(perm[i], j)]);
        let mut t2 = Tape::new(&store);
        let vn2 = t2.constant(vp);
        let sn2 = t2.constant(sp);
        let out2 = entity_encoder(&mut t2, vn2, sn2, &p).unwrap();

        for (new_i, &old_i) in perm.iter().enumerate() {
            for c in 0..8 {
                assert_abs_diff_eq!(
                    t2.value(out2)[(new_i, c)],
                    t1.value(out)[(old_i, c)],
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn entity_encoder_handles_single_entity() {
        let mut store = ParamStore::new();
        let mut r = rng(12);
        let p = EntityEncoderParams::init(&mut store, &mut r, 4, 8, 2, 4);
        let mut tape = Tape::new(&store);
        let v = tape.constant(gaussian_init(1, 8, 1.0, &mut r));
        let s = tape.constant(gaussian_init(1, 4, 1.0, &mut r));
        let out = entity_encoder(&mut tape, v, s, &p).unwrap();
        assert_eq!(tape.value(out).dim(), (1, 8));
        assert!(tape.value(out).iter().all(|v| v.is_finite()));
    }

    /// Central-difference gradient check over a random subset of parameters.
    fn spot_check_grads<F>(store: &mut ParamStore, n_checks: usize, seed: u64, f: F)
    where
        F: Fn(&ParamStore) -> (f64, crate::tensor::Gradients),
    {
        let (_, grads) = f(store);
        let mut r = rng(seed);
        for _ in 0..n_checks {
            let id = r.random_range(0..store.len());
            let (rows, cols) = store.value(id).dim();
            let i = r.random_range(0..rows);
            let j = r.random_range(0..cols);
            let num = finite_diff(store, id, i, j, 1e-4, |s| f(s).0);
            let ana = grads.get(id).map_or(0.0, |g| g[(i, j)]);
            assert!(
                rel_err(ana, num) < 1e-3,
                "{} [{i},{j}]: analytic {ana} vs numeric {num}",
                store.name(id)
            );
        }
    }

    #[test]
    fn ha_layer_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng(13);
        let p = HaLayerParams::init(&mut store, &mut r, "ha", 8, 2);
        let xv = Arc::new(gaussian_init(3, 8, 1.0, &mut r));
        let yv = Arc::new(gaussian_init(2, 8, 1.0, &mut r));
        let wx = Arc::new(gaussian_init(3, 8, 1.0, &mut r));
        let wy = Arc::new(gaussian_init(2, 8, 1.0, &mut r));
        spot_check_grads(&mut store, 60, 14, |s| {
            let mut t = Tape::new(s);
            let x = t.constant_arc(Arc::clone(&xv));
            let y = t.constant_arc(Arc::clone(&yv));
            let (xo, yo) = ha_layer(&mut t, x, y, &p, &HaMasks::default()).unwrap();
            // Weighted sums make the loss sensitive to every output entry.
            let xw = t.mul_const(xo, Arc::clone(&wx));
            let yw = t.mul_const(yo, Arc::clone(&wy));
            let sx = t.sum_all(xw);
            let sy = t.sum_all(yw);
            let loss = t.add(sx, sy);
            let g = t.backward(loss);
            (t.scalar(loss), g)
        });
    }

    #[test]
    fn entity_encoder_stack_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng(15);
        let p = EntityEncoderParams::init(&mut store, &mut r, 4, 8, 2, 4);
        let v = Arc::new(gaussian_init(3, 8, 1.0, &mut r));
        let s_in = Arc::new(gaussian_init(3, 4, 1.0, &mut r));
        let w = Arc::new(gaussian_init(3, 8, 1.0, &mut r));
        spot_check_grads(&mut store, 60, 16, |st| {
            let mut t = Tape::new(st);
            let vn = t.constant_arc(Arc::clone(&v));
            let sn = t.constant_arc(Arc::clone(&s_in));
            let out = entity_encoder(&mut t, vn, sn, &p).unwrap();
            let weighted = t.mul_const(out, Arc::clone(&w));
            let loss = t.sum_all(weighted);
            let g = t.backward(loss);
            (t.scalar(loss), g)
        });
    }
}

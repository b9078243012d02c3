//! Detector-backbone stand-in: deterministic entity, semantic, and union
//! features computed from boxes, categories, and per-entity appearance seeds.

use crate::synthgraph::{BBox, SceneGraphSample};
use crate::tensor::Matrix;
use crate::{derive_seed, DrmError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Number of features emitted by [`spatial_encoding`] / [`relative_spatial`].
pub const SPATIAL_DIM: usize = 15;
/// Appearance component of entity and union features.
pub const APPEARANCE_DIM: usize = 49;
/// Entity feature dim: spatial encoding + appearance vector.
pub const ENTITY_DIM: usize = SPATIAL_DIM + APPEARANCE_DIM;
/// Union feature dim: relative spatial code + averaged appearance.
pub const UNION_DIM: usize = SPATIAL_DIM + APPEARANCE_DIM;
/// Semantic embedding dim.
pub const SEMANTIC_DIM: usize = 32;

/// Fixed seeded embedding tables; frozen for the lifetime of a run and
/// persisted inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTables {
    pub num_categories: usize,
    pub seed: u64,
    /// num_categories x SEMANTIC_DIM, unit-norm rows.
    semantic: Vec<Vec<f64>>,
    /// num_categories x APPEARANCE_DIM, unit-norm rows.
    appearance_base: Vec<Vec<f64>>,
    /// Scale of the per-entity appearance perturbation.
    pub appearance_noise: f64,
}

impl EmbeddingTables {
    pub fn new(num_categories: usize, seed: u64) -> Self {
        let semantic =
            seeded_unit_rows(num_categories, SEMANTIC_DIM, derive_seed(seed, "semantic"));
        let appearance_base = seeded_unit_rows(
            num_categories,
            APPEARANCE_DIM,
            derive_seed(seed, "appearance"),
        );
        Self {
            num_categories,
            seed,
            semantic,
            appearance_base,
            appearance_noise: 0.15,
        }
    }

    pub fn semantic_row(&self, category: usize) -> &[f64] {
        &self.semantic[category]
    }

    /// Deterministic appearance vector for (category, appearance_seed):
    /// the category base direction plus a small seeded Gaussian offset.
    pub fn appearance(&self, category: usize, appearance_seed: u64) -> Vec<f64> {
        let base = &self.appearance_base[category];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(appearance_seed, "entity-appearance"));
        let normal = StandardNormal;
        let mut v: Vec<f64> = base
            .iter()
            .map(|b| {
                let z: f64 = normal.sample(&mut rng);
                b + z * self.appearance_noise
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    /// Rows of the semantic table for a list of category labels.
    pub fn semantic_matrix(&self, labels: &[usize]) -> Matrix {
        let mut out = Matrix::zeros((labels.len(), SEMANTIC_DIM));
        for (i, &c) in labels.iter().enumerate() {
            for (j, &v) in self.semantic[c].iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }
}

fn seeded_unit_rows(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    (0..rows)
        .map(|_| {
            let mut row: Vec<f64> = (0..cols).map(|_| normal.sample(&mut rng)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= norm);
            row
        })
        .collect()
}

/// Per-sample feature tensors for all entities and ordered pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// N x ENTITY_DIM.
    pub entity_features: Matrix,
    /// N x SEMANTIC_DIM.
    pub semantic: Matrix,
    /// M x UNION_DIM with M = N(N-1).
    pub union: Matrix,
    /// Ordered (subject, object) pairs aligned with `union` rows.
    pub pair_index: Vec<(usize, usize)>,
}

impl FeatureBundle {
    pub fn num_entities(&self) -> usize {
        self.entity_features.nrows()
    }

    pub fn num_pairs(&self) -> usize {
        self.pair_index.len()
    }

    /// Row index of ordered pair (i, j) in `union`/`pair_index`.
    pub fn pair_row(&self, subject: usize, object: usize) -> Option<usize> {
        self.pair_index
            .iter()
            .position(|&(s, o)| s == subject && o == object)
    }
}

/// Spatial encoding of a single box.
///
/// Layout: x1, y1, x2, y2, cx, cy, w, h, area, aspect, ln w, ln h,
/// ln area, perimeter, diagonal.
pub fn spatial_encoding(b: &BBox) -> Result<[f64; SPATIAL_DIM]> {
    if !b.is_valid() || b.area() <= 0.0 {
        return Err(DrmError::DegenerateBox(format!(
            "({}, {}, {}, {})",
            b.x1, b.y1, b.x2, b.y2
        )));
    }
    let (cx, cy) = b.center();
    let w = b.width();
    let h = b.height();
    let area = b.area();
    Ok([
        b.x1,
        b.y1,
        b.x2,
        b.y2,
        cx,
        cy,
        w,
        h,
        area,
        w / h,
        w.ln(),
        h.ln(),
        area.ln(),
        2.0 * (w + h),
        (w * w + h * h).sqrt(),
    ])
}

/// Relative spatial code for an ordered box pair (subject, object).
///
/// Layout: dx, dy, center distance, ln w-ratio, ln h-ratio, ln area-ratio,
/// IoU, union w, union h, union area, intersection w, intersection h,
/// intersection area, subject-contains-object, object-contains-subject.
pub fn relative_spatial(subject: &BBox, object: &BBox) -> Result<[f64; SPATIAL_DIM]> {
    for b in [subject, object] {
        if !b.is_valid() || b.area() <= 0.0 {
            return Err(DrmError::DegenerateBox(format!(
                "({}, {}, {}, {})",
                b.x1, b.y1, b.x2, b.y2
            )));
        }
    }
    let (scx, scy) = subject.center();
    let (ocx, ocy) = object.center();
    let dx = ocx - scx;
    let dy = ocy - scy;
    let union = subject.union(object);
    let iw = (subject.x2.min(object.x2) - subject.x1.max(object.x1)).max(0.0);
    let ih = (subject.y2.min(object.y2) - subject.y1.max(object.y1)).max(0.0);
    Ok([
        dx,
        dy,
        (dx * dx + dy * dy).sqrt(),
        (subject.width() / object.width()).ln(),
        (subject.height() / object.height()).ln(),
        (subject.area() / object.area()).ln(),
        subject.iou(object),
        union.width(),
        union.height(),
        union.area(),
        iw,
        ih,
        iw * ih,
        if subject.contains(object) { 1.0 } else { 0.0 },
        if object.contains(subject) { 1.0 } else { 0.0 },
    ])
}

/// Produce the full feature bundle for one sample.
///
/// Pure in (sample, tables, seed); the seed only shifts the appearance
/// perturbation stream, so repeated calls agree bit-for-bit.
pub fn featurize(
    sample: &SceneGraphSample,
    tables: &EmbeddingTables,
    seed: u64,
) -> Result<FeatureBundle> {
    let n = sample.entities.len();
    if n < 2 {
        return Err(DrmError::TooFewEntities(n));
    }
    let mut entity_features = Matrix::zeros((n, ENTITY_DIM));
    let mut semantic = Matrix::zeros((n, SEMANTIC_DIM));
    let mut appearances: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (i, e) in sample.entities.iter().enumerate() {
        let spatial = spatial_encoding(&e.bbox)?;
        let app = tables.appearance(e.category_id, e.appearance_seed ^ seed);
        for (j, &v) in spatial.iter().enumerate() {
            entity_features[(i, j)] = v;
        }
        for (j, &v) in app.iter().enumerate() {
            entity_features[(i, SPATIAL_DIM + j)] = v;
        }
        for (j, &v) in tables.semantic_row(e.category_id).iter().enumerate() {
            semantic[(i, j)] = v;
        }
        appearances.push(app);
    }

    let m = n * (n - 1);
    let mut union = Matrix::zeros((m, UNION_DIM));
    let mut pair_index = Vec::with_capacity(m);
    let mut row = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let rel = relative_spatial(&sample.entities[i].bbox, &sample.entities[j].bbox)?;
            for (k, &v) in rel.iter().enumerate() {
                union[(row, k)] = v;
            }
            // Union appearance: mean of the endpoint appearance vectors.
            for k in 0..APPEARANCE_DIM {
                union[(row, SPATIAL_DIM + k)] = 0.5 * (appearances[i][k] + appearances[j][k]);
            }
            pair_index.push((i, j));
            row += 1;
        }
    }

    Ok(FeatureBundle {
        entity_features,
        semantic,
        union,
        pair_index,
    })
}

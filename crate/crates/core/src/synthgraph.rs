//! Synthetic long-tail scene-graph dataset: generation, persistence,
//! and frequency statistics.
//!
//! Relations are learnable from geometry and appearance alone: every
//! predicate comes with a box-placement template, and the predicate
//! marginal follows a Zipf law so the label distribution has the head/tail
//! structure the second training stage targets.

use crate::{derive_seed, DrmError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Axis-aligned box normalized to the unit square; y grows downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// `other` lies strictly inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 < other.x1 && self.y1 < other.y1 && self.x2 > other.x2 && self.y2 > other.y2
    }

    pub fn is_disjoint(&self, other: &BBox) -> bool {
        self.intersection_area(other) == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityInstance {
    pub category_id: usize,
    pub bbox: BBox,
    pub appearance_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationAnnotation {
    pub subject_index: usize,
    pub object_index: usize,
    pub predicate_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphSample {
    pub sample_id: String,
    pub entities: Vec<EntityInstance>,
    pub relations: Vec<RelationAnnotation>,
}

/// Box-placement template for one predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeometryRule {
    /// Subject above the object, vertically disjoint.
    Above,
    Below,
    LeftOf,
    RightOf,
    /// Partial overlap, neither box contains the other.
    Overlaps,
    /// Subject strictly inside the object.
    Inside,
    /// Object strictly inside the subject.
    Contains,
    /// Subject much larger than the object, boxes disjoint.
    Larger,
    Smaller,
    /// Similar-size disjoint boxes with close centers.
    Near,
}

impl GeometryRule {
    pub const ALL: [GeometryRule; 10] = [
        GeometryRule::Above,
        GeometryRule::Below,
        GeometryRule::LeftOf,
        GeometryRule::RightOf,
        GeometryRule::Overlaps,
        GeometryRule::Inside,
        GeometryRule::Contains,
        GeometryRule::Larger,
        GeometryRule::Smaller,
        GeometryRule::Near,
    ];

    /// Exact predicate on noise-free boxes produced by [`GeometryRule::sample_boxes`].
    pub fn holds(&self, subject: &BBox, object: &BBox) -> bool {
        let (scx, scy) = subject.center();
        let (ocx, ocy) = object.center();
        match self {
            GeometryRule::Above => subject.y2 <= object.y1 && scy < ocy,
            GeometryRule::Below => subject.y1 >= object.y2 && scy > ocy,
            GeometryRule::LeftOf => subject.x2 <= object.x1 && scx < ocx,
            GeometryRule::RightOf => subject.x1 >= object.x2 && scx > ocx,
            GeometryRule::Overlaps => {
                subject.iou(object) > 0.05
                    && !subject.contains(object)
                    && !object.contains(subject)
            }
            GeometryRule::Inside => object.contains(subject),
            GeometryRule::Contains => subject.contains(object),
            GeometryRule::Larger => {
                subject.is_disjoint(object) && subject.area() > 2.0 * object.area()
            }
            GeometryRule::Smaller => {
                subject.is_disjoint(object) && object.area() > 2.0 * subject.area()
            }
            GeometryRule::Near => {
                let d = ((scx - ocx).powi(2) + (scy - ocy).powi(2)).sqrt();
                let ratio = (subject.area() / object.area()).max(object.area() / subject.area());
                subject.is_disjoint(object) && d <= 0.22 && ratio <= 2.5
            }
        }
    }

    /// Draw a (subject, object) box pair satisfying the rule, then jitter
    /// every coordinate by `noise` (clamped back to validity).
    pub fn sample_boxes<R: Rng>(&self, rng: &mut R, noise: f64) -> (BBox, BBox) {
        let (s, o) = self.sample_clean(rng);
        (jitter_box(&s, noise, rng), jitter_box(&o, noise, rng))
    }

    fn sample_clean<R: Rng>(&self, rng: &mut R) -> (BBox, BBox) {
        match self {
            GeometryRule::Above => vertical_pair(rng),
            GeometryRule::Below => {
                let (upper, lower) = vertical_pair(rng);
                (lower, upper)
            }
            GeometryRule::LeftOf => horizontal_pair(rng),
            GeometryRule::RightOf => {
                let (left, right) = horizontal_pair(rng);
                (right, left)
            }
            GeometryRule::Overlaps => loop {
                let a = random_box(rng, 0.2, 0.4);
                let dx = a.width() * rng.random_range(0.3..0.7);
                let dy = a.height() * rng.random_range(0.3..0.7);
                let b = BBox::new(a.x1 + dx, a.y1 + dy, a.x2 + dx, a.y2 + dy);
                if in_unit(&b) && a.iou(&b) > 0.08 && !a.contains(&b) && !b.contains(&a) {
                    return (a, b);
                }
            },
            GeometryRule::Inside => nested_pair(rng),
            GeometryRule::Contains => {
                let (inner, outer) = nested_pair(rng);
                (outer, inner)
            }
            GeometryRule::Larger => sized_disjoint_pair(rng),
            GeometryRule::Smaller => {
                let (big, small) = sized_disjoint_pair(rng);
                (small, big)
            }
            GeometryRule::Near => loop {
                let a = random_box(rng, 0.08, 0.14);
                let (acx, acy) = a.center();
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let dist = rng.random_range(0.12..0.18);
                let w = a.width() * rng.random_range(0.8..1.2);
                let h = a.height() * rng.random_range(0.8..1.2);
                let bcx = acx + angle.cos() * dist;
                let bcy = acy + angle.sin() * dist;
                let b = BBox::new(bcx - w / 2.0, bcy - h / 2.0, bcx + w / 2.0, bcy + h / 2.0);
                if in_unit(&b) && a.is_disjoint(&b) {
                    return (a, b);
                }
            },
        }
    }
}

fn in_unit(b: &BBox) -> bool {
    b.is_valid() && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 1.0 && b.y2 <= 1.0
}

fn random_box<R: Rng>(rng: &mut R, min_side: f64, max_side: f64) -> BBox {
    let w = rng.random_range(min_side..max_side);
    let h = rng.random_range(min_side..max_side);
    let x1 = rng.random_range(0.0..1.0 - w);
    let y1 = rng.random_range(0.0..1.0 - h);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

/// (upper, lower): upper strictly above lower with a gap, x-ranges overlapping.
fn vertical_pair<R: Rng>(rng: &mut R) -> (BBox, BBox) {
    let gap: f64 = rng.random_range(0.05..0.15);
    let hu: f64 = rng.random_range(0.12..0.3);
    let hl: f64 = rng.random_range(0.12..(0.9 - hu - gap).min(0.3));
    let y1u: f64 = rng.random_range(0.0..1.0 - hu - gap - hl);
    let wu: f64 = rng.random_range(0.12..0.35);
    let wl: f64 = rng.random_range(0.12..0.35);
    let xu: f64 = rng.random_range(0.0..1.0 - wu);
    // Keep some horizontal overlap so the relation reads as above/below.
    let lo = (xu + wu * 0.25 - wl).max(0.0);
    let hi = (xu + wu * 0.75).min(1.0 - wl);
    let xl = if lo < hi { rng.random_range(lo..hi) } else { lo };
    let upper = BBox::new(xu, y1u, xu + wu, y1u + hu);
    let lower = BBox::new(xl, y1u + hu + gap, xl + wl, y1u + hu + gap + hl);
    (upper, lower)
}

/// (left, right): transpose of the vertical construction.
fn horizontal_pair<R: Rng>(rng: &mut R) -> (BBox, BBox) {
    let (upper, lower) = vertical_pair(rng);
    let left = BBox::new(upper.y1, upper.x1, upper.y2, upper.x2);
    let right = BBox::new(lower.y1, lower.x1, lower.y2, lower.x2);
    (left, right)
}

/// (inner, outer) with a strict margin.
fn nested_pair<R: Rng>(rng: &mut R) -> (BBox, BBox) {
    let outer = random_box(rng, 0.4, 0.7);
    let margin = 0.02;
    let w = rng.random_range(0.08..outer.width() / 2.5);
    let h = rng.random_range(0.08..outer.height() / 2.5);
    let x1 = rng.random_range(outer.x1 + margin..outer.x2 - margin - w);
    let y1 = rng.random_range(outer.y1 + margin..outer.y2 - margin - h);
    (BBox::new(x1, y1, x1 + w, y1 + h), outer)
}

/// (big, small) disjoint with area ratio >= 4.
fn sized_disjoint_pair<R: Rng>(rng: &mut R) -> (BBox, BBox) {
    loop {
        let big = random_box(rng, 0.38, 0.55);
        let small = random_box(rng, 0.08, 0.16);
        if big.is_disjoint(&small) && big.area() >= 4.0 * small.area() {
            return (big, small);
        }
    }
}

fn jitter_box<R: Rng>(b: &BBox, noise: f64, rng: &mut R) -> BBox {
    if noise == 0.0 {
        return *b;
    }
    use rand_distr::Distribution;
    let normal = rand_distr::StandardNormal;
    let mut j = |v: f64| -> f64 {
        let z: f64 = normal.sample(rng);
        (v + z * noise).clamp(0.0, 1.0)
    };
    let mut out = BBox::new(j(b.x1), j(b.y1), j(b.x2), j(b.y2));
    if out.x2 - out.x1 < 0.01 {
        out.x2 = (out.x1 + 0.01).min(1.0);
        out.x1 = out.x2 - 0.01;
    }
    if out.y2 - out.y1 < 0.01 {
        out.y2 = (out.y1 + 0.01).min(1.0);
        out.y1 = out.y2 - 0.01;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_entity_categories: usize,
    pub num_predicate_categories: usize,
    /// Skew of the predicate marginal; 0 means uniform.
    pub zipf_exponent: f64,
    /// Skew of the triplet-type draw within each predicate's compatibility set.
    pub secondary_zipf_exponent: f64,
    /// predicate id -> allowed (subject_category, object_category) pairs.
    pub triplet_compatibility: BTreeMap<usize, Vec<(usize, usize)>>,
    pub samples_per_split: SplitSizes,
    /// One box template per predicate, indexed by predicate id.
    pub geometry_rules: Vec<GeometryRule>,
    pub min_entities: usize,
    pub max_entities: usize,
    /// Std-dev of the coordinate jitter applied to rule-satisfying boxes.
    pub geometry_noise: f64,
}

impl DatasetSpec {
    /// Desk-scale default: 20 entity categories, 10 predicates with a
    /// strong long tail, 1500/200/300 samples of 3-6 entities.
    pub fn desk_default() -> Self {
        let c_e = 20;
        let c_p = 10;
        let mut compat = BTreeMap::new();
        for p in 0..c_p {
            // Head predicates get many triplet types, tail ones only a few.
            let n_pairs = (12usize.saturating_sub(p)).max(2);
            let mut pairs = Vec::new();
            let mut seen = BTreeSet::new();
            for k in 0..n_pairs {
                let s = (p * 7 + k * 3) % c_e;
                let mut o = (p * 11 + k * 5 + 1) % c_e;
                if o == s {
                    o = (o + 1) % c_e;
                }
                if seen.insert((s, o)) {
                    pairs.push((s, o));
                }
            }
            compat.insert(p, pairs);
        }
        Self {
            num_entity_categories: c_e,
            num_predicate_categories: c_p,
            zipf_exponent: 1.5,
            secondary_zipf_exponent: 1.0,
            triplet_compatibility: compat,
            samples_per_split: SplitSizes {
                train: 1500,
                val: 200,
                test: 300,
            },
            geometry_rules: GeometryRule::ALL.to_vec(),
            min_entities: 3,
            max_entities: 6,
            geometry_noise: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_entity_categories == 0 || self.num_predicate_categories == 0 {
            return Err(DrmError::InvalidSpec(
                "category counts must be positive".into(),
            ));
        }
        if self.samples_per_split.train == 0
            || self.samples_per_split.val == 0
            || self.samples_per_split.test == 0
        {
            return Err(DrmError::InvalidSpec("split sizes must be positive".into()));
        }
        if self.zipf_exponent < 0.0 || !self.zipf_exponent.is_finite() {
            return Err(DrmError::InvalidSpec(
                "zipf_exponent must be a non-negative real".into(),
            ));
        }
        if self.geometry_rules.len() != self.num_predicate_categories {
            return Err(DrmError::InvalidSpec(format!(
                "need one geometry rule per predicate ({} != {})",
                self.geometry_rules.len(),
                self.num_predicate_categories
            )));
        }
        if self.min_entities < 2 || self.max_entities < self.min_entities {
            return Err(DrmError::InvalidSpec(
                "entity count range must satisfy 2 <= min <= max".into(),
            ));
        }
        for p in 0..self.num_predicate_categories {
            match self.triplet_compatibility.get(&p) {
                None => {
                    return Err(DrmError::InvalidSpec(format!(
                        "predicate {p} is unsatisfiable: no compatibility entry"
                    )))
                }
                Some(pairs) if pairs.is_empty() => {
                    return Err(DrmError::InvalidSpec(format!(
                        "predicate {p} is unsatisfiable: empty compatibility set"
                    )))
                }
                Some(pairs) => {
                    for &(s, o) in pairs {
                        if s >= self.num_entity_categories || o >= self.num_entity_categories {
                            return Err(DrmError::InvalidSpec(format!(
                                "predicate {p} pair ({s},{o}) references unknown category"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<SceneGraphSample>,
    pub val: Vec<SceneGraphSample>,
    pub test: Vec<SceneGraphSample>,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &[SceneGraphSample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    pub predicate_counts: BTreeMap<usize, usize>,
    pub triplet_counts: BTreeMap<(usize, usize, usize), usize>,
}

impl FrequencyTable {
    pub fn total(&self) -> usize {
        self.predicate_counts.values().sum()
    }

    pub fn predicate_count(&self, p: usize) -> usize {
        self.predicate_counts.get(&p).copied().unwrap_or(0)
    }

    /// Predicate ids in descending count order, ties broken by ascending id.
    pub fn predicates_by_count_desc(&self, num_predicates: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..num_predicates).collect();
        ids.sort_by_key(|&p| (std::cmp::Reverse(self.predicate_count(p)), p));
        ids
    }
}

/// Exact per-predicate and per-triplet-type counts for a split.
pub fn frequency_table(split: &[SceneGraphSample]) -> FrequencyTable {
    let mut table = FrequencyTable::default();
    for sample in split {
        for rel in &sample.relations {
            let s_cat = sample.entities[rel.subject_index].category_id;
            let o_cat = sample.entities[rel.object_index].category_id;
            *table.predicate_counts.entry(rel.predicate_id).or_insert(0) += 1;
            *table
                .triplet_counts
                .entry((s_cat, rel.predicate_id, o_cat))
                .or_insert(0) += 1;
        }
    }
    table
}

/// Draw an index in `0..n` with probability proportional to `(i+1)^-s`.
fn zipf_draw<R: Rng>(rng: &mut R, n: usize, exponent: f64) -> usize {
    debug_assert!(n > 0);
    let weights: Vec<f64> = (0..n).map(|i| ((i + 1) as f64).powf(-exponent)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    n - 1
}

/// Generate a full dataset. Deterministic given `(spec, seed)`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let train = generate_split(spec, seed, SplitName::Train, spec.samples_per_split.train);
    let val = generate_split(spec, seed, SplitName::Val, spec.samples_per_split.val);
    let test = generate_split(spec, seed, SplitName::Test, spec.samples_per_split.test);
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

fn generate_split(
    spec: &DatasetSpec,
    seed: u64,
    split: SplitName,
    count: usize,
) -> Vec<SceneGraphSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("data/{}", split.as_str())));
    (0..count)
        .map(|i| generate_sample(spec, &mut rng, format!("{}-{:05}", split.as_str(), i)))
        .collect()
}

fn generate_sample<R: Rng>(spec: &DatasetSpec, rng: &mut R, sample_id: String) -> SceneGraphSample {
    let target_n = rng.random_range(spec.min_entities..=spec.max_entities);
    let max_rel = (target_n / 2).max(1);
    let n_rel = rng.random_range(1..=max_rel);

    let mut entities = Vec::new();
    let mut relations = Vec::new();
    for _ in 0..n_rel {
        let pid = zipf_draw(rng, spec.num_predicate_categories, spec.zipf_exponent);
        let pairs = &spec.triplet_compatibility[&pid];
        let (s_cat, o_cat) = pairs[zipf_draw(rng, pairs.len(), spec.secondary_zipf_exponent)];
        let (s_box, o_box) = spec.geometry_rules[pid].sample_boxes(rng, spec.geometry_noise);
        let s_idx = entities.len();
        entities.push(EntityInstance {
            category_id: s_cat,
            bbox: s_box,
            appearance_seed: rng.random(),
        });
        let o_idx = entities.len();
        entities.push(EntityInstance {
            category_id: o_cat,
            bbox: o_box,
            appearance_seed: rng.random(),
        });
        relations.push(RelationAnnotation {
            subject_index: s_idx,
            object_index: o_idx,
            predicate_id: pid,
        });
    }
    while entities.len() < target_n {
        entities.push(EntityInstance {
            category_id: rng.random_range(0..spec.num_entity_categories),
            bbox: random_box(rng, 0.1, 0.3),
            appearance_seed: rng.random(),
        });
    }

    // Shuffle entity order so relation endpoints are not index-coded.
    let mut perm: Vec<usize> = (0..entities.len()).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let mut inverse = vec![0usize; perm.len()];
    for (new_pos, &old_pos) in perm.iter().enumerate() {
        inverse[old_pos] = new_pos;
    }
    let shuffled: Vec<EntityInstance> = perm.iter().map(|&i| entities[i].clone()).collect();
    for rel in &mut relations {
        rel.subject_index = inverse[rel.subject_index];
        rel.object_index = inverse[rel.object_index];
    }

    SceneGraphSample {
        sample_id,
        entities: shuffled,
        relations,
    }
}

/// Validate one sample against the owning spec's ranges and invariants.
pub fn validate_sample(sample: &SceneGraphSample, spec: &DatasetSpec, origin: &str) -> Result<()> {
    let record = |detail: String| DrmError::InvalidRecord {
        record: format!("{origin} sample {}", sample.sample_id),
        reason: detail,
    };
    if sample.entities.len() < 2 {
        return Err(record(format!(
            "needs at least 2 entities, has {}",
            sample.entities.len()
        )));
    }
    for (i, e) in sample.entities.iter().enumerate() {
        if e.category_id >= spec.num_entity_categories {
            return Err(record(format!(
                "entity {i} category {} out of range",
                e.category_id
            )));
        }
        if !e.bbox.is_valid() {
            return Err(record(format!("entity {i} box violates x1<x2, y1<y2")));
        }
    }
    let mut seen = BTreeSet::new();
    for (k, rel) in sample.relations.iter().enumerate() {
        if rel.subject_index == rel.object_index {
            return Err(record(format!("relation {k} has subject == object")));
        }
        if rel.subject_index >= sample.entities.len() || rel.object_index >= sample.entities.len() {
            return Err(record(format!("relation {k} references missing entity")));
        }
        if rel.predicate_id >= spec.num_predicate_categories {
            return Err(record(format!(
                "relation {k} predicate {} out of range",
                rel.predicate_id
            )));
        }
        if !seen.insert((rel.subject_index, rel.object_index, rel.predicate_id)) {
            return Err(record(format!("relation {k} duplicates an earlier triple")));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    spec: DatasetSpec,
    samples: Vec<SceneGraphSample>,
}

/// Write `train.json`, `val.json`, `test.json` under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DrmError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    for (name, samples) in [
        ("train", &dataset.train),
        ("val", &dataset.val),
        ("test", &dataset.test),
    ] {
        let path = dir.join(format!("{name}.json"));
        let file = SplitFile {
            spec: dataset.spec.clone(),
            samples: samples.clone(),
        };
        let body = serde_json::to_string_pretty(&file).expect("dataset serializes");
        std::fs::write(&path, body).map_err(|e| DrmError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

/// Load and validate a dataset previously written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut splits = Vec::new();
    let mut spec: Option<DatasetSpec> = None;
    for name in ["train", "val", "test"] {
        let path = dir.join(format!("{name}.json"));
        let body = std::fs::read_to_string(&path).map_err(|e| DrmError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let file: SplitFile = serde_json::from_str(&body).map_err(|e| DrmError::Parse {
            path: path.display().to_string(),
            source: e,
        })?;
        file.spec.validate()?;
        match &spec {
            None => spec = Some(file.spec.clone()),
            Some(s) if *s != file.spec => {
                return Err(DrmError::InvalidRecord {
                    record: format!("{name}.json"),
                    reason: "spec differs from sibling splits".into(),
                })
            }
            _ => {}
        }
        for sample in &file.samples {
            validate_sample(
                sample,
                spec.as_ref().expect("spec set"),
                &format!("{name}.json"),
            )?;
        }
        splits.push(file.samples);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        spec: spec.expect("spec set"),
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec(c_p: usize, zipf: f64, train: usize) -> DatasetSpec {
        let mut spec = DatasetSpec::desk_default();
        spec.num_predicate_categories = c_p;
        spec.zipf_exponent = zipf;
        spec.geometry_rules = GeometryRule::ALL[..c_p].to_vec();
        spec.triplet_compatibility = (0..c_p)
            .map(|p| {
                (
                    p,
                    vec![
                        ((2 * p) % 20, (2 * p + 1) % 20),
                        ((2 * p + 3) % 20, (2 * p + 7) % 20),
                    ],
                )
            })
            .collect();
        spec.samples_per_split = SplitSizes {
            train,
            val: 20,
            test: 20,
        };
        spec
    }

    #[test]
    fn zero_skew_gives_roughly_uniform_predicates() {
        let spec = small_spec(2, 0.0, 800);
        let ds = generate_dataset(&spec, 11).unwrap();
        let freq = frequency_table(&ds.train);
        let a = freq.predicate_count(0) as f64;
        let b = freq.predicate_count(1) as f64;
        let ratio = a.max(b) / a.min(b).max(1.0);
        assert!(ratio < 1.25, "expected near-equal counts, got {a} vs {b}");
    }

    #[test]
    fn zipf_skew_matches_mass_ratio_oracle() {
        // Independent oracle: Zipf(1.5) mass ratio rank1/rank10 = 10^1.5 ~ 31.6.
        let expected_ratio = 10f64.powf(1.5);
        let spec = small_spec(10, 1.5, 1400);
        let ds = generate_dataset(&spec, 7).unwrap();
        let freq = frequency_table(&ds.train);
        assert!(
            freq.total() >= 2000,
            "want >= 2000 relations, got {}",
            freq.total()
        );
        let order = freq.predicates_by_count_desc(10);
        let top = freq.predicate_count(order[0]) as f64;
        let bottom = freq.predicate_count(order[9]) as f64;
        let ratio = top / bottom.max(1.0);
        assert!(
            ratio > expected_ratio * 0.5 && ratio < expected_ratio * 1.5,
            "empirical ratio {ratio} outside +/-50% of {expected_ratio}"
        );
    }

    #[test]
    fn generation_is_deterministic_to_the_byte() {
        let spec = small_spec(4, 1.0, 40);
        let a = generate_dataset(&spec, 99).unwrap();
        let b = generate_dataset(&spec, 99).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        save_dataset(&a, dir_a.path()).unwrap();
        save_dataset(&b, dir_b.path()).unwrap();
        for name in ["train.json", "val.json", "test.json"] {
            let ba = std::fs::read(dir_a.path().join(name)).unwrap();
            let bb = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(ba, bb, "{name} differs between identical runs");
        }
    }

    #[test]
    fn unsatisfiable_predicate_is_rejected() {
        let mut spec = small_spec(3, 1.0, 10);
        spec.triplet_compatibility.insert(1, Vec::new());
        let err = generate_dataset(&spec, 1).unwrap_err();
        assert!(matches!(err, DrmError::InvalidSpec(_)), "got {err:?}");
    }

    #[test]
    fn round_trip_is_identity() {
        let spec = small_spec(5, 1.2, 30);
        let mut ds = generate_dataset(&spec, 3).unwrap();
        // Include a relation-free sample.
        ds.train[0].relations.clear();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);
        assert_eq!(frequency_table(&ds.train), frequency_table(&loaded.train));
    }

    #[test]
    fn self_relation_is_rejected_on_load() {
        let spec = small_spec(3, 1.0, 5);
        let mut ds = generate_dataset(&spec, 5).unwrap();
        ds.val[0].relations.push(RelationAnnotation {
            subject_index: 0,
            object_index: 0,
            predicate_id: 0,
        });
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        match err {
            DrmError::InvalidRecord { record, reason } => {
                assert!(record.contains("val.json"), "record: {record}");
                assert!(reason.contains("subject == object"), "reason: {reason}");
            }
            other => panic!("expected InvalidRecord, got {other:?}"),
        }
    }

    #[test]
    fn frequency_table_counts_directly() {
        let entities = vec![
            EntityInstance {
                category_id: 1,
                bbox: BBox::new(0.0, 0.0, 0.2, 0.2),
                appearance_seed: 0,
            },
            EntityInstance {
                category_id: 2,
                bbox: BBox::new(0.3, 0.3, 0.5, 0.5),
                appearance_seed: 0,
            },
            EntityInstance {
                category_id: 3,
                bbox: BBox::new(0.6, 0.6, 0.8, 0.8),
                appearance_seed: 0,
            },
        ];
        let sample = SceneGraphSample {
            sample_id: "t-0".into(),
            entities,
            relations: vec![
                RelationAnnotation {
                    subject_index: 0,
                    object_index: 1,
                    predicate_id: 0,
                },
                RelationAnnotation {
                    subject_index: 1,
                    object_index: 0,
                    predicate_id: 0,
                },
                RelationAnnotation {
                    subject_index: 2,
                    object_index: 1,
                    predicate_id: 1,
                },
            ],
        };
        let freq = frequency_table(&[sample]);
        assert_eq!(freq.predicate_count(0), 2);
        assert_eq!(freq.predicate_count(1), 1);
        assert_eq!(freq.triplet_counts[&(1, 0, 2)], 1);
        assert_eq!(freq.triplet_counts[&(2, 0, 1)], 1);
        assert_eq!(freq.total(), 3);
        assert_eq!(frequency_table(&[]).total(), 0);
    }

    #[test]
    fn frequency_table_matches_independent_recount() {
        let spec = small_spec(10, 1.5, 200);
        let ds = generate_dataset(&spec, 7).unwrap();
        let freq = frequency_table(&ds.train);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut total = 0usize;
        for s in &ds.train {
            for r in &s.relations {
                *counts.entry(r.predicate_id).or_insert(0) += 1;
                total += 1;
            }
        }
        assert_eq!(freq.predicate_counts, counts);
        assert_eq!(freq.total(), total);
    }

    #[test]
    fn noise_free_geometry_is_exactly_recoverable() {
        let mut spec = small_spec(10, 1.0, 150);
        spec.geometry_noise = 0.0;
        let ds = generate_dataset(&spec, 21).unwrap();
        let mut checked = 0usize;
        for sample in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            for rel in &sample.relations {
                let s = &sample.entities[rel.subject_index].bbox;
                let o = &sample.entities[rel.object_index].bbox;
                assert!(
                    spec.geometry_rules[rel.predicate_id].holds(s, o),
                    "rule {:?} violated in {}",
                    spec.geometry_rules[rel.predicate_id],
                    sample.sample_id
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn generated_samples_validate() {
        let mut small = DatasetSpec::desk_default();
        small.samples_per_split = SplitSizes {
            train: 50,
            val: 10,
            test: 10,
        };
        let ds = generate_dataset(&small, 13).unwrap();
        for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            validate_sample(s, &small, "generated").unwrap();
            assert!(s.entities.len() >= small.min_entities);
            assert!(s.entities.len() <= small.max_entities);
            assert!(!s.relations.is_empty());
        }
    }
}

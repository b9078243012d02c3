//! Experiment orchestration: configuration, the two-stage pipeline with
//! persisted artifacts, comparison reports, and SVG plot emission.

use crate::dkt::{
    build_balanced_set, finetune_classifier, run_calibration, save_stats_dump, DktMode,
    FinetuneConfig,
};
use crate::metrics::{evaluate, GroundTruth, MetricsReport, Pooling, Task};
use crate::model::{save_checkpoint, AblationFlags, DrmModel, ModelDims};
use crate::synthgraph::{frequency_table, DatasetSpec, FrequencyTable};
use crate::train::{
    cluster_similarity, extract_relation_features, predict_split, prepare_split, train_stage1,
    EpochRecord, TrainConfig,
};
use crate::{derive_seed, DrmError, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Where the dataset comes from: generated in-run from a spec, or loaded
/// from a directory produced by `drm data generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Generate { spec: DatasetSpec, seed: u64 },
    Load { path: PathBuf },
}

/// Knowledge-transfer stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DktConfig {
    pub mode: DktMode,
    pub triplet_threshold: usize,
    pub q_override: Option<usize>,
    pub finetune: FinetuneConfig,
}

impl Default for DktConfig {
    fn default() -> Self {
        Self {
            mode: DktMode::Both,
            triplet_threshold: 8,
            q_override: None,
            finetune: FinetuneConfig::default(),
        }
    }
}

/// Encoder-shape settings that do not depend on the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub heads: usize,
    pub proj_dim: usize,
    pub entity_layers: usize,
    pub cue_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            proj_dim: 32,
            entity_layers: 4,
            cue_layers: 2,
        }
    }
}

/// Full experiment description; one JSON document drives the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dkt: DktConfig,
    pub task: Task,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            dataset: DatasetSource::Generate {
                spec: DatasetSpec::desk_default(),
                seed: 7,
            },
            model: ModelConfig::default(),
            // Desk-scale defaults: smaller stacks converge within a few
            // epochs at lr 1e-3; see the training-config docs for the
            // conventional full-scale settings.
            train: TrainConfig {
                epochs: 10,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            dkt: DktConfig::default(),
            task: Task::PredCls,
            pooling: Pooling::PerImage,
            seed: 7,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DatasetSource::Generate { spec, .. } = &self.dataset {
            spec.validate()?;
        }
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(DrmError::InvalidConfig(
                "run_id must be non-empty and [A-Za-z0-9_-]".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| DrmError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: Self = serde_json::from_str(&body).map_err(|e| DrmError::Parse {
            path: path.display().to_string(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, body).map_err(|e| DrmError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Fixed-bin histogram with the exact mean of the underlying values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub bins: Vec<usize>,
    pub mean: f64,
    pub count: usize,
}

impl Histogram {
    pub fn from_values(values: &[f64], lo: f64, hi: f64, n_bins: usize) -> Self {
        let mut bins = vec![0usize; n_bins];
        let mut sum = 0.0;
        for &v in values {
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            let b = ((t * n_bins as f64) as usize).min(n_bins - 1);
            bins[b] += 1;
            sum += v;
        }
        Self {
            lo,
            hi,
            bins,
            mean: if values.is_empty() { 0.0 } else { sum / values.len() as f64 },
            count: values.len(),
        }
    }
}

/// Cosine-similarity cluster statistics of the projection spaces on the
/// test split after stage 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub t_intra_mean: f64,
    pub t_inter_mean: f64,
    pub t_margin: f64,
    pub p_intra_mean: f64,
    pub p_inter_mean: f64,
    pub p_margin: f64,
    pub t_intra_hist: Histogram,
    pub t_inter_hist: Histogram,
    pub p_intra_hist: Histogram,
    pub p_inter_hist: Histogram,
}

/// Summary of the knowledge-transfer stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DktSummary {
    pub q: usize,
    pub head_predicates: Vec<usize>,
    pub tail_predicates: Vec<usize>,
    pub head_triplet_types: usize,
    pub tail_triplet_types: usize,
    pub balanced_records: usize,
    pub synthetic_records: usize,
}

/// Deterministic run outcome; serialized as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub config: ExperimentConfig,
    /// SHA-256 over the canonical config and the dataset files.
    pub input_hash: String,
    pub stage1: MetricsReport,
    pub stage2: Option<MetricsReport>,
    pub cluster: ClusterStats,
    pub dkt: Option<DktSummary>,
    pub train_log: Vec<EpochRecord>,
    pub diverged: Option<usize>,
}

/// Volatile run facts; separate file so `report.json` stays byte-stable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub wall_clock_sec: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DrmError + '_ {
    move |e| DrmError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, body).map_err(io_err(path))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_inputs(config: &ExperimentConfig, data_dir: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config).expect("config serializes"));
    for name in ["train.json", "val.json", "test.json"] {
        let path = data_dir.join(name);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        hasher.update(&bytes);
    }
    Ok(hex(&hasher.finalize()))
}

/// Execute the full pipeline into `run_dir`: resolve data, stage-1
/// training, evaluation, then (mode permitting) calibration, synthesis,
/// fine-tuning, and re-evaluation. Partial artifacts stay on disk when a
/// stage fails.
pub fn run_pipeline(config: &ExperimentConfig, run_dir: &Path) -> Result<RunResult> {
    config.validate()?;
    let started = std::time::Instant::now();
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    config.save(&run_dir.join("config.json"))?;

    // Data.
    let data_dir = match &config.dataset {
        DatasetSource::Generate { spec, seed } => {
            let dir = run_dir.join("data");
            let dataset = crate::synthgraph::generate_dataset(spec, *seed)?;
            crate::synthgraph::save_dataset(&dataset, &dir)?;
            dir
        }
        DatasetSource::Load { path } => path.clone(),
    };
    let dataset = crate::synthgraph::load_dataset(&data_dir)?;
    let input_hash = hash_inputs(config, &data_dir)?;
    let train_freq = frequency_table(&dataset.train);

    // Stage 1.
    let dims = ModelDims {
        d: crate::featurizer::ENTITY_DIM,
        d_s: crate::featurizer::SEMANTIC_DIM,
        heads: config.model.heads,
        proj_dim: config.model.proj_dim,
        entity_layers: config.model.entity_layers,
        cue_layers: config.model.cue_layers,
        num_entity_categories: dataset.spec.num_entity_categories,
        num_predicate_categories: dataset.spec.num_predicate_categories,
    };
    let stage1 = train_stage1(&dataset, dims, &config.train, config.seed)?;
    let config_json = serde_json::to_value(config).expect("config serializes");
    save_checkpoint(
        &stage1.model.to_checkpoint(config_json.clone()),
        &run_dir.join("stage1.ckpt"),
    )?;
    {
        let path = run_dir.join("train_log.jsonl");
        let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
        for rec in &stage1.log {
            writeln!(f, "{}", serde_json::to_string(rec).expect("record serializes"))
                .map_err(io_err(&path))?;
        }
    }
    if let Some(epoch) = stage1.diverged {
        // Keep the partial artifacts and stop.
        return Err(DrmError::Diverged { epoch });
    }
    let model = stage1.model;

    // Stage-1 evaluation on the test split.
    let featurize_seed = derive_seed(config.seed, "featurize");
    let prepared_test = prepare_split(&dataset.test, &model.tables, featurize_seed)?;
    let test_gt: Vec<GroundTruth> = dataset.test.iter().map(GroundTruth::from_sample).collect();
    let preds1 = predict_split(&model, &prepared_test, config.task, &config.train.flags)?;
    crate::metrics::save_predictions(&preds1, &run_dir.join("predictions_stage1.jsonl"))?;
    let report1 = evaluate(
        &preds1,
        &test_gt,
        config.task,
        config.pooling,
        &train_freq,
        dims.num_predicate_categories,
    )?;

    // Cluster statistics over the test-split projections.
    let test_features = extract_relation_features(&model, &prepared_test, &config.train.flags)?;
    let cluster = cluster_stats(&test_features)?;

    // Stage 2.
    let (stage2_report, dkt_summary) = if config.dkt.mode == DktMode::None {
        (None, None)
    } else {
        let prepared_train = prepare_split(&dataset.train, &model.tables, featurize_seed)?;
        let train_features =
            extract_relation_features(&model, &prepared_train, &config.train.flags)?;
        let artifacts = run_calibration(
            &train_features,
            &train_freq,
            dims.num_predicate_categories,
            config.dkt.triplet_threshold,
            config.dkt.mode,
            config.dkt.q_override,
        )?;
        save_stats_dump(
            &artifacts.predicate_stats,
            &artifacts.triplet_stats,
            &run_dir.join("stats.json"),
        )?;
        let balanced = build_balanced_set(
            &train_features,
            &artifacts,
            derive_seed(config.seed, "balanced-set"),
        )?;
        let synthetic_records = balanced.records.iter().filter(|r| r.synthetic).count();

        let mut model2 = model.clone();
        let digest_before = model2.encoder_digest();
        finetune_classifier(
            &mut model2,
            &balanced,
            &config.dkt.finetune,
            derive_seed(config.seed, "finetune"),
        )?;
        if model2.encoder_digest() != digest_before {
            return Err(DrmError::Checkpoint(
                "frozen parameters changed during fine-tuning".into(),
            ));
        }
        save_checkpoint(
            &model2.to_checkpoint(config_json),
            &run_dir.join("stage2.ckpt"),
        )?;

        let preds2 = predict_split(&model2, &prepared_test, config.task, &config.train.flags)?;
        crate::metrics::save_predictions(&preds2, &run_dir.join("predictions_stage2.jsonl"))?;
        let report2 = evaluate(
            &preds2,
            &test_gt,
            config.task,
            config.pooling,
            &train_freq,
            dims.num_predicate_categories,
        )?;
        let summary = DktSummary {
            q: artifacts.q,
            head_predicates: artifacts.split.head_predicates.clone(),
            tail_predicates: artifacts.split.tail_predicates.clone(),
            head_triplet_types: artifacts.split.head_triplets.len(),
            tail_triplet_types: artifacts.split.tail_triplets.len(),
            balanced_records: balanced.records.len(),
            synthetic_records,
        };
        (Some(report2), Some(summary))
    };

    let result = RunResult {
        run_id: config.run_id.clone(),
        config: config.clone(),
        input_hash,
        stage1: report1,
        stage2: stage2_report,
        cluster,
        dkt: dkt_summary,
        train_log: stage1.log,
        diverged: None,
    };
    write_json(&result, &run_dir.join("report.json"))?;
    write_json(
        &RunMeta {
            wall_clock_sec: started.elapsed().as_secs_f64(),
        },
        &run_dir.join("runmeta.json"),
    )?;
    emit_plots(&result, &run_dir.join("plots"))?;
    Ok(result)
}

fn cluster_stats(features: &crate::train::RelationFeatures) -> Result<ClusterStats> {
    let pred_labels: Vec<u64> = features.predicates.iter().map(|&p| p as u64).collect();
    let (t_sims_intra, t_sims_inter) = pairwise_sims(&features.t_contrast, &features.triplet_keys);
    let (p_sims_intra, p_sims_inter) = pairwise_sims(&features.p_contrast, &pred_labels);
    if t_sims_intra.is_empty() || t_sims_inter.is_empty() {
        return Err(DrmError::Metrics(
            "cluster statistics need both intra- and inter-class pairs".into(),
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let t_intra_mean = mean(&t_sims_intra);
    let t_inter_mean = mean(&t_sims_inter);
    let p_intra_mean = mean(&p_sims_intra);
    let p_inter_mean = mean(&p_sims_inter);
    Ok(ClusterStats {
        t_intra_mean,
        t_inter_mean,
        t_margin: t_intra_mean - t_inter_mean,
        p_intra_mean,
        p_inter_mean,
        p_margin: p_intra_mean - p_inter_mean,
        t_intra_hist: Histogram::from_values(&t_sims_intra, -1.0, 1.0, 40),
        t_inter_hist: Histogram::from_values(&t_sims_inter, -1.0, 1.0, 40),
        p_intra_hist: Histogram::from_values(&p_sims_intra, -1.0, 1.0, 40),
        p_inter_hist: Histogram::from_values(&p_sims_inter, -1.0, 1.0, 40),
    })
}

fn pairwise_sims(reps: &crate::tensor::Matrix, labels: &[u64]) -> (Vec<f64>, Vec<f64>) {
    let n = reps.nrows();
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let sim: f64 = reps
                .row(i)
                .iter()
                .zip(reps.row(j).iter())
                .map(|(a, b)| a * b)
                .sum();
            if labels[i] == labels[j] {
                intra.push(sim);
            } else {
                inter.push(sim);
            }
        }
    }
    (intra, inter)
}

/// Comparison table over runs: one row per (run, stage) with R/mR/M/F at
/// both Ks. Returns the aligned text table and the same numbers as JSON.
pub fn emit_report(results: &[&RunResult]) -> Result<(String, serde_json::Value)> {
    if results.is_empty() {
        return Err(DrmError::Metrics("no results to report".into()));
    }
    let task = &results[0].config.task;
    for r in results {
        if r.config.task != *task {
            return Err(DrmError::Metrics(
                "cannot mix tasks in a single comparison table".into(),
            ));
        }
    }
    let mut rows = Vec::new();
    for r in results {
        rows.push((format!("{}/stage1", r.run_id), &r.stage1));
        if let Some(s2) = &r.stage2 {
            rows.push((format!("{}/stage2", r.run_id), s2));
        }
    }
    let mut text = String::new();
    let header = format!(
        "{:<28} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "run", "R@50", "R@100", "mR@50", "mR@100", "M@50", "M@100", "F@50", "F@100"
    );
    text.push_str(&header);
    text.push_str(&"-".repeat(header.len().saturating_sub(1)));
    text.push('\n');
    let mut json_rows = Vec::new();
    for (name, rep) in &rows {
        let c = &rep.constrained;
        text.push_str(&format!(
            "{:<28} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1}\n",
            name,
            c.at50.r,
            c.at100.r,
            c.at50.mr,
            c.at100.mr,
            c.at50.m,
            c.at100.m,
            c.at50.f,
            c.at100.f
        ));
        json_rows.push(serde_json::json!({
            "run": name,
            "r50": c.at50.r,
            "r100": c.at100.r,
            "mr50": c.at50.mr,
            "mr100": c.at100.mr,
            "m50": c.at50.m,
            "m100": c.at100.m,
            "f50": c.at50.f,
            "f100": c.at100.f,
        }));
    }
    Ok((
        text,
        serde_json::json!({"task": task.as_str(), "rows": json_rows}),
    ))
}

/// Write the per-predicate recall bar chart and the projection-space
/// similarity histograms as SVG files named after the run id.
pub fn emit_plots(result: &RunResult, plot_dir: &Path) -> Result<()> {
    if result.stage1.per_predicate_recall100.is_empty() {
        return Err(DrmError::Metrics(
            "no per-predicate recalls to plot".into(),
        ));
    }
    std::fs::create_dir_all(plot_dir).map_err(io_err(plot_dir))?;
    let bars: Vec<(String, f64)> = result
        .stage1
        .per_predicate_recall100
        .iter()
        .map(|p| (format!("p{}", p.predicate_id), p.recall))
        .collect();
    let path = plot_dir.join(format!("{}_predrecall.svg", result.run_id));
    std::fs::write(
        &path,
        svg_bar_chart(
            "Per-predicate Recall@100 (stage 1, sorted by train frequency)",
            &bars,
        ),
    )
    .map_err(io_err(&path))?;

    let path = plot_dir.join(format!("{}_cluster_hist.svg", result.run_id));
    let series = [
        ("t\" intra", "#2266cc", &result.cluster.t_intra_hist),
        ("t\" inter", "#88aadd", &result.cluster.t_inter_hist),
        ("p\" intra", "#cc4422", &result.cluster.p_intra_hist),
        ("p\" inter", "#ddaa88", &result.cluster.p_inter_hist),
    ];
    std::fs::write(
        &path,
        svg_histograms("Projection-space cosine similarity", &series),
    )
    .map_err(io_err(&path))?;
    Ok(())
}

fn svg_bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let width = 720.0;
    let height = 360.0;
    let margin = 48.0;
    let plot_w = width - 2.0 * margin;
    let plot_h = height - 2.0 * margin;
    let n = bars.len().max(1) as f64;
    let bar_w = (plot_w / n) * 0.7;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"20\" font-family=\"monospace\" font-size=\"13\">{title}</text>\n",
        margin
    ));
    out.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n",
        height - margin,
        width - margin,
        height - margin
    ));
    for (i, (label, value)) in bars.iter().enumerate() {
        let frac = (value / 100.0).clamp(0.0, 1.0);
        let h = plot_h * frac;
        let x = margin + (i as f64 + 0.15) * plot_w / n;
        let y = height - margin - h;
        out.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bar_w:.2}\" height=\"{h:.2}\" fill=\"#4477aa\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"middle\">{label}</text>\n",
            x + bar_w / 2.0,
            height - margin + 14.0
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"9\" text-anchor=\"middle\">{value:.1}</text>\n",
            x + bar_w / 2.0,
            y - 4.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn svg_histograms(title: &str, series: &[(&str, &str, &Histogram)]) -> String {
    let width = 720.0;
    let height = 360.0;
    let margin = 48.0;
    let plot_w = width - 2.0 * margin;
    let plot_h = height - 2.0 * margin;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{margin}\" y=\"20\" font-family=\"monospace\" font-size=\"13\">{title}</text>\n"
    ));
    out.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n",
        height - margin,
        width - margin,
        height - margin
    ));
    for (s_idx, (name, color, hist)) in series.iter().enumerate() {
        let peak = hist.bins.iter().copied().max().unwrap_or(1).max(1) as f64;
        let n = hist.bins.len() as f64;
        let mut path = String::new();
        for (i, &count) in hist.bins.iter().enumerate() {
            let x = margin + (i as f64 + 0.5) * plot_w / n;
            let y = height - margin - plot_h * (count as f64 / peak);
            path.push_str(&format!("{}{x:.2},{y:.2} ", if i == 0 { "M" } else { "L" }));
        }
        out.push_str(&format!(
            "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.trim_end()
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" fill=\"{color}\">{name} (mean {:.3}, n={})</text>\n",
            width - margin - 220.0,
            36.0 + 14.0 * s_idx as f64,
            hist.mean,
            hist.count
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Tail-predicate mean recall from a report, given the tail set.
pub fn tail_mean_recall(report: &MetricsReport, tail: &[usize]) -> Option<f64> {
    let recalls: Vec<f64> = report
        .per_predicate_recall100
        .iter()
        .filter(|p| tail.contains(&p.predicate_id))
        .map(|p| p.recall)
        .collect();
    if recalls.is_empty() {
        None
    } else {
        Some(recalls.iter().sum::<f64>() / recalls.len() as f64)
    }
}

/// The Table-4-style ablation grid: every valid flag combination.
pub fn ablation_grid(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let rows = [
        (false, false, false, false),
        (true, false, false, false),
        (false, true, false, false),
        (true, true, false, false),
        (true, true, true, false),
        (true, false, true, true),
        (false, true, true, true),
        (true, true, true, true),
    ];
    rows.iter()
        .map(|&(use_p, use_t, use_a, use_c)| {
            let mut cfg = base.clone();
            cfg.run_id = format!(
                "{}-p{}t{}a{}c{}",
                base.run_id, use_p as u8, use_t as u8, use_a as u8, use_c as u8
            );
            cfg.train.flags = AblationFlags {
                use_p,
                use_t,
                use_a,
                use_c,
            };
            cfg
        })
        .collect()
}

/// Load a run's `report.json`.
pub fn load_report(run_dir: &Path) -> Result<RunResult> {
    let path = run_dir.join("report.json");
    let body = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&body).map_err(|e| DrmError::Parse {
        path: path.display().to_string(),
        source: e,
    })
}

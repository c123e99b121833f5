//! End-to-end workflows shared by the CLI and the acceptance tests: dataset
//! loading, training-pair construction, checkpoints, evaluation and
//! attention rendering.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{self, DataError, Split, Tensor, TensorArchive, TensorData};
use crate::evalkit::{
    mean_average_precision, mean_pr_curve, overlap_breakdown, rank_all, recall_at_k, rerank_all, EvalError,
    IndexEntry, OverlapBreakdown, PrPoint, RankedList, RetrievalIndex,
};
use crate::geometry::{random_rank2_matrix, relative_fundamental, CameraView, FundamentalMatrix, GeometryError};
use crate::guides::{rasterize_guide, BinaryMap, EpipolarGuide, GridSpec};
use crate::linalg::Matrix;
use crate::losses::{LossVariant, Reduction};
use crate::model::{
    assemble_tokens, attention_concentration, forward, train, CrossAttentionMaps, EpeInput, EpochLog, ModelConfig,
    ModelError, RerankerParams, Schedule, TrainPair, TrainingSet,
};
use crate::robustf::{ransac_fundamental, Correspondences, RobustError};
use crate::synthgen::{derive_seed, Benchmark};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Robust(#[from] RobustError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct DatasetImage {
    pub image_id: String,
    pub instance_id: u64,
    pub category_id: u64,
    pub split: Split,
    pub features: Arc<Matrix<f32>>,
    pub view: Option<CameraView<f64>>,
    pub overlaps: BTreeMap<String, f64>,
    pub correspondences: BTreeMap<String, Vec<[f64; 4]>>,
}

/// Benchmark images with features in `f32`, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<DatasetImage>,
    pub grid: GridSpec,
    by_id: HashMap<String, usize>,
}

fn image_size_hint(images: &[DatasetImage], dir: Option<&Path>) -> Option<(u32, u32)> {
    if let Some(v) = images.iter().find_map(|i| i.view.as_ref()) {
        return Some((v.width(), v.height()));
    }
    let text = std::fs::read_to_string(dir?.join("benchmark.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    let size = v.get("image_size")?.as_u64()? as u32;
    Some((size, size))
}

impl Dataset {
    fn build(images: Vec<DatasetImage>, dir: Option<&Path>) -> Result<Self, PipelineError> {
        let cells = images.first().map_or(1, |i| i.features.rows());
        let s = (cells as f64).sqrt().round() as usize;
        if s * s != cells || images.iter().any(|i| i.features.rows() != cells) {
            return Err(PipelineError::Invalid(format!("feature grids must all be s² × m, found {cells} rows")));
        }
        let (w, h) = image_size_hint(&images, dir).unwrap_or((32 * s as u32, 32 * s as u32));
        let grid = GridSpec::new(s, w, h).map_err(|e| PipelineError::Invalid(e.to_string()))?;
        let by_id = images.iter().enumerate().map(|(k, i)| (i.image_id.clone(), k)).collect();
        Ok(Self { images, grid, by_id })
    }

    pub fn from_benchmark(b: &Benchmark) -> Result<Self, PipelineError> {
        let images = b
            .images
            .iter()
            .map(|img| DatasetImage {
                image_id: img.image_id.clone(),
                instance_id: img.instance_id,
                category_id: img.category_id,
                split: img.split,
                features: Arc::new(img.view.features.cast()),
                view: b.spec.with_pose.then(|| img.view.view.clone()),
                overlaps: img.overlaps.clone(),
                correspondences: if b.spec.match_points > 0 { img.correspondences.clone() } else { BTreeMap::new() },
            })
            .collect();
        let mut ds = Self::build(images, None)?;
        ds.grid = b.grid();
        Ok(ds)
    }

    pub fn load(manifest: &Path) -> Result<Self, PipelineError> {
        let index = dataio::load_manifest(manifest)?;
        let mut images = Vec::with_capacity(index.len());
        for rec in &index.records {
            let features = dataio::read_tensor(&index.resolve(&rec.feature_path))?.to_matrix::<f32>()?;
            let view = rec.pose.as_ref().map(|p| p.to_view()).transpose()?;
            let correspondences = match &rec.correspondences_path {
                Some(p) => dataio::read_correspondences(&index.resolve(p))?,
                None => BTreeMap::new(),
            };
            images.push(DatasetImage {
                image_id: rec.image_id.clone(),
                instance_id: rec.instance_id,
                category_id: rec.category_id,
                split: rec.split,
                features: Arc::new(features),
                view,
                overlaps: rec.overlaps.clone().unwrap_or_default(),
                correspondences,
            });
        }
        Self::build(images, Some(&index.root))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.images.len()).filter(|&k| self.images[k].split == split).collect()
    }

    pub fn feature_width(&self) -> usize {
        self.images.first().map_or(0, |i| i.features.cols())
    }
}

/// FNV-1a over the two ids; keys per-pair random streams.
fn pair_key(a: &str, b: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in a.bytes().chain(std::iter::once(b'|')).chain(b.bytes()) {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Where a pair's fundamental matrix came from.
#[derive(Debug, Clone, PartialEq)]
pub enum PairGeometry {
    /// Ground-truth poses of both images.
    Pose(FundamentalMatrix<f64>),
    /// RANSAC estimate that passed the reliability gate.
    Estimated(FundamentalMatrix<f64>),
    /// No trusted geometry.
    Unknown,
}

impl PairGeometry {
    pub fn fundamental(&self) -> Option<&FundamentalMatrix<f64>> {
        match self {
            Self::Pose(f) | Self::Estimated(f) => Some(f),
            Self::Unknown => None,
        }
    }
}

/// Settings of the correspondence-based fallback geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoGeometry {
    pub iterations: usize,
    pub threshold_px2: f64,
}

impl Default for PseudoGeometry {
    fn default() -> Self {
        Self { iterations: 2000, threshold_px2: 1.0 }
    }
}

fn estimated_geometry(ds: &Dataset, a: usize, b: usize, pg: &PseudoGeometry, seed: u64) -> PairGeometry {
    let (ia, ib) = (&ds.images[a], &ds.images[b]);
    let Some(pairs) = ia.correspondences.get(&ib.image_id) else { return PairGeometry::Unknown };
    let Ok(c) = Correspondences::new(pairs.clone()) else { return PairGeometry::Unknown };
    match ransac_fundamental(&c, pg.iterations, pg.threshold_px2, derive_seed(seed, pair_key(&ia.image_id, &ib.image_id))) {
        Ok(est) if est.reliable => PairGeometry::Estimated(est.f),
        _ => PairGeometry::Unknown,
    }
}

/// Pose geometry when both poses are known, otherwise the gated estimate.
pub fn pair_geometry(ds: &Dataset, a: usize, b: usize, pg: &PseudoGeometry, seed: u64) -> PairGeometry {
    if let (Some(v1), Some(v2)) = (&ds.images[a].view, &ds.images[b].view) {
        if let Ok(f) = relative_fundamental(v1, v2) {
            return PairGeometry::Pose(f);
        }
    }
    estimated_geometry(ds, a, b, pg, seed)
}

/// Epipolar-plane encoding for a pair; unknown geometry uses a random rank-2 matrix.
pub fn pair_epe(ds: &Dataset, a: usize, b: usize, geometry: &PairGeometry, seed: u64) -> Result<EpeInput, PipelineError> {
    let key = derive_seed(seed, pair_key(&ds.images[a].image_id, &ds.images[b].image_id));
    let g = &ds.grid;
    let fallback = || EpeInput::from_fundamental(&random_rank2_matrix::<f64>(key), g, g, key);
    let r = match geometry {
        PairGeometry::Pose(_) => {
            let (v1, v2) = (ds.images[a].view.as_ref(), ds.images[b].view.as_ref());
            EpeInput::from_views(v1.expect("pose geometry has views"), v2.expect("pose geometry has views"), g, g, key)
        }
        PairGeometry::Estimated(f) => EpeInput::from_fundamental(f, g, g, key),
        PairGeometry::Unknown => fallback(),
    };
    // A degenerate estimate (e.g. epipole inside every reference draw) falls back too.
    Ok(r.or_else(|_| fallback())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub schedule: Schedule,
    /// Random other-instance partners per training image.
    pub negatives_per_image: usize,
    /// Share of negatives drawn from the same category.
    pub hard_negative_fraction: f64,
    /// Use recorded poses for guides; otherwise only gated estimates.
    pub use_pose: bool,
    pub pseudo_geometry: PseudoGeometry,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            negatives_per_image: 4,
            hard_negative_fraction: 0.0,
            use_pose: true,
            pseudo_geometry: PseudoGeometry::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairStats {
    pub positives: usize,
    pub negatives: usize,
    pub pose_guides: usize,
    pub estimated_guides: usize,
    /// Matching pairs left without attention supervision.
    pub unguided_positives: usize,
}

/// Labelled pairs over the training split: every ordered same-instance pair,
/// plus sampled negatives.
pub fn build_training_set(
    ds: &Dataset,
    config: &ModelConfig,
    opts: &TrainOptions,
) -> Result<(TrainingSet<f32>, PairStats), PipelineError> {
    let train_idx = ds.split(Split::Train);
    if train_idx.is_empty() {
        return Err(PipelineError::Invalid("the dataset has no training images".into()));
    }
    let mut local = HashMap::new();
    let features: Vec<Matrix<f32>> = train_idx
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            local.insert(g, k);
            (*ds.images[g].features).clone()
        })
        .collect();
    let mut by_instance: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut by_category: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for &g in &train_idx {
        by_instance.entry(ds.images[g].instance_id).or_default().push(g);
        by_category.entry(ds.images[g].category_id).or_default().push(g);
    }
    let mut stats = PairStats::default();
    let mut pairs = Vec::new();
    let want_guides = config.attention_supervised();
    for group in by_instance.values() {
        for &a in group {
            for &b in group {
                if a == b {
                    continue;
                }
                let geometry = if !(want_guides || config.epe_enabled) {
                    PairGeometry::Unknown
                } else if opts.use_pose {
                    pair_geometry(ds, a, b, &opts.pseudo_geometry, config.seed)
                } else {
                    estimated_geometry(ds, a, b, &opts.pseudo_geometry, config.seed)
                };
                match geometry {
                    PairGeometry::Pose(_) => stats.pose_guides += 1,
                    PairGeometry::Estimated(_) => stats.estimated_guides += 1,
                    PairGeometry::Unknown => stats.unguided_positives += 1,
                }
                let guide = if want_guides { geometry.fundamental().map(|f| rasterize_guide(f, &ds.grid, &ds.grid)) } else { None };
                let epe = if config.epe_enabled { Some(pair_epe(ds, a, b, &geometry, config.seed)?) } else { None };
                pairs.push(TrainPair { first: local[&a], second: local[&b], label: true, guide, epe });
                stats.positives += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x4E47));
    for &a in &train_idx {
        let ia = &ds.images[a];
        for n in 0..opts.negatives_per_image {
            let hard = (n as f64 + 0.5) / opts.negatives_per_image as f64 <= opts.hard_negative_fraction;
            let pool: Vec<usize> = if hard { by_category[&ia.category_id].clone() } else { train_idx.clone() };
            let pool: Vec<usize> = pool.into_iter().filter(|&b| ds.images[b].instance_id != ia.instance_id).collect();
            let pool = if pool.is_empty() {
                train_idx.iter().copied().filter(|&b| ds.images[b].instance_id != ia.instance_id).collect()
            } else {
                pool
            };
            if pool.is_empty() {
                continue;
            }
            let b = pool[rng.gen_range(0..pool.len())];
            let epe = if config.epe_enabled { Some(pair_epe(ds, a, b, &PairGeometry::Unknown, config.seed)?) } else { None };
            pairs.push(TrainPair { first: local[&a], second: local[&b], label: false, guide: None, epe });
            stats.negatives += 1;
        }
    }
    Ok((TrainingSet { features, pairs }, stats))
}

/// Configuration as stored in checkpoints: attention settings are zeroed when
/// they cannot affect training, so equivalent runs produce equal files.
pub fn effective_config(config: &ModelConfig) -> ModelConfig {
    let mut c = config.clone();
    if !c.attention_supervised() {
        c.loss_variant = LossVariant::None;
        c.lambda_epi = 0.0;
        c.reduction = Reduction::default();
    }
    c
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RerankerParams<f32>,
    pub config: ModelConfig,
    pub logs: Vec<EpochLog>,
    pub stats: PairStats,
}

pub fn train_on_dataset(ds: &Dataset, config: &ModelConfig, opts: &TrainOptions) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    if ds.feature_width() != config.m || ds.grid.s() != config.s {
        return Err(PipelineError::Invalid(format!(
            "dataset has s = {}, m = {} but the model expects s = {}, m = {}",
            ds.grid.s(),
            ds.feature_width(),
            config.s,
            config.m
        )));
    }
    let (set, stats) = build_training_set(ds, config, opts)?;
    let (params, logs) = train(&set, config, &opts.schedule)?;
    Ok(TrainOutcome { params, config: effective_config(config), logs, stats })
}

const CONFIG_ENTRY: &str = "config.json";

pub fn checkpoint_archive(params: &RerankerParams<f32>, config: &ModelConfig) -> TensorArchive {
    let mut a = TensorArchive::default();
    let json = serde_json::to_vec(&effective_config(config)).expect("config serializes");
    let n = json.len() as u32;
    a.push(CONFIG_ENTRY, Tensor::new(vec![n], TensorData::U8(json)).expect("length matches"));
    for slot in params.layout().slots() {
        let dims = slot.shape.iter().map(|&d| d as u32).collect();
        let data = params.as_slice()[slot.range.clone()].to_vec();
        a.push(slot.name.clone(), Tensor::new(dims, TensorData::F32(data)).expect("slot shape matches"));
    }
    a
}

pub fn save_checkpoint(path: &Path, params: &RerankerParams<f32>, config: &ModelConfig) -> Result<(), PipelineError> {
    Ok(dataio::write_archive(path, &checkpoint_archive(params, config))?)
}

pub fn load_checkpoint(path: &Path) -> Result<(RerankerParams<f32>, ModelConfig), PipelineError> {
    let a = dataio::read_archive(path)?;
    let bad = |m: String| PipelineError::Invalid(format!("{}: {m}", path.display()));
    let config: ModelConfig = match a.get(CONFIG_ENTRY).map(Tensor::data) {
        Some(TensorData::U8(bytes)) => serde_json::from_slice(bytes).map_err(|e| bad(e.to_string()))?,
        _ => return Err(bad("missing config entry".into())),
    };
    config.validate()?;
    let mut params = RerankerParams::zeros(&config);
    let slots = params.layout().slots().to_vec();
    for slot in slots {
        let t = a.get(&slot.name).ok_or_else(|| bad(format!("missing tensor {}", slot.name)))?;
        let dims: Vec<usize> = t.dims().iter().map(|&d| d as usize).collect();
        match t.data() {
            TensorData::F32(v) if dims == slot.shape => params.as_mut_slice()[slot.range.clone()].copy_from_slice(v),
            _ => return Err(bad(format!("tensor {} has the wrong shape or dtype", slot.name))),
        }
    }
    if !params.is_finite() {
        return Err(PipelineError::Model(ModelError::NonFiniteActivation("checkpoint weights".into())));
    }
    Ok((params, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k_rerank: usize,
    pub recall_ks: Vec<usize>,
    pub overlap_bins: usize,
    /// Defaults to the observed range of per-query overlap.
    pub overlap_range: Option<(f64, f64)>,
    pub pseudo_geometry: PseudoGeometry,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k_rerank: 10,
            recall_ks: vec![1, 10, 50],
            overlap_bins: 5,
            overlap_range: None,
            pseudo_geometry: PseudoGeometry::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// Keys `R@K`.
    pub recall: BTreeMap<String, f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
}

impl RetrievalMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&format!("R@{k}")).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub global: RetrievalMetrics,
    /// Reranked metrics; equal to `global` without a model.
    pub final_metrics: RetrievalMetrics,
    pub overlap: OverlapBreakdown,
    pub overlap_range: (f64, f64),
    pub global_pr_curve: Vec<PrPoint>,
    pub pr_curve: Vec<PrPoint>,
    /// Attention concentration ratio on held-out matching pairs with pose.
    pub attention_ratio: Option<f64>,
}

fn metrics(rankings: &[RankedList], gt: &crate::evalkit::GroundTruth, ks: &[usize]) -> Result<RetrievalMetrics, PipelineError> {
    let mut recall = BTreeMap::new();
    for &k in ks {
        recall.insert(format!("R@{k}"), recall_at_k(rankings, gt, k)?);
    }
    Ok(RetrievalMetrics { recall, map: mean_average_precision(rankings, gt)? })
}

/// Retrieval index over the test split.
pub fn test_index(ds: &Dataset) -> Result<RetrievalIndex<f32>, PipelineError> {
    let entries = ds
        .split(Split::Test)
        .into_iter()
        .map(|k| {
            let img = &ds.images[k];
            let mut e = IndexEntry::from_features(img.image_id.clone(), img.instance_id, (*img.features).clone());
            e.overlaps = Some(img.overlaps.clone());
            e
        })
        .collect();
    Ok(RetrievalIndex::new(entries)?)
}

/// A trained model bound to a dataset for pair scoring.
pub struct ModelScorer<'a> {
    pub ds: &'a Dataset,
    pub params: &'a RerankerParams<f32>,
    pub config: &'a ModelConfig,
    pub pseudo_geometry: PseudoGeometry,
}

impl ModelScorer<'_> {
    pub fn score_ids(&self, query: &str, candidate: &str) -> Result<f64, PipelineError> {
        let a = self.ds.position(query).ok_or_else(|| EvalError::UnknownQuery(query.into()))?;
        let b = self.ds.position(candidate).ok_or_else(|| EvalError::UnknownQuery(candidate.into()))?;
        let epe = if self.config.epe_enabled {
            // Test-time geometry never reads poses: gated estimate or random.
            let g = estimated_geometry(self.ds, a, b, &self.pseudo_geometry, self.config.seed);
            Some(pair_epe(self.ds, a, b, &g, self.config.seed)?)
        } else {
            None
        };
        let (fa, fb) = (&self.ds.images[a].features, &self.ds.images[b].features);
        let tokens = assemble_tokens(fa, fb, self.params, self.config, epe.as_ref())?;
        Ok(forward(self.params, &tokens, self.config)?.logit as f64)
    }
}

impl crate::evalkit::PairScorer<f32> for ModelScorer<'_> {
    fn score(&self, q: &IndexEntry<f32>, c: &IndexEntry<f32>) -> Result<f64, EvalError> {
        self.score_ids(&q.image_id, &c.image_id).map_err(|e| match e {
            PipelineError::Eval(e) => e,
            PipelineError::Model(m) => EvalError::Model(m),
            other => EvalError::InvalidArgument(other.to_string()),
        })
    }
}

/// Forward pass of one dataset pair.
pub fn pair_attention(
    ds: &Dataset,
    params: &RerankerParams<f32>,
    config: &ModelConfig,
    a: usize,
    b: usize,
    geometry: &PairGeometry,
) -> Result<CrossAttentionMaps<f32>, PipelineError> {
    let epe = if config.epe_enabled { Some(pair_epe(ds, a, b, geometry, config.seed)?) } else { None };
    let tokens = assemble_tokens(&ds.images[a].features, &ds.images[b].features, params, config, epe.as_ref())?;
    Ok(forward(params, &tokens, config)?.cross)
}

/// Mean attention-concentration ratio over same-instance test pairs with pose.
pub fn held_out_attention_ratio(
    ds: &Dataset,
    params: &RerankerParams<f32>,
    config: &ModelConfig,
) -> Result<Option<f64>, PipelineError> {
    use rayon::prelude::*;
    let test = ds.split(Split::Test);
    let mut jobs = Vec::new();
    for (x, &a) in test.iter().enumerate() {
        for &b in &test[x + 1..] {
            if ds.images[a].instance_id == ds.images[b].instance_id && ds.images[a].view.is_some() && ds.images[b].view.is_some()
            {
                jobs.push((a, b));
            }
        }
    }
    let ratios: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(a, b)| {
            let (v1, v2) = (ds.images[a].view.as_ref().expect("filtered"), ds.images[b].view.as_ref().expect("filtered"));
            let f = relative_fundamental(v1, v2)?;
            let guide = rasterize_guide(&f, &ds.grid, &ds.grid);
            let cross = pair_attention(ds, params, config, a, b, &PairGeometry::Pose(f))?;
            Ok(attention_concentration(&cross, &guide, config).map(|c| c.ratio()))
        })
        .collect::<Result<_, PipelineError>>()?;
    let vals: Vec<f64> = ratios.into_iter().flatten().collect();
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

/// Global retrieval over the test split, optionally reranked by a model.
pub fn evaluate(
    ds: &Dataset,
    model: Option<(&RerankerParams<f32>, &ModelConfig)>,
    opts: &EvalOptions,
) -> Result<EvalReport, PipelineError> {
    let index = test_index(ds)?;
    let gt = index.ground_truth();
    let queries: Vec<String> = index.entries().iter().map(|e| e.image_id.clone()).collect();
    let global = rank_all(&index, &queries)?;
    let global_metrics = metrics(&global, &gt, &opts.recall_ks)?;
    let (final_rankings, attention_ratio) = match model {
        Some((params, config)) => {
            let scorer = ModelScorer { ds, params, config, pseudo_geometry: opts.pseudo_geometry };
            let reranked = rerank_all(&global, opts.k_rerank, &scorer, &index)?;
            (reranked, held_out_attention_ratio(ds, params, config)?)
        }
        None => (global.clone(), None),
    };
    let final_metrics = metrics(&final_rankings, &gt, &opts.recall_ks)?;
    let per_query: HashMap<String, f64> =
        queries.iter().filter_map(|q| index.query_overlap(q, &gt).map(|v| (q.clone(), v))).collect();
    let range = opts.overlap_range.unwrap_or_else(|| {
        let lo = per_query.values().copied().fold(f64::INFINITY, f64::min);
        let hi = per_query.values().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else {
            (0.0, 1.0)
        }
    });
    let overlap = overlap_breakdown(&final_rankings, &gt, &per_query, opts.overlap_bins, range)?;
    Ok(EvalReport {
        queries: queries.len(),
        global: global_metrics,
        final_metrics,
        overlap,
        overlap_range: range,
        global_pr_curve: mean_pr_curve(&global, &gt),
        pr_curve: mean_pr_curve(&final_rankings, &gt),
        attention_ratio,
    })
}

/// Plain PGM (P2) of an `s² × s²` map as an `s × s` grid of `s × s` patches
/// separated by 1-px mid-gray lines; values min-max scaled to 0..=255.
pub fn render_map_pgm(map: &Matrix<f64>, s: usize) -> String {
    let side = s * s + s - 1;
    let (lo, hi) = map.as_slice().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut px = vec![128u8; side * side];
    for src in 0..s * s {
        let (pr, pc) = (src / s, src % s);
        for dst in 0..s * s {
            let (r, c) = (dst / s, dst % s);
            let y = pr * (s + 1) + r;
            let x = pc * (s + 1) + c;
            px[y * side + x] = (((map.get(src, dst) - lo) / span) * 255.0).round() as u8;
        }
    }
    let mut out = format!("P2\n{side} {side}\n255\n");
    for row in px.chunks(side) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn binary_map_matrix(b: &BinaryMap) -> Matrix<f64> {
    Matrix::from_fn(b.rows(), b.cols(), |r, c| b.get(r, c) as u8 as f64)
}

/// Ground-truth guide of a dataset pair, when both poses are known.
pub fn pair_guide(ds: &Dataset, a: usize, b: usize) -> Option<EpipolarGuide> {
    let (v1, v2) = (ds.images[a].view.as_ref()?, ds.images[b].view.as_ref()?);
    relative_fundamental(v1, v2).ok().map(|f| rasterize_guide(&f, &ds.grid, &ds.grid))
}

/// Draws `k` distinct indices below `n` (helper for subsampled analyses).
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, n, k.min(n)).into_vec();
    v.sort_unstable();
    v
}

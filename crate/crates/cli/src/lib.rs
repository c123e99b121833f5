//! Command-line surface: `gen`, `rasterize`, `train`, `eval`, `viz` and
//! `estimate-f`, each a thin layer over library calls.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 unreliable geometry,
//! 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use epiguide::dataio::{DataError, Tensor, TensorArchive, TensorData};
use epiguide::evalkit::pr_curve_csv;
use epiguide::losses::LossVariant;
use epiguide::model::{ModelConfig, ModelError};
use epiguide::pipeline::{
    binary_map_matrix, evaluate, load_checkpoint, pair_attention, pair_geometry, pair_guide, render_map_pgm,
    save_checkpoint, train_on_dataset, Dataset, EvalOptions, EvalReport, PipelineError, PseudoGeometry,
    RetrievalMetrics, TrainOptions,
};
use epiguide::robustf::{ransac_fundamental, reliability_gate, sampson_error, Correspondences, RobustError};
use epiguide::synthgen::{generate_benchmark, BenchmarkSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_UNRELIABLE: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Overrides `--out-dir` when set.
pub const OUT_DIR_ENV: &str = "EPIGUIDE_OUT";

#[derive(Debug, Parser)]
#[command(name = "epiguide", version, about = "Epipolar-guided reranking: data, training and evaluation")]
pub struct Cli {
    /// Base seed; required by `gen` and `train`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view benchmark.
    Gen(GenArgs),
    /// Rasterize ground-truth guides for posed pairs.
    Rasterize(RasterizeArgs),
    /// Train the reranker.
    Train(TrainArgs),
    /// Evaluate global retrieval, optionally reranked by a checkpoint.
    Eval(EvalArgs),
    /// Write cross-attention and guide grids of one pair as PGM.
    Viz(VizArgs),
    /// Robust fundamental-matrix estimate from correspondences.
    EstimateF(EstimateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    #[arg(long, default_value_t = 20)]
    pub categories: usize,
    #[arg(long, default_value_t = 5)]
    pub views: usize,
    #[arg(long, default_value_t = 24)]
    pub landmarks: usize,
    /// Feature noise std.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Fraction of instances in the training split.
    #[arg(long, default_value_t = 0.5)]
    pub split: f64,
    /// Correspondences per same-instance pair; 0 writes none.
    #[arg(long, default_value_t = 150)]
    pub match_points: usize,
    /// Omit camera poses from the manifest.
    #[arg(long)]
    pub no_pose: bool,
}

#[derive(Debug, Args)]
pub struct RasterizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Restrict to one pair of image ids.
    #[arg(long, num_args = 2, value_names = ["ID1", "ID2"])]
    pub pair: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    None,
    Epi,
    MaxEpi,
}

impl From<LossArg> for LossVariant {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::None => LossVariant::None,
            LossArg::Epi => LossVariant::Epi,
            LossArg::MaxEpi => LossVariant::MaxEpi,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = LossArg::None)]
    pub loss: LossArg,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 4)]
    pub epochs_phase1: usize,
    #[arg(long, default_value_t = 4)]
    pub epochs_phase2: usize,
    /// Feed the epipolar-plane encoding to the model.
    #[arg(long)]
    pub epe: bool,
    /// JSON file overriding s, m, heads, layers, mlp_width or num_freqs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pairs_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Build guides from gated correspondence estimates instead of poses.
    #[arg(long)]
    pub no_pose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Reranking model; global retrieval only when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k_rerank: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
    pub recall_ks: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub overlap_bins: usize,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, num_args = 2, required = true, value_names = ["ID1", "ID2"])]
    pub pair: Vec<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Head index or `mean`.
    #[arg(long, default_value = "mean")]
    pub head: String,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// JSON array of `[x1, y1, x2, y2]`.
    #[arg(long)]
    pub correspondences: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    /// Sampson inlier threshold in px².
    #[arg(long, default_value_t = 1.0)]
    pub threshold: f64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn model_error(e: ModelError) -> CliError {
    match e {
        ModelError::NonFiniteActivation(_) => CliError::Numeric(e.to_string()),
        other => CliError::Usage(other.to_string()),
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Model(m) => model_error(m),
            PipelineError::Robust(r @ (RobustError::DegenerateConfiguration(_) | RobustError::NoModelFound)) => {
                CliError::Numeric(r.to_string())
            }
            PipelineError::Eval(epiguide::evalkit::EvalError::Model(m)) => model_error(m),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

pub fn out_dir(cli: &Cli) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cli.out_dir.clone(),
    }
}

fn require_seed(cli: &Cli, cmd: &str) -> Result<u64, CliError> {
    cli.seed.ok_or_else(|| CliError::Usage(format!("`{cmd}` needs --seed")))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn load_dataset(manifest: &Path) -> Result<Dataset, CliError> {
    if !manifest.is_file() {
        return Err(CliError::Usage(format!("manifest not found: {}", manifest.display())));
    }
    Ok(Dataset::load(manifest)?)
}

/// Runs one parsed command and returns its exit code.
pub fn run(cli: &Cli) -> Result<i32, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // A pool built earlier in this process stays in place.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = out_dir(cli);
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, require_seed(cli, "gen")?, &out),
        Command::Rasterize(a) => cmd_rasterize(a, &out),
        Command::Train(a) => cmd_train(a, require_seed(cli, "train")?, &out),
        Command::Eval(a) => cmd_eval(a, &out),
        Command::Viz(a) => cmd_viz(a, &out),
        Command::EstimateF(a) => cmd_estimate_f(a, cli.seed.unwrap_or(0), &out),
    }
}

pub fn benchmark_spec(a: &GenArgs) -> Result<BenchmarkSpec, CliError> {
    if a.instances < 2 {
        return Err(CliError::Usage("--instances must be at least 2".into()));
    }
    if a.categories == 0 || a.views < 2 || a.landmarks == 0 {
        return Err(CliError::Usage("--categories, --landmarks must be positive and --views at least 2".into()));
    }
    if !(0.0..=1.0).contains(&a.split) {
        return Err(CliError::Usage(format!("--split {} is outside [0, 1]", a.split)));
    }
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(CliError::Usage("--noise must be finite and non-negative".into()));
    }
    let mut spec = BenchmarkSpec {
        n_instances: a.instances,
        n_categories: a.categories,
        views_per_instance: a.views,
        n_landmarks: a.landmarks,
        split_fraction: a.split,
        match_points: a.match_points,
        with_pose: !a.no_pose,
        ..BenchmarkSpec::default()
    };
    spec.render.noise_sigma = a.noise;
    Ok(spec)
}

fn cmd_gen(a: &GenArgs, seed: u64, out: &Path) -> Result<i32, CliError> {
    let spec = benchmark_spec(a)?;
    let b = generate_benchmark(seed, &spec).map_err(|e| CliError::Numeric(e.to_string()))?;
    create_dir(out)?;
    b.write(out)?;
    let train = b.images.iter().filter(|i| i.split == epiguide::dataio::Split::Train).count();
    println!("wrote {} images ({} train, {} test) to {}", b.images.len(), train, b.images.len() - train, out.display());
    Ok(EXIT_OK)
}

fn guide_tensor(map: &epiguide::guides::BinaryMap) -> Result<Tensor, CliError> {
    let data = (0..map.rows()).flat_map(|r| (0..map.cols()).map(move |c| (r, c))).map(|(r, c)| map.get(r, c) as u8).collect();
    Ok(Tensor::new(vec![map.rows() as u32, map.cols() as u32], TensorData::U8(data))?)
}

fn cmd_rasterize(a: &RasterizeArgs, out: &Path) -> Result<i32, CliError> {
    let ds = load_dataset(&a.manifest)?;
    let mut jobs = Vec::new();
    match &a.pair {
        Some(p) => jobs.push((position(&ds, &p[0])?, position(&ds, &p[1])?)),
        None => {
            for x in 0..ds.images.len() {
                for y in x + 1..ds.images.len() {
                    if ds.images[x].instance_id == ds.images[y].instance_id {
                        jobs.push((x, y));
                    }
                }
            }
        }
    }
    let mut archive = TensorArchive::default();
    for (x, y) in jobs {
        let Some(g) = pair_guide(&ds, x, y) else {
            if a.pair.is_some() {
                return Err(CliError::Usage("the pair has no poses; cannot rasterize its guide".into()));
            }
            continue;
        };
        let key = format!("{}/{}", ds.images[x].image_id, ds.images[y].image_id);
        archive.push(format!("{key}/g12"), guide_tensor(g.g12())?);
        archive.push(format!("{key}/g21"), guide_tensor(g.g21())?);
    }
    let path = out.join("guides.epga");
    create_dir(out)?;
    epiguide::dataio::write_archive(&path, &archive)?;
    println!("wrote {} guides to {}", archive.entries.len() / 2, path.display());
    Ok(EXIT_OK)
}

/// Architecture fields settable from a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub s: Option<usize>,
    pub m: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub mlp_width: Option<usize>,
    pub num_freqs: Option<usize>,
}

impl ConfigOverrides {
    pub fn apply(&self, c: &mut ModelConfig) {
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.s, self.s);
        set(&mut c.m, self.m);
        set(&mut c.heads, self.heads);
        set(&mut c.layers, self.layers);
        set(&mut c.mlp_width, self.mlp_width);
        set(&mut c.num_freqs, self.num_freqs);
    }
}

/// Model configuration and training options for a `train` invocation.
pub fn train_setup(a: &TrainArgs, seed: u64) -> Result<(ModelConfig, TrainOptions), CliError> {
    let mut config = ModelConfig {
        loss_variant: a.loss.into(),
        lambda_epi: a.lambda,
        epe_enabled: a.epe,
        seed,
        ..ModelConfig::desk_scale()
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let o: ConfigOverrides =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        o.apply(&mut config);
    }
    config.validate().map_err(model_error)?;
    let mut opts = TrainOptions { use_pose: !a.no_pose, ..TrainOptions::default() };
    opts.schedule.epochs_phase1 = a.epochs_phase1;
    opts.schedule.epochs_phase2 = a.epochs_phase2;
    if let Some(n) = a.pairs_per_epoch {
        opts.schedule.pairs_per_epoch = n;
    }
    if let Some(b) = a.batch_size {
        if b == 0 {
            return Err(CliError::Usage("--batch-size must be at least 1".into()));
        }
        opts.schedule.batch_size = b;
    }
    if let Some(lr) = a.lr {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(CliError::Usage("--lr must be positive".into()));
        }
        opts.schedule.optimizer.lr = lr;
    }
    Ok((config, opts))
}

fn cmd_train(a: &TrainArgs, seed: u64, out: &Path) -> Result<i32, CliError> {
    let ds = load_dataset(&a.manifest)?;
    let (config, opts) = train_setup(a, seed)?;
    let outcome = train_on_dataset(&ds, &config, &opts)?;
    create_dir(out)?;
    save_checkpoint(&out.join("checkpoint.epga"), &outcome.params, &outcome.config)?;
    let mut log = String::new();
    for entry in &outcome.logs {
        log.push_str(&serde_json::to_string(entry).expect("log entries serialize"));
        log.push('\n');
    }
    write_file(&out.join("train_log.jsonl"), log)?;
    let s = outcome.stats;
    println!(
        "trained on {} positives, {} negatives ({} pose guides, {} estimated, {} unguided)",
        s.positives, s.negatives, s.pose_guides, s.estimated_guides, s.unguided_positives
    );
    if let Some(last) = outcome.logs.last() {
        println!("final epoch {}: match BCE {:.4}", last.epoch, last.match_bce);
    }
    Ok(EXIT_OK)
}

fn metrics_block(name: &str, queries: usize, m: &RetrievalMetrics) -> Value {
    let mut obj = Map::new();
    obj.insert("block".into(), json!(name));
    obj.insert("queries".into(), json!(queries));
    for (k, v) in &m.recall {
        obj.insert(k.clone(), json!(v));
    }
    obj.insert("mAP".into(), json!(m.map));
    Value::Object(obj)
}

/// JSONL metric blocks of a report, one object per line.
pub fn report_lines(r: &EvalReport) -> String {
    let mut blocks = vec![
        metrics_block("global", r.queries, &r.global),
        metrics_block("final", r.queries, &r.final_metrics),
        json!({
            "block": "overlap",
            "range": [r.overlap_range.0, r.overlap_range.1],
            "bins": r.overlap.bins,
            "excluded": r.overlap.excluded,
            "high_low_drop": r.overlap.high_low_drop(),
        }),
    ];
    if let Some(ratio) = r.attention_ratio {
        blocks.push(json!({ "block": "attention", "ratio": ratio }));
    }
    blocks.iter().map(|b| format!("{b}\n")).collect()
}

fn cmd_eval(a: &EvalArgs, out: &Path) -> Result<i32, CliError> {
    if a.k_rerank == 0 || a.recall_ks.is_empty() || a.recall_ks.contains(&0) || a.overlap_bins == 0 {
        return Err(CliError::Usage("--k-rerank, --overlap-bins and every --recall-ks value must be positive".into()));
    }
    let ds = load_dataset(&a.manifest)?;
    let model = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let opts = EvalOptions {
        k_rerank: a.k_rerank,
        recall_ks: a.recall_ks.clone(),
        overlap_bins: a.overlap_bins,
        ..EvalOptions::default()
    };
    let report = evaluate(&ds, model.as_ref().map(|(p, c)| (p, c)), &opts)?;
    create_dir(out)?;
    write_file(&out.join("eval_report.jsonl"), report_lines(&report))?;
    write_file(&out.join("pr_global.csv"), pr_curve_csv(&report.global_pr_curve))?;
    write_file(&out.join("pr_final.csv"), pr_curve_csv(&report.pr_curve))?;
    let summary: Vec<String> = report.final_metrics.recall.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
    println!("{} queries: {} mAP {:.4}", report.queries, summary.join(" "), report.final_metrics.map);
    if let Some(r) = report.attention_ratio {
        println!("attention concentration ratio {r:.3}");
    }
    Ok(EXIT_OK)
}

fn position(ds: &Dataset, id: &str) -> Result<usize, CliError> {
    ds.position(id).ok_or_else(|| CliError::Usage(format!("unknown image id {id}")))
}

fn cmd_viz(a: &VizArgs, out: &Path) -> Result<i32, CliError> {
    let ds = load_dataset(&a.manifest)?;
    let (x, y) = (position(&ds, &a.pair[0])?, position(&ds, &a.pair[1])?);
    let s = ds.grid.s();
    let stem = format!("{}__{}", a.pair[0], a.pair[1]);
    let dir = out.join("viz");
    let mut written = Vec::new();
    if let Some(g) = pair_guide(&ds, x, y) {
        for (name, map) in [("guide12", g.g12()), ("guide21", g.g21())] {
            let path = dir.join(format!("{stem}_{name}.pgm"));
            write_file(&path, render_map_pgm(&binary_map_matrix(map), s))?;
            written.push(path);
        }
    }
    if let Some(ckpt) = &a.checkpoint {
        let (params, config) = load_checkpoint(ckpt)?;
        let geometry = pair_geometry(&ds, x, y, &PseudoGeometry::default(), config.seed);
        let cross = pair_attention(&ds, &params, &config, x, y, &geometry)?;
        let (a12, a21) = if a.head == "mean" {
            cross.mean_over_heads()
        } else {
            let h: usize = a.head.parse().map_err(|_| CliError::Usage(format!("--head must be an index or `mean`, got {}", a.head)))?;
            if h >= cross.heads() {
                return Err(CliError::Usage(format!("--head {h} is out of range for {} heads", cross.heads())));
            }
            (cross.a12[h].clone(), cross.a21[h].clone())
        };
        for (name, map) in [("attn12", a12), ("attn21", a21)] {
            let path = dir.join(format!("{stem}_{name}.pgm"));
            write_file(&path, render_map_pgm(&map.cast::<f64>(), s))?;
            written.push(path);
        }
    }
    if written.is_empty() {
        return Err(CliError::Usage("nothing to draw: the pair has no poses and no --checkpoint was given".into()));
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(EXIT_OK)
}

/// Runs the estimator and returns the JSON report with its exit code.
pub fn estimate_report(pairs: Vec<[f64; 4]>, iters: usize, threshold: f64, seed: u64) -> Result<(Value, i32), CliError> {
    let n = pairs.len();
    let c = Correspondences::new(pairs).map_err(|e| CliError::Usage(e.to_string()))?;
    let unreliable = |reason: String| {
        (json!({ "matches": n, "inliers": 0, "reliable": false, "f": Value::Null, "reason": reason }), EXIT_UNRELIABLE)
    };
    match ransac_fundamental(&c, iters, threshold, seed) {
        Ok(est) => {
            let errs: Vec<f64> = c
                .pairs
                .iter()
                .zip(&est.inlier_mask)
                .filter(|(_, &m)| m)
                .filter_map(|(p, _)| sampson_error(&est.f, p).ok())
                .collect();
            let mean = if errs.is_empty() { Value::Null } else { json!(errs.iter().sum::<f64>() / errs.len() as f64) };
            let report = json!({
                "matches": n,
                "inliers": est.inlier_count,
                "reliable": est.reliable,
                "f": est.f.matrix(),
                "mean_sampson_px2": mean,
            });
            Ok((report, if est.reliable { EXIT_OK } else { EXIT_UNRELIABLE }))
        }
        Err(RobustError::InsufficientPoints(_)) => Ok(unreliable(format!("need at least 8 correspondences, got {n}"))),
        // Too few matches fail the gate whatever the fit; only report a
        // numeric failure when the count alone would have passed.
        Err(e @ (RobustError::DegenerateConfiguration(_) | RobustError::NoModelFound)) if reliability_gate(n, n) == Ok(true) => {
            Err(CliError::Numeric(e.to_string()))
        }
        Err(e @ (RobustError::DegenerateConfiguration(_) | RobustError::NoModelFound)) => Ok(unreliable(e.to_string())),
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}

fn cmd_estimate_f(a: &EstimateArgs, seed: u64, out: &Path) -> Result<i32, CliError> {
    if !(a.threshold > 0.0 && a.threshold.is_finite()) {
        return Err(CliError::Usage("--threshold must be positive".into()));
    }
    let path = &a.correspondences;
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let pairs: Vec<[f64; 4]> =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let (report, code) = estimate_report(pairs, a.iters, a.threshold, seed)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out.join("estimate_f.json"), format!("{text}\n"))?;
    println!("{text}");
    Ok(code)
}

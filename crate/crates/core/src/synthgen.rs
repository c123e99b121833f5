//! Deterministic multi-view benchmark of synthetic object instances.
//!
//! Each instance is a cloud of oriented landmarks inside the unit ball.
//! Cameras sit on a circle around the object at even azimuth spacing and look
//! at the origin. A landmark is seen by a camera when its normal faces it, and
//! then writes its descriptor into the feature cell it projects to.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitBall, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::dataio::{self, DataError, ManifestRecord, PoseRecord, Split, Tensor};
use crate::geometry::{CameraView, GeometryError};
use crate::guides::GridSpec;
use crate::linalg::{dot, norm, sub, Matrix, Vec3};

/// Maximum deviation of each camera azimuth from even spacing.
pub const AZIMUTH_JITTER_DEG: f64 = 6.0;

/// Mixes a base seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut impl Rng, m: usize, sigma: f64) -> Vec<f64> {
    (0..m).map(|_| sigma * gauss(rng)).collect()
}

/// Standard deviations of the three descriptor components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptorMix {
    pub category: f64,
    pub instance: f64,
    pub landmark: f64,
}

impl Default for DescriptorMix {
    fn default() -> Self {
        Self { category: 1.0, instance: 0.5, landmark: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub position: Vec3<f64>,
    /// Outward unit normal; the landmark is visible from cameras it faces.
    pub normal: Vec3<f64>,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub instance_id: u64,
    pub category_id: u64,
    pub landmarks: Vec<Landmark>,
}

/// Category means depend on the category id only, so every instance of a
/// category shares one.
pub fn category_mean(category_id: u64, m: usize, sigma: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0xC47E_6011, category_id));
    normal_vec(&mut rng, m, sigma)
}

pub fn generate_scene(seed: u64, n_landmarks: usize, m: usize, category_id: u64) -> SyntheticScene {
    generate_scene_with(seed, n_landmarks, m, category_id, &DescriptorMix::default())
}

pub fn generate_scene_with(
    seed: u64,
    n_landmarks: usize,
    m: usize,
    category_id: u64,
    mix: &DescriptorMix,
) -> SyntheticScene {
    let n_landmarks = n_landmarks.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = category_mean(category_id, m, mix.category);
    let offset = normal_vec(&mut rng, m, mix.instance);
    let landmarks = (0..n_landmarks)
        .map(|_| {
            let position: [f64; 3] = UnitBall.sample(&mut rng);
            let normal: [f64; 3] = UnitSphere.sample(&mut rng);
            let own = normal_vec(&mut rng, m, mix.landmark);
            let descriptor = (0..m).map(|k| mean[k] + offset[k] + own[k]).collect();
            Landmark { position, normal, descriptor }
        })
        .collect();
    SyntheticScene { instance_id: seed, category_id, landmarks }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticView {
    pub view: CameraView<f64>,
    pub azimuth: f64,
    /// `s² × m` feature grid.
    pub features: Matrix<f64>,
    /// Per landmark: the cell it projects to when visible.
    pub visibility: Vec<Option<usize>>,
}

impl SyntheticView {
    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|v| v.is_some()).count()
    }
}

/// Jaccard index of the visible landmark sets (1 for identical sets).
pub fn overlap_score(a: &SyntheticView, b: &SyntheticView) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.visibility.iter().zip(&b.visibility) {
        inter += (x.is_some() && y.is_some()) as usize;
        union += (x.is_some() || y.is_some()) as usize;
    }
    if union == 0 {
        // Two empty sets are equal.
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Rendering settings shared by every view of a benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub radius: f64,
    /// Maximum elevation, radians, drawn uniformly in `±elevation_jitter`.
    pub elevation_jitter: f64,
    pub noise_sigma: f64,
    /// Landmark visible when `cos(normal, direction to camera)` exceeds this.
    pub facing_threshold: f64,
    /// Std of a per-view offset added to every cell (illumination and
    /// background changes).
    pub view_nuisance: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { radius: 3.0, elevation_jitter: 0.25, noise_sigma: 0.3, facing_threshold: 0.0, view_nuisance: 0.2 }
    }
}

/// Focal length that fits the unit ball into the frame with a 5% margin.
fn fitting_focal(radius: f64, size: u32) -> f64 {
    let half_angle = (1.0 / radius).asin();
    0.95 * (size as f64 / 2.0) / half_angle.tan()
}

pub fn render_views(
    scene: &SyntheticScene,
    n_views: usize,
    settings: &RenderSettings,
    grid: &GridSpec,
    seed: u64,
) -> Result<Vec<SyntheticView>, GeometryError> {
    assert!(settings.radius > 1.0, "cameras must stay outside the unit ball");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = scene.landmarks.first().map_or(0, |l| l.descriptor.len());
    let (w, h) = (grid.width(), grid.height());
    let f = fitting_focal(settings.radius, w.min(h));
    let k = [[f, 0.0, w as f64 / 2.0], [0.0, f, h as f64 / 2.0], [0.0, 0.0, 1.0]];
    let base = rng.gen::<f64>() * std::f64::consts::TAU;
    let step = std::f64::consts::TAU / n_views as f64;
    let jitter = AZIMUTH_JITTER_DEG.to_radians();
    let mut views = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let azimuth = base + v as f64 * step + rng.gen_range(-jitter..=jitter);
        let elevation = if settings.elevation_jitter > 0.0 {
            rng.gen_range(-settings.elevation_jitter..=settings.elevation_jitter)
        } else {
            0.0
        };
        let r = settings.radius;
        let eye = [r * elevation.cos() * azimuth.cos(), r * elevation.cos() * azimuth.sin(), r * elevation.sin()];
        let view = CameraView::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], k, w, h)?;
        let mut features = Matrix::zeros(grid.cells(), m);
        if settings.noise_sigma > 0.0 {
            for x in features.as_mut_slice() {
                *x = settings.noise_sigma * gauss(&mut rng);
            }
        }
        let mut visibility = Vec::with_capacity(scene.landmarks.len());
        for lm in &scene.landmarks {
            let to_cam = sub(&eye, &lm.position);
            let facing = dot(&lm.normal, &to_cam) / norm(&to_cam) > settings.facing_threshold;
            let cell = view.project(&lm.position).filter(|p| facing && view.in_image(p)).and_then(|p| grid.cell_of(&p));
            if let Some(c) = cell {
                for (dst, &d) in features.row_mut(c).iter_mut().zip(&lm.descriptor) {
                    let noise = if settings.noise_sigma > 0.0 {
                        settings.noise_sigma * gauss(&mut rng)
                    } else {
                        0.0
                    };
                    *dst = d + noise;
                }
            }
            visibility.push(cell);
        }
        if settings.view_nuisance > 0.0 {
            let offset = normal_vec(&mut rng, m, settings.view_nuisance);
            for r in 0..grid.cells() {
                for (dst, &o) in features.row_mut(r).iter_mut().zip(&offset) {
                    *dst += o;
                }
            }
        }
        views.push(SyntheticView { view, azimuth, features, visibility });
    }
    Ok(views)
}

/// Full benchmark parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub n_instances: usize,
    pub n_categories: usize,
    pub views_per_instance: usize,
    pub n_landmarks: usize,
    pub m: usize,
    pub s: usize,
    pub image_size: u32,
    pub split_fraction: f64,
    pub render: RenderSettings,
    pub descriptors: DescriptorMix,
    /// Record camera poses in the manifest.
    pub with_pose: bool,
    /// Extra matchable surface points per instance for correspondence files;
    /// `0` disables correspondence output.
    pub match_points: usize,
    pub match_noise_px: f64,
    pub match_outlier_fraction: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_instances: 200,
            n_categories: 20,
            views_per_instance: 5,
            n_landmarks: 24,
            m: 32,
            s: 7,
            image_size: 224,
            split_fraction: 0.5,
            render: RenderSettings::default(),
            descriptors: DescriptorMix::default(),
            with_pose: true,
            match_points: 150,
            match_noise_px: 0.5,
            match_outlier_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkImage {
    pub image_id: String,
    pub instance_id: u64,
    pub category_id: u64,
    pub split: Split,
    pub view: SyntheticView,
    /// Overlap with the other views of the same instance.
    pub overlaps: BTreeMap<String, f64>,
    /// Noisy correspondences with same-instance partners.
    pub correspondences: BTreeMap<String, Vec<[f64; 4]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub images: Vec<BenchmarkImage>,
}

pub fn image_id(instance: usize, view: usize) -> String {
    format!("i{instance:05}_v{view}")
}

fn correspondences_between(
    points: &[(Vec3<f64>, Vec3<f64>)],
    a: &SyntheticView,
    b: &SyntheticView,
    spec: &BenchmarkSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; 4]> {
    let (ca, cb) = (a.view.center(), b.view.center());
    let seen = |v: &SyntheticView, c: &Vec3<f64>, p: &Vec3<f64>, n: &Vec3<f64>| {
        let d = sub(c, p);
        (dot(n, &d) / norm(&d) > spec.render.facing_threshold).then(|| v.view.project(p)).flatten().filter(|x| v.view.in_image(x))
    };
    let mut out = Vec::new();
    for (p, n) in points {
        if let (Some(x1), Some(x2)) = (seen(a, &ca, p, n), seen(b, &cb, p, n)) {
            let mut jitter = || spec.match_noise_px * gauss(&mut *rng);
            out.push([x1[0] + jitter(), x1[1] + jitter(), x2[0] + jitter(), x2[1] + jitter()]);
        }
    }
    let n_out = ((out.len() as f64) * spec.match_outlier_fraction / (1.0 - spec.match_outlier_fraction)).round() as usize;
    let (w, h) = (spec.image_size as f64, spec.image_size as f64);
    for _ in 0..n_out {
        out.push([rng.gen_range(0.0..w), rng.gen_range(0.0..h), rng.gen_range(0.0..w), rng.gen_range(0.0..h)]);
    }
    out.shuffle(rng);
    out
}

/// Builds every instance, view, overlap score and correspondence list.
pub fn generate_benchmark(seed: u64, spec: &BenchmarkSpec) -> Result<Benchmark, GeometryError> {
    assert!(spec.n_instances >= 2, "a benchmark needs at least two instances");
    let grid = GridSpec::new(spec.s, spec.image_size, spec.image_size)
        .map_err(|e| GeometryError::InvalidCamera(e.to_string()))?;
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut order: Vec<usize> = (0..spec.n_instances).collect();
    order.shuffle(&mut split_rng);
    let n_train = ((spec.n_instances as f64) * spec.split_fraction).round() as usize;
    let mut split = vec![Split::Test; spec.n_instances];
    for &i in &order[..n_train.min(spec.n_instances)] {
        split[i] = Split::Train;
    }
    let mut images = Vec::with_capacity(spec.n_instances * spec.views_per_instance);
    for inst in 0..spec.n_instances {
        let category = (inst % spec.n_categories.max(1)) as u64;
        let inst_seed = derive_seed(seed, 1 + inst as u64);
        let mut scene = generate_scene_with(inst_seed, spec.n_landmarks, spec.m, category, &spec.descriptors);
        scene.instance_id = inst as u64;
        let views = render_views(&scene, spec.views_per_instance, &spec.render, &grid, derive_seed(inst_seed, 1))?;
        let ids: Vec<String> = (0..views.len()).map(|v| image_id(inst, v)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(inst_seed, 2));
        let surface: Vec<(Vec3<f64>, Vec3<f64>)> =
            (0..spec.match_points).map(|_| (UnitBall.sample(&mut rng), UnitSphere.sample(&mut rng))).collect();
        let mut corr: Vec<BTreeMap<String, Vec<[f64; 4]>>> = vec![BTreeMap::new(); views.len()];
        if spec.match_points > 0 {
            for a in 0..views.len() {
                for b in (a + 1)..views.len() {
                    let c = correspondences_between(&surface, &views[a], &views[b], spec, &mut rng);
                    corr[b].insert(ids[a].clone(), c.iter().map(|p| [p[2], p[3], p[0], p[1]]).collect());
                    corr[a].insert(ids[b].clone(), c);
                }
            }
        }
        for (v, (view, c)) in views.iter().zip(corr).enumerate() {
            let overlaps =
                views.iter().enumerate().filter(|(u, _)| *u != v).map(|(u, o)| (ids[u].clone(), overlap_score(view, o))).collect();
            images.push(BenchmarkImage {
                image_id: ids[v].clone(),
                instance_id: inst as u64,
                category_id: category,
                split: split[inst],
                view: view.clone(),
                overlaps,
                correspondences: c,
            });
        }
    }
    Ok(Benchmark { spec: spec.clone(), images })
}

impl Benchmark {
    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.spec.s, self.spec.image_size, self.spec.image_size).expect("validated at generation")
    }

    /// Writes `manifest.jsonl`, `features/<id>.epgt` and, when enabled,
    /// `correspondences/<id>.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        let mut records = Vec::with_capacity(self.images.len());
        for img in &self.images {
            let feature_path = format!("features/{}.epgt", img.image_id);
            dataio::write_tensor(&dir.join(&feature_path), &Tensor::from_matrix(&img.view.features))?;
            let correspondences_path = if self.spec.match_points > 0 {
                let p = format!("correspondences/{}.json", img.image_id);
                dataio::write_correspondences(&dir.join(&p), &img.correspondences)?;
                Some(p)
            } else {
                None
            };
            records.push(ManifestRecord {
                image_id: img.image_id.clone(),
                instance_id: img.instance_id,
                category_id: img.category_id,
                split: img.split,
                feature_path,
                pose: self.spec.with_pose.then(|| PoseRecord::from_view(&img.view.view)),
                overlaps: Some(img.overlaps.clone()),
                correspondences_path,
            });
        }
        dataio::write_manifest(&dir.join("manifest.jsonl"), &records)?;
        let spec = serde_json::to_string_pretty(&self.spec).expect("serializable");
        std::fs::write(dir.join("benchmark.json"), spec).map_err(|e| DataError::io(&dir.join("benchmark.json"), e))
    }
}

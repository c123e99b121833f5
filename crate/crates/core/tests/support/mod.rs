//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use epiguide::evalkit::{GroundTruth, RankedItem, RankedList};
use epiguide::geometry::{random_rank2_matrix, relative_fundamental, CameraView, FundamentalMatrix};
use epiguide::guides::{rasterize_guide, EpipolarGuide, GridSpec};
use epiguide::linalg::Matrix;
use epiguide::losses::{epipolar_loss, max_epipolar_loss, LossVariant, Reduction};
use epiguide::model::{pair_loss, EpeInput, ModelConfig, RerankerParams};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

// Geometry.

/// 224×224 camera on a sphere around the origin with randomized intrinsics.
pub fn geometry_view(rng: &mut impl Rng) -> CameraView<f64> {
    let r = rng.gen_range(2.0..5.0);
    let (az, el) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(-0.6..0.6f64));
    let eye = [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()];
    let target = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
    let f = rng.gen_range(150.0..500.0);
    let k = [[f, 0.0, rng.gen_range(100.0..124.0)], [0.0, f * rng.gen_range(0.9..1.1), rng.gen_range(100.0..124.0)], [0.0, 0.0, 1.0]];
    CameraView::look_at(eye, target, [0.0, 0.0, 1.0], k, 224, 224).unwrap()
}

/// Projections of random points of the unit cube seen by both views.
pub fn random_points(rng: &mut impl Rng, v1: &CameraView<f64>, v2: &CameraView<f64>, n: usize) -> Vec<([f64; 2], [f64; 2])> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        if let (Some(a), Some(b)) = (v1.project(&p), v2.project(&p)) {
            out.push((a, b));
        }
    }
    out
}

pub fn transpose(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

// Guides.

const SAMPLES: usize = 9;

/// Supersampled membership: the homogeneous line `F x` changes sign (or
/// vanishes) over a `SAMPLES × SAMPLES` lattice spanning the closed cell.
pub fn oracle_row(f: &[[f64; 3]; 3], x: [f64; 2], dst: &GridSpec) -> Vec<u8> {
    let l: Vec<f64> = (0..3).map(|i| f[i][0] * x[0] + f[i][1] * x[1] + f[i][2]).collect();
    let (cw, ch) = (dst.width() as f64 / dst.s() as f64, dst.height() as f64 / dst.s() as f64);
    (0..dst.cells())
        .map(|j| {
            let (r, c) = ((j / dst.s()) as f64, (j % dst.s()) as f64);
            let (mut pos, mut neg, mut zero) = (false, false, false);
            for a in 0..SAMPLES {
                for b in 0..SAMPLES {
                    let px = (c + a as f64 / (SAMPLES - 1) as f64) * cw;
                    let py = (r + b as f64 / (SAMPLES - 1) as f64) * ch;
                    let v = l[0] * px + l[1] * py + l[2];
                    pos |= v > 0.0;
                    neg |= v < 0.0;
                    zero |= v == 0.0;
                }
            }
            u8::from(zero || (pos && neg))
        })
        .collect()
}

pub fn oracle_map(f: &[[f64; 3]; 3], src: &GridSpec, dst: &GridSpec) -> Vec<u8> {
    (0..src.cells()).flat_map(|i| oracle_row(f, src.cell_center(i), dst)).collect()
}

pub fn guide_view(rng: &mut impl Rng, w: u32, h: u32) -> CameraView<f64> {
    let r = rng.gen_range(2.0..5.0);
    let (az, el) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(-0.5..0.5f64));
    let eye = [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()];
    let f = rng.gen_range(150.0..400.0);
    let k = [[f, 0.0, w as f64 / 2.0], [0.0, f, h as f64 / 2.0], [0.0, 0.0, 1.0]];
    CameraView::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], k, w, h).unwrap()
}

/// Checks `count` random configurations against the supersampling oracle
/// and returns the first mismatch, if any.
pub fn rasterization_mismatch(seed: u64, count: usize) -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sides = [3usize, 7, 14];
    for k in 0..count {
        let s = sides[k % 3];
        let (w1, h1) = (rng.gen_range(100..400u32), rng.gen_range(100..400u32));
        let (w2, h2) = (rng.gen_range(100..400u32), rng.gen_range(100..400u32));
        let f = if k % 4 == 3 {
            random_rank2_matrix::<f64>(rng.gen())
        } else {
            relative_fundamental(&guide_view(&mut rng, w1, h1), &guide_view(&mut rng, w2, h2)).unwrap()
        };
        let (g1, g2) = (GridSpec::new(s, w1, h1).unwrap(), GridSpec::new(s, w2, h2).unwrap());
        let guide = rasterize_guide(&f, &g1, &g2);
        if guide.g12().as_slice() != oracle_map(f.matrix(), &g1, &g2).as_slice() {
            return Some(format!("config {k}: g12 differs"));
        }
        if guide.g21().as_slice() != oracle_map(&transpose(f.matrix()), &g2, &g1).as_slice() {
            return Some(format!("config {k}: g21 differs"));
        }
    }
    None
}

// Losses.

pub fn rectified_guide(s: usize) -> EpipolarGuide {
    let f = FundamentalMatrix::<f64>::new([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]).unwrap();
    let g = GridSpec::new(s, 224, 224).unwrap();
    rasterize_guide(&f, &g, &g)
}

pub fn random_guide(s: usize, seed: u64) -> EpipolarGuide {
    let g = GridSpec::new(s, 224, 224).unwrap();
    rasterize_guide(&random_rank2_matrix::<f64>(seed), &g, &g)
}

pub fn random_logits(n: usize, rng: &mut impl Rng) -> Matrix<f64> {
    Matrix::from_fn(n, n, |_, _| rng.gen_range(-4.0..4.0))
}

/// Worst relative error between analytic and central-difference loss
/// gradients at s = 3; absolute differences below 1e-9 count as exact.
pub fn loss_fd_error(variant: LossVariant, reduction: Reduction, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_guide(3, seed);
    let (a12, a21) = (random_logits(9, &mut rng), random_logits(9, &mut rng));
    let eval = |x: &Matrix<f64>, y: &Matrix<f64>| match variant {
        LossVariant::Epi => epipolar_loss(x, y, &g, reduction).unwrap(),
        _ => max_epipolar_loss(x, y, &g, reduction).unwrap(),
    };
    let r = eval(&a12, &a21);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        for idx in 0..81 {
            let (mut p12, mut p21, mut m12, mut m21) = (a12.clone(), a21.clone(), a12.clone(), a21.clone());
            let (p, m) = if which == 0 { (&mut p12, &mut m12) } else { (&mut p21, &mut m21) };
            p.as_mut_slice()[idx] += h;
            m.as_mut_slice()[idx] -= h;
            let fd = (eval(&p12, &p21).value - eval(&m12, &m21).value) / (2.0 * h);
            let an = if which == 0 { r.grad12.as_slice()[idx] } else { r.grad21.as_slice()[idx] };
            if (fd - an).abs() >= 1e-9 {
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8));
            }
        }
    }
    worst
}

// Model.

pub fn small_config(variant: LossVariant) -> ModelConfig {
    ModelConfig {
        s: 3,
        m: 8,
        heads: 2,
        layers: 2,
        mlp_width: 12,
        num_freqs: 1,
        epe_enabled: false,
        lambda_epi: 0.7,
        loss_variant: variant,
        reduction: Reduction::Mean,
        seed: 5,
        init_std: None,
    }
}

fn model_views() -> (CameraView<f64>, CameraView<f64>) {
    let k = [[60.0, 0.0, 48.0], [0.0, 60.0, 48.0], [0.0, 0.0, 1.0]];
    let v1 = CameraView::look_at([3.0, 0.0, 0.4], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], k, 96, 96).unwrap();
    let v2 = CameraView::look_at([0.9, 2.8, -0.3], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], k, 96, 96).unwrap();
    (v1, v2)
}

/// Worst relative error of the full model's parameter gradients against
/// central differences, with weights perturbed away from the near-zero init.
pub fn model_fd_error(config: &ModelConfig, label: bool, with_epe: bool) -> f64 {
    let (v1, v2) = model_views();
    let grid = GridSpec::new(config.s, 96, 96).unwrap();
    let f = relative_fundamental(&v1, &v2).unwrap();
    let guide = rasterize_guide(&f, &grid, &grid);
    let epe = with_epe.then(|| EpeInput::from_views(&v1, &v2, &grid, &grid, 3).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cells = config.s * config.s;
    let f1 = Matrix::from_fn(cells, config.m, |_, _| rng.gen_range(-1.0..1.0));
    let f2 = Matrix::from_fn(cells, config.m, |_, _| rng.gen_range(-1.0..1.0));
    let mut params = RerankerParams::<f64>::init(config).unwrap();
    let mut prng = ChaCha8Rng::seed_from_u64(99);
    for v in params.as_mut_slice() {
        *v += prng.gen_range(-0.4..0.4);
    }
    let (_, grads, _) = pair_loss(&params, config, &f1, &f2, label, Some(&guide), epe.as_ref()).unwrap();
    let eval = |p: &RerankerParams<f64>| pair_loss(p, config, &f1, &f2, label, Some(&guide), epe.as_ref()).unwrap().0.total;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..params.as_slice().len() {
        let mut plus = params.clone();
        plus.as_mut_slice()[k] += h;
        let mut minus = params.clone();
        minus.as_mut_slice()[k] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let an = grads.as_slice()[k];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
    }
    worst
}

// Robust estimation.

pub struct Scene {
    pub f: FundamentalMatrix<f64>,
    pub pairs: Vec<[f64; 4]>,
    pub inlier: Vec<bool>,
}

fn ransac_view(rng: &mut impl Rng) -> CameraView<f64> {
    let r = rng.gen_range(3.0..4.0);
    let (az, el) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(-0.4..0.4f64));
    let eye = [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()];
    let k = [[300.0, 0.0, 112.0], [0.0, 300.0, 112.0], [0.0, 0.0, 1.0]];
    CameraView::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], k, 224, 224).unwrap()
}

/// Two views with a non-trivial baseline, `n` matches of which a fraction
/// are uniform outliers, inliers jittered by Gaussian pixel noise.
pub fn scene(seed: u64, n: usize, outlier_fraction: f64, noise: f64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v1, mut v2) = (ransac_view(&mut rng), ransac_view(&mut rng));
    while (v1.center()[0] - v2.center()[0]).hypot(v1.center()[1] - v2.center()[1]) < 1.0 {
        v2 = ransac_view(&mut rng);
    }
    let f = relative_fundamental(&v1, &v2).unwrap();
    let gauss = Normal::new(0.0, noise.max(1e-300)).unwrap();
    let n_out = (n as f64 * outlier_fraction).round() as usize;
    let (mut pairs, mut inlier) = (Vec::new(), Vec::new());
    while pairs.len() < n - n_out {
        let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let (Some(a), Some(b)) = (v1.project(&p), v2.project(&p)) else { continue };
        let mut jit = |v: f64| if noise > 0.0 { v + gauss.sample(&mut rng) } else { v };
        pairs.push([jit(a[0]), jit(a[1]), jit(b[0]), jit(b[1])]);
        inlier.push(true);
    }
    for _ in 0..n_out {
        pairs.push([rng.gen_range(0.0..224.0), rng.gen_range(0.0..224.0), rng.gen_range(0.0..224.0), rng.gen_range(0.0..224.0)]);
        inlier.push(false);
    }
    Scene { f, pairs, inlier }
}

// Retrieval metrics.

pub struct Instance {
    pub rankings: Vec<RankedList>,
    pub gt: GroundTruth,
}

/// A few queries over a shuffled database; some positives may be missing
/// from the list entirely.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let queries = rng.gen_range(1..6);
    let db = rng.gen_range(2..15);
    let mut sets = HashMap::new();
    let mut rankings = Vec::new();
    for q in 0..queries {
        let name = format!("q{q}");
        let mut ids: Vec<String> = (0..db).map(|d| format!("d{d}")).collect();
        ids.shuffle(rng);
        let mut pos: HashSet<String> = ids.iter().filter(|_| rng.gen_bool(0.3)).cloned().collect();
        if pos.is_empty() {
            pos.insert(ids[rng.gen_range(0..db)].clone());
        }
        if rng.gen_bool(0.2) {
            pos.insert("absent".into());
        }
        let items = ids.into_iter().map(|id| RankedItem { id, score: 0.0 }).collect();
        sets.insert(name.clone(), pos);
        rankings.push(RankedList { query: name, items });
    }
    Instance { rankings, gt: GroundTruth::from_sets(sets) }
}

pub fn oracle_recall(inst: &Instance, k: usize) -> f64 {
    let mut hits = 0;
    for r in &inst.rankings {
        let mut hit = false;
        for it in r.items.iter().take(k) {
            if inst.gt.positives(&r.query).contains(&it.id) {
                hit = true;
            }
        }
        hits += hit as usize;
    }
    hits as f64 / inst.rankings.len() as f64
}

pub fn oracle_ap(r: &RankedList, gt: &GroundTruth) -> f64 {
    let pos = gt.positives(&r.query);
    let mut sum = 0.0;
    for (rank, it) in r.items.iter().enumerate() {
        if pos.contains(&it.id) {
            let found = r.items[..=rank].iter().filter(|x| pos.contains(&x.id)).count();
            sum += found as f64 / (rank + 1) as f64;
        }
    }
    sum / pos.len() as f64
}

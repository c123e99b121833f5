use epiguide::geometry::{epipolar_line, relative_fundamental};
use epiguide::guides::{line_meets_rect, GridSpec};
use epiguide::synthgen::{
    generate_benchmark, generate_scene, overlap_score, render_views, BenchmarkSpec, RenderSettings, AZIMUTH_JITTER_DEG,
};

fn grid() -> GridSpec {
    GridSpec::new(7, 224, 224).unwrap()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma) * (x - ma);
        bb += (y - mb) * (y - mb);
    }
    ab / (aa * bb).sqrt()
}

fn mean_descriptor(seed: u64, category: u64) -> Vec<f64> {
    let s = generate_scene(seed, 24, 32, category);
    (0..32).map(|k| s.landmarks.iter().map(|l| l.descriptor[k]).sum::<f64>() / 24.0).collect()
}

#[test]
fn scenes_are_deterministic_and_minimal_scene_is_valid() {
    assert_eq!(generate_scene(4, 24, 32, 1), generate_scene(4, 24, 32, 1));
    assert_ne!(generate_scene(4, 24, 32, 1), generate_scene(5, 24, 32, 1));
    let one = generate_scene(9, 1, 8, 0);
    assert_eq!(one.landmarks.len(), 1);
    let p = one.landmarks[0].position;
    assert!(p.iter().map(|v| v * v).sum::<f64>() <= 1.0);
    assert!(one.landmarks[0].descriptor.iter().all(|v| v.is_finite()));
    assert!(render_views(&one, 2, &RenderSettings::default(), &grid(), 0).is_ok());
}

#[test]
fn same_category_descriptors_correlate_more() {
    let (mut same, mut cross) = (0.0, 0.0);
    for k in 0..100u64 {
        let base = mean_descriptor(1000 + k, k % 10);
        same += pearson(&base, &mean_descriptor(5000 + k, k % 10));
        cross += pearson(&base, &mean_descriptor(5000 + k, k % 10 + 10));
    }
    assert!(same / 100.0 > cross / 100.0 + 0.3, "same {} cross {}", same / 100.0, cross / 100.0);
}

#[test]
fn cameras_are_evenly_spaced() {
    for seed in 0..20 {
        let views = render_views(&generate_scene(seed, 24, 8, 0), 5, &RenderSettings::default(), &grid(), seed).unwrap();
        for w in views.windows(2) {
            let d = (w[1].azimuth - w[0].azimuth).to_degrees();
            assert!((d - 72.0).abs() <= 2.0 * AZIMUTH_JITTER_DEG + 1e-9, "seed {seed}: {d}");
        }
    }
}

#[test]
fn noiseless_views_share_descriptors() {
    let settings = RenderSettings { noise_sigma: 0.0, view_nuisance: 0.0, ..Default::default() };
    let scene = generate_scene(3, 12, 16, 2);
    let views = render_views(&scene, 5, &settings, &grid(), 3).unwrap();
    let mut shared = 0;
    for a in 0..5 {
        for b in a + 1..5 {
            for (l, (x, y)) in views[a].visibility.iter().zip(&views[b].visibility).enumerate() {
                let (Some(c1), Some(c2)) = (x, y) else { continue };
                // Skip cells where another landmark wrote last.
                let owner = |v: &[Option<usize>], c: usize| v.iter().rposition(|&o| o == Some(c));
                if owner(&views[a].visibility, *c1) != Some(l) || owner(&views[b].visibility, *c2) != Some(l) {
                    continue;
                }
                assert_eq!(views[a].features.row(*c1), views[b].features.row(*c2));
                assert_eq!(views[a].features.row(*c1), scene.landmarks[l].descriptor.as_slice());
                shared += 1;
            }
        }
    }
    assert!(shared > 0);
}

#[test]
fn covisible_landmarks_satisfy_the_geometry() {
    let g = grid();
    for seed in 0..20u64 {
        let scene = generate_scene(seed, 24, 8, 0);
        let views = render_views(&scene, 5, &RenderSettings::default(), &g, seed).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                if a == b {
                    continue;
                }
                let f = relative_fundamental(&views[a].view, &views[b].view).unwrap();
                for (l, (x, y)) in views[a].visibility.iter().zip(&views[b].visibility).enumerate() {
                    let (Some(_), Some(c2)) = (x, y) else { continue };
                    let p = scene.landmarks[l].position;
                    let (x1, x2) = (views[a].view.project(&p).unwrap(), views[b].view.project(&p).unwrap());
                    assert!(f.residual(&x1, &x2).abs() < 1e-9);
                    let line = epipolar_line(&f, &x1).unwrap();
                    assert!(line_meets_rect(&line, &g.cell_rect(*c2)));
                }
            }
        }
    }
}

#[test]
fn split_is_a_disjoint_partition() {
    let spec = BenchmarkSpec { n_instances: 200, match_points: 0, ..Default::default() };
    let b = generate_benchmark(7, &spec).unwrap();
    assert_eq!(b.images.len(), 1000);
    let mut train = std::collections::BTreeSet::new();
    let mut test = std::collections::BTreeSet::new();
    for img in &b.images {
        match img.split {
            epiguide::dataio::Split::Train => train.insert(img.instance_id),
            epiguide::dataio::Split::Test => test.insert(img.instance_id),
        };
    }
    assert_eq!((train.len(), test.len()), (100, 100));
    assert!(train.is_disjoint(&test));
}

#[test]
fn overlap_scores() {
    let (mut near, mut far) = (0.0, 0.0);
    for seed in 0..50u64 {
        let spec = BenchmarkSpec { n_instances: 2, match_points: 0, ..Default::default() };
        let b = generate_benchmark(seed, &spec).unwrap();
        for img in &b.images {
            assert_eq!(overlap_score(&img.view, &img.view), 1.0);
            for (other, &o) in &img.overlaps {
                assert!((0.0..=1.0).contains(&o));
                let back = b.images.iter().find(|i| &i.image_id == other).unwrap().overlaps[&img.image_id];
                assert!((o - back).abs() <= 1e-12);
            }
        }
        for inst in b.images.chunks(5) {
            for v in 0..5 {
                near += overlap_score(&inst[v].view, &inst[(v + 1) % 5].view);
                far += overlap_score(&inst[v].view, &inst[(v + 2) % 5].view);
            }
        }
    }
    assert!(near > far, "72° mean {near} vs 144° mean {far}");
}

#[test]
fn benchmark_is_deterministic() {
    let spec = BenchmarkSpec { n_instances: 4, ..Default::default() };
    assert_eq!(generate_benchmark(11, &spec).unwrap(), generate_benchmark(11, &spec).unwrap());
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use epiguide::dataio::{load_manifest, write_manifest, write_tensor, ManifestRecord, PoseRecord, Split, Tensor};
use epiguide::geometry::CameraView;
use epiguide::linalg::Matrix;
use epiguide::model::{ModelConfig, RerankerParams};
use epiguide::pipeline::{
    evaluate, load_checkpoint, pair_attention, pair_geometry, save_checkpoint, Dataset, EvalOptions, PseudoGeometry,
};
use epiguide_cli::report_lines;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_epiguide"));
    c.env_remove("EPIGUIDE_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, seed: u64, instances: usize) -> PathBuf {
    ok(&["--seed", &seed.to_string(), "--out-dir", s(dir), "gen", "--instances", &instances.to_string(), "--views", "5"]);
    dir.join("manifest.jsonl")
}

/// Relative path → bytes for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn block<'a>(lines: &'a [Value], name: &str) -> &'a Value {
    lines.iter().find(|v| v["block"] == name).unwrap()
}

const QUICK: [&str; 6] = ["--epochs-phase1", "1", "--epochs-phase2", "1", "--pairs-per-epoch", "24"];

#[test]
fn gen_is_deterministic_and_valid() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let m = gen(&a, 1, 4);
    gen(&b, 1, 4);
    assert_eq!(tree(&a), tree(&b));
    let idx = load_manifest(&m).unwrap();
    assert_eq!(idx.len(), 20);
    let instances = |sp: Split| {
        idx.records.iter().filter(|r| r.split == sp).map(|r| r.instance_id).collect::<std::collections::BTreeSet<_>>()
    };
    let (train, test) = (instances(Split::Train), instances(Split::Test));
    assert_eq!((train.len(), test.len()), (2, 2));
    assert!(train.is_disjoint(&test));
    let c = t.path().join("c");
    gen(&c, 2, 4);
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn seed_and_manifest_errors_exit_with_usage_code() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--out-dir", s(t.path()), "gen"]).status.code(), Some(2));
    assert_eq!(run(&["--seed", "1", "gen", "--bogus"]).status.code(), Some(2));
    let missing = t.path().join("nowhere").join("manifest.jsonl");
    for cmd in [
        vec!["--seed", "1", "--out-dir", s(t.path()), "train", "--manifest", s(&missing)],
        vec!["--out-dir", s(t.path()), "eval", "--manifest", s(&missing)],
    ] {
        let o = run(&cmd);
        assert_eq!(o.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&o.stderr).contains(s(&missing)));
    }
}

#[test]
fn lambda_zero_matches_no_supervision() {
    let t = tempfile::tempdir().unwrap();
    let m = gen(&t.path().join("data"), 3, 6);
    let (none, epi) = (t.path().join("none"), t.path().join("epi"));
    let mut a = vec!["--seed", "5", "--out-dir", s(&none), "train", "--manifest", s(&m), "--loss", "none"];
    a.extend(QUICK);
    ok(&a);
    let mut b = vec!["--seed", "5", "--out-dir", s(&epi), "train", "--manifest", s(&m), "--loss", "epi", "--lambda", "0"];
    b.extend(QUICK);
    ok(&b);
    // The stored configs differ in loss and lambda, so compare the weights.
    let (pn, _) = load_checkpoint(&none.join("checkpoint.epga")).unwrap();
    let (pe, _) = load_checkpoint(&epi.join("checkpoint.epga")).unwrap();
    assert_eq!(pn.as_slice(), pe.as_slice());
    let again = t.path().join("none2");
    a[3] = s(&again);
    ok(&a);
    assert_eq!(fs::read(none.join("checkpoint.epga")).unwrap(), fs::read(again.join("checkpoint.epga")).unwrap());
    assert_eq!(fs::read(none.join("train_log.jsonl")).unwrap(), fs::read(again.join("train_log.jsonl")).unwrap());
}

#[test]
fn default_training_lowers_match_loss() {
    let t = tempfile::tempdir().unwrap();
    let m = gen(&t.path().join("data"), 4, 20);
    let out = t.path().join("run");
    ok(&["--seed", "0", "--out-dir", s(&out), "train", "--manifest", s(&m), "--loss", "epi"]);
    let log = jsonl(&out.join("train_log.jsonl"));
    assert_eq!(log.len(), 8);
    let bce: Vec<f64> = log.iter().map(|l| l["match_bce"].as_f64().unwrap()).collect();
    assert!(bce[7] < bce[0], "match BCE {bce:?}");
    assert!(log[4]["attn_loss"].as_f64().unwrap() > 0.0);
}

#[test]
fn eval_report_matches_library_and_constant_model() {
    let t = tempfile::tempdir().unwrap();
    let m = gen(&t.path().join("data"), 6, 8);
    let global = t.path().join("global");
    ok(&["--out-dir", s(&global), "eval", "--manifest", s(&m)]);
    let g = jsonl(&global.join("eval_report.jsonl"));
    for key in ["R@1", "R@10", "R@50", "mAP"] {
        assert!(block(&g, "final")[key].is_number(), "missing {key}");
    }
    assert!(fs::read_to_string(global.join("pr_final.csv")).unwrap().starts_with("rank,recall,precision\n"));

    let config = ModelConfig { m: 32, ..ModelConfig::desk_scale() };
    let ckpt = t.path().join("constant.epga");
    save_checkpoint(&ckpt, &RerankerParams::zeros(&config), &config).unwrap();
    let constant = t.path().join("constant");
    ok(&["--out-dir", s(&constant), "eval", "--manifest", s(&m), "--checkpoint", s(&ckpt)]);
    let c = jsonl(&constant.join("eval_report.jsonl"));
    assert_eq!(block(&c, "final"), block(&g, "final"));
    assert_eq!(block(&c, "global"), block(&g, "global"));

    let trained = t.path().join("trained");
    let mut a = vec!["--seed", "2", "--out-dir", s(&trained), "train", "--manifest", s(&m)];
    a.extend(QUICK);
    ok(&a);
    let eval_dir = t.path().join("eval");
    let ck = trained.join("checkpoint.epga");
    ok(&["--out-dir", s(&eval_dir), "eval", "--manifest", s(&m), "--checkpoint", s(&ck)]);
    let ds = Dataset::load(&m).unwrap();
    let (p, cfg) = load_checkpoint(&ck).unwrap();
    let report = evaluate(&ds, Some((&p, &cfg)), &EvalOptions::default()).unwrap();
    assert_eq!(fs::read_to_string(eval_dir.join("eval_report.jsonl")).unwrap(), report_lines(&report));
}

#[test]
fn out_dir_env_override() {
    let t = tempfile::tempdir().unwrap();
    let target = t.path().join("from_env");
    let o = bin().env("EPIGUIDE_OUT", &target).args(["--seed", "1", "--out-dir", s(&t.path().join("flag")), "gen", "--instances", "2"]).output().unwrap();
    assert!(o.status.success());
    assert!(target.join("manifest.jsonl").is_file());
    assert!(!t.path().join("flag").exists());
}

/// Two posed views related by a pure horizontal baseline, with random features.
fn rectified_manifest(dir: &Path) -> PathBuf {
    let k = [[200.0, 0.0, 112.0], [0.0, 200.0, 112.0], [0.0, 0.0, 1.0]];
    let r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut recs = Vec::new();
    for (v, tx) in [0.0, -1.0].into_iter().enumerate() {
        let view = CameraView::new(r, [tx, 0.0, 0.0], k, 224, 224).unwrap();
        let feats = Matrix::<f32>::from_fn(49, 32, |i, j| ((i * 31 + j * 7 + v * 13) % 17) as f32 / 17.0);
        let path = format!("f{v}.epgt");
        write_tensor(&dir.join(&path), &Tensor::from_matrix(&feats)).unwrap();
        recs.push(ManifestRecord {
            image_id: format!("v{v}"),
            instance_id: 0,
            category_id: 0,
            split: Split::Test,
            feature_path: path,
            pose: Some(PoseRecord::from_view(&view)),
            overlaps: None,
            correspondences_path: None,
        });
    }
    let m = dir.join("manifest.jsonl");
    write_manifest(&m, &recs).unwrap();
    m
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let text = fs::read_to_string(path).unwrap();
    let mut it = text.split_whitespace();
    assert_eq!(it.next(), Some("P2"));
    let w: usize = it.next().unwrap().parse().unwrap();
    let h: usize = it.next().unwrap().parse().unwrap();
    assert_eq!(it.next(), Some("255"));
    let px: Vec<u8> = it.map(|v| v.parse().unwrap()).collect();
    assert_eq!(px.len(), w * h);
    (w, h, px)
}

/// Independent layout: patch `(i / s, i % s)` of the canvas holds row `i` of
/// the map, reshaped to `s × s`; separators are mid-gray.
fn reference_render(map: &Matrix<f64>, s: usize) -> Vec<u8> {
    let side = s * s + s - 1;
    let vals = map.as_slice();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut px = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            if y % (s + 1) == s || x % (s + 1) == s {
                px.push(128);
                continue;
            }
            let i = (y / (s + 1)) * s + x / (s + 1);
            let j = (y % (s + 1)) * s + x % (s + 1);
            let v = if hi > lo { (map.get(i, j) - lo) / (hi - lo) } else { map.get(i, j) - lo };
            px.push((v * 255.0).round() as u8);
        }
    }
    px
}

#[test]
fn viz_layout_and_golden_attention() {
    let t = tempfile::tempdir().unwrap();
    let m = rectified_manifest(t.path());
    let out = t.path().join("viz_out");
    ok(&["--out-dir", s(&out), "viz", "--manifest", s(&m), "--pair", "v0", "v1"]);
    for name in ["guide12", "guide21"] {
        let (w, h, px) = read_pgm(&out.join("viz").join(format!("v0__v1_{name}.pgm")));
        assert_eq!((w, h), (55, 55));
        for pr in 0..7 {
            for pc in 0..7 {
                for r in 0..7 {
                    for c in 0..7 {
                        let v = px[(pr * 8 + r) * 55 + pc * 8 + c];
                        assert_eq!(v, if r == pr { 255 } else { 0 }, "{name} patch ({pr},{pc}) cell ({r},{c})");
                    }
                }
            }
        }
    }

    let config = ModelConfig { seed: 9, ..ModelConfig::desk_scale() };
    let params = RerankerParams::<f32>::init(&config).unwrap();
    let ckpt = t.path().join("golden.epga");
    save_checkpoint(&ckpt, &params, &config).unwrap();
    ok(&["--out-dir", s(&out), "viz", "--manifest", s(&m), "--pair", "v0", "v1", "--checkpoint", s(&ckpt), "--head", "1"]);
    let ds = Dataset::load(&m).unwrap();
    let geometry = pair_geometry(&ds, 0, 1, &PseudoGeometry::default(), config.seed);
    let cross = pair_attention(&ds, &params, &config, 0, 1, &geometry).unwrap();
    for (name, map) in [("attn12", &cross.a12[1]), ("attn21", &cross.a21[1])] {
        let (_, _, px) = read_pgm(&out.join("viz").join(format!("v0__v1_{name}.pgm")));
        assert_eq!(px, reference_render(&map.cast::<f64>(), 7), "{name}");
    }
    let bad = run(&["--out-dir", s(&out), "viz", "--manifest", s(&m), "--pair", "v0", "v1", "--checkpoint", s(&ckpt), "--head", "9"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn rasterize_writes_guides() {
    let t = tempfile::tempdir().unwrap();
    let m = rectified_manifest(t.path());
    ok(&["--out-dir", s(t.path()), "rasterize", "--manifest", s(&m)]);
    let a = epiguide::dataio::read_archive(&t.path().join("guides.epga")).unwrap();
    assert_eq!(a.entries.len(), 2);
    let g = a.get("v0/v1/g12").unwrap();
    assert_eq!(g.dims(), &[49, 49]);
}

/// Exact projections of a point lattice in two calibrated views.
fn clean_correspondences() -> Vec<[f64; 4]> {
    let k = [[300.0, 0.0, 112.0], [0.0, 300.0, 112.0], [0.0, 0.0, 1.0]];
    let v1 = CameraView::look_at([3.0, 0.5, 0.4], [0.0; 3], [0.0, 0.0, 1.0], k, 224, 224).unwrap();
    let v2 = CameraView::look_at([0.8, 3.1, -0.3], [0.0; 3], [0.0, 0.0, 1.0], k, 224, 224).unwrap();
    let mut out = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            for l in 0..4 {
                let p = [i as f64 * 0.37 - 0.7, j as f64 * 0.29 - 0.6, l as f64 * 0.41 - 0.6 + 0.05 * i as f64];
                let (a, b) = (v1.project(&p).unwrap(), v2.project(&p).unwrap());
                out.push([a[0], a[1], b[0], b[1]]);
            }
        }
    }
    out
}

#[test]
fn estimate_f_gate_and_accuracy() {
    let t = tempfile::tempdir().unwrap();
    let pairs = clean_correspondences();
    let clean = t.path().join("clean.json");
    fs::write(&clean, serde_json::to_string(&pairs).unwrap()).unwrap();
    let o = run(&["--seed", "3", "--out-dir", s(t.path()), "estimate-f", "--correspondences", s(&clean)]);
    assert_eq!(o.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&fs::read(t.path().join("estimate_f.json")).unwrap()).unwrap();
    assert_eq!(report["reliable"], true);
    assert_eq!(report["inliers"], 100);
    assert!(report["mean_sampson_px2"].as_f64().unwrap() < 1e-12);
    let first = fs::read(t.path().join("estimate_f.json")).unwrap();
    run(&["--seed", "3", "--out-dir", s(t.path()), "estimate-f", "--correspondences", s(&clean)]);
    assert_eq!(fs::read(t.path().join("estimate_f.json")).unwrap(), first);

    let few = t.path().join("few.json");
    fs::write(&few, serde_json::to_string(&pairs[..15]).unwrap()).unwrap();
    let o = run(&["--seed", "3", "--out-dir", s(t.path()), "estimate-f", "--correspondences", s(&few)]);
    assert_eq!(o.status.code(), Some(3));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["reliable"], false);
    assert_eq!(report["matches"], 15);

    // Spread over the lattice, so the fit itself succeeds.
    let spread: Vec<[f64; 4]> = pairs.iter().step_by(6).take(15).copied().collect();
    fs::write(&few, serde_json::to_string(&spread).unwrap()).unwrap();
    let o = run(&["--seed", "3", "--out-dir", s(t.path()), "estimate-f", "--correspondences", s(&few)]);
    assert_eq!(o.status.code(), Some(3));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((report["reliable"].as_bool(), report["inliers"].as_u64()), (Some(false), Some(15)));

    let seven = t.path().join("seven.json");
    fs::write(&seven, serde_json::to_string(&pairs[..7]).unwrap()).unwrap();
    assert_eq!(run(&["--out-dir", s(t.path()), "estimate-f", "--correspondences", s(&seven)]).status.code(), Some(3));
    let junk = t.path().join("junk.json");
    fs::write(&junk, "not json").unwrap();
    assert_eq!(run(&["--out-dir", s(t.path()), "estimate-f", "--correspondences", s(&junk)]).status.code(), Some(2));
}

use std::collections::HashMap;

mod support;

use epiguide::evalkit::{
    average_precision, global_descriptor, mean_average_precision, overlap_bin, overlap_breakdown, pr_curve,
    rank_by_global, recall_at_k, rerank_topk, EvalError, IndexEntry, RankedItem, RankedList, RetrievalIndex,
};
use epiguide::linalg::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{oracle_ap, oracle_recall, random_instance};

/// Area under the stepwise precision-recall curve: Σ P(k) ΔR(k).
fn pr_integral(r: &RankedList, gt: &epiguide::evalkit::GroundTruth) -> f64 {
    let total = gt.positives(&r.query).len() as f64;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for p in pr_curve(r, gt) {
        area += p.precision * (p.recall - prev_recall);
        prev_recall = p.recall;
    }
    assert!(prev_recall <= 1.0 && total > 0.0);
    area
}

#[test]
fn recall_and_map_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        for k in [1usize, 2, 5, 10, 50] {
            assert_eq!(recall_at_k(&inst.rankings, &inst.gt, k).unwrap(), oracle_recall(&inst, k));
        }
        let mut sum = 0.0;
        for r in &inst.rankings {
            let ap = oracle_ap(r, &inst.gt);
            assert_eq!(average_precision(r, &inst.gt).unwrap(), ap);
            assert!((pr_integral(r, &inst.gt) - ap).abs() < 1e-12);
            sum += ap;
        }
        assert_eq!(mean_average_precision(&inst.rankings, &inst.gt).unwrap(), sum / inst.rankings.len() as f64);
    }
}

fn list(query: &str, ids: &[&str]) -> RankedList {
    RankedList { query: query.into(), items: ids.iter().map(|id| RankedItem { id: id.to_string(), score: 0.0 }).collect() }
}

fn gt(pairs: &[(&str, &[&str])]) -> epiguide::evalkit::GroundTruth {
    epiguide::evalkit::GroundTruth::from_sets(
        pairs.iter().map(|(q, p)| (q.to_string(), p.iter().map(|s| s.to_string()).collect())).collect(),
    )
}

#[test]
fn average_precision_closed_form() {
    let r = list("q", &["a", "b", "c", "d", "e", "f"]);
    let g = gt(&[("q", &["b", "e"])]);
    // (1/2 + 2/5) / 2
    assert!((average_precision(&r, &g).unwrap() - 0.45).abs() < 1e-15);
    assert_eq!(recall_at_k(&[r.clone()], &g, 1).unwrap(), 0.0);
    assert_eq!(recall_at_k(&[r.clone()], &g, 2).unwrap(), 1.0);
    assert!(matches!(average_precision(&r, &gt(&[])), Err(EvalError::NoPositives(_))));
    assert!(matches!(recall_at_k(&[], &g, 1), Err(EvalError::EmptyQuerySet)));
    assert!(recall_at_k(&[r], &g, 0).is_err());
}

#[test]
fn overlap_bins_are_half_open() {
    assert_eq!(overlap_bin(0.25, 10, 0.2, 0.8), Some(0));
    assert_eq!(overlap_bin(0.2, 10, 0.2, 0.8), Some(0));
    assert_eq!(overlap_bin(0.8, 10, 0.2, 0.8), Some(9));
    assert_eq!(overlap_bin(0.5, 2, 0.0, 1.0), Some(1));
    assert_eq!(overlap_bin(0.19, 10, 0.2, 0.8), None);
    assert_eq!(overlap_bin(f64::NAN, 10, 0.2, 0.8), None);
}

#[test]
fn overlap_breakdown_matches_filtered_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let inst = random_instance(&mut rng);
        let mut overlaps = HashMap::new();
        for r in &inst.rankings {
            if rng.gen_bool(0.8) {
                overlaps.insert(r.query.clone(), rng.gen_range(0.0..1.2));
            }
        }
        let bins = rng.gen_range(1..6);
        let b = overlap_breakdown(&inst.rankings, &inst.gt, &overlaps, bins, (0.0, 1.0)).unwrap();
        let mut seen = 0;
        for (k, bin) in b.bins.iter().enumerate() {
            let members: Vec<RankedList> = inst
                .rankings
                .iter()
                .filter(|r| overlaps.get(&r.query).is_some_and(|&v| overlap_bin(v, bins, 0.0, 1.0) == Some(k)))
                .cloned()
                .collect();
            assert_eq!(bin.count, members.len());
            seen += members.len();
            match bin.recall_at_1 {
                Some(v) => assert_eq!(v, recall_at_k(&members, &inst.gt, 1).unwrap()),
                None => assert!(members.is_empty()),
            }
        }
        assert_eq!(seen + b.excluded, inst.rankings.len());
    }
}

fn index(rng: &mut impl Rng, n: usize, cells: usize, dim: usize) -> RetrievalIndex<f64> {
    let entries = (0..n)
        .map(|k| {
            let f = Matrix::from_fn(cells, dim, |_, _| rng.gen_range(-1.0..1.0));
            IndexEntry::from_features(format!("img{k:03}"), (k / 3) as u64, f)
        })
        .collect();
    RetrievalIndex::new(entries).unwrap()
}

#[test]
fn descriptor_is_feature_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Matrix::from_fn(49, 8, |_, _| rng.gen_range(-1.0..1.0));
    let d = global_descriptor(&f);
    for c in 0..8 {
        let mean = (0..49).map(|r| f.get(r, c)).sum::<f64>() / 49.0;
        assert!((d[c] - mean).abs() < 1e-15);
    }
}

#[test]
fn global_ranking_matches_exhaustive_sort_and_ignores_insertion_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let idx = index(&mut rng, 20, 9, 6);
    let mut shuffled = idx.entries().to_vec();
    shuffled.shuffle(&mut rng);
    let idx2 = RetrievalIndex::new(shuffled).unwrap();
    for q in idx.entries() {
        let r = rank_by_global(&idx, &q.image_id).unwrap();
        assert_eq!(r, rank_by_global(&idx2, &q.image_id).unwrap());
        let mut oracle: Vec<(f64, String)> = idx
            .entries()
            .iter()
            .filter(|e| e.image_id != q.image_id)
            .map(|e| {
                let dot: f64 = q.descriptor.iter().zip(&e.descriptor).map(|(a, b)| a * b).sum();
                let na = q.descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = e.descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
                (dot / (na * nb), e.image_id.clone())
            })
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        let ids: Vec<&str> = r.items.iter().map(|i| i.id.as_str()).collect();
        let want: Vec<&str> = oracle.iter().map(|o| o.1.as_str()).collect();
        assert_eq!(ids, want);
    }
    assert!(rank_by_global(&idx, "missing").is_err());
}

#[test]
fn rerank_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let idx = index(&mut rng, 15, 4, 3);
    let ranked = rank_by_global(&idx, "img000").unwrap();
    let constant = |_: &IndexEntry<f64>, _: &IndexEntry<f64>| Ok::<f64, EvalError>(0.5);
    let ids = |r: &RankedList| r.items.iter().map(|i| i.id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&rerank_topk(&ranked, 10, &constant, &idx).unwrap()), ids(&ranked));
    let sum = |_: &IndexEntry<f64>, c: &IndexEntry<f64>| Ok::<f64, EvalError>(c.descriptor.iter().sum());
    assert_eq!(ids(&rerank_topk(&ranked, 1, &sum, &idx).unwrap()), ids(&ranked));
    let out = rerank_topk(&ranked, 5, &sum, &idx).unwrap();
    let mut head: Vec<(f64, String)> = ranked.items[..5]
        .iter()
        .map(|i| (idx.get(&i.id).unwrap().descriptor.iter().sum(), i.id.clone()))
        .collect();
    head.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut want: Vec<String> = head.into_iter().map(|h| h.1).collect();
    want.extend(ranked.items[5..].iter().map(|i| i.id.clone()));
    assert_eq!(ids(&out), want);
    assert!(rerank_topk(&ranked, 0, &sum, &idx).is_err());
    assert_eq!(ids(&rerank_topk(&ranked, 100, &constant, &idx).unwrap()), ids(&ranked));
}

#[test]
fn query_overlap_is_order_independent() {
    let values: Vec<f64> = (1..12).map(|k| 0.1 * k as f64 + 1.0 / (k as f64 * 7.0)).collect();
    let expected = values.iter().sum::<f64>() / values.len() as f64;
    for _ in 0..20 {
        let entries = (0..12)
            .map(|k| {
                let mut e = IndexEntry::from_features(format!("v{k:02}"), 0, Matrix::from_fn(2, 2, |_, _| 1.0));
                if k == 0 {
                    e.overlaps = Some(values.iter().enumerate().map(|(j, &v)| (format!("v{:02}", j + 1), v)).collect());
                }
                e
            })
            .collect();
        let idx = RetrievalIndex::new(entries).unwrap();
        let got = idx.query_overlap("v00", &idx.ground_truth()).unwrap();
        assert_eq!(got.to_bits(), expected.to_bits());
    }
}

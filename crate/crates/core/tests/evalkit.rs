use magnifier::data::{DataConfig, Dataset};
use magnifier::evalkit::*;
use magnifier::model::Model;
use magnifier::numcore::RngStream;
use magnifier::TrainConfig;
use proptest::prelude::*;

fn matrix(rows: &[Vec<f32>], labels: &[usize], cams: &[usize]) -> EmbeddingMatrix {
    EmbeddingMatrix::new(rows[0].len(), rows.concat(), labels.to_vec(), cams.to_vec()).unwrap()
}

/// Full sort and explicit prefix counting for every query.
fn brute_force(q: &EmbeddingMatrix, g: &EmbeddingMatrix) -> (Vec<f64>, f64, usize) {
    let unit = |r: &[f32]| -> Vec<f64> {
        let r: Vec<f64> = r.iter().map(|&v| v as f64).collect();
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter().map(|v| if n > 0.0 { v / n } else { *v }).collect()
    };
    let mut firsts = Vec::new();
    let mut aps = Vec::new();
    let mut skipped = 0;
    for qi in 0..q.rows() {
        let qv = unit(q.row(qi));
        let mut items: Vec<(f64, usize)> = Vec::new();
        for gi in 0..g.rows() {
            if g.labels[gi] == q.labels[qi] && g.cameras[gi] == q.cameras[qi] {
                continue;
            }
            let gv = unit(g.row(gi));
            items.push((qv.iter().zip(&gv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), gi));
        }
        items.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rel: Vec<bool> = items.iter().map(|&(_, gi)| g.labels[gi] == q.labels[qi]).collect();
        let total = rel.iter().filter(|&&r| r).count();
        if total == 0 {
            skipped += 1;
            continue;
        }
        firsts.push(rel.iter().position(|&r| r).unwrap());
        let mut ap = 0.0;
        for k in 0..rel.len() {
            if rel[k] {
                let hits = rel[..=k].iter().filter(|&&r| r).count();
                ap += hits as f64 / (k + 1) as f64;
            }
        }
        aps.push(ap / total as f64);
    }
    let n = firsts.len() as f64;
    let cmc = (0..g.rows().max(1))
        .map(|r| firsts.iter().filter(|&&f| f <= r).count() as f64 / n)
        .collect();
    (cmc, aps.iter().sum::<f64>() / n, skipped)
}

fn random_case(rng: &mut RngStream, nq: usize, ng: usize, ids: usize, d: usize) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let mk = |rng: &mut RngStream, n: usize| {
        let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| rng.normal() as f32).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(ids)).collect();
        let cams: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
        matrix(&rows, &labels, &cams)
    };
    (mk(rng, nq), mk(rng, ng))
}

#[test]
fn average_precision_examples() {
    assert!((average_precision(&[true, false, true]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert!((average_precision(&[true, false, true]) - 0.8333).abs() < 1e-4);
    assert_eq!(average_precision(&[true, true, false]), 1.0);
    assert_eq!(average_precision(&[false, false]), 0.0);
}

#[test]
fn retrieval_examples() {
    // perfect retrieval
    let q = matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], &[0, 0]);
    let g = matrix(&[vec![2.0, 0.1], vec![0.1, 3.0], vec![-1.0, -1.0]], &[0, 1, 2], &[1, 1, 1]);
    let r = retrieve(&q, &g).unwrap();
    assert_eq!(r.rank1(), 1.0);
    assert_eq!(r.map, 1.0);

    // correct match at rank 3
    let q = matrix(&[vec![1.0, 0.0]], &[0], &[0]);
    let g = matrix(&[vec![1.0, 0.1], vec![1.0, 0.3], vec![0.0, 1.0]], &[1, 2, 0], &[1, 1, 1]);
    let r = retrieve(&q, &g).unwrap();
    assert_eq!((r.cmc_at(1), r.cmc_at(2), r.cmc_at(3)), (0.0, 0.0, 1.0));
    assert!((r.map - 1.0 / 3.0).abs() < 1e-15);

    // same identity and camera is junk, not a hit
    let g = matrix(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]], &[0, 1, 0], &[0, 1, 1]);
    let r = retrieve(&q, &g).unwrap();
    assert_eq!(r.cmc_at(1), 0.0);
    assert_eq!(r.cmc_at(2), 1.0);
}

#[test]
fn unmatched_queries_are_counted() {
    let q = matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 5], &[0, 0]);
    let g = matrix(&[vec![1.0, 0.0], vec![0.5, 0.5]], &[0, 1], &[1, 1]);
    let r = retrieve(&q, &g).unwrap();
    assert_eq!(r.skipped_queries, 1);
    assert_eq!(r.average_precisions.len(), 1);
    let q = matrix(&[vec![1.0, 0.0]], &[7], &[0]);
    assert!(retrieve(&q, &g).is_err());
    let q3 = matrix(&[vec![1.0, 0.0, 0.0]], &[0], &[0]);
    assert!(retrieve(&q3, &g).is_err());
    assert!(EmbeddingMatrix::new(2, vec![0.0; 3], vec![0], vec![0]).is_err());
}

#[test]
fn retrieval_matches_brute_force() {
    let mut rng = RngStream::new(1);
    for _ in 0..200 {
        let (nq, ng, ids, d) = (1 + rng.below(6), 2 + rng.below(19), 1 + rng.below(4), 1 + rng.below(5));
        let (q, g) = random_case(&mut rng, nq, ng, ids, d);
        let Ok(r) = retrieve(&q, &g) else {
            assert_eq!(brute_force(&q, &g).2, q.rows());
            continue;
        };
        let (cmc, map, skipped) = brute_force(&q, &g);
        assert_eq!(r.skipped_queries, skipped);
        assert_eq!(r.cmc.len(), cmc.len());
        for (a, b) in r.cmc.iter().zip(&cmc) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r.map - map).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_monotone(seed in 0u64..10_000) {
        let mut rng = RngStream::new(seed);
        let (q, g) = random_case(&mut rng, 4, 12, 3, 3);
        if let Ok(r) = retrieve(&q, &g) {
            prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.cmc.iter().chain([&r.map]).all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn signed_permutations_preserve_results(seed in 0u64..10_000) {
        let mut rng = RngStream::new(seed);
        let d = 4;
        let (q, g) = random_case(&mut rng, 4, 12, 3, d);
        let mut perm: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut perm);
        let signs: Vec<f32> = (0..d).map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 }).collect();
        let apply = |m: &EmbeddingMatrix| {
            let rows: Vec<Vec<f32>> = (0..m.rows()).map(|i| (0..d).map(|j| signs[j] * m.row(i)[perm[j]]).collect()).collect();
            matrix(&rows, &m.labels, &m.cameras)
        };
        match (retrieve(&q, &g), retrieve(&apply(&q), &apply(&g))) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.cmc, b.cmc);
                prop_assert!((a.map - b.map).abs() < 1e-12);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false),
        }
    }

    #[test]
    fn appending_a_far_impostor_keeps_cmc(seed in 0u64..10_000) {
        let mut rng = RngStream::new(seed);
        let (q, g) = random_case(&mut rng, 3, 10, 3, 3);
        // strictly positive rows, so the all-negative impostor ranks last
        let positive = |m: &EmbeddingMatrix| {
            let rows: Vec<Vec<f32>> = (0..m.rows()).map(|i| m.row(i).iter().map(|v| v.abs() + 0.1).collect()).collect();
            matrix(&rows, &m.labels, &m.cameras)
        };
        let (q, g) = (positive(&q), positive(&g));
        let Ok(before) = retrieve(&q, &g) else { return Ok(()); };
        let mut rows: Vec<Vec<f32>> = (0..g.rows()).map(|i| g.row(i).to_vec()).collect();
        rows.push(vec![-1.0; 3]);
        let mut labels = g.labels.clone();
        labels.push(99);
        let mut cams = g.cameras.clone();
        cams.push(0);
        let after = retrieve(&q, &matrix(&rows, &labels, &cams)).unwrap();
        for r in 0..g.rows() {
            prop_assert_eq!(before.cmc[r], after.cmc[r]);
        }
    }
}

#[test]
fn model_embeddings() {
    let ds = Dataset::generate(&DataConfig {
        num_ids: 8,
        imgs_per_id: 4,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig::default();
    let mut model = Model::new(&cfg, ds.num_train_classes(), 64, 32).unwrap();
    assert_eq!(model.embedding_dim(), 192);
    let idx = &ds.manifest.gallery;
    let a = embed_samples(&mut model, &ds, idx).unwrap();
    let b = embed_samples(&mut model, &ds, idx).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dim, 192);
    assert_eq!(a.rows(), idx.len());
    assert!(a.data.iter().all(|v| v.is_finite()));

    let dup = [idx[0], idx[1], idx[0]];
    let d = embed_samples(&mut model, &ds, &dup).unwrap();
    assert_eq!(d.row(0), d.row(2));
    assert_eq!(d.row(0), a.row(0));

    let occ = query_embeddings(&mut model, &ds, EvalSplit::Occluded).unwrap();
    assert_eq!(occ.rows(), ds.manifest.occluded_queries.len());
    let r = evaluate(&mut model, &ds, EvalSplit::Test).unwrap();
    assert!((0.0..=1.0).contains(&r.rank1()));

    let mut global_only = cfg.clone();
    global_only.components.sab = false;
    global_only.components.sfb = false;
    let m: Model = Model::new(&global_only, ds.num_train_classes(), 64, 32).unwrap();
    assert_eq!(m.embedding_dim(), 64);
    assert_eq!("occluded".parse::<EvalSplit>(), Ok(EvalSplit::Occluded));
    assert!("val".parse::<EvalSplit>().is_err());
}

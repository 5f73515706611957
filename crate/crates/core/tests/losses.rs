use magnifier::losses::*;
use magnifier::numcore::{Graph, Mode, ParameterSet, RngStream, Tensor, Var};
use magnifier::Error;
use proptest::prelude::*;

fn rows(g: &mut Graph<f64>, vs: &[Vec<f64>]) -> Vec<Var> {
    vs.iter()
        .map(|v| g.constant(Tensor::new(&[1, v.len()], v.clone()).unwrap()))
        .collect()
}

fn matrix(g: &mut Graph<f64>, vs: &[Vec<f64>]) -> Var {
    let d = vs[0].len();
    g.constant(Tensor::new(&[vs.len(), d], vs.concat()).unwrap())
}

fn sd_value(vs: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let p = rows(&mut g, vs);
    let l = sd_loss(&mut g, &p, 1e-8).unwrap();
    g.value(l).item()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean pairwise cosine over every unordered pair, batch of one.
fn sd_oracle(vs: &[Vec<f64>], eps: f64) -> f64 {
    let mut acc = 0.0;
    let mut n = 0;
    for i in 0..vs.len() {
        for j in 0..i {
            let den = (dot(&vs[i], &vs[i]).sqrt() * dot(&vs[j], &vs[j]).sqrt()).max(eps);
            acc += dot(&vs[i], &vs[j]) / den;
            n += 1;
        }
    }
    acc / n as f64
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().max(1e-12).sqrt()
}

/// Exhaustive triplet enumeration: per anchor, the worst hinge over all
/// (positive, negative) pairs; mean over anchors that have both.
fn triplet_oracle(e: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let mut total = 0.0;
    let mut anchors = 0;
    for a in 0..e.len() {
        let mut worst: Option<f64> = None;
        for p in 0..e.len() {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..e.len() {
                if labels[n] == labels[a] {
                    continue;
                }
                let h = (dist(&e[a], &e[p]) - dist(&e[a], &e[n]) + margin).max(0.0);
                worst = Some(worst.map_or(h, |w: f64| w.max(h)));
            }
        }
        if let Some(w) = worst {
            total += w;
            anchors += 1;
        }
    }
    total / anchors as f64
}

fn triplet_value(e: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let mut g = Graph::new();
    let x = matrix(&mut g, e);
    let l = batch_hard_triplet(&mut g, x, labels, margin).unwrap();
    g.value(l).item()
}

fn ce_oracle(logits: &[f64], c: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (b, &t) in labels.iter().enumerate() {
        let row = &logits[b * c..][..c];
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        total += m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln() - row[t];
    }
    total / labels.len() as f64
}

#[test]
fn sd_examples() {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let v = sd_value(&[vec![1.0, 0.0], vec![s, s], vec![0.0, 1.0]]);
    assert!((v - 2f64.sqrt() / 3.0).abs() < 1e-12);
    assert!((v - 0.4714).abs() < 1e-4);
    assert!((sd_value(&vec![vec![0.3, -1.2, 2.0]; 5]) - 1.0).abs() < 1e-12);
    let eye: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 2.0 } else { 0.0 }).collect()).collect();
    assert_eq!(sd_value(&eye), 0.0);
    // a zero vector contributes zero to each of its pairs
    let v = sd_value(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]);
    assert!((v - 1.0 / 3.0).abs() < 1e-12);
    // two regions: exactly the one cosine
    let v = sd_value(&[vec![1.0, 0.0], vec![1.0, 1.0]]);
    assert!((v - s).abs() < 1e-12);
    let mut g = Graph::new();
    let one = rows(&mut g, &[vec![1.0]]);
    assert!(matches!(sd_loss(&mut g, &one, 1e-8), Err(Error::Config(_))));
}

#[test]
fn sd_matches_oracle_on_batches() {
    let mut rng = RngStream::new(1);
    for _ in 0..50 {
        let (n, k, d) = (1 + rng.below(4), 2 + rng.below(7), 1 + rng.below(6));
        let vs: Vec<Vec<Vec<f64>>> = (0..k).map(|_| (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()).collect();
        let mut g = Graph::new();
        let pooled: Vec<Var> = vs
            .iter()
            .map(|per_image| g.constant(Tensor::new(&[n, d], per_image.concat()).unwrap()))
            .collect();
        let l = sd_loss(&mut g, &pooled, 1e-8).unwrap();
        let want: f64 = (0..n)
            .map(|b| sd_oracle(&vs.iter().map(|r| r[b].clone()).collect::<Vec<_>>(), 1e-8))
            .sum::<f64>()
            / n as f64;
        assert!((g.value(l).item() - want).abs() < 1e-9);
    }
}

#[test]
fn triplet_examples() {
    let labels = [0, 0, 1, 1];
    assert!((triplet_value(&vec![vec![0.5, -0.5]; 4], &labels, 0.3) - 0.3).abs() < 1e-12);
    let far = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![5.0, 0.0], vec![5.0, 0.0]];
    assert_eq!(triplet_value(&far, &labels, 0.3), 0.0);
    // hand-set 4-point batch
    let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 3.0]];
    let v = triplet_value(&pts, &labels, 0.3);
    assert!((v - triplet_oracle(&pts, &labels, 0.3)).abs() < 1e-12);
    // every anchor has dp 1 and dn of at least 2
    assert_eq!(v, 0.0);
    let v = triplet_value(&pts, &labels, 1.5);
    assert!((v - (0.5 + (2.5 - 5f64.sqrt()) + 0.5 + 0.0) / 4.0).abs() < 1e-12);
}

#[test]
fn triplet_skips_lonely_anchors() {
    let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
    let v = triplet_value(&pts, &[0, 0, 1], 0.5);
    // anchors 0 and 1 only
    let want: f64 = ((1.0 - 3.0 + 0.5f64).max(0.0) + (1.0 - 2.0 + 0.5f64).max(0.0)) / 2.0;
    assert!((v - want).abs() < 1e-12);
    let mut g = Graph::new();
    let x = matrix(&mut g, &pts);
    assert!(batch_hard_triplet(&mut g, x, &[0, 1, 2], 0.3).is_err());
    assert!(batch_hard_triplet(&mut g, x, &[0, 1], 0.3).is_err());
}

#[test]
fn triplet_matches_brute_force() {
    let mut rng = RngStream::new(2);
    for _ in 0..60 {
        let (p, k, d) = (2 + rng.below(3), 2 + rng.below(3), 1 + rng.below(5));
        let labels: Vec<usize> = (0..p * k).map(|i| i / k).collect();
        let e: Vec<Vec<f64>> = labels.iter().map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let margin = rng.uniform_range(0.0, 1.0);
        assert!((triplet_value(&e, &labels, margin) - triplet_oracle(&e, &labels, margin)).abs() < 1e-9);
    }
}

#[test]
fn cross_entropy_matches_oracle() {
    let mut rng = RngStream::new(3);
    for _ in 0..50 {
        let (b, c) = (1 + rng.below(6), 2 + rng.below(6));
        let z: Vec<f64> = (0..b * c).map(|_| rng.uniform_range(-5.0, 5.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        let mut g = Graph::new();
        let zv = g.constant(Tensor::new(&[b, c], z.clone()).unwrap());
        let l = g.softmax_cross_entropy(zv, &labels).unwrap();
        assert!((g.value(l).item() - ce_oracle(&z, c, &labels)).abs() < 1e-9);
    }
    let mut g = Graph::new();
    let zv = g.constant(Tensor::new(&[1, 3], vec![10.0, 0.0, 0.0]).unwrap());
    let l = g.softmax_cross_entropy(zv, &[0]).unwrap();
    assert!((g.value(l).item() - (1.0 + 2.0 * (-10f64).exp()).ln()).abs() < 1e-15);
}

fn neck(dim: usize, classes: usize, seed: u64) -> ParameterSet<f64> {
    let mut ps = ParameterSet::new();
    register_bnneck(&mut ps, "h", dim, classes, &mut RngStream::new(seed)).unwrap();
    ps
}

#[test]
fn bnneck_cases() {
    let (b, d, c) = (6, 4, 5);
    let mut rng = RngStream::new(4);
    let x: Vec<f64> = (0..b * d).map(|_| rng.normal()).collect();
    let labels: Vec<usize> = (0..b).map(|i| i % c).collect();

    // fresh neck in eval mode is the identity
    let mut ps = neck(d, c, 5);
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(&[b, d], x.clone()).unwrap());
    let (l, feat) = bnneck_cls(&mut g, &mut ps, "h", xv, &labels, Mode::Eval).unwrap();
    let eye_scale = 1.0 / (1.0 + 1e-5f64).sqrt();
    for (f, v) in g.value(feat).data().iter().zip(&x) {
        assert!((f - v * eye_scale).abs() < 1e-12);
    }
    let w = ps.get("h.classifier.weight").unwrap().data().to_vec();
    let logits: Vec<f64> = (0..b)
        .flat_map(|r| (0..c).map(|k| (0..d).map(|j| w[k * d + j] * x[r * d + j] * eye_scale).sum::<f64>()).collect::<Vec<_>>())
        .collect();
    assert!((g.value(l).item() - ce_oracle(&logits, c, &labels)).abs() < 1e-12);

    // uniform classifier
    ps.set_values("h.classifier.weight", &Tensor::zeros(&[c, d])).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(&[b, d], x.clone()).unwrap());
    let (l, _) = bnneck_cls(&mut g, &mut ps, "h", xv, &labels, Mode::Train).unwrap();
    assert!((g.value(l).item() - (c as f64).ln()).abs() < 1e-12);

    // train mode: batch statistics, then the classifier, then cross-entropy
    for trial in 0..10 {
        let mut ps = neck(d, c, 10 + trial);
        let scale: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.5, 2.0)).collect();
        let shift: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        ps.set_values("h.neck.scale", &Tensor::new(&[d], scale.clone()).unwrap()).unwrap();
        ps.set_values("h.neck.shift", &Tensor::new(&[d], shift.clone()).unwrap()).unwrap();
        let w = Tensor::from_fn(&[c, d], |_| rng.normal());
        ps.set_values("h.classifier.weight", &w).unwrap();
        let x: Vec<f64> = (0..b * d).map(|_| rng.normal()).collect();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[b, d], x.clone()).unwrap());
        let (l, _) = bnneck_cls(&mut g, &mut ps, "h", xv, &labels, Mode::Train).unwrap();
        let mut normed = vec![0.0; b * d];
        for j in 0..d {
            let col: Vec<f64> = (0..b).map(|r| x[r * d + j]).collect();
            let m = col.iter().sum::<f64>() / b as f64;
            let v = col.iter().map(|a| (a - m).powi(2)).sum::<f64>() / b as f64;
            for r in 0..b {
                normed[r * d + j] = (col[r] - m) / (v + 1e-5).sqrt() * scale[j] + shift[j];
            }
        }
        let logits: Vec<f64> = (0..b)
            .flat_map(|r| (0..c).map(|k| dot(&w.data()[k * d..][..d], &normed[r * d..][..d])).collect::<Vec<_>>())
            .collect();
        assert!((g.value(l).item() - ce_oracle(&logits, c, &labels)).abs() < 1e-9);
    }
}

#[test]
fn weighted_total() {
    let w = LossWeights {
        gamma: 0.001,
        lambda_mask: 2.0,
        ..Default::default()
    };
    let r = combine(1.0, 0.5, 2.0, 0.25, &w);
    assert!((r.l_total - 2.002).abs() < 1e-12);

    let d = LossWeights::default();
    assert_eq!((d.gamma, d.lambda_mask), (2e-3, 2.0));
    let zero = LossWeights {
        gamma: 0.0,
        lambda_mask: 0.0,
        ..Default::default()
    };
    assert_eq!(combine(1.0, 0.5, 7.0, 9.0, &zero).l_total, 1.5);

    let mut g: Graph<f64> = Graph::new();
    let vals = [1.0f64, 0.5, 2.0, 0.25].map(|v| g.input(Tensor::scalar(v)));
    let terms = LossTerms {
        cls: vals[0],
        tri: vals[1],
        sd: Some(vals[2]),
        mask: Some(vals[3]),
    };
    let (total, report) = total_loss(&mut g, &terms, &w).unwrap();
    assert!((g.value(total).item() - 2.002).abs() < 1e-12);
    assert_eq!(report, r);
    // each weight is the derivative with respect to its component
    let grads = g.backward(total).unwrap();
    let dg: Vec<f64> = vals.iter().map(|&v| grads.get(v).unwrap()[0]).collect();
    assert_eq!(dg, vec![1.0, 1.0, 0.001, 2.0]);

    let mut g = Graph::new();
    let ok = g.input(Tensor::scalar(1.0));
    let bad = g.input(Tensor::scalar(f64::NAN));
    let terms = LossTerms {
        cls: ok,
        tri: ok,
        sd: Some(bad),
        mask: None,
    };
    match total_loss(&mut g, &terms, &w) {
        Err(Error::NonFinite { component }) => assert_eq!(component, "l_sd"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn weights_validate() {
    assert!(LossWeights::default().validate().is_ok());
    for w in [
        LossWeights { gamma: -1.0, ..Default::default() },
        LossWeights { lambda_mask: -0.1, ..Default::default() },
        LossWeights { sd_epsilon: 0.0, ..Default::default() },
        LossWeights { margin: -0.3, ..Default::default() },
    ] {
        assert!(matches!(w.validate(), Err(Error::Config(_))));
    }
}

proptest! {
    #[test]
    fn sd_bounds_and_rescaling(seed in 0u64..10_000, k in 2usize..7, factor in 0.01f64..100.0) {
        let mut rng = RngStream::new(seed);
        let mut vs: Vec<Vec<f64>> = (0..k).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let v = sd_value(&vs);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
        let i = rng.below(k);
        vs[i].iter_mut().for_each(|x| *x *= factor);
        prop_assert!((sd_value(&vs) - v).abs() < 1e-9);
    }

    #[test]
    fn triplet_invariant_to_rigid_motion(seed in 0u64..10_000, angle in 0.0f64..6.3, tx in -5.0f64..5.0, ty in -5.0f64..5.0) {
        let mut rng = RngStream::new(seed);
        let labels = [0, 0, 1, 1, 2, 2];
        let e: Vec<Vec<f64>> = labels.iter().map(|_| vec![rng.normal(), rng.normal()]).collect();
        let (s, c) = angle.sin_cos();
        let moved: Vec<Vec<f64>> = e.iter().map(|p| vec![c * p[0] - s * p[1] + tx, s * p[0] + c * p[1] + ty]).collect();
        let flipped: Vec<Vec<f64>> = e.iter().map(|p| vec![p[1], p[0]]).collect();
        let base = triplet_value(&e, &labels, 0.3);
        prop_assert!((triplet_value(&moved, &labels, 0.3) - base).abs() < 1e-9);
        prop_assert!((triplet_value(&flipped, &labels, 0.3) - base).abs() < 1e-12);
    }
}

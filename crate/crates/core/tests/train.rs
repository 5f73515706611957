use std::collections::BTreeSet;

use magnifier::data::{DataConfig, Dataset, PkSampler};
use magnifier::model::{forward_full, Batch, Model};
use magnifier::numcore::{Graph, Mode, RngStream, Tensor};
use magnifier::train::{train_two_stage, Trainer};
use magnifier::{checkpoint, Error, TrainConfig};

fn dataset() -> Dataset {
    Dataset::generate(&DataConfig {
        seed: 1,
        num_ids: 8,
        imgs_per_id: 4,
        ..Default::default()
    })
    .unwrap()
}

/// Two images each of the first two training classes.
fn pk_items(ds: &Dataset) -> Vec<(usize, usize)> {
    let all = ds.train_labels();
    (0..2)
        .flat_map(|l| all.iter().filter(move |&&(_, x)| x == l).take(2).copied())
        .collect()
}

fn tiny() -> TrainConfig {
    TrainConfig {
        stage1_epochs: 1,
        stage2_epochs: 1,
        p: 2,
        q: 2,
        eval_every: 0,
        ..Default::default()
    }
}

#[test]
fn defaults_follow_the_schedule() {
    let c = TrainConfig::default();
    assert_eq!((c.stage1_epochs, c.stage2_epochs), (46, 4));
    assert_eq!(c.stage1_epochs * 40, c.stage2_epochs * 460);
    assert_eq!(c.stage2_lr, 1e-3);
    assert_eq!((c.loss.gamma, c.loss.lambda_mask), (2e-3, 2.0));
    assert_eq!(c.p * c.q, 16);
}

#[test]
fn stages_change_only_lr_and_gamma() {
    let ds = dataset();
    let cfg = tiny();
    let t = Trainer::new(&cfg, &ds, None).unwrap();
    let (o1, g1) = t.schedule(0);
    let (o2, g2) = t.schedule(1);
    assert_eq!((t.stage_of(0), t.stage_of(1)), (1, 2));
    assert_eq!(g1, 0.0);
    assert_eq!(g2, cfg.loss.gamma);
    assert_eq!(o1.lr, cfg.optimizer.lr);
    assert_eq!(o2.lr, cfg.stage2_lr);
    assert_eq!(
        (o1.beta1, o1.beta2, o1.weight_decay),
        (o2.beta1, o2.beta2, o2.weight_decay)
    );

    // same graph for either weight
    let items = pk_items(&ds);
    let batch = t.make_batch(&items).unwrap();
    let mut model = t.model.clone();
    let sizes: Vec<usize> = [g1, g2]
        .iter()
        .map(|&gamma| {
            let mut g = Graph::new();
            forward_full(&mut g, &mut model, &batch, Mode::Train, gamma, Some(&mut RngStream::new(0))).unwrap();
            g.len()
        })
        .collect();
    assert_eq!(sizes[0], sizes[1]);
}

#[test]
fn gamma_weights_the_diversity_term() {
    let ds = dataset();
    let t = Trainer::new(&tiny(), &ds, None).unwrap();
    let items = pk_items(&ds);
    let b = t.make_batch(&items).unwrap();
    let batch = Batch {
        images: b.images.cast(),
        masks: b.masks.map(|m| m.cast()),
        labels: b.labels,
    };
    let mut model: Model<f64> = t.model.cast();
    let mut at = |gamma: f64| {
        let mut g = Graph::new();
        let out = forward_full(&mut g, &mut model, &batch, Mode::Train, gamma, Some(&mut RngStream::new(3))).unwrap();
        out.report.unwrap()
    };
    let r0 = at(0.0);
    let r1 = at(0.25);
    assert!(r0.l_sd > 0.0);
    assert!((r0.l_total - (r0.l_cls + r0.l_tri + 2.0 * r0.l_mask)).abs() < 1e-12);
    assert!(((r1.l_total - r0.l_total) / 0.25 - r0.l_sd).abs() < 1e-9);
}

#[test]
fn identical_images_give_margin_triplets() {
    let ds = dataset();
    let mut cfg = tiny();
    cfg.components.sab = false;
    let t = Trainer::new(&cfg, &ds, None).unwrap();
    let i = ds.manifest.train[0];
    let batch = t.make_batch(&[(i, 0), (i, 0), (i, 1), (i, 1)]).unwrap();
    let mut model = t.model.clone();
    let mut g = Graph::new();
    let out = forward_full(&mut g, &mut model, &batch, Mode::Train, 0.0, Some(&mut RngStream::new(0))).unwrap();
    assert!((out.report.unwrap().l_tri - cfg.loss.margin).abs() < 1e-6);
}

#[test]
fn every_parameter_gets_gradient_in_the_first_epoch() {
    let ds = dataset();
    let cfg = tiny();
    let t = Trainer::new(&cfg, &ds, None).unwrap();
    let mut model = t.model.clone();
    let names: Vec<String> = model
        .params
        .iter()
        .filter(|(_, p)| p.requires_grad)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut alive = BTreeSet::new();
    let sampler = PkSampler::new(&ds.train_labels(), cfg.p, cfg.q).unwrap();
    let mut rng = RngStream::new(5);
    for items in sampler.epoch(&mut RngStream::new(4)) {
        let batch = t.make_batch(&items).unwrap();
        let mut g = Graph::new();
        let out = forward_full(&mut g, &mut model, &batch, Mode::Train, 0.0, Some(&mut rng)).unwrap();
        g.backward(out.total.unwrap()).unwrap().accumulate_into(&mut model.params).unwrap();
        for n in &names {
            if model.params.grad(n).unwrap().is_some_and(|g| g.iter().any(|&v| v != 0.0)) {
                alive.insert(n.clone());
            }
        }
        model.params.zero_grads();
    }
    let dead: Vec<&String> = names.iter().filter(|n| !alive.contains(*n)).collect();
    assert!(dead.is_empty(), "no gradient: {dead:?}");
}

#[test]
fn resume_reproduces_the_loss_sequence() {
    let ds = dataset();
    let cfg = tiny();
    let mut fresh = Trainer::new(&cfg, &ds, None).unwrap();
    let full: Vec<_> = (0..5).map(|_| fresh.step().unwrap().0).collect();
    // the fifth step already belongs to stage two
    assert!(full.iter().any(|s| s.stage == 2));

    let tmp = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(&cfg, &ds, Some(tmp.path())).unwrap();
    let head = first.run(Some(3)).unwrap();
    assert_eq!(head.steps, full[..3]);
    let latest = tmp.path().join("checkpoints/latest");
    let mut resumed = Trainer::resume(&latest, &cfg, &ds, Some(tmp.path())).unwrap();
    assert_eq!(resumed.state().step, 3);
    let tail: Vec<_> = (0..2).map(|_| resumed.step().unwrap().0).collect();
    assert_eq!(tail, full[3..]);

    let mut other = cfg.clone();
    other.seed = 9;
    other.loss.margin = 0.5;
    match Trainer::resume(&latest, &other, &ds, None) {
        Err(Error::ConfigMismatch(keys)) => {
            assert!(keys.iter().any(|k| k.contains("seed")), "{keys:?}");
            assert!(keys.iter().any(|k| k.contains("loss.margin")), "{keys:?}");
        }
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("resume accepted a different config"),
    }
}

#[test]
fn same_seed_same_losses() {
    let ds = dataset();
    let cfg = tiny();
    let run = |cfg: &TrainConfig| {
        let mut t = Trainer::new(cfg, &ds, None).unwrap();
        (0..3).map(|_| t.step().unwrap().0.losses.l_total).collect::<Vec<_>>()
    };
    assert_eq!(run(&cfg), run(&cfg));
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(run(&cfg), run(&other));
}

#[test]
fn non_finite_loss_aborts_with_its_name() {
    let ds = dataset();
    let mut t = Trainer::new(&tiny(), &ds, None).unwrap();
    let shape = t.model.params.get("global.classifier.weight").unwrap().shape().to_vec();
    t.model
        .params
        .set_values("global.classifier.weight", &Tensor::full(&shape, f32::NAN))
        .unwrap();
    match t.step() {
        Err(Error::NonFinite { component }) => assert_eq!(component, "l_cls"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn full_run_writes_logs_and_checkpoints() {
    let ds = dataset();
    let cfg = TrainConfig {
        eval_every: 1,
        ..tiny()
    };
    let tmp = tempfile::tempdir().unwrap();
    let (mut t, summary) = train_two_stage(&cfg, &ds, Some(tmp.path())).unwrap();
    assert!(t.is_done());
    assert_eq!(summary.epochs.len(), 2);
    assert_eq!(summary.epochs[0].stage, 1);
    assert_eq!(summary.epochs[1].stage, 2);
    assert!(summary.epochs.iter().all(|e| e.rank1.is_some() && e.map.is_some()));
    assert!(summary.epochs[0].l_sd > 0.0);
    let log = std::fs::read_to_string(tmp.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for label in ["latest", "stage1", "final"] {
        assert!(tmp.path().join("checkpoints").join(label).join("meta.json").exists(), "{label}");
    }
    let (back, state) = checkpoint::load(&tmp.path().join("checkpoints/final")).unwrap();
    assert_eq!(state.epoch, 2);
    for ((n, a), (_, b)) in back.params.iter().zip(t.model.params.iter()) {
        assert_eq!(a.data(), b.data(), "{n}");
    }
    assert!(t.step().is_err());
}

use super::*;
use crate::numerics::checkpoint;
use crate::perception::EncoderConfig;
use crate::taskgen::{generate_split, lookup_rule, Resolution, Split};

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 2,
        patience: 5,
        batch_size: 4,
        lr: 1e-3,
        eval_batch_size: 8,
        seed: 7,
        wall_time: false,
        ..TrainConfig::default()
    };
    cfg.model.encoder = EncoderConfig {
        widths: vec![4, 8, 8],
        embed_dim: 8,
        resolution: 32,
    };
    cfg.model.parm.k = 1;
    cfg
}

fn panels(split: Split, n: usize) -> Vec<Panel> {
    let rule = lookup_rule("size").unwrap();
    generate_split(&[rule], n, split, 3, Resolution::new(32).unwrap()).unwrap()
}

#[test]
fn zero_epochs_returns_initialization() {
    let cfg = TrainConfig { epochs: 0, ..tiny() };
    let out = train::<f32>(&cfg, &panels(Split::Train, 4), &panels(Split::Val, 4)).unwrap();
    let init = Model::<f32>::new(cfg.model.clone(), cfg.init_seed()).unwrap();
    assert_eq!(checkpoint::to_bytes(&out.model.store), checkpoint::to_bytes(&init.store));
    assert!(out.history.records.is_empty());
    assert_eq!(out.history.best_epoch, None);
}

#[test]
fn empty_sets_are_rejected() {
    let cfg = tiny();
    assert!(matches!(
        train::<f32>(&cfg, &[], &panels(Split::Val, 2)),
        Err(TrainError::EmptyDataset("train"))
    ));
    assert!(matches!(
        train::<f32>(&cfg, &panels(Split::Train, 2), &[]),
        Err(TrainError::EmptyDataset("validation"))
    ));
    let bad = TrainConfig { batch_size: 0, ..tiny() };
    assert!(matches!(train::<f32>(&bad, &[], &[]), Err(TrainError::Config(_))));
}

#[test]
fn zero_lambda_matches_detached_branch_bitwise() {
    // 12 panels at batch 4: three optimizer steps.
    let tr = panels(Split::Train, 12);
    let va = panels(Split::Val, 4);
    let mut a = TrainConfig { epochs: 1, ..tiny() };
    a.model.parm.lambda = 0.0;
    let mut b = TrainConfig { detach_contrastive: true, ..a.clone() };
    b.model.parm.lambda = 0.1;
    let ra = train::<f32>(&a, &tr, &va).unwrap();
    let rb = train::<f32>(&b, &tr, &va).unwrap();
    assert_eq!(checkpoint::to_bytes(&ra.model.store), checkpoint::to_bytes(&rb.model.store));
    // The zero-weight run still logs the contrastive term.
    assert!(ra.history.records[0].contrastive > 0.0);
    assert_eq!(ra.history.records[0].loss, ra.history.records[0].bce);
}

#[test]
fn logged_loss_decomposes() {
    let cfg = tiny();
    let out = train::<f64>(&cfg, &panels(Split::Train, 8), &panels(Split::Val, 4)).unwrap();
    for r in &out.history.records {
        assert!((r.loss - (r.bce + 0.1 * r.contrastive)).abs() < 1e-6, "{r:?}");
    }
}

#[test]
fn seeded_runs_are_identical() {
    let tr = panels(Split::Train, 8);
    let va = panels(Split::Val, 4);
    let a = train::<f32>(&tiny(), &tr, &va).unwrap();
    let b = train::<f32>(&tiny(), &tr, &va).unwrap();
    let csv = |h: &TrainHistory| {
        let mut v = Vec::new();
        h.write_csv(&mut v).unwrap();
        v
    };
    assert_eq!(csv(&a.history), csv(&b.history));
    assert_eq!(checkpoint::to_bytes(&a.model.store), checkpoint::to_bytes(&b.model.store));
    let c = train::<f32>(&TrainConfig { seed: 8, ..tiny() }, &tr, &va).unwrap();
    assert_ne!(checkpoint::to_bytes(&a.model.store), checkpoint::to_bytes(&c.model.store));
}

#[test]
fn patience_bounds_epochs_past_best() {
    let cfg = TrainConfig {
        epochs: 6,
        patience: 1,
        lr: 1e-7,
        ..tiny()
    };
    let out = train::<f32>(&cfg, &panels(Split::Train, 4), &panels(Split::Val, 4)).unwrap();
    let h = &out.history;
    let best = h.best_epoch.unwrap();
    let last = h.records.last().unwrap().epoch;
    assert!(last - best <= cfg.patience);
    assert_eq!(h.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), (1..=last).collect::<Vec<_>>());
    // Ties keep the earlier epoch.
    let max = h.records.iter().map(|r| r.val_accuracy).fold(0.0, f64::max);
    assert_eq!(h.records.iter().find(|r| r.val_accuracy == max).unwrap().epoch, best);
}

#[test]
fn evaluation_is_repeatable_and_covers_rules() {
    let cfg = tiny();
    let model = Model::<f32>::new(cfg.model.clone(), 1).unwrap();
    let va = panels(Split::Val, 6);
    let a = evaluate(&model, &va, 4).unwrap();
    let b = evaluate(&model, &va, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.panels, 6);
    assert_eq!(a.per_rule["size"].panels, 6);
    assert_eq!(a.error_norms.as_ref().unwrap().panels, 6);
}

#[test]
fn pooled_head_trains_without_error_norms() {
    let mut cfg = tiny();
    cfg.model.head = HeadKind::PooledMlp;
    cfg.contrastive = false;
    let out = train::<f32>(&cfg, &panels(Split::Train, 4), &panels(Split::Val, 4)).unwrap();
    assert!(out.model.parm().is_none());
    assert!(out.history.records.iter().all(|r| r.contrastive == 0.0));
    let m = evaluate(&out.model, &panels(Split::Val, 4), 4).unwrap();
    assert!(m.error_norms.is_none());
}

#[test]
fn view_modes_keep_labels() {
    let p = &panels(Split::Train, 1)[0];
    for v in [Views::Both, Views::WeakOnly, Views::StrongOnly] {
        let cfg = TrainConfig { views: v, ..tiny() };
        let (w, s) = views(p, 11, &cfg).unwrap();
        assert_eq!(w.outlier_index, p.outlier_index);
        assert_eq!(s.outlier_index, p.outlier_index);
        if v == Views::StrongOnly {
            assert_eq!(w.images, p.images);
        }
    }
}

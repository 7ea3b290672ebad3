//! End-to-end acceptance checks, one test per criterion. Each prints a single
//! `criterion N ... PASS|FAIL` line straight to stdout (visible without
//! `--nocapture`). The training criteria take hours on one core.

use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use cvrlab::gradsuite::gradient_suite;
use cvrlab::numerics::gradcheck::{run_cases, GradcheckOptions};
use cvrlab::numerics::{checkpoint, Graph, Tensor};
use cvrlab::parm::{bce_loss, ContextOrder, Parm, PanelScores};
use cvrlab::perception::{acl_loss, panels_to_tensor};
use cvrlab::taskgen::rng::stream;
use cvrlab::taskgen::{check_panel, generate_split, lookup_rule, rule_catalog, Panel, Resolution, Split};
use cvrlab::trainer::{
    evaluate, grid_cells, predict, train, AblationGrid, Model, TrainConfig, TrainHistory, TrainOutcome,
};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
/// Fixed epoch budget for every ablation cell.
const ABLATION_EPOCHS: usize = 8;

/// Serializes the training-heavy criteria so their timings do not overlap.
static HEAVY: Mutex<()> = Mutex::new(());

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "\ncriterion {n:>2} {name:<28} {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

struct SmokeData {
    train: Vec<Panel>,
    val: Vec<Panel>,
    test: Vec<Panel>,
}

fn smoke_data() -> &'static SmokeData {
    static DATA: OnceLock<SmokeData> = OnceLock::new();
    DATA.get_or_init(|| {
        let rule = lookup_rule("size").unwrap();
        let res = Resolution::new(64).unwrap();
        let split = |s, n| generate_split(std::slice::from_ref(&rule), n, s, 2024, res).unwrap();
        SmokeData {
            train: split(Split::Train, 2000),
            val: split(Split::Val, 500),
            test: split(Split::Test, 500),
        }
    })
}

/// Smoke runs per seed, stopping once validation accuracy reaches 60%.
fn smoke_runs() -> &'static (Vec<TrainOutcome<f32>>, f64) {
    static RUNS: OnceLock<(Vec<TrainOutcome<f32>>, f64)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let d = smoke_data();
        let start = Instant::now();
        let runs = SEEDS
            .iter()
            .map(|&s| {
                let cfg = TrainConfig {
                    target_accuracy: Some(0.6),
                    ..TrainConfig::smoke(s)
                };
                train::<f32>(&cfg, &d.train, &d.val).unwrap()
            })
            .collect();
        (runs, start.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let r = run_cases(&gradient_suite::<f32>(), &GradcheckOptions::single());
    let secs = start.elapsed().as_secs_f64();
    let worst = r.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let pass = r.passed() && r.tolerance <= 1e-2 && secs <= 120.0;
    let failed: Vec<_> = r.failures().map(|c| c.name).collect();
    report(
        1,
        "gradient suite",
        pass,
        &format!("{} cases, worst rel err {worst:.2e}, {secs:.1}s, failed {failed:?}", r.cases.len()),
    );
    assert!(pass);
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Straight-line contrastive loss over `[4B, d]` row-major embeddings.
fn acl_oracle(weak: &[f64], strong: &[f64], d: usize, outliers: &[usize]) -> f64 {
    let row = |m: &[f64], r: usize| m[r * d..(r + 1) * d].to_vec();
    let mut total = 0.0;
    let mut count = 0;
    for (b, &o) in outliers.iter().enumerate() {
        let (uw, us) = (row(weak, 4 * b + o), row(strong, 4 * b + o));
        for s in (0..4).filter(|&s| s != o) {
            let (hw, hs) = (row(weak, 4 * b + s), row(strong, 4 * b + s));
            let alpha = cosine(&hw, &hs);
            let bw = cosine(&hw, &uw);
            let bs = cosine(&hs, &us);
            total += -(alpha.exp() / (bw.exp() + bs.exp())).ln();
            count += 1;
        }
    }
    total / count as f64
}

fn bce_oracle(logits: &[f64], outliers: &[usize]) -> f64 {
    let mut total = 0.0;
    for (b, &o) in outliers.iter().enumerate() {
        for s in 0..4 {
            let p = 1.0 / (1.0 + (-logits[4 * b + s]).exp());
            total -= if s == o { p.ln() } else { (1.0 - p).ln() };
        }
    }
    total / (4 * outliers.len()) as f64
}

#[test]
fn criterion_02_loss_oracles() {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = stream(seed);
        let (b, d) = (3, 5);
        let outliers: Vec<usize> = (0..b).map(|_| rng.gen_range(0..4)).collect();
        let mut draw = |n: usize, s: f64| (0..n).map(|_| rng.gen_range(-s..s)).collect::<Vec<f64>>();
        let (w, s, z) = (draw(4 * b * d, 1.0), draw(4 * b * d, 1.0), draw(4 * b, 4.0));

        let mut g = Graph::<f64>::new();
        let wv = g.input(Tensor::from_f64(&[4 * b, d], &w).unwrap());
        let sv = g.input(Tensor::from_f64(&[4 * b, d], &s).unwrap());
        let l = acl_loss(&mut g, wv, sv, &outliers, 1.0).unwrap();
        worst = worst.max((g.value(l).data()[0] - acl_oracle(&w, &s, d, &outliers)).abs());
        let zv = g.input(Tensor::from_f64(&[b, 4], &z).unwrap());
        let l = bce_loss(&mut g, zv, &outliers, false).unwrap();
        worst = worst.max((g.value(l).data()[0] - bce_oracle(&z, &outliers)).abs());
    }
    // All similarities equal: every embedding identical.
    let mut g = Graph::<f64>::new();
    let same = g.input(Tensor::from_f64(&[8, 3], &[0.3; 24]).unwrap());
    let l = acl_loss(&mut g, same, same, &[0, 2], 1.0).unwrap();
    let acl_anchor = (g.value(l).data()[0] - std::f64::consts::LN_2).abs();
    let zeros = g.input(Tensor::zeros(&[5, 4]));
    let l = bce_loss(&mut g, zeros, &[0, 1, 2, 3, 0], false).unwrap();
    let bce_anchor = (g.value(l).data()[0] - std::f64::consts::LN_2).abs();

    let pass = worst <= 1e-6 && acl_anchor <= 1e-6 && bce_anchor <= 1e-6;
    report(
        2,
        "loss oracles",
        pass,
        &format!("max dev {worst:.1e}, anchors {acl_anchor:.1e} / {bce_anchor:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_residual_identity() {
    let cfg = TrainConfig::smoke(0);
    assert_eq!(cfg.model.parm.k, 3);
    let model = Model::<f32>::new(cfg.model.clone(), cfg.init_seed()).unwrap();
    let panels = &generate_split(&rule_catalog()[..4], 2, Split::Val, 5, Resolution::new(64).unwrap()).unwrap();
    let refs: Vec<&Panel> = panels.iter().collect();
    let mut g = Graph::new();
    let x = g.input(panels_to_tensor(&refs));
    let f = model.perception().encode(&mut g, &model.store, x).unwrap();
    let parm = model.parm().unwrap();
    let r = parm.reason(&mut g, &model.store, f, &mut ContextOrder::AverageAll).unwrap();
    let y0 = Parm::initial_groups(&mut g, f).unwrap();
    let dev = g.value(r.groups).max_abs_diff(g.value(y0));
    let pass = dev == 0.0;
    report(3, "residual identity", pass, &format!("K=3, max abs dev {dev:e}"));
    assert!(pass);
}

fn permuted(p: &Panel, perm: [usize; 4]) -> Panel {
    // Slot s of the new panel shows old slot perm[s].
    let mut q = p.clone();
    q.images = std::array::from_fn(|s| p.images[perm[s]].clone());
    q.scenes = (0..4).map(|s| p.scenes[perm[s]].clone()).collect();
    q.outlier_index = perm.iter().position(|&o| o == p.outlier_index).unwrap();
    q
}

#[test]
fn criterion_04_equivariance() {
    let cfg = TrainConfig::smoke(0);
    let model = Model::<f32>::new(cfg.model.clone(), 77).unwrap();
    let rules = rule_catalog();
    let panels = generate_split(&rules, 6, Split::Test, 9, Resolution::new(64).unwrap()).unwrap();
    let panels: Vec<Panel> = panels.into_iter().take(100).collect();
    let mut rng = stream(4);
    let perms: Vec<[usize; 4]> = (0..panels.len())
        .map(|_| {
            let mut p = [0, 1, 2, 3];
            rand::seq::SliceRandom::shuffle(&mut p[..], &mut rng);
            p
        })
        .collect();
    let moved: Vec<Panel> = panels.iter().zip(&perms).map(|(p, &perm)| permuted(p, perm)).collect();
    let a = predict(&model, &panels, 25).unwrap();
    let b = predict(&model, &moved, 25).unwrap();
    let mut worst: f64 = 0.0;
    for ((sa, _), ((sb, _), perm)) in a.iter().zip(b.iter().zip(&perms)) {
        let (sa, sb): (&PanelScores<f32>, &PanelScores<f32>) = (sa, sb);
        for s in 0..4 {
            worst = worst.max((sb.logits[s] - sa.logits[perm[s]]).abs() as f64);
        }
    }
    // Guard against a vacuous pass where all four logits coincide.
    let spread = a
        .iter()
        .map(|(s, _)| {
            let l = s.logits.map(|v| v as f64);
            l.iter().copied().fold(f64::MIN, f64::max) - l.iter().copied().fold(f64::MAX, f64::min)
        })
        .fold(0.0, f64::max);
    let pass = panels.len() == 100 && worst <= 1e-5 && spread > 1e-3;
    report(
        4,
        "equivariance",
        pass,
        &format!("100 panels, max abs dev {worst:.2e}, max logit spread {spread:.3}"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_generator() {
    let res = Resolution::new(64).unwrap();
    let rules = rule_catalog();
    let a = generate_split(&rules, 3, Split::Train, 11, res).unwrap();
    let b = generate_split(&rules, 3, Split::Train, 11, res).unwrap();
    let identical = a.iter().zip(&b).all(|(x, y)| x.images == y.images && x.outlier_index == y.outlier_index);

    let mut conform_failures = Vec::new();
    for rule in &rules {
        for p in generate_split(std::slice::from_ref(rule), 100, Split::Val, 12, res).unwrap() {
            if let Err(e) = check_panel(rule, &p.scenes, p.outlier_index) {
                conform_failures.push(format!("{}: {e}", p.id));
            }
            // The predicate must refute a wrong outlier slot.
            if check_panel(rule, &p.scenes, (p.outlier_index + 1) % 4).is_ok() {
                conform_failures.push(format!("{}: wrong slot accepted", p.id));
            }
        }
    }

    let mut counts = [0usize; 4];
    for p in generate_split(&[lookup_rule("position").unwrap()], 1000, Split::Test, 13, res).unwrap() {
        counts[p.outlier_index] += 1;
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - 250.0).powi(2) / 250.0).sum();
    // 3 degrees of freedom, p = 0.01.
    let pass = identical && conform_failures.is_empty() && chi2 < 11.345;
    report(
        5,
        "generator",
        pass,
        &format!(
            "regen identical {identical}, {} rules x 100 conformance failures {}, chi2 {chi2:.2} {counts:?}",
            rules.len(),
            conform_failures.len()
        ),
    );
    assert!(pass, "{:?}", &conform_failures[..conform_failures.len().min(5)]);
}

#[test]
fn criterion_06_chance_baseline() {
    let cfg = TrainConfig::smoke(0);
    let model = Model::<f32>::new(cfg.model.clone(), cfg.init_seed()).unwrap();
    let panels = generate_split(&[lookup_rule("size").unwrap()], 1000, Split::Test, 31, Resolution::new(64).unwrap())
        .unwrap();
    let m = evaluate(&model, &panels, 64).unwrap();
    let half = 2.5758 * (0.25f64 * 0.75 / 1000.0).sqrt();
    let pass = (m.accuracy - 0.25).abs() <= half;
    report(
        6,
        "chance baseline",
        pass,
        &format!("accuracy {:.3}, 99% CI [{:.4}, {:.4}]", m.accuracy, 0.25 - half, 0.25 + half),
    );
    assert!(pass);
}

#[test]
fn criterion_07_smoke_training() {
    let _g = heavy();
    let (runs, secs) = smoke_runs();
    let accs: Vec<f64> = runs.iter().map(|r| r.history.best_val_accuracy.unwrap_or(0.0)).collect();
    let epochs: Vec<usize> = runs.iter().map(|r| r.history.best_epoch.unwrap_or(0)).collect();
    let pass = accs.iter().all(|&a| a >= 0.6) && epochs.iter().all(|&e| e <= 30) && *secs <= 1800.0;
    report(
        7,
        "smoke training",
        pass,
        &format!("val acc {accs:.3?} at epochs {epochs:?}, {secs:.0}s for 3 seeds"),
    );
    assert!(pass);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_08_directional_ablations() {
    let _g = heavy();
    let d = smoke_data();
    let base = TrainConfig {
        epochs: ABLATION_EPOCHS,
        ..TrainConfig::smoke(0)
    };
    let mut cells = grid_cells(&base, AblationGrid::Components);
    // The augmentation grid's first cell is the full model again.
    cells.extend(grid_cells(&base, AblationGrid::Augment).into_iter().skip(1));
    let mut med = std::collections::BTreeMap::new();
    for cell in &cells {
        let accs: Vec<f64> = SEEDS
            .iter()
            .map(|&s| {
                let out = train::<f32>(&TrainConfig { seed: s, ..cell.config.clone() }, &d.train, &d.val).unwrap();
                evaluate(&out.model, &d.test, 64).unwrap().accuracy
            })
            .collect();
        med.insert(cell.id.clone(), (median(accs.clone()), accs));
    }
    let m = |k: &str| med[k].0;
    let checks = [
        ("full>=no_acl", m("full") >= m("no_acl")),
        ("full>=no_parm", m("full") >= m("no_parm")),
        ("acl>=wda_only", m("full") >= m("wda_only")),
        ("acl>=sda_only", m("full") >= m("sda_only")),
    ];
    let pass = checks.iter().all(|c| c.1);
    let detail: Vec<String> = med.iter().map(|(k, (m, a))| format!("{k} {m:.3} {a:.3?}")).collect();
    report(8, "directional ablations", pass, &format!("{checks:?}; {}", detail.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_09_outlier_error_asymmetry() {
    let _g = heavy();
    let (runs, _) = smoke_runs();
    let d = smoke_data();
    let mut parts = Vec::new();
    let mut pass = true;
    for r in runs {
        let e = evaluate(&r.model, &d.val, 64).unwrap().error_norms.unwrap();
        pass &= e.outlier_mean > e.normal_mean && e.sign_test_p < 0.05;
        parts.push(format!(
            "outlier {:.3} vs normal {:.3}, wins {}/{}, p {:.1e}",
            e.outlier_mean, e.normal_mean, e.outlier_wins, e.panels, e.sign_test_p
        ));
    }
    report(9, "outlier error asymmetry", pass, &parts.join("; "));
    assert!(pass);
}

#[test]
fn criterion_10_reproducibility() {
    let _g = heavy();
    let d = smoke_data();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::smoke(5)
    };
    let run = || {
        let out = train::<f32>(&cfg, &d.train[..256], &d.val[..128]).unwrap();
        let mut csv = Vec::new();
        TrainHistory::write_csv(&out.history, &mut csv).unwrap();
        (csv, checkpoint::to_bytes(&out.model.store))
    };
    let (a, b) = (run(), run());
    let pass = a == b;
    report(
        10,
        "reproducibility",
        pass,
        &format!("history {} bytes, checkpoint {} bytes, identical {pass}", a.0.len(), a.1.len()),
    );
    assert!(pass);
}

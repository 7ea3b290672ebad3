//! Times the SIZE-rule smoke configuration: `cargo run --release --example smoke -- [seed] [epochs] [n_train]`.

use std::time::Instant;

use cvrlab::taskgen::{generate_split, lookup_rule, Resolution, Split};
use cvrlab::trainer::{evaluate, train_from, Model, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (seed, epochs, n_train) = (arg(1, 0), arg(2, 30) as usize, arg(3, 2000) as usize);
    let rule = lookup_rule("size").unwrap();
    let res = Resolution::new(64).unwrap();
    let train = generate_split(std::slice::from_ref(&rule), n_train, Split::Train, 1, res).unwrap();
    let val = generate_split(&[rule], 500, Split::Val, 1, res).unwrap();

    let cfg = TrainConfig {
        epochs,
        target_accuracy: Some(0.6),
        wall_time: true,
        ..TrainConfig::smoke(seed)
    };
    let model = Model::<f32>::new(cfg.model.clone(), cfg.init_seed()).unwrap();
    let start = Instant::now();
    let out = train_from(model, &cfg, &train, &val, |r, _| {
        eprintln!(
            "epoch {:>3}  L {:.4}  bce {:.4}  lc {:.4}  val {:.3}  {:.1}s",
            r.epoch, r.loss, r.bce, r.contrastive, r.val_accuracy, r.seconds
        )
    })
    .unwrap();
    let m = evaluate(&out.model, &val, 64).unwrap();
    println!(
        "best epoch {:?} val {:.3} stop {:?} total {:.1}s norms {:?}",
        out.history.best_epoch,
        m.accuracy,
        out.history.stop,
        start.elapsed().as_secs_f64(),
        m.error_norms
    );
}

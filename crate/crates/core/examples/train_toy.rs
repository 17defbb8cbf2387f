//! Overfits the toy network on five synthetic scenes and reports how well it
//! reproduces them.
//!
//! ```text
//! cargo run --release --example train_toy -- [iterations] [lr]
//! ```

use std::time::Instant;

use nnad::pipeline::{fit_report, run_dataset, train_run, Detector, RunConfig};

fn main() -> nnad::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::toy(std::env::temp_dir());
    if let Some(n) = args.next() {
        cfg.iterations = n.parse().expect("iterations");
        cfg.schedule.max_iter = cfg.iterations;
    }
    if let Some(lr) = args.next() {
        cfg.schedule.base_lr = lr.parse().expect("learning rate");
    }
    let items = run_dataset(&cfg)?;
    let start = Instant::now();
    let every = (cfg.iterations / 20).max(1);
    let outcome = train_run(&cfg, &items, |r| {
        if r.iteration % every == 0 {
            let parts: Vec<String> = r
                .losses
                .iter()
                .map(|l| l.map_or("-".into(), |v| format!("{v:.4}")))
                .collect();
            println!("{:>5}  lr {:.2e}  total {:>8.4}  [{}]", r.iteration, r.lr, r.total, parts.join(" "));
        }
    })?;
    println!("trained in {:.1?}", start.elapsed());

    let mut det = Detector::from_checkpoint(&outcome.checkpoint)?;
    let fit = fit_report(&mut det, &items, 0.5)?;
    println!("{}", serde_json::to_string_pretty(&fit).expect("serializable"));
    Ok(())
}

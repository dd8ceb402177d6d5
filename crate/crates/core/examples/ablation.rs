//! Paired ablation over the four training modes on a synthetic corpus.
//!
//! ```text
//! cargo run --release -p kcl-core --example ablation -- [noise] [epochs] [seeds]
//! ```

use std::time::Instant;

use kcl_core::corpus::generate_synthetic;
use kcl_core::trainer::train;
use kcl_core::{CorpusConfig, Mode, TrainConfig};

fn env(name: &str) -> Option<f64> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn main() -> kcl_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(0.3);
    let epochs: usize = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(30);
    let seeds: u64 = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(5);
    let modes = [Mode::Base, Mode::SkpOnly, Mode::KclOnly, Mode::Full];
    println!("seed mode      aver    r1     medr  unif_txt unif_vis align   secs");
    for seed in 0..seeds {
        let corpus = generate_synthetic(&CorpusConfig {
            num_samples: 2000,
            action_topic_fraction: env("ACTION_FRACTION").unwrap_or(0.25),
            num_topics: 16,
            noise_sigma: noise,
            seed,
            ..Default::default()
        })?;
        for mode in modes {
            let start = Instant::now();
            let mut config = TrainConfig {
                epochs,
                seed,
                mode,
                eval_every: env("EVAL_EVERY").map_or(epochs, |v| v as usize),
                ..Default::default()
            };
            if let Some(v) = env("LR") {
                config.lr = v;
            }
            if let Some(v) = env("SKP_WEIGHT") {
                config.loss.skp_weight = v;
            }
            if let Some(v) = env("ACTION_WEIGHT") {
                config.sampler.action_weight = v;
            }
            if let Some(v) = env("HIDDEN") {
                config.hidden = v as usize;
            }
            if let Some(v) = env("SKP_HIDDEN") {
                config.skp_hidden = v as usize;
            }
            if let Some(v) = env("BATCH") {
                config.sampler.batch_size = v as usize;
            }
            if std::env::var("RANDOM_SWITCH").is_ok() {
                config.loss.random_task_switch = true;
            }
            let model = train(&corpus, &config)?;
            if std::env::var("CURVE").is_ok() {
                for e in &model.log.evals {
                    println!(
                        "     ep {:<3} r1 {:.3} r5 {:.3} r10 {:.3} v2t_aver {:.3}",
                        e.epoch, e.t2v.r1, e.t2v.r5, e.t2v.r10, e.v2t.aver
                    );
                }
            }
            let e = model.log.last_eval().expect("final evaluation");
            println!(
                "{seed:<4} {:<9} {:.4} {:.4} {:<5} {:>8.4} {:>8.4} {:.4} {:.1}",
                format!("{mode:?}"),
                e.t2v.aver,
                e.t2v.r1,
                e.t2v.med_r,
                e.space.unif_txt,
                e.space.unif_vis,
                e.space.align,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

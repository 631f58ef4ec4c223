//! Records the tiny-overfit reference run: 4 seeded 32×32 triplets, compact
//! network, 2000 pretraining iterations. Writes the loss trajectory and final
//! PSNR as JSON to the path given as the first argument (stdout otherwise).

use std::time::Instant;

use rainsep_core::datastore::ImageSet;
use rainsep_core::metrics::psnr;
use rainsep_core::network::{Model, NetworkConfig};
use rainsep_core::objectives::quadratic_loss;
use rainsep_core::rainsynth::{procedural_background, synthesize_dataset, RainParamRanges, SynthOptions};
use rainsep_core::trainer::{LrSchedule, TrainConfig, Trainer};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> anyhow::Result<()> {
    let iters: u64 = env("OVERFIT_ITERS", 2000);
    let lr: f64 = env("OVERFIT_LR", 0.1);
    let decay_at: u64 = env("OVERFIT_DECAY_AT", 1800);
    let width: usize = env("OVERFIT_WIDTH", 16);
    let net = NetworkConfig {
        patch: 32,
        encoder_channels: [width, 2 * width, 4 * width, 4 * width, 4 * width],
        composition_channels: vec![width],
        discriminator_channels: [4, 4, 8, 8],
        ..Default::default()
    };
    let backgrounds: Vec<_> = (0..4).map(|i| procedural_background(32, 32, 3, 100 + i)).collect();
    let ranges = RainParamRanges { streak_length: (8, 24), ..Default::default() };
    let triplets =
        synthesize_dataset(&backgrounds, 4, &ranges, &SynthOptions { crop: 32, seed: 7, ..Default::default() })?;
    let data = ImageSet::from_triplets(&triplets);
    let cfg = TrainConfig {
        batch: 4,
        patch: 32,
        max_iter: iters,
        lr_schedule: LrSchedule(vec![(0, lr), (decay_at, lr / 5.0)]),
        checkpoint_every: 0,
        seed: 11,
        ..Default::default()
    };
    let started = Instant::now();
    let mut trainer = Trainer::new(cfg)?;
    let mut ckpt = trainer.fresh_checkpoint(&net)?;
    let mut trajectory = Vec::new();
    let step = 100.min(iters);
    let mut target = 0;
    while target < iters {
        target = (target + step).min(iters);
        trainer.cfg.max_iter = target;
        ckpt = trainer.resume_pretrain(ckpt, &data)?;
        let lb = ckpt.state.loss_tail.last().and_then(|l| l.components.get("background").copied()).unwrap_or(f64::NAN);
        eprintln!("iter {target:5}  L_B {lb:.6}  {:.1}s", started.elapsed().as_secs_f64());
        trajectory.push((target, lb));
    }
    let model: &Model = &ckpt.model;
    let mut psnrs = Vec::new();
    let mut lbs = Vec::new();
    for t in &triplets {
        let out = model.derain(&t.rainy)?;
        psnrs.push(psnr(&out, &t.background)?);
        lbs.push(quadratic_loss(out.view(), t.background.view(), Default::default())? as f64);
    }
    let record = serde_json::json!({
        "iterations": iters,
        "lr": lr,
        "decay_at": decay_at,
        "width": width,
        "final_background_loss": lbs.iter().sum::<f64>() / lbs.len() as f64,
        "min_psnr_db": psnrs.iter().cloned().fold(f64::INFINITY, f64::min),
        "psnr_db": psnrs,
        "trajectory": trajectory,
        "seconds": started.elapsed().as_secs_f64(),
    });
    let text = serde_json::to_string_pretty(&record)?;
    match std::env::args().nth(1) {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

//! Two-task continual GAN: trains a toy generator/discriminator pair on two
//! different 2-mode image distributions and shows that task-1 samples are
//! untouched by task-2 training.

use std::time::Instant;

use eft::data::two_mode_images;
use eft::gan::{train_gan_task, write_grid, GanConfig, GanPair};
use eft::{EftConvSpec, InitPolicy};

fn mean_and_spread(x: &eft::FeatureMap) -> (f64, f64) {
    let means: Vec<f64> = x.outer_iter().map(|img| img.mean().unwrap_or(0.0)).collect();
    let m = means.iter().sum::<f64>() / means.len() as f64;
    let v = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / means.len() as f64;
    (m, v.sqrt())
}

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "gan_out".into());
    std::fs::create_dir_all(&out)?;
    let cfg = GanConfig::default();
    let mut pair = GanPair::new(EftConvSpec::serial(4, 8)?, cfg.seed, cfg.probe_size)?;
    for task in 1..=2 {
        let data = two_mode_images(256, pair.image_shape(), 0.05, cfg.seed, task);
        pair.add_task(InitPolicy::ForwardTransfer)?;
        let start = Instant::now();
        let summary = train_gan_task(&mut pair, &data, &cfg)?;
        let samples = pair.samples.last().expect("recorded at finalize");
        let (dm, ds) = mean_and_spread(&data);
        let (sm, _) = mean_and_spread(samples);
        println!(
            "task {task}: {} steps in {:.1?}, D {:.3} G {:.3}, sample mean {sm:.3} vs data {dm:.3} ± {ds:.3}",
            summary.steps,
            start.elapsed(),
            summary.d_loss,
            summary.g_loss
        );
        write_grid(&std::path::Path::new(&out).join(format!("task{task}.png")), samples, 4, 4)?;
    }
    println!("task-1 probes replay bit-identically: {}", pair.probes_replay_exactly()?);
    Ok(())
}

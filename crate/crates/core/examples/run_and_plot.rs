//! The full on-disk workflow: train from the shipped desk configuration,
//! re-evaluate from the checkpoint, and plot the accuracy curves.
//!
//! `cargo run --release --example run_and_plot [out_dir]`

use std::path::PathBuf;

use eft::config::RunConfig;
use eft::plot::plot_curves;
use eft::run::{eval_run, read_curves, train_run, EvalMode};

fn main() -> anyhow::Result<()> {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk_synthetic.json");
    let text = std::fs::read_to_string(config)?;
    let mut cfg = RunConfig::from_json(&text)?;
    if let Some(out) = std::env::args().nth(1) {
        cfg.out_dir = PathBuf::from(out);
    }
    let (manifest, _) = train_run(&cfg, &text)?;
    println!("TIL averages {:.3?}", manifest.til_averages);
    println!("CIL averages {:.3?}", manifest.cil_averages);

    for mode in [EvalMode::Til, EvalMode::Cil, EvalMode::Task] {
        let report = eval_run(&cfg.out_dir, mode)?;
        println!("{mode:?}: recomputed matrix matches training: {}", report.matches_training());
    }

    let svg = cfg.out_dir.join("curves.svg");
    plot_curves(&read_curves(&cfg.out_dir)?, &svg, "EFT on 5 synthetic tasks")?;
    println!("wrote {}", svg.display());
    Ok(())
}

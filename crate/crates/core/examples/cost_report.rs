//! Parameter and FLOP growth of EFT on ResNet-18 for a few cardinalities,
//! plus the multi-task storage curve.

use eft::build_arch;
use eft::cost::{growth_report, INSERTION_POLICY};
use eft::EftConvSpec;

fn main() -> eft::Result<()> {
    let arch = build_arch("resnet18-cifar")?;
    println!("policy: {INSERTION_POLICY}\n");
    println!("{:>7} {:>12} {:>9} {:>14} {:>9}", "config", "params/task", "growth", "EFT FLOPs", "FLOPs +");
    for (a, b) in [(8, 16), (4, 8), (4, 0), (2, 0), (1, 0)] {
        let r = growth_report(&arch, &EftConvSpec::serial(a, b)?, 1)?;
        println!(
            "{:>7} {:>12} {:>8.2}% {:>14} {:>8.2}%",
            r.spec, r.eft_params_per_task, r.growth_percent, r.eft_flops, r.flops_growth_percent
        );
    }

    let spec = EftConvSpec::serial(8, 16)?;
    println!("\ntotal parameters after T tasks (a8b16):");
    for t in [0, 1, 5, 10, 20] {
        let r = growth_report(&arch, &spec, t)?;
        println!("  T = {t:>2}: {:>11} ({:.2}x base)", r.total_params, r.total_params as f64 / r.base_params as f64);
    }
    Ok(())
}

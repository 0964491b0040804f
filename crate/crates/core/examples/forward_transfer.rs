//! Forward-transfer ablation: initialise τ_t from τ_{t−1} or at random,
//! with a halved epoch budget on a sequence of related tasks, and compare
//! how fast each reaches a fixed training loss.

use eft::data::{generate_synthetic, SyntheticSpec};
use eft::trainer::{forward_transfer_ablation, SequenceResult, TrainConfig};
use eft::{build_arch_for_input, EftConvSpec};

fn describe(name: &str, r: &SequenceResult) {
    let steps: Vec<String> = r
        .summaries
        .iter()
        .skip(1)
        .map(|s| s.steps_to_threshold.map_or("never".into(), |v| v.to_string()))
        .collect();
    let first_ce: Vec<String> = r.summaries.iter().skip(1).map(|s| format!("{:.2}", s.epoch_ce[0])).collect();
    println!(
        "{name:>16}: steps to threshold [{}], first-epoch CE [{}], final TIL {:.3}",
        steps.join(", "),
        first_ce.join(", "),
        r.til.final_average().unwrap_or(0.0)
    );
}

fn main() -> eft::Result<()> {
    let spec = SyntheticSpec { similarity: 0.8, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec, 5)?;
    let arch = build_arch_for_input("smallcnn", spec.shape)?;
    let cfg = TrainConfig { loss_threshold: Some(0.1), ..TrainConfig::desk().scaled_epochs(0.5) };
    let ab = forward_transfer_ablation(&data, &arch, EftConvSpec::serial(8, 16)?, &cfg)?;
    describe("forward transfer", &ab.transfer);
    describe("random init", &ab.random);
    Ok(())
}

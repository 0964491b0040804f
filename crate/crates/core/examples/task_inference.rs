//! Class-incremental inference: every finalized task classifies the input,
//! and the least uncertain (minimum-entropy) task wins.

use eft::data::{generate_synthetic, SyntheticSpec};
use eft::inference::TaskLogits;
use eft::trainer::{run_sequence, TrainConfig};
use eft::{build_arch_for_input, EftConvSpec};

fn main() -> eft::Result<()> {
    let spec = SyntheticSpec::default();
    let data = generate_synthetic(&spec, 3)?;
    let arch = build_arch_for_input("smallcnn", spec.shape)?;
    let result = run_sequence(&data, &arch, EftConvSpec::serial(8, 16)?, &TrainConfig::desk())?;
    let registry = &result.registry;

    for task in &data.tasks {
        let logits = TaskLogits::compute(&task.test_x, registry)?;
        let predicted = logits.predict_tasks();
        let cil = logits.cil();
        let truth = task.global_test_labels();
        let task_hits = predicted.iter().filter(|&&t| t == task.task_id).count();
        let cil_hits = cil.iter().zip(&truth).filter(|(p, y)| p == y).count();
        println!(
            "task {}: task id right {task_hits}/{n}, class right {cil_hits}/{n} ({} forward passes)",
            task.task_id,
            logits.forward_passes,
            n = truth.len()
        );
        let scores = logits.scores(0);
        let shown: Vec<String> = scores.iter().map(|s| format!("τ{}: H={:.3} p={:.3}", s.task_id, s.entropy, s.max_prob)).collect();
        println!("  first sample: {}", shown.join(", "));
    }
    Ok(())
}

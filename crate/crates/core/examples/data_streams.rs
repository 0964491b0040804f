//! Task sequences: seeded class splits, heterogeneous dataset chains and the
//! synthetic generator used for desk-scale runs.

use eft::data::{build_heterogeneous, build_split, generate_synthetic, SyntheticSpec};

fn main() -> eft::Result<()> {
    let split = build_split(100, 10, 1993)?;
    for t in split.tasks.iter().take(3) {
        println!("CIFAR-100/10 task {}: classes {:?}", t.task_id, t.classes);
    }

    let chain = build_heterogeneous(&["svhn", "cifar10", "cifar100"])?;
    for t in &chain.tasks {
        println!("chain task {} = {} ({} classes)", t.task_id, t.source.as_deref().unwrap_or("?"), t.classes.len());
    }

    for similarity in [0.0, 0.8] {
        let spec = SyntheticSpec { similarity, ..SyntheticSpec::default() };
        let data = generate_synthetic(&spec, 2)?;
        let (a, b) = (&data.tasks[0].train_x, &data.tasks[1].train_x);
        let cos = (a * b).sum() / ((a * a).sum().sqrt() * (b * b).sum().sqrt());
        println!(
            "synthetic, similarity {similarity}: {} train / {} test per task, cosine(task 1, task 2) = {cos:.2}",
            data.tasks[0].train_y.len(),
            data.tasks[0].test_y.len()
        );
    }
    Ok(())
}

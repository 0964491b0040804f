use eft::data::{
    batch_order, build_heterogeneous, build_split, generate_synthetic, load_cache, load_cifar_binary, materialize,
    save_cache, SyntheticSpec, TaskData,
};
use eft::EftError;
use ndarray::{Array1, Axis};

/// Nearest-class-mean probe on raw pixels (a linear classifier): fit the
/// class means on the training split, report test accuracy.
fn linear_probe_accuracy(task: &TaskData) -> f64 {
    let classes = task.classes.len();
    let dim = task.train_x.len() / task.train_x.shape()[0];
    let flat = |x: &ndarray::Array4<f64>| x.to_shape((x.shape()[0], dim)).unwrap().to_owned();
    let (tx, ex) = (flat(&task.train_x), flat(&task.test_x));
    let mut means = vec![Array1::<f64>::zeros(dim); classes];
    let mut counts = vec![0.0; classes];
    for (row, &y) in tx.axis_iter(Axis(0)).zip(&task.train_y) {
        means[y] += &row;
        counts[y] += 1.0;
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        *m /= *c;
    }
    let correct = ex
        .axis_iter(Axis(0))
        .zip(&task.test_y)
        .filter(|(row, &y)| {
            let dist = |m: &Array1<f64>| (row - m).mapv(|v| v * v).sum();
            (0..classes).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap() == y
        })
        .count();
    correct as f64 / task.test_y.len() as f64
}

#[test]
fn well_separated_tasks_are_linearly_separable() {
    let data = generate_synthetic(&SyntheticSpec::default(), 5).unwrap();
    for task in &data.tasks {
        let acc = linear_probe_accuracy(task);
        assert!(acc >= 0.99, "task {}: {acc}", task.task_id);
    }
}

#[test]
fn zero_separation_is_near_chance() {
    let spec = SyntheticSpec { sep: 0.0, classes_per_task: 4, samples_per_class: 200, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec, 3).unwrap();
    let mean: f64 = data.tasks.iter().map(linear_probe_accuracy).sum::<f64>() / 3.0;
    assert!((mean - 0.25).abs() < 0.1, "{mean}");
}

#[test]
fn synthetic_generation_is_deterministic_with_fixed_split() {
    let spec = SyntheticSpec { seed: 11, ..SyntheticSpec::default() };
    let a = generate_synthetic(&spec, 3).unwrap();
    assert_eq!(a, generate_synthetic(&spec, 3).unwrap());
    assert_ne!(a.tasks[0].train_x, generate_synthetic(&SyntheticSpec { seed: 12, ..spec }, 3).unwrap().tasks[0].train_x);
    for t in &a.tasks {
        assert_eq!(t.train_y.len(), 4 * 40);
        assert_eq!(t.test_y.len(), 4 * 10);
        assert!(t.train_y.iter().chain(&t.test_y).all(|&y| y < 4));
    }
    a.sequence.validate().unwrap();
}

#[test]
fn similarity_correlates_consecutive_tasks() {
    let centers = |rho: f64| {
        let spec = SyntheticSpec { similarity: rho, noise: 0.0, ..SyntheticSpec::default() };
        let d = generate_synthetic(&spec, 2).unwrap();
        (d.tasks[0].train_x.index_axis(Axis(0), 0).to_owned(), d.tasks[1].train_x.index_axis(Axis(0), 0).to_owned())
    };
    let corr = |rho| {
        let (a, b) = centers(rho);
        (&a * &b).sum() / ((&a * &a).sum().sqrt() * (&b * &b).sum().sqrt())
    };
    assert!(corr(0.9) > 0.7);
    assert!(corr(0.0).abs() < 0.3);
}

#[test]
fn class_splits() {
    let seq = build_split(100, 10, 0).unwrap();
    let mut all: Vec<usize> = seq.tasks.iter().flat_map(|t| t.classes.clone()).collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert_eq!(seq, build_split(100, 10, 0).unwrap());
    assert!(matches!(build_split(10, 3, 0), Err(EftError::InvalidSplit(_))));
}

#[test]
fn heterogeneous_chains() {
    let chain = build_heterogeneous(&["svhn", "cifar10", "cifar100"]).unwrap();
    assert_eq!(chain.tasks.iter().map(|t| t.classes.len()).collect::<Vec<_>>(), vec![10, 10, 100]);
    let reversed = build_heterogeneous(&["cifar100", "cifar10", "svhn"]).unwrap();
    let sources = |s: &eft::data::TaskSequence| s.tasks.iter().map(|t| t.source.clone().unwrap()).collect::<Vec<_>>();
    let mut back = sources(&reversed);
    back.reverse();
    assert_eq!(back, sources(&chain));
    assert_eq!(build_heterogeneous(&["cifar10"]).unwrap().num_tasks(), 1);
    assert!(matches!(build_heterogeneous(&["mystery"]), Err(EftError::UnknownDataset(_))));
}

#[test]
fn batch_order_is_a_pure_function_of_seed_and_epoch() {
    let a = batch_order(103, 16, 5, 2);
    assert_eq!(a, batch_order(103, 16, 5, 2));
    assert_ne!(a, batch_order(103, 16, 5, 3));
    let mut flat: Vec<usize> = a.concat();
    flat.sort_unstable();
    assert_eq!(flat, (0..103).collect::<Vec<_>>());
    assert!(batch_order(17, 8, 0, 0).iter().all(|b| b.len() >= 2));
}

#[test]
fn cache_round_trip() {
    let data = generate_synthetic(&SyntheticSpec { seed: 3, ..SyntheticSpec::default() }, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.tsr");
    let digest = save_cache(&path, &data).unwrap();
    assert_eq!(load_cache(&path).unwrap(), data);
    assert_eq!(save_cache(&dir.path().join("again.tsr"), &data).unwrap(), digest);
}

#[test]
fn cifar100_binary_files_are_split_by_fine_label() {
    let dir = tempfile::tempdir().unwrap();
    // Records: coarse label, fine label, 3072 pixel bytes.
    let write = |name: &str, labels: &[u8]| {
        let mut bytes = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            bytes.extend([0u8, l]);
            bytes.extend(std::iter::repeat_n(i as u8, 3072));
        }
        std::fs::write(dir.path().join(name), bytes).unwrap();
    };
    write("train.bin", &[0, 1, 2, 3, 0, 1, 2, 3]);
    write("test.bin", &[3, 2, 1, 0]);
    let (train, test) = load_cifar_binary(dir.path(), 100).unwrap();
    assert_eq!(train.0.dim(), (8, 3, 32, 32));
    assert_eq!(test.1, vec![3, 2, 1, 0]);

    // A 4-class pool split into two tasks; labels are remapped per task.
    let seq = build_split(4, 2, 0).unwrap();
    let data = materialize(&seq, &train, &test).unwrap();
    for t in &data.tasks {
        assert_eq!(t.train_y.len(), 4);
        assert_eq!(t.test_y.len(), 2);
        let global: Vec<u8> = t.test_y.iter().map(|&y| t.classes[y] as u8).collect();
        let expected: Vec<u8> = test.1.iter().filter(|l| t.classes.contains(l)).map(|&l| l as u8).collect();
        assert_eq!(global, expected);
    }
    assert!(matches!(load_cifar_binary(&dir.path().join("missing"), 100), Err(EftError::MissingCheckpoint(_))));
}

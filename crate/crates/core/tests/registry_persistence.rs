mod common;

use common::random_array;
use eft::backbones::forward;
use eft::cost::count_eft_params;
use eft::{build_arch_for_input, EftConvSpec, EftError, InitPolicy, Registry};

fn registry_with_tasks(n: usize) -> Registry {
    let arch = build_arch_for_input("smallcnn", [3, 8, 8]).unwrap();
    let mut reg = Registry::new(arch, EftConvSpec::serial(8, 16).unwrap(), 42).unwrap();
    for t in 1..=n {
        let policy = if t == 1 { InitPolicy::Random } else { InitPolicy::ForwardTransfer };
        reg.add_task(vec![2 * t - 2, 2 * t - 1], policy).unwrap();
        // Stand-in for training: make every task distinct.
        for (_, mut view) in reg.task_mut(t).unwrap().tensors_mut().unwrap() {
            view.mapv_inplace(|v| v * (1.0 + 0.01 * t as f64));
        }
        reg.finalize_task(t).unwrap();
    }
    reg
}

#[test]
fn lifecycle_errors() {
    let arch = build_arch_for_input("smallcnn", [3, 8, 8]).unwrap();
    let mut reg = Registry::new(arch, EftConvSpec::serial(8, 16).unwrap(), 0).unwrap();
    assert!(matches!(reg.add_task(vec![0], InitPolicy::ForwardTransfer), Err(EftError::NoPreviousTask)));
    assert!(matches!(reg.add_task(vec![], InitPolicy::Random), Err(EftError::InvalidSplit(_))));
    reg.add_task(vec![0, 1], InitPolicy::Random).unwrap();
    assert!(matches!(reg.add_task(vec![2], InitPolicy::Random), Err(EftError::UnfinalizedTask(1))));
    assert!(reg.global_mut().is_ok());
    reg.finalize_task(1).unwrap();
    assert!(matches!(reg.finalize_task(1), Err(EftError::AlreadyFinalized(1))));
    assert!(matches!(reg.task_mut(1), Err(EftError::FrozenParameter(_))));
    assert!(matches!(reg.global_mut(), Err(EftError::FrozenParameter(_))));
    assert!(matches!(reg.task(7), Err(EftError::UnknownTask(7))));
}

#[test]
fn forward_transfer_copies_transforms_but_not_the_head() {
    let mut reg = registry_with_tasks(1);
    reg.add_task(vec![2, 3, 4], InitPolicy::ForwardTransfer).unwrap();
    let (t1, t2) = (reg.task(1).unwrap().clone(), reg.task(2).unwrap().clone());
    assert_eq!(t1.conv, t2.conv);
    assert_eq!(t1.fc, t2.fc);
    assert_eq!(t2.head.as_ref().unwrap().classes(), 3);

    // Mutating the copy leaves the source untouched.
    let before = reg.task_digest(1).unwrap().to_string();
    reg.task_mut(2).unwrap().conv[0].spatial.as_mut().unwrap().fill(0.0);
    assert_eq!(reg.task(1).unwrap().digest(), before);
    reg.verify().unwrap();
}

#[test]
fn random_tasks_differ_and_are_seeded() {
    let build = |seed| {
        let arch = build_arch_for_input("smallcnn", [3, 8, 8]).unwrap();
        let mut reg = Registry::new(arch, EftConvSpec::serial(4, 8).unwrap(), seed).unwrap();
        reg.add_task(vec![0, 1], InitPolicy::Random).unwrap();
        reg.finalize_task(1).unwrap();
        reg.add_task(vec![2, 3], InitPolicy::Random).unwrap();
        reg
    };
    let (a, b) = (build(1), build(1));
    assert_eq!(a.task(2).unwrap(), b.task(2).unwrap());
    assert_ne!(a.task(1).unwrap().conv, a.task(2).unwrap().conv);
    assert_ne!(build(2).task(2).unwrap(), a.task(2).unwrap());
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let reg = registry_with_tasks(3);
    let x = random_array((4, 3, 8, 8), 5);
    let logits: Vec<_> = (1..=3)
        .map(|t| forward(&x, &reg.arch, reg.global(), reg.task(t).unwrap(), &reg.spec).unwrap())
        .collect();

    let dir = tempfile::tempdir().unwrap();
    reg.save(dir.path()).unwrap();
    let loaded = Registry::load(dir.path()).unwrap();
    loaded.verify().unwrap();
    assert_eq!(loaded.global_digest(), reg.global_digest());
    for t in 1..=3 {
        assert_eq!(loaded.task_digest(t), reg.task_digest(t));
        assert_eq!(loaded.task(t).unwrap(), reg.task(t).unwrap());
        let again = forward(&x, &loaded.arch, loaded.global(), loaded.task(t).unwrap(), &loaded.spec).unwrap();
        let same = again.iter().zip(logits[t - 1].iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "task {t} logits changed after reload");
    }
    // Saving the reloaded registry reproduces the archives byte for byte.
    let dir2 = tempfile::tempdir().unwrap();
    loaded.save(dir2.path()).unwrap();
    for file in ["global.tsr", "task_1.tsr", "task_2.tsr", "task_3.tsr"] {
        assert_eq!(
            std::fs::read(dir.path().join(file)).unwrap(),
            std::fs::read(dir2.path().join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn a_single_flipped_byte_is_detected() {
    let reg = registry_with_tasks(2);
    let dir = tempfile::tempdir().unwrap();
    reg.save(dir.path()).unwrap();
    for file in ["task_2.tsr", "global.tsr"] {
        let path = dir.path().join(file);
        let original = std::fs::read(&path).unwrap();
        let mut bytes = original.clone();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        let err = Registry::load(dir.path()).unwrap_err();
        assert!(
            matches!(err, EftError::DigestMismatch { .. } | EftError::CorruptArchive(_)),
            "{file}: {err}"
        );
        std::fs::write(&path, original).unwrap();
    }
    Registry::load(dir.path()).unwrap();
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Registry::load(&dir.path().join("nope")), Err(EftError::MissingCheckpoint(_))));
}

#[test]
fn storage_growth_per_task_matches_accounting() {
    let reg = registry_with_tasks(3);
    let per_task = count_eft_params(&reg.arch, &reg.spec, 2).unwrap();
    for t in 1..=3 {
        let stored: u64 = reg.task(t).unwrap().named_tensors().iter().map(|(_, x)| x.len() as u64).sum();
        assert_eq!(stored, per_task);
        assert_eq!(reg.task(t).unwrap().num_params() as u64, per_task);
    }
}

#[test]
fn truncation_keeps_only_earlier_tasks() {
    let reg = registry_with_tasks(3);
    let first = reg.truncated(1).unwrap();
    assert_eq!(first.num_tasks(), 1);
    assert_eq!(first.task_digest(1), reg.task_digest(1));
    assert_eq!(first.global_digest(), reg.global_digest());
    assert!(reg.truncated(4).is_err());
}

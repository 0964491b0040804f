//! Saves a registry, reloads it, and shows that digests and logits are
//! bit-exact and that a corrupted archive is refused.

use eft::backbones::forward;
use eft::{build_arch_for_input, EftConvSpec, InitPolicy, Registry};
use ndarray::Array4;

fn main() -> anyhow::Result<()> {
    let arch = build_arch_for_input("smallcnn", [3, 8, 8])?;
    let mut reg = Registry::new(arch, EftConvSpec::serial(8, 16)?, 5)?;
    for t in 1..=3 {
        let policy = if t == 1 { InitPolicy::Random } else { InitPolicy::ForwardTransfer };
        reg.add_task(vec![2 * t - 2, 2 * t - 1], policy)?;
        let digest = reg.finalize_task(t)?;
        println!("task {t} finalized, digest {}…", &digest[..16]);
    }

    let dir = std::env::temp_dir().join(format!("eft-checkpoint-{}", std::process::id()));
    reg.save(&dir)?;
    let loaded = Registry::load(&dir)?;
    let x = Array4::from_elem((2, 3, 8, 8), 0.25);
    for t in 1..=3 {
        let a = forward(&x, &reg.arch, reg.global(), reg.task(t)?, &reg.spec)?;
        let b = forward(&x, &loaded.arch, loaded.global(), loaded.task(t)?, &loaded.spec)?;
        println!(
            "task {t}: digest equal {}, logits bit-equal {}",
            loaded.task_digest(t) == reg.task_digest(t),
            a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
        );
    }

    let file = dir.join("task_2.tsr");
    let mut bytes = std::fs::read(&file)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&file, bytes)?;
    match Registry::load(&dir) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("corrupted checkpoint rejected: {e}"),
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

//! An identity-initialised task reproduces the EFT-free base network
//! exactly under serial composition. Parallel composition adds `EFT(·)` on
//! top of the base output, so the same weights shift the logits there.

use eft::backbones::{forward, forward_base};
use eft::{build_arch, CompositionMode, EftConvSpec, InitPolicy, Registry};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> eft::Result<()> {
    let arch = build_arch("smallcnn")?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Array4::from_shape_simple_fn((16, 3, 32, 32), || rng.random_range(-1.0..1.0));

    for mode in [CompositionMode::Serial, CompositionMode::Parallel] {
        let mut reg = Registry::new(arch.clone(), EftConvSpec::new(8, 16, mode)?, 0)?;
        reg.add_task((0..10).collect(), InitPolicy::Identity)?;
        let task = reg.task(1)?;
        let head = task.head.as_ref().expect("classifier head");
        let with = forward(&x, &arch, reg.global(), task, &reg.spec)?;
        let base = forward_base(&x, &arch, reg.global(), head, &reg.spec)?;
        let dev = with.iter().zip(base.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        println!("{mode:?}: max |EFT − base| = {dev:.3e}");
    }
    Ok(())
}

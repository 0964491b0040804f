//! Applies the two EFT branches to a feature map and shows that the
//! composed layer keeps the shape while adding only `9aK + bK` weights.

use eft::eft::{apply_eft_conv, apply_pointwise_branch, apply_spatial_branch};
use eft::{EftConvParams, EftConvSpec};
use ndarray::Array4;

fn main() -> eft::Result<()> {
    let k = 64;
    let f = Array4::from_shape_fn((2, k, 8, 8), |(n, c, y, x)| ((n + c + y * x) % 7) as f64 / 7.0 - 0.5);

    for (a, b) in [(8, 16), (4, 8), (4, 0), (0, 32)] {
        let spec = EftConvSpec::serial(a, b)?;
        let params = EftConvParams::random(&spec, k, 0)?;
        let h = apply_eft_conv(&f, &params, &spec)?;
        println!(
            "{:>6}: {:>5} weights, output {:?}, |H| = {:.3}",
            spec.label(),
            params.num_params(),
            h.dim(),
            h.mapv(|v| v * v).sum().sqrt()
        );
    }

    // H = Hs + Hd when both branches are active.
    let spec = EftConvSpec::serial(8, 16)?;
    let params = EftConvParams::random(&spec, k, 1)?;
    let sum = apply_spatial_branch(&f, &params, 8)? + apply_pointwise_branch(&f, &params, 16)?;
    let h = apply_eft_conv(&f, &params, &spec)?;
    let gap = (&h - &sum).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("max |H − (Hs + Hd)| = {gap:e}");

    // The identity initialisation passes features through unchanged.
    let id = EftConvParams::identity(&spec, k)?;
    println!("identity init reproduces F: {}", apply_eft_conv(&f, &id, &spec)? == f);
    Ok(())
}

//! The feature-distance margin: KL divergence between diagonal Gaussians and
//! the hinge that pushes the current task away from earlier ones.

use eft::margin::{fit_gaussian, joint_loss, kl_diag, margin_loss};
use eft::MarginConfig;
use ndarray::{array, Array2};

fn main() -> eft::Result<()> {
    // Penultimate features of the current batch under τ_t...
    let current = Array2::from_shape_fn((32, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0);
    // ...and the same batch re-encoded by two earlier tasks.
    let near = current.mapv(|v| v + 0.2);
    let far = current.mapv(|v| 3.0 * v - 4.0);

    let p = fit_gaussian(current.view())?;
    let priors = [fit_gaussian(near.view())?, fit_gaussian(far.view())?];
    for (name, q) in ["near", "far"].iter().zip(&priors) {
        println!("KL(P ‖ Q_{name}) = {:.4}", kl_diag(&p, q)?);
    }
    for delta in [0.5, 1.0, 5.0, 50.0] {
        println!("Δ = {delta:>4}: L_M = {:.4}", margin_loss(&p, &priors, delta)?);
    }

    let logits = array![[2.0, -1.0], [0.5, 1.5]];
    let cfg = MarginConfig::default();
    let loss = joint_loss(logits.view(), &[0, 1], &p, &priors, &cfg)?;
    println!("CE {:.4} + λ·L_M ({} × {:.4}) = {:.4}", loss.ce, cfg.lambda, loss.lm, loss.total);
    Ok(())
}

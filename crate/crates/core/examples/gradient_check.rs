//! Central finite differences against backpropagation for every tensor of
//! a small model.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use mtec::mtec::{MtecConfig, MtecModel};
use mtec::nn::{finite_difference, gradient_errors, Parameterized};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> mtec::Result<()> {
    let (n, p, m, l) = (12, 4, 5, 2);
    let cfg = MtecConfig {
        latent_dim: l,
        embed_dim: 6,
        encoder_widths: vec![8],
        recog_widths: vec![5],
        lambda_lasso: 1e-3,
        lambda_ridge: 1e-3,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = MtecModel::glorot(cfg, p, m, &mut rng)?;
    for t in model.tensors_mut() {
        if t.name.ends_with("bias") || t.name == "intercepts" {
            t.data
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let e = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = DMatrix::from_fn(n, m, |_, _| f64::from(u8::from(rng.random_bool(0.4))));
    let eps = DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = vec![1.5; m];

    let (parts, analytic) = model.elbo_loss_and_grad(&e, &y, &eps, &w)?;
    println!(
        "loss {:.5} = recon {:.5} + kl {:.5} + reg {:.5}",
        parts.total, parts.recon, parts.kl, parts.reg
    );
    let numeric = finite_difference(&model, 1e-5, |mm| {
        mm.elbo_loss(&e, &y, &eps, &w)
            .map(|p| p.total)
            .unwrap_or(f64::NAN)
    });
    for (name, err) in gradient_errors(&model, &analytic, &numeric) {
        println!("{name:<28} {err:.2e}");
    }
    Ok(())
}

//! With both moment decays at zero, Adam's step is the sign step.

use plop::tensor::Rng;
use plop::theory::{adam_step, signsgd_update, AdamParams, AdamState};

fn main() -> plop::Result<()> {
    let mut rng = Rng::new(1);
    let grads: Vec<f64> = (0..6).map(|_| rng.gaussian() * 1e-3).collect();
    let hp = AdamParams {
        lr: 0.1,
        beta1: 0.0,
        beta2: 0.0,
        eps: 1e-12,
    };
    let mut params = vec![0.0; grads.len()];
    let adam = adam_step(&mut params, &grads, &mut AdamState::new(grads.len()), &hp)?;
    let sign = signsgd_update(&grads, hp.lr)?;
    for ((g, a), s) in grads.iter().zip(&adam).zip(&sign) {
        println!("grad {g:+.2e}  adam {a:+.6}  sign {s:+.6}");
    }
    Ok(())
}

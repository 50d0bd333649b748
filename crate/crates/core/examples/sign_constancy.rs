//! How long the residual sign stays fixed, as a function of width.

use plop::theory::{estimate_window, run_sign_constancy, LinearNetConfig};

fn main() -> plop::Result<()> {
    for n in [128, 512, 2048] {
        let base = LinearNetConfig {
            n,
            ..Default::default()
        };
        let est = estimate_window(&base, 100, 2000)?;
        let half = LinearNetConfig {
            steps: est.window / 2,
            ..base
        };
        let frac = run_sign_constancy(&half, 100)?;
        println!(
            "n {n:>5}: window {:>4} (lambda {:.2}), median first flip {:>4}, constant over T/2: {:.2}",
            est.window,
            est.lambda_hat,
            est.first_flips[est.first_flips.len() / 2],
            frac
        );
    }
    Ok(())
}

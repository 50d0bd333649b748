//! Feature norms for the trained input and for a fixed random input.

use plop::theory::{run_baseline_flatness, LinearNetConfig};

fn main() -> plop::Result<()> {
    let cfg = LinearNetConfig {
        n: 2048,
        steps: 60,
        ..Default::default()
    };
    let run = run_baseline_flatness(&cfg)?;
    for row in run.trajectory.rows.iter().step_by(10) {
        println!(
            "t {:>3}  gamma {:.4}  baseline {:.4}",
            row.step, row.gamma, row.gamma_baseline
        );
    }
    println!(
        "growth {:.4}, baseline drift {:.2e} (bound {:.2e})",
        run.growth, run.max_drift, run.drift_bound
    );
    Ok(())
}

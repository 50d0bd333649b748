//! Feature norm of a single SignSGD-trained layer against both closed forms.

use plop::theory::{estimate_window, run_theorem1, LinearNetConfig};

fn main() -> plop::Result<()> {
    println!(
        "{:>6} {:>7} {:>12} {:>12} {:>10}",
        "n", "T", "sup dev rec", "sup dev stmt", "R^2"
    );
    for n in [256, 1024, 4096] {
        let base = LinearNetConfig {
            n,
            ..Default::default()
        };
        let window = estimate_window(&base, 40, 2000)?.window;
        let cfg = LinearNetConfig {
            steps: window / 2,
            ..base
        };
        let run = run_theorem1(&cfg, 0.25, Some(window))?;
        println!(
            "{n:>6} {:>7} {:>12.5} {:>12.5} {:>10.6}",
            cfg.steps, run.sup_deviation_recursion, run.sup_deviation_statement, run.quadratic_r2
        );
    }
    Ok(())
}

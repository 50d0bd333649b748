//! Three-layer linear network trained with full-batch Adam.
//!
//! Pass a directory to also write the per-layer trajectories as CSV.

use plop::theory::{run_fig3_experiment, Fig3Config};

fn main() -> plop::Result<()> {
    let run = run_fig3_experiment(&Fig3Config::default())?;
    println!(
        "loss {:.4} -> {:.4}",
        run.loss[0],
        run.loss[run.loss.len() - 1]
    );
    for g in run.growth() {
        println!(
            "layer {}: gamma {:.4} -> {:.4} (x{:.3}), share by step 200 {:.2}, baseline drift {:.1}%",
            g.layer,
            g.gamma_start,
            g.gamma_end,
            1.0 + g.relative_growth,
            g.growth_share_at_checkpoint,
            100.0 * g.baseline_max_drift
        );
    }
    if let Some(dir) = std::env::args().nth(1) {
        for (l, s) in run.layers.iter().enumerate() {
            let path = std::path::Path::new(&dir).join(format!("fig3_layer{l}.csv"));
            std::fs::write(&path, s.to_csv())
                .map_err(|e| plop::Error::InvalidArgument(e.to_string()))?;
        }
    }
    println!("{:?}", run.check());
    Ok(())
}

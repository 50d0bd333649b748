//! Train on arithmetic, then score inputs from three corpora.

use plop::nfn::Convention;
use plop::tensor::Rng;
use plop::transformer::{
    build_model, nfn_map, synthetic_batch, train_toy, SyntheticTask, TrainConfig, TransformerConfig,
};

fn main() -> plop::Result<()> {
    let mut model = build_model(&TransformerConfig::default())?;
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let losses = train_toy(
        &mut model,
        &TrainConfig {
            steps,
            ..Default::default()
        },
    )?;
    println!(
        "loss {:.3} -> {:.3} after {steps} steps",
        losses[0],
        losses[losses.len() - 1]
    );
    for task in [
        SyntheticTask::Arithmetic,
        SyntheticTask::Shuffled,
        SyntheticTask::Letters,
    ] {
        let tokens = synthetic_batch(task, 8, 32, &mut Rng::new(99));
        let (scores, _) = nfn_map(&model, &tokens, 4, 0, Convention::Squared)?;
        let mean = scores.iter().map(|s| s.score as f64).sum::<f64>() / scores.len() as f64;
        println!("{task:>10}: mean NFN {mean:.4}");
    }
    Ok(())
}

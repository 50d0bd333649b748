//! NFN map of a freshly initialized toy transformer.

use plop::nfn::Convention;
use plop::tensor::Rng;
use plop::transformer::{build_model, nfn_map, synthetic_batch, SyntheticTask, TransformerConfig};

fn main() -> plop::Result<()> {
    let model = build_model(&TransformerConfig::default())?;
    let tokens = synthetic_batch(SyntheticTask::Arithmetic, 8, 32, &mut Rng::new(0));
    let (scores, map) = nfn_map(&model, &tokens, 4, 0, Convention::Squared)?;
    for s in &scores {
        println!(
            "{:<24} {:.3}  ({} inputs)",
            s.module_name, s.score, s.n_samples
        );
    }
    print!("{}", map.to_text()?);
    Ok(())
}

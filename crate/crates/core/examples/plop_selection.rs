//! Placement plans from the per-type scores of a 16-layer Llama model on math data.

use plop::acceptance::LLAMA_MATH_SCORES;
use plop::placement::{plan, type_report, Provenance, Strategy, TypeScoreTable};

fn main() -> plop::Result<()> {
    let table = TypeScoreTable::from_means(&LLAMA_MATH_SCORES)?;
    print!("{}", type_report(&table));
    for strategy in [
        Strategy::Plop,
        Strategy::PlopInverse,
        Strategy::Attn,
        Strategy::Mlp,
        Strategy::All,
    ] {
        let k = if strategy == Strategy::All { 7 } else { 3 };
        let p = plan(&table, strategy, k, 16, Provenance::default())?;
        let names: Vec<&str> = p.target_modules.iter().map(|t| t.name()).collect();
        println!("{strategy:>13}: {}", names.join(", "));
    }
    let p = plan(
        &table,
        Strategy::Plop,
        3,
        16,
        Provenance {
            dataset: Some("math".into()),
            ..Default::default()
        },
    )?;
    print!("{}", p.to_json()?);
    Ok(())
}

//! Scores for a few hand-picked weight/input pairs.

use plop::nfn::{nfn_closed_form, nfn_sample, Convention};
use plop::tensor::{gaussian_vector, Matrix, Rng, Vector};

fn main() -> plop::Result<()> {
    let n = 256;
    let mut rng = Rng::new(7);
    let z: Vector = gaussian_vector(n, &mut rng)?;

    let identity = Matrix::identity(n)?;
    println!(
        "identity:        {:.4}",
        nfn_sample(&identity, &z, 16, &mut rng)?
    );

    // A rank-1 weight whose row is the input itself.
    let row = z.as_slice().to_vec();
    let aligned = Matrix::new(1, n, row)?;
    println!(
        "aligned rank-1:  {:.1}  (n = {n})",
        nfn_sample(&aligned, &z, 64, &mut rng)?
    );

    let w = Matrix::<f32>::from_fn(n, n, |_, _| rng.gaussian())?;
    let mc = nfn_sample(&w, &z, 256, &mut rng)?;
    let cf = nfn_closed_form(&w, &z, Convention::Squared)?;
    println!("gaussian:        {mc:.4} (256 draws), {cf:.4} (closed form)");
    println!(
        "unsquared:       {:.4}",
        nfn_closed_form(&w, &z, Convention::Unsquared)?
    );
    Ok(())
}

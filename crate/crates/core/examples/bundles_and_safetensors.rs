use plop::acceptance::hand_built_safetensors;
use plop::bundle::{bundle_digest, parse_safetensors, read_bundle, write_bundle, Tensor};
use plop::placement::ModuleType;
use plop::tensor::Matrix;

fn main() -> plop::Result<()> {
    let dir = std::env::temp_dir().join("plop-bundle-example");
    std::fs::create_dir_all(&dir).map_err(|e| plop::Error::InvalidArgument(e.to_string()))?;
    let w = Matrix::<f32>::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.25)?;
    let tensors = vec![
        Tensor::from_matrix("layers.0.attn.q_proj", &w)?
            .with_module(Some(ModuleType::Query), Some(0)),
        Tensor::new("final_norm", vec![4], vec![1.0; 4])?,
    ];
    let stem = dir.join("demo");
    write_bundle(&stem, &tensors)?;
    let manifest = dir.join("demo.manifest.json");
    println!("{}", std::fs::read_to_string(&manifest).unwrap_or_default());
    println!("digest {}", bundle_digest(&manifest)?);
    assert_eq!(read_bundle(&manifest)?, tensors);

    let (bytes, _) = hand_built_safetensors();
    for t in parse_safetensors(&bytes)? {
        println!("{} {:?} {:?}", t.name, t.shape, t.data);
    }
    Ok(())
}

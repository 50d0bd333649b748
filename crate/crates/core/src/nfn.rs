//! Normalized feature norm (NFN) scoring.
//!
//! For a weight `W` and an input `z`, the score compares `||W z||` with the
//! norm of `W` applied to random inputs of the same dimension and norm:
//!
//! ```text
//! score(W, z) = ||W z||^2 / mean_k ||W z~_k||^2      (squared, default)
//! score(W, z) = ||W z||   / mean_k ||W z~_k||        (unsquared)
//! ```
//!
//! where each `z~_k` is an iid Gaussian vector rescaled to `||z||`. A score
//! near 1 means `W` treats `z` like a random direction; larger scores mean
//! the weight is aligned with its input.
//!
//! Since `z~` is uniform on the sphere of radius `||z||`,
//! `E ||W z~||^2 = ||z||^2 ||W||_F^2 / n_in`, which gives the closed form
//! used by [`nfn_closed_form`]:
//! `n_in ||W z||^2 / (||W||_F^2 ||z||^2)`.

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gaussian_vector, rescale_to_norm, Element, Matrix, Rng, Vector};

/// Baseline draws per input unless configured otherwise.
pub const DEFAULT_BASELINE_DRAWS: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    #[default]
    Squared,
    Unsquared,
}

impl std::str::FromStr for Convention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Self::Squared),
            "unsquared" => Ok(Self::Unsquared),
            other => Err(Error::InvalidArgument(format!(
                "unknown convention {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Convention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Squared => "squared",
            Self::Unsquared => "unsquared",
        })
    }
}

/// Inputs seen by one module: one vector per token position per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationBatch {
    pub module_name: String,
    inputs: Vec<Vector>,
    input_dim: usize,
}

impl ActivationBatch {
    pub fn new(module_name: impl Into<String>, inputs: Vec<Vector>) -> Result<Self> {
        let module_name = module_name.into();
        let input_dim = inputs
            .first()
            .map(Vector::dim)
            .ok_or_else(|| Error::InvalidShape(format!("{module_name}: empty activation batch")))?;
        if let Some(bad) = inputs.iter().find(|v| v.dim() != input_dim) {
            return Err(Error::DimensionMismatch {
                op: "ActivationBatch::new",
                expected: input_dim,
                actual: bad.dim(),
            });
        }
        Ok(Self {
            module_name,
            inputs,
            input_dim,
        })
    }

    pub fn inputs(&self) -> &[Vector] {
        &self.inputs
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfnScore {
    pub module_name: String,
    pub score: f32,
    /// Inputs that contributed to the mean.
    pub n_samples: usize,
    /// Zero-norm inputs (padding) that were skipped.
    pub n_skipped: usize,
    pub mean_feature_sqnorm: f64,
    pub mean_baseline_sqnorm: f64,
    pub m_baseline_draws: usize,
    pub convention: Convention,
}

/// Numerator and denominator of a single-input score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleTerms {
    pub feature_sqnorm: f64,
    pub baseline_sqnorm: f64,
    pub score: f64,
}

/// `m` iid Gaussian vectors, each rescaled to `||z_in||`.
pub fn baseline_inputs<T: Element>(
    z_in: &Vector<T>,
    m: usize,
    rng: &mut Rng,
) -> Result<Vec<Vector<T>>> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "need at least one baseline draw".into(),
        ));
    }
    let norm = z_in.norm_l2();
    if norm == 0.0 {
        return Err(Error::ZeroInput("baseline needs a nonzero input".into()));
    }
    (0..m)
        .map(|_| {
            let g = gaussian_vector::<T>(z_in.dim(), rng)?;
            rescale_to_norm(&g, norm)
        })
        .collect()
}

/// Score terms for one input under `convention`.
pub fn nfn_sample_terms<T: Element>(
    w: &Matrix<T>,
    z_in: &Vector<T>,
    m: usize,
    rng: &mut Rng,
    convention: Convention,
) -> Result<SampleTerms> {
    if w.cols() != z_in.dim() {
        return Err(Error::DimensionMismatch {
            op: "nfn_sample",
            expected: w.cols(),
            actual: z_in.dim(),
        });
    }
    let baselines = baseline_inputs(z_in, m, rng)?;
    let feature_sqnorm = w.image_sq_norm(z_in.as_slice());
    let draws: Vec<f64> = baselines
        .iter()
        .map(|b| w.image_sq_norm(b.as_slice()))
        .collect();
    let baseline_sqnorm = draws.iter().sum::<f64>() / m as f64;
    if baseline_sqnorm == 0.0 {
        return Err(Error::DegenerateBaseline);
    }
    let score = match convention {
        Convention::Squared => feature_sqnorm / baseline_sqnorm,
        Convention::Unsquared => {
            let mean_norm = draws.iter().map(|d| d.sqrt()).sum::<f64>() / m as f64;
            feature_sqnorm.sqrt() / mean_norm
        }
    };
    Ok(SampleTerms {
        feature_sqnorm,
        baseline_sqnorm,
        score,
    })
}

/// Squared-convention score for a single input.
pub fn nfn_sample<T: Element>(
    w: &Matrix<T>,
    z_in: &Vector<T>,
    m: usize,
    rng: &mut Rng,
) -> Result<f32> {
    Ok(nfn_sample_terms(w, z_in, m, rng, Convention::Squared)?.score as f32)
}

/// Mean score over a batch. Zero-norm inputs are skipped and counted.
///
/// Input `i` draws its baselines from `root.substream_indexed(module, i)`,
/// so the result does not depend on how samples are scheduled.
pub fn nfn_dataset(
    w: &Matrix,
    batch: &ActivationBatch,
    m: usize,
    root: &Rng,
    convention: Convention,
) -> Result<NfnScore> {
    if w.cols() != batch.input_dim() {
        return Err(Error::DimensionMismatch {
            op: "nfn_dataset",
            expected: w.cols(),
            actual: batch.input_dim(),
        });
    }
    let per_sample: Vec<Option<SampleTerms>> = batch
        .inputs()
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            if z.sq_norm() == 0.0 {
                return Ok(None);
            }
            let mut rng = root.substream_indexed(&batch.module_name, i as u64);
            nfn_sample_terms(w, z, m, &mut rng, convention).map(Some)
        })
        .collect::<Result<_>>()?;

    let used: Vec<&SampleTerms> = per_sample.iter().flatten().collect();
    let n_skipped = per_sample.len() - used.len();
    if used.is_empty() {
        return Err(Error::ZeroInput(format!(
            "{}: all {} inputs have zero norm",
            batch.module_name, n_skipped
        )));
    }
    let n = used.len() as f64;
    let mean = |f: fn(&SampleTerms) -> f64| used.iter().map(|t| f(t)).sum::<f64>() / n;
    Ok(NfnScore {
        module_name: batch.module_name.clone(),
        score: mean(|t| t.score) as f32,
        n_samples: used.len(),
        n_skipped,
        mean_feature_sqnorm: mean(|t| t.feature_sqnorm),
        mean_baseline_sqnorm: mean(|t| t.baseline_sqnorm),
        m_baseline_draws: m,
        convention,
    })
}

/// Scores each module's inputs against its weight, in parallel over
/// modules. Results follow the order of `modules`.
pub fn score_modules(
    modules: &[(String, &Matrix)],
    batches: &IndexMap<String, ActivationBatch>,
    m: usize,
    seed: u64,
    convention: Convention,
) -> Result<Vec<NfnScore>> {
    let root = Rng::new(seed);
    modules
        .par_iter()
        .map(|(name, w)| {
            let batch = batches
                .get(name)
                .ok_or_else(|| Error::UnresolvedModules(vec![name.clone()]))?;
            nfn_dataset(w, batch, m, &root, convention)
        })
        .collect()
}

/// Large-width approximation of the score without random draws.
pub fn nfn_closed_form<T: Element>(
    w: &Matrix<T>,
    z_in: &Vector<T>,
    convention: Convention,
) -> Result<f64> {
    if w.cols() != z_in.dim() {
        return Err(Error::DimensionMismatch {
            op: "nfn_closed_form",
            expected: w.cols(),
            actual: z_in.dim(),
        });
    }
    let fro_sq = w.frobenius().powi(2);
    let z_sq = z_in.sq_norm();
    if fro_sq == 0.0 || z_sq == 0.0 {
        return Err(Error::ZeroInput("closed form needs nonzero W and z".into()));
    }
    let squared = w.cols() as f64 * w.image_sq_norm(z_in.as_slice()) / (fro_sq * z_sq);
    Ok(match convention {
        Convention::Squared => squared,
        Convention::Unsquared => squared.sqrt(),
    })
}

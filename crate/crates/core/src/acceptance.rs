//! The acceptance suite: thirteen end-to-end checks with tolerances and
//! runtime budgets. Shared by `plop selftest` and the `acceptance` test
//! target.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::bundle::{
    decode_bundle, encode_bundle, parse_safetensors, read_bundle, write_bundle, Tensor,
};
use crate::commands::{self, CaptureOptions, MapOptions, PlanOptions, ScoreOptions};
use crate::error::Result;
use crate::nfn::{nfn_closed_form, nfn_sample, Convention};
use crate::placement::{plan, select_lowest, ModuleType, Provenance, Strategy, TypeScoreTable};
use crate::report::{ExportFormat, MapMetadata, NfnMap};
use crate::tensor::{gaussian_vector, Matrix, Rng, Vector};
use crate::theory::{
    adam_step, estimate_window, run_baseline_flatness, run_fig3_experiment, run_sign_constancy,
    run_theorem1, signsgd_update, trial_seed, AdamParams, AdamState, Fig3Config, LinearNetConfig,
    SingleLayerSim, StepMode, Trajectory,
};
use crate::transformer::{
    build_model, nfn_map, synthetic_batch, train_toy, SyntheticTask, TrainConfig, TransformerConfig,
};

/// The per-type scores printed for a 16-layer Llama model on math data.
pub const LLAMA_MATH_SCORES: [(ModuleType, f64); 7] = [
    (ModuleType::Query, 2.58),
    (ModuleType::Key, 2.63),
    (ModuleType::Value, 0.97),
    (ModuleType::OutProj, 0.90),
    (ModuleType::GateProj, 1.40),
    (ModuleType::DownProj, 1.05),
    (ModuleType::UpProj, 1.11),
];

pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    pub budget: Duration,
    check: fn() -> Result<(bool, String)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CriterionReport {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    /// The check itself passed, ignoring the runtime budget.
    pub check_passed: bool,
    pub detail: String,
    pub elapsed_secs: f64,
    pub budget_secs: f64,
}

impl CriterionReport {
    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let over = if self.check_passed && !self.passed {
            " over budget"
        } else {
            ""
        };
        format!(
            "[{status}] {:02} {} ({:.2}s / {}s{over}): {}",
            self.id, self.name, self.elapsed_secs, self.budget_secs, self.detail
        )
    }
}

impl Criterion {
    pub fn run(&self) -> CriterionReport {
        let start = Instant::now();
        let (check_passed, detail) = match (self.check)() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let elapsed = start.elapsed();
        CriterionReport {
            id: self.id,
            name: self.name,
            passed: check_passed && elapsed <= self.budget,
            check_passed,
            detail,
            elapsed_secs: elapsed.as_secs_f64(),
            budget_secs: self.budget.as_secs_f64(),
        }
    }
}

pub fn criteria() -> Vec<Criterion> {
    let c = |id, name, secs, check| Criterion {
        id,
        name,
        budget: Duration::from_secs(secs),
        check,
    };
    vec![
        c(
            1,
            "identity and orthogonal weights score 1",
            5,
            identity_and_orthogonal,
        ),
        c(2, "scale invariance", 5, scale_invariance),
        c(3, "closed form matches Monte Carlo", 30, closed_form_vs_mc),
        c(4, "placement on the Llama math table", 1, llama_placement),
        c(5, "SignSGD one-step identities", 10, one_step_identities),
        c(
            6,
            "quadratic growth and shrinking deviation",
            120,
            quadratic_growth,
        ),
        c(7, "sign constancy over half the window", 60, sign_constancy),
        c(8, "random-input baseline stays flat", 60, baseline_flat),
        c(9, "three-layer Adam run", 120, three_layer_run),
        c(10, "Adam without moments is SignSGD", 5, adam_is_signsgd),
        c(
            11,
            "capture, score and plan are deterministic",
            30,
            pipeline_determinism,
        ),
        c(12, "bundle, safetensors and CSV formats", 5, formats),
        c(13, "task similarity", 300, task_similarity),
    ]
}

/// Runs the selected criteria (all when `ids` is empty), calling `report`
/// after each one.
pub fn run(ids: &[u8], mut report: impl FnMut(&CriterionReport)) -> Vec<CriterionReport> {
    criteria()
        .iter()
        .filter(|c| ids.is_empty() || ids.contains(&c.id))
        .map(|c| {
            let r = c.run();
            report(&r);
            r
        })
        .collect()
}

fn householder_orthogonal(n: usize, reflections: usize, rng: &mut Rng) -> Result<Matrix> {
    let mut w: Vec<f64> = (0..n * n)
        .map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    for _ in 0..reflections {
        let v: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let vv: f64 = v.iter().map(|x| x * x).sum();
        // W <- (I - 2 v v^T / v^T v) W
        let mut vt_w = vec![0.0; n];
        for (i, vi) in v.iter().enumerate() {
            for (acc, x) in vt_w.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                *acc += vi * x;
            }
        }
        for (i, vi) in v.iter().enumerate() {
            for (x, a) in w[i * n..(i + 1) * n].iter_mut().zip(&vt_w) {
                *x -= 2.0 * vi * a / vv;
            }
        }
    }
    Matrix::new(n, n, w.iter().map(|x| *x as f32).collect())
}

fn identity_and_orthogonal() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for n in [64, 1024] {
        let mut rng = Rng::new(1).substream_indexed("orthogonal", n as u64);
        let ortho = householder_orthogonal(n, 4, &mut rng)?;
        let ident = Matrix::identity(n)?;
        for i in 0..100 {
            let z: Vector = gaussian_vector(n, &mut rng)?;
            for w in [&ident, &ortho] {
                let s = nfn_sample(w, &z, 4, &mut Rng::new(i))?;
                worst = worst.max((s as f64 - 1.0).abs());
            }
        }
    }
    Ok((worst <= 1e-5, format!("max |score - 1| = {worst:.2e}")))
}

fn scale_invariance() -> Result<(bool, String)> {
    let mut rng = Rng::new(2);
    let w = Matrix::<f64>::from_fn(96, 128, |_, _| rng.gaussian())?;
    let mut equal = 0;
    let mut total = 0;
    for i in 0..50u64 {
        let z: Vector<f64> = gaussian_vector(128, &mut rng)?;
        let reference = nfn_sample(&w, &z, 4, &mut Rng::new(i))?;
        for c in [1e-3, 1.0, 1e3] {
            let s = nfn_sample(&w.scaled(c), &z, 4, &mut Rng::new(i))?;
            total += 1;
            equal += usize::from(s.to_bits() == reference.to_bits());
        }
    }
    let mut selections_ok = true;
    for t in 0..100 {
        let means: Vec<(ModuleType, f64)> = if t == 0 {
            LLAMA_MATH_SCORES.to_vec()
        } else {
            ModuleType::ALL
                .iter()
                .map(|&ty| (ty, rng.uniform(0.5, 3.0)))
                .collect()
        };
        let table = TypeScoreTable::from_means(&means)?;
        let base = select_lowest(&table, 3)?;
        for c in [1e-3, 1.0, 1e3] {
            selections_ok &= select_lowest(&table.scaled(c), 3)? == base;
        }
    }
    Ok((
        equal == total && selections_ok,
        format!(
            "{equal}/{total} scores bit-equal under scaling; selections invariant: {selections_ok}"
        ),
    ))
}

fn closed_form_vs_mc() -> Result<(bool, String)> {
    let n = 1024;
    let errors = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::new(3).substream_indexed("cf", i);
            let w = Matrix::<f32>::from_fn(n, n, |_, _| rng.gaussian())?;
            let z: Vector = gaussian_vector(n, &mut rng)?;
            let cf = nfn_closed_form(&w, &z, Convention::Squared)?;
            let mc = nfn_sample(&w, &z, 256, &mut rng)? as f64;
            Ok((cf - mc).abs() / cf)
        })
        .collect::<Result<Vec<f64>>>()?;
    let worst = errors.iter().copied().fold(0.0, f64::max);
    Ok((
        worst <= 0.05,
        format!("max relative error {worst:.4} over 20 draws"),
    ))
}

fn llama_placement() -> Result<(bool, String)> {
    let table = TypeScoreTable::from_means(&LLAMA_MATH_SCORES)?;
    let low = plan(&table, Strategy::Plop, 3, 16, Provenance::default())?;
    let high = plan(&table, Strategy::PlopInverse, 3, 16, Provenance::default())?;
    use ModuleType::*;
    let ok = low.target_modules == [OutProj, Value, DownProj]
        && high.target_modules == [Key, Query, GateProj]
        && low.alpha == 32;
    let names = |v: &[ModuleType]| v.iter().map(|t| t.name()).collect::<Vec<_>>().join(", ");
    Ok((
        ok,
        format!(
            "plop [{}], plop_inverse [{}], alpha {}",
            names(&low.target_modules),
            names(&high.target_modules),
            low.alpha
        ),
    ))
}

/// Largest violations of the one-step increments of `gamma` and `alpha`.
fn increment_errors(traj: &Trajectory, beta: f64, n: f64) -> (f64, f64) {
    let (mut dg, mut da) = (0.0f64, 0.0f64);
    for pair in traj.rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let expected = beta * beta - 2.0 * beta * a.chi * a.alpha / n;
        dg = dg.max(((b.gamma - a.gamma) - expected).abs());
        let alpha_err = ((b.alpha - a.alpha) + beta * a.chi * n).abs() / (a.alpha.abs() + beta * n);
        da = da.max(alpha_err);
    }
    (dg, da)
}

fn one_step_identities() -> Result<(bool, String)> {
    let n = 1024;
    let mut runs: Vec<LinearNetConfig> = (0..5)
        .map(|s| LinearNetConfig {
            n,
            seed: trial_seed(5, "identity", s),
            ..LinearNetConfig::default()
        })
        .collect();
    runs.push(LinearNetConfig {
        mode: StepMode::FullMatrix,
        ..runs[0].clone()
    });
    let mut worst = (0.0f64, 0.0f64);
    for cfg in &runs {
        let mut sim = SingleLayerSim::new(cfg)?;
        let traj = sim.run(150)?;
        let (dg, da) = increment_errors(&traj, sim.beta(), n as f64);
        worst = (worst.0.max(dg), worst.1.max(da));
    }
    Ok((
        worst.0 <= 1e-6 && worst.1 <= 1e-9,
        format!(
            "max gamma increment error {:.2e} (tol 1e-6); max relative alpha increment error {:.2e} (tol 1e-9)",
            worst.0, worst.1
        ),
    ))
}

/// Window estimate and the config for half of it at width `n`.
fn half_window_config(n: usize) -> Result<(usize, LinearNetConfig)> {
    let base = LinearNetConfig {
        n,
        ..LinearNetConfig::default()
    };
    let w = estimate_window(&base, 100, 2000)?;
    Ok((
        w.window,
        LinearNetConfig {
            steps: w.window / 2,
            ..base
        },
    ))
}

fn quadratic_growth() -> Result<(bool, String)> {
    let mut devs = Vec::new();
    let mut r2_at_largest = f64::INFINITY;
    for n in [256, 1024, 4096] {
        let (window, cfg) = half_window_config(n)?;
        let runs = (0..10)
            .into_par_iter()
            .map(|s| {
                run_theorem1(
                    &cfg.with_seed(trial_seed(0, "check", s)),
                    0.25,
                    Some(window),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        devs.push(runs.iter().map(|r| r.sup_deviation_recursion).sum::<f64>() / runs.len() as f64);
        if n == 4096 {
            r2_at_largest = runs
                .iter()
                .map(|r| r.quadratic_r2)
                .fold(f64::INFINITY, f64::min);
        }
    }
    let decreasing = devs.windows(2).all(|w| w[1] < w[0]);
    Ok((
        decreasing && r2_at_largest >= 0.99,
        format!(
            "mean sup deviation {:.4} / {:.4} / {:.4} at n = 256 / 1024 / 4096; min R^2 at 4096 {r2_at_largest:.6}",
            devs[0], devs[1], devs[2]
        ),
    ))
}

fn sign_constancy() -> Result<(bool, String)> {
    let (window, cfg) = half_window_config(1024)?;
    let frac = run_sign_constancy(&cfg, 100)?;
    Ok((
        frac >= 0.95,
        format!(
            "window {window}, T {}: {:.0}/100 trials constant",
            cfg.steps,
            frac * 100.0
        ),
    ))
}

fn baseline_flat() -> Result<(bool, String)> {
    let (_, cfg) = half_window_config(4096)?;
    let runs = (0..10)
        .into_par_iter()
        .map(|s| run_baseline_flatness(&cfg.with_seed(trial_seed(0, "check", s))))
        .collect::<Result<Vec<_>>>()?;
    let ok = runs
        .iter()
        .filter(|r| r.flat() && r.growth >= 10.0 * r.max_drift)
        .count();
    let worst_ratio = runs
        .iter()
        .map(|r| r.max_drift / r.drift_bound)
        .fold(0.0, f64::max);
    Ok((
        ok == runs.len(),
        format!("T {}: {ok}/10 runs flat with growth >= 10x drift; worst drift / bound {worst_ratio:.3}", cfg.steps),
    ))
}

fn three_layer_run() -> Result<(bool, String)> {
    let run = run_fig3_experiment(&Fig3Config::default())?;
    let check = run.check();
    let parts: Vec<String> = run
        .growth()
        .iter()
        .map(|g| {
            format!(
                "L{} growth {:.3} share@{} {:.2} baseline drift {:.3}",
                g.layer,
                g.relative_growth,
                run.config.checkpoint,
                g.growth_share_at_checkpoint,
                g.baseline_max_drift
            )
        })
        .collect();
    let failed: Vec<&str> = [
        (check.all_layers_grow, "growth"),
        (check.baselines_flat, "baseline flatness"),
        (check.early_growth, "early growth"),
        (check.input_grows_less_than_output, "layer ordering"),
    ]
    .iter()
    .filter(|(ok, _)| !ok)
    .map(|(_, name)| *name)
    .collect();
    let mut detail = parts.join("; ");
    if !failed.is_empty() {
        detail.push_str(&format!("; failed: {}", failed.join(", ")));
    }
    Ok((check.passed(), detail))
}

fn adam_is_signsgd() -> Result<(bool, String)> {
    let params = AdamParams {
        lr: 1e-3,
        beta1: 0.0,
        beta2: 0.0,
        eps: 1e-12,
    };
    let mut rng = Rng::new(10);
    let mut mismatches = 0;
    for i in 0..100 {
        let len = 1 + rng.below(256);
        let scale = 10f64.powi(i % 13 - 6);
        let grads: Vec<f64> = (0..len).map(|_| rng.gaussian() * scale).collect();
        let mut p = vec![0.0; len];
        let mut state = AdamState::new(len);
        let adam = adam_step(&mut p, &grads, &mut state, &params)?;
        let sign = signsgd_update(&grads, params.lr)?;
        mismatches += adam
            .iter()
            .zip(&sign)
            .filter(|(a, s)| a.signum() != s.signum())
            .count();
    }
    Ok((
        mismatches == 0,
        format!("{mismatches} sign mismatches over 100 tensors"),
    ))
}

/// File names and contents.
type Snapshot = Vec<(String, Vec<u8>)>;

/// All files under `dir`, sorted by name.
fn snapshot(dir: &Path) -> Result<Snapshot> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| crate::Error::io(dir, e))? {
        let path = entry.map_err(|e| crate::Error::io(dir, e))?.path();
        let bytes = fs::read(&path).map_err(|e| crate::Error::io(&path, e))?;
        out.push((
            path.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            bytes,
        ));
    }
    out.sort();
    Ok(out)
}

fn pipeline_determinism() -> Result<(bool, String)> {
    let tmp = tempfile::tempdir().map_err(|e| crate::Error::io(Path::new("tempdir"), e))?;
    let dir = tmp.path().join("run");
    let pipeline = || -> Result<(Snapshot, NfnMap)> {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
        }
        commands::capture(&CaptureOptions {
            output_dir: dir.clone(),
            ..CaptureOptions::default()
        })?;
        commands::score(&ScoreOptions {
            weights: dir.join("weights.manifest.json"),
            activations: dir.join("activations.manifest.json"),
            output_dir: dir.clone(),
            ..ScoreOptions::default()
        })?;
        commands::plan_command(&PlanOptions {
            scores: dir.join("scores.json"),
            output_dir: dir.clone(),
            ..PlanOptions::default()
        })?;
        let (map, _) = commands::map_command(&MapOptions {
            scores: dir.join("scores.json"),
            formats: ExportFormat::ALL.to_vec(),
            output_dir: dir.clone(),
        })?;
        Ok((snapshot(&dir)?, map))
    };
    let mut results = Vec::new();
    for workers in [1, 1, 8] {
        results.push(commands::in_pool(Some(workers), pipeline)??);
    }
    let identical = results.windows(2).all(|w| w[0].0 == w[1].0);
    let map = &results[0].1;
    let shape_ok = map.layers == 2 && map.types.len() == 7;
    let values_ok = map
        .scores
        .iter()
        .flatten()
        .all(|s| s.is_finite() && *s > 0.0);
    Ok((
        identical && shape_ok && values_ok,
        format!(
            "{} files identical across runs and pools {{1, 8}}: {identical}; map {}x{}, all finite and positive: {values_ok}",
            results[0].0.len(),
            map.layers,
            map.types.len()
        ),
    ))
}

/// Name, shape and values of a tensor.
pub type TensorContents = (String, Vec<usize>, Vec<f32>);

/// A safetensors file assembled byte by byte, with the tensors it holds.
pub fn hand_built_safetensors() -> (Vec<u8>, Vec<TensorContents>) {
    let a: Vec<f32> = vec![1.0, -2.5, 3.25, 0.0, 1e-3, -7.0];
    let b_half: [u16; 2] = [0x3c00, 0xc000]; // 1.0, -2.0
    let header = r#"{"__metadata__":{"format":"pt"},"a.weight":{"dtype":"F32","shape":[2,3],"data_offsets":[0,24]},"b":{"dtype":"F16","shape":[2],"data_offsets":[24,28]}}"#;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header.as_bytes());
    for x in &a {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    for h in b_half {
        bytes.extend_from_slice(&h.to_le_bytes());
    }
    let expected = vec![
        ("a.weight".to_string(), vec![2, 3], a),
        ("b".to_string(), vec![2], vec![1.0, -2.0]),
    ];
    (bytes, expected)
}

fn formats() -> Result<(bool, String)> {
    let mut rng = Rng::new(12);
    let tensors = vec![
        Tensor::from_matrix(
            "layers.0.attn.q_proj",
            &Matrix::<f32>::from_fn(4, 3, |_, _| rng.gaussian())?,
        )?
        .with_module(Some(ModuleType::Query), Some(0)),
        Tensor::new(
            "norm",
            vec![5],
            (0..5).map(|_| rng.gaussian() as f32).collect(),
        )?,
        Tensor::new(
            "cube",
            vec![2, 2, 2],
            (0..8).map(|i| i as f32 * 0.5).collect(),
        )?,
    ];
    let tmp = tempfile::tempdir().map_err(|e| crate::Error::io(Path::new("tempdir"), e))?;
    let stem = tmp.path().join("bundle");
    write_bundle(&stem, &tensors)?;
    let read = read_bundle(&tmp.path().join("bundle.manifest.json"))?;
    let disk_manifest = fs::read_to_string(tmp.path().join("bundle.manifest.json"))
        .map_err(|e| crate::Error::io(&stem, e))?;
    let disk_blob =
        fs::read(tmp.path().join("bundle.bin")).map_err(|e| crate::Error::io(&stem, e))?;
    let (manifest, blob) = encode_bundle(&read, "bundle.bin")?;
    let bundle_ok = read == tensors
        && manifest == disk_manifest
        && blob == disk_blob
        && decode_bundle(&manifest, &blob)? == tensors;

    let (bytes, expected) = hand_built_safetensors();
    let parsed = parse_safetensors(&bytes)?;
    let st_ok = parsed.len() == expected.len()
        && parsed
            .iter()
            .zip(&expected)
            .all(|(t, (name, shape, data))| {
                &t.name == name && &t.shape == shape && &t.data == data
            });

    let scores: Vec<Vec<f32>> = (0..4)
        .map(|_| (0..7).map(|_| rng.uniform(0.3, 4.0) as f32).collect())
        .collect();
    let map = NfnMap::new(ModuleType::ALL.to_vec(), scores, MapMetadata::default())?;
    let back = NfnMap::from_csv(&map.to_csv())?;
    let sig6 = |m: &NfnMap| -> Vec<String> {
        m.scores
            .iter()
            .flatten()
            .map(|s| format!("{s:.5e}"))
            .collect()
    };
    let csv_ok = back.types == map.types && sig6(&back) == sig6(&map);
    Ok((
        bundle_ok && st_ok && csv_ok,
        format!("bundle round trip {bundle_ok}; safetensors {st_ok}; csv {csv_ok}"),
    ))
}

fn task_similarity() -> Result<(bool, String)> {
    let seeds = 0..5u64;
    let per_seed = seeds
        .into_par_iter()
        .map(|seed| {
            let mut model = build_model(&TransformerConfig {
                seed,
                ..TransformerConfig::default()
            })?;
            train_toy(
                &mut model,
                &TrainConfig {
                    seed,
                    ..TrainConfig::default()
                },
            )?;
            let eval = Rng::new(seed).substream("eval");
            let mean = |task: SyntheticTask| -> Result<f64> {
                let tokens = synthetic_batch(task, 8, 32, &mut eval.substream(&task.to_string()));
                let (scores, _) = nfn_map(&model, &tokens, 4, seed, Convention::Squared)?;
                Ok(scores.iter().map(|s| s.score as f64).sum::<f64>() / scores.len() as f64)
            };
            Ok((
                mean(SyntheticTask::Arithmetic)?,
                mean(SyntheticTask::Shuffled)?,
            ))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let a = per_seed.iter().map(|p| p.0).sum::<f64>() / per_seed.len() as f64;
    let b = per_seed.iter().map(|p| p.1).sum::<f64>() / per_seed.len() as f64;
    Ok((
        a > b,
        format!("mean NFN on task A {a:.4}, on task B (shuffled A) {b:.4}"),
    ))
}

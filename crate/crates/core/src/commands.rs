//! The operations behind each CLI subcommand. Every command writes its
//! outputs under `output_dir` and echoes its full configuration into the
//! JSON it produces.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::bundle::{
    bundle_digest, bundle_paths, read_bundle, read_safetensors, write_bundle, Tensor,
};
use crate::error::{Error, Result};
use crate::nfn::{score_modules, ActivationBatch, Convention, NfnScore, DEFAULT_BASELINE_DRAWS};
use crate::placement::{
    aggregate_by_type, plan, type_report, Provenance, Strategy, TypeScoreTable, DEFAULT_K,
};
use crate::report::{export_map, ExportFormat, MapMetadata, NfnMap};
use crate::tensor::{Matrix, Rng};
use crate::theory::{
    estimate_window, run_baseline_flatness, run_fig3_experiment, run_theorem1,
    sign_constancy_trials, trial_seed, AdamParams, Fig3Config, InitScheme, LinearNetConfig,
    TargetScale,
};
use crate::transformer::{
    build_model, forward_with_capture, synthetic_batch, train_toy, SyntheticTask, TrainConfig,
    TransformerConfig,
};

/// What a command produced and whether its checks passed.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// False when a lab experiment or the self-test missed a threshold.
    pub passed: bool,
    pub summary: String,
}

impl Outcome {
    fn ok(files: Vec<PathBuf>, summary: String) -> Self {
        Self {
            files,
            passed: true,
            summary,
        }
    }
}

/// Runs `f` on a dedicated pool of `workers` threads, or on the global
/// pool when `workers` is `None`.
pub fn in_pool<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidArgument("workers must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}"))),
    }
}

fn write_file(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Per-module scores only.
    Module,
    /// Per-module scores plus per-type means.
    #[default]
    Type,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "module" => Ok(Self::Module),
            "type" => Ok(Self::Type),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregation {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Weight bundle manifest, or a `.safetensors` file.
    pub weights: PathBuf,
    /// Activation bundle manifest; one `[count, n_in]` tensor per module.
    pub activations: PathBuf,
    pub m: usize,
    pub seed: u64,
    pub convention: Convention,
    pub aggregation: Aggregation,
    pub dataset: Option<String>,
    pub output_dir: PathBuf,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            weights: PathBuf::new(),
            activations: PathBuf::new(),
            m: DEFAULT_BASELINE_DRAWS,
            seed: 0,
            convention: Convention::Squared,
            aggregation: Aggregation::Type,
            dataset: None,
            output_dir: PathBuf::from("results"),
        }
    }
}

/// Contents of `scores.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub config: ScoreOptions,
    /// Digest of the activation bundle manifest.
    pub created_from: String,
    pub modules: Vec<NfnScore>,
    /// Mean score per module type; absent with module aggregation.
    pub types: Option<IndexMap<String, f64>>,
}

impl ScoreFile {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_text(path)?)?)
    }

    pub fn type_table(&self) -> Result<TypeScoreTable> {
        let types = self.types.as_ref().ok_or_else(|| {
            Error::InvalidArgument(
                "scores file has no per-type table; rerun score with --aggregation type".into(),
            )
        })?;
        let means = types
            .iter()
            .map(|(name, mean)| Ok((name.parse()?, *mean)))
            .collect::<Result<Vec<_>>>()?;
        TypeScoreTable::from_means(&means)
    }
}

fn load_weights(path: &Path) -> Result<Vec<Tensor>> {
    if path.extension().is_some_and(|e| e == "safetensors") {
        read_safetensors(path)
    } else {
        read_bundle(path)
    }
}

/// Finds the weight for an activation entry: same name, or the name plus `.weight`.
fn find_weight<'a>(weights: &'a [Tensor], name: &str) -> Option<&'a Tensor> {
    let with_suffix = format!("{name}.weight");
    weights
        .iter()
        .find(|t| t.name == name)
        .or_else(|| weights.iter().find(|t| t.name == with_suffix))
}

/// Scores every module in the activation bundle against its weight.
pub fn score(opts: &ScoreOptions) -> Result<(ScoreFile, Outcome)> {
    let weights = load_weights(&opts.weights)?;
    let activations = read_bundle(&opts.activations)?;
    let unresolved: Vec<String> = activations
        .iter()
        .filter(|a| find_weight(&weights, &a.name).is_none())
        .map(|a| a.name.clone())
        .collect();
    if !unresolved.is_empty() {
        return Err(Error::UnresolvedModules(unresolved));
    }
    let mut batches = IndexMap::new();
    let mut matrices: Vec<(String, Matrix)> = Vec::new();
    for a in &activations {
        batches.insert(
            a.name.clone(),
            ActivationBatch::new(a.name.clone(), a.to_rows()?)?,
        );
        let w = find_weight(&weights, &a.name)
            .map(Tensor::to_matrix)
            .transpose()?;
        matrices.extend(w.map(|w| (a.name.clone(), w)));
    }
    let modules: Vec<(String, &Matrix)> = matrices.iter().map(|(n, w)| (n.clone(), w)).collect();
    let scores = score_modules(&modules, &batches, opts.m, opts.seed, opts.convention)?;

    ensure_dir(&opts.output_dir)?;
    let mut files = Vec::new();
    let mut summary = format!("scored {} modules", scores.len());
    let types = match opts.aggregation {
        Aggregation::Module => None,
        Aggregation::Type => {
            let table = aggregate_by_type(&scores, &Default::default())?;
            let report = type_report(&table);
            files.push(write_file(
                opts.output_dir.join("type_scores.txt"),
                &report,
            )?);
            summary = format!("{summary}\n{}", report.trim_end());
            Some(table.snapshot())
        }
    };
    let file = ScoreFile {
        config: opts.clone(),
        created_from: bundle_digest(&opts.activations)?,
        modules: scores,
        types,
    };
    files.insert(
        0,
        write_file(opts.output_dir.join("scores.json"), &to_json(&file)?)?,
    );
    Ok((file, Outcome::ok(files, summary)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub scores: PathBuf,
    pub k: usize,
    /// LoRA rank; alpha is `2 r`.
    pub r: u32,
    pub strategy: Strategy,
    pub output_dir: PathBuf,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            scores: PathBuf::new(),
            k: DEFAULT_K,
            r: 16,
            strategy: Strategy::Plop,
            output_dir: PathBuf::from("results"),
        }
    }
}

pub fn plan_command(opts: &PlanOptions) -> Result<Outcome> {
    let scores = ScoreFile::read(&opts.scores)?;
    let table = scores.type_table()?;
    let provenance = Provenance {
        seed: Some(scores.config.seed),
        dataset: scores.config.dataset.clone(),
        created_from: Some(scores.created_from.clone()),
    };
    let p = plan(&table, opts.strategy, opts.k, opts.r, provenance)?;
    ensure_dir(&opts.output_dir)?;
    let path = write_file(opts.output_dir.join("plan.json"), &p.to_json()?)?;
    let names: Vec<&str> = p.target_modules.iter().map(|t| t.name()).collect();
    Ok(Outcome::ok(
        vec![path],
        format!(
            "{}: target_modules [{}], r {}, alpha {}",
            p.strategy,
            names.join(", "),
            p.rank,
            p.alpha
        ),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapOptions {
    pub scores: PathBuf,
    pub formats: Vec<ExportFormat>,
    pub output_dir: PathBuf,
}

/// Builds the layer x type map from a scores file and writes `nfn_map.<ext>`
/// for each format.
pub fn map_command(opts: &MapOptions) -> Result<(NfnMap, Outcome)> {
    let scores = ScoreFile::read(&opts.scores)?;
    let metadata = MapMetadata {
        seed: Some(scores.config.seed),
        dataset: scores.config.dataset.clone(),
        m: Some(scores.config.m),
        convention: scores.config.convention,
    };
    let map = NfnMap::from_scores(&scores.modules, &Default::default(), metadata)?;
    ensure_dir(&opts.output_dir)?;
    let files = opts
        .formats
        .iter()
        .map(|&f| {
            write_file(
                opts.output_dir.join(format!("nfn_map.{}", f.extension())),
                &export_map(&map, f)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = format!("{} layers x {} types", map.layers, map.types.len());
    Ok((map, Outcome::ok(files, summary)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureOptions {
    pub model: TransformerConfig,
    /// JSON token file; when absent a synthetic batch is generated.
    pub tokens: Option<PathBuf>,
    pub task: SyntheticTask,
    pub batch: usize,
    pub seq_len: usize,
    pub data_seed: u64,
    /// Adam steps on `task` before capturing; 0 captures the fresh model.
    pub train_steps: usize,
    pub output_dir: PathBuf,
}

impl Default for CaptureOptions {
    fn default() -> Self {
        Self {
            model: TransformerConfig::default(),
            tokens: None,
            task: SyntheticTask::Arithmetic,
            batch: 8,
            seq_len: 32,
            data_seed: 0,
            train_steps: 0,
            output_dir: PathBuf::from("results"),
        }
    }
}

/// Token file layout: either a bare array of sequences or an object with
/// `tokens` and an optional `mask` of the same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenFile {
    Plain(Vec<Vec<u32>>),
    Masked {
        tokens: Vec<Vec<u32>>,
        mask: Option<Vec<Vec<bool>>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CaptureRecord {
    config: CaptureOptions,
    weights_digest: String,
    activations_digest: String,
    n_sequences: usize,
    train_losses: Vec<f64>,
}

/// Builds (and optionally trains) the toy model, runs one forward pass and
/// writes `weights` and `activations` bundles plus `capture.json`.
pub fn capture(opts: &CaptureOptions) -> Result<Outcome> {
    let mut model = build_model(&opts.model)?;
    let train_losses = if opts.train_steps > 0 {
        let cfg = TrainConfig {
            task: opts.task,
            steps: opts.train_steps,
            batch: opts.batch,
            seq_len: opts.seq_len,
            seed: opts.model.seed,
            ..TrainConfig::default()
        };
        train_toy(&mut model, &cfg)?
    } else {
        Vec::new()
    };
    let (tokens, mask) = match &opts.tokens {
        Some(path) => match serde_json::from_str(&read_text(path)?)? {
            TokenFile::Plain(t) => (t, None),
            TokenFile::Masked { tokens, mask } => (tokens, mask),
        },
        None => {
            let mut rng = Rng::new(opts.data_seed).substream("capture");
            (
                synthetic_batch(opts.task, opts.batch, opts.seq_len, &mut rng),
                None,
            )
        }
    };
    let (_, captured) = forward_with_capture(&model, &tokens, mask.as_deref())?;
    let modules = model.linear_modules();
    let activations = modules
        .iter()
        .map(|(name, layer, t, w)| {
            let batch = &captured[name];
            let data: Vec<f32> = batch
                .inputs()
                .iter()
                .flat_map(|z| z.as_slice().iter().copied())
                .collect();
            Ok(
                Tensor::new(name.clone(), vec![batch.len(), w.cols()], data)?
                    .with_module(Some(*t), Some(*layer)),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    ensure_dir(&opts.output_dir)?;
    let weights_stem = opts.output_dir.join("weights");
    let act_stem = opts.output_dir.join("activations");
    write_bundle(&weights_stem, &model.to_tensors()?)?;
    write_bundle(&act_stem, &activations)?;
    let (wm, wb) = bundle_paths(&weights_stem);
    let (am, ab) = bundle_paths(&act_stem);
    let record = CaptureRecord {
        config: opts.clone(),
        weights_digest: bundle_digest(&wm)?,
        activations_digest: bundle_digest(&am)?,
        n_sequences: tokens.len(),
        train_losses,
    };
    let rec = write_file(opts.output_dir.join("capture.json"), &to_json(&record)?)?;
    let summary = format!(
        "captured {} modules over {} sequences",
        activations.len(),
        tokens.len()
    );
    Ok(Outcome::ok(vec![wm, wb, am, ab, rec], summary))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Theorem1,
    Signconst,
    Baseline,
    Fig3,
}

impl std::str::FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theorem1" => Ok(Self::Theorem1),
            "signconst" => Ok(Self::Signconst),
            "baseline" => Ok(Self::Baseline),
            "fig3" => Ok(Self::Fig3),
            other => Err(Error::InvalidArgument(format!(
                "unknown experiment {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Theorem1 => "theorem1",
            Self::Signconst => "signconst",
            Self::Baseline => "baseline",
            Self::Fig3 => "fig3",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabOptions {
    pub experiment: Experiment,
    pub n: usize,
    pub d: usize,
    pub eta: f64,
    /// Trajectory length; defaults to half the estimated window.
    pub steps: Option<usize>,
    /// Trials for window estimation and sign constancy.
    pub trials: usize,
    /// Steps simulated per trial when estimating the window.
    pub horizon: usize,
    pub delta: f64,
    pub init: InitScheme,
    pub target_scale: TargetScale,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for LabOptions {
    fn default() -> Self {
        let lin = LinearNetConfig::default();
        Self {
            experiment: Experiment::Theorem1,
            n: lin.n,
            d: lin.d,
            eta: lin.eta,
            steps: None,
            trials: 100,
            horizon: 2000,
            delta: 0.25,
            init: lin.init,
            target_scale: TargetScale::InvSqrtD,
            seed: 0,
            output_dir: PathBuf::from("results"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
struct Flag {
    passed: bool,
    value: f64,
    threshold: f64,
}

fn flag(value: f64, threshold: f64, passed: bool) -> Flag {
    Flag {
        passed,
        value,
        threshold,
    }
}

#[derive(Serialize)]
struct LabSummary<'a, T: Serialize> {
    config: &'a LabOptions,
    window: Option<usize>,
    steps: usize,
    results: T,
    flags: IndexMap<&'static str, Flag>,
    passed: bool,
}

pub fn lab(opts: &LabOptions) -> Result<Outcome> {
    ensure_dir(&opts.output_dir)?;
    if opts.experiment == Experiment::Fig3 {
        return lab_fig3(opts);
    }
    let base = LinearNetConfig {
        d: opts.d,
        n: opts.n,
        eta: opts.eta,
        init: opts.init,
        seed: opts.seed,
        ..LinearNetConfig::default()
    };
    base.validate()?;
    let window = estimate_window(&base, opts.trials, opts.horizon)?;
    let steps = opts.steps.unwrap_or(window.window / 2);
    let cfg = LinearNetConfig { steps, ..base };
    let name = opts.experiment.to_string();
    let csv_path = opts.output_dir.join(format!("{name}.csv"));
    let mut flags = IndexMap::new();
    let results = match opts.experiment {
        Experiment::Theorem1 => {
            let run = run_theorem1(&cfg, opts.delta, Some(window.window))?;
            fs::write(&csv_path, run.trajectory.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
            flags.insert(
                "quadratic_r2",
                flag(run.quadratic_r2, 0.99, run.quadratic_r2 >= 0.99),
            );
            flags.insert(
                "chi_constant",
                flag(f64::from(u8::from(run.chi_constant)), 1.0, run.chi_constant),
            );
            serde_json::json!({
                "beta": run.beta,
                "sup_deviation": {
                    "recursion": run.sup_deviation_recursion,
                    "statement": run.sup_deviation_statement,
                },
                "scaled_deviation": run.scaled_deviation,
                "delta": run.delta,
                "quadratic_r2": run.quadratic_r2,
                "warning": run.warning,
            })
        }
        Experiment::Signconst => {
            let flips = sign_constancy_trials(&cfg, opts.trials)?;
            let mut csv = String::from("trial,seed,first_flip,constant\n");
            for (i, f) in flips.iter().enumerate() {
                csv.push_str(&format!(
                    "{i},{},{f},{}\n",
                    trial_seed(cfg.seed, "constancy", i),
                    f > &steps
                ));
            }
            fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
            let frac = flips.iter().filter(|&&f| f > steps).count() as f64 / flips.len() as f64;
            flags.insert("constancy_fraction", flag(frac, 0.95, frac >= 0.95));
            serde_json::json!({ "constancy_fraction": frac, "trials": opts.trials })
        }
        Experiment::Baseline => {
            let run = run_baseline_flatness(&cfg)?;
            fs::write(&csv_path, run.trajectory.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
            flags.insert(
                "baseline_drift",
                flag(run.max_drift, run.drift_bound, run.flat()),
            );
            let ratio = run.growth / run.max_drift;
            flags.insert(
                "growth_over_drift",
                flag(ratio, 10.0, run.growth >= 10.0 * run.max_drift),
            );
            serde_json::json!({
                "max_drift": run.max_drift,
                "drift_bound": run.drift_bound,
                "growth": run.growth,
                "growth_floor": run.growth_floor,
            })
        }
        Experiment::Fig3 => unreachable!(),
    };
    let passed = flags.values().all(|f| f.passed);
    let summary = LabSummary {
        config: opts,
        window: Some(window.window),
        steps,
        results,
        flags,
        passed,
    };
    let json_path = write_file(
        opts.output_dir.join(format!("{name}_summary.json")),
        &to_json(&summary)?,
    )?;
    let flag_text: Vec<String> = summary
        .flags
        .iter()
        .map(|(k, f)| {
            format!(
                "{k} {} ({} vs {})",
                if f.passed { "pass" } else { "FAIL" },
                f.value,
                f.threshold
            )
        })
        .collect();
    Ok(Outcome {
        files: vec![csv_path, json_path],
        passed,
        summary: format!(
            "{name}: window {}, T {steps}; {}",
            window.window,
            flag_text.join("; ")
        ),
    })
}

fn lab_fig3(opts: &LabOptions) -> Result<Outcome> {
    let cfg = Fig3Config {
        n: opts.n,
        d: opts.d,
        steps: opts.steps.unwrap_or(Fig3Config::default().steps),
        target_scale: opts.target_scale,
        init: opts.init,
        adam: AdamParams::default(),
        seed: opts.seed,
        ..Fig3Config::default()
    };
    let run = run_fig3_experiment(&cfg)?;
    let mut files = Vec::new();
    for (l, series) in run.layers.iter().enumerate() {
        files.push(write_file(
            opts.output_dir.join(format!("fig3_layer{l}.csv")),
            &series.to_csv(),
        )?);
    }
    files.push(write_file(
        opts.output_dir.join("fig3_loss.csv"),
        &run.loss_csv(),
    )?);
    let check = run.check();
    let growth = run.growth();
    let passed = check.passed();
    let summary = serde_json::json!({
        "config": opts,
        "fig3": cfg,
        "growth": growth,
        "check": check,
        "passed": passed,
    });
    files.push(write_file(
        opts.output_dir.join("fig3_summary.json"),
        &to_json(&summary)?,
    )?);
    let text: Vec<String> = growth
        .iter()
        .map(|g| {
            format!(
                "layer {}: growth {:.3}, baseline drift {:.3}",
                g.layer, g.relative_growth, g.baseline_max_drift
            )
        })
        .collect();
    Ok(Outcome {
        files,
        passed,
        summary: format!("fig3: {}", text.join("; ")),
    })
}

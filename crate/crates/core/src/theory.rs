//! Feature-norm dynamics of deep linear networks `f(x) = W_L ... W_0 x`.
//!
//! With a single trainable layer `W` (index `l0`), a datapoint `x`, a target
//! `y` and squared loss, let `z = W_{l0-1} ... W_0 x` and
//! `V = (W_L ... W_{l0+1})^T`. One SignSGD step with learning rate `eta/n` is
//! the rank-one update
//!
//! ```text
//! W_{t+1} = W_t - (eta/n) chi_t S(V) S(z)^T,     chi_t = S(V^T W_t z - y)
//! ```
//!
//! so the feature `u_t = W_t z` moves by `-beta chi_t S(V)` with
//! `beta = (eta/n) ||z||_1`. Writing `gamma_t = ||u_t||^2 / n` and
//! `alpha_t = <u_t, S(V)>`:
//!
//! ```text
//! gamma_{t+1} - gamma_t = beta^2 - 2 beta chi_t alpha_t / n
//! alpha_{t+1}           = alpha_t - beta chi_t n
//! ```
//!
//! While `chi` stays constant this telescopes to `gamma_t ~ gamma_0 + beta^2 t^2`.
//! A random input `z~` of the same norm only sees `(eta/n) S(z).z~`, which is
//! `O(n^{-1/2})` smaller than `beta`.
//!
//! Everything here runs in f64.

use std::fmt::Write as _;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot_f64, sign, sign_unchecked, Matrix, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Input std `d^-1/2`, hidden std `n^-1/2`, output uniform on `[-1/n, 1/n]`.
    #[default]
    MeanField,
    /// Every layer uniform on `[-fan_in^-1/2, fan_in^-1/2]`.
    Standard,
}

impl std::str::FromStr for InitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_field" => Ok(Self::MeanField),
            "standard" => Ok(Self::Standard),
            other => Err(Error::InvalidArgument(format!(
                "unknown init scheme {other:?}"
            ))),
        }
    }
}

/// How the single-layer run advances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Tracks `W z` and `W z~` only; never stores the `n x n` weight.
    #[default]
    FeatureSpace,
    /// Materializes and updates the full weight matrix.
    FullMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearNetConfig {
    /// Input dimension.
    pub d: usize,
    /// Hidden width.
    pub n: usize,
    /// Index of the output layer; the network has `depth + 1` weights.
    pub depth: usize,
    /// Index of the trainable layer, in `1..depth`.
    pub trainable: usize,
    /// Learning-rate constant; the applied rate is `eta / n`.
    pub eta: f64,
    pub steps: usize,
    pub init: InitScheme,
    pub mode: StepMode,
    pub seed: u64,
}

impl Default for LinearNetConfig {
    fn default() -> Self {
        Self {
            d: 128,
            n: 1024,
            depth: 2,
            trainable: 1,
            eta: 0.01,
            steps: 100,
            init: InitScheme::MeanField,
            mode: StepMode::FeatureSpace,
            seed: 0,
        }
    }
}

impl LinearNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("d and n must be positive".into()));
        }
        if self.depth < 2 {
            return Err(Error::InvalidArgument(
                "need at least three layers (depth >= 2)".into(),
            ));
        }
        if self.trainable == 0 || self.trainable >= self.depth {
            return Err(Error::InvalidArgument(format!(
                "trainable layer {} must be in 1..{}",
                self.trainable, self.depth
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.eta / self.n as f64
    }

    /// `(rows, cols)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        match l {
            0 => (self.n, self.d),
            l if l == self.depth => (1, self.n),
            _ => (self.n, self.n),
        }
    }

    /// Same config with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Calls `f(i, row)` for every row of layer `l` as `init_network` would
/// draw it, without storing the matrix.
fn for_each_init_row(config: &LinearNetConfig, l: usize, mut f: impl FnMut(usize, &[f64])) {
    let (rows, cols) = config.layer_shape(l);
    let mut rng = Rng::new(config.seed).substream_indexed("layer", l as u64);
    let mut row = vec![0.0; cols];
    for i in 0..rows {
        for w in row.iter_mut() {
            *w = match config.init {
                InitScheme::MeanField if l == 0 => rng.gaussian() / (config.d as f64).sqrt(),
                InitScheme::MeanField if l == config.depth => {
                    let b = 1.0 / config.n as f64;
                    rng.uniform(-b, b)
                }
                InitScheme::MeanField => rng.gaussian() / (config.n as f64).sqrt(),
                InitScheme::Standard => {
                    let b = 1.0 / (cols as f64).sqrt();
                    rng.uniform(-b, b)
                }
            };
        }
        f(i, &row);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub weights: Vec<Matrix<f64>>,
    pub step: usize,
    /// One moment buffer per layer when trained with Adam.
    pub adam: Option<Vec<AdamState>>,
}

pub fn init_network(config: &LinearNetConfig) -> Result<TrainState> {
    config.validate()?;
    let weights = (0..=config.depth)
        .map(|l| {
            let (rows, cols) = config.layer_shape(l);
            let mut data = Vec::with_capacity(rows * cols);
            for_each_init_row(config, l, |_, row| data.extend_from_slice(row));
            Matrix::new(rows, cols, data)
        })
        .collect::<Result<_>>()?;
    Ok(TrainState {
        weights,
        step: 0,
        adam: None,
    })
}

/// `z = W_{l0-1} ... W_0 x` and `V = (W_L ... W_{l0+1})^T` from explicit weights.
pub fn frozen_products(
    state: &TrainState,
    trainable: usize,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = &state.weights;
    let mut z = x.to_vec();
    for layer in &w[..trainable] {
        if layer.cols() != z.len() {
            return Err(Error::DimensionMismatch {
                op: "frozen_products",
                expected: layer.cols(),
                actual: z.len(),
            });
        }
        z = (0..layer.rows())
            .map(|i| dot_f64(layer.row(i), &z))
            .collect();
    }
    let mut v = vec![1.0];
    for layer in w[trainable + 1..].iter().rev() {
        let mut next = vec![0.0; layer.cols()];
        for (i, c) in v.iter().enumerate() {
            for (acc, wij) in next.iter_mut().zip(layer.row(i)) {
                *acc += wij * c;
            }
        }
        v = next;
    }
    Ok((z, v))
}

/// One SignSGD step on the trainable layer for a single datapoint. Returns
/// `chi_t`. The update uses the sign of each gradient entry
/// `(f - y) V_i z_j`, with `sign(0) = +1`.
pub fn signsgd_single_layer_step(
    state: &mut TrainState,
    trainable: usize,
    z_in: &[f64],
    v: &[f64],
    y_hat: f64,
    lr: f64,
) -> Result<f64> {
    let w = state
        .weights
        .get_mut(trainable)
        .ok_or_else(|| Error::InvalidArgument(format!("no layer {trainable}")))?;
    if w.cols() != z_in.len() || w.rows() != v.len() {
        return Err(Error::DimensionMismatch {
            op: "signsgd_single_layer_step",
            expected: w.cols(),
            actual: z_in.len(),
        });
    }
    let cols = w.cols();
    let f: f64 = (0..w.rows()).map(|i| v[i] * dot_f64(w.row(i), z_in)).sum();
    let residual = f - y_hat;
    let chi = sign(residual)?;
    for (i, row) in w.as_mut_slice().chunks_exact_mut(cols).enumerate() {
        let g = residual * v[i];
        for (wij, zj) in row.iter_mut().zip(z_in) {
            *wij -= lr * sign_unchecked(g * zj);
        }
    }
    state.step += 1;
    Ok(chi)
}

/// Which closed form of the predicted trajectory to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaForm {
    /// `Gamma_0 + beta^2 t^2`, the unrolled increment `beta^2 (1 + 2t)`.
    #[default]
    Recursion,
    /// `Gamma_0 + beta^2 (1 + t(t-1))` for `t >= 1`.
    Statement,
}

pub fn gamma_prediction(t: usize, gamma0: f64, beta: f64, form: GammaForm) -> f64 {
    let t = t as f64;
    match form {
        GammaForm::Recursion => gamma0 + beta * beta * t * t,
        GammaForm::Statement if t == 0.0 => gamma0,
        GammaForm::Statement => gamma0 + beta * beta * (1.0 + t * (t - 1.0)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub gamma: f64,
    pub gamma_baseline: f64,
    pub gamma_recursion: f64,
    pub gamma_statement: f64,
    pub chi: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn gammas(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.gamma).collect()
    }

    pub fn baseline_gammas(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.gamma_baseline).collect()
    }

    pub fn chi_constant(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].chi == w[1].chi)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("step,gamma,gamma_baseline,Gamma_recursion,Gamma_statement,chi,alpha\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step,
                r.gamma,
                r.gamma_baseline,
                r.gamma_recursion,
                r.gamma_statement,
                r.chi,
                r.alpha
            );
        }
        out
    }
}

/// A single-datapoint training problem with one trainable layer.
#[derive(Clone, Debug)]
pub struct SingleLayerSim {
    config: LinearNetConfig,
    /// Present only in full-matrix mode.
    state: Option<TrainState>,
    z: Vec<f64>,
    z_tilde: Vec<f64>,
    v: Vec<f64>,
    s_v: Vec<f64>,
    y_hat: f64,
    u: Vec<f64>,
    u_tilde: Vec<f64>,
    beta: f64,
    step: usize,
}

impl SingleLayerSim {
    /// Draws the weights, the datapoint `x`, the target and the baseline
    /// direction `z~` from `config.seed`.
    pub fn new(config: &LinearNetConfig) -> Result<Self> {
        config.validate()?;
        let mut data_rng = Rng::new(config.seed).substream("data");
        let x: Vec<f64> = (0..config.d).map(|_| data_rng.gaussian()).collect();
        let magnitude = data_rng.uniform(0.5, 1.5);
        let y_hat = if data_rng.coin() {
            magnitude
        } else {
            -magnitude
        };
        let g: Vec<f64> = (0..config.n).map(|_| data_rng.gaussian()).collect();

        let (state, z, v) = match config.mode {
            StepMode::FullMatrix => {
                let state = init_network(config)?;
                let (z, v) = frozen_products(&state, config.trainable, &x)?;
                (Some(state), z, v)
            }
            StepMode::FeatureSpace => {
                let (z, v) = streamed_frozen_products(config, &x);
                (None, z, v)
            }
        };
        let z_norm = l2(&z);
        let g_norm = l2(&g);
        if z_norm == 0.0 || g_norm == 0.0 {
            return Err(Error::ZeroInput("frozen layers map x to zero".into()));
        }
        let z_tilde: Vec<f64> = g.iter().map(|gi| gi * (z_norm / g_norm)).collect();
        let mut sim = Self {
            config: config.clone(),
            state,
            s_v: v.iter().map(|&vi| sign_unchecked(vi)).collect(),
            v,
            y_hat,
            u: Vec::new(),
            u_tilde: Vec::new(),
            beta: config.lr() * z.iter().map(|a| a.abs()).sum::<f64>(),
            z,
            z_tilde,
            step: 0,
        };
        sim.refresh_features();
        Ok(sim)
    }

    /// Replaces the baseline input. Used to check degenerate choices such as
    /// `z~ = z`.
    pub fn with_baseline(mut self, z_tilde: Vec<f64>) -> Result<Self> {
        if z_tilde.len() != self.z.len() {
            return Err(Error::DimensionMismatch {
                op: "with_baseline",
                expected: self.z.len(),
                actual: z_tilde.len(),
            });
        }
        if self.step != 0 {
            return Err(Error::InvalidArgument(
                "baseline must be set before training".into(),
            ));
        }
        self.z_tilde = z_tilde;
        self.refresh_features();
        Ok(self)
    }

    fn refresh_features(&mut self) {
        match &self.state {
            Some(state) => {
                let w = &state.weights[self.config.trainable];
                self.u = (0..w.rows()).map(|i| dot_f64(w.row(i), &self.z)).collect();
                self.u_tilde = (0..w.rows())
                    .map(|i| dot_f64(w.row(i), &self.z_tilde))
                    .collect();
            }
            None => {
                let n = self.config.layer_shape(self.config.trainable).0;
                self.u = vec![0.0; n];
                self.u_tilde = vec![0.0; n];
                let (u, ut, z, zt) = (&mut self.u, &mut self.u_tilde, &self.z, &self.z_tilde);
                for_each_init_row(&self.config, self.config.trainable, |i, row| {
                    u[i] = dot_f64(row, z);
                    ut[i] = dot_f64(row, zt);
                });
            }
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn y_hat(&self) -> f64 {
        self.y_hat
    }

    pub fn z_in(&self) -> &[f64] {
        &self.z
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn state(&self) -> Option<&TrainState> {
        self.state.as_ref()
    }

    pub fn output(&self) -> f64 {
        dot_f64(&self.v, &self.u)
    }

    pub fn chi(&self) -> f64 {
        sign_unchecked(self.output() - self.y_hat)
    }

    pub fn gamma(&self) -> f64 {
        dot_f64(&self.u, &self.u) / self.u.len() as f64
    }

    pub fn gamma_baseline(&self) -> f64 {
        dot_f64(&self.u_tilde, &self.u_tilde) / self.u.len() as f64
    }

    pub fn alpha(&self) -> f64 {
        dot_f64(&self.u, &self.s_v)
    }

    /// One SignSGD step. Returns the sign used.
    pub fn step(&mut self) -> Result<f64> {
        let lr = self.config.lr();
        let chi = match &mut self.state {
            Some(state) => {
                let chi = signsgd_single_layer_step(
                    state,
                    self.config.trainable,
                    &self.z,
                    &self.v,
                    self.y_hat,
                    lr,
                )?;
                self.refresh_features();
                chi
            }
            None => {
                let residual = self.output() - self.y_hat;
                let chi = sign(residual)?;
                // Row i moves by -lr * sign(g_i z_j); for z_j != 0 that is
                // sign(g_i) sign(z_j), and z_j = 0 contributes +1.
                let mut s_zt = 0.0;
                let mut zero_zt = 0.0;
                for (zj, ztj) in self.z.iter().zip(&self.z_tilde) {
                    if *zj == 0.0 {
                        zero_zt += ztj;
                    } else {
                        s_zt += sign_unchecked(*zj) * ztj;
                    }
                }
                let l1: f64 = self.z.iter().map(|a| a.abs()).sum();
                let sum_z: f64 = self.z.iter().sum();
                let sum_zt: f64 = self.z_tilde.iter().sum();
                for i in 0..self.u.len() {
                    let g = residual * self.v[i];
                    if g == 0.0 {
                        self.u[i] -= lr * sum_z;
                        self.u_tilde[i] -= lr * sum_zt;
                    } else {
                        let s = sign_unchecked(g);
                        self.u[i] -= lr * s * l1;
                        self.u_tilde[i] -= lr * (s * s_zt + zero_zt);
                    }
                }
                chi
            }
        };
        self.step += 1;
        Ok(chi)
    }

    fn row(&self, gamma0: f64) -> TrajectoryRow {
        TrajectoryRow {
            step: self.step,
            gamma: self.gamma(),
            gamma_baseline: self.gamma_baseline(),
            gamma_recursion: gamma_prediction(self.step, gamma0, self.beta, GammaForm::Recursion),
            gamma_statement: gamma_prediction(self.step, gamma0, self.beta, GammaForm::Statement),
            chi: self.chi(),
            alpha: self.alpha(),
        }
    }

    /// Runs `steps` steps and records rows `0..=steps`.
    pub fn run(&mut self, steps: usize) -> Result<Trajectory> {
        let gamma0 = self.gamma();
        let mut rows = Vec::with_capacity(steps + 1);
        rows.push(self.row(gamma0));
        for _ in 0..steps {
            self.step()?;
            rows.push(self.row(gamma0));
        }
        Ok(Trajectory { rows })
    }

    /// First step whose sign differs from `chi_0`, or `horizon + 1`.
    pub fn first_flip(&mut self, horizon: usize) -> Result<usize> {
        let chi0 = self.chi();
        for t in 1..=horizon {
            self.step()?;
            if self.chi() != chi0 {
                return Ok(t);
            }
        }
        Ok(horizon + 1)
    }
}

fn streamed_frozen_products(config: &LinearNetConfig, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut z = x.to_vec();
    for l in 0..config.trainable {
        let mut next = vec![0.0; config.layer_shape(l).0];
        for_each_init_row(config, l, |i, row| next[i] = dot_f64(row, &z));
        z = next;
    }
    let mut v = vec![1.0];
    for l in (config.trainable + 1..=config.depth).rev() {
        let mut next = vec![0.0; config.layer_shape(l).1];
        for_each_init_row(config, l, |i, row| {
            for (acc, wij) in next.iter_mut().zip(row) {
                *acc += wij * v[i];
            }
        });
        v = next;
    }
    (z, v)
}

fn l2(a: &[f64]) -> f64 {
    dot_f64(a, a).sqrt()
}

/// Coefficient of determination of the least-squares quadratic fit of `ys`
/// against `t = 0, 1, ...`.
pub fn quadratic_fit_r2(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 4 {
        return 1.0;
    }
    let center = (n - 1) as f64 / 2.0;
    let ts: Vec<f64> = (0..n).map(|t| (t as f64 - center) / center).collect();
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for (t, y) in ts.iter().zip(ys) {
        let basis = [1.0, *t, t * t];
        for i in 0..3 {
            b[i] += basis[i] * y;
            for j in 0..3 {
                a[i][j] += basis[i] * basis[j];
            }
        }
    }
    let coef = solve3(a, b);
    let mean = ys.iter().sum::<f64>() / n as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (t, y) in ts.iter().zip(ys) {
        let fit = coef[0] + coef[1] * t + coef[2] * t * t;
        ss_res += (y - fit).powi(2);
        ss_tot += (y - mean).powi(2);
    }
    if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

#[allow(clippy::needless_range_loop)]
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Run {
    pub trajectory: Trajectory,
    pub beta: f64,
    pub sup_deviation_recursion: f64,
    pub sup_deviation_statement: f64,
    /// `sup_deviation_recursion * n^delta`; bounded in `n` if the theorem holds.
    pub scaled_deviation: f64,
    pub delta: f64,
    pub quadratic_r2: f64,
    pub chi_constant: bool,
    pub warning: Option<String>,
}

/// Simulates `config.steps` steps and compares `gamma_t` with both closed
/// forms over `1 <= t <= T`.
pub fn run_theorem1(
    config: &LinearNetConfig,
    delta: f64,
    step_bound: Option<usize>,
) -> Result<Theorem1Run> {
    let mut sim = SingleLayerSim::new(config)?;
    let trajectory = sim.run(config.steps)?;
    let sup = |f: fn(&TrajectoryRow) -> f64| {
        trajectory.rows[1..]
            .iter()
            .map(|r| (r.gamma - f(r)).abs())
            .fold(0.0, f64::max)
    };
    let sup_rec = sup(|r| r.gamma_recursion);
    let warning = step_bound.filter(|&b| config.steps > b).map(|b| {
        format!(
            "T = {} exceeds the estimated constant-sign window {b}",
            config.steps
        )
    });
    Ok(Theorem1Run {
        beta: sim.beta(),
        sup_deviation_recursion: sup_rec,
        sup_deviation_statement: sup(|r| r.gamma_statement),
        scaled_deviation: sup_rec * (config.n as f64).powf(delta),
        delta,
        quadratic_r2: quadratic_fit_r2(&trajectory.gammas()),
        chi_constant: trajectory.chi_constant(),
        warning,
        trajectory,
    })
}

/// Seed of trial `i` in the family `label`, derived from `seed`.
pub fn trial_seed(seed: u64, label: &str, i: usize) -> u64 {
    Rng::new(seed).substream_indexed(label, i as u64).next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowEstimate {
    /// First-flip step per trial, sorted; `horizon + 1` when no flip occurred.
    pub first_flips: Vec<usize>,
    /// Largest `T` such that at least 95% of trials keep `chi_t = chi_0` for all `t <= T`.
    pub window: usize,
    /// `window * eta`.
    pub lambda_hat: f64,
    pub horizon: usize,
}

/// Estimates the constant-sign window from `n_trials` seeded runs.
pub fn estimate_window(
    config: &LinearNetConfig,
    n_trials: usize,
    horizon: usize,
) -> Result<WindowEstimate> {
    if n_trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let mut first_flips = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            SingleLayerSim::new(&config.with_seed(trial_seed(config.seed, "window", i)))?
                .first_flip(horizon)
        })
        .collect::<Result<Vec<_>>>()?;
    first_flips.sort_unstable();
    let allowed_failures = n_trials / 20;
    let window = first_flips[allowed_failures].saturating_sub(1);
    Ok(WindowEstimate {
        window,
        lambda_hat: window as f64 * config.eta,
        first_flips,
        horizon,
    })
}

/// First-flip step of each seeded trial over `config.steps` steps
/// (`steps + 1` when the sign never changed). Trials use a seed family
/// disjoint from [`estimate_window`].
pub fn sign_constancy_trials(config: &LinearNetConfig, n_trials: usize) -> Result<Vec<usize>> {
    if n_trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    (0..n_trials)
        .into_par_iter()
        .map(|i| {
            SingleLayerSim::new(&config.with_seed(trial_seed(config.seed, "constancy", i)))?
                .first_flip(config.steps)
        })
        .collect()
}

/// Fraction of seeded trials whose sign never changes over `config.steps` steps.
pub fn run_sign_constancy(config: &LinearNetConfig, n_trials: usize) -> Result<f64> {
    let flips = sign_constancy_trials(config, n_trials)?;
    Ok(flips.iter().filter(|&&f| f > config.steps).count() as f64 / n_trials as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineFlatness {
    pub trajectory: Trajectory,
    pub max_drift: f64,
    /// `10 n^-1/2 gamma~_0`.
    pub drift_bound: f64,
    pub growth: f64,
    /// `beta^2 T^2 / 2`.
    pub growth_floor: f64,
}

impl BaselineFlatness {
    pub fn flat(&self) -> bool {
        self.max_drift <= self.drift_bound
    }
}

pub fn run_baseline_flatness(config: &LinearNetConfig) -> Result<BaselineFlatness> {
    let mut sim = SingleLayerSim::new(config)?;
    let trajectory = sim.run(config.steps)?;
    Ok(summarize_flatness(trajectory, sim.beta(), config))
}

pub(crate) fn summarize_flatness(
    trajectory: Trajectory,
    beta: f64,
    config: &LinearNetConfig,
) -> BaselineFlatness {
    let base = trajectory.baseline_gammas();
    let g0 = base[0];
    let max_drift = base.iter().map(|g| (g - g0).abs()).fold(0.0, f64::max);
    let gammas = trajectory.gammas();
    let t = config.steps as f64;
    BaselineFlatness {
        max_drift,
        drift_bound: 10.0 * g0 / (config.n as f64).sqrt(),
        growth: gammas[gammas.len() - 1] - gammas[0],
        growth_floor: beta * beta * t * t / 2.0,
        trajectory,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Applies the update to `params` and returns it.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<Vec<f64>> {
    if params.len() != grads.len() || state.m.len() != grads.len() || state.v.len() != grads.len() {
        return Err(Error::DimensionMismatch {
            op: "adam_step",
            expected: params.len(),
            actual: grads.len(),
        });
    }
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    let mut update = Vec::with_capacity(grads.len());
    for i in 0..grads.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let du = -hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        params[i] += du;
        update.push(du);
    }
    Ok(update)
}

/// The SignSGD update `-lr S(g)`.
pub fn signsgd_update(grads: &[f64], lr: f64) -> Result<Vec<f64>> {
    grads.iter().map(|&g| Ok(-lr * sign(g)?)).collect()
}

/// One batched SignSGD step on `w` (the layer between `z` inputs and `v`),
/// returning the resulting change of the feature of `probe`.
///
/// Each batch entry is `(z_in, target)`; the loss is the batch mean of
/// `(v^T w z - target)^2 / 2`.
pub fn batch_feature_update_probe(
    w: &Matrix<f64>,
    v: &[f64],
    batch: &[(Vec<f64>, f64)],
    probe: &[f64],
    lr: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if v.len() != w.rows() || probe.len() != w.cols() {
        return Err(Error::DimensionMismatch {
            op: "batch_feature_update_probe",
            expected: w.cols(),
            actual: probe.len(),
        });
    }
    // The gradient is V s^T with s = mean_i r_i z_i.
    let mut s = vec![0.0; w.cols()];
    for (z, target) in batch {
        if z.len() != w.cols() {
            return Err(Error::DimensionMismatch {
                op: "batch_feature_update_probe",
                expected: w.cols(),
                actual: z.len(),
            });
        }
        let f: f64 = (0..w.rows()).map(|i| v[i] * dot_f64(w.row(i), z)).sum();
        let r = (f - target) / batch.len() as f64;
        s.iter_mut().zip(z).for_each(|(a, b)| *a += r * b);
    }
    Ok(v.iter()
        .map(|vi| {
            -lr * s
                .iter()
                .zip(probe)
                .map(|(sj, pj)| sign_unchecked(vi * sj) * pj)
                .sum::<f64>()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetScale {
    /// `omega_i ~ d^-1/2 N(0, 1)`.
    #[default]
    InvSqrtD,
    /// `omega_i ~ d^-1 N(0, 1)`.
    InvD,
}

impl std::str::FromStr for TargetScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inv_sqrt_d" => Ok(Self::InvSqrtD),
            "inv_d" => Ok(Self::InvD),
            other => Err(Error::InvalidArgument(format!(
                "unknown target scale {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig3Config {
    pub n: usize,
    pub d: usize,
    pub n_data: usize,
    pub steps: usize,
    /// Variance of the label noise.
    pub noise_var: f64,
    pub target_scale: TargetScale,
    pub adam: AdamParams,
    pub init: InitScheme,
    /// Step by which most of the growth should have happened.
    pub checkpoint: usize,
    pub seed: u64,
}

impl Default for Fig3Config {
    fn default() -> Self {
        Self {
            n: 100,
            d: 100,
            n_data: 1000,
            steps: 300,
            noise_var: 0.025,
            target_scale: TargetScale::InvSqrtD,
            adam: AdamParams::default(),
            init: InitScheme::MeanField,
            checkpoint: 200,
            seed: 0,
        }
    }
}

/// Feature norms of one layer per step: `mean_x rows^-1 ||W z_in(x)||^2`
/// for the trained inputs and for fixed random inputs of the same initial norm.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerSeries {
    pub gamma: Vec<f64>,
    pub gamma_baseline: Vec<f64>,
}

impl LayerSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,gamma,gamma_baseline\n");
        for (t, (g, b)) in self.gamma.iter().zip(&self.gamma_baseline).enumerate() {
            let _ = writeln!(out, "{t},{g},{b}");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig3Run {
    pub config: Fig3Config,
    pub layers: Vec<LayerSeries>,
    pub loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGrowth {
    pub layer: usize,
    pub gamma_start: f64,
    pub gamma_end: f64,
    /// `(gamma_T - gamma_0) / gamma_0`.
    pub relative_growth: f64,
    /// Share of the total growth reached by the checkpoint step.
    pub growth_share_at_checkpoint: f64,
    /// `max_t |gamma~_t - gamma~_0| / gamma~_0`.
    pub baseline_max_drift: f64,
}

impl Fig3Run {
    pub fn growth(&self) -> Vec<LayerGrowth> {
        let cp = self.config.checkpoint.min(self.config.steps);
        self.layers
            .iter()
            .enumerate()
            .map(|(layer, s)| {
                let (g0, gt) = (s.gamma[0], s.gamma[s.gamma.len() - 1]);
                let b0 = s.gamma_baseline[0];
                LayerGrowth {
                    layer,
                    gamma_start: g0,
                    gamma_end: gt,
                    relative_growth: (gt - g0) / g0,
                    growth_share_at_checkpoint: (s.gamma[cp] - g0) / (gt - g0),
                    baseline_max_drift: s
                        .gamma_baseline
                        .iter()
                        .map(|b| (b - b0).abs() / b0)
                        .fold(0.0, f64::max),
                }
            })
            .collect()
    }
}

/// Qualitative targets of the three-layer run, with their thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig3Check {
    pub all_layers_grow: bool,
    /// Every baseline stays within `baseline_tolerance` of its start.
    pub baselines_flat: bool,
    pub baseline_tolerance: f64,
    /// At least `share_threshold` of each layer's growth by the checkpoint.
    pub early_growth: bool,
    pub share_threshold: f64,
    /// Relative growth of the input layer is below that of the output layer.
    pub input_grows_less_than_output: bool,
}

impl Fig3Check {
    pub fn passed(&self) -> bool {
        self.all_layers_grow
            && self.baselines_flat
            && self.early_growth
            && self.input_grows_less_than_output
    }
}

impl Fig3Run {
    pub fn check(&self) -> Fig3Check {
        let growth = self.growth();
        let (baseline_tolerance, share_threshold) = (0.10, 0.80);
        Fig3Check {
            all_layers_grow: growth.iter().all(|g| g.relative_growth > 0.0),
            baselines_flat: growth
                .iter()
                .all(|g| g.baseline_max_drift <= baseline_tolerance),
            baseline_tolerance,
            early_growth: growth
                .iter()
                .all(|g| g.growth_share_at_checkpoint >= share_threshold),
            share_threshold,
            input_grows_less_than_output: growth[0].relative_growth
                < growth[growth.len() - 1].relative_growth,
        }
    }

    /// `step,loss`.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (t, l) in self.loss.iter().enumerate() {
            let _ = writeln!(out, "{t},{l}");
        }
        out
    }
}

/// Trains `f(x) = W_2 W_1 W_0 x` on `y = omega^T x + eps` with full-batch
/// Adam and records per-layer feature norms.
pub fn run_fig3_experiment(config: &Fig3Config) -> Result<Fig3Run> {
    let net = LinearNetConfig {
        d: config.d,
        n: config.n,
        depth: 2,
        trainable: 1,
        eta: 1.0,
        steps: config.steps,
        init: config.init,
        mode: StepMode::FullMatrix,
        seed: config.seed,
    };
    let mut state = init_network(&net)?;
    let (n, d, big_n) = (config.n, config.d, config.n_data);
    if big_n == 0 {
        return Err(Error::InvalidArgument("need at least one datapoint".into()));
    }

    let mut rng = Rng::new(config.seed).substream("fig3-data");
    let omega_scale = match config.target_scale {
        TargetScale::InvSqrtD => (d as f64).sqrt(),
        TargetScale::InvD => d as f64,
    };
    let omega: Vec<f64> = (0..d).map(|_| rng.gaussian() / omega_scale).collect();
    let xs: Vec<Vec<f64>> = (0..big_n)
        .map(|_| (0..d).map(|_| rng.gaussian()).collect())
        .collect();
    let noise_std = config.noise_var.sqrt();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| dot_f64(&omega, x) + noise_std * rng.gaussian())
        .collect();

    let forward = |w: &[Matrix<f64>], x: &[f64]| -> (Vec<f64>, Vec<f64>, f64) {
        let h0: Vec<f64> = (0..n).map(|i| dot_f64(w[0].row(i), x)).collect();
        let h1: Vec<f64> = (0..n).map(|i| dot_f64(w[1].row(i), &h0)).collect();
        let f = dot_f64(w[2].row(0), &h1);
        (h0, h1, f)
    };

    // Random inputs per datapoint and layer, with the norm of the layer's
    // input at initialization, kept fixed during training.
    let mut base_rng = Rng::new(config.seed).substream("fig3-baseline");
    let baselines: Vec<[Vec<f64>; 3]> = xs
        .iter()
        .map(|x| {
            let (h0, h1, _) = forward(&state.weights, x);
            [x.as_slice(), &h0, &h1].map(|z| {
                let g: Vec<f64> = (0..z.len()).map(|_| base_rng.gaussian()).collect();
                let scale = l2(z) / l2(&g);
                g.into_iter().map(|a| a * scale).collect()
            })
        })
        .collect();

    let mut adam: Vec<AdamState> = state
        .weights
        .iter()
        .map(|w| AdamState::new(w.as_slice().len()))
        .collect();
    let mut layers = vec![LayerSeries::default(); 3];
    let mut loss = Vec::with_capacity(config.steps + 1);

    for step in 0..=config.steps {
        let w = &state.weights;
        let mut sq = [0.0f64; 3];
        let mut sq_base = [0.0f64; 3];
        let mut l = 0.0;
        let mut xr = vec![0.0; d];
        let mut h0r = vec![0.0; n];
        let mut h1r = vec![0.0; n];
        for ((x, y), zb) in xs.iter().zip(&ys).zip(&baselines) {
            let (h0, h1, f) = forward(w, x);
            sq[0] += dot_f64(&h0, &h0) / n as f64;
            sq[1] += dot_f64(&h1, &h1) / n as f64;
            sq[2] += f * f;
            let b0: Vec<f64> = (0..n).map(|i| dot_f64(w[0].row(i), &zb[0])).collect();
            let b1: Vec<f64> = (0..n).map(|i| dot_f64(w[1].row(i), &zb[1])).collect();
            let b2 = dot_f64(w[2].row(0), &zb[2]);
            sq_base[0] += dot_f64(&b0, &b0) / n as f64;
            sq_base[1] += dot_f64(&b1, &b1) / n as f64;
            sq_base[2] += b2 * b2;

            let r = (f - y) / big_n as f64;
            l += 0.5 * (f - y) * (f - y);
            xr.iter_mut().zip(x).for_each(|(a, b)| *a += r * b);
            h0r.iter_mut().zip(&h0).for_each(|(a, b)| *a += r * b);
            h1r.iter_mut().zip(&h1).for_each(|(a, b)| *a += r * b);
        }
        for k in 0..3 {
            layers[k].gamma.push(sq[k] / big_n as f64);
            layers[k].gamma_baseline.push(sq_base[k] / big_n as f64);
        }
        let l = l / big_n as f64;
        if !l.is_finite() {
            return Err(Error::Diverged { step, loss: l });
        }
        loss.push(l);
        if step == config.steps {
            break;
        }

        // The output is scalar, so every gradient is rank one:
        // dW2 = h1r^T, dW1 = W2^T h0r^T, dW0 = (W1^T W2^T) xr^T.
        let w2 = w[2].row(0).to_vec();
        let mut a = vec![0.0; n];
        for (i, w2i) in w2.iter().enumerate() {
            a.iter_mut()
                .zip(w[1].row(i))
                .for_each(|(acc, wij)| *acc += w2i * wij);
        }
        let outer = |left: &[f64], right: &[f64]| -> Vec<f64> {
            left.iter()
                .flat_map(|li| right.iter().map(move |rj| li * rj))
                .collect()
        };
        let grads = [outer(&a, &xr), outer(&w2, &h0r), h1r];
        for (k, g) in grads.iter().enumerate() {
            adam_step(
                state.weights[k].as_mut_slice(),
                g,
                &mut adam[k],
                &config.adam,
            )?;
        }
        state.step += 1;
    }
    Ok(Fig3Run {
        config: config.clone(),
        layers,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, mode: StepMode, seed: u64) -> LinearNetConfig {
        LinearNetConfig {
            d: 32,
            n,
            steps: 50,
            mode,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn init_statistics() {
        let cfg = LinearNetConfig {
            n: 1024,
            d: 64,
            ..Default::default()
        };
        let s = init_network(&cfg).unwrap();
        let hidden = s.weights[1].as_slice();
        let var = hidden.iter().map(|w| w * w).sum::<f64>() / hidden.len() as f64;
        let ratio = (var * 1024.0).sqrt();
        assert!((0.95..=1.05).contains(&ratio), "{ratio}");
        let b = 1.0 / 1024.0;
        assert!(s.weights[2].as_slice().iter().all(|w| (-b..=b).contains(w)));
        assert_eq!(s, init_network(&cfg).unwrap());
        assert_eq!(s.weights[0].rows(), 1024);
        assert_eq!(s.weights[0].cols(), 64);
    }

    #[test]
    fn config_validation() {
        let bad = [
            LinearNetConfig {
                depth: 1,
                ..Default::default()
            },
            LinearNetConfig {
                trainable: 0,
                ..Default::default()
            },
            LinearNetConfig {
                trainable: 2,
                ..Default::default()
            },
            LinearNetConfig {
                eta: 0.0,
                ..Default::default()
            },
            LinearNetConfig {
                n: 0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(init_network(&cfg).is_err());
        }
    }

    #[test]
    fn step_touches_only_the_trainable_layer() {
        let cfg = small(64, StepMode::FullMatrix, 1);
        let mut sim = SingleLayerSim::new(&cfg).unwrap();
        let before = sim.state().unwrap().clone();
        sim.step().unwrap();
        let after = sim.state().unwrap();
        assert_eq!(before.weights[0], after.weights[0]);
        assert_eq!(before.weights[2], after.weights[2]);
        assert_ne!(before.weights[1], after.weights[1]);
    }

    #[test]
    fn update_is_rank_one() {
        let cfg = small(48, StepMode::FullMatrix, 2);
        let mut sim = SingleLayerSim::new(&cfg).unwrap();
        let before = sim.state().unwrap().weights[1].clone();
        sim.step().unwrap();
        let after = &sim.state().unwrap().weights[1];
        let delta: Vec<f64> = after
            .as_slice()
            .iter()
            .zip(before.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        let m = nalgebra::DMatrix::from_row_slice(48, 48, &delta);
        let sv = m.singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        assert!(sv[0] > 0.0);
        assert!(sv[1] <= 1e-5 * sv[0], "{:?}", &sv[..3]);
    }

    #[test]
    fn first_step_identity() {
        let cfg = small(256, StepMode::FullMatrix, 3);
        let mut sim = SingleLayerSim::new(&cfg).unwrap();
        let (g0, a0, beta, n) = (sim.gamma(), sim.alpha(), sim.beta(), 256.0);
        let chi = sim.step().unwrap();
        let expected = beta * beta - 2.0 * beta * chi * a0 / n;
        assert!((sim.gamma() - g0 - expected).abs() <= 1e-6);
        assert!((sim.alpha() - (a0 - beta * chi * n)).abs() <= 1e-9 * (a0.abs() + beta * n));
    }

    #[test]
    fn feature_space_matches_full_matrix() {
        for seed in 0..3 {
            let a = SingleLayerSim::new(&small(128, StepMode::FullMatrix, seed))
                .unwrap()
                .run(60)
                .unwrap();
            let b = SingleLayerSim::new(&small(128, StepMode::FeatureSpace, seed))
                .unwrap()
                .run(60)
                .unwrap();
            for (ra, rb) in a.rows.iter().zip(&b.rows) {
                assert_eq!(ra.chi, rb.chi);
                assert!((ra.gamma - rb.gamma).abs() <= 1e-10 * ra.gamma.max(1.0));
                assert!(
                    (ra.gamma_baseline - rb.gamma_baseline).abs()
                        <= 1e-10 * ra.gamma_baseline.max(1.0)
                );
                assert!((ra.alpha - rb.alpha).abs() <= 1e-9 * ra.alpha.abs().max(1.0));
            }
        }
    }

    #[test]
    fn feature_space_matches_full_matrix_with_zero_entries() {
        // Zero entries in z and V exercise the sign(0) = +1 branches.
        let cfg = small(40, StepMode::FullMatrix, 5);
        let mut full = SingleLayerSim::new(&cfg).unwrap();
        let mut fast = SingleLayerSim::new(&LinearNetConfig {
            mode: StepMode::FeatureSpace,
            ..cfg.clone()
        })
        .unwrap();
        for sim in [&mut full, &mut fast] {
            sim.z[3] = 0.0;
            sim.z[17] = 0.0;
            sim.v[5] = 0.0;
            sim.s_v[5] = 1.0;
            sim.beta = cfg.lr() * sim.z.iter().map(|a| a.abs()).sum::<f64>();
            sim.refresh_features();
        }
        for _ in 0..20 {
            assert_eq!(full.step().unwrap(), fast.step().unwrap());
            for (a, b) in full.u.iter().zip(&fast.u) {
                assert!((a - b).abs() <= 1e-12);
            }
            for (a, b) in full.u_tilde.iter().zip(&fast.u_tilde) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gamma_forms() {
        for form in [GammaForm::Recursion, GammaForm::Statement] {
            assert_eq!(gamma_prediction(0, 1.5, 0.3, form), 1.5);
            assert!((gamma_prediction(1, 1.5, 0.3, form) - (1.5 + 0.09)).abs() < 1e-15);
        }
        assert!((gamma_prediction(2, 1.0, 1.0, GammaForm::Recursion) - 5.0).abs() < 1e-15);
        assert!((gamma_prediction(2, 1.0, 1.0, GammaForm::Statement) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn quadratic_fit_examples() {
        let ys: Vec<f64> = (0..50)
            .map(|t| 3.0 + 0.5 * t as f64 + 0.01 * (t * t) as f64)
            .collect();
        assert!((quadratic_fit_r2(&ys) - 1.0).abs() < 1e-12);
        let noisy: Vec<f64> = (0..50)
            .map(|t| if t % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        assert!(quadratic_fit_r2(&noisy) < 0.1);
    }

    #[test]
    fn sign_constancy_examples() {
        let cfg = LinearNetConfig {
            n: 256,
            steps: 1,
            ..Default::default()
        };
        assert_eq!(run_sign_constancy(&cfg, 50).unwrap(), 1.0);

        let cfg = LinearNetConfig { steps: 60, ..cfg };
        let slow = run_sign_constancy(&cfg, 50).unwrap();
        let fast = run_sign_constancy(&LinearNetConfig { eta: 0.1, ..cfg }, 50).unwrap();
        assert!(fast <= slow);
    }

    #[test]
    fn window_estimate_is_a_lower_quantile() {
        let cfg = LinearNetConfig {
            n: 256,
            ..Default::default()
        };
        let est = estimate_window(&cfg, 40, 2000).unwrap();
        let kept = est.first_flips.iter().filter(|&&t| t > est.window).count();
        assert!(kept >= 38);
        assert!(est.window > 0);
    }

    #[test]
    fn degenerate_baseline_coincides() {
        let cfg = small(64, StepMode::FeatureSpace, 9);
        let sim = SingleLayerSim::new(&cfg).unwrap();
        let z = sim.z_in().to_vec();
        let tr = sim.with_baseline(z).unwrap().run(30).unwrap();
        for r in &tr.rows {
            assert_eq!(r.gamma, r.gamma_baseline);
        }
    }

    #[test]
    fn baseline_drift_shrinks_with_width() {
        let drift = |n: usize| {
            (0..4)
                .map(|s| {
                    let cfg = LinearNetConfig {
                        n,
                        steps: 60,
                        seed: s,
                        ..Default::default()
                    };
                    let f = run_baseline_flatness(&cfg).unwrap();
                    f.max_drift / f.trajectory.rows[0].gamma_baseline
                })
                .sum::<f64>()
        };
        assert!(drift(4096) < drift(256));
    }

    #[test]
    fn adam_examples() {
        let hp = AdamParams {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        let u = adam_step(&mut p, &[0.0, 0.0], &mut st, &hp).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(u, vec![0.0, 0.0]);

        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        for _ in 0..2 {
            let u = adam_step(&mut p, &[0.3], &mut st, &hp).unwrap();
            assert!((u[0] + 0.1).abs() < 1e-6);
        }

        let hp = AdamParams {
            lr: 0.01,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-12,
        };
        let mut rng = Rng::new(4);
        let g: Vec<f64> = (0..1000).map(|_| rng.gaussian()).collect();
        let mut p = vec![0.0; 1000];
        let u = adam_step(&mut p, &g, &mut AdamState::new(1000), &hp).unwrap();
        let s = signsgd_update(&g, 0.01).unwrap();
        for (a, b) in u.iter().zip(&s) {
            assert_eq!(sign(*a).unwrap(), sign(*b).unwrap());
        }
        assert!(adam_step(&mut p, &g[..3], &mut AdamState::new(1000), &hp).is_err());
    }

    #[test]
    fn batch_probe_examples() {
        let cfg = LinearNetConfig {
            n: 2048,
            d: 64,
            ..Default::default()
        };
        let sim = SingleLayerSim::new(&LinearNetConfig {
            mode: StepMode::FullMatrix,
            ..cfg.clone()
        })
        .unwrap();
        let w = &sim.state().unwrap().weights[1];
        let (z, v, y) = (sim.z_in().to_vec(), sim.v().to_vec(), sim.y_hat());
        let lr = cfg.lr();

        let delta = batch_feature_update_probe(w, &v, &[(z.clone(), y)], &z, lr).unwrap();
        let beta = sim.beta();
        assert!((l2(&delta) - beta * (2048f64).sqrt()).abs() <= 1e-5 * beta * (2048f64).sqrt());

        let dup =
            batch_feature_update_probe(w, &v, &[(z.clone(), y), (z.clone(), y)], &z, lr).unwrap();
        assert_eq!(delta, dup);

        let mut rng = Rng::new(77);
        let mut probe: Vec<f64> = (0..2048).map(|_| rng.gaussian()).collect();
        let p = dot_f64(&probe, &z) / dot_f64(&z, &z);
        probe.iter_mut().zip(&z).for_each(|(a, b)| *a -= p * b);
        let scale = l2(&z) / l2(&probe);
        probe.iter_mut().for_each(|a| *a *= scale);
        let off = batch_feature_update_probe(w, &v, &[(z.clone(), y)], &probe, lr).unwrap();
        assert!(l2(&off) <= 5.0 / (2048f64).sqrt() * l2(&delta));

        assert!(batch_feature_update_probe(w, &v, &[], &z, lr).is_err());
    }

    #[test]
    fn trajectory_csv_header() {
        let tr = SingleLayerSim::new(&small(16, StepMode::FeatureSpace, 0))
            .unwrap()
            .run(3)
            .unwrap();
        let csv = tr.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("step,gamma,gamma_baseline,Gamma_recursion,Gamma_statement,chi,alpha")
        );
        assert_eq!(lines.count(), 4);
    }
}

//! A small Llama-style decoder with per-module input capture.
//!
//! Per layer: RMSNorm, causal multi-head attention (`q_proj`, `k_proj`,
//! `v_proj`, `o_proj`), RMSNorm, SiLU-gated MLP (`gate_proj`, `up_proj`,
//! `down_proj`). Learned absolute positions, a final RMSNorm and an untied
//! output head. Weights are stored as f32; activations are computed in f64
//! and recorded as f32.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::bundle::Tensor;
use crate::error::{Error, Result};
use crate::nfn::{score_modules, ActivationBatch, Convention, NfnScore};
use crate::placement::ModuleType;
use crate::report::{MapMetadata, NfnMap};
use crate::tensor::{Matrix, Rng, Vector};
use crate::theory::{adam_step, AdamParams, AdamState};

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_mlp: 172,
            vocab_size: 256,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_mlp,
            self.vocab_size,
            self.max_seq_len,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "transformer dimensions must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub attn_norm: Vec<f32>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub o: Matrix,
    pub mlp_norm: Vec<f32>,
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

impl Layer {
    pub fn module(&self, t: ModuleType) -> &Matrix {
        match t {
            ModuleType::Query => &self.q,
            ModuleType::Key => &self.k,
            ModuleType::Value => &self.v,
            ModuleType::OutProj => &self.o,
            ModuleType::GateProj => &self.gate,
            ModuleType::UpProj => &self.up,
            ModuleType::DownProj => &self.down,
        }
    }

    pub fn module_mut(&mut self, t: ModuleType) -> &mut Matrix {
        match t {
            ModuleType::Query => &mut self.q,
            ModuleType::Key => &mut self.k,
            ModuleType::Value => &mut self.v,
            ModuleType::OutProj => &mut self.o,
            ModuleType::GateProj => &mut self.gate,
            ModuleType::UpProj => &mut self.up,
            ModuleType::DownProj => &mut self.down,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TransformerConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<Layer>,
    pub final_norm: Vec<f32>,
    pub lm_head: Matrix,
}

/// `layers.<i>.<attn|mlp>.<type>`.
pub fn module_name(layer: usize, t: ModuleType) -> String {
    let block = if t.is_attention() { "attn" } else { "mlp" };
    format!("layers.{layer}.{block}.{t}")
}

fn init_matrix(rng: &Rng, label: &str, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    let mut r = rng.substream(label);
    Matrix::from_fn(rows, cols, |_, _| r.gaussian() * std)
}

pub fn build_model(config: &TransformerConfig) -> Result<Model> {
    config.validate()?;
    let rng = Rng::new(config.seed);
    let (d, f) = (config.d_model, config.d_mlp);
    let sd = 1.0 / (d as f64).sqrt();
    let layers = (0..config.n_layers)
        .map(|l| {
            let m = |t: ModuleType, rows, cols, std| {
                init_matrix(&rng, &module_name(l, t), rows, cols, std)
            };
            Ok(Layer {
                attn_norm: vec![1.0; d],
                q: m(ModuleType::Query, d, d, sd)?,
                k: m(ModuleType::Key, d, d, sd)?,
                v: m(ModuleType::Value, d, d, sd)?,
                o: m(ModuleType::OutProj, d, d, sd)?,
                mlp_norm: vec![1.0; d],
                gate: m(ModuleType::GateProj, f, d, sd)?,
                up: m(ModuleType::UpProj, f, d, sd)?,
                down: m(ModuleType::DownProj, d, f, 1.0 / (f as f64).sqrt())?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Model {
        tok_emb: init_matrix(&rng, "tok_emb", config.vocab_size, d, 1.0)?,
        pos_emb: init_matrix(&rng, "pos_emb", config.max_seq_len, d, 1.0)?,
        layers,
        final_norm: vec![1.0; d],
        lm_head: init_matrix(&rng, "lm_head", config.vocab_size, d, sd)?,
        config: config.clone(),
    })
}

impl Model {
    /// Linear modules in layer order, then canonical type order.
    pub fn linear_modules(&self) -> Vec<(String, usize, ModuleType, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| {
                ModuleType::ALL.map(|t| (module_name(l, t), l, t, layer.module(t)))
            })
            .collect()
    }

    /// All parameters as named tensors; linear modules carry type and layer.
    pub fn to_tensors(&self) -> Result<Vec<Tensor>> {
        let vec_tensor = |name: String, v: &[f32]| Tensor::new(name, vec![v.len()], v.to_vec());
        let mut out = vec![
            Tensor::from_matrix("tok_emb", &self.tok_emb)?,
            Tensor::from_matrix("pos_emb", &self.pos_emb)?,
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(vec_tensor(
                format!("layers.{l}.attn_norm"),
                &layer.attn_norm,
            )?);
            out.push(vec_tensor(format!("layers.{l}.mlp_norm"), &layer.mlp_norm)?);
            for t in ModuleType::ALL {
                out.push(
                    Tensor::from_matrix(module_name(l, t), layer.module(t))?
                        .with_module(Some(t), Some(l)),
                );
            }
        }
        out.push(vec_tensor("final_norm".into(), &self.final_norm)?);
        out.push(Tensor::from_matrix("lm_head", &self.lm_head)?);
        Ok(out)
    }

    pub fn from_tensors(config: &TransformerConfig, tensors: &[Tensor]) -> Result<Self> {
        let mut model = build_model(config)?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let load_matrix = |dst: &mut Matrix, name: &str| -> Result<()> {
            let m = find(name)?.to_matrix()?;
            if (m.rows(), m.cols()) != (dst.rows(), dst.cols()) {
                return Err(Error::Format(format!(
                    "{name}: shape {}x{} does not match config {}x{}",
                    m.rows(),
                    m.cols(),
                    dst.rows(),
                    dst.cols()
                )));
            }
            *dst = m;
            Ok(())
        };
        let load_vec = |dst: &mut Vec<f32>, name: &str| -> Result<()> {
            let t = find(name)?;
            if t.data.len() != dst.len() {
                return Err(Error::Format(format!(
                    "{name}: length {} != {}",
                    t.data.len(),
                    dst.len()
                )));
            }
            dst.clone_from(&t.data);
            Ok(())
        };
        load_matrix(&mut model.tok_emb, "tok_emb")?;
        load_matrix(&mut model.pos_emb, "pos_emb")?;
        for (l, layer) in model.layers.iter_mut().enumerate() {
            load_vec(&mut layer.attn_norm, &format!("layers.{l}.attn_norm"))?;
            load_vec(&mut layer.mlp_norm, &format!("layers.{l}.mlp_norm"))?;
            for t in ModuleType::ALL {
                load_matrix(layer.module_mut(t), &module_name(l, t))?;
            }
        }
        load_vec(&mut model.final_norm, "final_norm")?;
        load_matrix(&mut model.lm_head, "lm_head")?;
        Ok(model)
    }

    fn check_tokens(&self, tokens: &[Vec<u32>]) -> Result<()> {
        if tokens.is_empty() || tokens.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidArgument(
                "need at least one non-empty sequence".into(),
            ));
        }
        for (s, seq) in tokens.iter().enumerate() {
            if seq.len() > self.config.max_seq_len {
                return Err(Error::InvalidArgument(format!(
                    "sequence {s} has length {} > max_seq_len {}",
                    seq.len(),
                    self.config.max_seq_len
                )));
            }
            if let Some((p, &tok)) = seq
                .iter()
                .enumerate()
                .find(|(_, &t)| t as usize >= self.config.vocab_size)
            {
                return Err(Error::TokenOutOfRange {
                    token: tok,
                    sequence: s,
                    position: p,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

fn linear(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row(i).iter().zip(x).map(|(a, b)| *a as f64 * b).sum())
        .collect()
}

/// `W^T dy`.
fn linear_t(w: &Matrix, dy: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, d) in dy.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(w.row(i)) {
            *o += *a as f64 * d;
        }
    }
    out
}

fn add_outer(g: &mut [f64], dy: &[f64], x: &[f64]) {
    for (row, d) in g.chunks_exact_mut(x.len()).zip(dy) {
        for (gi, xj) in row.iter_mut().zip(x) {
            *gi += d * xj;
        }
    }
}

fn rms(x: &[f64]) -> f64 {
    1.0 / (x.iter().map(|a| a * a).sum::<f64>() / x.len() as f64 + NORM_EPS).sqrt()
}

fn rmsnorm(x: &[f64], gain: &[f32]) -> (Vec<f64>, f64) {
    let r = rms(x);
    (
        x.iter().zip(gain).map(|(a, g)| a * r * *g as f64).collect(),
        r,
    )
}

/// Adds to `dx` and `dgain` the gradient through `y = gain * x * r`.
fn rmsnorm_back(x: &[f64], r: f64, gain: &[f32], dy: &[f64], dx: &mut [f64], dgain: &mut [f64]) {
    let n = x.len() as f64;
    let mut dot = 0.0;
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] * r;
        dot += gain[i] as f64 * dy[i] * x[i];
    }
    for i in 0..x.len() {
        dx[i] += r * gain[i] as f64 * dy[i] - r * r * r / n * x[i] * dot;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

struct LayerCache {
    x_in: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    r_a: Vec<f64>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// `probs[h][t][u]` for `u <= t`.
    probs: Vec<Vec<Vec<f64>>>,
    attn: Vec<Vec<f64>>,
    x_mid: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    r_m: Vec<f64>,
    gate: Vec<Vec<f64>>,
    up: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
}

struct SeqCache {
    layers: Vec<LayerCache>,
    x_final: Vec<Vec<f64>>,
    r_final: Vec<f64>,
    f: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

fn forward_seq(model: &Model, tokens: &[u32]) -> SeqCache {
    let cfg = &model.config;
    let (d, dh) = (cfg.d_model, cfg.d_head());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &tok)| {
            model
                .tok_emb
                .row(tok as usize)
                .iter()
                .zip(model.pos_emb.row(p))
                .map(|(a, b)| *a as f64 + *b as f64)
                .collect()
        })
        .collect();
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let x_in = x.clone();
        let (a, r_a): (Vec<Vec<f64>>, Vec<f64>) =
            x.iter().map(|xt| rmsnorm(xt, &layer.attn_norm)).unzip();
        let q: Vec<Vec<f64>> = a.iter().map(|at| linear(&layer.q, at)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|at| linear(&layer.k, at)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|at| linear(&layer.v, at)).collect();
        let mut attn = vec![vec![0.0; d]; tokens.len()];
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let hs = h * dh..(h + 1) * dh;
            let mut head_probs = Vec::with_capacity(tokens.len());
            for t in 0..tokens.len() {
                let scores: Vec<f64> = (0..=t)
                    .map(|u| {
                        q[t][hs.clone()]
                            .iter()
                            .zip(&k[u][hs.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
                for (u, pu) in p.iter().enumerate() {
                    for (o, vv) in attn[t][hs.clone()].iter_mut().zip(&v[u][hs.clone()]) {
                        *o += pu * vv;
                    }
                }
                head_probs.push(p);
            }
            probs.push(head_probs);
        }
        for (xt, at) in x.iter_mut().zip(&attn) {
            for (a, b) in xt.iter_mut().zip(linear(&layer.o, at)) {
                *a += b;
            }
        }
        let x_mid = x.clone();
        let (m, r_m): (Vec<Vec<f64>>, Vec<f64>) =
            x.iter().map(|xt| rmsnorm(xt, &layer.mlp_norm)).unzip();
        let gate: Vec<Vec<f64>> = m.iter().map(|mt| linear(&layer.gate, mt)).collect();
        let up: Vec<Vec<f64>> = m.iter().map(|mt| linear(&layer.up, mt)).collect();
        let hidden: Vec<Vec<f64>> = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| g.iter().zip(u).map(|(a, b)| silu(*a) * b).collect())
            .collect();
        for (xt, ht) in x.iter_mut().zip(&hidden) {
            for (a, b) in xt.iter_mut().zip(linear(&layer.down, ht)) {
                *a += b;
            }
        }
        layers.push(LayerCache {
            x_in,
            a,
            r_a,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            m,
            r_m,
            gate,
            up,
            hidden,
        });
    }
    let (f, r_final): (Vec<Vec<f64>>, Vec<f64>) =
        x.iter().map(|xt| rmsnorm(xt, &model.final_norm)).unzip();
    let logits = f.iter().map(|ft| linear(&model.lm_head, ft)).collect();
    SeqCache {
        layers,
        x_final: x,
        r_final,
        f,
        logits,
    }
}

/// Inputs of every linear module, keyed by module name in model order.
pub type CapturedActivations = IndexMap<String, ActivationBatch>;

/// Logits for one sequence: one row of `vocab_size` values per position.
pub type Logits = Vec<Vec<f32>>;

/// Runs the model over every sequence and records each linear module's
/// inputs, one vector per token position. Positions where `mask` is false
/// are recorded as zero vectors.
pub fn forward_with_capture(
    model: &Model,
    tokens: &[Vec<u32>],
    mask: Option<&[Vec<bool>]>,
) -> Result<(Vec<Logits>, CapturedActivations)> {
    model.check_tokens(tokens)?;
    if let Some(mask) = mask {
        if mask.len() != tokens.len() || mask.iter().zip(tokens).any(|(m, t)| m.len() != t.len()) {
            return Err(Error::InvalidShape(
                "pad mask does not match token shape".into(),
            ));
        }
    }
    let caches: Vec<SeqCache> = tokens.iter().map(|seq| forward_seq(model, seq)).collect();
    let keep = |s: usize, t: usize| mask.is_none_or(|m| m[s][t]);
    let mut captured = IndexMap::new();
    for (l, layer) in model.layers.iter().enumerate() {
        for ty in ModuleType::ALL {
            let mut inputs = Vec::new();
            for (s, cache) in caches.iter().enumerate() {
                let lc = &cache.layers[l];
                let source = match ty {
                    ModuleType::Query | ModuleType::Key | ModuleType::Value => &lc.a,
                    ModuleType::OutProj => &lc.attn,
                    ModuleType::GateProj | ModuleType::UpProj => &lc.m,
                    ModuleType::DownProj => &lc.hidden,
                };
                for (t, z) in source.iter().enumerate() {
                    inputs.push(if keep(s, t) {
                        Vector::from_f64_slice(z)?
                    } else {
                        Vector::zeros(z.len())?
                    });
                }
            }
            debug_assert_eq!(inputs[0].dim(), layer.module(ty).cols());
            let name = module_name(l, ty);
            captured.insert(name.clone(), ActivationBatch::new(name, inputs)?);
        }
    }
    let logits = caches
        .iter()
        .map(|c| {
            c.logits
                .iter()
                .map(|row| row.iter().map(|x| *x as f32).collect())
                .collect()
        })
        .collect();
    Ok((logits, captured))
}

/// Per-module scores of `model` on `tokens` and the resulting layer x type map.
pub fn nfn_map(
    model: &Model,
    tokens: &[Vec<u32>],
    m: usize,
    seed: u64,
    convention: Convention,
) -> Result<(Vec<NfnScore>, NfnMap)> {
    let (_, captured) = forward_with_capture(model, tokens, None)?;
    let modules: Vec<(String, &Matrix)> = model
        .linear_modules()
        .into_iter()
        .map(|(n, _, _, w)| (n, w))
        .collect();
    let scores = score_modules(&modules, &captured, m, seed, convention)?;
    let map = NfnMap::from_scores(
        &scores,
        &Default::default(),
        MapMetadata {
            seed: Some(seed),
            dataset: None,
            m: Some(m),
            convention,
        },
    )?;
    Ok((scores, map))
}

#[derive(Clone)]
struct LayerGrads {
    attn_norm: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    o: Vec<f64>,
    mlp_norm: Vec<f64>,
    gate: Vec<f64>,
    up: Vec<f64>,
    down: Vec<f64>,
}

struct Grads {
    tok_emb: Vec<f64>,
    pos_emb: Vec<f64>,
    layers: Vec<LayerGrads>,
    final_norm: Vec<f64>,
    lm_head: Vec<f64>,
}

impl Grads {
    fn zeros(model: &Model) -> Self {
        let z = |m: &Matrix| vec![0.0; m.as_slice().len()];
        Self {
            tok_emb: z(&model.tok_emb),
            pos_emb: z(&model.pos_emb),
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    attn_norm: vec![0.0; l.attn_norm.len()],
                    q: z(&l.q),
                    k: z(&l.k),
                    v: z(&l.v),
                    o: z(&l.o),
                    mlp_norm: vec![0.0; l.mlp_norm.len()],
                    gate: z(&l.gate),
                    up: z(&l.up),
                    down: z(&l.down),
                })
                .collect(),
            final_norm: vec![0.0; model.final_norm.len()],
            lm_head: z(&model.lm_head),
        }
    }

    /// Pairs every parameter buffer with its gradient, in a fixed order.
    fn zip_params<'a>(&'a self, model: &'a mut Model) -> Vec<(&'a mut [f32], &'a [f64])> {
        let mut out: Vec<(&mut [f32], &[f64])> = vec![
            (model.tok_emb.as_mut_slice(), &self.tok_emb),
            (model.pos_emb.as_mut_slice(), &self.pos_emb),
        ];
        for (layer, g) in model.layers.iter_mut().zip(&self.layers) {
            out.push((&mut layer.attn_norm, &g.attn_norm));
            out.push((layer.q.as_mut_slice(), &g.q));
            out.push((layer.k.as_mut_slice(), &g.k));
            out.push((layer.v.as_mut_slice(), &g.v));
            out.push((layer.o.as_mut_slice(), &g.o));
            out.push((&mut layer.mlp_norm, &g.mlp_norm));
            out.push((layer.gate.as_mut_slice(), &g.gate));
            out.push((layer.up.as_mut_slice(), &g.up));
            out.push((layer.down.as_mut_slice(), &g.down));
        }
        out.push((&mut model.final_norm, &self.final_norm));
        out.push((model.lm_head.as_mut_slice(), &self.lm_head));
        out
    }
}

/// Mean next-token cross-entropy over `tokens`; adds gradients scaled by
/// `1 / count` into `grads` when given.
fn loss_and_grads(model: &Model, tokens: &[Vec<u32>], mut grads: Option<&mut Grads>) -> f64 {
    let count: usize = tokens.iter().map(|s| s.len().saturating_sub(1)).sum();
    let mut total = 0.0;
    for seq in tokens {
        let cache = forward_seq(model, seq);
        let len = seq.len();
        let mut dlogits = vec![vec![0.0; model.config.vocab_size]; len];
        for t in 0..len.saturating_sub(1) {
            let logits = &cache.logits[t];
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let target = seq[t + 1] as usize;
            total += z.ln() + max - logits[target];
            for (dl, l) in dlogits[t].iter_mut().zip(logits) {
                *dl = (l - max).exp() / z / count as f64;
            }
            dlogits[t][target] -= 1.0 / count as f64;
        }
        if let Some(g) = grads.as_deref_mut() {
            backward_seq(model, seq, &cache, &dlogits, g);
        }
    }
    total / count.max(1) as f64
}

#[allow(clippy::needless_range_loop)]
fn backward_seq(
    model: &Model,
    tokens: &[u32],
    cache: &SeqCache,
    dlogits: &[Vec<f64>],
    g: &mut Grads,
) {
    let cfg = &model.config;
    let (d, dh) = (cfg.d_model, cfg.d_head());
    let len = tokens.len();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dx = vec![vec![0.0; d]; len];
    for t in 0..len {
        add_outer(&mut g.lm_head, &dlogits[t], &cache.f[t]);
        let df = linear_t(&model.lm_head, &dlogits[t]);
        rmsnorm_back(
            &cache.x_final[t],
            cache.r_final[t],
            &model.final_norm,
            &df,
            &mut dx[t],
            &mut g.final_norm,
        );
    }

    for (l, layer) in model.layers.iter().enumerate().rev() {
        let c = &cache.layers[l];
        let lg = &mut g.layers[l];

        // MLP block; dx holds the gradient at the block output.
        let mut dx_mid = dx.clone();
        for t in 0..len {
            add_outer(&mut lg.down, &dx[t], &c.hidden[t]);
            let dh_t = linear_t(&layer.down, &dx[t]);
            let mut dgate = vec![0.0; cfg.d_mlp];
            let mut dup = vec![0.0; cfg.d_mlp];
            for j in 0..cfg.d_mlp {
                let gj = c.gate[t][j];
                let s = sigmoid(gj);
                dup[j] = dh_t[j] * gj * s;
                dgate[j] = dh_t[j] * c.up[t][j] * s * (1.0 + gj * (1.0 - s));
            }
            add_outer(&mut lg.gate, &dgate, &c.m[t]);
            add_outer(&mut lg.up, &dup, &c.m[t]);
            let dm: Vec<f64> = linear_t(&layer.gate, &dgate)
                .iter()
                .zip(linear_t(&layer.up, &dup))
                .map(|(a, b)| a + b)
                .collect();
            rmsnorm_back(
                &c.x_mid[t],
                c.r_m[t],
                &layer.mlp_norm,
                &dm,
                &mut dx_mid[t],
                &mut lg.mlp_norm,
            );
        }

        // Attention block.
        let mut dx_in = dx_mid.clone();
        let mut dattn = Vec::with_capacity(len);
        for t in 0..len {
            add_outer(&mut lg.o, &dx_mid[t], &c.attn[t]);
            dattn.push(linear_t(&layer.o, &dx_mid[t]));
        }
        let mut dq = vec![vec![0.0; d]; len];
        let mut dk = vec![vec![0.0; d]; len];
        let mut dv = vec![vec![0.0; d]; len];
        for h in 0..cfg.n_heads {
            let hs = h * dh..(h + 1) * dh;
            for t in 0..len {
                let p = &c.probs[h][t];
                let dout = &dattn[t][hs.clone()];
                let dp: Vec<f64> = (0..=t)
                    .map(|u| {
                        dout.iter()
                            .zip(&c.v[u][hs.clone()])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                let mix: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for u in 0..=t {
                    for (dvj, dj) in dv[u][hs.clone()].iter_mut().zip(dout) {
                        *dvj += p[u] * dj;
                    }
                    let ds = p[u] * (dp[u] - mix) * scale;
                    for j in hs.clone() {
                        dq[t][j] += ds * c.k[u][j];
                        dk[u][j] += ds * c.q[t][j];
                    }
                }
            }
        }
        for t in 0..len {
            add_outer(&mut lg.q, &dq[t], &c.a[t]);
            add_outer(&mut lg.k, &dk[t], &c.a[t]);
            add_outer(&mut lg.v, &dv[t], &c.a[t]);
            let da: Vec<f64> = linear_t(&layer.q, &dq[t])
                .into_iter()
                .zip(linear_t(&layer.k, &dk[t]))
                .zip(linear_t(&layer.v, &dv[t]))
                .map(|((a, b), c)| a + b + c)
                .collect();
            rmsnorm_back(
                &c.x_in[t],
                c.r_a[t],
                &layer.attn_norm,
                &da,
                &mut dx_in[t],
                &mut lg.attn_norm,
            );
        }
        dx = dx_in;
    }

    for (t, &tok) in tokens.iter().enumerate() {
        let tok_row = &mut g.tok_emb[tok as usize * d..(tok as usize + 1) * d];
        tok_row.iter_mut().zip(&dx[t]).for_each(|(a, b)| *a += b);
        let pos_row = &mut g.pos_emb[t * d..(t + 1) * d];
        pos_row.iter_mut().zip(&dx[t]).for_each(|(a, b)| *a += b);
    }
}

/// Mean next-token cross-entropy of `model` on `tokens`.
pub fn loss(model: &Model, tokens: &[Vec<u32>]) -> Result<f64> {
    model.check_tokens(tokens)?;
    Ok(loss_and_grads(model, tokens, None))
}

/// Synthetic next-token corpora. Tokens are byte values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Streams of `a+b=c;` with `a, b < 100`.
    #[default]
    Arithmetic,
    /// Arithmetic sequences with their tokens shuffled within each sequence.
    Shuffled,
    /// Lowercase words separated by spaces; no digits or operators.
    Letters,
}

impl std::str::FromStr for SyntheticTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arithmetic" => Ok(Self::Arithmetic),
            "shuffled" => Ok(Self::Shuffled),
            "letters" => Ok(Self::Letters),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

impl std::fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Arithmetic => "arithmetic",
            Self::Shuffled => "shuffled",
            Self::Letters => "letters",
        })
    }
}

fn arithmetic_sequence(len: usize, rng: &mut Rng) -> Vec<u32> {
    let mut text = String::new();
    let skip = rng.below(12);
    while text.len() < len + skip {
        let (a, b) = (rng.below(100), rng.below(100));
        text.push_str(&format!("{a}+{b}={};", a + b));
    }
    text.bytes().skip(skip).take(len).map(u32::from).collect()
}

/// `batch` sequences of `len` tokens.
pub fn synthetic_batch(
    task: SyntheticTask,
    batch: usize,
    len: usize,
    rng: &mut Rng,
) -> Vec<Vec<u32>> {
    (0..batch)
        .map(|_| match task {
            SyntheticTask::Arithmetic => arithmetic_sequence(len, rng),
            SyntheticTask::Shuffled => {
                let mut s = arithmetic_sequence(len, rng);
                for i in (1..s.len()).rev() {
                    s.swap(i, rng.below(i + 1));
                }
                s
            }
            SyntheticTask::Letters => {
                let mut s = Vec::with_capacity(len);
                while s.len() < len {
                    for _ in 0..2 + rng.below(5) {
                        s.push(u32::from(b'a') + rng.below(26) as u32);
                    }
                    s.push(u32::from(b' '));
                }
                s.truncate(len);
                s
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: SyntheticTask,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub adam: AdamParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTask::Arithmetic,
            steps: 500,
            batch: 8,
            seq_len: 32,
            adam: AdamParams {
                lr: 3e-3,
                ..AdamParams::default()
            },
            seed: 0,
        }
    }
}

/// Trains with Adam on fresh synthetic batches. Returns the loss per step.
/// A non-finite loss or weight is reported as [`Error::Diverged`].
pub fn train_toy(model: &mut Model, config: &TrainConfig) -> Result<Vec<f64>> {
    let mut rng = Rng::new(config.seed).substream(&format!("train-{}", config.task));
    let mut states: Option<Vec<AdamState>> = None;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let tokens = synthetic_batch(config.task, config.batch, config.seq_len, &mut rng);
        model.check_tokens(&tokens)?;
        let mut grads = Grads::zeros(model);
        let l = loss_and_grads(model, &tokens, Some(&mut grads));
        if !l.is_finite() {
            return Err(Error::Diverged { step, loss: l });
        }
        losses.push(l);
        let pairs = grads.zip_params(model);
        let states = states
            .get_or_insert_with(|| pairs.iter().map(|(p, _)| AdamState::new(p.len())).collect());
        for ((param, grad), state) in pairs.into_iter().zip(states.iter_mut()) {
            let mut p: Vec<f64> = param.iter().map(|x| *x as f64).collect();
            adam_step(&mut p, grad, state, &config.adam)?;
            for (dst, src) in param.iter_mut().zip(&p) {
                *dst = *src as f32;
                if !dst.is_finite() {
                    return Err(Error::Diverged { step, loss: l });
                }
            }
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nfn::nfn_dataset;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 12,
            vocab_size: 16,
            max_seq_len: 8,
            seed: 3,
        }
    }

    #[test]
    fn module_counting_and_shapes() {
        let cfg = TransformerConfig::default();
        let m = build_model(&cfg).unwrap();
        let mods = m.linear_modules();
        assert_eq!(mods.len(), 14);
        assert_eq!(mods[0].0, "layers.0.attn.q_proj");
        assert_eq!(mods[13].0, "layers.1.mlp.down_proj");
        for (_, _, t, w) in &mods {
            if matches!(t, ModuleType::Query | ModuleType::Key | ModuleType::Value) {
                assert_eq!(w.cols(), 64);
            }
        }
        assert_eq!(m, build_model(&cfg).unwrap());
        assert!(build_model(&TransformerConfig { n_heads: 3, ..cfg }).is_err());
    }

    #[test]
    fn capture_counts_and_identities() {
        let m = build_model(&tiny()).unwrap();
        let mut rng = Rng::new(1);
        let tokens: Vec<Vec<u32>> = (0..2)
            .map(|_| (0..8).map(|_| rng.below(16) as u32).collect())
            .collect();
        let (logits, cap) = forward_with_capture(&m, &tokens, None).unwrap();
        assert_eq!(cap.len(), 14);
        for (name, batch) in &cap {
            assert_eq!(batch.len(), 16, "{name}");
        }
        for l in 0..2 {
            let q = &cap[&module_name(l, ModuleType::Query)];
            let k = &cap[&module_name(l, ModuleType::Key)];
            let v = &cap[&module_name(l, ModuleType::Value)];
            assert_eq!(q.inputs(), k.inputs());
            assert_eq!(q.inputs(), v.inputs());
            assert_eq!(
                cap[&module_name(l, ModuleType::GateProj)].inputs(),
                cap[&module_name(l, ModuleType::UpProj)].inputs()
            );
            assert_eq!(cap[&module_name(l, ModuleType::DownProj)].input_dim(), 12);
        }
        assert_eq!(logits.len(), 2);
        assert_eq!(logits[0].len(), 8);
        assert_eq!(logits[0][0].len(), 16);
    }

    #[test]
    fn causality() {
        let m = build_model(&tiny()).unwrap();
        let a = vec![vec![1, 2, 3, 4, 5, 6, 7, 8]];
        let mut b = a.clone();
        b[0][5] = 0;
        let (la, _) = forward_with_capture(&m, &a, None).unwrap();
        let (lb, _) = forward_with_capture(&m, &b, None).unwrap();
        for t in 0..5 {
            assert_eq!(la[0][t], lb[0][t]);
        }
        assert_ne!(la[0][5], lb[0][5]);
    }

    #[test]
    fn token_validation() {
        let m = build_model(&tiny()).unwrap();
        let err = forward_with_capture(&m, &[vec![1, 16]], None).unwrap_err();
        assert!(matches!(
            err,
            Error::TokenOutOfRange {
                token: 16,
                sequence: 0,
                position: 1,
                vocab: 16
            }
        ));
        assert!(forward_with_capture(&m, &[vec![1; 9]], None).is_err());
        assert!(forward_with_capture(&m, &[], None).is_err());
    }

    #[test]
    fn pad_mask_records_zeros() {
        let m = build_model(&tiny()).unwrap();
        let tokens = vec![vec![1, 2, 3, 0, 0], vec![4, 5, 6, 7, 0]];
        let mask = vec![
            vec![true, true, true, false, false],
            vec![true, true, true, true, false],
        ];
        let (_, cap) = forward_with_capture(&m, &tokens, Some(&mask)).unwrap();
        let w = m.layers[0].q.clone();
        let batch = &cap[&module_name(0, ModuleType::Query)];
        let s = nfn_dataset(&w, batch, 2, &Rng::new(0), Convention::Squared).unwrap();
        assert_eq!(s.n_samples + s.n_skipped, 10);
        assert_eq!(s.n_samples, 7);
    }

    #[test]
    fn identity_query_scores_one() {
        let mut m = build_model(&TransformerConfig {
            seed: 5,
            ..TransformerConfig::default()
        })
        .unwrap();
        m.layers[0].q = Matrix::identity(64).unwrap();
        m.layers[1].q = Matrix::identity(64).unwrap();
        let tokens = synthetic_batch(SyntheticTask::Arithmetic, 2, 16, &mut Rng::new(2));
        let (_, map) = nfn_map(&m, &tokens, 4, 0, Convention::Squared).unwrap();
        for l in 0..2 {
            assert!((map.get(l, ModuleType::Query).unwrap() - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn fresh_model_scores_are_near_one() {
        let m = build_model(&TransformerConfig::default()).unwrap();
        let tokens = synthetic_batch(SyntheticTask::Arithmetic, 4, 32, &mut Rng::new(9));
        let (_, map) = nfn_map(&m, &tokens, 4, 1, Convention::Squared).unwrap();
        let table = map.type_table().unwrap();
        let means: Vec<f64> = table.iter().map(|(_, e)| e.mean).collect();
        for row in &map.scores {
            for s in row {
                assert!((0.5..=2.0).contains(s), "{s}");
            }
        }
        let (lo, hi) = means
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(*x), b.max(*x)));
        assert!(hi / lo <= 2.0);
    }

    #[test]
    fn tensors_round_trip() {
        let m = build_model(&tiny()).unwrap();
        let back = Model::from_tensors(&tiny(), &m.to_tensors().unwrap()).unwrap();
        assert_eq!(m, back);
    }

    /// Straightforward single-sequence reference: same arithmetic, written
    /// position by position without the capture machinery.
    fn reference_logits(model: &Model, seq: &[u32]) -> Vec<Vec<f32>> {
        let cfg = &model.config;
        let dh = cfg.d_head();
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut keys = vec![Vec::new(); cfg.n_layers];
        let mut values = vec![Vec::new(); cfg.n_layers];
        let mut out = Vec::new();
        for (p, &tok) in seq.iter().enumerate() {
            let mut x: Vec<f64> = (0..cfg.d_model)
                .map(|j| model.tok_emb.get(tok as usize, j) as f64 + model.pos_emb.get(p, j) as f64)
                .collect();
            for (l, layer) in model.layers.iter().enumerate() {
                let (a, _) = rmsnorm(&x, &layer.attn_norm);
                let q = linear(&layer.q, &a);
                keys[l].push(linear(&layer.k, &a));
                values[l].push(linear(&layer.v, &a));
                let (ks, vs): (&Vec<Vec<f64>>, &Vec<Vec<f64>>) = (&keys[l], &values[l]);
                let mut attn = vec![0.0; cfg.d_model];
                for h in 0..cfg.n_heads {
                    let r = h * dh..(h + 1) * dh;
                    let scores: Vec<f64> = ks
                        .iter()
                        .map(|k| {
                            q[r.clone()]
                                .iter()
                                .zip(&k[r.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (u, v) in vs.iter().enumerate() {
                        let pu = e[u] / z;
                        for j in r.clone() {
                            attn[j] += pu * v[j];
                        }
                    }
                }
                let o = linear(&layer.o, &attn);
                x.iter_mut().zip(o).for_each(|(a, b)| *a += b);
                let (m, _) = rmsnorm(&x, &layer.mlp_norm);
                let h: Vec<f64> = linear(&layer.gate, &m)
                    .into_iter()
                    .zip(linear(&layer.up, &m))
                    .map(|(g, u)| silu(g) * u)
                    .collect();
                x.iter_mut()
                    .zip(linear(&layer.down, &h))
                    .for_each(|(a, b)| *a += b);
            }
            let (f, _) = rmsnorm(&x, &model.final_norm);
            out.push(
                linear(&model.lm_head, &f)
                    .into_iter()
                    .map(|v| v as f32)
                    .collect(),
            );
            xs.push(x);
        }
        out
    }

    #[test]
    fn forward_matches_reference_bitwise() {
        let m = build_model(&tiny()).unwrap();
        let seq = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let (logits, _) = forward_with_capture(&m, std::slice::from_ref(&seq), None).unwrap();
        assert_eq!(logits[0], reference_logits(&m, &seq));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = build_model(&tiny()).unwrap();
        // Non-unit gains so their gradients are exercised too.
        for (i, g) in m.layers[0].attn_norm.iter_mut().enumerate() {
            *g = 1.0 + 0.1 * i as f32;
        }
        let tokens = vec![vec![1, 2, 3, 4, 5, 6], vec![7, 7, 8, 9, 10, 11]];
        let mut g = Grads::zeros(&m);
        loss_and_grads(&m, &tokens, Some(&mut g));
        let analytic: Vec<Vec<f64>> = g
            .zip_params(&mut m.clone())
            .iter()
            .map(|(_, g)| g.to_vec())
            .collect();

        let n_params = analytic.len();
        for pi in 0..n_params {
            let len = analytic[pi].len();
            for &idx in &[0, len / 2, len - 1] {
                let probe = |delta: f32| {
                    let mut mm = m.clone();
                    let gg = Grads::zeros(&mm);
                    let mut pairs = gg.zip_params(&mut mm);
                    let p = &mut pairs[pi].0[idx];
                    let old = *p;
                    *p = old + delta;
                    let actual = *p - old;
                    drop(pairs);
                    (loss_and_grads(&mm, &tokens, None), actual)
                };
                let (lp, hp) = probe(1e-3);
                let (lm, hm) = probe(-1e-3);
                let fd = (lp - lm) / (hp - hm) as f64;
                let an = analytic[pi][idx];
                assert!(
                    (fd - an).abs() <= 1e-3 * an.abs().max(1e-2),
                    "param {pi} index {idx}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_zero_steps_is_noop() {
        let cfg = TransformerConfig {
            d_model: 32,
            d_mlp: 64,
            ..TransformerConfig::default()
        };
        let mut m = build_model(&cfg).unwrap();
        let before = m.clone();
        train_toy(
            &mut m,
            &TrainConfig {
                steps: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(m, before);
        let losses = train_toy(
            &mut m,
            &TrainConfig {
                steps: 60,
                batch: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let head = losses[..5].iter().sum::<f64>() / 5.0;
        let tail = losses[55..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.8 * head, "{head} -> {tail}");
    }

    #[test]
    fn synthetic_tasks() {
        let mut rng = Rng::new(0);
        let a = synthetic_batch(SyntheticTask::Arithmetic, 2, 32, &mut rng);
        assert!(a.iter().all(|s| s.len() == 32));
        let text = String::from_utf8(a[0].iter().map(|&t| t as u8).collect()).unwrap();
        assert!(
            text.chars()
                .all(|c| c.is_ascii_digit() || "+=;".contains(c)),
            "{text}"
        );
        let l = synthetic_batch(SyntheticTask::Letters, 2, 32, &mut rng);
        assert!(l
            .iter()
            .flatten()
            .all(|&t| t == 32 || (97..123).contains(&t)));
        let s = synthetic_batch(SyntheticTask::Shuffled, 1, 32, &mut rng);
        assert_eq!(s[0].len(), 32);
    }
}

//! Module-type aggregation and LoRA target selection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nfn::NfnScore;

/// Types selected when no `k` is given.
pub const DEFAULT_K: usize = 3;

/// The seven linear projections of a Llama-style block, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleType {
    #[serde(rename = "q_proj")]
    Query,
    #[serde(rename = "k_proj")]
    Key,
    #[serde(rename = "v_proj")]
    Value,
    #[serde(rename = "o_proj")]
    OutProj,
    #[serde(rename = "gate_proj")]
    GateProj,
    #[serde(rename = "up_proj")]
    UpProj,
    #[serde(rename = "down_proj")]
    DownProj,
}

impl ModuleType {
    pub const ALL: [ModuleType; 7] = [
        ModuleType::Query,
        ModuleType::Key,
        ModuleType::Value,
        ModuleType::OutProj,
        ModuleType::GateProj,
        ModuleType::UpProj,
        ModuleType::DownProj,
    ];

    /// Order used by the text report.
    pub const REPORT_ORDER: [ModuleType; 7] = [
        ModuleType::Query,
        ModuleType::Key,
        ModuleType::Value,
        ModuleType::OutProj,
        ModuleType::GateProj,
        ModuleType::DownProj,
        ModuleType::UpProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModuleType::Query => "q_proj",
            ModuleType::Key => "k_proj",
            ModuleType::Value => "v_proj",
            ModuleType::OutProj => "o_proj",
            ModuleType::GateProj => "gate_proj",
            ModuleType::UpProj => "up_proj",
            ModuleType::DownProj => "down_proj",
        }
    }

    /// Index into [`ModuleType::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_attention(self) -> bool {
        self.index() < 4
    }
}

impl fmt::Display for ModuleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModuleType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModuleType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown module type {s:?}")))
    }
}

/// Extra name suffixes for checkpoints that do not use the canonical names,
/// e.g. `"attention.wq" -> Query`.
pub type AliasMap = BTreeMap<String, ModuleType>;

fn has_suffix_at_boundary(name: &str, suffix: &str) -> bool {
    name.strip_suffix(suffix)
        .is_some_and(|head| head.is_empty() || head.ends_with(['.', '/']))
}

/// Resolves a module name by suffix. Aliases win over canonical names and
/// longer aliases win over shorter ones.
pub fn resolve_module_type(name: &str, aliases: &AliasMap) -> Option<ModuleType> {
    let alias = aliases
        .iter()
        .filter(|(suffix, _)| has_suffix_at_boundary(name, suffix))
        .max_by_key(|(suffix, _)| suffix.len())
        .map(|(_, t)| *t);
    alias.or_else(|| {
        ModuleType::ALL
            .into_iter()
            .find(|t| has_suffix_at_boundary(name, t.name()))
    })
}

/// Layer index from names like `layers.7.attn.q_proj` or `model.layers.7.self_attn.q_proj`.
pub fn parse_layer_index(name: &str) -> Option<usize> {
    let mut parts = name.split(['.', '/']);
    while let Some(p) = parts.next() {
        if p == "layers" || p == "h" || p == "blocks" {
            return parts.next()?.parse().ok();
        }
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeEntry {
    pub mean: f64,
    pub n_modules: usize,
}

/// Mean score per module type.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeScoreTable {
    entries: BTreeMap<ModuleType, TypeEntry>,
}

impl TypeScoreTable {
    /// Table from given means, each counted as one module.
    pub fn from_means(means: &[(ModuleType, f64)]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for &(t, mean) in means {
            if !mean.is_finite() || mean <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{t}: score {mean} is not a positive finite number"
                )));
            }
            if entries
                .insert(t, TypeEntry { mean, n_modules: 1 })
                .is_some()
            {
                return Err(Error::InvalidArgument(format!("{t} listed twice")));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, t: ModuleType) -> Option<TypeEntry> {
        self.entries.get(&t).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in canonical type order.
    pub fn iter(&self) -> impl Iterator<Item = (ModuleType, TypeEntry)> + '_ {
        self.entries.iter().map(|(t, e)| (*t, *e))
    }

    /// Every mean multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(t, e)| {
                    (
                        *t,
                        TypeEntry {
                            mean: e.mean * c,
                            ..*e
                        },
                    )
                })
                .collect(),
        }
    }

    /// Means keyed by canonical name, in canonical order.
    pub fn snapshot(&self) -> IndexMap<String, f64> {
        self.iter()
            .map(|(t, e)| (t.name().to_string(), e.mean))
            .collect()
    }
}

/// Unweighted mean of module scores per type.
///
/// Scores are summed in sorted order so the result does not depend on the
/// order of `scores`.
pub fn aggregate_by_type(scores: &[NfnScore], aliases: &AliasMap) -> Result<TypeScoreTable> {
    let named: Vec<(&str, f64)> = scores
        .iter()
        .map(|s| (s.module_name.as_str(), s.score as f64))
        .collect();
    aggregate_named(&named, aliases)
}

/// [`aggregate_by_type`] over bare `(module name, score)` pairs.
pub fn aggregate_named(scores: &[(&str, f64)], aliases: &AliasMap) -> Result<TypeScoreTable> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument(
            "no module scores to aggregate".into(),
        ));
    }
    let mut unresolved = Vec::new();
    let mut groups: BTreeMap<ModuleType, Vec<f64>> = BTreeMap::new();
    for &(name, score) in scores {
        match resolve_module_type(name, aliases) {
            Some(t) => groups.entry(t).or_default().push(score),
            None => unresolved.push(name.to_string()),
        }
    }
    if !unresolved.is_empty() {
        return Err(Error::UnresolvedModules(unresolved));
    }
    let entries = groups
        .into_iter()
        .map(|(t, mut xs)| {
            xs.sort_by(f64::total_cmp);
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            (
                t,
                TypeEntry {
                    mean,
                    n_modules: xs.len(),
                },
            )
        })
        .collect();
    Ok(TypeScoreTable { entries })
}

fn ranked(table: &TypeScoreTable, k: usize, descending: bool) -> Result<Vec<ModuleType>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > table.len() {
        return Err(Error::TooManyTypes {
            k,
            available: table.len(),
        });
    }
    let mut items: Vec<(ModuleType, f64)> = table.iter().map(|(t, e)| (t, e.mean)).collect();
    items.sort_by(|a, b| {
        let by_score = if descending {
            b.1.total_cmp(&a.1)
        } else {
            a.1.total_cmp(&b.1)
        };
        by_score.then(a.0.cmp(&b.0))
    });
    Ok(items.into_iter().take(k).map(|(t, _)| t).collect())
}

/// The `k` lowest-scoring types, ascending. Ties go to canonical order.
pub fn select_lowest(table: &TypeScoreTable, k: usize) -> Result<Vec<ModuleType>> {
    ranked(table, k, false)
}

/// The `k` highest-scoring types, descending. Ties go to canonical order.
pub fn select_highest(table: &TypeScoreTable, k: usize) -> Result<Vec<ModuleType>> {
    ranked(table, k, true)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Plop,
    PlopInverse,
    Attn,
    Mlp,
    All,
}

impl Strategy {
    /// Types for the score-independent strategies.
    pub fn fixed_types(self) -> Option<Vec<ModuleType>> {
        use ModuleType::*;
        match self {
            Strategy::Attn => Some(vec![Query, Key, Value]),
            Strategy::Mlp => Some(vec![GateProj, UpProj, DownProj]),
            Strategy::All => Some(ModuleType::ALL.to_vec()),
            Strategy::Plop | Strategy::PlopInverse => None,
        }
    }

    /// Selection under this strategy. `k` is ignored by fixed strategies.
    pub fn select(self, table: &TypeScoreTable, k: usize) -> Result<Vec<ModuleType>> {
        match self {
            Strategy::Plop => select_lowest(table, k),
            Strategy::PlopInverse => select_highest(table, k),
            fixed => Ok(fixed.fixed_types().unwrap_or_default()),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plop" => Ok(Strategy::Plop),
            "plop_inverse" => Ok(Strategy::PlopInverse),
            "attn" => Ok(Strategy::Attn),
            "mlp" => Ok(Strategy::Mlp),
            "all" => Ok(Strategy::All),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Plop => "plop",
            Strategy::PlopInverse => "plop_inverse",
            Strategy::Attn => "attn",
            Strategy::Mlp => "mlp",
            Strategy::All => "all",
        })
    }
}

/// Where a plan's scores came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub dataset: Option<String>,
    /// Digest of the activation bundle the scores were computed from.
    pub created_from: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub strategy: Strategy,
    pub k: usize,
    pub rank: u32,
    pub alpha: u32,
    pub target_modules: Vec<ModuleType>,
    pub scores: IndexMap<String, f64>,
    pub seed: Option<u64>,
    pub created_from: Option<String>,
    pub dataset: Option<String>,
}

impl PlacementPlan {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Wraps a selection into a plan. `alpha` defaults to `2 * rank`.
pub fn emit_plan(
    selection: &[ModuleType],
    rank: u32,
    alpha: Option<u32>,
    strategy: Strategy,
    table: &TypeScoreTable,
    provenance: Provenance,
) -> Result<PlacementPlan> {
    if selection.is_empty() {
        return Err(Error::InvalidArgument("empty selection".into()));
    }
    if rank == 0 {
        return Err(Error::InvalidArgument("LoRA rank must be positive".into()));
    }
    for (i, t) in selection.iter().enumerate() {
        if selection[..i].contains(t) {
            return Err(Error::InvalidArgument(format!("{t} selected twice")));
        }
    }
    let alpha = match alpha {
        Some(0) => return Err(Error::InvalidArgument("alpha must be positive".into())),
        Some(a) => a,
        None => rank
            .checked_mul(2)
            .ok_or_else(|| Error::InvalidArgument(format!("rank {rank} too large")))?,
    };
    Ok(PlacementPlan {
        strategy,
        k: selection.len(),
        rank,
        alpha,
        target_modules: selection.to_vec(),
        scores: table.snapshot(),
        seed: provenance.seed,
        created_from: provenance.created_from,
        dataset: provenance.dataset,
    })
}

/// Selection plus plan in one call.
pub fn plan(
    table: &TypeScoreTable,
    strategy: Strategy,
    k: usize,
    rank: u32,
    provenance: Provenance,
) -> Result<PlacementPlan> {
    let selection = strategy.select(table, k)?;
    emit_plan(&selection, rank, None, strategy, table, provenance)
}

const RULE: &str = "===========================";

/// Fixed-width per-type block with two-decimal scores.
pub fn type_report(table: &TypeScoreTable) -> String {
    let mut out = format!("{RULE}\n NFN Scores by Module Type\n{RULE}\n");
    for t in ModuleType::REPORT_ORDER {
        if let Some(e) = table.get(t) {
            out.push_str(&format!(" {}: {:.2}\n", t.name(), e.mean));
        }
    }
    out.push_str(RULE);
    out.push('\n');
    out
}

//! Layer-by-type NFN maps and their CSV, SVG and text exports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nfn::{Convention, NfnScore};
use crate::placement::{
    aggregate_named, parse_layer_index, resolve_module_type, AliasMap, ModuleType, TypeScoreTable,
};

/// Clamp range of the SVG color scale; 1.0 maps to white.
pub const COLOR_RANGE: (f64, f64) = (0.5, 3.0);

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapMetadata {
    pub seed: Option<u64>,
    pub dataset: Option<String>,
    pub m: Option<usize>,
    pub convention: Convention,
}

/// Scores on a `layers x types` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfnMap {
    pub layers: usize,
    pub types: Vec<ModuleType>,
    /// Row-major, one row per layer.
    pub scores: Vec<Vec<f32>>,
    pub metadata: MapMetadata,
}

impl NfnMap {
    pub fn new(
        types: Vec<ModuleType>,
        scores: Vec<Vec<f32>>,
        metadata: MapMetadata,
    ) -> Result<Self> {
        if types.is_empty() || scores.is_empty() {
            return Err(Error::InvalidShape("empty NFN map".into()));
        }
        for (l, row) in scores.iter().enumerate() {
            if row.len() != types.len() {
                return Err(Error::DimensionMismatch {
                    op: "NfnMap::new",
                    expected: types.len(),
                    actual: row.len(),
                });
            }
            if let Some(bad) = row.iter().find(|s| !s.is_finite()) {
                return Err(Error::NonFinite {
                    index: l,
                    value: *bad as f64,
                });
            }
        }
        Ok(Self {
            layers: scores.len(),
            types,
            scores,
            metadata,
        })
    }

    /// Places per-module scores by layer index and module type. Every cell
    /// of the resulting grid must be filled exactly once.
    pub fn from_scores(
        scores: &[NfnScore],
        aliases: &AliasMap,
        metadata: MapMetadata,
    ) -> Result<Self> {
        let mut unresolved = Vec::new();
        let mut placed = Vec::new();
        for s in scores {
            match (
                resolve_module_type(&s.module_name, aliases),
                parse_layer_index(&s.module_name),
            ) {
                (Some(t), Some(l)) => placed.push((l, t, s.score)),
                _ => unresolved.push(s.module_name.clone()),
            }
        }
        if !unresolved.is_empty() {
            return Err(Error::UnresolvedModules(unresolved));
        }
        let layers = placed.iter().map(|p| p.0).max().map_or(0, |l| l + 1);
        let types: Vec<ModuleType> = ModuleType::ALL
            .into_iter()
            .filter(|t| placed.iter().any(|p| p.1 == *t))
            .collect();
        let mut grid = vec![vec![None; types.len()]; layers];
        for (l, t, s) in placed {
            let col = types.iter().position(|x| *x == t).expect("type present");
            if grid[l][col].replace(s).is_some() {
                return Err(Error::InvalidShape(format!(
                    "two modules for layer {l} {t}"
                )));
            }
        }
        let grid = grid
            .into_iter()
            .enumerate()
            .map(|(l, row)| {
                row.into_iter()
                    .zip(&types)
                    .map(|(s, t)| {
                        s.ok_or_else(|| Error::InvalidShape(format!("no score for layer {l} {t}")))
                    })
                    .collect::<Result<Vec<f32>>>()
            })
            .collect::<Result<_>>()?;
        Self::new(types, grid, metadata)
    }

    pub fn get(&self, layer: usize, t: ModuleType) -> Option<f32> {
        let col = self.types.iter().position(|x| *x == t)?;
        self.scores.get(layer).map(|row| row[col])
    }

    /// Per-type means over layers.
    pub fn type_table(&self) -> Result<TypeScoreTable> {
        let named: Vec<(String, f64)> = self
            .scores
            .iter()
            .enumerate()
            .flat_map(|(l, row)| {
                row.iter()
                    .zip(&self.types)
                    .map(move |(s, t)| (format!("layers.{l}.{t}"), *s as f64))
            })
            .collect();
        let refs: Vec<(&str, f64)> = named.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        aggregate_named(&refs, &AliasMap::new())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for t in &self.types {
            let _ = write!(out, ",{t}");
        }
        out.push('\n');
        for (l, row) in self.scores.iter().enumerate() {
            let _ = write!(out, "{l}");
            for s in row {
                let _ = write!(out, ",{s}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`NfnMap::to_csv`] output. Metadata is not stored in CSV.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty CSV".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("layer") {
            return Err(Error::Format("CSV header must start with \"layer\"".into()));
        }
        let types = cols
            .map(|c| c.trim().parse())
            .collect::<Result<Vec<ModuleType>>>()?;
        let mut scores = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',');
            let layer: usize = cells
                .next()
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("row {}: bad layer index", i + 1)))?;
            if layer != i {
                return Err(Error::Format(format!(
                    "row {}: expected layer {i}, got {layer}",
                    i + 1
                )));
            }
            let row = cells
                .map(|c| {
                    c.trim()
                        .parse::<f32>()
                        .map_err(|e| Error::Format(format!("row {}: {e}", i + 1)))
                })
                .collect::<Result<Vec<f32>>>()?;
            scores.push(row);
        }
        Self::new(types, scores, MapMetadata::default())
    }

    pub fn to_svg(&self) -> String {
        const CELL_W: usize = 72;
        const CELL_H: usize = 26;
        const LEFT: usize = 70;
        const TOP: usize = 30;
        let width = LEFT + CELL_W * self.types.len() + 10;
        let height = TOP + CELL_H * self.layers + 10;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">"#
        );
        for (c, t) in self.types.iter().enumerate() {
            let x = LEFT + c * CELL_W + CELL_W / 2;
            let _ = writeln!(
                out,
                r#"<text x="{x}" y="{}" text-anchor="middle">{t}</text>"#,
                TOP - 10
            );
        }
        for (l, row) in self.scores.iter().enumerate() {
            let y = TOP + l * CELL_H;
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="end">layer {l}</text>"#,
                LEFT - 6,
                y + CELL_H / 2 + 4
            );
            for (c, s) in row.iter().enumerate() {
                let x = LEFT + c * CELL_W;
                let _ = writeln!(
                    out,
                    r##"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{}" stroke="#888888" stroke-width="0.5"/>"##,
                    score_color(*s as f64)
                );
                let _ = writeln!(
                    out,
                    r#"<text x="{}" y="{}" text-anchor="middle">{s:.2}</text>"#,
                    x + CELL_W / 2,
                    y + CELL_H / 2 + 4
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }

    pub fn to_text(&self) -> Result<String> {
        Ok(crate::placement::type_report(&self.type_table()?))
    }
}

/// Diverging color: blue below 1, white at 1, red above, clamped to
/// [`COLOR_RANGE`].
pub fn score_color(score: f64) -> String {
    const BLUE: [f64; 3] = [33.0, 102.0, 172.0];
    const RED: [f64; 3] = [178.0, 24.0, 43.0];
    let (lo, hi) = COLOR_RANGE;
    let s = score.clamp(lo, hi);
    let (end, t) = if s < 1.0 {
        (BLUE, (1.0 - s) / (1.0 - lo))
    } else {
        (RED, (s - 1.0) / (hi - 1.0))
    };
    let ch = |k: usize| (255.0 + (end[k] - 255.0) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", ch(0), ch(1), ch(2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Svg,
    Text,
}

impl ExportFormat {
    pub const ALL: [Self; 3] = [Self::Csv, Self::Svg, Self::Text];

    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Svg => "svg",
            Self::Text => "txt",
        }
    }
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "svg" => Ok(Self::Svg),
            "text" | "txt" => Ok(Self::Text),
            other => Err(Error::InvalidArgument(format!(
                "unknown export format {other:?}"
            ))),
        }
    }
}

pub fn export_map(map: &NfnMap, format: ExportFormat) -> Result<String> {
    match format {
        ExportFormat::Csv => Ok(map.to_csv()),
        ExportFormat::Svg => Ok(map.to_svg()),
        ExportFormat::Text => map.to_text(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ModuleType::*;

    fn grid(layers: usize, f: impl Fn(usize, usize) -> f32) -> NfnMap {
        let scores = (0..layers)
            .map(|l| (0..7).map(|c| f(l, c)).collect())
            .collect();
        NfnMap::new(ModuleType::ALL.to_vec(), scores, MapMetadata::default()).unwrap()
    }

    #[test]
    fn colors() {
        assert_eq!(score_color(1.0), "#ffffff");
        assert_eq!(score_color(0.5), "#2166ac");
        assert_eq!(score_color(0.1), "#2166ac");
        assert_eq!(score_color(3.0), "#b2182b");
        assert_eq!(score_color(9.0), "#b2182b");
    }

    #[test]
    fn all_ones_svg_is_neutral() {
        let svg = grid(3, |_, _| 1.0).to_svg();
        let fills: Vec<&str> = svg
            .match_indices("fill=\"#")
            .map(|(i, _)| &svg[i + 6..i + 13])
            .collect();
        assert_eq!(fills.len(), 21);
        assert!(fills.iter().all(|f| *f == "#ffffff"));
    }

    #[test]
    fn exports_are_pure() {
        let m = grid(4, |l, c| 0.5 + (l * 7 + c) as f32 * 0.1);
        for f in [ExportFormat::Csv, ExportFormat::Svg, ExportFormat::Text] {
            assert_eq!(
                export_map(&m, f).unwrap(),
                export_map(&m.clone(), f).unwrap()
            );
        }
    }

    #[test]
    fn csv_round_trip() {
        let m = grid(5, |l, c| {
            1.0 / (1.0 + l as f32 + c as f32 * 0.37) + 0.123_456_79
        });
        let back = NfnMap::from_csv(&m.to_csv()).unwrap();
        assert_eq!(back.scores, m.scores);
        assert_eq!(back.types, m.types);
        assert!(m
            .to_csv()
            .starts_with("layer,q_proj,k_proj,v_proj,o_proj,gate_proj,up_proj,down_proj\n0,"));
        assert!(NfnMap::from_csv("layer,q_proj\n1,2.0\n").is_err());
        assert!(NfnMap::from_csv("x,q_proj\n0,2.0\n").is_err());
    }

    #[test]
    fn text_block_from_map() {
        let vals = [2.58f32, 2.63, 0.97, 0.90, 1.40, 1.11, 1.05];
        let m = grid(2, |_, c| vals[c]);
        let text = m.to_text().unwrap();
        assert!(text.contains(" q_proj: 2.58\n k_proj: 2.63\n v_proj: 0.97\n o_proj: 0.90\n gate_proj: 1.40\n down_proj: 1.05\n up_proj: 1.11\n"));
    }

    fn score(name: &str, s: f32) -> NfnScore {
        NfnScore {
            module_name: name.into(),
            score: s,
            n_samples: 1,
            n_skipped: 0,
            mean_feature_sqnorm: 1.0,
            mean_baseline_sqnorm: 1.0,
            m_baseline_draws: 1,
            convention: Convention::Squared,
        }
    }

    #[test]
    fn from_scores_places_cells() {
        let mut scores = Vec::new();
        for l in 0..2 {
            for t in ModuleType::ALL {
                scores.push(score(
                    &format!("layers.{l}.x.{t}"),
                    l as f32 + t.index() as f32 / 10.0 + 0.5,
                ));
            }
        }
        scores.reverse();
        let m = NfnMap::from_scores(&scores, &AliasMap::new(), MapMetadata::default()).unwrap();
        assert_eq!((m.layers, m.types.len()), (2, 7));
        assert_eq!(m.get(1, DownProj), Some(1.0 + 0.6 + 0.5));
        scores.pop();
        assert!(NfnMap::from_scores(&scores, &AliasMap::new(), MapMetadata::default()).is_err());
        scores.push(score("lm_head", 1.0));
        assert!(matches!(
            NfnMap::from_scores(&scores, &AliasMap::new(), MapMetadata::default()),
            Err(Error::UnresolvedModules(_))
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(NfnMap::new(vec![Query], vec![vec![f32::NAN]], MapMetadata::default()).is_err());
        assert!(NfnMap::new(vec![Query, Key], vec![vec![1.0]], MapMetadata::default()).is_err());
    }
}

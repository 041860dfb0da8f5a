//! The audit grid and its three renderings: aligned text tables, CSV, JSON.
//!
//! Averages are taken first over context lengths, then over pruning levels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::PruneStrategy;

pub const BASELINE: &str = "baseline";
/// CSV `level` value for the baseline, which belongs to no level.
pub const NO_LEVEL: &str = "-";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelInfo {
    /// Short label, `L1` or `L2`.
    pub label: String,
    /// Section heading, e.g. `Lesser Pruning`.
    pub name: String,
    pub fraction: f64,
}

impl LevelInfo {
    /// Labels and headings for an ordered list of level fractions.
    pub fn for_fractions(fractions: &[f64]) -> Vec<LevelInfo> {
        let names = ["Lesser Pruning", "Higher Pruning"];
        fractions
            .iter()
            .enumerate()
            .map(|(i, &fraction)| LevelInfo {
                label: format!("L{}", i + 1),
                name: names
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("Level {}", i + 1)),
                fraction,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationInfo {
    pub name: String,
    pub records: usize,
    pub requested: usize,
    pub sampled: usize,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationCell {
    pub population: String,
    /// `baseline` or a strategy id.
    pub strategy: String,
    /// Level label; `None` for the baseline.
    pub level: Option<String>,
    pub k: usize,
    pub evaluated: usize,
    pub extracted: usize,
    pub skipped: usize,
    /// `None` when the variant's checkpoint was missing.
    pub fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityCell {
    pub strategy: String,
    pub level: Option<String>,
    pub perplexity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityCell {
    pub population: String,
    pub strategy: String,
    pub level: Option<String>,
    /// Sampled records extracted at a shorter context but not a longer one.
    pub violations: usize,
}

/// A published value printed beneath the averages table for scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub model: String,
    pub strategy: String,
    pub fraction: f64,
}

impl ReferencePoint {
    pub fn published() -> Vec<ReferencePoint> {
        vec![
            ReferencePoint {
                model: "Pythia-160m".into(),
                strategy: BASELINE.into(),
                fraction: 0.0065,
            },
            ReferencePoint {
                model: "Pythia-160m".into(),
                strategy: PruneStrategy::GlobalAttentionOnly.id().into(),
                fraction: 0.0008,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub model: String,
    pub context_lengths: Vec<usize>,
    pub suffix_len: usize,
    pub levels: Vec<LevelInfo>,
    pub strategies: Vec<PruneStrategy>,
    pub populations: Vec<PopulationInfo>,
    pub cells: Vec<MemorizationCell>,
    pub perplexities: Vec<PerplexityCell>,
    pub monotonicity: Vec<MonotonicityCell>,
    /// Variants whose checkpoint could not be loaded, with the reason.
    pub missing: Vec<String>,
    pub reference: Vec<ReferencePoint>,
}

/// Identifies one column of the grid: the baseline or a strategy at a level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column<'a> {
    Baseline,
    Pruned(PruneStrategy, &'a str),
}

impl Column<'_> {
    fn strategy_id(&self) -> &str {
        match self {
            Column::Baseline => BASELINE,
            Column::Pruned(s, _) => s.id(),
        }
    }

    fn level(&self) -> Option<&str> {
        match self {
            Column::Baseline => None,
            Column::Pruned(_, l) => Some(l),
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl AuditReport {
    pub fn fraction(&self, population: &str, column: Column<'_>, k: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| {
                c.population == population
                    && c.strategy == column.strategy_id()
                    && c.level.as_deref() == column.level()
                    && c.k == k
            })
            .and_then(|c| c.fraction)
    }

    /// Mean over context lengths; `None` if any cell is absent.
    pub fn average_over_k(&self, population: &str, column: Column<'_>) -> Option<f64> {
        let values: Option<Vec<f64>> = self
            .context_lengths
            .iter()
            .map(|&k| self.fraction(population, column, k))
            .collect();
        values.filter(|v| !v.is_empty()).map(|v| mean(&v))
    }

    /// The averages-table entry: mean over k, then over levels.
    pub fn overall_average(&self, population: &str, strategy: Option<PruneStrategy>) -> Option<f64> {
        match strategy {
            None => self.average_over_k(population, Column::Baseline),
            Some(s) => {
                let per_level: Option<Vec<f64>> = self
                    .levels
                    .iter()
                    .map(|l| self.average_over_k(population, Column::Pruned(s, &l.label)))
                    .collect();
                per_level.filter(|v| !v.is_empty()).map(|v| mean(&v))
            }
        }
    }

    pub fn perplexity(&self, column: Column<'_>) -> Option<f64> {
        self.perplexities
            .iter()
            .find(|p| p.strategy == column.strategy_id() && p.level.as_deref() == column.level())
            .and_then(|p| p.perplexity)
    }

    pub fn average_perplexity(&self, strategy: Option<PruneStrategy>) -> Option<f64> {
        match strategy {
            None => self.perplexity(Column::Baseline),
            Some(s) => {
                let per_level: Option<Vec<f64>> = self
                    .levels
                    .iter()
                    .map(|l| self.perplexity(Column::Pruned(s, &l.label)))
                    .collect();
                per_level.filter(|v| !v.is_empty()).map(|v| mean(&v))
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per (population, variant, k):
    /// `model,population,strategy,level,k,fraction,perplexity`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,population,strategy,level,k,fraction,perplexity\n");
        for c in &self.cells {
            let column = match &c.level {
                None => Column::Baseline,
                Some(l) => match c.strategy.parse::<PruneStrategy>() {
                    Ok(s) => Column::Pruned(s, l),
                    Err(_) => continue,
                },
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.model,
                c.population,
                c.strategy,
                c.level.as_deref().unwrap_or(NO_LEVEL),
                c.k,
                opt_num(c.fraction),
                opt_num(self.perplexity(column)),
            );
        }
        out
    }

    /// Text rendering of every table, for each audited population.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for pop in &self.populations {
            out.push_str(&self.render_average_table(&pop.name));
            out.push('\n');
        }
        out.push_str(&self.render_perplexity_tables());
        for pop in &self.populations {
            out.push('\n');
            out.push_str(&self.render_level_table(&pop.name));
        }
        out.push('\n');
        out.push_str(&self.render_audit_notes());
        out
    }

    fn strategy_headings(&self) -> Vec<String> {
        std::iter::once("Baseline".to_string())
            .chain(self.strategies.iter().map(|s| s.heading().to_string()))
            .collect()
    }

    /// Models × (baseline + strategies), averaged over k then levels.
    pub fn render_average_table(&self, population: &str) -> String {
        let mut header = vec!["Models".to_string()];
        header.extend(self.strategy_headings());
        let mut row = vec![self.model.clone()];
        row.push(fmt_fraction(self.overall_average(population, None)));
        for &s in &self.strategies {
            row.push(fmt_fraction(self.overall_average(population, Some(s))));
        }
        let mut out = format!("Average fraction of memorized data [{population}]\n");
        out.push_str(&render_grid(&header, &[Line::Row(row)]));
        for r in &self.reference {
            let heading = if r.strategy == BASELINE {
                "Baseline".to_string()
            } else {
                r.strategy
                    .parse::<PruneStrategy>()
                    .map(|s| s.heading().to_string())
                    .unwrap_or_else(|_| r.strategy.clone())
            };
            let _ = writeln!(out, "  reference: {} {} = {:.4}", r.model, heading, r.fraction);
        }
        out
    }

    /// Per-level perplexity tables followed by their average.
    pub fn render_perplexity_tables(&self) -> String {
        let mut header = vec!["Models".to_string()];
        header.extend(self.strategy_headings());
        let mut out = String::new();
        for level in &self.levels {
            let mut row = vec![self.model.clone(), fmt_ppl(self.perplexity(Column::Baseline))];
            for &s in &self.strategies {
                row.push(fmt_ppl(self.perplexity(Column::Pruned(s, &level.label))));
            }
            let _ = writeln!(
                out,
                "Perplexity, {} ({}, {})",
                level.name.to_lowercase(),
                level.label,
                fmt_percent(level.fraction)
            );
            out.push_str(&render_grid(&header, &[Line::Row(row)]));
            out.push('\n');
        }
        let mut row = vec![self.model.clone(), fmt_ppl(self.average_perplexity(None))];
        for &s in &self.strategies {
            row.push(fmt_ppl(self.average_perplexity(Some(s))));
        }
        out.push_str("Average perplexity across pruning levels\n");
        out.push_str(&render_grid(&header, &[Line::Row(row)]));
        out
    }

    /// Context-length rows × (baseline + strategies), one section per level.
    pub fn render_level_table(&self, population: &str) -> String {
        let mut header = vec!["Context Length".to_string()];
        header.extend(self.strategy_headings());
        let mut lines = Vec::new();
        for level in &self.levels {
            lines.push(Line::Section(format!(
                "{} ({}, {})",
                level.name,
                level.label,
                fmt_percent(level.fraction)
            )));
            for &k in &self.context_lengths {
                let mut row = vec![k.to_string(), fmt_fraction(self.fraction(population, Column::Baseline, k))];
                for &s in &self.strategies {
                    row.push(fmt_fraction(self.fraction(population, Column::Pruned(s, &level.label), k)));
                }
                lines.push(Line::Row(row));
            }
        }
        let mut out = format!("Fraction of memorization for {} [{population}]\n", self.model);
        out.push_str(&render_grid(&header, &lines));
        out
    }

    fn render_audit_notes(&self) -> String {
        let mut out = format!(
            "Audit: suffix {} tokens, context lengths {}\n",
            self.suffix_len,
            self.context_lengths
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        );
        for p in &self.populations {
            let _ = writeln!(
                out,
                "  population {}: {} of {} records sampled (requested {}){}",
                p.name,
                p.sampled,
                p.records,
                p.requested,
                if p.clamped { ", clamped" } else { "" }
            );
        }
        let skipped: usize = self.cells.iter().map(|c| c.skipped).sum();
        if skipped > 0 {
            let _ = writeln!(out, "  skipped (too short) record checks: {skipped}");
        }
        for m in self.monotonicity.iter().filter(|m| m.violations > 0) {
            let _ = writeln!(
                out,
                "  non-monotone in context: {} {}{} {} record(s)",
                m.population,
                m.strategy,
                m.level.as_deref().map(|l| format!(" {l}")).unwrap_or_default(),
                m.violations
            );
        }
        for m in &self.missing {
            let _ = writeln!(out, "  missing: {m}");
        }
        out
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_fraction(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn fmt_ppl(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into())
}

fn fmt_percent(f: f64) -> String {
    let pct = f * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}%", pct.round() as i64)
    } else {
        format!("{pct:.2}%")
    }
}

enum Line {
    Row(Vec<String>),
    Section(String),
}

/// First column left-aligned, the rest right-aligned, two-space gutters.
fn render_grid(header: &[String], lines: &[Line]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for line in lines {
        if let Line::Row(cells) = line {
            for (w, c) in widths.iter_mut().zip(cells) {
                *w = (*w).max(c.len());
            }
        }
    }
    let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    let rule = "-".repeat(total);
    let fmt_row = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "{c:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let mut out = String::new();
    let _ = writeln!(out, "{rule}");
    let _ = writeln!(out, "{}", fmt_row(header));
    let _ = writeln!(out, "{rule}");
    for line in lines {
        match line {
            Line::Row(cells) => {
                let _ = writeln!(out, "{}", fmt_row(cells));
            }
            Line::Section(title) => {
                let pad = total.saturating_sub(title.len()) / 2;
                let _ = writeln!(out, "{}{title}", " ".repeat(pad));
                let _ = writeln!(out, "{rule}");
            }
        }
    }
    let _ = writeln!(out, "{rule}");
    out
}

/// Key of one CSV row: (population, strategy, level, k).
pub type GridKey = (String, String, String, usize);
/// `key -> (fraction, perplexity)`.
pub type Grid = BTreeMap<GridKey, (Option<f64>, Option<f64>)>;

/// Parses `to_csv` output back into `key -> (fraction, perplexity)`.
pub fn grid_from_csv(text: &str) -> Result<Grid> {
    let bad = |line: usize, reason: &str| Error::Format {
        path: "<csv>".into(),
        reason: format!("line {line}: {reason}"),
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty input"))?;
    if header != "model,population,strategy,level,k,fraction,perplexity" {
        return Err(bad(1, "unexpected header"));
    }
    let parse_opt = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(line, "bad number"))
        }
    };
    let mut grid = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(n, "expected 7 fields"));
        }
        let k = f[4].parse().map_err(|_| bad(n, "bad k"))?;
        let key = (f[1].to_string(), f[2].to_string(), f[3].to_string(), k);
        grid.insert(key, (parse_opt(f[5], n)?, parse_opt(f[6], n)?));
    }
    Ok(grid)
}

impl AuditReport {
    /// The same mapping [`grid_from_csv`] recovers, built directly.
    pub fn grid(&self) -> Grid {
        grid_from_csv(&self.to_csv()).expect("own CSV parses")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_level_report() -> AuditReport {
        let levels = LevelInfo::for_fractions(&[0.1, 0.15]);
        let mut cells = Vec::new();
        let mut perplexities = vec![PerplexityCell {
            strategy: BASELINE.into(),
            level: None,
            perplexity: Some(10.0),
        }];
        for k in [4, 8] {
            cells.push(MemorizationCell {
                population: "canary".into(),
                strategy: BASELINE.into(),
                level: None,
                k,
                evaluated: 8,
                extracted: 8,
                skipped: 0,
                fraction: Some(1.0),
            });
        }
        for (li, l) in levels.iter().enumerate() {
            for k in [4, 8] {
                cells.push(MemorizationCell {
                    population: "canary".into(),
                    strategy: "global".into(),
                    level: Some(l.label.clone()),
                    k,
                    evaluated: 8,
                    extracted: li + k / 4,
                    skipped: 0,
                    fraction: Some((li + k / 4) as f64 / 8.0),
                });
            }
            perplexities.push(PerplexityCell {
                strategy: "global".into(),
                level: Some(l.label.clone()),
                perplexity: Some(11.0 + li as f64),
            });
        }
        AuditReport {
            model: "toy".into(),
            context_lengths: vec![4, 8],
            suffix_len: 4,
            levels,
            strategies: vec![PruneStrategy::GlobalAllLinear],
            populations: vec![PopulationInfo {
                name: "canary".into(),
                records: 8,
                requested: 8,
                sampled: 8,
                clamped: false,
            }],
            cells,
            perplexities,
            monotonicity: vec![],
            missing: vec![],
            reference: vec![],
        }
    }

    #[test]
    fn averages_go_over_k_then_levels() {
        let r = two_level_report();
        // L1: (1 + 2)/8 / 2 = 0.1875, L2: (2 + 3)/8 / 2 = 0.3125
        let l1 = r.average_over_k("canary", Column::Pruned(PruneStrategy::GlobalAllLinear, "L1")).unwrap();
        assert!((l1 - 0.1875).abs() < 1e-12);
        let all = r.overall_average("canary", Some(PruneStrategy::GlobalAllLinear)).unwrap();
        assert!((all - 0.25).abs() < 1e-12);
        assert_eq!(r.overall_average("canary", None), Some(1.0));
        assert_eq!(r.average_perplexity(Some(PruneStrategy::GlobalAllLinear)), Some(11.5));
        assert_eq!(r.overall_average("canary", Some(PruneStrategy::LayerWise)), None);
    }

    #[test]
    fn csv_reloads_to_the_same_grid() {
        let r = two_level_report();
        let csv = r.to_csv();
        assert!(csv.starts_with("model,population,strategy,level,k,fraction,perplexity\n"));
        assert!(csv.contains("toy,canary,baseline,-,4,1,10\n"));
        let grid = grid_from_csv(&csv).unwrap();
        assert_eq!(grid.len(), 6);
        assert_eq!(
            grid[&("canary".into(), "global".into(), "L2".into(), 8)],
            (Some(3.0 / 8.0), Some(12.0))
        );
    }

    #[test]
    fn missing_cells_render_as_na() {
        let mut r = two_level_report();
        for c in r.cells.iter_mut().filter(|c| c.level.as_deref() == Some("L2")) {
            c.fraction = None;
        }
        assert_eq!(r.overall_average("canary", Some(PruneStrategy::GlobalAllLinear)), None);
        assert!(r.render_average_table("canary").contains("n/a"));
        let csv = r.to_csv();
        assert!(csv.contains("toy,canary,global,L2,4,,12\n"));
    }

    #[test]
    fn json_round_trip() {
        let r = two_level_report();
        assert_eq!(AuditReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}

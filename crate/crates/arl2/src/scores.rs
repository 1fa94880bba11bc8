//! Score-table files and the selection report.
//!
//! Both input formats carry one row per (layer, dimension) cell:
//!
//! * CSV with header `layer,dimension,baseline,replace,skip`;
//! * JSON `{"rows": [{"layer": 0, "dimension": "...", "baseline": 0.0,
//!   "replace": 0.0, "skip": 0.0}, ...]}`.
//!
//! `baseline` must agree across the rows of a dimension. Dimensions keep
//! their first-seen order; layers are sorted by id.

use std::collections::BTreeMap;
use std::path::Path;

use arl2_core::selection::{ScoreTable, SelectionResult};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRow {
    pub layer: usize,
    pub dimension: String,
    pub baseline: f64,
    pub replace: f64,
    pub skip: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreFile {
    rows: Vec<ScoreRow>,
}

pub fn table_from_rows(rows: &[ScoreRow]) -> Result<ScoreTable> {
    let bad = |m: String| CliError::Input(m);
    let mut dims: Vec<String> = Vec::new();
    let mut baseline: Vec<f64> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for r in rows {
        let i = match dims.iter().position(|d| *d == r.dimension) {
            Some(i) => {
                if baseline[i] != r.baseline {
                    return Err(bad(format!(
                        "dimension {:?}: baseline {} disagrees with {}",
                        r.dimension, r.baseline, baseline[i]
                    )));
                }
                i
            }
            None => {
                dims.push(r.dimension.clone());
                baseline.push(r.baseline);
                dims.len() - 1
            }
        };
        if cells.insert((r.layer, i), (r.replace, r.skip)).is_some() {
            return Err(bad(format!(
                "duplicate cell layer {} dimension {:?}",
                r.layer, r.dimension
            )));
        }
    }
    let mut layers: Vec<usize> = cells.keys().map(|k| k.0).collect();
    layers.dedup();
    let (mut replace, mut skip) = (Vec::new(), Vec::new());
    for &l in &layers {
        for (i, d) in dims.iter().enumerate() {
            let (r, s) = cells
                .get(&(l, i))
                .ok_or_else(|| bad(format!("missing cell layer {l} dimension {d:?}")))?;
            replace.push(*r);
            skip.push(*s);
        }
    }
    Ok(ScoreTable::new(dims, layers, baseline, replace, skip)?)
}

pub fn read_score_csv(path: &Path) -> Result<ScoreTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<ScoreRow>, _>>()?;
    table_from_rows(&rows)
}

pub fn read_score_json(path: &Path) -> Result<ScoreTable> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let file: ScoreFile = serde_json::from_str(&text)?;
    table_from_rows(&file.rows)
}

/// Picks the reader by extension (`.csv`, otherwise JSON).
pub fn read_score_file(path: &Path) -> Result<ScoreTable> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("csv") => read_score_csv(path),
        _ => read_score_json(path),
    }
}

#[derive(Debug, Serialize)]
pub struct LayerScore {
    pub layer: usize,
    pub p: f64,
    pub delta_hs: f64,
    pub delta_hr: f64,
}

#[derive(Debug, Serialize)]
pub struct TieRecord {
    pub score: f64,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct SelectionReport {
    pub dimensions: Vec<String>,
    pub layers: Vec<usize>,
    /// Rows follow `layers`; `null` marks an undefined cell.
    pub arr: Vec<Vec<Option<f64>>>,
    pub dimension_means: Vec<Option<f64>>,
    pub undefined_cells: &'static str,
    pub threshold_hr: f64,
    pub hr_dims: Vec<String>,
    pub hs_dims: Vec<String>,
    pub unclassifiable_dims: Vec<String>,
    pub beta: f64,
    pub budget: usize,
    pub p: Vec<LayerScore>,
    pub replaced: Vec<usize>,
    pub tiebreak_log: Vec<TieRecord>,
    pub warnings: Vec<String>,
}

pub fn report(table: &ScoreTable, r: &SelectionResult) -> SelectionReport {
    let names = |idx: &[usize]| idx.iter().map(|&i| table.dimensions()[i].clone()).collect();
    let arr = (0..r.arr.rows)
        .map(|row| (0..r.arr.cols).map(|c| r.arr.get(row, c)).collect())
        .collect();
    let p = table
        .layers()
        .iter()
        .enumerate()
        .map(|(i, &layer)| LayerScore {
            layer,
            p: r.protection.p[i],
            delta_hs: r.protection.delta_hs[i],
            delta_hr: r.protection.delta_hr[i],
        })
        .collect();
    let mut warnings = r.protection.warnings.clone();
    for &i in &r.classes.unclassifiable {
        warnings.push(format!(
            "dimension {:?} has no defined ARR cell and is unclassifiable",
            table.dimensions()[i]
        ));
    }
    SelectionReport {
        dimensions: table.dimensions().to_vec(),
        layers: table.layers().to_vec(),
        arr,
        dimension_means: r.classes.means.clone(),
        undefined_cells: "dropped from the per-dimension layer average",
        threshold_hr: r.threshold_hr,
        hr_dims: names(&r.classes.hr),
        hs_dims: names(&r.classes.hs),
        unclassifiable_dims: names(&r.classes.unclassifiable),
        beta: r.beta,
        budget: r.replaced.len(),
        p,
        replaced: r.replaced.clone(),
        tiebreak_log: r
            .tiebreak_log
            .iter()
            .map(|t| TieRecord {
                score: t.score,
                kept: t.kept.clone(),
                dropped: t.dropped.clone(),
            })
            .collect(),
        warnings,
    }
}

//! Sensitivity-guided choice of the layers to replace.
//!
//! Per layer ℓ and quality dimension i a [`ScoreTable`] holds three
//! evaluations: the all-softmax model (`Baseline_i`), the model with layer ℓ
//! hybrid (`Replace_{ℓ,i}`) and the model with layer ℓ's attention skipped
//! (`Skip_{ℓ,i}`). The recovery rate `(Replace − Skip)/(Baseline − Skip)`
//! splits dimensions into hybrid-recoverable (HR) and hybrid-sensitive (HS),
//! and the protection score `p = ΔHS + β·max(ΔHR, 0)` ranks layers; the
//! lowest scores are replaced.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

/// Denominators smaller than this leave an ARR cell undefined.
pub const EPSILON_DENOM: f64 = 1e-9;
pub const DEFAULT_THRESHOLD_HR: f64 = 0.85;
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    dimensions: Vec<String>,
    layers: Vec<usize>,
    baseline: Vec<f64>,
    /// `layers × dimensions`, row-major.
    replace: Vec<f64>,
    skip: Vec<f64>,
}

impl ScoreTable {
    pub fn new(
        dimensions: Vec<String>,
        layers: Vec<usize>,
        baseline: Vec<f64>,
        replace: Vec<f64>,
        skip: Vec<f64>,
    ) -> Result<Self> {
        let (nl, nd) = (layers.len(), dimensions.len());
        let bad = |detail: String| Err(Error::InvalidArgument { detail });
        if nl == 0 || nd == 0 {
            return bad("score table needs at least one layer and one dimension".into());
        }
        if baseline.len() != nd || replace.len() != nl * nd || skip.len() != nl * nd {
            return bad(format!(
                "score table of {nl} layers x {nd} dimensions has {} baseline, {} replace, {} skip cells",
                baseline.len(),
                replace.len(),
                skip.len()
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].contains(l) {
                return bad(format!("layer {l} listed twice"));
            }
        }
        for (i, d) in dimensions.iter().enumerate() {
            if dimensions[..i].contains(d) {
                return bad(format!("dimension {d:?} listed twice"));
            }
        }
        if !baseline.iter().chain(&replace).chain(&skip).all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "score table".into(),
            });
        }
        Ok(Self {
            dimensions,
            layers,
            baseline,
            replace,
            skip,
        })
    }

    pub fn dimensions(&self) -> &[String] {
        &self.dimensions
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn baseline(&self, dim: usize) -> f64 {
        self.baseline[dim]
    }

    /// Score with the layer at position `row` replaced.
    pub fn replace(&self, row: usize, dim: usize) -> f64 {
        self.replace[row * self.dimensions.len() + dim]
    }

    pub fn skip(&self, row: usize, dim: usize) -> f64 {
        self.skip[row * self.dimensions.len() + dim]
    }
}

/// Recovery rates, `None` where the denominator is degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Option<f64>>,
}

impl ArrMatrix {
    pub fn get(&self, row: usize, dim: usize) -> Option<f64> {
        self.cells[row * self.cols + dim]
    }

    /// Mean over the defined cells of one dimension.
    pub fn dim_mean(&self, dim: usize) -> Option<f64> {
        let vals: Vec<f64> = (0..self.rows).filter_map(|r| self.get(r, dim)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

pub fn arr(table: &ScoreTable) -> ArrMatrix {
    let (rows, cols) = (table.layers.len(), table.dimensions.len());
    let mut cells = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for i in 0..cols {
            let den = table.baseline(i) - table.skip(r, i);
            cells.push(if libm::fabs(den) < EPSILON_DENOM {
                None
            } else {
                Some((table.replace(r, i) - table.skip(r, i)) / den)
            });
        }
    }
    ArrMatrix { rows, cols, cells }
}

/// Dimension partition; indices refer to the table's dimension list.
#[derive(Debug, Clone, PartialEq)]
pub struct DimClasses {
    pub hr: Vec<usize>,
    pub hs: Vec<usize>,
    /// Dimensions with no defined cell; in neither group.
    pub unclassifiable: Vec<usize>,
    pub means: Vec<Option<f64>>,
}

pub fn classify_dims(arr: &ArrMatrix, threshold_hr: f64) -> Result<DimClasses> {
    if !(threshold_hr > 0.0 && threshold_hr < 1.0) {
        return Err(Error::InvalidArgument {
            detail: format!("HR threshold {threshold_hr} outside (0, 1)"),
        });
    }
    let mut out = DimClasses {
        hr: Vec::new(),
        hs: Vec::new(),
        unclassifiable: Vec::new(),
        means: Vec::with_capacity(arr.cols),
    };
    for i in 0..arr.cols {
        let m = arr.dim_mean(i);
        match m {
            Some(v) if v >= threshold_hr => out.hr.push(i),
            Some(_) => out.hs.push(i),
            None => out.unclassifiable.push(i),
        }
        out.means.push(m);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protection {
    /// Indexed like the table's layer list.
    pub p: Vec<f64>,
    pub delta_hs: Vec<f64>,
    pub delta_hr: Vec<f64>,
    pub warnings: Vec<String>,
}

fn mean_degradation(table: &ScoreTable, row: usize, dims: &[usize]) -> f64 {
    if dims.is_empty() {
        return 0.0;
    }
    let total: f64 = dims.iter().map(|&i| table.baseline(i) - table.replace(row, i)).sum();
    total / dims.len() as f64
}

/// `p_ℓ = ΔHS_ℓ + β·max(ΔHR_ℓ, 0)` with Δ the mean of `Baseline − Replace`
/// over the group.
pub fn protection_scores(table: &ScoreTable, classes: &DimClasses, beta: f64) -> Result<Protection> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument {
            detail: format!("beta {beta} must be finite and non-negative"),
        });
    }
    let mut warnings = Vec::new();
    if classes.hs.is_empty() {
        warnings.push(String::from("no hybrid-sensitive dimensions; the HS term is 0"));
    }
    let n = table.layers.len();
    let delta_hs: Vec<f64> = (0..n).map(|r| mean_degradation(table, r, &classes.hs)).collect();
    let delta_hr: Vec<f64> = (0..n).map(|r| mean_degradation(table, r, &classes.hr)).collect();
    let p = delta_hs
        .iter()
        .zip(&delta_hr)
        .map(|(hs, hr)| hs + beta * hr.max(0.0))
        .collect();
    Ok(Protection {
        p,
        delta_hs,
        delta_hr,
        warnings,
    })
}

/// Equal scores straddling the budget cutoff, resolved by layer id.
#[derive(Debug, Clone, PartialEq)]
pub struct TieBreak {
    pub score: f64,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Ascending layer ids.
    pub replaced: Vec<usize>,
    pub tiebreak_log: Vec<TieBreak>,
}

/// The `budget` layers with the smallest score, ties to the smaller id.
pub fn select(layers: &[usize], p: &[f64], budget: usize) -> Result<Selection> {
    if layers.len() != p.len() {
        return Err(Error::InvalidArgument {
            detail: format!("{} layers but {} scores", layers.len(), p.len()),
        });
    }
    if budget > layers.len() {
        return Err(Error::InvalidArgument {
            detail: format!("budget {budget} exceeds {} layers", layers.len()),
        });
    }
    if p.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            context: "protection scores".into(),
        });
    }
    let mut order: Vec<(f64, usize)> = p.iter().copied().zip(layers.iter().copied()).collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));

    let mut tiebreak_log = Vec::new();
    if budget > 0 && budget < order.len() && order[budget - 1].0 == order[budget].0 {
        let score = order[budget].0;
        let tied = |range: &[(f64, usize)]| range.iter().filter(|e| e.0 == score).map(|e| e.1).collect();
        tiebreak_log.push(TieBreak {
            score,
            kept: tied(&order[..budget]),
            dropped: tied(&order[budget..]),
        });
    }
    let mut replaced: Vec<usize> = order[..budget].iter().map(|e| e.1).collect();
    replaced.sort_unstable();
    Ok(Selection { replaced, tiebreak_log })
}

/// Everything the selection step reports.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub arr: ArrMatrix,
    pub classes: DimClasses,
    pub protection: Protection,
    pub replaced: Vec<usize>,
    pub tiebreak_log: Vec<TieBreak>,
    pub threshold_hr: f64,
    pub beta: f64,
}

/// ARR, classification, protection scores and selection in one pass.
pub fn analyze(table: &ScoreTable, threshold_hr: f64, beta: f64, budget: usize) -> Result<SelectionResult> {
    let arr = arr(table);
    let classes = classify_dims(&arr, threshold_hr)?;
    let protection = protection_scores(table, &classes, beta)?;
    let sel = select(&table.layers, &protection.p, budget)?;
    Ok(SelectionResult {
        arr,
        classes,
        protection,
        replaced: sel.replaced,
        tiebreak_log: sel.tiebreak_log,
        threshold_hr,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use alloc::vec;

    fn dims(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    fn table(layers: usize, nd: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> ScoreTable {
        let baseline = vec![90.0; nd];
        let mut replace = Vec::new();
        let mut skip = Vec::new();
        for l in 0..layers {
            for i in 0..nd {
                let (r, s) = f(l, i);
                replace.push(r);
                skip.push(s);
            }
        }
        ScoreTable::new(dims(nd), (0..layers).collect(), baseline, replace, skip).unwrap()
    }

    #[test]
    fn hand_checked_cells() {
        let t = table(3, 1, |l, _| match l {
            0 => (90.0, 80.0),
            1 => (80.0, 80.0),
            _ => (85.0, 80.0),
        });
        let a = arr(&t);
        assert_eq!(a.get(0, 0), Some(1.0));
        assert_eq!(a.get(1, 0), Some(0.0));
        assert_eq!(a.get(2, 0), Some(0.5));
    }

    #[test]
    fn degenerate_denominator_is_undefined_and_dropped() {
        let t = table(2, 2, |l, i| if l == 0 && i == 0 { (70.0, 90.0) } else { (90.0, 80.0) });
        let a = arr(&t);
        assert_eq!(a.get(0, 0), None);
        assert_eq!(a.dim_mean(0), Some(1.0));
        let all_undefined = table(2, 1, |_, _| (50.0, 90.0));
        let c = classify_dims(&arr(&all_undefined), 0.85).unwrap();
        assert_eq!(c.unclassifiable, vec![0]);
        assert!(c.hr.is_empty() && c.hs.is_empty());
    }

    #[test]
    fn classification_cut_is_inclusive() {
        // recovery 0.25 on d0, 0.9 on d1, exactly 0.85 on d2
        let t = table(4, 3, |_, i| (80.0 + 10.0 * [0.25, 0.9, 0.85][i], 80.0));
        let c = classify_dims(&arr(&t), DEFAULT_THRESHOLD_HR).unwrap();
        assert_eq!(c.hs, vec![0]);
        assert_eq!(c.hr, vec![1, 2]);
        assert!(classify_dims(&arr(&t), 1.0).is_err());
        assert!(classify_dims(&arr(&t), 0.0).is_err());
    }

    #[test]
    fn no_degradation_means_no_protection() {
        let t = table(3, 2, |_, _| (90.0, 70.0));
        let c = classify_dims(&arr(&t), 0.85).unwrap();
        let p = protection_scores(&t, &c, 1.0).unwrap();
        assert!(p.p.iter().all(|&v| v == 0.0));
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn hr_improvement_is_clamped() {
        // d0 HS (recovery 0.2), d1 HR with Replace above Baseline
        let t = table(1, 2, |_, i| if i == 0 { (82.0, 80.0) } else { (95.0, 80.0) });
        let c = classify_dims(&arr(&t), 0.85).unwrap();
        let p = protection_scores(&t, &c, 1.0).unwrap();
        assert!(p.delta_hr[0] < 0.0);
        assert_eq!(p.p[0], 8.0);
        assert!(protection_scores(&t, &c, -0.1).is_err());
    }

    #[test]
    fn beta_sweep_keeps_strict_hs_ranking() {
        // HS degradations 1, 2, ..., 8 (all distinct) dominate small HR noise
        let t = table(8, 3, |l, i| match i {
            0 => (90.0 - (1 + (l * 5) % 8) as f64, 80.0),
            _ => (90.0 - 0.01 * ((l * 3) % 8) as f64, 80.0),
        });
        let sets: Vec<_> = [0.1, 0.5, 1.0]
            .iter()
            .map(|&b| analyze(&t, 0.85, b, 4).unwrap().replaced)
            .collect();
        assert_eq!(sets[0], sets[1]);
        assert_eq!(sets[1], sets[2]);
        let r = analyze(&t, 0.85, 0.0, 4).unwrap();
        assert_eq!(r.classes.hs, vec![0]);
        assert_eq!(r.replaced, sets[0]);
    }

    #[test]
    fn tie_at_cutoff_prefers_lower_id() {
        let sel = select(&[4, 2, 7, 1], &[0.5, 0.1, 0.5, 0.9], 2).unwrap();
        assert_eq!(sel.replaced, vec![2, 4]);
        assert_eq!(
            sel.tiebreak_log,
            vec![TieBreak {
                score: 0.5,
                kept: vec![4],
                dropped: vec![7]
            }]
        );
        let all = select(&[4, 2, 7, 1], &[0.5, 0.1, 0.5, 0.9], 4).unwrap();
        assert_eq!(all.replaced, vec![1, 2, 4, 7]);
        assert!(all.tiebreak_log.is_empty());
        assert!(select(&[1], &[0.0], 2).is_err());
    }

    /// Rank by counting strictly better layers; no sorting involved.
    fn counting_oracle(layers: &[usize], p: &[f64], budget: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..layers.len())
            .filter(|&a| {
                let better = (0..layers.len())
                    .filter(|&b| p[b] < p[a] || (p[b] == p[a] && layers[b] < layers[a]))
                    .count();
                better < budget
            })
            .map(|a| layers[a])
            .collect();
        out.sort_unstable();
        out
    }

    #[test]
    fn select_matches_oracle_on_random_tables() {
        let mut rng = Rng::new(2024);
        for _ in 0..1000 {
            let n = 1 + rng.below(30);
            let mut layers: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                layers.swap(i, rng.below(i + 1));
            }
            // coarse values so ties actually happen
            let p: Vec<f64> = (0..n).map(|_| (rng.below(8) as f64) * 0.25).collect();
            let budget = rng.below(n + 1);
            assert_eq!(
                select(&layers, &p, budget).unwrap().replaced,
                counting_oracle(&layers, &p, budget)
            );
        }
    }
}

//! Least-squares polynomial fits of cost curves.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    pub degree: usize,
    /// Coefficients, constant term first, in the original units of `x`.
    pub coeffs: Vec<f64>,
    pub r_squared: f64,
}

/// Fit of exactly `degree`. `x` is rescaled to [0, 1] before solving.
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Option<PolyFit> {
    if x.len() != y.len() || x.len() <= degree {
        return None;
    }
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let a = DMatrix::from_fn(x.len(), degree + 1, |i, j| (x[i] / scale).powi(j as i32));
    let b = DVector::from_column_slice(y);
    let sol = a.clone().svd(true, true).solve(&b, 1e-14).ok()?;
    let pred = &a * &sol;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(pred.iter()).map(|(v, p)| (v - p).powi(2)).sum();
    // A flat curve counts as perfectly fit once the residual is at rounding level.
    let energy: f64 = y.iter().map(|v| v * v).sum();
    let r_squared = if ss_tot <= 1e-24 * energy {
        if ss_res <= 1e-20 * energy.max(f64::MIN_POSITIVE) {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    let coeffs = sol.iter().enumerate().map(|(j, c)| c / scale.powi(j as i32)).collect();
    Some(PolyFit {
        degree,
        coeffs,
        r_squared,
    })
}

/// Lowest degree up to `max_degree` whose fit reaches `1 − tol` R².
pub fn min_degree_fit(x: &[f64], y: &[f64], max_degree: usize, tol: f64) -> Option<PolyFit> {
    (0..=max_degree)
        .filter_map(|d| polyfit(x, y, d))
        .find(|f| f.r_squared >= 1.0 - tol)
}

//! Power-law tail exponents of cell-type frequency distributions, estimated
//! by log-log regression on the empirical CCDF of the rarest categories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TAIL_FRACTION: f64 = 0.30;

/// Population over which `P(X >= x)` is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcdfMode {
    /// Only the rarest categories. Reproduces the reference Blood fit
    /// (alpha 0.37, R² 1.00), hence the default.
    #[default]
    TailOnly,
    /// Every category. Exact for counts drawn from `rank^(-1/alpha)`.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub alpha: f64,
    pub r2: f64,
    pub intercept: f64,
    /// Number of tail categories used.
    pub num_points: usize,
    /// The tail categories' counts, ascending.
    pub counts_used: Vec<f64>,
    pub mode: CcdfMode,
}

/// Number of categories in the tail: `floor(fraction * n)`, at least 3.
pub fn tail_size(num_categories: usize, tail_fraction: f64) -> usize {
    ((tail_fraction * num_categories as f64).floor() as usize)
        .max(3)
        .min(num_categories)
}

pub fn fit_tail_exponent(counts: &[f64], tail_fraction: f64, mode: CcdfMode) -> Result<TailFit> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "tail fraction {tail_fraction} outside (0, 1]"
        )));
    }
    let mut sorted: Vec<f64> = counts.iter().copied().filter(|c| *c > 0.0).collect();
    if sorted.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidConfig("non-finite count".into()));
    }
    if sorted.len() < 3 {
        return Err(Error::TooFewCategories(sorted.len()));
    }
    sorted.sort_by(f64::total_cmp);
    let k = tail_size(sorted.len(), tail_fraction);
    let tail = &sorted[..k];
    let population: &[f64] = match mode {
        CcdfMode::TailOnly => tail,
        CcdfMode::Full => &sorted,
    };
    let mut distinct = tail.to_vec();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::DegenerateVector);
    }
    let n = population.len() as f64;
    let xs: Vec<f64> = distinct.iter().map(|c| c.ln()).collect();
    let ys: Vec<f64> = distinct
        .iter()
        .map(|&c| (population.iter().filter(|&&p| p >= c).count() as f64 / n).ln())
        .collect();
    let (slope, intercept, r2) = ols(&xs, &ys);
    Ok(TailFit {
        alpha: -slope,
        r2,
        intercept,
        num_points: k,
        counts_used: tail.to_vec(),
        mode,
    })
}

/// Least-squares line `y = slope·x + intercept` and its R², clamped to [0, 1].
fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (slope, intercept, r2.clamp(0.0, 1.0))
}

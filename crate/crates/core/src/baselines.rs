//! Instrumental-variable comparators: the Wald ratio and grouped IV
//! matching on the allocation probability.

use serde::{Deserialize, Serialize};

use crate::error::{CaceError, Result};

fn check_lengths(z: &[u8], t: &[u8], y: &[f64]) -> Result<()> {
    if z.len() != t.len() || z.len() != y.len() {
        return Err(CaceError::InvalidInput(format!(
            "z, t, y lengths differ: {}, {}, {}",
            z.len(),
            t.len(),
            y.len()
        )));
    }
    Ok(())
}

#[derive(Default, Clone, Copy)]
struct Cell {
    n: f64,
    y: f64,
    t: f64,
}

impl Cell {
    fn add(&mut self, t: u8, y: f64) {
        self.n += 1.0;
        self.y += y;
        self.t += t as f64;
    }
}

/// `[mean(Y|Z=1) - mean(Y|Z=0)] / [mean(T|Z=1) - mean(T|Z=0)]`.
pub fn wald_estimator(z: &[u8], t: &[u8], y: &[f64]) -> Result<f64> {
    check_lengths(z, t, y)?;
    let mut arms = [Cell::default(); 2];
    for i in 0..z.len() {
        arms[z[i] as usize].add(t[i], y[i]);
    }
    if arms[0].n == 0.0 || arms[1].n == 0.0 {
        return Err(CaceError::EmptySubset("an assignment arm is empty".into()));
    }
    ratio(&[(1.0, arms)])
}

/// Weighted sum of per-group signed arm differences, numerator over
/// denominator.
fn ratio(groups: &[(f64, [Cell; 2])]) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (w, [c0, c1]) in groups {
        num += w * (c1.y / c1.n - c0.y / c0.n);
        den += w * (c1.t / c1.n - c0.t / c0.n);
    }
    if den.abs() < 1e-12 {
        return Err(CaceError::ZeroDenominator(format!(
            "first-stage difference is {den}"
        )));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchingConfig {
    /// Number of quantile bins of the allocation probability.
    pub n_groups: usize,
    /// Minimum rows per assignment arm for a group to be kept.
    pub min_group_size: usize,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            n_groups: 10,
            min_group_size: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingResult {
    pub estimate: f64,
    pub groups_used: usize,
    /// Groups discarded for lacking rows in an arm.
    pub groups_dropped: usize,
}

/// Group index per row: `floor(r * G / N)` where `r` is the row's 0-based
/// average rank, so tied values share a group.
pub fn quantile_groups(values: &[f64], n_groups: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut groups = vec![0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let mid = (start + end - 1) as f64 / 2.0;
        let g = ((mid * n_groups as f64 / n as f64).floor() as usize).min(n_groups - 1);
        for &i in &order[start..end] {
            groups[i] = g;
        }
        start = end;
    }
    groups
}

/// Grouped IV matching: rows are binned on `eta_hat`, arm means are taken
/// within each bin, and the signed group differences are summed with
/// cell-size weights.
pub fn iv_matching_estimator(
    z: &[u8],
    t: &[u8],
    y: &[f64],
    eta_hat: &[f64],
    cfg: &MatchingConfig,
) -> Result<MatchingResult> {
    check_lengths(z, t, y)?;
    if eta_hat.len() != z.len() {
        return Err(CaceError::InvalidInput("eta_hat length differs from z".into()));
    }
    if cfg.n_groups == 0 {
        return Err(CaceError::InvalidInput("n_groups must be at least 1".into()));
    }
    if let Some(i) = eta_hat.iter().position(|v| !v.is_finite()) {
        return Err(CaceError::NonFinite(format!("eta_hat at row {i}")));
    }
    let g = quantile_groups(eta_hat, cfg.n_groups);
    let k = g.iter().copied().max().map_or(0, |m| m + 1);
    let mut cells = vec![[Cell::default(); 2]; k];
    for i in 0..z.len() {
        cells[g[i]][z[i] as usize].add(t[i], y[i]);
    }
    let min = cfg.min_group_size.max(1) as f64;
    let kept: Vec<[Cell; 2]> = cells
        .iter()
        .copied()
        .filter(|[c0, c1]| c0.n >= min && c1.n >= min)
        .collect();
    let dropped = cells.iter().filter(|[c0, c1]| c0.n + c1.n > 0.0).count() - kept.len();
    if kept.is_empty() {
        return Err(CaceError::NoValidGroups);
    }
    if dropped > 0 {
        log::debug!("iv matching dropped {dropped} groups");
    }
    let total: f64 = kept.iter().map(|[a, b]| a.n + b.n).sum();
    let weighted: Vec<(f64, [Cell; 2])> = kept
        .iter()
        .map(|c| ((c[0].n + c[1].n) / total, *c))
        .collect();
    Ok(MatchingResult {
        estimate: ratio(&weighted)?,
        groups_used: kept.len(),
        groups_dropped: dropped,
    })
}

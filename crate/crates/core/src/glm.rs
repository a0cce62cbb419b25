//! Weighted GLM solvers and scalar kernels shared by every EM M-step.
//!
//! All solvers are Newton/IRLS iterations with step-halving, so the
//! objective is non-decreasing across accepted steps. Linear systems are
//! solved by Cholesky on the Jacobi-equilibrated information matrix; when
//! that matrix is numerically singular a small ridge is added. Newton steps
//! escalate the ridge further if needed, which only damps the step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CaceError, Result};

/// Floor applied to probabilities before they enter a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Dense row-major design matrix. Column 0 is the intercept when built
/// through [`DesignMatrix::with_intercept`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CaceError::InvalidInput(format!(
                "design matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(CaceError::InvalidInput(format!(
                "design matrix data has {} values, expected {}",
                data.len(),
                rows * cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(CaceError::NonFinite(format!(
                "design matrix entry at row {}, column {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a design from row-major `features` (`rows x k`) with a leading
    /// column of ones.
    pub fn with_intercept(rows: usize, k: usize, features: &[f64]) -> Result<Self> {
        if features.len() != rows * k {
            return Err(CaceError::InvalidInput(format!(
                "feature block has {} values, expected {}",
                features.len(),
                rows * k
            )));
        }
        let mut data = Vec::with_capacity(rows * (k + 1));
        for i in 0..rows {
            data.push(1.0);
            data.extend_from_slice(&features[i * k..(i + 1) * k]);
        }
        Self::new(rows, k + 1, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CaceError::InvalidInput("ragged design rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    #[inline]
    pub fn dot_row(&self, i: usize, beta: &[f64]) -> f64 {
        dot(self.row(i), beta)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for i in 0..self.rows {
            let r = self.row(i);
            data.extend(idx.iter().map(|&j| r[j]));
        }
        Self {
            rows: self.rows,
            cols: idx.len(),
            data,
        }
    }

    /// Per-column (min, max) over all rows.
    pub fn column_ranges(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); self.cols];
        for i in 0..self.rows {
            for (r, &v) in out.iter_mut().zip(self.row(i)) {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        out
    }
}

/// Dense row-major matrix of per-row probability vectors (posteriors,
/// priors, soft targets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CaceError::InvalidInput("ragged probability rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CaceError::InvalidInput(format!(
                "matrix data has {} values, expected {}",
                data.len(),
                rows * cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &RowMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Newton/IRLS controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative objective change below which the iteration stops.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Condition estimate above which the ridge fallback kicks in.
    pub max_condition: f64,
    /// Ridge is `ridge_scale * trace / cols`.
    pub ridge_scale: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 20,
            max_condition: 1e12,
            ridge_scale: 1e-8,
        }
    }
}

/// Output of a single GLM solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Flat coefficients. Multinomial fits store `(K - 1)` consecutive blocks
    /// of `cols` values; the reference class is implicit.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Log-likelihood for logistic/multinomial fits, weighted SSE for least
    /// squares.
    pub final_objective: f64,
    /// Objective at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
    pub ridge_applied: bool,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function, clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
#[inline]
pub fn expit(t: f64) -> f64 {
    let p = if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// `ln(1 + e^t)` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// `ln sum exp(v)`; returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Log-density of `Normal(mu, sigma2)` at `y`.
pub fn gaussian_loglik(y: f64, mu: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(CaceError::DomainError(format!(
            "variance must be positive, got {sigma2}"
        )));
    }
    Ok(gaussian_loglik_unchecked(y, mu, sigma2))
}

#[inline]
pub(crate) fn gaussian_loglik_unchecked(y: f64, mu: f64, sigma2: f64) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
    let r = y - mu;
    -HALF_LN_2PI - 0.5 * sigma2.ln() - 0.5 * r * r / sigma2
}

/// Solves `h * x = g` for a symmetric positive semi-definite `h` (row-major
/// `p x p`). Returns the solution and whether the ridge fallback was used.
pub(crate) fn solve_spd(h: &[f64], g: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, bool)> {
    solve_ridged(h, g, cfg, 0)
}

/// Newton direction: like [`solve_spd`], but the ridge grows by factors of
/// 100 up to the mean diagonal. Saturated fitted probabilities make the
/// information nearly singular while the ascent direction stays usable.
fn newton_step(h: &[f64], g: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, bool)> {
    let escalations = (-cfg.ridge_scale.log10() / 2.0).ceil().max(0.0) as u32;
    solve_ridged(h, g, cfg, escalations)
}

fn solve_ridged(h: &[f64], g: &[f64], cfg: &SolverConfig, escalations: u32) -> Result<(Vec<f64>, bool)> {
    let p = g.len();
    debug_assert_eq!(h.len(), p * p);
    if h.iter().chain(g).any(|v| !v.is_finite()) {
        return Err(CaceError::NonFinite("information matrix or score".into()));
    }
    let diag: Vec<f64> = (0..p).map(|i| h[i * p + i]).collect();
    let scale: Vec<f64> = diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 })
        .collect();

    let attempt = |ridge: f64| -> Option<Vec<f64>> {
        let m = DMatrix::from_fn(p, p, |i, j| {
            let v = h[i * p + j] + if i == j { ridge } else { 0.0 };
            v * scale[i] * scale[j]
        });
        let chol = m.cholesky()?;
        let l = chol.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..p {
            let d = l[(i, i)];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if !(lo > 0.0) || (hi / lo).powi(2) > cfg.max_condition {
            return None;
        }
        let rhs = DVector::from_fn(p, |i, _| g[i] * scale[i]);
        let sol = chol.solve(&rhs);
        let out: Vec<f64> = (0..p).map(|i| sol[i] * scale[i]).collect();
        out.iter().all(|v| v.is_finite()).then_some(out)
    };

    if let Some(x) = attempt(0.0) {
        return Ok((x, false));
    }
    let trace: f64 = diag.iter().sum();
    let base = cfg.ridge_scale * trace.max(f64::MIN_POSITIVE) / p as f64;
    (0..=escalations)
        .find_map(|e| attempt(base * 100f64.powi(e as i32)))
        .map(|x| (x, true))
        .ok_or_else(|| CaceError::SingularSystem("information matrix not invertible with ridge".into()))
}

fn check_weights(w: &[f64], rows: usize) -> Result<f64> {
    if w.len() != rows {
        return Err(CaceError::InvalidInput(format!(
            "{} weights for {} rows",
            w.len(),
            rows
        )));
    }
    let mut total = 0.0;
    for (i, &v) in w.iter().enumerate() {
        if !v.is_finite() {
            return Err(CaceError::NonFinite(format!("weight at row {i}")));
        }
        if v < 0.0 {
            return Err(CaceError::InvalidInput(format!("negative weight at row {i}")));
        }
        total += v;
    }
    if !(total > 0.0) {
        return Err(CaceError::InvalidInput("all weights are zero".into()));
    }
    Ok(total)
}

#[inline]
fn converged_step(old: f64, new: f64, tol: f64) -> bool {
    (new - old).abs() <= tol * old.abs()
}

fn logistic_objective(x: &DesignMatrix, y: &[f64], w: &[f64], beta: &[f64]) -> f64 {
    let mut obj = 0.0;
    for i in 0..x.rows() {
        if w[i] == 0.0 {
            continue;
        }
        let eta = x.dot_row(i, beta);
        obj += w[i] * (y[i] * eta - softplus(eta));
    }
    obj
}

/// Maximizes `sum_i w_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)]` with
/// `p_i = expit(beta' x_i)`. `init` warm-starts the iteration.
pub fn fit_weighted_logistic(
    x: &DesignMatrix,
    y: &[f64],
    w: &[f64],
    cfg: &SolverConfig,
    init: Option<&[f64]>,
) -> Result<FitResult> {
    let (n, p) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(CaceError::InvalidInput(format!("{} targets for {n} rows", y.len())));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(CaceError::NonFinite(format!("target at row {i}")));
    }
    if let Some(i) = y.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(CaceError::InvalidInput(format!("target at row {i} outside [0, 1]")));
    }
    check_weights(w, n)?;

    let mut beta = match init {
        Some(b) if b.len() == p && b.iter().all(|v| v.is_finite()) => b.to_vec(),
        _ => vec![0.0; p],
    };
    // The objective at the start point is accumulated in the first pass.
    let mut obj = f64::NAN;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut ridge_applied = false;
    let mut iterations = 0;
    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; p * p];
    let xm = DMatrix::from_row_slice(n, p, x.as_slice());
    // Column `i` of `xw` is `v_i x_i`; the information matrix is `xw X`.
    let mut xw = DMatrix::<f64>::zeros(p, n);

    while iterations < cfg.max_iter {
        iterations += 1;
        grad.iter_mut().for_each(|v| *v = 0.0);
        let mut pass_obj = 0.0;
        for i in 0..n {
            let wi = w[i];
            if wi == 0.0 {
                xw.column_mut(i).fill(0.0);
                continue;
            }
            let xi = x.row(i);
            let eta = dot(xi, &beta);
            pass_obj += wi * (y[i] * eta - softplus(eta));
            let mu = 1.0 / (1.0 + (-eta).exp());
            let r = wi * (y[i] - mu);
            let v = wi * mu * (1.0 - mu);
            let mut col = xw.column_mut(i);
            for ((c, g), xv) in col.as_mut_slice().iter_mut().zip(grad.iter_mut()).zip(xi) {
                *g += r * xv;
                *c = v * xv;
            }
        }
        if iterations == 1 {
            obj = pass_obj;
            trace.push(obj);
        }
        let gram = &xw * &xm;
        for a in 0..p {
            for b in 0..p {
                hess[a * p + b] = gram[(a, b)];
            }
        }
        symmetrize_lower(&mut hess, p);
        let (step, ridged) = newton_step(&hess, &grad, cfg)?;
        ridge_applied |= ridged;
        if negligible_gain(&grad, &step, obj, cfg.tol) {
            beta.iter_mut().zip(&step).for_each(|(b, s)| *b += s);
            obj = logistic_objective(x, y, w, &beta);
            trace.push(obj);
            converged = true;
            break;
        }

        match line_search(&beta, &step, obj, cfg.max_halvings, |b| {
            logistic_objective(x, y, w, b)
        }) {
            Some((b, new_obj)) => {
                let done = converged_step(obj, new_obj, cfg.tol);
                beta = b;
                obj = new_obj;
                trace.push(obj);
                if done {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = true;
                break;
            }
        }
    }

    if trace.is_empty() {
        obj = logistic_objective(x, y, w, &beta);
        trace.push(obj);
    }
    Ok(FitResult {
        coefficients: beta,
        converged,
        iterations,
        final_objective: obj,
        objective_trace: trace,
        ridge_applied,
    })
}

fn symmetrize_lower(h: &mut [f64], p: usize) {
    for a in 0..p {
        for b in 0..a {
            h[b * p + a] = h[a * p + b];
        }
    }
}

/// True when the quadratic model predicts a gain `g' step / 2` below the
/// convergence tolerance. The step is then taken without a line search:
/// its true effect is below rounding noise, and testing it would make the
/// accept/reject decision arbitrary.
fn negligible_gain(grad: &[f64], step: &[f64], obj: f64, tol: f64) -> bool {
    0.5 * dot(grad, step) <= tol * obj.abs()
}

/// Tries `beta + step / 2^k` for `k = 0..=max_halvings`, accepting the first
/// point whose objective is not below `obj`.
fn line_search<F>(
    beta: &[f64],
    step: &[f64],
    obj: f64,
    max_halvings: usize,
    objective: F,
) -> Option<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> f64,
{
    let mut scale = 1.0;
    let mut cand = vec![0.0; beta.len()];
    for _ in 0..=max_halvings {
        for ((c, b), s) in cand.iter_mut().zip(beta).zip(step) {
            *c = b + scale * s;
        }
        let new_obj = objective(&cand);
        if new_obj.is_finite() && new_obj >= obj {
            return Some((cand, new_obj));
        }
        scale *= 0.5;
    }
    None
}

fn check_targets(targets: &RowMatrix, rows: usize) -> Result<()> {
    if targets.rows() != rows {
        return Err(CaceError::InvalidInput(format!(
            "{} target rows for {rows} design rows",
            targets.rows()
        )));
    }
    if targets.cols() < 2 {
        return Err(CaceError::InvalidInput("multinomial needs at least two classes".into()));
    }
    for i in 0..rows {
        let r = targets.row(i);
        if r.iter().any(|v| !v.is_finite()) {
            return Err(CaceError::NonFinite(format!("target row {i}")));
        }
        if r.iter().any(|&v| v < 0.0) {
            return Err(CaceError::InvalidInput(format!("negative target at row {i}")));
        }
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(CaceError::InvalidInput(format!(
                "target row {i} sums to {s}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Class log-probabilities for one row under reference coding (last class
/// has zero logit). `out` has length `k`.
#[inline]
pub(crate) fn multinomial_log_probs(xi: &[f64], beta: &[f64], k: usize, out: &mut [f64]) {
    let p = xi.len();
    for c in 0..k - 1 {
        out[c] = dot(xi, &beta[c * p..(c + 1) * p]);
    }
    out[k - 1] = 0.0;
    let lse = log_sum_exp(&out[..k]);
    for v in out[..k].iter_mut() {
        *v -= lse;
    }
}

fn multinomial_objective(x: &DesignMatrix, targets: &RowMatrix, beta: &[f64]) -> f64 {
    let k = targets.cols();
    let mut lp = vec![0.0; k];
    let mut obj = 0.0;
    for i in 0..x.rows() {
        multinomial_log_probs(x.row(i), beta, k, &mut lp);
        for (h, l) in targets.row(i).iter().zip(&lp) {
            if *h > 0.0 {
                obj += h * l;
            }
        }
    }
    obj
}

/// Maximizes `sum_i sum_s h_is ln softmax_s(delta' x_i)` with the last
/// class as reference (its coefficients are fixed at zero).
pub fn fit_weighted_multinomial(
    x: &DesignMatrix,
    targets: &RowMatrix,
    cfg: &SolverConfig,
    init: Option<&[f64]>,
) -> Result<FitResult> {
    let (n, p) = (x.rows(), x.cols());
    check_targets(targets, n)?;
    let k = targets.cols();
    let m = k - 1;
    let dim = m * p;

    let mut beta = match init {
        Some(b) if b.len() == dim && b.iter().all(|v| v.is_finite()) => b.to_vec(),
        _ => vec![0.0; dim],
    };
    let mut obj = f64::NAN;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut ridge_applied = false;
    let mut iterations = 0;

    let npairs = m * (m + 1) / 2;
    let xm = DMatrix::from_row_slice(n, p, x.as_slice());
    // Row `q * p + v` of `xw` holds `w_q * x_v` for class pair `q`, so a
    // single product `xw X` yields every Hessian block.
    let mut xw = DMatrix::<f64>::zeros(npairs * p, n);
    let mut grad = vec![0.0; dim];
    let mut lp = vec![0.0; k];
    let mut pw = vec![0.0; npairs];

    while iterations < cfg.max_iter {
        iterations += 1;
        grad.iter_mut().for_each(|v| *v = 0.0);
        let mut pass_obj = 0.0;
        for i in 0..n {
            let xi = x.row(i);
            multinomial_log_probs(xi, &beta, k, &mut lp);
            let h = targets.row(i);
            for (hv, l) in h.iter().zip(&lp) {
                if *hv > 0.0 {
                    pass_obj += hv * l;
                }
            }
            let mut idx = 0;
            for a in 0..m {
                let pa = lp[a].exp();
                let r = h[a] - pa;
                let g = &mut grad[a * p..(a + 1) * p];
                for (gv, xv) in g.iter_mut().zip(xi) {
                    *gv += r * xv;
                }
                for b in a..m {
                    let pb = lp[b].exp();
                    pw[idx] = if a == b { pa * (1.0 - pa) } else { -pa * pb };
                    idx += 1;
                }
            }
            let mut col = xw.column_mut(i);
            for (chunk, wq) in col.as_mut_slice().chunks_exact_mut(p).zip(&pw) {
                for (c, xv) in chunk.iter_mut().zip(xi) {
                    *c = wq * xv;
                }
            }
        }
        if iterations == 1 {
            obj = pass_obj;
            trace.push(obj);
        }
        let gram = &xw * &xm;
        let mut hess = vec![0.0; dim * dim];
        let mut q = 0;
        for a in 0..m {
            for b in a..m {
                for u in 0..p {
                    for v in 0..p {
                        let val = gram[(q * p + v, u)];
                        hess[(a * p + u) * dim + b * p + v] = val;
                        hess[(b * p + v) * dim + a * p + u] = val;
                    }
                }
                q += 1;
            }
        }
        let (step, ridged) = newton_step(&hess, &grad, cfg)?;
        ridge_applied |= ridged;
        if negligible_gain(&grad, &step, obj, cfg.tol) {
            beta.iter_mut().zip(&step).for_each(|(b, s)| *b += s);
            obj = multinomial_objective(x, targets, &beta);
            trace.push(obj);
            converged = true;
            break;
        }
        match line_search(&beta, &step, obj, cfg.max_halvings, |b| {
            multinomial_objective(x, targets, b)
        }) {
            Some((b, new_obj)) => {
                let done = converged_step(obj, new_obj, cfg.tol);
                beta = b;
                obj = new_obj;
                trace.push(obj);
                if done {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = true;
                break;
            }
        }
    }

    if trace.is_empty() {
        obj = multinomial_objective(x, targets, &beta);
        trace.push(obj);
    }
    Ok(FitResult {
        coefficients: beta,
        converged,
        iterations,
        final_objective: obj,
        objective_trace: trace,
        ridge_applied,
    })
}

/// Solves the weighted normal equations `X' W X b = X' W y`.
pub fn fit_weighted_least_squares(x: &DesignMatrix, y: &[f64], w: &[f64]) -> Result<FitResult> {
    fit_weighted_least_squares_with(x, y, w, &SolverConfig::default())
}

pub fn fit_weighted_least_squares_with(
    x: &DesignMatrix,
    y: &[f64],
    w: &[f64],
    cfg: &SolverConfig,
) -> Result<FitResult> {
    let (n, p) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(CaceError::InvalidInput(format!("{} targets for {n} rows", y.len())));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(CaceError::NonFinite(format!("target at row {i}")));
    }
    check_weights(w, n)?;
    let mut xtwx = vec![0.0; p * p];
    let mut xtwy = vec![0.0; p];
    for i in 0..n {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        let xi = x.row(i);
        for a in 0..p {
            let wa = wi * xi[a];
            xtwy[a] += wa * y[i];
            let row = &mut xtwx[a * p..a * p + a + 1];
            for (b, h) in row.iter_mut().enumerate() {
                *h += wa * xi[b];
            }
        }
    }
    symmetrize_lower(&mut xtwx, p);
    let (beta, ridge_applied) = solve_spd(&xtwx, &xtwy, cfg)?;
    let sse = weighted_sse(x, y, w, &beta);
    Ok(FitResult {
        coefficients: beta,
        converged: true,
        iterations: 1,
        final_objective: sse,
        objective_trace: vec![sse],
        ridge_applied,
    })
}

pub(crate) fn weighted_sse(x: &DesignMatrix, y: &[f64], w: &[f64], beta: &[f64]) -> f64 {
    (0..x.rows())
        .filter(|&i| w[i] != 0.0)
        .map(|i| {
            let r = y[i] - x.dot_row(i, beta);
            w[i] * r * r
        })
        .sum()
}

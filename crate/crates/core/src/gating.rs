//! Gating network: stratum probabilities `rho_k(x)` fit by EM over the
//! known treatment experts `mu_c(z) = z`, `mu_a = 1`, `mu_n = 0`,
//! `mu_d(z) = 1 - z`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{check_binary, TrialDataset};
use crate::error::{CaceError, Result};
use crate::glm::{
    fit_weighted_multinomial, log_sum_exp, multinomial_log_probs, DesignMatrix, RowMatrix,
    SolverConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Complier,
    AlwaysTaker,
    NeverTaker,
    Defier,
}

impl Stratum {
    pub fn short(self) -> &'static str {
        match self {
            Stratum::Complier => "c",
            Stratum::AlwaysTaker => "a",
            Stratum::NeverTaker => "n",
            Stratum::Defier => "d",
        }
    }
}

/// Latent strata in column order. The last entry is the reference class of
/// the multinomial parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumSet {
    Full4,
    Mono3,
}

impl StratumSet {
    pub fn strata(self) -> &'static [Stratum] {
        match self {
            StratumSet::Full4 => &[
                Stratum::Complier,
                Stratum::AlwaysTaker,
                Stratum::NeverTaker,
                Stratum::Defier,
            ],
            StratumSet::Mono3 => &[Stratum::Complier, Stratum::AlwaysTaker, Stratum::NeverTaker],
        }
    }

    #[inline]
    pub fn len(self) -> usize {
        self.strata().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn from_monotonicity(monotonicity: bool) -> Self {
        if monotonicity {
            StratumSet::Mono3
        } else {
            StratumSet::Full4
        }
    }
}

/// `(L_c, L_a, L_n, L_d)` for one `(z, t)` pair.
#[inline]
pub fn compliance_row(z: u8, t: u8) -> [f64; 4] {
    let (z, t) = (z as f64, t as f64);
    [
        z * t + (1.0 - z) * (1.0 - t),
        t,
        1.0 - t,
        z * (1.0 - t) + (1.0 - z) * t,
    ]
}

/// Per-row likelihood of the observed treatment under each stratum's known
/// expert. Mono3 keeps the first three columns.
pub fn compliance_likelihoods(z: &[u8], t: &[u8], strata: StratumSet) -> Result<RowMatrix> {
    if z.len() != t.len() {
        return Err(CaceError::InvalidInput(format!(
            "z has {} rows, t has {}",
            z.len(),
            t.len()
        )));
    }
    check_binary("z", z)?;
    check_binary("t", t)?;
    let k = strata.len();
    let mut out = RowMatrix::zeros(z.len(), k);
    for i in 0..z.len() {
        out.row_mut(i).copy_from_slice(&compliance_row(z[i], t[i])[..k]);
    }
    Ok(out)
}

/// Reference-coded softmax gating. `delta` stores `(K - 1)` blocks of
/// `cols` coefficients; the last stratum's logit is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingModel {
    pub strata: StratumSet,
    pub delta: Vec<f64>,
    pub design_columns: Vec<String>,
}

impl GatingModel {
    pub fn uniform(strata: StratumSet, design_columns: Vec<String>) -> Self {
        let delta = vec![0.0; (strata.len() - 1) * design_columns.len()];
        Self {
            strata,
            delta,
            design_columns,
        }
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.design_columns.len()
    }

    /// Coefficient block of stratum `s` (zero for the reference).
    pub fn coefficients(&self, s: usize) -> Vec<f64> {
        let p = self.cols();
        if s + 1 == self.strata.len() {
            vec![0.0; p]
        } else {
            self.delta[s * p..(s + 1) * p].to_vec()
        }
    }

    fn check_design(&self, x: &DesignMatrix) -> Result<()> {
        if x.cols() != self.cols() {
            return Err(CaceError::InvalidInput(format!(
                "gating expects {} design columns, got {}",
                self.cols(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Log-probabilities over the model's strata for one design row.
    #[inline]
    pub fn log_probs_row(&self, xi: &[f64], out: &mut [f64]) {
        multinomial_log_probs(xi, &self.delta, self.strata.len(), out);
    }

    /// Log-probabilities in `(c, a, n, d)` order; `ln rho_d = -inf` under
    /// Mono3.
    pub fn log_rho_full_row(&self, xi: &[f64]) -> [f64; 4] {
        let mut out = [f64::NEG_INFINITY; 4];
        self.log_probs_row(xi, &mut out[..self.strata.len()]);
        out
    }

    /// Probability rows over the model's strata.
    pub fn predict(&self, x: &DesignMatrix) -> Result<RowMatrix> {
        self.check_design(x)?;
        let k = self.strata.len();
        let mut out = RowMatrix::zeros(x.rows(), k);
        for i in 0..x.rows() {
            let r = out.row_mut(i);
            self.log_probs_row(x.row(i), r);
            r.iter_mut().for_each(|v| *v = v.exp());
        }
        Ok(out)
    }

    /// Probability rows in `(c, a, n, d)` order with an exact zero defier
    /// column under Mono3.
    pub fn rho_full(&self, x: &DesignMatrix) -> Result<RowMatrix> {
        self.check_design(x)?;
        let mut out = RowMatrix::zeros(x.rows(), 4);
        for i in 0..x.rows() {
            let l = self.log_rho_full_row(x.row(i));
            for (o, v) in out.row_mut(i).iter_mut().zip(l) {
                *o = v.exp();
            }
        }
        Ok(out)
    }
}

/// EM controls for the gating fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatingConfig {
    pub solver: SolverConfig,
    /// Relative log-likelihood change that stops EM.
    pub tol: f64,
    pub max_iter: usize,
    /// Newton steps per M-step. A partial M-step still increases the
    /// expected complete-data objective, so EM stays monotone.
    pub m_step_newton: usize,
    /// Turn the degenerate-stratum warning into an error.
    pub strict: bool,
    /// Extra random starts besides the uniform one.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            tol: 1e-8,
            max_iter: 500,
            m_step_newton: 1,
            strict: false,
            restarts: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingFit {
    pub model: GatingModel,
    /// Observed-data log-likelihood at the initial priors and after every
    /// EM iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Total posterior mass per stratum at the final E-step.
    pub posterior_mass: Vec<f64>,
    pub warnings: Vec<String>,
}

impl GatingFit {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

/// E-step from log-priors: writes posteriors into `post` and returns the
/// row's log-likelihood contribution `ln sum_s g_s L_s`.
#[inline]
fn estep_row(log_prior: &[f64], l: &[f64], post: &mut [f64]) -> f64 {
    let mut buf = [f64::NEG_INFINITY; 4];
    for s in 0..l.len() {
        if l[s] > 0.0 {
            buf[s] = log_prior[s] + l[s].ln();
        }
    }
    let lse = log_sum_exp(&buf[..l.len()]);
    for s in 0..l.len() {
        post[s] = if l[s] > 0.0 { (buf[s] - lse).exp() } else { 0.0 };
    }
    lse
}

fn estep(model: &GatingModel, x: &DesignMatrix, l: &RowMatrix, post: &mut RowMatrix) -> f64 {
    let k = model.strata.len();
    let mut lp = [0.0; 4];
    let mut ll = 0.0;
    for i in 0..x.rows() {
        model.log_probs_row(x.row(i), &mut lp[..k]);
        ll += estep_row(&lp[..k], l.row(i), post.row_mut(i));
    }
    ll
}

/// Posterior stratum probabilities `h_s = g_s L_s / sum_j g_j L_j`.
pub fn posterior_strata(
    model: &GatingModel,
    z: &[u8],
    t: &[u8],
    x: &DesignMatrix,
) -> Result<RowMatrix> {
    model.check_design(x)?;
    let l = compliance_likelihoods(z, t, model.strata)?;
    if l.rows() != x.rows() {
        return Err(CaceError::InvalidInput("z/t and design row counts differ".into()));
    }
    let mut post = RowMatrix::zeros(x.rows(), model.strata.len());
    estep(model, x, &l, &mut post);
    Ok(post)
}

/// Posteriors from explicit prior rows; also returns the observed-data
/// log-likelihood.
pub fn posterior_from_priors(priors: &RowMatrix, l: &RowMatrix) -> Result<(RowMatrix, f64)> {
    if priors.rows() != l.rows() || priors.cols() != l.cols() {
        return Err(CaceError::InvalidInput("prior and likelihood shapes differ".into()));
    }
    let mut post = RowMatrix::zeros(l.rows(), l.cols());
    let mut ll = 0.0;
    let mut lp = vec![0.0; l.cols()];
    for i in 0..l.rows() {
        for (a, &b) in lp.iter_mut().zip(priors.row(i)) {
            *a = b.ln();
        }
        ll += estep_row(&lp, l.row(i), post.row_mut(i));
    }
    Ok((post, ll))
}

fn degenerate_strata(
    strata: StratumSet,
    mass: &[f64],
    cols: usize,
    strict: bool,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let floor = 10.0 * cols as f64;
    let low: Vec<String> = strata
        .strata()
        .iter()
        .zip(mass)
        .filter(|(_, &m)| m < floor)
        .map(|(s, m)| format!("{}={m:.3}", s.short()))
        .collect();
    if low.is_empty() {
        return Ok(());
    }
    let msg = format!("strata with posterior mass below {floor}: {}", low.join(", "));
    if strict {
        return Err(CaceError::DegenerateData(msg));
    }
    log::debug!("{msg}");
    warnings.push(msg);
    Ok(())
}

fn em_from(
    x: &DesignMatrix,
    l: &RowMatrix,
    mut model: GatingModel,
    cfg: &GatingConfig,
) -> Result<(GatingModel, Vec<f64>, usize, bool, RowMatrix)> {
    let k = model.strata.len();
    let mut post = RowMatrix::zeros(x.rows(), k);
    let mut ll = estep(&model, x, l, &mut post);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let solver = SolverConfig {
        max_iter: cfg.m_step_newton.max(1),
        ..cfg.solver
    };
    while iterations < cfg.max_iter {
        iterations += 1;
        let fit = fit_weighted_multinomial(x, &post, &solver, Some(&model.delta))?;
        model.delta = fit.coefficients;
        let new_ll = estep(&model, x, l, &mut post);
        if !new_ll.is_finite() {
            return Err(CaceError::NonFinite("gating log-likelihood".into()));
        }
        let done = (new_ll - ll).abs() <= cfg.tol * ll.abs().max(f64::MIN_POSITIVE);
        ll = new_ll;
        trace.push(ll);
        if done {
            converged = true;
            break;
        }
    }
    Ok((model, trace, iterations, converged, post))
}

/// Fits the gating network by EM from uniform priors (plus optional random
/// restarts), keeping the highest observed-data log-likelihood.
pub fn em_fit_gating(data: &TrialDataset, strata: StratumSet, cfg: &GatingConfig) -> Result<GatingFit> {
    fit_gating_impl(data, strata, cfg, None)
}

/// Gating EM from a given model instead of uniform priors, without
/// restarts. Used to warm-start refits on perturbed data.
pub fn em_fit_gating_from(data: &TrialDataset, cfg: &GatingConfig, start: &GatingModel) -> Result<GatingFit> {
    let cfg = GatingConfig { restarts: 0, ..*cfg };
    fit_gating_impl(data, start.strata, &cfg, Some(start))
}

fn fit_gating_impl(
    data: &TrialDataset,
    strata: StratumSet,
    cfg: &GatingConfig,
    init: Option<&GatingModel>,
) -> Result<GatingFit> {
    let x = &data.x;
    if data.n() == 0 {
        return Err(CaceError::EmptySubset("gating data has no rows".into()));
    }
    let l = compliance_likelihoods(&data.z, &data.t, strata)?;
    let mut names = vec!["intercept".to_string()];
    names.extend(data.covariate_names.iter().cloned());

    let mut warnings = Vec::new();
    if cfg.strict {
        let uniform = RowMatrix::filled(x.rows(), strata.len(), 1.0 / strata.len() as f64);
        let (pre, _) = posterior_from_priors(&uniform, &l)?;
        degenerate_strata(strata, &pre.column_sums(), x.cols(), true, &mut warnings)?;
    }

    let start = GatingModel::uniform(strata, names);
    let first = match init {
        Some(m) => {
            m.check_design(x)?;
            m.clone()
        }
        None => start.clone(),
    };
    let mut best = em_from(x, &l, first, cfg)?;
    if cfg.restarts > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 0.5).expect("valid normal");
        for _ in 0..cfg.restarts {
            let mut m = start.clone();
            m.delta.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            let run = em_from(x, &l, m, cfg)?;
            if run.1.last() > best.1.last() {
                best = run;
            }
        }
    }
    let (model, loglik_trace, iterations, converged, post) = best;
    let posterior_mass = post.column_sums();
    degenerate_strata(strata, &posterior_mass, x.cols(), cfg.strict, &mut warnings)?;
    if !converged {
        let msg = format!("gating EM stopped at {iterations} iterations without converging");
        log::debug!("{msg}");
        warnings.push(msg);
    }
    Ok(GatingFit {
        model,
        loglik_trace,
        iterations,
        converged,
        posterior_mass,
        warnings,
    })
}

/// Fit-on-soft-targets classifier used in place of the parametric M-step.
pub trait MulticlassLearner {
    fn fit(&mut self, x: &DesignMatrix, targets: &RowMatrix) -> Result<()>;
    fn predict_proba(&self, x: &DesignMatrix) -> Result<RowMatrix>;
}

/// Multinomial logistic regression, warm-started from its previous fit.
#[derive(Debug, Clone, Default)]
pub struct ParametricMultinomial {
    pub solver: SolverConfig,
    pub coefficients: Option<Vec<f64>>,
    classes: usize,
}

impl ParametricMultinomial {
    pub fn new(solver: SolverConfig) -> Self {
        Self {
            solver,
            coefficients: None,
            classes: 0,
        }
    }
}

impl MulticlassLearner for ParametricMultinomial {
    fn fit(&mut self, x: &DesignMatrix, targets: &RowMatrix) -> Result<()> {
        let init = self.coefficients.clone().unwrap_or_else(|| vec![0.0; (targets.cols() - 1) * x.cols()]);
        let fit = fit_weighted_multinomial(x, targets, &self.solver, Some(&init))?;
        self.coefficients = Some(fit.coefficients);
        self.classes = targets.cols();
        Ok(())
    }

    fn predict_proba(&self, x: &DesignMatrix) -> Result<RowMatrix> {
        let beta = self
            .coefficients
            .as_ref()
            .ok_or_else(|| CaceError::LearnerContractViolation("predict before fit".into()))?;
        let k = self.classes;
        let mut out = RowMatrix::zeros(x.rows(), k);
        for i in 0..x.rows() {
            let r = out.row_mut(i);
            multinomial_log_probs(x.row(i), beta, k, r);
            r.iter_mut().for_each(|v| *v = v.exp());
        }
        Ok(out)
    }
}

pub(crate) fn check_proba(p: &RowMatrix, rows: usize, cols: usize) -> Result<()> {
    if p.rows() != rows || p.cols() != cols {
        return Err(CaceError::LearnerContractViolation(format!(
            "prediction shape {}x{}, expected {rows}x{cols}",
            p.rows(),
            p.cols()
        )));
    }
    for i in 0..rows {
        let r = p.row(i);
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CaceError::LearnerContractViolation(format!(
                "row {i} has a negative or non-finite probability"
            )));
        }
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(CaceError::LearnerContractViolation(format!(
                "row {i} sums to {s}"
            )));
        }
    }
    Ok(())
}

/// One M-then-E cycle: fit the learner on the current posteriors, predict
/// priors, and recompute posteriors. Returns `(priors, posteriors, loglik)`.
pub fn nonparametric_gating_step<L: MulticlassLearner + ?Sized>(
    learner: &mut L,
    posteriors: &RowMatrix,
    x: &DesignMatrix,
    likelihoods: &RowMatrix,
) -> Result<(RowMatrix, RowMatrix, f64)> {
    learner.fit(x, posteriors)?;
    let priors = learner.predict_proba(x)?;
    check_proba(&priors, x.rows(), posteriors.cols())?;
    let (post, ll) = posterior_from_priors(&priors, likelihoods)?;
    Ok((priors, post, ll))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerGatingFit {
    pub priors: RowMatrix,
    pub posteriors: RowMatrix,
    pub iterations: usize,
    pub converged: bool,
    /// Largest absolute posterior change per iteration.
    pub change_trace: Vec<f64>,
}

/// EM-like gating fit against an arbitrary learner. Stops when no posterior
/// moves by more than `tol` or after `max_iter` cycles.
pub fn em_fit_gating_learner<L: MulticlassLearner + ?Sized>(
    learner: &mut L,
    data: &TrialDataset,
    strata: StratumSet,
    tol: f64,
    max_iter: usize,
) -> Result<LearnerGatingFit> {
    let l = compliance_likelihoods(&data.z, &data.t, strata)?;
    let k = strata.len();
    let mut priors = RowMatrix::filled(data.n(), k, 1.0 / k as f64);
    let (mut post, _) = posterior_from_priors(&priors, &l)?;
    let mut change_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let (p, h, _) = nonparametric_gating_step(learner, &post, &data.x, &l)?;
        let change = h.max_abs_diff(&post);
        priors = p;
        post = h;
        change_trace.push(change);
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(LearnerGatingFit {
        priors,
        posteriors: post,
        iterations,
        converged,
        change_trace,
    })
}

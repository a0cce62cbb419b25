//! Expert networks: conditional-outcome models `Q(x)` per stratum, fit by
//! EM inside a data subset where the mixture proportions are known.
//!
//! The parametric fits run through the same learner-driven engine as the
//! nonparametric variant, with [`GlmLearner`] as the learner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CaceError, Result};
use crate::glm::{
    dot, fit_weighted_least_squares_with, fit_weighted_logistic, gaussian_loglik_unchecked,
    log_sum_exp, softplus, DesignMatrix, RowMatrix, SolverConfig, PROB_FLOOR,
};
use crate::seed::child_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Binary,
    Continuous,
}

impl OutcomeKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(OutcomeKind::Binary),
            "continuous" => Ok(OutcomeKind::Continuous),
            _ => Err(CaceError::InvalidInput(format!("unknown outcome kind `{s}`"))),
        }
    }

    /// Checks that `y` is admissible for this kind.
    pub fn validate(self, y: &[f64]) -> Result<()> {
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(CaceError::NonFinite(format!("y at row {row}")));
        }
        if self == OutcomeKind::Binary {
            if let Some(row) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(CaceError::NonBinary {
                    column: "y".into(),
                    row,
                    value: y[row],
                });
            }
        }
        Ok(())
    }
}

/// Fitted parametric expert. Binary experts predict `expit(zeta' x)`,
/// continuous experts predict `zeta' x` with noise variance `sigma2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertModel {
    pub kind: OutcomeKind,
    pub zeta: Vec<f64>,
    pub sigma2: Option<f64>,
    /// False when the expert never received enough posterior mass to be fit.
    pub trained: bool,
    pub posterior_mass: f64,
}

impl ExpertModel {
    #[inline]
    pub fn predict_row(&self, xi: &[f64]) -> f64 {
        let eta = dot(xi, &self.zeta);
        match self.kind {
            OutcomeKind::Binary => 1.0 / (1.0 + (-eta).exp()),
            OutcomeKind::Continuous => eta,
        }
    }

    pub fn predict(&self, x: &DesignMatrix) -> Vec<f64> {
        (0..x.rows()).map(|i| self.predict_row(x.row(i))).collect()
    }
}

/// Known mixture proportions over 2 or 3 experts, one row per subset row.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownGating(RowMatrix);

impl KnownGating {
    pub fn new(g: RowMatrix) -> Result<Self> {
        if !(2..=3).contains(&g.cols()) {
            return Err(CaceError::InvalidInput(format!(
                "known gating needs 2 or 3 columns, got {}",
                g.cols()
            )));
        }
        for i in 0..g.rows() {
            let r = g.row(i);
            if r.iter().any(|v| !v.is_finite()) {
                return Err(CaceError::NonFinite(format!("gating row {i}")));
            }
            if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(CaceError::InvalidInput(format!("gating row {i} outside [0, 1]")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-8 {
                return Err(CaceError::InvalidInput(format!("gating row {i} sums to {s}")));
            }
        }
        Ok(Self(g))
    }

    /// Two-column gating `(p, 1 - p)`.
    pub fn binary(p: &[f64]) -> Result<Self> {
        let mut g = RowMatrix::zeros(p.len(), 2);
        for (i, &v) in p.iter().enumerate() {
            g.row_mut(i).copy_from_slice(&[v, 1.0 - v]);
        }
        Self::new(g)
    }

    pub fn matrix(&self) -> &RowMatrix {
        &self.0
    }

    pub fn experts(&self) -> usize {
        self.0.cols()
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceDenominator {
    /// `n' - d` for parametric learners, `n'` for learners without a
    /// parameter count.
    ResidualDf,
    /// `sum_i h_i`, the maximizer of the expected complete log-likelihood.
    PosteriorMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub solver: SolverConfig,
    /// Relative log-likelihood change that stops EM.
    pub tol: f64,
    pub max_iter: usize,
    /// Newton steps per logistic M-step.
    pub m_step_newton: usize,
    /// Number of random starts.
    pub restarts: usize,
    /// Iterations every start runs before only the best one is continued.
    /// Zero runs every start to convergence.
    pub burn_in: usize,
    pub variance_denominator: VarianceDenominator,
    /// Prior variance of the initial coefficients, per standardized column.
    pub init_variance: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            tol: 1e-8,
            max_iter: 500,
            m_step_newton: 1,
            restarts: 5,
            burn_in: 10,
            variance_denominator: VarianceDenominator::PosteriorMass,
            init_variance: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertFit {
    pub experts: Vec<ExpertModel>,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Index of the winning random start.
    pub start: usize,
    /// Final log-likelihood of every start, in start order.
    pub start_logliks: Vec<f64>,
    pub warnings: Vec<String>,
}

impl ExpertFit {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

/// Weighted regression/classification learner for one expert.
pub trait WeightedLearner {
    fn fit(&mut self, x: &DesignMatrix, y: &[f64], w: &[f64]) -> Result<()>;
    /// Conditional means: probabilities for binary outcomes.
    fn predict(&self, x: &DesignMatrix) -> Result<Vec<f64>>;
    /// Logits for binary learners that have them; lets the E-step avoid
    /// clamping saturated probabilities. When present, the engine takes the
    /// conditional means as their logistic transform.
    fn predict_logit(&self, _x: &DesignMatrix) -> Option<Vec<f64>> {
        None
    }
    /// Degrees of freedom subtracted by the residual-df variance denominator.
    fn parameter_count(&self) -> usize {
        0
    }
}

/// Weighted logistic or least-squares regression, warm-started from the
/// previous coefficients.
#[derive(Debug, Clone)]
pub struct GlmLearner {
    pub kind: OutcomeKind,
    pub solver: SolverConfig,
    pub coefficients: Vec<f64>,
}

impl GlmLearner {
    pub fn new(kind: OutcomeKind, solver: SolverConfig, init: Vec<f64>) -> Self {
        Self {
            kind,
            solver,
            coefficients: init,
        }
    }
}

impl WeightedLearner for GlmLearner {
    fn fit(&mut self, x: &DesignMatrix, y: &[f64], w: &[f64]) -> Result<()> {
        let fit = match self.kind {
            OutcomeKind::Binary => {
                fit_weighted_logistic(x, y, w, &self.solver, Some(&self.coefficients))?
            }
            OutcomeKind::Continuous => fit_weighted_least_squares_with(x, y, w, &self.solver)?,
        };
        self.coefficients = fit.coefficients;
        Ok(())
    }

    fn predict(&self, x: &DesignMatrix) -> Result<Vec<f64>> {
        let eta = (0..x.rows()).map(|i| x.dot_row(i, &self.coefficients));
        Ok(match self.kind {
            OutcomeKind::Binary => eta.map(|e| 1.0 / (1.0 + (-e).exp())).collect(),
            OutcomeKind::Continuous => eta.collect(),
        })
    }

    fn predict_logit(&self, x: &DesignMatrix) -> Option<Vec<f64>> {
        (self.kind == OutcomeKind::Binary)
            .then(|| (0..x.rows()).map(|i| x.dot_row(i, &self.coefficients)).collect())
    }

    fn parameter_count(&self) -> usize {
        self.coefficients.len()
    }
}

/// Current state of one expert inside the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertState {
    pub means: Vec<f64>,
    pub logits: Option<Vec<f64>>,
    pub sigma2: f64,
}

#[inline]
fn log_lik(kind: OutcomeKind, y: f64, s: &ExpertState, i: usize) -> f64 {
    match kind {
        OutcomeKind::Binary => match &s.logits {
            Some(eta) => -(y * softplus(-eta[i]) + (1.0 - y) * softplus(eta[i])),
            None => {
                let m = s.means[i].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                y * m.ln() + (1.0 - y) * (1.0 - m).ln()
            }
        },
        OutcomeKind::Continuous => gaussian_loglik_unchecked(y, s.means[i], s.sigma2),
    }
}

/// E-step `h_j = g_j L_j / sum_k g_k L_k`; rows with `g_j = 0` get
/// `h_j = 0` exactly. Returns the observed-data log-likelihood.
pub fn expert_posteriors(
    kind: OutcomeKind,
    y: &[f64],
    gating: &KnownGating,
    states: &[ExpertState],
    post: &mut RowMatrix,
) -> f64 {
    let g = gating.matrix();
    let j = g.cols();
    let mut buf = [0.0; 3];
    let mut ll = 0.0;
    for i in 0..y.len() {
        let gi = g.row(i);
        for k in 0..j {
            buf[k] = if gi[k] > 0.0 {
                gi[k].ln() + log_lik(kind, y[i], &states[k], i)
            } else {
                f64::NEG_INFINITY
            };
        }
        let lse = log_sum_exp(&buf[..j]);
        ll += lse;
        let h = post.row_mut(i);
        for k in 0..j {
            h[k] = if gi[k] > 0.0 { (buf[k] - lse).exp() } else { 0.0 };
        }
    }
    ll
}

/// How the engine decides it has converged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    RelativeLoglik(f64),
    PosteriorChange(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineOutput {
    pub states: Vec<ExpertState>,
    pub posteriors: RowMatrix,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub trained: Vec<bool>,
    pub mass: Vec<f64>,
}

fn variance_update(
    y: &[f64],
    means: &[f64],
    h: &[f64],
    denominator: VarianceDenominator,
    parameters: usize,
    floor: f64,
) -> f64 {
    let ss: f64 = y
        .iter()
        .zip(means)
        .zip(h)
        .map(|((y, m), w)| w * (y - m) * (y - m))
        .sum();
    let denom = match denominator {
        VarianceDenominator::PosteriorMass => h.iter().sum::<f64>(),
        VarianceDenominator::ResidualDf => (y.len() as f64 - parameters as f64).max(1.0),
    };
    (ss / denom).max(floor)
}

/// Refits every expert with enough posterior mass on the current
/// posteriors, then recomputes posteriors. Experts below `min_mass` keep
/// their previous state. Returns the new log-likelihood.
#[allow(clippy::too_many_arguments)]
pub fn nonparametric_expert_step<L: WeightedLearner>(
    learners: &mut [L],
    states: &mut [ExpertState],
    posteriors: &mut RowMatrix,
    x: &DesignMatrix,
    y: &[f64],
    gating: &KnownGating,
    kind: OutcomeKind,
    denominator: VarianceDenominator,
    min_mass: f64,
) -> Result<f64> {
    let n = y.len();
    let sigma_floor = 1e-12;
    for (j, learner) in learners.iter_mut().enumerate() {
        let h = posteriors.column(j);
        let mass: f64 = h.iter().sum();
        if mass < min_mass {
            continue;
        }
        match learner.fit(x, y, &h) {
            Ok(()) => {}
            // A skipped M-step leaves the expected complete-data objective
            // unchanged, so EM stays monotone.
            Err(CaceError::SingularSystem(m)) => {
                log::debug!("expert {j} kept its previous fit: {m}");
                continue;
            }
            Err(e) => return Err(e),
        }
        let logits = learner.predict_logit(x);
        let means = match (&logits, kind) {
            (Some(l), OutcomeKind::Binary) => l.iter().map(|&e| 1.0 / (1.0 + (-e).exp())).collect(),
            _ => learner.predict(x)?,
        };
        if means.len() != n || means.iter().any(|v| !v.is_finite()) {
            return Err(CaceError::LearnerContractViolation(format!(
                "expert {j} returned {} predictions for {n} rows or a non-finite value",
                means.len()
            )));
        }
        if kind == OutcomeKind::Binary && means.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CaceError::LearnerContractViolation(format!(
                "binary expert {j} predicted outside [0, 1]"
            )));
        }
        let sigma2 = match kind {
            OutcomeKind::Continuous => {
                variance_update(y, &means, &h, denominator, learner.parameter_count(), sigma_floor)
            }
            OutcomeKind::Binary => 1.0,
        };
        states[j] = ExpertState {
            means,
            logits,
            sigma2,
        };
    }
    Ok(expert_posteriors(kind, y, gating, states, posteriors))
}

/// Runs EM from the given expert states until `stop` fires or
/// `max_iter` iterations pass.
#[allow(clippy::too_many_arguments)]
pub fn run_expert_em<L: WeightedLearner>(
    learners: &mut [L],
    mut states: Vec<ExpertState>,
    x: &DesignMatrix,
    y: &[f64],
    gating: &KnownGating,
    kind: OutcomeKind,
    denominator: VarianceDenominator,
    stop: StopRule,
    max_iter: usize,
) -> Result<EngineOutput> {
    let n = y.len();
    let j = gating.experts();
    if learners.len() != j || states.len() != j {
        return Err(CaceError::InvalidInput(format!(
            "{} learners and {} states for {j} experts",
            learners.len(),
            states.len()
        )));
    }
    let min_mass = (x.cols() + 1) as f64;
    let mut post = RowMatrix::zeros(n, j);
    let mut ll = expert_posteriors(kind, y, gating, &states, &mut post);
    let mut trace = vec![ll];
    let initial_mass = post.column_sums();
    let mut ever_trained: Vec<bool> = initial_mass.iter().map(|&m| m >= min_mass).collect();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let before = matches!(stop, StopRule::PosteriorChange(_)).then(|| post.clone());
        let mass = post.column_sums();
        for (t, &m) in ever_trained.iter_mut().zip(&mass) {
            *t |= m >= min_mass;
        }
        let new_ll = nonparametric_expert_step(
            learners, &mut states, &mut post, x, y, gating, kind, denominator, min_mass,
        )?;
        if !new_ll.is_finite() {
            return Err(CaceError::NonFinite("expert log-likelihood".into()));
        }
        let done = match stop {
            StopRule::RelativeLoglik(tol) => (new_ll - ll).abs() <= tol * ll.abs().max(f64::MIN_POSITIVE),
            StopRule::PosteriorChange(tol) => before.is_some_and(|b| post.max_abs_diff(&b) < tol),
        };
        ll = new_ll;
        trace.push(ll);
        if done {
            converged = true;
            break;
        }
    }
    let mass = post.column_sums();
    let trained = ever_trained
        .iter()
        .zip(&mass)
        .map(|(&t, &m)| t && m >= min_mass)
        .collect();
    Ok(EngineOutput {
        states,
        posteriors: post,
        loglik_trace: trace,
        iterations,
        converged,
        trained,
        mass,
    })
}

/// Affine map applied to continuous outcomes before EM so that the
/// `N(0, D)` initialization and unit starting variance are scale-free.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeScaling {
    pub center: f64,
    pub scale: f64,
}

impl OutcomeScaling {
    pub fn identity() -> Self {
        Self {
            center: 0.0,
            scale: 1.0,
        }
    }

    pub fn for_outcome(kind: OutcomeKind, y: &[f64]) -> Self {
        if kind == OutcomeKind::Binary || y.is_empty() {
            return Self::identity();
        }
        let n = y.len() as f64;
        let m = y.iter().sum::<f64>() / n;
        let v = y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = v.sqrt();
        Self {
            center: m,
            scale: if s > 0.0 && s.is_finite() { s } else { 1.0 },
        }
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.center) / self.scale).collect()
    }
}

fn has_intercept(x: &DesignMatrix) -> bool {
    (0..x.rows()).all(|i| x.row(i)[0] == 1.0)
}

fn check_subset(x: &DesignMatrix, y: &[f64], gating: &KnownGating, kind: OutcomeKind) -> Result<()> {
    if y.is_empty() {
        return Err(CaceError::EmptySubset("expert subset has no rows".into()));
    }
    if x.rows() != y.len() || gating.rows() != y.len() {
        return Err(CaceError::InvalidInput(format!(
            "subset sizes differ: x {}, y {}, gating {}",
            x.rows(),
            y.len(),
            gating.rows()
        )));
    }
    if y.len() <= x.cols() {
        return Err(CaceError::DegenerateData(format!(
            "{} rows cannot identify {} coefficients",
            y.len(),
            x.cols()
        )));
    }
    kind.validate(y)
}

/// Per-column standard deviations of the subset design (1 for constant
/// columns).
fn column_scales(x: &DesignMatrix) -> Vec<f64> {
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|j| {
            let c = x.column(j);
            let m = c.iter().sum::<f64>() / n;
            let v = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

fn initial_coefficients(rng: &mut ChaCha8Rng, scales: &[f64], variance: f64) -> Vec<f64> {
    let sd = variance.sqrt();
    scales
        .iter()
        .map(|s| {
            let d = Normal::new(0.0, sd / s).expect("positive sd");
            d.sample(rng)
        })
        .collect()
}

/// Parametric expert EM with known gating over 2 or 3 experts.
pub fn em_fit_experts(
    x: &DesignMatrix,
    y: &[f64],
    gating: &KnownGating,
    kind: OutcomeKind,
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<ExpertFit> {
    check_subset(x, y, gating, kind)?;
    let j = gating.experts();
    let scaling = OutcomeScaling::for_outcome(kind, y);
    let ys = scaling.apply(y);
    let scales = column_scales(x);

    let starts = cfg.restarts.max(1);
    let first_budget = if starts > 1 && cfg.burn_in > 0 {
        cfg.burn_in.min(cfg.max_iter)
    } else {
        cfg.max_iter
    };
    let solver = SolverConfig {
        max_iter: cfg.m_step_newton.max(1),
        ..cfg.solver
    };
    let run = |learners: &mut [GlmLearner], states: Vec<ExpertState>, budget: usize| {
        run_expert_em(
            learners,
            states,
            x,
            &ys,
            gating,
            kind,
            cfg.variance_denominator,
            StopRule::RelativeLoglik(cfg.tol),
            budget,
        )
    };
    let mut best: Option<(usize, EngineOutput, Vec<GlmLearner>)> = None;
    let mut start_logliks = Vec::new();
    for r in 0..starts {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[r as u64]));
        let mut learners: Vec<GlmLearner> = (0..j)
            .map(|_| GlmLearner::new(kind, solver, initial_coefficients(&mut rng, &scales, cfg.init_variance)))
            .collect();
        let states = learners
            .iter()
            .map(|l| {
                Ok(ExpertState {
                    means: l.predict(x)?,
                    logits: l.predict_logit(x),
                    sigma2: 1.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = run(&mut learners, states, first_budget)?;
        let ll = *out.loglik_trace.last().unwrap();
        start_logliks.push(ll);
        let better = match &best {
            None => true,
            Some((_, b, _)) => ll > *b.loglik_trace.last().unwrap(),
        };
        if better {
            best = Some((r, out, learners));
        }
    }
    if let Some((_, out, learners)) = best.as_mut() {
        if !out.converged && out.iterations < cfg.max_iter {
            let more = run(learners, out.states.clone(), cfg.max_iter - out.iterations)?;
            let mut trace = std::mem::take(&mut out.loglik_trace);
            trace.extend_from_slice(&more.loglik_trace[1..]);
            let iterations = out.iterations + more.iterations;
            *out = EngineOutput {
                loglik_trace: trace,
                iterations,
                ..more
            };
        }
    }
    let (start, out, learners) = best.expect("at least one start");
    Ok(finish_fit(x, y, kind, cfg, scaling, start, out, learners, start_logliks))
}

#[allow(clippy::too_many_arguments)]
fn finish_fit(
    x: &DesignMatrix,
    y: &[f64],
    kind: OutcomeKind,
    cfg: &ExpertConfig,
    scaling: OutcomeScaling,
    start: usize,
    out: EngineOutput,
    learners: Vec<GlmLearner>,
    start_logliks: Vec<f64>,
) -> ExpertFit {
    let intercept = has_intercept(x);

    let log_shift = match kind {
        OutcomeKind::Continuous => y.len() as f64 * scaling.scale.ln(),
        OutcomeKind::Binary => 0.0,
    };
    let mut warnings = Vec::new();
    if !out.converged {
        warnings.push(format!("expert EM stopped at {} iterations without converging", out.iterations));
    }
    let experts = learners
        .into_iter()
        .zip(&out.states)
        .enumerate()
        .map(|(k, (l, s))| {
            let mut zeta: Vec<f64> = l.coefficients.iter().map(|c| c * scaling.scale).collect();
            if intercept {
                zeta[0] += scaling.center;
            } else if kind == OutcomeKind::Continuous && scaling.center != 0.0 {
                // Without an intercept the centering cannot be undone in
                // coefficient space; refit in original units instead.
                let w = out.posteriors.column(k);
                if let Ok(f) = fit_weighted_least_squares_with(x, y, &w, &cfg.solver) {
                    zeta = f.coefficients;
                }
            }
            if !out.trained[k] {
                warnings.push(format!("expert {k} untrained: posterior mass {:.3}", out.mass[k]));
            }
            ExpertModel {
                kind,
                zeta,
                sigma2: (kind == OutcomeKind::Continuous).then(|| s.sigma2 * scaling.scale * scaling.scale),
                trained: out.trained[k],
                posterior_mass: out.mass[k],
            }
        })
        .collect();
    for w in &warnings {
        log::debug!("{w}");
    }
    ExpertFit {
        experts,
        loglik_trace: out.loglik_trace.iter().map(|v| v - log_shift).collect(),
        iterations: out.iterations,
        converged: out.converged,
        start,
        start_logliks: start_logliks.iter().map(|v| v - log_shift).collect(),
        warnings,
    }
}

/// Expert EM from given models in original outcome units, with a single
/// start. Used to warm-start refits on perturbed data.
pub fn em_fit_experts_from(
    x: &DesignMatrix,
    y: &[f64],
    gating: &KnownGating,
    kind: OutcomeKind,
    cfg: &ExpertConfig,
    init: &[ExpertModel],
) -> Result<ExpertFit> {
    check_subset(x, y, gating, kind)?;
    if init.len() != gating.experts() || init.iter().any(|m| m.zeta.len() != x.cols()) {
        return Err(CaceError::InvalidInput("initial experts do not match the gating or design".into()));
    }
    let scaling = OutcomeScaling::for_outcome(kind, y);
    let ys = scaling.apply(y);
    let intercept = has_intercept(x);
    let solver = SolverConfig {
        max_iter: cfg.m_step_newton.max(1),
        ..cfg.solver
    };
    let mut learners: Vec<GlmLearner> = init
        .iter()
        .map(|m| {
            let mut z: Vec<f64> = m.zeta.iter().map(|c| c / scaling.scale).collect();
            if intercept {
                z[0] -= scaling.center / scaling.scale;
            }
            GlmLearner::new(kind, solver, z)
        })
        .collect();
    let states = learners
        .iter()
        .zip(init)
        .map(|(l, m)| {
            Ok(ExpertState {
                means: l.predict(x)?,
                logits: l.predict_logit(x),
                sigma2: m.sigma2.map_or(1.0, |v| v / (scaling.scale * scaling.scale)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = run_expert_em(
        &mut learners,
        states,
        x,
        &ys,
        gating,
        kind,
        cfg.variance_denominator,
        StopRule::RelativeLoglik(cfg.tol),
        cfg.max_iter,
    )?;
    let ll = *out.loglik_trace.last().unwrap();
    Ok(finish_fit(x, y, kind, cfg, scaling, 0, out, learners, vec![ll]))
}


/// Two-expert EM: complier versus the other stratum of the subset.
pub fn em_fit_experts_2(
    x: &DesignMatrix,
    y: &[f64],
    gating: &KnownGating,
    kind: OutcomeKind,
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<ExpertFit> {
    if gating.experts() != 2 {
        return Err(CaceError::InvalidInput("two-expert EM needs 2 gating columns".into()));
    }
    em_fit_experts(x, y, gating, kind, cfg, seed)
}

/// Three-expert EM: complier, always/never-taker, defier.
pub fn em_fit_experts_3(
    x: &DesignMatrix,
    y: &[f64],
    gating: &KnownGating,
    kind: OutcomeKind,
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<ExpertFit> {
    if gating.experts() != 3 {
        return Err(CaceError::InvalidInput("three-expert EM needs 3 gating columns".into()));
    }
    em_fit_experts(x, y, gating, kind, cfg, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerExpertFit {
    /// Fitted states in the standardized outcome units of `scaling`.
    pub output: EngineOutput,
    pub scaling: OutcomeScaling,
}

impl LearnerExpertFit {
    /// Expert means on the subset rows in original outcome units.
    pub fn means(&self, expert: usize) -> Vec<f64> {
        let s = self.scaling;
        self.output.states[expert]
            .means
            .iter()
            .map(|m| m * s.scale + s.center)
            .collect()
    }
}

/// EM-like expert fit against arbitrary learners. Starts from random
/// predictions (uniform probabilities for binary outcomes, standard normal
/// means for continuous ones) and stops on the largest posterior change.
#[allow(clippy::too_many_arguments)]
pub fn em_fit_experts_learner<L: WeightedLearner>(
    learners: &mut [L],
    x: &DesignMatrix,
    y: &[f64],
    gating: &KnownGating,
    kind: OutcomeKind,
    denominator: VarianceDenominator,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<LearnerExpertFit> {
    check_subset(x, y, gating, kind)?;
    let scaling = OutcomeScaling::for_outcome(kind, y);
    let ys = scaling.apply(y);
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[0]));
    let states = (0..gating.experts())
        .map(|_| ExpertState {
            means: (0..y.len())
                .map(|_| match kind {
                    OutcomeKind::Binary => rng.gen::<f64>(),
                    OutcomeKind::Continuous => StandardNormal.sample(&mut rng),
                })
                .collect(),
            logits: None,
            sigma2: 1.0,
        })
        .collect();
    let output = run_expert_em(
        learners,
        states,
        x,
        &ys,
        gating,
        kind,
        denominator,
        StopRule::PosteriorChange(tol),
        max_iter,
    )?;
    Ok(LearnerExpertFit { output, scaling })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(n: usize, k: usize, seed: u64) -> DesignMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.5..1.5)).collect();
        DesignMatrix::with_intercept(n, k, &f).unwrap()
    }

    #[test]
    fn certain_gating_gives_plain_glm_fit() {
        let x = design(400, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y: Vec<f64> = (0..400).map(|_| rng.gen_bool(0.3) as u8 as f64).collect();
        let g = KnownGating::binary(&vec![1.0; 400]).unwrap();
        let fit = em_fit_experts_2(&x, &y, &g, OutcomeKind::Binary, &ExpertConfig::default(), 3).unwrap();
        let plain = fit_weighted_logistic(&x, &y, &vec![1.0; 400], &SolverConfig::default(), None).unwrap();
        for (a, b) in fit.experts[0].zeta.iter().zip(&plain.coefficients) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(fit.experts[0].trained);
        assert!(!fit.experts[1].trained);
        assert_eq!(fit.experts[1].posterior_mass, 0.0);
    }

    #[test]
    fn two_gaussian_clusters_are_separated() {
        let n = 5000;
        let x = DesignMatrix::new(n, 1, vec![1.0; n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let e: f64 = StandardNormal.sample(&mut rng);
                if i % 2 == 0 { e } else { 10.0 + e }
            })
            .collect();
        let g = KnownGating::binary(&vec![0.5; n]).unwrap();
        let fit = em_fit_experts_2(&x, &y, &g, OutcomeKind::Continuous, &ExpertConfig::default(), 9).unwrap();
        let mut means: Vec<(f64, f64)> = fit.experts.iter().map(|e| (e.zeta[0], e.sigma2.unwrap())).collect();
        means.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((means[0].0 - 0.0).abs() < 0.1, "{means:?}");
        assert!((means[1].0 - 10.0).abs() < 0.1, "{means:?}");
        for (_, s2) in means {
            assert!((s2 - 1.0).abs() < 0.2, "sigma2 {s2}");
        }
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10);
        }
    }

    #[test]
    fn zero_gating_column_stays_zero() {
        let _x = design(300, 1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y: Vec<f64> = (0..300).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        let mut g = RowMatrix::zeros(300, 3);
        for i in 0..300 {
            let p = if i % 3 == 0 { 0.0 } else { 0.4 };
            g.row_mut(i).copy_from_slice(&[0.6 - p / 2.0, 0.4 + p / 2.0 - p, p]);
        }
        let g = KnownGating::new(g).unwrap();
        let states: Vec<ExpertState> = (0..3)
            .map(|k| ExpertState {
                means: vec![0.2 + 0.3 * k as f64; 300],
                logits: None,
                sigma2: 1.0,
            })
            .collect();
        let mut post = RowMatrix::zeros(300, 3);
        expert_posteriors(OutcomeKind::Binary, &y, &g, &states, &mut post);
        for i in (0..300).step_by(3) {
            assert_eq!(post.get(i, 2), 0.0);
        }
        for i in 0..300 {
            assert!((post.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_row_is_degenerate() {
        let x = design(1, 2, 1);
        let g = KnownGating::new(RowMatrix::from_rows(&[vec![0.3, 0.3, 0.4]]).unwrap()).unwrap();
        assert!(matches!(
            em_fit_experts_3(&x, &[1.0], &g, OutcomeKind::Binary, &ExpertConfig::default(), 0),
            Err(CaceError::DegenerateData(_))
        ));
        let g0 = KnownGating::binary(&[]).unwrap();
        let x0 = DesignMatrix::new(1, 1, vec![1.0]).unwrap().select_rows(&[]);
        assert!(matches!(
            em_fit_experts_2(&x0, &[], &g0, OutcomeKind::Binary, &ExpertConfig::default(), 0),
            Err(CaceError::EmptySubset(_))
        ));
    }

    #[test]
    fn residual_df_variance_denominator_matches_formula() {
        let n = 600;
        let x = design(n, 1, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..n).map(|i| 2.0 * x.row(i)[1] + { let e: f64 = StandardNormal.sample(&mut rng); e }).collect();
        let g = KnownGating::binary(&vec![0.4; n]).unwrap();
        let h: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut post = RowMatrix::zeros(n, 2);
        for i in 0..n {
            post.row_mut(i).copy_from_slice(&[h[i], 1.0 - h[i]]);
        }
        let mut learners: Vec<GlmLearner> = (0..2)
            .map(|_| GlmLearner::new(OutcomeKind::Continuous, SolverConfig::default(), vec![0.0; 2]))
            .collect();
        let mut states = vec![
            ExpertState {
                means: vec![0.0; n],
                logits: None,
                sigma2: 1.0
            };
            2
        ];
        nonparametric_expert_step(
            &mut learners,
            &mut states,
            &mut post,
            &x,
            &y,
            &g,
            OutcomeKind::Continuous,
            VarianceDenominator::ResidualDf,
            3.0,
        )
        .unwrap();
        let f = fit_weighted_least_squares_with(&x, &y, &h, &SolverConfig::default()).unwrap();
        let ss: f64 = (0..n)
            .map(|i| {
                let r = y[i] - x.dot_row(i, &f.coefficients);
                h[i] * r * r
            })
            .sum();
        let expected = ss / (n as f64 - 2.0);
        assert!((states[0].sigma2 - expected).abs() <= 1e-12 * expected);
    }

    struct Constant(f64);
    impl WeightedLearner for Constant {
        fn fit(&mut self, _: &DesignMatrix, _: &[f64], _: &[f64]) -> Result<()> {
            Ok(())
        }
        fn predict(&self, x: &DesignMatrix) -> Result<Vec<f64>> {
            Ok(vec![self.0; x.rows()])
        }
    }

    #[test]
    fn constant_learners_return_priors() {
        let n = 50;
        let x = design(n, 1, 3);
        let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let p: Vec<f64> = (0..n).map(|i| 0.1 + 0.8 * i as f64 / n as f64).collect();
        let g = KnownGating::binary(&p).unwrap();
        let ybar = 0.5;
        let mut learners = [Constant(ybar), Constant(ybar)];
        let fit = em_fit_experts_learner(
            &mut learners,
            &x,
            &y,
            &g,
            OutcomeKind::Binary,
            VarianceDenominator::ResidualDf,
            1e-6,
            10,
            0,
        )
        .unwrap();
        for i in 0..n {
            assert!((fit.output.posteriors.get(i, 0) - p[i]).abs() < 1e-12);
        }
    }

    struct Broken;
    impl WeightedLearner for Broken {
        fn fit(&mut self, _: &DesignMatrix, _: &[f64], _: &[f64]) -> Result<()> {
            Ok(())
        }
        fn predict(&self, x: &DesignMatrix) -> Result<Vec<f64>> {
            Ok(vec![1.5; x.rows()])
        }
    }

    #[test]
    fn out_of_range_binary_predictions_violate_contract() {
        let x = design(20, 1, 3);
        let y: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let g = KnownGating::binary(&[0.5; 20]).unwrap();
        let r = em_fit_experts_learner(
            &mut [Broken, Broken],
            &x,
            &y,
            &g,
            OutcomeKind::Binary,
            VarianceDenominator::ResidualDf,
            1e-6,
            5,
            0,
        );
        assert!(matches!(r, Err(CaceError::LearnerContractViolation(_))));
    }

    #[test]
    fn binary_outcome_must_be_binary() {
        let x = design(10, 1, 3);
        let g = KnownGating::binary(&[0.5; 10]).unwrap();
        let y = vec![0.5; 10];
        assert!(matches!(
            em_fit_experts_2(&x, &y, &g, OutcomeKind::Binary, &ExpertConfig::default(), 0),
            Err(CaceError::NonBinary { .. })
        ));
    }
}

//! CACE estimators: gating, stratum probabilities, expert EM on the
//! subsets each assumption set calls for, and the plug-in ratio. Also the
//! IV baselines as estimators and the bootstrap around all of them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{iv_matching_estimator, wald_estimator, MatchingConfig};
use crate::data::TrialDataset;
use crate::error::{CaceError, Result};
use crate::experts::{
    em_fit_experts, em_fit_experts_from, ExpertConfig, ExpertFit, ExpertModel, KnownGating, OutcomeKind,
};
use crate::gating::{em_fit_gating, em_fit_gating_from, GatingConfig, GatingFit, GatingModel, StratumSet};
use crate::glm::{fit_weighted_logistic, DesignMatrix, RowMatrix, SolverConfig};
use crate::seed::child_seed;

/// Threshold below which a probability denominator counts as zero.
pub const POSITIVITY_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AssumptionSet {
    pub exclusion_restriction: bool,
    pub monotonicity: bool,
}

impl AssumptionSet {
    pub const NONE: Self = Self::new(false, false);
    pub const ER: Self = Self::new(true, false);
    pub const MO: Self = Self::new(false, true);
    pub const ER_MO: Self = Self::new(true, true);

    pub const fn new(exclusion_restriction: bool, monotonicity: bool) -> Self {
        Self {
            exclusion_restriction,
            monotonicity,
        }
    }

    pub fn strata(self) -> StratumSet {
        StratumSet::from_monotonicity(self.monotonicity)
    }

    pub fn estimator(self) -> EstimatorKind {
        match (self.exclusion_restriction, self.monotonicity) {
            (false, false) => EstimatorKind::Pi,
            (true, false) => EstimatorKind::PiEr,
            (false, true) => EstimatorKind::PiMo,
            (true, true) => EstimatorKind::PiMoEr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Pi,
    PiEr,
    PiMo,
    PiMoEr,
    IvMatching,
    IvWald,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Pi,
        EstimatorKind::PiEr,
        EstimatorKind::PiMo,
        EstimatorKind::PiMoEr,
        EstimatorKind::IvMatching,
        EstimatorKind::IvWald,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Pi => "pi",
            EstimatorKind::PiEr => "pi_er",
            EstimatorKind::PiMo => "pi_mo",
            EstimatorKind::PiMoEr => "pi_mo_er",
            EstimatorKind::IvMatching => "iv_matching",
            EstimatorKind::IvWald => "iv_wald",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CaceError::InvalidInput(format!("unknown estimator `{s}`")))
    }

    pub fn assumptions(self) -> Option<AssumptionSet> {
        match self {
            EstimatorKind::Pi => Some(AssumptionSet::NONE),
            EstimatorKind::PiEr => Some(AssumptionSet::ER),
            EstimatorKind::PiMo => Some(AssumptionSet::MO),
            EstimatorKind::PiMoEr => Some(AssumptionSet::ER_MO),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    ConstantMle,
    Logistic,
}

/// Estimated allocation probability `eta(x) = P(Z = 1 | x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationModel {
    Constant(f64),
    Logistic(Vec<f64>),
}

impl AllocationModel {
    pub fn predict(&self, x: &DesignMatrix) -> Vec<f64> {
        match self {
            AllocationModel::Constant(p) => vec![*p; x.rows()],
            AllocationModel::Logistic(b) => (0..x.rows())
                .map(|i| 1.0 / (1.0 + (-x.dot_row(i, b)).exp()))
                .collect(),
        }
    }
}

pub fn estimate_eta(data: &TrialDataset, mode: EtaMode, solver: &SolverConfig) -> Result<AllocationModel> {
    if data.n() == 0 {
        return Err(CaceError::EmptySubset("no rows for the allocation model".into()));
    }
    match mode {
        EtaMode::ConstantMle => {
            let m = data.z.iter().map(|&v| v as f64).sum::<f64>() / data.n() as f64;
            Ok(AllocationModel::Constant(m))
        }
        EtaMode::Logistic => {
            let z: Vec<f64> = data.z.iter().map(|&v| v as f64).collect();
            let fit = fit_weighted_logistic(&data.x, &z, &vec![1.0; data.n()], solver, None)?;
            Ok(AllocationModel::Logistic(fit.coefficients))
        }
    }
}

/// Per-row conditional stratum probabilities. `rho` holds `(c, a, n, d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumProbabilities {
    pub rho: RowMatrix,
    pub p_c11: Vec<f64>,
    pub p_c00: Vec<f64>,
    pub p_c_1: Vec<f64>,
    pub p_a_1: Vec<f64>,
    pub p_d_1: Vec<f64>,
    pub p_c_0: Vec<f64>,
    pub p_n_0: Vec<f64>,
    pub p_d_0: Vec<f64>,
    pub eta: Vec<f64>,
    pub e: Vec<f64>,
}

#[inline]
fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softmax3(a: f64, b: f64, c: f64) -> [f64; 3] {
    let m = a.max(b).max(c);
    let (ea, eb, ec) = ((a - m).exp(), (b - m).exp(), (c - m).exp());
    let s = ea + eb + ec;
    [ea / s, eb / s, ec / s]
}

/// Ratios of stratum probabilities, evaluated in the log domain so that
/// rows with tiny `rho` stay finite.
pub fn compute_stratum_probabilities(
    gating: &GatingModel,
    eta_model: &AllocationModel,
    x: &DesignMatrix,
) -> Result<StratumProbabilities> {
    let n = x.rows();
    let eta = eta_model.predict(x);
    if let Some(i) = eta
        .iter()
        .position(|&v| !(v > POSITIVITY_EPS && v < 1.0 - POSITIVITY_EPS))
    {
        return Err(CaceError::PositivityViolation(format!(
            "allocation probability {} at row {i} is not inside (0, 1)",
            eta[i]
        )));
    }
    let rho = gating.rho_full(x)?;
    let mut out = StratumProbabilities {
        rho,
        p_c11: vec![0.0; n],
        p_c00: vec![0.0; n],
        p_c_1: vec![0.0; n],
        p_a_1: vec![0.0; n],
        p_d_1: vec![0.0; n],
        p_c_0: vec![0.0; n],
        p_n_0: vec![0.0; n],
        p_d_0: vec![0.0; n],
        eta,
        e: vec![0.0; n],
    };
    for i in 0..n {
        let [lc, la, ln, ld] = gating.log_rho_full_row(x.row(i));
        let h = out.eta[i];
        let (lh, l1h) = (h.ln(), (1.0 - h).ln());
        out.p_c11[i] = logistic(lc - la);
        out.p_c00[i] = logistic(lc - ln);
        let p1 = softmax3(lc + lh, la, ld + l1h);
        let p0 = softmax3(lc + l1h, ln, ld + lh);
        out.p_c_1[i] = p1[0];
        out.p_a_1[i] = p1[1];
        out.p_d_1[i] = p1[2];
        out.p_c_0[i] = p0[0];
        out.p_n_0[i] = p0[1];
        out.p_d_0[i] = p0[2];
        let r = out.rho.row(i);
        out.e[i] = r[0] * h + r[1] + r[3] * (1.0 - h);
    }
    Ok(out)
}

/// `sum_i (q11_i - q00_i) rho_c_i / sum_i rho_c_i`.
pub fn plug_in_cace(rho_c: &[f64], q_c11: &[f64], q_c00: &[f64]) -> Result<f64> {
    if rho_c.len() != q_c11.len() || rho_c.len() != q_c00.len() {
        return Err(CaceError::InvalidInput("plug-in inputs have different lengths".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..rho_c.len() {
        num += (q_c11[i] - q_c00[i]) * rho_c[i];
        den += rho_c[i];
    }
    if !(den > 0.0) {
        return Err(CaceError::PositivityViolation("complier probabilities sum to zero".into()));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub outcome_kind: OutcomeKind,
    pub gating: GatingConfig,
    pub experts: ExpertConfig,
    pub eta_mode: EtaMode,
    pub matching: MatchingConfig,
    /// Seeds the expert initializations.
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(outcome_kind: OutcomeKind) -> Self {
        Self {
            outcome_kind,
            gating: GatingConfig::default(),
            experts: ExpertConfig::default(),
            eta_mode: EtaMode::ConstantMle,
            matching: MatchingConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub failures: usize,
    pub level: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Successful replicate estimates in replicate order.
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaceEstimate {
    pub estimator: EstimatorKind,
    pub assumptions: Option<AssumptionSet>,
    pub delta_hat: f64,
    pub n: usize,
    pub bootstrap: Option<BootstrapSummary>,
    /// Share of all rows outside the covariate range of the `(1,1)`-side and
    /// `(0,0)`-side expert subsets.
    pub extrapolation_share: Option<[f64; 2]>,
    pub warnings: Vec<String>,
}

/// A fitted mixture-of-experts pipeline with its intermediate pieces.
#[derive(Debug, Clone)]
pub struct FittedPipeline {
    pub estimate: CaceEstimate,
    pub gating: GatingModel,
    pub probabilities: StratumProbabilities,
    pub expert_fits: [ExpertFit; 2],
    /// Row indices of the treated-side and control-side expert subsets.
    pub subsets: [Vec<usize>; 2],
    pub q_c11: Vec<f64>,
    pub q_c00: Vec<f64>,
}

fn gather(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

fn gating_rows(cols: &[&[f64]], idx: &[usize]) -> Result<KnownGating> {
    let mut g = RowMatrix::zeros(idx.len(), cols.len());
    for (r, &i) in idx.iter().enumerate() {
        let row = g.row_mut(r);
        for (k, c) in cols.iter().enumerate() {
            row[k] = c[i];
        }
        // Keep rows exactly normalized after the gather.
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    KnownGating::new(g)
}

fn complement(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| 1.0 - v).collect()
}

fn extrapolation_share(x: &DesignMatrix, subset: &[usize]) -> f64 {
    if subset.is_empty() {
        return 1.0;
    }
    let ranges = x.select_rows(subset).column_ranges();
    let outside = (0..x.rows())
        .filter(|&i| {
            x.row(i)
                .iter()
                .zip(&ranges)
                .any(|(v, (lo, hi))| v < lo || v > hi)
        })
        .count();
    outside as f64 / x.rows() as f64
}

fn check_subset_positivity(name: &str, denominators: &[f64], idx: &[usize]) -> Result<()> {
    if let Some(&i) = idx.iter().find(|&&i| denominators[i] < POSITIVITY_EPS) {
        return Err(CaceError::PositivityViolation(format!(
            "{name} is {} at subset row {i}",
            denominators[i]
        )));
    }
    Ok(())
}

/// Runs the full pipeline for one assumption set: gating EM, then the
/// expert stage.
pub fn fit_cace(data: &TrialDataset, assumptions: AssumptionSet, cfg: &PipelineConfig) -> Result<FittedPipeline> {
    cfg.outcome_kind.validate(&data.y)?;
    let gating = em_fit_gating(data, assumptions.strata(), &cfg.gating)?;
    fit_cace_with_gating(data, assumptions, &gating, cfg)
}

/// Expert stage and plug-in estimate given an already fitted gating
/// network, so estimators that share a stratum set can share one gating
/// fit.
pub fn fit_cace_with_gating(
    data: &TrialDataset,
    assumptions: AssumptionSet,
    gating: &GatingFit,
    cfg: &PipelineConfig,
) -> Result<FittedPipeline> {
    expert_stage(data, assumptions, gating, cfg, None)
}

/// Refits a pipeline on new data starting every EM from the fitted
/// models of `from` instead of the default starts.
pub fn refit_warm(data: &TrialDataset, from: &FittedPipeline, cfg: &PipelineConfig) -> Result<FittedPipeline> {
    let assumptions = from
        .estimate
        .assumptions
        .ok_or_else(|| CaceError::InvalidInput("pipeline has no assumption set".into()))?;
    cfg.outcome_kind.validate(&data.y)?;
    let gating = em_fit_gating_from(data, &cfg.gating, &from.gating)?;
    let init = [
        from.expert_fits[0].experts.clone(),
        from.expert_fits[1].experts.clone(),
    ];
    expert_stage(data, assumptions, &gating, cfg, Some(&init))
}

fn expert_stage(
    data: &TrialDataset,
    assumptions: AssumptionSet,
    gating: &GatingFit,
    cfg: &PipelineConfig,
    init: Option<&[Vec<ExpertModel>; 2]>,
) -> Result<FittedPipeline> {
    cfg.outcome_kind.validate(&data.y)?;
    if gating.model.strata != assumptions.strata() {
        return Err(CaceError::InvalidInput(format!(
            "gating fitted with {:?} but the assumption set needs {:?}",
            gating.model.strata,
            assumptions.strata()
        )));
    }
    let eta = estimate_eta(data, cfg.eta_mode, &cfg.gating.solver)?;
    let probs = compute_stratum_probabilities(&gating.model, &eta, &data.x)?;
    let rho = &probs.rho;
    let rho_c = rho.column(0);

    let (idx1, idx0) = if assumptions.exclusion_restriction {
        (
            data.indices_where(|_, t| t == 1),
            data.indices_where(|_, t| t == 0),
        )
    } else {
        (
            data.indices_where(|z, t| z == 1 && t == 1),
            data.indices_where(|z, t| z == 0 && t == 0),
        )
    };
    for (idx, label) in [(&idx1, "treated"), (&idx0, "control")] {
        if idx.is_empty() {
            return Err(CaceError::EmptySubset(format!("{label}-side expert subset is empty")));
        }
    }

    let (g1, g0) = match (assumptions.exclusion_restriction, assumptions.monotonicity) {
        (false, _) => {
            let ca: Vec<f64> = (0..data.n()).map(|i| rho.get(i, 0) + rho.get(i, 1)).collect();
            let cn: Vec<f64> = (0..data.n()).map(|i| rho.get(i, 0) + rho.get(i, 2)).collect();
            check_subset_positivity("rho_c + rho_a", &ca, &idx1)?;
            check_subset_positivity("rho_c + rho_n", &cn, &idx0)?;
            let q1 = complement(&probs.p_c11);
            let q0 = complement(&probs.p_c00);
            (
                gating_rows(&[&probs.p_c11, &q1], &idx1)?,
                gating_rows(&[&probs.p_c00, &q0], &idx0)?,
            )
        }
        (true, mono) => {
            let one_minus_e = complement(&probs.e);
            check_subset_positivity("e", &probs.e, &idx1)?;
            check_subset_positivity("1 - e", &one_minus_e, &idx0)?;
            if mono {
                let q1 = complement(&probs.p_c_1);
                let q0 = complement(&probs.p_c_0);
                (
                    gating_rows(&[&probs.p_c_1, &q1], &idx1)?,
                    gating_rows(&[&probs.p_c_0, &q0], &idx0)?,
                )
            } else {
                (
                    gating_rows(&[&probs.p_c_1, &probs.p_a_1, &probs.p_d_1], &idx1)?,
                    gating_rows(&[&probs.p_c_0, &probs.p_n_0, &probs.p_d_0], &idx0)?,
                )
            }
        }
    };

    let fit_side = |idx: &[usize], g: &KnownGating, stream: u64| -> Result<ExpertFit> {
        let x = data.x.select_rows(idx);
        let y = gather(&data.y, idx);
        match init {
            Some(m) => em_fit_experts_from(&x, &y, g, cfg.outcome_kind, &cfg.experts, &m[1 - stream as usize]),
            None => em_fit_experts(&x, &y, g, cfg.outcome_kind, &cfg.experts, child_seed(cfg.seed, &[stream])),
        }
    };
    let fit1 = fit_side(&idx1, &g1, 1)?;
    let fit0 = fit_side(&idx0, &g0, 0)?;
    for (fit, side) in [(&fit1, "treated"), (&fit0, "control")] {
        if !fit.experts[0].trained {
            return Err(CaceError::ComplierExpertUntrained(format!(
                "{side}-side complier expert has posterior mass {:.3}",
                fit.experts[0].posterior_mass
            )));
        }
    }
    let q_c11 = fit1.experts[0].predict(&data.x);
    let q_c00 = fit0.experts[0].predict(&data.x);
    let delta_hat = plug_in_cace(&rho_c, &q_c11, &q_c00)?;

    let mut warnings = gating.warnings.clone();
    warnings.extend(fit1.warnings.iter().map(|w| format!("treated side: {w}")));
    warnings.extend(fit0.warnings.iter().map(|w| format!("control side: {w}")));
    let estimate = CaceEstimate {
        estimator: assumptions.estimator(),
        assumptions: Some(assumptions),
        delta_hat,
        n: data.n(),
        bootstrap: None,
        extrapolation_share: Some([
            extrapolation_share(&data.x, &idx1),
            extrapolation_share(&data.x, &idx0),
        ]),
        warnings,
    };
    Ok(FittedPipeline {
        estimate,
        gating: gating.model.clone(),
        probabilities: probs,
        expert_fits: [fit1, fit0],
        subsets: [idx1, idx0],
        q_c11,
        q_c00,
    })
}

/// Point estimate for any estimator kind.
pub fn estimate(data: &TrialDataset, kind: EstimatorKind, cfg: &PipelineConfig) -> Result<f64> {
    match kind {
        EstimatorKind::IvWald => wald_estimator(&data.z, &data.t, &data.y),
        EstimatorKind::IvMatching => {
            let eta = estimate_eta(data, cfg.eta_mode, &cfg.gating.solver)?.predict(&data.x);
            Ok(iv_matching_estimator(&data.z, &data.t, &data.y, &eta, &cfg.matching)?.estimate)
        }
        _ => Ok(fit_cace(data, kind.assumptions().expect("pi estimator"), cfg)?
            .estimate
            .delta_hat),
    }
}

/// Point estimates for several estimators on one dataset, fitting each
/// gating stratum set at most once. Results follow the order of `kinds`.
pub fn estimate_many(
    data: &TrialDataset,
    kinds: &[EstimatorKind],
    cfg: &PipelineConfig,
) -> Vec<Result<CaceEstimate>> {
    let mut gatings: [Option<Result<GatingFit>>; 2] = [None, None];
    kinds
        .iter()
        .map(|&kind| match kind.assumptions() {
            None => estimate(data, kind, cfg).map(|delta_hat| CaceEstimate {
                estimator: kind,
                assumptions: None,
                delta_hat,
                n: data.n(),
                bootstrap: None,
                extrapolation_share: None,
                warnings: Vec::new(),
            }),
            Some(a) => {
                cfg.outcome_kind.validate(&data.y)?;
                let slot = a.monotonicity as usize;
                let g = gatings[slot]
                    .get_or_insert_with(|| em_fit_gating(data, a.strata(), &cfg.gating))
                    .clone()?;
                fit_cace_with_gating(data, a, &g, cfg).map(|p| p.estimate)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    /// Largest tolerated share of failed replicates.
    pub max_failure_rate: f64,
    /// Start each replicate's EM runs from the full-sample fit.
    pub warm_start: bool,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            level: 0.95,
            seed,
            max_failure_rate: 0.10,
            warm_start: true,
        }
    }
}

/// Percentile interval from order statistics `k_lo = floor((m + 1) a / 2)`
/// (at least 1) and `k_hi = m + 1 - k_lo` of the `m` sorted estimates.
pub fn percentile_ci(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(CaceError::InvalidInput("no bootstrap samples".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(CaceError::InvalidInput(format!("level {level} not in (0, 1)")));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    let alpha = 1.0 - level;
    let k_lo = (((m + 1) as f64 * alpha / 2.0 + 1e-9).floor() as usize).clamp(1, m);
    let k_hi = m + 1 - k_lo;
    Ok((s[k_lo - 1], s[k_hi - 1]))
}

/// Nonparametric bootstrap of an arbitrary estimator. Replicate `r`
/// resamples rows with a seed derived from `(seed, r)` and hands the
/// estimator a second derived seed for its own randomness. Replicates run
/// in parallel; results are merged in replicate order.
pub fn bootstrap_estimator<F>(data: &TrialDataset, boot: &BootstrapConfig, estimator: F) -> Result<BootstrapSummary>
where
    F: Fn(&TrialDataset, u64) -> Result<f64> + Sync,
{
    use rand::SeedableRng;
    if boot.replicates == 0 {
        return Err(CaceError::InvalidInput("bootstrap needs at least one replicate".into()));
    }
    let results: Vec<Result<f64>> = (0..boot.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(child_seed(boot.seed, &[r as u64, 0]));
            let sample = data.resample(&mut rng);
            estimator(&sample, child_seed(boot.seed, &[r as u64, 1]))
        })
        .collect();
    let mut samples = Vec::with_capacity(results.len());
    let mut failures = 0;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(v) if v.is_finite() => samples.push(v),
            Ok(_) => failures += 1,
            Err(e) => {
                log::debug!("bootstrap replicate {r} failed: {e}");
                failures += 1;
            }
        }
    }
    if failures as f64 > boot.max_failure_rate * boot.replicates as f64 {
        return Err(CaceError::TooManyFailures {
            failed: failures,
            total: boot.replicates,
        });
    }
    let (ci_low, ci_high) = percentile_ci(&samples, boot.level)?;
    Ok(BootstrapSummary {
        replicates: boot.replicates,
        failures,
        level: boot.level,
        ci_low,
        ci_high,
        samples,
    })
}

/// Point estimate plus percentile bootstrap interval for a mixture-of-
/// experts estimator.
pub fn bootstrap_cace(
    data: &TrialDataset,
    assumptions: AssumptionSet,
    cfg: &PipelineConfig,
    boot: &BootstrapConfig,
) -> Result<CaceEstimate> {
    let full = fit_cace(data, assumptions, cfg)?;
    let summary = bootstrap_estimator(data, boot, |d, seed| {
        let c = PipelineConfig { seed, ..*cfg };
        let fit = if boot.warm_start {
            refit_warm(d, &full, &c)?
        } else {
            fit_cace(d, assumptions, &c)?
        };
        Ok(fit.estimate.delta_hat)
    })?;
    let mut est = full.estimate;
    if summary.failures > 0 {
        est.warnings
            .push(format!("{} of {} bootstrap replicates failed", summary.failures, summary.replicates));
    }
    est.bootstrap = Some(summary);
    Ok(est)
}

/// Point estimate plus bootstrap interval for any estimator kind.
pub fn bootstrap_kind(
    data: &TrialDataset,
    kind: EstimatorKind,
    cfg: &PipelineConfig,
    boot: &BootstrapConfig,
) -> Result<CaceEstimate> {
    if let Some(a) = kind.assumptions() {
        return bootstrap_cace(data, a, cfg, boot);
    }
    let delta_hat = estimate(data, kind, cfg)?;
    let summary = bootstrap_estimator(data, boot, |d, _| estimate(d, kind, cfg))?;
    let mut warnings = Vec::new();
    if summary.failures > 0 {
        warnings.push(format!("{} of {} bootstrap replicates failed", summary.failures, summary.replicates));
    }
    Ok(CaceEstimate {
        estimator: kind,
        assumptions: None,
        delta_hat,
        n: data.n(),
        bootstrap: Some(summary),
        extrapolation_share: None,
        warnings,
    })
}

//! Monte Carlo study harness.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_params, draw_population, PopulationWithTruth, Scenario, Specification};
use crate::data::TrialDataset;
use crate::error::{CaceError, Result};
use crate::estimators::{estimate_many, EstimatorKind, PipelineConfig};
use crate::experts::OutcomeKind;
use crate::seed::child_seed;

/// Parameter seed used when none is given.
pub const DEFAULT_PARAMS_SEED: u64 = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub scenarios: Vec<Scenario>,
    pub specification: Specification,
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    pub estimators: Vec<EstimatorKind>,
    /// Seeds the replicate samples and estimator starts.
    pub seed: u64,
    /// Seeds the data-generating parameters.
    pub params_seed: u64,
    pub population: usize,
    pub pipeline: PipelineConfig,
}

impl StudyConfig {
    pub fn new(scenarios: Vec<Scenario>, specification: Specification) -> Self {
        Self {
            scenarios,
            specification,
            sample_sizes: vec![2000, 5000, 10000],
            replicates: 200,
            estimators: EstimatorKind::ALL.to_vec(),
            seed: 0,
            params_seed: DEFAULT_PARAMS_SEED,
            population: 1_000_000,
            pipeline: PipelineConfig::new(OutcomeKind::Binary),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CaceError::InvalidInput(m.into()));
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if self.scenarios.is_empty() || self.sample_sizes.is_empty() || self.estimators.is_empty() {
            return bad("scenarios, sample sizes and estimators must be non-empty");
        }
        if let Some(&n) = self.sample_sizes.iter().find(|&&n| n == 0 || n > self.population) {
            return bad(&format!("sample size {n} not in 1..={}", self.population));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub scenario: Scenario,
    pub n: usize,
    pub replicate: usize,
    pub estimator: EstimatorKind,
    pub estimate: Option<f64>,
    pub error: Option<String>,
}

/// Bias, SE and RMSE of one cell, in percentage points. SE uses the `1/R`
/// divisor so that `bias^2 + se^2 = rmse^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scenario: Scenario,
    pub specification: Specification,
    pub n: usize,
    pub estimator: EstimatorKind,
    pub truth: f64,
    pub mean: f64,
    pub bias_pct: f64,
    pub se_pct: f64,
    pub rmse_pct: f64,
    pub successes: usize,
    pub failures: usize,
}

impl CellSummary {
    pub fn from_estimates(
        scenario: Scenario,
        specification: Specification,
        n: usize,
        estimator: EstimatorKind,
        truth: f64,
        estimates: &[f64],
        failures: usize,
    ) -> Self {
        let r = estimates.len() as f64;
        let mean = estimates.iter().sum::<f64>() / r;
        let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / r;
        let bias = mean - truth;
        Self {
            scenario,
            specification,
            n,
            estimator,
            truth,
            mean,
            bias_pct: 100.0 * bias,
            se_pct: 100.0 * var.sqrt(),
            rmse_pct: 100.0 * (bias * bias + var).sqrt(),
            successes: estimates.len(),
            failures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    pub scenario: Scenario,
    pub true_delta: f64,
    pub complier_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub truths: Vec<ScenarioTruth>,
    pub summary: Vec<CellSummary>,
    pub records: Vec<ReplicateRecord>,
}

/// Seed of replicate `r` in the cell `(scenario, n)`.
pub fn replicate_seed(seed: u64, scenario: Scenario, n: usize, r: usize) -> u64 {
    child_seed(seed, &[scenario.number() as u64, n as u64, r as u64])
}

/// The subsample analysed as replicate `r` of the cell `(scenario, n)`.
pub fn draw_replicate(
    pop: &PopulationWithTruth,
    seed: u64,
    scenario: Scenario,
    n: usize,
    r: usize,
) -> Result<TrialDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(replicate_seed(seed, scenario, n, r), &[0]));
    pop.sample_rows(&mut rng, n)
}

/// Runs every estimator on `R` subsamples per `(scenario, n)` cell drawn
/// from one fixed population per scenario.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let mut truths = Vec::new();
    let mut summary = Vec::new();
    let mut records = Vec::new();
    for &scenario in &cfg.scenarios {
        let params = build_params(cfg.params_seed, scenario, cfg.specification);
        let pop = draw_population(&params, cfg.population, 0)?;
        truths.push(ScenarioTruth {
            scenario,
            true_delta: pop.true_delta,
            complier_share: pop.complier_share(),
        });
        for &n in &cfg.sample_sizes {
            let cell: Vec<Vec<ReplicateRecord>> = (0..cfg.replicates)
                .into_par_iter()
                .map(|r| {
                    let seed = replicate_seed(cfg.seed, scenario, n, r);
                    let record = |estimator, res: Result<f64>| ReplicateRecord {
                        scenario,
                        n,
                        replicate: r,
                        estimator,
                        estimate: res.as_ref().ok().copied(),
                        error: res.err().map(|e| e.name().to_string()),
                    };
                    let data = match draw_replicate(&pop, cfg.seed, scenario, n, r) {
                        Ok(d) => d,
                        Err(e) => {
                            return cfg
                                .estimators
                                .iter()
                                .map(|&k| record(k, Err(e.clone())))
                                .collect();
                        }
                    };
                    let pcfg = PipelineConfig {
                        seed: child_seed(seed, &[1]),
                        ..cfg.pipeline
                    };
                    estimate_many(&data, &cfg.estimators, &pcfg)
                        .into_iter()
                        .zip(&cfg.estimators)
                        .map(|(res, &k)| record(k, res.map(|e| e.delta_hat)))
                        .collect()
                })
                .collect();
            let cell: Vec<ReplicateRecord> = cell.into_iter().flatten().collect();
            for &k in &cfg.estimators {
                let est: Vec<f64> = cell
                    .iter()
                    .filter(|rec| rec.estimator == k)
                    .filter_map(|rec| rec.estimate)
                    .collect();
                let failures = cfg.replicates - est.len();
                summary.push(CellSummary::from_estimates(
                    scenario,
                    cfg.specification,
                    n,
                    k,
                    pop.true_delta,
                    &est,
                    failures,
                ));
            }
            records.extend(cell);
        }
    }
    Ok(StudyReport {
        config: cfg.clone(),
        truths,
        summary,
        records,
    })
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "NaN".into()
    }
}

/// OLS slope of `ln se` on `ln n`; `None` with fewer than two usable points.
pub fn log_log_slope(points: &[(usize, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(n, se)| *n > 0 && *se > 0.0 && se.is_finite())
        .map(|&(n, se)| ((n as f64).ln(), se.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

impl StudyReport {
    pub fn cell(&self, scenario: Scenario, n: usize, estimator: EstimatorKind) -> Option<&CellSummary> {
        self.summary
            .iter()
            .find(|c| c.scenario == scenario && c.n == n && c.estimator == estimator)
    }

    /// Table layout: one row per scenario, estimator and n.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "scenario,spec,n,estimator,bias_pct,se_pct,rmse_pct,failures")?;
        for c in &self.summary {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                c.scenario.number(),
                c.specification.label(),
                c.n,
                c.estimator.name(),
                fmt(c.bias_pct),
                fmt(c.se_pct),
                fmt(c.rmse_pct),
                c.failures
            )?;
        }
        Ok(())
    }

    /// Bias and RMSE bars per scenario, estimator and n.
    pub fn write_bias_rmse_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "scenario,spec,n,estimator,bias_pct,rmse_pct")?;
        for c in &self.summary {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                c.scenario.number(),
                c.specification.label(),
                c.n,
                c.estimator.name(),
                fmt(c.bias_pct),
                fmt(c.rmse_pct)
            )?;
        }
        Ok(())
    }

    /// Log SE against log n with the fitted slope of each estimator and
    /// scenario repeated on its rows.
    pub fn write_convergence_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "scenario,spec,estimator,n,se_pct,log_n,log_se,slope")?;
        for &s in &self.config.scenarios {
            for &k in &self.config.estimators {
                let cells: Vec<&CellSummary> = self
                    .summary
                    .iter()
                    .filter(|c| c.scenario == s && c.estimator == k)
                    .collect();
                let pts: Vec<(usize, f64)> = cells.iter().map(|c| (c.n, c.se_pct)).collect();
                let slope = log_log_slope(&pts).map_or("NaN".to_string(), fmt);
                for c in cells {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{}",
                        s.number(),
                        c.specification.label(),
                        k.name(),
                        c.n,
                        fmt(c.se_pct),
                        fmt((c.n as f64).ln()),
                        fmt(c.se_pct.ln()),
                        slope
                    )?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_exact_replicate() {
        let c = CellSummary::from_estimates(Scenario::S1, Specification::Well, 10, EstimatorKind::Pi, 0.3, &[0.3], 0);
        assert_eq!(c.bias_pct, 0.0);
        assert_eq!(c.se_pct, 0.0);
        assert_eq!(c.rmse_pct, 0.0);
    }

    #[test]
    fn rmse_decomposition() {
        let e = [0.1, 0.5, 0.35, 0.2, 0.9];
        let c = CellSummary::from_estimates(Scenario::S2, Specification::Misspecified, 5, EstimatorKind::IvWald, 0.25, &e, 1);
        assert!((c.bias_pct.powi(2) + c.se_pct.powi(2) - c.rmse_pct.powi(2)).abs() < 1e-10);
        let direct = (e.iter().map(|v| (v - 0.25f64).powi(2)).sum::<f64>() / 5.0).sqrt() * 100.0;
        assert!((c.rmse_pct - direct).abs() < 1e-10);
    }

    #[test]
    fn slope_of_root_n_rate() {
        let pts: Vec<(usize, f64)> = [2000, 5000, 10000].iter().map(|&n| (n, 3.0 / (n as f64).sqrt())).collect();
        assert!((log_log_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
        assert!(log_log_slope(&pts[..1]).is_none());
    }

    #[test]
    fn zero_replicates_rejected() {
        let mut cfg = StudyConfig::new(vec![Scenario::S1], Specification::Well);
        cfg.replicates = 0;
        assert!(matches!(run_study(&cfg), Err(CaceError::InvalidInput(_))));
    }

    #[test]
    fn small_study_is_deterministic() {
        let mut cfg = StudyConfig::new(vec![Scenario::S4], Specification::Well);
        cfg.sample_sizes = vec![600];
        cfg.replicates = 3;
        cfg.population = 5000;
        cfg.estimators = vec![EstimatorKind::IvWald, EstimatorKind::IvMatching];
        let a = run_study(&cfg).unwrap();
        let b = run_study(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.summary.len(), 2);
        assert_eq!(a.records.len(), 6);
        let mut out = Vec::new();
        a.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 3);
    }
}

//! Synthetic randomized trials with latent strata and full counterfactual
//! ground truth: 7 binary and 7 log-normal correlated covariates, softmax
//! strata, Bernoulli elementary potential outcomes.

pub mod study;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{CaceError, Result};
use crate::glm::{expit, softmax, DesignMatrix, RowMatrix};
use crate::seed::child_seed;

pub const N_COVARIATES: usize = 14;
pub const N_DESIGN: usize = N_COVARIATES + 1;
/// Design columns hidden from the analyst in the misspecified view.
pub const OMITTED_COLUMNS: [usize; 2] = [7, 14];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::S1, Scenario::S2, Scenario::S3, Scenario::S4];

    /// Exclusion restriction holds.
    pub fn er(self) -> bool {
        matches!(self, Scenario::S2 | Scenario::S4)
    }

    /// Monotonicity (no defiers) holds.
    pub fn mo(self) -> bool {
        matches!(self, Scenario::S3 | Scenario::S4)
    }

    pub fn number(self) -> u8 {
        match self {
            Scenario::S1 => 1,
            Scenario::S2 => 2,
            Scenario::S3 => 3,
            Scenario::S4 => 4,
        }
    }

    pub fn from_number(k: u8) -> Result<Self> {
        match k {
            1 => Ok(Scenario::S1),
            2 => Ok(Scenario::S2),
            3 => Ok(Scenario::S3),
            4 => Ok(Scenario::S4),
            _ => Err(CaceError::InvalidInput(format!("scenario must be 1..4, got {k}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Specification {
    Well,
    #[serde(rename = "mis")]
    Misspecified,
}

impl Specification {
    pub fn label(self) -> &'static str {
        match self {
            Specification::Well => "well",
            Specification::Misspecified => "mis",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "well" => Ok(Specification::Well),
            "mis" | "misspecified" => Ok(Specification::Misspecified),
            _ => Err(CaceError::InvalidInput(format!("unknown specification `{s}`"))),
        }
    }
}

/// Index of the elementary outcome `Y^{s=k, z=l, t=m}` in the 16-slot
/// layout, strata ordered `(c, a, n, d)`.
#[inline]
pub const fn outcome_slot(k: usize, l: usize, m: usize) -> usize {
    4 * k + 2 * l + m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationParams {
    pub seed: u64,
    pub scenario: Scenario,
    pub specification: Specification,
    pub eigenvalues: Vec<f64>,
    /// Row-major 14x14 orthogonal matrix.
    pub orthogonal: Vec<f64>,
    /// Stratum coefficients, rows `(c, a, n, d)`.
    pub delta: Vec<[f64; N_DESIGN]>,
    /// Outcome coefficients indexed by [`outcome_slot`].
    pub beta: Vec<[f64; N_DESIGN]>,
    /// Defier logit pinned at minus infinity.
    pub defiers_excluded: bool,
}

impl SimulationParams {
    pub fn orthogonal_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(N_COVARIATES, N_COVARIATES, &self.orthogonal)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let o = self.orthogonal_matrix();
        let l = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.eigenvalues.clone()));
        &o * l * o.transpose()
    }

    /// `rho = (c, a, n, d)` for one design row (with intercept).
    pub fn rho(&self, x: &[f64]) -> [f64; 4] {
        let mut logits: Vec<f64> = self.delta.iter().map(|d| crate::glm::dot(d, x)).collect();
        if self.defiers_excluded {
            logits.truncate(3);
        }
        let p = softmax(&logits);
        let mut out = [0.0; 4];
        out[..p.len()].copy_from_slice(&p);
        out
    }
}

/// Draws seed-determined parameters. Coefficient draws do not depend on the
/// scenario, so all four scenarios share `delta` and `beta` for a seed.
pub fn build_params(seed: u64, scenario: Scenario, specification: Specification) -> SimulationParams {
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[0x5eed]));
    let g = DMatrix::<f64>::from_fn(N_COVARIATES, N_COVARIATES, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..N_COVARIATES {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let orthogonal: Vec<f64> = (0..N_COVARIATES)
        .flat_map(|i| (0..N_COVARIATES).map(move |j| (i, j)))
        .map(|(i, j)| q[(i, j)])
        .collect();
    let mut unif = || -> [f64; N_DESIGN] {
        let mut a = [0.0; N_DESIGN];
        a.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..=1.0));
        a
    };
    let delta: Vec<_> = (0..4).map(|_| unif()).collect();
    let beta: Vec<_> = (0..16).map(|_| unif()).collect();
    SimulationParams {
        seed,
        scenario,
        specification,
        eigenvalues: (0..N_COVARIATES).map(|i| 1.0 + i as f64 * 0.2).collect(),
        orthogonal,
        delta,
        beta,
        defiers_excluded: scenario.mo(),
    }
}

/// A finite target population with every counterfactual stored.
#[derive(Debug, Clone)]
pub struct PopulationWithTruth {
    /// Observed data over the full well-specified design.
    pub data: TrialDataset,
    /// Stratum index per row in `(c, a, n, d)` order.
    pub strata: Vec<u8>,
    pub rho: RowMatrix,
    /// Sixteen elementary potential outcomes per row, see [`outcome_slot`].
    pub elementary: Vec<[u8; 16]>,
    pub y_t1: Vec<u8>,
    pub y_t0: Vec<u8>,
    /// Mean of `Y^{t=1} - Y^{t=0}` over complier rows.
    pub true_delta: f64,
    pub specification: Specification,
}

impl PopulationWithTruth {
    pub fn n(&self) -> usize {
        self.strata.len()
    }

    pub fn complier_share(&self) -> f64 {
        self.strata.iter().filter(|&&s| s == 0).count() as f64 / self.n() as f64
    }

    /// Subsample of `n` distinct rows, returned in the analyst view of the
    /// population's specification.
    pub fn sample_rows<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<TrialDataset> {
        if n == 0 || n > self.n() {
            return Err(CaceError::InvalidInput(format!(
                "cannot draw {n} rows from a population of {}",
                self.n()
            )));
        }
        let mut idx = sample(rng, self.n(), n).into_vec();
        idx.sort_unstable();
        Ok(misspecify_view(&self.data.subset(&idx), self.specification))
    }
}

pub fn covariate_names() -> Vec<String> {
    (1..=N_COVARIATES).map(|j| format!("x{j}")).collect()
}

/// Generates `n` rows. `stream` selects an independent RNG stream for the
/// same parameters.
pub fn draw_population(params: &SimulationParams, n: usize, stream: u64) -> Result<PopulationWithTruth> {
    if n == 0 {
        return Err(CaceError::InvalidInput("population size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(params.seed, &[0xda7a, stream]));
    let o = params.orthogonal_matrix();
    let sqrt_l: Vec<f64> = params.eigenvalues.iter().map(|l| l.sqrt()).collect();
    // Sigma = O diag(l) O', so A = O diag(sqrt l) satisfies A A' = Sigma.
    let a: Vec<f64> = (0..N_COVARIATES)
        .flat_map(|i| (0..N_COVARIATES).map(move |j| (i, j)))
        .map(|(i, j)| o[(i, j)] * sqrt_l[j])
        .collect();

    let mut xs = Vec::with_capacity(n * N_DESIGN);
    let mut z = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut strata = Vec::with_capacity(n);
    let mut rho = RowMatrix::zeros(n, 4);
    let mut elementary = Vec::with_capacity(n);
    let mut y_t1 = Vec::with_capacity(n);
    let mut y_t0 = Vec::with_capacity(n);
    let (mut effect_sum, mut compliers) = (0.0, 0usize);

    let mut eps = [0.0; N_COVARIATES];
    let mut x = [0.0; N_DESIGN];
    for i in 0..n {
        eps.iter_mut().for_each(|e| *e = StandardNormal.sample(&mut rng));
        x[0] = 1.0;
        for r in 0..N_COVARIATES {
            let v: f64 = (0..N_COVARIATES).map(|c| a[r * N_COVARIATES + c] * eps[c]).sum();
            x[r + 1] = if r < 7 { (v > 0.0) as u8 as f64 } else { v.exp() };
        }
        let p = params.rho(&x);
        rho.row_mut(i).copy_from_slice(&p);

        let u: f64 = rng.gen();
        let mut s = 3usize;
        let mut acc = 0.0;
        for (k, pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc {
                s = k;
                break;
            }
        }
        if p[s] == 0.0 {
            // Rounding guard: fall back to the most likely stratum.
            s = (0..4).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        }
        let zi: u8 = rng.gen_bool(0.5) as u8;

        let mut e = [0u8; 16];
        for (slot, b) in params.beta.iter().enumerate() {
            let q = expit(crate::glm::dot(b, &x));
            e[slot] = (rng.gen::<f64>() < q) as u8;
        }
        if params.scenario.er() {
            e[outcome_slot(1, 1, 1)] = e[outcome_slot(1, 0, 1)];
            e[outcome_slot(2, 1, 0)] = e[outcome_slot(2, 0, 0)];
        }

        let (sc, sa, sn, sd) = ((s == 0) as u8, (s == 1) as u8, (s == 2) as u8, (s == 3) as u8);
        let ti = sc * zi + sa + sd * (1 - zi);
        let y1 = sc * e[outcome_slot(0, 1, 1)]
            + sa * zi * e[outcome_slot(1, 1, 1)]
            + sa * (1 - zi) * e[outcome_slot(1, 0, 1)]
            + sd * e[outcome_slot(3, 0, 1)];
        let y0 = sc * e[outcome_slot(0, 0, 0)]
            + sn * zi * e[outcome_slot(2, 1, 0)]
            + sn * (1 - zi) * e[outcome_slot(2, 0, 0)]
            + sd * e[outcome_slot(3, 1, 0)];
        let yi = ti * y1 + (1 - ti) * y0;
        if s == 0 {
            effect_sum += y1 as f64 - y0 as f64;
            compliers += 1;
        }

        xs.extend_from_slice(&x);
        z.push(zi);
        t.push(ti);
        y.push(yi as f64);
        strata.push(s as u8);
        elementary.push(e);
        y_t1.push(y1);
        y_t0.push(y0);
    }
    if compliers == 0 {
        return Err(CaceError::DegenerateData("population contains no compliers".into()));
    }
    let design = DesignMatrix::new(n, N_DESIGN, xs)?;
    let data = TrialDataset::new(design, z, t, y, covariate_names())?;
    Ok(PopulationWithTruth {
        data,
        strata,
        rho,
        elementary,
        y_t1,
        y_t0,
        true_delta: effect_sum / compliers as f64,
        specification: params.specification,
    })
}

/// Analyst-visible covariates: all 14 when well specified, otherwise
/// without `x7` and `x14`.
pub fn misspecify_view(data: &TrialDataset, specification: Specification) -> TrialDataset {
    match specification {
        Specification::Well => data.clone(),
        Specification::Misspecified => {
            let keep: Vec<String> = data
                .covariate_names
                .iter()
                .enumerate()
                .filter(|(j, _)| !OMITTED_COLUMNS.contains(&(j + 1)))
                .map(|(_, n)| n.clone())
                .collect();
            data.select_covariates(&keep).expect("names come from the dataset")
        }
    }
}

#![allow(dead_code)]

use cacemix::experts::{KnownGating, OutcomeKind};
use cacemix::glm::{expit, softmax, DesignMatrix, RowMatrix};
use cacemix::TrialDataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn normal_design(n: usize, k: usize, seed: u64) -> DesignMatrix {
    let mut r = rng(seed);
    let f: Vec<f64> = (0..n * k).map(|_| r.sample(StandardNormal)).collect();
    DesignMatrix::with_intercept(n, k, &f).unwrap()
}

/// Draws a stratum index from a probability vector.
pub fn draw_index<R: Rng>(r: &mut R, p: &[f64]) -> usize {
    let u: f64 = r.gen();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

/// Trial with two standard-normal covariates, strata drawn from a
/// reference-coded softmax with logits `delta` for `(c, a, n)` (the defier
/// logit is 0; `None` in place of the defier means no defiers), and binary
/// outcomes from `expit(zeta' x)` where `zeta` is chosen per `(stratum, t)`.
pub struct Planted {
    pub delta: Vec<[f64; 3]>,
    pub defiers: bool,
    /// Outcome coefficients for compliers, treated non-compliers and
    /// untreated non-compliers.
    pub zeta: [[f64; 3]; 3],
}

pub struct PlantedSample {
    pub data: TrialDataset,
    pub strata: Vec<usize>,
    pub rho: Vec<[f64; 4]>,
}

impl Planted {
    pub fn rho(&self, xi: &[f64]) -> [f64; 4] {
        let mut l: Vec<f64> = self.delta.iter().map(|d| dot(d, xi)).collect();
        if self.defiers {
            l.push(0.0);
        }
        let p = softmax(&l);
        let mut out = [0.0; 4];
        out[..p.len()].copy_from_slice(&p);
        out
    }

    pub fn sample(&self, n: usize, seed: u64) -> PlantedSample {
        let mut r = rng(seed);
        let mut feats = Vec::with_capacity(2 * n);
        let (mut z, mut t, mut y) = (Vec::new(), Vec::new(), Vec::new());
        let mut strata = Vec::new();
        let mut rho = Vec::new();
        for _ in 0..n {
            let x1: f64 = r.sample(StandardNormal);
            let x2: f64 = r.sample(StandardNormal);
            let xi = [1.0, x1, x2];
            let p = self.rho(&xi);
            let s = draw_index(&mut r, &p);
            let zi = r.gen_bool(0.5) as u8;
            let ti = match s {
                0 => zi,
                1 => 1,
                2 => 0,
                _ => 1 - zi,
            };
            let zeta = match (s, ti) {
                (0, _) => &self.zeta[0],
                (_, 1) => &self.zeta[1],
                _ => &self.zeta[2],
            };
            let yi = (r.gen::<f64>() < expit(dot(zeta, &xi))) as u8 as f64;
            feats.extend_from_slice(&[x1, x2]);
            z.push(zi);
            t.push(ti);
            y.push(yi);
            strata.push(s);
            rho.push(p);
        }
        PlantedSample {
            data: TrialDataset::from_features(&feats, 2, z, t, y, None).unwrap(),
            strata,
            rho,
        }
    }

    /// Reference-coded gating coefficients in the fitted model's layout.
    pub fn flat_delta(&self) -> Vec<f64> {
        self.delta.iter().flat_map(|d| d.to_vec()).collect()
    }
}

/// Default planted design: distinct complier and defier logits, all four
/// strata well represented, experts far apart.
pub fn planted_full4() -> Planted {
    let s = 1.5;
    let base = [[0.5, 1.0, -0.5], [0.3, -0.8, 0.8], [0.2, 0.8, -0.6]];
    Planted {
        delta: base.iter().map(|d| d.map(|v| v * s)).collect(),
        defiers: true,
        zeta: [[-0.5, 1.2, -0.8], [0.7, -0.6, 0.5], [-0.3, -0.9, 0.9]],
    }
}

/// Subset data for expert EM: random gating rows, one random linear
/// expert per latent label.
pub fn mixture_case(n: usize, j: usize, kind: OutcomeKind, seed: u64) -> (DesignMatrix, Vec<f64>, KnownGating) {
    let mut r = rng(seed);
    let x = normal_design(n, 2, seed);
    let mut g = RowMatrix::zeros(n, j);
    let mut y = Vec::with_capacity(n);
    let coefs: Vec<[f64; 3]> = (0..j)
        .map(|_| [r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5)])
        .collect();
    for i in 0..n {
        let w: Vec<f64> = (0..j).map(|_| r.gen_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        let row: Vec<f64> = w.iter().map(|v| v / s).collect();
        let k = draw_index(&mut r, &row);
        g.row_mut(i).copy_from_slice(&row);
        let eta = dot(&coefs[k], x.row(i));
        y.push(match kind {
            OutcomeKind::Binary => r.gen_bool(expit(eta)) as u8 as f64,
            OutcomeKind::Continuous => eta + r.sample::<f64, _>(StandardNormal),
        });
    }
    (x, y, KnownGating::new(g).unwrap())
}

/// Design for the recovery check: balanced strata with slopes in separate
/// directions, so the mixing weights inside both expert subsets vary with
/// the covariates.
pub fn planted_recovery() -> Planted {
    Planted {
        delta: vec![[0.0, 1.5, -1.5], [0.0, 1.5, 1.5], [0.0, -1.5, 0.0]],
        ..planted_full4()
    }
}

mod common;

use cacemix::experts::*;
use cacemix::glm::{expit, DesignMatrix, RowMatrix};
use cacemix::Result;
use common::*;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn intercept(n: usize) -> DesignMatrix {
    DesignMatrix::new(n, 1, vec![1.0; n]).unwrap()
}

/// Textbook two-component Gaussian EM with fixed mixing weights, written
/// without any library code.
fn two_gaussian_em(y: &[f64], g: &[f64], mut mu: [f64; 2], mut s2: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let dens = |y: f64, m: f64, v: f64| (-(y - m) * (y - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    for _ in 0..2000 {
        let h: Vec<f64> = y
            .iter()
            .zip(g)
            .map(|(&yi, &gi)| {
                let a = gi * dens(yi, mu[0], s2[0]);
                let b = (1.0 - gi) * dens(yi, mu[1], s2[1]);
                a / (a + b)
            })
            .collect();
        for j in 0..2 {
            let w: Vec<f64> = h.iter().map(|&v| if j == 0 { v } else { 1.0 - v }).collect();
            let m: f64 = w.iter().sum();
            mu[j] = w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / m;
            s2[j] = w.iter().zip(y).map(|(a, b)| a * (b - mu[j]) * (b - mu[j])).sum::<f64>() / m;
        }
    }
    (mu, s2)
}

#[test]
fn gaussian_clusters_match_brute_force_em() {
    let n = 5_000;
    let mut r = rng(201);
    let y: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = r.sample(StandardNormal);
            if r.gen_bool(0.5) { e } else { 10.0 + e }
        })
        .collect();
    let g = KnownGating::binary(&vec![0.5; n]).unwrap();
    let fit = em_fit_experts_2(&intercept(n), &y, &g, OutcomeKind::Continuous, &ExpertConfig::default(), 3).unwrap();
    let mut got: Vec<(f64, f64)> = fit.experts.iter().map(|e| (e.zeta[0], e.sigma2.unwrap())).collect();
    got.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!((got[0].0 - 0.0).abs() < 0.1 && (got[1].0 - 10.0).abs() < 0.1);
    for (_, s2) in &got {
        assert!((s2 - 1.0).abs() < 0.2, "variance {s2}");
    }
    let (mu, s2) = two_gaussian_em(&y, &vec![0.5; n], [1.0, 9.0], [1.0, 1.0]);
    assert!((got[0].0 - mu[0]).abs() < 1e-4 && (got[1].0 - mu[1]).abs() < 1e-4);
    assert!((got[0].1 - s2[0]).abs() < 1e-4 && (got[1].1 - s2[1]).abs() < 1e-4);
}

/// Mixture rows of the `(Z = 1, T = 1)` kind: complier with probability
/// `P_c11(x)` from the planted gating, otherwise always-taker.
fn planted_mixture(n: usize, seed: u64) -> (DesignMatrix, Vec<f64>, Vec<f64>, Vec<usize>) {
    let p = planted_full4();
    let mut r = rng(seed);
    let mut rows = Vec::with_capacity(n);
    let (mut y, mut pc, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let xi = vec![1.0, r.sample(StandardNormal), r.sample(StandardNormal)];
        let rho = p.rho(&xi);
        let c = rho[0] / (rho[0] + rho[1]);
        let s = (!r.gen_bool(c)) as usize;
        let q = expit(dot(&p.zeta[s], &xi));
        y.push(r.gen_bool(q) as u8 as f64);
        pc.push(c);
        labels.push(s);
        rows.push(xi);
    }
    (DesignMatrix::from_rows(&rows).unwrap(), y, pc, labels)
}

#[test]
fn binary_complier_expert_is_recovered() {
    let (x, y, pc, _) = planted_mixture(50_000, 202);
    let g = KnownGating::binary(&pc).unwrap();
    let fit = em_fit_experts_2(&x, &y, &g, OutcomeKind::Binary, &ExpertConfig::default(), 5).unwrap();
    let truth = planted_full4().zeta;
    let err = max_abs_diff(&fit.experts[0].zeta, &truth[0]);
    assert!(err < 0.1, "complier error {err}: {:?}", fit.experts[0].zeta);
}

#[test]
fn binary_two_expert_fit_is_stable_across_starts() {
    let (x, y, pc, _) = planted_mixture(100_000, 203);
    let g = KnownGating::binary(&pc).unwrap();
    let cfg = ExpertConfig {
        restarts: 1,
        ..ExpertConfig::default()
    };
    let fits: Vec<ExpertFit> = (0..10)
        .map(|seed| em_fit_experts_2(&x, &y, &g, OutcomeKind::Binary, &cfg, seed).unwrap())
        .collect();
    for j in 0..2 {
        for c in 0..3 {
            let v: Vec<f64> = fits.iter().map(|f| f.experts[j].zeta[c]).collect();
            let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread < 0.05, "expert {j} coefficient {c} spread {spread}");
        }
    }
}

#[test]
fn three_linear_experts_recover_intercepts() {
    let n = 10_000;
    let mut r = rng(204);
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x1: f64 = r.sample(StandardNormal);
        let k = r.gen_range(0..3);
        let b = [-5.0, 0.0, 5.0][k];
        let e: f64 = r.sample(StandardNormal);
        y.push(b + 0.5 * x1 + e);
        rows.push(vec![1.0, x1]);
    }
    let x = DesignMatrix::from_rows(&rows).unwrap();
    let g = KnownGating::new(RowMatrix::filled(n, 3, 1.0 / 3.0)).unwrap();
    let fit = em_fit_experts_3(&x, &y, &g, OutcomeKind::Continuous, &ExpertConfig::default(), 7).unwrap();
    let mut b: Vec<f64> = fit.experts.iter().map(|e| e.zeta[0]).collect();
    b.sort_by(f64::total_cmp);
    assert!(max_abs_diff(&b, &[-5.0, 0.0, 5.0]) < 0.3, "intercepts {b:?}");
}

#[test]
fn inert_defier_column_reduces_three_experts_to_two() {
    let (x, y, pc, _) = planted_mixture(4_000, 205);
    let g2 = KnownGating::binary(&pc).unwrap();
    let mut m = RowMatrix::zeros(pc.len(), 3);
    for (i, &p) in pc.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&[p, 1.0 - p, 0.0]);
    }
    let g3 = KnownGating::new(m).unwrap();
    let cfg = ExpertConfig::default();
    let two = em_fit_experts_2(&x, &y, &g2, OutcomeKind::Binary, &cfg, 9).unwrap();
    let three = em_fit_experts_3(&x, &y, &g3, OutcomeKind::Binary, &cfg, 9).unwrap();
    assert!(max_abs_diff(&two.experts[0].zeta, &three.experts[0].zeta) < 1e-6);
    assert!(!three.experts[2].trained);
}

#[test]
fn continuous_fit_is_translation_equivariant() {
    let n = 3_000;
    let mut r = rng(206);
    let mut rows = Vec::new();
    let (mut y, mut g) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let x1: f64 = r.sample(StandardNormal);
        let p = expit(0.8 * x1);
        let e: f64 = r.sample(StandardNormal);
        y.push(if r.gen_bool(p) { 1.0 + 2.0 * x1 } else { -2.0 - x1 } + e);
        g.push(p);
        rows.push(vec![1.0, x1]);
    }
    let x = DesignMatrix::from_rows(&rows).unwrap();
    let kg = KnownGating::binary(&g).unwrap();
    let cfg = ExpertConfig::default();
    let a = em_fit_experts_2(&x, &y, &kg, OutcomeKind::Continuous, &cfg, 1).unwrap();
    let shifted: Vec<f64> = y.iter().map(|v| v + 250.0).collect();
    let b = em_fit_experts_2(&x, &shifted, &kg, OutcomeKind::Continuous, &cfg, 1).unwrap();
    for j in 0..2 {
        assert!((b.experts[j].zeta[0] - a.experts[j].zeta[0] - 250.0).abs() < 1e-6);
        assert!((b.experts[j].zeta[1] - a.experts[j].zeta[1]).abs() < 1e-6);
        assert!((b.experts[j].sigma2.unwrap() - a.experts[j].sigma2.unwrap()).abs() < 1e-6);
    }
}

/// Predicts the mean outcome of the rows whose true label is `label`,
/// whatever weights it is given.
struct OracleLearner {
    label: usize,
    labels: Vec<usize>,
    mean: f64,
}

impl WeightedLearner for OracleLearner {
    fn fit(&mut self, _x: &DesignMatrix, y: &[f64], _w: &[f64]) -> Result<()> {
        let own: Vec<f64> = y
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == self.label)
            .map(|(v, _)| *v)
            .collect();
        self.mean = own.iter().sum::<f64>() / own.len() as f64;
        Ok(())
    }

    fn predict(&self, x: &DesignMatrix) -> Result<Vec<f64>> {
        Ok(vec![self.mean; x.rows()])
    }
}

#[test]
fn oracle_learner_concentrates_posteriors() {
    // 20 rows, two separable groups.
    let y: Vec<f64> = (0..20).map(|i| if i < 10 { i as f64 * 0.1 } else { 4.0 + i as f64 * 0.1 }).collect();
    let labels: Vec<usize> = (0..20).map(|i| (i >= 10) as usize).collect();
    let x = intercept(20);
    let g = KnownGating::binary(&[0.5; 20]).unwrap();
    let mut learners: Vec<OracleLearner> = (0..2)
        .map(|label| OracleLearner {
            label,
            labels: labels.clone(),
            mean: 0.0,
        })
        .collect();
    let mut states: Vec<ExpertState> = (0..2)
        .map(|j| ExpertState {
            means: vec![2.0 + j as f64 * 0.1; 20],
            logits: None,
            sigma2: 25.0,
        })
        .collect();
    let mut post = RowMatrix::zeros(20, 2);
    expert_posteriors(OutcomeKind::Continuous, &y, &g, &states, &mut post);
    let on_truth = |p: &RowMatrix| (0..20).map(|i| p.get(i, labels[i])).sum::<f64>() / 20.0;
    let mut last = on_truth(&post);
    for _ in 0..6 {
        nonparametric_expert_step(
            &mut learners,
            &mut states,
            &mut post,
            &x,
            &y,
            &g,
            OutcomeKind::Continuous,
            VarianceDenominator::PosteriorMass,
            0.0,
        )
        .unwrap();
        let now = on_truth(&post);
        assert!(now >= last - 1e-12, "{last} -> {now}");
        last = now;
    }
    assert!(last > 0.99, "final concentration {last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn expert_em_log_likelihood_never_decreases(
        seed in any::<u64>(),
        three in any::<bool>(),
        binary in any::<bool>(),
    ) {
        let j = if three { 3 } else { 2 };
        let kind = if binary { OutcomeKind::Binary } else { OutcomeKind::Continuous };
        let (x, y, g) = mixture_case(600, j, kind, seed);
        let fit = em_fit_experts(&x, &y, &g, kind, &ExpertConfig::default(), seed).unwrap();
        for w in fit.loglik_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-10, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn posteriors_sum_to_one_and_respect_zero_priors(seed in any::<u64>()) {
        let (_, y, g) = mixture_case(200, 3, OutcomeKind::Binary, seed);
        let mut m = g.matrix().clone();
        for i in (0..m.rows()).step_by(3) {
            let r = m.row_mut(i);
            r[2] = 0.0;
            let s = r[0] + r[1];
            r[0] /= s;
            r[1] /= s;
        }
        let g = KnownGating::new(m).unwrap();
        let states: Vec<ExpertState> = (0..3)
            .map(|k| ExpertState { means: vec![0.2 + 0.3 * k as f64; 200], logits: None, sigma2: 1.0 })
            .collect();
        let mut post = RowMatrix::zeros(200, 3);
        expert_posteriors(OutcomeKind::Binary, &y, &g, &states, &mut post);
        for i in 0..200 {
            prop_assert!((post.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if i % 3 == 0 {
                prop_assert_eq!(post.get(i, 2), 0.0);
            }
        }
    }
}

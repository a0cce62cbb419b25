mod common;

use cacemix::baselines::*;
use cacemix::estimators::{estimate, EstimatorKind, PipelineConfig};
use cacemix::experts::OutcomeKind;
use cacemix::simgen::study::DEFAULT_PARAMS_SEED;
use cacemix::simgen::{build_params, draw_population, Scenario, Specification};
use common::*;
use proptest::prelude::*;

fn arm_means(z: &[u8], v: &[f64], arm: u8) -> f64 {
    let (s, c) = z
        .iter()
        .zip(v)
        .filter(|(zi, _)| **zi == arm)
        .fold((0.0, 0.0), |(s, c), (_, x)| (s + x, c + 1.0));
    s / c
}

#[test]
fn wald_is_ratio_of_arm_differences() {
    let z = [1, 1, 1, 0, 0, 0, 0];
    let t = [1, 1, 0, 0, 0, 1, 0];
    let y = [1.0, 0.5, 0.0, 0.0, 0.25, 1.0, 0.0];
    // (0.5 - 0.3125) / (2/3 - 1/4)
    let w = wald_estimator(&z, &t, &y).unwrap();
    assert!((w - 0.1875 / (2.0 / 3.0 - 0.25)).abs() < 1e-12);
}

#[test]
fn quantile_groups_are_balanced_and_respect_ties() {
    let v: Vec<f64> = (0..100).map(|i| (i / 4) as f64).collect();
    let g = quantile_groups(&v, 10);
    for i in 0..100 {
        for j in 0..100 {
            if v[i] == v[j] {
                assert_eq!(g[i], g[j]);
            }
            if v[i] < v[j] {
                assert!(g[i] <= g[j]);
            }
        }
    }
    let mut counts = [0usize; 10];
    g.iter().for_each(|&k| counts[k] += 1);
    assert!(counts.iter().all(|&c| (8..=12).contains(&c)), "{counts:?}");
}

#[test]
fn baselines_are_close_to_truth_when_both_assumptions_hold() {
    let params = build_params(DEFAULT_PARAMS_SEED, Scenario::S4, Specification::Well);
    let pop = draw_population(&params, 1_000_000, 0).unwrap();
    let d = pop.sample_rows(&mut rng(401), 10_000).unwrap();
    let cfg = PipelineConfig::new(OutcomeKind::Binary);
    let wald = estimate(&d, EstimatorKind::IvWald, &cfg).unwrap();
    let matching = estimate(&d, EstimatorKind::IvMatching, &cfg).unwrap();
    assert!((wald - pop.true_delta).abs() < 0.03, "wald {wald} vs {}", pop.true_delta);
    assert!((matching - pop.true_delta).abs() < 0.03, "matching {matching} vs {}", pop.true_delta);
}

#[test]
fn wald_is_grossly_biased_when_both_assumptions_fail() {
    let params = build_params(DEFAULT_PARAMS_SEED, Scenario::S1, Specification::Misspecified);
    let pop = draw_population(&params, 1_000_000, 0).unwrap();
    let d = pop.sample_rows(&mut rng(402), 10_000).unwrap();
    let wald = wald_estimator(&d.z, &d.t, &d.y).unwrap();
    assert!((wald - pop.true_delta).abs() > 0.20, "wald {wald} vs {}", pop.true_delta);
}

fn arb_trial() -> impl Strategy<Value = (Vec<u8>, Vec<u8>, Vec<f64>, Vec<f64>)> {
    prop::collection::vec((any::<bool>(), any::<bool>(), -5.0f64..5.0, 0.0f64..1.0), 4..120).prop_map(|rows| {
        let z = rows.iter().map(|r| r.0 as u8).collect();
        let t = rows.iter().map(|r| r.1 as u8).collect();
        let y = rows.iter().map(|r| r.2).collect();
        let e = rows.iter().map(|r| r.3).collect();
        (z, t, y, e)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn one_group_matching_equals_wald((z, t, y, eta) in arb_trial()) {
        let tf: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        prop_assume!(z.contains(&0) && z.contains(&1));
        let denom = arm_means(&z, &tf, 1) - arm_means(&z, &tf, 0);
        prop_assume!(denom.abs() > 1e-3);
        let cfg = MatchingConfig { n_groups: 1, ..MatchingConfig::default() };
        let m = iv_matching_estimator(&z, &t, &y, &eta, &cfg).unwrap();
        let w = wald_estimator(&z, &t, &y).unwrap();
        prop_assert!((m.estimate - w).abs() <= 1e-12 * (1.0 + w.abs()), "{} vs {}", m.estimate, w);
        prop_assert_eq!(m.groups_used, 1);
    }
}

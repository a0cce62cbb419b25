mod common;

use cacemix::glm::*;
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn wls_oracle(x: &DesignMatrix, y: &[f64], w: &[f64]) -> Vec<f64> {
    let (n, p) = (x.rows(), x.cols());
    let xm = DMatrix::from_row_slice(n, p, x.as_slice());
    let wm = DMatrix::from_diagonal(&DVector::from_column_slice(w));
    let xtw = xm.transpose() * wm;
    let lhs = &xtw * &xm;
    let rhs = &xtw * DVector::from_column_slice(y);
    let b = lhs.try_inverse().expect("invertible normal equations") * rhs;
    b.iter().copied().collect()
}

#[test]
fn least_squares_matches_explicit_normal_equations() {
    let x = normal_design(250, 4, 21);
    let mut r = rng(22);
    let y: Vec<f64> = (0..250).map(|_| r.gen_range(-3.0..3.0)).collect();
    let w: Vec<f64> = (0..250).map(|_| r.gen_range(0.0..1.0)).collect();
    let fit = fit_weighted_least_squares(&x, &y, &w).unwrap();
    let oracle = wls_oracle(&x, &y, &w);
    assert!(max_abs_diff(&fit.coefficients, &oracle) < 1e-8);

    // Weighted residuals are orthogonal to every column.
    let scale = y.iter().map(|v| v.abs()).sum::<f64>();
    for j in 0..x.cols() {
        let s: f64 = (0..250)
            .map(|i| w[i] * (y[i] - x.dot_row(i, &fit.coefficients)) * x.row(i)[j])
            .sum();
        assert!(s.abs() < 1e-8 * scale, "column {j}: {s}");
    }
}

#[test]
fn multinomial_recovers_planted_coefficients() {
    let n = 50_000;
    let x = normal_design(n, 2, 31);
    let planted = [[0.4, -0.7, 0.3], [-0.2, 0.5, 0.9], [0.6, 0.2, -0.8]];
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut l: Vec<f64> = planted.iter().map(|d| dot(d, x.row(i))).collect();
        l.push(0.0);
        rows.push(softmax(&l));
    }
    let targets = RowMatrix::from_rows(&rows).unwrap();
    let fit = fit_weighted_multinomial(&x, &targets, &SolverConfig::default(), None).unwrap();
    assert!(fit.converged);
    let truth: Vec<f64> = planted.iter().flat_map(|d| d.to_vec()).collect();
    assert!(max_abs_diff(&fit.coefficients, &truth) < 0.05);
}

#[test]
fn logistic_accepts_soft_targets() {
    // Soft targets give the same solution as duplicating each row with
    // labels 1 and 0 weighted by y and 1 - y.
    let x = normal_design(120, 2, 41);
    let mut r = rng(42);
    let y: Vec<f64> = (0..120).map(|_| r.gen_range(0.0..1.0)).collect();
    let soft = fit_weighted_logistic(&x, &y, &vec![1.0; 120], &SolverConfig::default(), None).unwrap();
    let mut rows = Vec::new();
    let (mut yy, mut ww) = (Vec::new(), Vec::new());
    for i in 0..120 {
        for (label, weight) in [(1.0, y[i]), (0.0, 1.0 - y[i])] {
            rows.push(x.row(i).to_vec());
            yy.push(label);
            ww.push(weight);
        }
    }
    let hard = fit_weighted_logistic(&DesignMatrix::from_rows(&rows).unwrap(), &yy, &ww, &SolverConfig::default(), None)
        .unwrap();
    assert!(max_abs_diff(&soft.coefficients, &hard.coefficients) < 1e-8);
}

fn arb_design() -> impl Strategy<Value = (DesignMatrix, Vec<f64>, Vec<f64>)> {
    (20usize..80, 1usize..4, any::<u64>()).prop_map(|(n, k, seed)| {
        let x = normal_design(n, k, seed);
        let mut r = rng(seed ^ 0xabc);
        let y: Vec<f64> = (0..n).map(|_| r.gen_bool(0.5) as u8 as f64).collect();
        let w: Vec<f64> = (0..n).map(|_| r.gen_range(0.05..1.0)).collect();
        (x, y, w)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(logits in prop::collection::vec(-700.0f64..700.0, 1..8)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn logistic_objective_never_decreases((x, y, w) in arb_design()) {
        let fit = fit_weighted_logistic(&x, &y, &w, &SolverConfig::default(), None).unwrap();
        for s in fit.objective_trace.windows(2) {
            prop_assert!(s[1] >= s[0] - 1e-12 * s[0].abs());
        }
    }

    #[test]
    fn logistic_gradient_is_small_when_converged((x, y, w) in arb_design()) {
        let fit = fit_weighted_logistic(&x, &y, &w, &SolverConfig::default(), None).unwrap();
        prop_assume!(fit.converged && !fit.ridge_applied);
        let mut g = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            let p = 1.0 / (1.0 + (-x.dot_row(i, &fit.coefficients)).exp());
            for (gj, xj) in g.iter_mut().zip(x.row(i)) {
                *gj += w[i] * (y[i] - p) * xj;
            }
        }
        let norm = fit.coefficients.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(gmax < 1e-4 * (1.0 + norm), "gradient {}", gmax);
    }

    #[test]
    fn weight_rescaling_leaves_fits_unchanged((x, y, w) in arb_design(), c in 0.01f64..50.0) {
        prop_assume!(y.iter().any(|v| *v == 1.0) && y.iter().any(|v| *v == 0.0));
        let cfg = SolverConfig::default();
        let wc: Vec<f64> = w.iter().map(|v| v * c).collect();
        let a = fit_weighted_logistic(&x, &y, &w, &cfg, None).unwrap();
        let b = fit_weighted_logistic(&x, &y, &wc, &cfg, None).unwrap();
        prop_assume!(a.converged && b.converged && !a.ridge_applied);
        prop_assert!(max_abs_diff(&a.coefficients, &b.coefficients) < 1e-8);

        let ls_a = fit_weighted_least_squares(&x, &y, &w).unwrap();
        let ls_b = fit_weighted_least_squares(&x, &y, &wc).unwrap();
        prop_assert!(max_abs_diff(&ls_a.coefficients, &ls_b.coefficients) < 1e-8);
    }
}

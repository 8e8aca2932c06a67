//! Euler–Maruyama terminal laws against Gaussian oracles built independently
//! of the simulator.

use nalgebra::{DMatrix, DVector};

use hamiltonian_lab::linear_flow::{joint_law, PhaseVector, TimeMatrixPath};
use hamiltonian_lab::mc::McConfig;
use hamiltonian_lab::sde_lab::{self, SdeModel};
use hamiltonian_lab::stats::Moments;

struct Law {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

/// Mean and centred second moments of the terminal samples around `exact.mean`.
fn sample_moments(model: &SdeModel, x0: &PhaseVector, h: f64, n: usize, seed: u64, exact: &Law) -> (Vec<Moments>, Vec<Vec<Moments>>) {
    let rows = sde_lab::terminal_samples(model, x0, 1.0, h, &McConfig::new(n, seed)).unwrap();
    let d = exact.mean.len();
    let mut mean = vec![Moments::default(); d];
    let mut cov = vec![vec![Moments::default(); d]; d];
    for x in &rows {
        for i in 0..d {
            mean[i].push(x[i]);
            for j in 0..d {
                cov[i][j].push((x[i] - exact.mean[i]) * (x[j] - exact.mean[j]));
            }
        }
    }
    (mean, cov)
}

fn assert_matches(label: &str, mean: &[Moments], cov: &[Vec<Moments>], exact: &Law, bias: f64) {
    let d = exact.mean.len();
    for i in 0..d {
        let err = (mean[i].mean - exact.mean[i]).abs();
        assert!(err <= 3.0 * mean[i].stderr() + bias, "{label}: mean[{i}] {} vs {} (stderr {:.2e})", mean[i].mean, exact.mean[i], mean[i].stderr());
        for j in 0..d {
            let m = &cov[i][j];
            let err = (m.mean - exact.cov[(i, j)]).abs();
            assert!(err <= 3.0 * m.stderr() + bias, "{label}: cov[{i}{j}] {} vs {} (stderr {:.2e})", m.mean, exact.cov[(i, j)], m.stderr());
        }
    }
}

#[test]
fn linear_preset_terminal_law_matches_the_exact_law() {
    let one = DMatrix::identity(1, 1);
    let model = sde_lab::linear(one.clone(), one).unwrap();
    let x0 = PhaseVector::new(&[0.5], &[-1.0]);
    let law = joint_law(&TimeMatrixPath::unit(1.0).unwrap(), 0.0, 1.0, &x0, &[], &[]).unwrap();
    let exact = Law { mean: DVector::from_vec(law.mean.clone()), cov: law.cov_matrix() };
    let (mean, cov) = sample_moments(&model, &x0, 1.0 / 1024.0, 100_000, 5, &exact);
    assert_matches("linear", &mean, &cov, &exact, 0.0);
}

/// `dX¹ = X² dt`, `dX² = −2X¹ dt + dW`: a harmonic oscillator with `ω = √2`.
fn oscillator_law(x0: &[f64], t: f64) -> Law {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, 0.0]);
    let noise = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
    let mean = (&a * t).exp() * DVector::from_column_slice(x0);
    // composite Simpson on ∫_0^t e^{As} N e^{A*s} ds
    let n = 2000;
    let dt = t / n as f64;
    let mut cov = DMatrix::zeros(2, 2);
    for k in 0..=n {
        let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
        let e = (&a * (k as f64 * dt)).exp();
        cov += (&e * &noise * e.transpose()) * (w * dt / 3.0);
    }
    Law { mean, cov }
}

#[test]
fn oscillator_oracle_agrees_with_closed_form() {
    let t = 1.0;
    let w = 2f64.sqrt();
    let law = oscillator_law(&[1.0, 0.0], t);
    assert!((law.mean[0] - (w * t).cos()).abs() < 1e-12);
    assert!((law.mean[1] + w * (w * t).sin()).abs() < 1e-12);
    let c11 = (t / 2.0 - (2.0 * w * t).sin() / (4.0 * w)) / (w * w);
    let c12 = (w * t).sin().powi(2) / (2.0 * w * w);
    let c22 = t / 2.0 + (2.0 * w * t).sin() / (4.0 * w);
    assert!((law.cov[(0, 0)] - c11).abs() < 1e-12);
    assert!((law.cov[(0, 1)] - c12).abs() < 1e-12);
    assert!((law.cov[(1, 1)] - c22).abs() < 1e-12);
}

#[test]
fn quadratic_example_matches_the_oscillator_law() {
    let model = sde_lab::example_1_1(1.0, 1.0, 0.0, 1, DMatrix::identity(1, 1)).unwrap();
    let x0 = PhaseVector::new(&[1.0], &[0.0]);
    let h = 1.0 / 1024.0;
    let exact = oscillator_law(&[1.0, 0.0], 1.0);
    let (mean, cov) = sample_moments(&model, &x0, h, 100_000, 9, &exact);
    // the scheme is first order: |E X^h − E X| <= C h
    assert_matches("oscillator", &mean, &cov, &exact, 2.0 * h);
}

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

use hamiltonian_lab::heat_probe::{heat_apply, GridFunction, Growth};
use hamiltonian_lab::linear_flow::{gamma, joint_law, null_shift_check, q_matrix, PhaseVector, TimeMatrixPath};
use hamiltonian_lab::mc::McConfig;
use hamiltonian_lab::modulus::{dini_integral, ModulusFn, Verdict};
use hamiltonian_lab::rng::{self, Purpose};
use hamiltonian_lab::sde_lab::{self, BrownianDriver};
use hamiltonian_lab::volterra::resolvent;
use hamiltonian_lab::zvonkin::{build_transform, transformed_coeffs, TensorGrid, TransformField};

fn random_path(seed: u64, d: usize, pieces: usize) -> TimeMatrixPath {
    TimeMatrixPath::random(&mut rng::stream(seed, Purpose::Test, 0), d, d, pieces, 0.0, 1.0).unwrap()
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a: f64, v| a.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn power_and_log_power_are_nondecreasing(alpha in 0.0f64..=1.0, beta in 0.05f64..4.0) {
        for phi in [ModulusFn::power(alpha).unwrap(), ModulusFn::log_power(beta).unwrap()] {
            let mut prev = 0.0;
            for k in 1..=10_000 {
                let v = phi.value(k as f64 / 10_000.0);
                prop_assert!(v >= prev, "{phi} decreases at {k}");
                prev = v;
            }
        }
    }

    #[test]
    fn log_power_dini_verdict_follows_beta(beta in prop_oneof![0.3f64..0.9, 1.2f64..3.0]) {
        let rep = dini_integral(&ModulusFn::log_power(beta).unwrap(), 1e-10);
        let expected = if beta > 1.0 { Verdict::Converges } else { Verdict::Diverges };
        prop_assert_eq!(rep.verdict, expected);
    }

    #[test]
    fn gamma_is_additive_and_q_is_positive(seed in any::<u64>(), d in 1usize..=2, pieces in 1usize..=4, s in 0.0f64..0.3, u in 0.35f64..0.65, t in 0.7f64..=1.0) {
        let path = random_path(seed, d, pieces);
        let split = gamma(&path, s, u).unwrap() + gamma(&path, u, t).unwrap();
        prop_assert!(max_abs(&(split - gamma(&path, s, t).unwrap())) < 1e-12);
        let q = q_matrix(&path, s, t).unwrap();
        prop_assert!(max_abs(&(&q - q.transpose())) < 1e-14);
        prop_assert!(SymmetricEigen::new(q).eigenvalues.min() > 0.0);
    }

    #[test]
    fn q_inverse_times_cube_is_constant_for_constant_b(b in -2.0f64..2.0, c in 0.3f64..2.0) {
        let bm = DMatrix::from_row_slice(2, 2, &[c, b, 0.0, c]);
        let scaled: Vec<f64> = (0..8)
            .map(|k| {
                let dl = 2f64.powi(-k);
                let path = TimeMatrixPath::constant(bm.clone(), DMatrix::identity(2, 2), 0.0, dl).unwrap();
                let inv = q_matrix(&path, 0.0, dl).unwrap().try_inverse().unwrap();
                inv.svd(false, false).singular_values.max() * dl.powi(3)
            })
            .collect();
        for v in &scaled {
            prop_assert!((v / scaled[0] - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn law_satisfies_chapman_kolmogorov(seed in any::<u64>(), d in 1usize..=2, pieces in 1usize..=4, u in 0.2f64..0.8, x in prop::collection::vec(-2.0f64..2.0, 4)) {
        let path = random_path(seed, d, pieces);
        let x0 = PhaseVector::new(&x[..d], &x[2..2 + d]);
        let direct = joint_law(&path, 0.0, 1.0, &x0, &[], &[]).unwrap();
        let first = joint_law(&path, 0.0, u, &x0, &[], &[]).unwrap();
        let mid = PhaseVector::new(&first.mean[..d], &first.mean[d..2 * d]);
        let second = joint_law(&path, u, 1.0, &mid, &[], &[]).unwrap();
        let mut flow = DMatrix::identity(2 * d, 2 * d);
        flow.view_mut((0, d), (d, d)).copy_from(&gamma(&path, u, 1.0).unwrap());
        let composed = &flow * first.cov_matrix() * flow.transpose() + second.cov_matrix();
        let scale = 1.0 + max_abs(&direct.cov_matrix());
        prop_assert!(max_abs(&(composed - direct.cov_matrix())) < 1e-10 * scale);
        for k in 0..2 * d {
            prop_assert!((second.mean[k] - direct.mean[k]).abs() < 1e-10 * (1.0 + direct.mean[k].abs()));
        }
    }

    #[test]
    fn null_shift_residuals_vanish(seed in any::<u64>(), d in 1usize..=2, pieces in 1usize..=4, h in prop::collection::vec(-3.0f64..3.0, 4)) {
        let path = random_path(seed, d, pieces);
        let (a, b) = null_shift_check(&path, 0.1, 0.9, &PhaseVector::new(&h[..d], &h[2..2 + d])).unwrap();
        prop_assert!(a < 1e-9 && b < 1e-9, "{a} {b}");
    }

    #[test]
    fn unit_coefficients_give_kolmogorov_covariance(t in 0.01f64..4.0) {
        let law = joint_law(&TimeMatrixPath::unit(t).unwrap(), 0.0, t, &PhaseVector::zeros(1, 1), &[], &[]).unwrap();
        let exact = [t.powi(3) / 3.0, t * t / 2.0, t];
        let got = [law.cov_at(0, 0), law.cov_at(0, 1), law.cov_at(1, 1)];
        for (g, e) in got.iter().zip(exact) {
            prop_assert!((g - e).abs() <= 1e-14 * e.max(1.0));
        }
    }
}

// c·t^α kernels with α >= 1/2 and c <= 2.25 keep the Neumann series inside the iterate cap
proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn resolvent_renewal_and_refinement(alpha in 0.5f64..=1.0, c in 0.2f64..2.0) {
        let phi = ModulusFn::product(ModulusFn::constant(c).unwrap(), ModulusFn::power(alpha).unwrap());
        let coarse = resolvent(&phi, 1.0, 256).unwrap();
        let fine = resolvent(&phi, 1.0, 512).unwrap();
        for kg in [&coarse, &fine] {
            let l1: f64 = kg.a1_mass.iter().sum();
            prop_assert!(kg.renewal_residual <= 10.0 * kg.h * l1 * l1);
        }
        let (a, b) = (coarse.resolvent(), fine.resolvent());
        let l1: f64 = a.iter().enumerate().map(|(i, v)| (v - 0.5 * (b[2 * i] + b[2 * i + 1])).abs() * coarse.h).sum();
        let norm: f64 = coarse.resolvent_mass.iter().sum();
        prop_assert!(l1 <= 5.0 * coarse.h * norm.max(1.0), "L1 gap {l1}, |a|_1 {norm}");
    }

    #[test]
    fn resolvent_is_monotone_in_the_kernel(alpha in 0.5f64..=1.0, c in 0.2f64..1.5, bump in 1.0f64..1.5) {
        let small = ModulusFn::product(ModulusFn::constant(c).unwrap(), ModulusFn::power(alpha).unwrap());
        let large = ModulusFn::product(ModulusFn::constant(c * bump).unwrap(), ModulusFn::power(alpha).unwrap());
        let (a, b) = (resolvent(&small, 1.0, 256).unwrap(), resolvent(&large, 1.0, 256).unwrap());
        for (x, y) in a.resolvent_mass.iter().zip(&b.resolvent_mass) {
            prop_assert!(*x <= y * (1.0 + 1e-12));
        }
    }

    #[test]
    fn heat_semigroup_and_mass(t1 in 0.01f64..0.2, t2 in 0.01f64..0.2, w in 1.0f64..6.0) {
        let f = GridFunction::from_fn_1d(6.0, 1201, Growth::Bounded, |x| (-(w * x * x)).exp()).unwrap();
        let two = heat_apply(&heat_apply(&f, t1, 0, 0).unwrap(), t2, 0, 0).unwrap();
        let one = heat_apply(&f, t1 + t2, 0, 0).unwrap();
        let worst = two.values().iter().zip(one.values()).fold(0.0, |m: f64, (x, y)| m.max((x - y).abs()));
        prop_assert!(worst < 1e-11, "{worst}");
        prop_assert!((one.integral() - f.integral()).abs() < 1e-8);
    }

    #[test]
    fn driver_levels_are_exact_sums(seed in any::<u64>(), levels in 1u32..10, d2 in 1usize..=3) {
        let drv = BrownianDriver::from_seed(seed, 0, 1.0, levels, d2).unwrap();
        let fine = drv.increments(levels).unwrap();
        for level in 0..levels {
            let coarse = drv.increments(level).unwrap();
            let group = 1usize << (levels - level);
            for k in 0..1usize << level {
                for i in 0..d2 {
                    let mut s = 0.0;
                    for g in 0..group {
                        s += fine[(k * group + g) * d2 + i];
                    }
                    // both sides accumulate in the same order
                    prop_assert_eq!(coarse[k * d2 + i], s);
                }
            }
        }
    }

    #[test]
    fn integration_is_bit_deterministic(seed in any::<u64>()) {
        let m = sde_lab::holder_drift(2.0 / 3.0, 0.01).unwrap();
        let x0 = PhaseVector::new(&[0.2], &[-0.1]);
        let run = || sde_lab::integrate(&m, &x0, 1.0 / 128.0, 1.0, &BrownianDriver::from_seed(seed, 3, 1.0, 7, 1).unwrap(), true).unwrap();
        let (a, b) = (run(), run());
        prop_assert_eq!(a.states, b.states);
        prop_assert_eq!(a.jacobian, b.jacobian);
    }

    #[test]
    fn moment_estimates_increase_with_the_cap(seed in any::<u64>()) {
        let m = sde_lab::example_1_1(1.0, 1.0, 0.0, 1, DMatrix::identity(1, 1)).unwrap();
        let caps = [0.5, 1.0, 2.0, 4.0];
        let rep = sde_lab::moment_diag(&m, &PhaseVector::zeros(1, 1), 1.0, 1.0 / 64.0, 0.5, &caps, &McConfig::new(1024, seed)).unwrap();
        prop_assert!(rep.estimates.windows(2).all(|w| w[0].value <= w[1].value));
    }

    #[test]
    fn contractive_transforms_invert(amp in 0.0f64..0.45, k in 0.2f64..1.0, x in prop::collection::vec(-1.5f64..1.5, 2)) {
        let grid = TensorGrid::new(vec![-3.0, -3.0], vec![3.0, 3.0], vec![61, 61]).unwrap();
        // rows of ∇u are orthogonal: |∇u| <= amp·k/√2 < 1/2
        let u = move |_: f64, x: &[f64]| vec![amp * (k * (x[0] + x[1])).sin() / 2.0, amp * (k * (x[0] - x[1])).cos() / 2.0];
        let du = move |_: f64, x: &[f64]| {
            let (c, s) = ((k * (x[0] + x[1])).cos() * amp * k / 2.0, (k * (x[0] - x[1])).sin() * amp * k / 2.0);
            vec![c, c, -s, s]
        };
        let field = TransformField::from_fn(grid, vec![1.0], 1.0, 1.0, u, du);
        let tr = build_transform(&field, 0).unwrap();
        prop_assert!(tr.contraction < 0.5);
        let (back, _) = tr.inverse(&tr.forward(&x).unwrap()).unwrap();
        prop_assert!((back[0] - x[0]).abs() < 1e-9 && (back[1] - x[1]).abs() < 1e-9);
    }

    #[test]
    fn zero_transform_keeps_the_noise(s in 0.1f64..3.0, y in prop::collection::vec(-1.0f64..1.0, 2)) {
        let model = sde_lab::example_1_1(1.0, 1.0, 0.0, 1, DMatrix::from_element(1, 1, s)).unwrap();
        let grid = TensorGrid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![5, 5]).unwrap();
        let field = TransformField::from_fn(grid, vec![1.0], 1.0, 1.0, |_, _| vec![0.0, 0.0], |_, _| vec![0.0; 4]);
        let co = transformed_coeffs(&model, build_transform(&field, 0).unwrap()).unwrap();
        let theta = co.theta(&y).unwrap();
        prop_assert_eq!(theta.shape(), (2, 1));
        prop_assert_eq!(theta[(0, 0)], 0.0);
        prop_assert_eq!(theta[(1, 0)], s);
    }
}

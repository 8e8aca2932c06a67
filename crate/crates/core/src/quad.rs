//! Quadrature and 1D optimisation helpers.

use std::sync::OnceLock;

/// Gauss-Legendre nodes and weights on [-1, 1], computed by Newton iteration.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { z } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pnm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn gl3() -> &'static (Vec<f64>, Vec<f64>) {
    static T: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    T.get_or_init(|| gauss_legendre(3))
}

fn gl10() -> &'static (Vec<f64>, Vec<f64>) {
    static T: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    T.get_or_init(|| gauss_legendre(10))
}

fn gl20() -> &'static (Vec<f64>, Vec<f64>) {
    static T: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    T.get_or_init(|| gauss_legendre(20))
}

fn apply(rule: &(Vec<f64>, Vec<f64>), a: f64, b: f64, f: &mut impl FnMut(f64) -> f64) -> f64 {
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    rule.0.iter().zip(&rule.1).map(|(x, w)| w * f(c + h * x)).sum::<f64>() * h
}

/// 3-point Gauss-Legendre; exact for polynomials of degree <= 5.
pub fn gl3_integrate(a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    apply(gl3(), a, b, &mut f)
}

/// Fixed 20-point Gauss-Legendre.
pub fn gl20_integrate(a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    apply(gl20(), a, b, &mut f)
}

/// Adaptive bisection comparing 10- and 20-point Gauss-Legendre estimates.
pub fn adaptive(a: f64, b: f64, tol: f64, f: &mut impl FnMut(f64) -> f64) -> f64 {
    fn rec(a: f64, b: f64, tol: f64, depth: u32, f: &mut impl FnMut(f64) -> f64) -> f64 {
        let coarse = apply(gl10(), a, b, f);
        let fine = apply(gl20(), a, b, f);
        if (fine - coarse).abs() <= tol.max(1e-15 * fine.abs()) || depth >= 40 {
            return fine;
        }
        let m = 0.5 * (a + b);
        rec(a, m, 0.5 * tol, depth + 1, f) + rec(m, b, 0.5 * tol, depth + 1, f)
    }
    if a == b {
        return 0.0;
    }
    rec(a, b, tol, 0, f)
}

/// Golden-section search for a maximum of a unimodal function on [a, b].
pub fn golden_max(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64, iters: usize) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc > fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Geometric ladder `start * ratio^k`, k = 0..n.
pub fn geometric(start: f64, ratio: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| start * ratio.powi(k as i32)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gl_weights_sum_to_two() {
        for n in [1, 2, 3, 7, 10, 20] {
            let (_, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13, "n = {n}");
        }
    }

    #[test]
    fn gl3_exact_for_quintic() {
        let v = gl3_integrate(0.3, 1.7, |x| x.powi(5) - 2.0 * x.powi(2) + 1.0);
        let exact = |x: f64| x.powi(6) / 6.0 - 2.0 * x.powi(3) / 3.0 + x;
        assert!((v - (exact(1.7) - exact(0.3))).abs() < 1e-13);
    }

    #[test]
    fn adaptive_handles_sqrt_endpoint() {
        let v = adaptive(0.0, 1.0, 1e-12, &mut |x: f64| x.sqrt());
        assert!((v - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn golden_finds_interior_max() {
        let (x, fx) = golden_max(0.0, 3.0, |x| -(x - 1.2).powi(2) + 4.0, 100);
        assert!((x - 1.2).abs() < 1e-7);
        assert!((fx - 4.0).abs() < 1e-12);
    }
}

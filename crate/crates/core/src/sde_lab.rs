//! Euler–Maruyama laboratory for `dX¹ = b¹dt`, `dX² = b²dt + σ dW`, with an
//! optional extra drift `a` on both blocks.
//!
//! Every sample owns a [`BrownianDriver`] stored at the finest dyadic level;
//! coarser steps sum fine increments, so all members of a family and all step
//! sizes in a ladder see the same Brownian path.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linear_flow::PhaseVector;
use crate::mc::{self, Estimate, McConfig};
use crate::rng::{self, Purpose};
use crate::stats::{self, LinearFit};

/// `(t, x, out)`
pub type Field = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, ΔW, out)` with `out = ∇_x(σ(t,x)ΔW)`, a `d₂ × d` row-major matrix.
pub type NoiseJacobian = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type Scalar = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type Gradient = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// States beyond this sup-norm are treated as blow-up.
pub const BLOW_UP: f64 = 1e10;

#[derive(Clone)]
pub struct Lyapunov {
    pub h: Scalar,
    pub grad: Gradient,
    /// Hessian in the second block, `d₂ × d₂` row-major.
    pub hess22: Gradient,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RegularityMeta {
    pub alpha: f64,
    pub beta: f64,
    pub modulus: String,
}

#[derive(Clone)]
pub struct SdeModel {
    pub name: String,
    pub d1: usize,
    pub d2: usize,
    pub b1: Field,
    pub b2: Field,
    /// `d₂ × d₂` row-major.
    pub sigma: Field,
    pub a: Option<Field>,
    /// Jacobian of `b + a`, `d × d` row-major.
    pub drift_jacobian: Option<Field>,
    pub noise_jacobian: Option<NoiseJacobian>,
    pub sigma_constant: bool,
    pub lyapunov: Option<Lyapunov>,
    pub eps_lyap: f64,
    pub meta: RegularityMeta,
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("d1", &self.d1)
            .field("d2", &self.d2)
            .field("extra_drift", &self.a.is_some())
            .field("lyapunov", &self.lyapunov.is_some())
            .field("meta", &self.meta)
            .finish()
    }
}

impl SdeModel {
    pub fn dim(&self) -> usize {
        self.d1 + self.d2
    }

    /// `(b¹, b²) + a`
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let (top, bottom) = out.split_at_mut(self.d1);
        (self.b1)(t, x, top);
        (self.b2)(t, x, bottom);
        if let Some(a) = &self.a {
            let mut extra = vec![0.0; self.dim()];
            a(t, x, &mut extra);
            out.iter_mut().zip(&extra).for_each(|(o, e)| *o += e);
        }
    }

    pub fn sigma_matrix(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let mut s = vec![0.0; self.d2 * self.d2];
        (self.sigma)(t, x, &mut s);
        DMatrix::from_row_slice(self.d2, self.d2, &s)
    }

    /// `𝓛H = ⟨b + a, ∇H⟩ + ½ tr(σσ* ∇²₂₂H)`.
    pub fn generator_h(&self, t: f64, x: &[f64]) -> Option<f64> {
        let ly = self.lyapunov.as_ref()?;
        let d = self.dim();
        let mut drift = vec![0.0; d];
        self.drift(t, x, &mut drift);
        let mut grad = vec![0.0; d];
        (ly.grad)(x, &mut grad);
        let mut hess = vec![0.0; self.d2 * self.d2];
        (ly.hess22)(x, &mut hess);
        let s = self.sigma_matrix(t, x);
        let a = &s * s.transpose();
        let hm = DMatrix::from_row_slice(self.d2, self.d2, &hess);
        let first: f64 = drift.iter().zip(&grad).map(|(u, v)| u * v).sum();
        Some(first + 0.5 * a.component_mul(&hm).sum())
    }
}

/// Brownian increments at the finest level `h_min = T / 2^levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianDriver {
    pub horizon: f64,
    pub levels: u32,
    pub d2: usize,
    fine: Vec<f64>,
}

impl BrownianDriver {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, horizon: f64, levels: u32, d2: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParam { name: "T", reason: format!("{horizon} must be positive") });
        }
        if levels > 20 {
            return Err(Error::InvalidParam { name: "levels", reason: format!("{levels} exceeds 20") });
        }
        let sd = (horizon / 2f64.powi(levels as i32)).sqrt();
        let mut fine = vec![0.0; (1usize << levels) * d2];
        rng::fill_normal(rng, &mut fine);
        fine.iter_mut().for_each(|z| *z *= sd);
        Ok(Self { horizon, levels, d2, fine })
    }

    /// Driver `index` of the `(seed, Driver)` family.
    pub fn from_seed(seed: u64, index: u64, horizon: f64, levels: u32, d2: usize) -> Result<Self> {
        Self::new(&mut rng::stream(seed, Purpose::Driver, index), horizon, levels, d2)
    }

    pub fn h_min(&self) -> f64 {
        self.horizon / 2f64.powi(self.levels as i32)
    }

    /// Level whose step is `h`.
    pub fn level_for(&self, h: f64) -> Result<u32> {
        level_for(self.horizon, h).filter(|l| *l <= self.levels).ok_or_else(|| Error::InvalidParam {
            name: "h",
            reason: format!("{h} is not T/2^k for k <= {} (T = {})", self.levels, self.horizon),
        })
    }

    /// Increments at `level`, `2^level × d₂` row-major: sums of fine increments.
    pub fn increments(&self, level: u32) -> Result<Vec<f64>> {
        if level > self.levels {
            return Err(Error::InvalidParam { name: "level", reason: format!("{level} > {}", self.levels) });
        }
        let group = 1usize << (self.levels - level);
        let steps = 1usize << level;
        let mut out = vec![0.0; steps * self.d2];
        for k in 0..steps {
            for g in 0..group {
                let src = &self.fine[(k * group + g) * self.d2..(k * group + g + 1) * self.d2];
                out[k * self.d2..(k + 1) * self.d2].iter_mut().zip(src).for_each(|(o, s)| *o += s);
            }
        }
        Ok(out)
    }

    /// `W` at the grid points of `level`, `(2^level + 1) × d₂`.
    pub fn path(&self, level: u32) -> Result<Vec<f64>> {
        let inc = self.increments(level)?;
        let mut w = vec![0.0; inc.len() + self.d2];
        for k in 0..inc.len() / self.d2 {
            for i in 0..self.d2 {
                w[(k + 1) * self.d2 + i] = w[k * self.d2 + i] + inc[k * self.d2 + i];
            }
        }
        Ok(w)
    }
}

fn level_for(horizon: f64, h: f64) -> Option<u32> {
    let r = horizon / h;
    let k = r.round();
    if !(h > 0.0) || (r - k).abs() > 1e-9 * r || k < 1.0 || !(k as u64).is_power_of_two() {
        return None;
    }
    Some(k.log2().round() as u32)
}

/// Run Euler–Maruyama from `(t0, x0)` with step `h` over the increments `dw`
/// and call `visit(k, t_k, x_k)` at every grid point. Returns `true` on blow-up
/// (the path stops at the first state beyond [`BLOW_UP`]).
pub fn simulate(model: &SdeModel, x0: &[f64], t0: f64, h: f64, dw: &[f64], mut visit: impl FnMut(usize, f64, &[f64])) -> bool {
    let (d, d1, d2) = (model.dim(), model.d1, model.d2);
    let steps = dw.len() / d2;
    let mut x = x0.to_vec();
    let mut drift = vec![0.0; d];
    let mut sig = vec![0.0; d2 * d2];
    visit(0, t0, &x);
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        model.drift(t, &x, &mut drift);
        (model.sigma)(t, &x, &mut sig);
        let w = &dw[k * d2..(k + 1) * d2];
        for i in 0..d {
            x[i] += h * drift[i];
        }
        for i in 0..d2 {
            x[d1 + i] += (0..d2).map(|j| sig[i * d2 + j] * w[j]).sum::<f64>();
        }
        if x.iter().any(|v| !(v.abs() <= BLOW_UP)) {
            return true;
        }
        visit(k + 1, t0 + (k + 1) as f64 * h, &x);
    }
    false
}

/// [`simulate`] with the forward variational recursion
/// `J ← J + h∇(b+a)J + ∇(σΔW)J`; `visit` also receives `J_k`.
pub fn simulate_with_jacobian(
    model: &SdeModel,
    x0: &[f64],
    t0: f64,
    h: f64,
    dw: &[f64],
    mut visit: impl FnMut(usize, f64, &[f64], &DMatrix<f64>),
) -> Result<bool> {
    let dj = model
        .drift_jacobian
        .as_ref()
        .ok_or(Error::InvalidParam { name: "with_jacobian", reason: format!("model {} has no drift Jacobian", model.name) })?;
    if !model.sigma_constant && model.noise_jacobian.is_none() {
        return Err(Error::InvalidParam { name: "with_jacobian", reason: format!("model {} has state-dependent σ without ∇σ", model.name) });
    }
    let (d, d1, d2) = (model.dim(), model.d1, model.d2);
    let mut jac = DMatrix::<f64>::identity(d, d);
    let mut dbuf = vec![0.0; d * d];
    let mut nbuf = vec![0.0; d2 * d];
    let mut prev: Vec<f64> = x0.to_vec();
    Ok(simulate(model, x0, t0, h, dw, |k, t, x| {
        if k > 0 {
            let tp = t - h;
            dj(tp, &prev, &mut dbuf);
            let mut step = DMatrix::from_row_slice(d, d, &dbuf) * h;
            if let Some(nj) = &model.noise_jacobian {
                nj(tp, &prev, &dw[(k - 1) * d2..k * d2], &mut nbuf);
                for i in 0..d2 {
                    for j in 0..d {
                        step[(d1 + i, j)] += nbuf[i * d + j];
                    }
                }
            }
            jac += step * &jac;
            prev.copy_from_slice(x);
        }
        visit(k, t, x, &jac);
    }))
}

#[derive(Debug, Clone)]
pub struct SamplePath {
    pub times: Vec<f64>,
    pub dim: usize,
    pub d1: usize,
    /// Row-major states, one row per time.
    pub states: Vec<f64>,
    /// Row-major `d × d` Jacobians, one per time.
    pub jacobian: Option<Vec<f64>>,
    pub blown_up: bool,
}

impl SamplePath {
    pub fn x(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn state(&self, k: usize) -> PhaseVector {
        let x = self.x(k);
        PhaseVector::new(&x[..self.d1], &x[self.d1..])
    }

    pub fn jacobian_at(&self, k: usize) -> Option<DMatrix<f64>> {
        let d = self.dim;
        self.jacobian.as_ref().map(|j| DMatrix::from_row_slice(d, d, &j[k * d * d..(k + 1) * d * d]))
    }
}

pub fn integrate(model: &SdeModel, x0: &PhaseVector, h: f64, horizon: f64, driver: &BrownianDriver, with_jacobian: bool) -> Result<SamplePath> {
    if x0.x1.len() != model.d1 || x0.x2.len() != model.d2 || driver.d2 != model.d2 {
        return Err(Error::Dimension(format!("model ({}, {}) vs start ({}, {}) and driver {}", model.d1, model.d2, x0.x1.len(), x0.x2.len(), driver.d2)));
    }
    if (horizon - driver.horizon).abs() > 1e-12 * horizon {
        return Err(Error::InvalidParam { name: "T", reason: format!("{horizon} differs from the driver horizon {}", driver.horizon) });
    }
    let level = driver.level_for(h)?;
    let dw = driver.increments(level)?;
    let d = model.dim();
    let start = x0.to_vec();
    let mut times = Vec::with_capacity((1 << level) + 1);
    let mut states = Vec::with_capacity(((1 << level) + 1) * d);
    if !with_jacobian {
        let blown_up = simulate(model, &start, 0.0, h, &dw, |_, t, x| {
            times.push(t);
            states.extend_from_slice(x);
        });
        return Ok(SamplePath { times, dim: d, d1: model.d1, states, jacobian: None, blown_up });
    }
    let mut jacs = Vec::with_capacity(states.capacity() * d);
    let blown_up = simulate_with_jacobian(model, &start, 0.0, h, &dw, |_, t, x, jac| {
        times.push(t);
        states.extend_from_slice(x);
        for i in 0..d {
            for j in 0..d {
                jacs.push(jac[(i, j)]);
            }
        }
    })?;
    Ok(SamplePath { times, dim: d, d1: model.d1, states, jacobian: Some(jacs), blown_up })
}

/// `(|x|² + δ²)^{(p−1)/2} x`, the gradient of `(|x|² + δ²)^{(p+1)/2}/(p+1)`.
fn soft_power(x: &[f64], p: f64, delta: f64, out: &mut [f64]) {
    let r2: f64 = x.iter().map(|v| v * v).sum::<f64>() + delta * delta;
    let s = if r2 == 0.0 { 0.0 } else { r2.powf((p - 1.0) / 2.0) };
    out.iter_mut().zip(x).for_each(|(o, v)| *o = s * v);
}

/// Jacobian of [`soft_power`], `d × d` row-major, added with weight `w` into `out`
/// at row/column offsets `(r0, c0)` of a `stride`-wide matrix.
fn soft_power_jacobian(x: &[f64], p: f64, delta: f64, w: f64, out: &mut [f64], stride: usize, r0: usize, c0: usize) {
    let r2: f64 = x.iter().map(|v| v * v).sum::<f64>() + delta * delta;
    if r2 == 0.0 {
        if p == 1.0 {
            (0..x.len()).for_each(|i| out[(r0 + i) * stride + c0 + i] += w);
        }
        return;
    }
    let q = (p - 1.0) / 2.0;
    let s = r2.powf(q);
    let s1 = 2.0 * q * r2.powf(q - 1.0);
    for i in 0..x.len() {
        for j in 0..x.len() {
            let delta_ij = if i == j { s } else { 0.0 };
            out[(r0 + i) * stride + c0 + j] += w * (delta_ij + s1 * x[i] * x[j]);
        }
    }
}

fn constant_sigma(sigma: &DMatrix<f64>) -> Result<Field> {
    if !sigma.is_square() || sigma.nrows() == 0 {
        return Err(Error::Dimension(format!("σ must be square, got {}x{}", sigma.nrows(), sigma.ncols())));
    }
    if sigma.clone().try_inverse().is_none() {
        return Err(Error::Singular("σ is not invertible".into()));
    }
    let flat: Vec<f64> = sigma.transpose().iter().copied().collect();
    Ok(Arc::new(move |_, _, out: &mut [f64]| out.copy_from_slice(&flat)))
}

fn copy_block(from: usize, len: usize) -> Field {
    Arc::new(move |_, x: &[f64], out: &mut [f64]| out.copy_from_slice(&x[from..from + len]))
}

/// `H = 1 + c_x|x¹|² + c_v|x²|²` with derivatives.
fn quadratic_lyapunov(d1: usize, d2: usize, cx: f64, cv: f64) -> Lyapunov {
    Lyapunov {
        h: Arc::new(move |x: &[f64]| {
            1.0 + cx * x[..d1].iter().map(|v| v * v).sum::<f64>() + cv * x[d1..].iter().map(|v| v * v).sum::<f64>()
        }),
        grad: Arc::new(move |x: &[f64], out: &mut [f64]| {
            for i in 0..d1 + d2 {
                out[i] = 2.0 * if i < d1 { cx } else { cv } * x[i];
            }
        }),
        hess22: Arc::new(move |_, out: &mut [f64]| {
            out.iter_mut().enumerate().for_each(|(k, o)| *o = if k / d2 == k % d2 { 2.0 * cv } else { 0.0 })
        }),
    }
}

/// Example with `H = 1 + ½|x²|² + c₁(|x¹|² + δ²)^{(α+1)/2} + c₂|x¹|^{m+1}`,
/// `b = (x², −∇⁽¹⁾ of the c₁ term)`, `a = (0, −∇⁽¹⁾ of the c₂ term)`.
/// `δ = 0` is the unregularized model.
pub fn example_1_1_mollified(alpha: f64, c1: f64, c2: f64, m: u32, sigma: DMatrix<f64>, delta: f64) -> Result<SdeModel> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParam { name: "alpha", reason: format!("{alpha} not in (0, 1]") });
    }
    if !(c1 > 0.0) || !(c2 >= 0.0) || m < 1 || !(delta >= 0.0) {
        return Err(Error::InvalidParam { name: "c1/c2/m/delta", reason: format!("({c1}, {c2}, {m}, {delta})") });
    }
    let d = sigma.nrows();
    let sig = constant_sigma(&sigma)?;
    let mf = m as f64;
    let b2: Field = Arc::new(move |_, x: &[f64], out: &mut [f64]| {
        soft_power(&x[..d], alpha, delta, out);
        out.iter_mut().for_each(|o| *o *= -c1 * (alpha + 1.0));
    });
    let a: Option<Field> = (c2 > 0.0).then(|| {
        let f: Field = Arc::new(move |_, x: &[f64], out: &mut [f64]| {
            out[..d].iter_mut().for_each(|o| *o = 0.0);
            soft_power(&x[..d], mf, 0.0, &mut out[d..]);
            out[d..].iter_mut().for_each(|o| *o *= -c2 * (mf + 1.0));
        });
        f
    });
    let smooth = delta > 0.0 || alpha == 1.0;
    let drift_jacobian: Option<Field> = smooth.then(|| {
        let f: Field = Arc::new(move |_, x: &[f64], out: &mut [f64]| {
            out.iter_mut().for_each(|o| *o = 0.0);
            let n = 2 * d;
            (0..d).for_each(|i| out[i * n + d + i] = 1.0);
            soft_power_jacobian(&x[..d], alpha, delta, -c1 * (alpha + 1.0), out, n, d, 0);
            if c2 > 0.0 {
                soft_power_jacobian(&x[..d], mf, 0.0, -c2 * (mf + 1.0), out, n, d, 0);
            }
        });
        f
    });
    let lyapunov = Lyapunov {
        h: Arc::new(move |x: &[f64]| {
            let r2: f64 = x[..d].iter().map(|v| v * v).sum();
            let v2: f64 = x[d..].iter().map(|v| v * v).sum();
            1.0 + 0.5 * v2 + c1 * (r2 + delta * delta).powf((alpha + 1.0) / 2.0) + c2 * r2.powf((mf + 1.0) / 2.0)
        }),
        grad: Arc::new(move |x: &[f64], out: &mut [f64]| {
            let mut g = vec![0.0; d];
            soft_power(&x[..d], alpha, delta, &mut out[..d]);
            soft_power(&x[..d], mf, 0.0, &mut g);
            for i in 0..d {
                out[i] = c1 * (alpha + 1.0) * out[i] + c2 * (mf + 1.0) * g[i];
                out[d + i] = x[d + i];
            }
        }),
        hess22: Arc::new(move |_, out: &mut [f64]| {
            out.iter_mut().enumerate().for_each(|(k, o)| *o = if k / d == k % d { 1.0 } else { 0.0 })
        }),
    };
    Ok(SdeModel {
        name: format!("example_1_1(alpha={alpha}, c1={c1}, c2={c2}, m={m}, delta={delta})"),
        d1: d,
        d2: d,
        b1: copy_block(d, d),
        b2,
        sigma: sig,
        a,
        drift_jacobian,
        noise_jacobian: None,
        sigma_constant: true,
        lyapunov: Some(lyapunov),
        eps_lyap: 1.0,
        meta: RegularityMeta { alpha, beta: 1.0, modulus: format!("pow({alpha})") },
    })
}

/// Unregularized example; `α ∈ (2/3, 1]`.
pub fn example_1_1(alpha: f64, c1: f64, c2: f64, m: u32, sigma: DMatrix<f64>) -> Result<SdeModel> {
    if !(alpha > 2.0 / 3.0 && alpha <= 1.0) {
        return Err(Error::InvalidParam { name: "alpha", reason: format!("{alpha} not in (2/3, 1]") });
    }
    example_1_1_mollified(alpha, c1, c2, m, sigma, 0.0)
}

/// `d₁ = d₂ = 1`, `b = (x², (|x¹|² + δ²)^{γ/2})`, `σ = 1`.
pub fn holder_drift(gamma: f64, delta: f64) -> Result<SdeModel> {
    if !(gamma > 0.0 && gamma <= 1.0) || !(delta >= 0.0) {
        return Err(Error::InvalidParam { name: "gamma/delta", reason: format!("({gamma}, {delta})") });
    }
    let drift_jacobian: Option<Field> = (delta > 0.0).then(|| {
        let f: Field = Arc::new(move |_, x: &[f64], out: &mut [f64]| {
            let r2 = x[0] * x[0] + delta * delta;
            out.copy_from_slice(&[0.0, 1.0, gamma * r2.powf(gamma / 2.0 - 1.0) * x[0], 0.0]);
        });
        f
    });
    Ok(SdeModel {
        name: format!("holder_drift(gamma={gamma}, delta={delta})"),
        d1: 1,
        d2: 1,
        b1: copy_block(1, 1),
        b2: Arc::new(move |_, x: &[f64], out: &mut [f64]| out[0] = (x[0] * x[0] + delta * delta).powf(gamma / 2.0)),
        sigma: constant_sigma(&DMatrix::identity(1, 1))?,
        a: None,
        drift_jacobian,
        noise_jacobian: None,
        sigma_constant: true,
        lyapunov: Some(quadratic_lyapunov(1, 1, 1.0, 1.0)),
        eps_lyap: 1.0,
        meta: RegularityMeta { alpha: gamma, beta: 1.0, modulus: format!("pow({gamma})") },
    })
}

fn linear_model(name: String, a: DMatrix<f64>, sigma: DMatrix<f64>, lyapunov: Lyapunov) -> Result<SdeModel> {
    let d2 = sigma.nrows();
    let d = a.nrows();
    if !a.is_square() || d <= d2 {
        return Err(Error::Dimension(format!("drift matrix {}x{} with d2 = {d2}", a.nrows(), a.ncols())));
    }
    let d1 = d - d2;
    let flat: Vec<f64> = a.transpose().iter().copied().collect();
    let (top, bottom) = (flat.clone(), flat.clone());
    let jac = flat.clone();
    Ok(SdeModel {
        name,
        d1,
        d2,
        b1: Arc::new(move |_, x: &[f64], out: &mut [f64]| {
            for i in 0..d1 {
                out[i] = (0..d).map(|j| top[i * d + j] * x[j]).sum();
            }
        }),
        b2: Arc::new(move |_, x: &[f64], out: &mut [f64]| {
            for i in 0..d2 {
                out[i] = (0..d).map(|j| bottom[(d1 + i) * d + j] * x[j]).sum();
            }
        }),
        sigma: constant_sigma(&sigma)?,
        a: None,
        drift_jacobian: Some(Arc::new(move |_, _, out: &mut [f64]| out.copy_from_slice(&jac))),
        noise_jacobian: None,
        sigma_constant: true,
        lyapunov: Some(lyapunov),
        eps_lyap: 1.0,
        meta: RegularityMeta { alpha: 1.0, beta: 1.0, modulus: "pow(1)".into() },
    })
}

/// `dX¹ = B X² dt`, `dX² = σ dW`: the frozen linear system with constant pieces.
pub fn linear(b: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<SdeModel> {
    let (d1, d2) = (b.nrows(), b.ncols());
    if sigma.nrows() != d2 {
        return Err(Error::Dimension(format!("B is {d1}x{d2}, σ is {}x{}", sigma.nrows(), sigma.ncols())));
    }
    let mut a = DMatrix::zeros(d1 + d2, d1 + d2);
    a.view_mut((0, d1), (d1, d2)).copy_from(&b);
    linear_model(format!("linear(d1={d1}, d2={d2})"), a, sigma, quadratic_lyapunov(d1, d2, 1.0, 1.0))
}

/// `dX = (−κX + ∫_0^t σ dW) dt`, written on `(X, ∫σdW)`: `b = (−κx¹ + x², 0)`.
pub fn integral_drift(kappa: f64, sigma: DMatrix<f64>) -> Result<SdeModel> {
    if !(kappa >= 0.0) {
        return Err(Error::InvalidParam { name: "kappa", reason: format!("{kappa} must be >= 0") });
    }
    let d = sigma.nrows();
    let mut a = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        a[(i, i)] = -kappa;
        a[(i, d + i)] = 1.0;
    }
    linear_model(format!("integral_drift(kappa={kappa})"), a, sigma, quadratic_lyapunov(d, d, 1.0, 1.0))
}

/// `dX_t = (−κ∫_0^t X_s ds − X_t) dt + σ dW`, written on `(∫X, X)`.
pub fn delay_sde(kappa: f64, sigma: DMatrix<f64>) -> Result<SdeModel> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidParam { name: "kappa", reason: format!("{kappa} must be > 0") });
    }
    let d = sigma.nrows();
    let mut a = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        a[(i, d + i)] = 1.0;
        a[(d + i, i)] = -kappa;
        a[(d + i, d + i)] = -1.0;
    }
    linear_model(format!("delay_sde(kappa={kappa})"), a, sigma, quadratic_lyapunov(d, d, kappa, 1.0))
}

/// Tensor grid on `[−r, r]^dim`.
pub fn box_grid(dim: usize, radius: f64, per_axis: usize) -> Vec<Vec<f64>> {
    let per_axis = per_axis.max(2);
    let coord = |i: usize| -radius + 2.0 * radius * i as f64 / (per_axis - 1) as f64;
    (0..per_axis.pow(dim as u32))
        .map(|mut k| {
            (0..dim)
                .map(|_| {
                    let c = coord(k % per_axis);
                    k /= per_axis;
                    c
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LyapunovReport {
    /// `max 𝓛H / H`
    pub generator_ratio: f64,
    /// `max |∇⁽²⁾H|² / H^{2−ε}`
    pub gradient_ratio: f64,
    pub min_h: f64,
    /// Smallest and largest growth exponent of `H` along radial rays.
    pub sandwich: (f64, f64),
    pub max_sigma_condition: f64,
}

pub fn lyapunov_check(model: &SdeModel, grid: &[Vec<f64>], times: &[f64]) -> Result<LyapunovReport> {
    let ly = model.lyapunov.as_ref().ok_or(Error::InvalidParam { name: "model", reason: format!("{} has no Lyapunov function", model.name) })?;
    let (d, d1) = (model.dim(), model.d1);
    let eps = model.eps_lyap;
    let mut rep = LyapunovReport { generator_ratio: f64::NEG_INFINITY, gradient_ratio: 0.0, min_h: f64::INFINITY, sandwich: (0.0, 0.0), max_sigma_condition: 0.0 };
    let mut grad = vec![0.0; d];
    for x in grid {
        if x.len() != d {
            return Err(Error::Dimension(format!("grid point of length {} for d = {d}", x.len())));
        }
        let h = (ly.h)(x);
        rep.min_h = rep.min_h.min(h);
        (ly.grad)(x, &mut grad);
        let g2: f64 = grad[d1..].iter().map(|v| v * v).sum();
        rep.gradient_ratio = rep.gradient_ratio.max(g2 / h.powf(2.0 - eps));
        for &t in times {
            let lh = model.generator_h(t, x).expect("lyapunov present");
            rep.generator_ratio = rep.generator_ratio.max(lh / h);
            let sv = model.sigma_matrix(t, x).svd(false, false).singular_values;
            rep.max_sigma_condition = rep.max_sigma_condition.max(sv.max() / sv.min());
        }
    }
    let mut rays: Vec<Vec<f64>> = (0..d).flat_map(|i| [1.0, -1.0].map(|s| (0..d).map(|j| if i == j { s } else { 0.0 }).collect())).collect();
    rays.push(vec![1.0 / (d as f64).sqrt(); d]);
    let slopes: Vec<f64> = rays
        .iter()
        .map(|u| {
            let at = |r: f64| (ly.h)(&u.iter().map(|v| v * r).collect::<Vec<_>>()).ln();
            (at(1e4) - at(1e3)) / 10f64.ln()
        })
        .collect();
    rep.sandwich = (slopes.iter().copied().fold(f64::INFINITY, f64::min), slopes.iter().copied().fold(0.0, f64::max));
    Ok(rep)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MomentReport {
    pub caps: Vec<f64>,
    /// `E exp[min(cap, sup_t H^{ε'})]` per cap.
    pub estimates: Vec<Estimate>,
    /// Fraction of samples with `sup_t H^{ε'} > cap`, per cap.
    pub cap_hit_rates: Vec<f64>,
    pub blow_up_rate: f64,
    /// `(level, quantile of sup_t H)`
    pub quantiles: Vec<(f64, f64)>,
}

pub fn moment_diag(model: &SdeModel, x0: &PhaseVector, horizon: f64, h: f64, eps_prime: f64, caps: &[f64], mc: &McConfig) -> Result<MomentReport> {
    let ly = model.lyapunov.as_ref().ok_or(Error::InvalidParam { name: "model", reason: format!("{} has no Lyapunov function", model.name) })?;
    if !(eps_prime > 0.0 && eps_prime < model.eps_lyap) {
        return Err(Error::InvalidParam { name: "eps_prime", reason: format!("{eps_prime} not in (0, {})", model.eps_lyap) });
    }
    if caps.is_empty() || caps.iter().any(|c| !(*c > 0.0)) {
        return Err(Error::InvalidParam { name: "caps", reason: "need positive caps".into() });
    }
    let level = level_for(horizon, h).ok_or(Error::InvalidParam { name: "h", reason: format!("{h} is not T/2^k") })?;
    let start = x0.to_vec();
    let sups: Vec<(f64, bool)> = mc::collect_blocks(mc, Purpose::Moment, |rng, len| {
        (0..len)
            .map(|_| {
                let driver = BrownianDriver::new(rng, horizon, level, model.d2).expect("validated");
                let dw = driver.increments(level).expect("level in range");
                let mut sup = f64::NEG_INFINITY;
                let blown = simulate(model, &start, 0.0, h, &dw, |_, _, x| sup = sup.max((ly.h)(x)));
                (if blown { f64::INFINITY } else { sup }, blown)
            })
            .collect()
    });
    let n = sups.len() as f64;
    let mut estimates = Vec::with_capacity(caps.len());
    let mut cap_hit_rates = Vec::with_capacity(caps.len());
    for &cap in caps {
        let rows: Vec<Vec<f64>> = sups.iter().map(|(s, _)| vec![s.powf(eps_prime).min(cap).exp()]).collect();
        estimates.push(Estimate::from(mc::column_moments(&rows, 1)[0]));
        cap_hit_rates.push(sups.iter().filter(|(s, _)| s.powf(eps_prime) > cap).count() as f64 / n);
    }
    let mut sorted: Vec<f64> = sups.iter().map(|(s, _)| *s).collect();
    sorted.sort_by(f64::total_cmp);
    let quantiles = [0.5, 0.9, 0.99].iter().map(|&q| (q, sorted[((q * n) as usize).min(sorted.len() - 1)])).collect();
    Ok(MomentReport {
        caps: caps.to_vec(),
        estimates,
        cap_hit_rates,
        blow_up_rate: sups.iter().filter(|(_, b)| *b).count() as f64 / n,
        quantiles,
    })
}

/// One rung of a ladder: `k` or `h`, MC estimate and the fraction of blown-up samples.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LadderRow {
    pub key: f64,
    pub estimate: Estimate,
    pub flag_rate: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StabilityReport {
    pub reference_k: u32,
    pub eps: f64,
    pub rows: Vec<LadderRow>,
    /// `p_{k+1} ≤ p_k + 2·(combined binomial stderr)` along the ladder.
    pub non_increasing: bool,
}

fn sup_distance(a: &[f64], b: &[f64], d: usize) -> f64 {
    a.chunks(d).zip(b.chunks(d)).map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

fn run_states(model: &SdeModel, start: &[f64], h: f64, dw: &[f64]) -> (Vec<f64>, bool) {
    let mut states = Vec::with_capacity((dw.len() / model.d2 + 1) * model.dim());
    let blown = simulate(model, start, 0.0, h, dw, |_, _, x| states.extend_from_slice(x));
    (states, blown)
}

/// Exceedance probabilities `P(sup_t |X^k − X^ref| ≥ ε)` with `ref = max k + 2`
/// and one shared driver per sample.
pub fn stability_experiment<F>(family: F, x0: &PhaseVector, horizon: f64, h: f64, eps: f64, mc: &McConfig, k_list: &[u32]) -> Result<StabilityReport>
where
    F: Fn(u32) -> Result<SdeModel>,
{
    if k_list.is_empty() || k_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParam { name: "k_list", reason: "must be non-empty and ascending".into() });
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidParam { name: "eps", reason: format!("{eps} must be > 0") });
    }
    let reference_k = k_list[k_list.len() - 1] + 2;
    let reference = family(reference_k)?;
    let members: Vec<SdeModel> = k_list.iter().map(|&k| family(k)).collect::<Result<_>>()?;
    let level = level_for(horizon, h).ok_or(Error::InvalidParam { name: "h", reason: format!("{h} is not T/2^k") })?;
    let (d, start) = (reference.dim(), x0.to_vec());
    let width = members.len();
    let rows: Vec<Vec<f64>> = mc::collect_blocks(mc, Purpose::Stability, |rng, len| {
        (0..len)
            .map(|_| {
                let driver = BrownianDriver::new(rng, horizon, level, reference.d2).expect("validated");
                let dw = driver.increments(level).expect("level in range");
                let (xr, blown_r) = run_states(&reference, &start, h, &dw);
                let mut row = Vec::with_capacity(2 * width);
                for m in &members {
                    let (xk, blown_k) = run_states(m, &start, h, &dw);
                    let blown = blown_r || blown_k;
                    row.push(if blown || sup_distance(&xk, &xr, d) >= eps { 1.0 } else { 0.0 });
                    row.push(if blown { 1.0 } else { 0.0 });
                }
                row
            })
            .collect()
    });
    let moments = mc::column_moments(&rows, 2 * width);
    let n = mc.n as f64;
    let rows: Vec<LadderRow> = k_list
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let p = moments[2 * i].mean;
            LadderRow { key: k as f64, estimate: Estimate { value: p, stderr: (p * (1.0 - p) / n).sqrt() }, flag_rate: moments[2 * i + 1].mean }
        })
        .collect();
    let non_increasing = rows.windows(2).all(|w| w[1].estimate.value <= w[0].estimate.value + 2.0 * w[0].estimate.stderr.hypot(w[1].estimate.stderr));
    Ok(StabilityReport { reference_k, eps, rows, non_increasing })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GapReport {
    /// Keyed by the coarse step `h`; estimate of `E sup_t |X^h_t − X^{h/2}_t|` on the coarse grid.
    pub rows: Vec<LadderRow>,
    /// Log-log fit of the gap against `h`; the slope is the observed strong order.
    pub order: Option<LinearFit>,
}

/// Sup-distance between step `h` and `h/2` on shared drivers, for each `h` in the ladder.
pub fn pathwise_gap(model: &SdeModel, x0: &PhaseVector, horizon: f64, h_ladder: &[f64], mc: &McConfig) -> Result<GapReport> {
    let levels: Vec<u32> = h_ladder
        .iter()
        .map(|&h| level_for(horizon, h).ok_or(Error::InvalidParam { name: "h_ladder", reason: format!("{h} is not T/2^k") }))
        .collect::<Result<_>>()?;
    let finest = levels.iter().max().copied().ok_or(Error::InvalidParam { name: "h_ladder", reason: "empty".into() })? + 1;
    let (d, start) = (model.dim(), x0.to_vec());
    let rows: Vec<Vec<f64>> = mc::collect_blocks(mc, Purpose::Driver, |rng, len| {
        (0..len)
            .map(|_| {
                let driver = BrownianDriver::new(rng, horizon, finest, model.d2).expect("validated");
                let mut row = Vec::with_capacity(2 * levels.len());
                for (&h, &l) in h_ladder.iter().zip(&levels) {
                    let (coarse, b1) = run_states(model, &start, h, &driver.increments(l).expect("in range"));
                    let (fine, b2) = run_states(model, &start, h / 2.0, &driver.increments(l + 1).expect("in range"));
                    if b1 || b2 {
                        row.extend([f64::NAN, 1.0]);
                        continue;
                    }
                    let thinned: Vec<f64> = fine.chunks(d).step_by(2).flatten().copied().collect();
                    row.extend([sup_distance(&coarse, &thinned, d), 0.0]);
                }
                row
            })
            .collect()
    });
    let width = 2 * levels.len();
    let clean: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect()).collect();
    let moments = mc::column_moments(&clean, width);
    let rows: Vec<LadderRow> = h_ladder
        .iter()
        .enumerate()
        .map(|(i, &h)| LadderRow { key: h, estimate: Estimate::from(moments[2 * i]), flag_rate: moments[2 * i + 1].mean })
        .collect();
    let positive: Vec<&LadderRow> = rows.iter().filter(|r| r.estimate.value > 0.0).collect();
    let order = if positive.len() >= 2 {
        let x: Vec<f64> = positive.iter().map(|r| r.key).collect();
        let y: Vec<f64> = positive.iter().map(|r| r.estimate.value).collect();
        stats::loglog_fit(&x, &y).ok()
    } else {
        None
    };
    Ok(GapReport { rows, order })
}

/// Terminal states of `n` independent paths, one row per sample.
pub fn terminal_samples(model: &SdeModel, x0: &PhaseVector, horizon: f64, h: f64, mc: &McConfig) -> Result<Vec<Vec<f64>>> {
    let level = level_for(horizon, h).ok_or(Error::InvalidParam { name: "h", reason: format!("{h} is not T/2^k") })?;
    let start = x0.to_vec();
    Ok(mc::collect_blocks(mc, Purpose::Driver, |rng, len| {
        (0..len)
            .map(|_| {
                let driver = BrownianDriver::new(rng, horizon, level, model.d2).expect("validated");
                let mut last = start.clone();
                simulate(model, &start, 0.0, h, &driver.increments(level).expect("in range"), |_, _, x| last.copy_from_slice(x));
                last
            })
            .collect()
    }))
}

pub fn write_ladder_csv(path: &std::path::Path, key: &str, rows: &[LadderRow]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record([key, "estimate", "stderr", "flag_rate"])?;
    for r in rows {
        out.write_record([format!("{:e}", r.key), format!("{:e}", r.estimate.value), format!("{:e}", r.estimate.stderr), format!("{:e}", r.flag_rate)])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn eye(d: usize) -> DMatrix<f64> {
        DMatrix::identity(d, d)
    }

    #[test]
    fn driver_refinement_is_exact() {
        let drv = BrownianDriver::from_seed(5, 0, 2.0, 8, 2).unwrap();
        let fine = drv.increments(8).unwrap();
        let coarse = drv.increments(5).unwrap();
        for k in 0..32 {
            for i in 0..2 {
                let s: f64 = (0..8).map(|g| fine[(8 * k + g) * 2 + i]).sum();
                assert_eq!(s, coarse[k * 2 + i]);
            }
        }
        assert_eq!(drv.level_for(2.0 / 64.0).unwrap(), 6);
        assert!(drv.level_for(0.3).is_err());
        assert!(drv.level_for(2.0 / 512.0).is_err());
        assert_eq!(drv, BrownianDriver::from_seed(5, 0, 2.0, 8, 2).unwrap());
    }

    #[test]
    fn additive_case_reproduces_the_driver() {
        let model = linear(eye(1), eye(1)).unwrap();
        let drv = BrownianDriver::from_seed(1, 3, 1.0, 10, 1).unwrap();
        let h = 1.0 / 256.0;
        let path = integrate(&model, &PhaseVector::new(&[0.5], &[0.0]), h, 1.0, &drv, false).unwrap();
        let w = drv.path(8).unwrap();
        let mut euler_sum = 0.5;
        for k in 0..=256 {
            assert_eq!(path.x(k)[1], w[k]);
            assert!((path.x(k)[0] - euler_sum).abs() < 1e-14);
            euler_sum += h * w[k];
        }
    }

    #[test]
    fn example_drift_is_a_harmonic_oscillator() {
        let model = example_1_1(1.0, 1.0, 0.0, 1, eye(1)).unwrap();
        let mut out = [0.0; 2];
        model.drift(0.0, &[0.7, -0.3], &mut out);
        assert_eq!(out, [-0.3, -1.4]);
        assert!(example_1_1(0.5, 1.0, 0.0, 1, eye(1)).is_err());
        let with_a = example_1_1(0.8, 1.0, 0.5, 3, eye(1)).unwrap();
        with_a.drift(0.0, &[2.0, 1.0], &mut out);
        assert_relative_eq!(out[1], -1.8 * 2f64.powf(0.8) - 0.5 * 4.0 * 8.0, max_relative = 1e-14);
    }

    #[test]
    fn drift_jacobians_match_differences() {
        let models = [
            example_1_1_mollified(0.8, 1.3, 0.4, 3, DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.7]), 0.1).unwrap(),
            holder_drift(2.0 / 3.0, 0.05).unwrap(),
            delay_sde(2.0, eye(1)).unwrap(),
        ];
        for m in &models {
            let d = m.dim();
            let x: Vec<f64> = (0..d).map(|i| 0.3 + 0.4 * i as f64 - 0.1 * (i * i) as f64).collect();
            let mut jac = vec![0.0; d * d];
            (m.drift_jacobian.as_ref().unwrap())(0.0, &x, &mut jac);
            let eps = 1e-6;
            for j in 0..d {
                let (mut up, mut dn) = (x.clone(), x.clone());
                up[j] += eps;
                dn[j] -= eps;
                let (mut fu, mut fd) = (vec![0.0; d], vec![0.0; d]);
                m.drift(0.0, &up, &mut fu);
                m.drift(0.0, &dn, &mut fd);
                for i in 0..d {
                    assert!((jac[i * d + j] - (fu[i] - fd[i]) / (2.0 * eps)).abs() < 1e-7, "{} ({i},{j})", m.name);
                }
            }
        }
    }

    #[test]
    fn lyapunov_gradients_match_differences() {
        let m = example_1_1_mollified(0.8, 1.3, 0.4, 3, eye(2), 0.1).unwrap();
        let ly = m.lyapunov.as_ref().unwrap();
        let x = [0.4, -0.2, 1.1, 0.5];
        let mut g = [0.0; 4];
        (ly.grad)(&x, &mut g);
        for j in 0..4 {
            let (mut up, mut dn) = (x, x);
            up[j] += 1e-6;
            dn[j] -= 1e-6;
            assert!((g[j] - ((ly.h)(&up) - (ly.h)(&dn)) / 2e-6).abs() < 1e-7);
        }
        // b² = −∇⁽¹⁾H restricted to the c₁ term, a² to the c₂ term
        let mut drift = [0.0; 4];
        m.drift(0.0, &x, &mut drift);
        assert!((drift[2] + g[0]).abs() < 1e-12 && (drift[3] + g[1]).abs() < 1e-12);
    }

    #[test]
    fn linear_jacobian_is_deterministic_and_close_to_the_propagator() {
        let model = example_1_1(1.0, 1.0, 0.0, 1, eye(1)).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, 0.0]);
        let exact = (a * 1.0).exp();
        let mut errs = Vec::new();
        for level in [8, 9] {
            let h = 2f64.powi(-(level as i32));
            let p1 = integrate(&model, &PhaseVector::new(&[1.0], &[0.0]), h, 1.0, &BrownianDriver::from_seed(1, 0, 1.0, 10, 1).unwrap(), true).unwrap();
            let p2 = integrate(&model, &PhaseVector::new(&[1.0], &[0.0]), h, 1.0, &BrownianDriver::from_seed(1, 1, 1.0, 10, 1).unwrap(), true).unwrap();
            let last = p1.times.len() - 1;
            assert_eq!(p1.jacobian_at(0).unwrap(), eye(2));
            assert_eq!(p1.jacobian_at(last), p2.jacobian_at(last));
            errs.push((p1.jacobian_at(last).unwrap() - &exact).abs().max());
        }
        assert!(errs[0] < 10.0 * 2f64.powi(-8));
        assert_relative_eq!(errs[0] / errs[1], 2.0, max_relative = 0.1);
    }

    #[test]
    fn jacobian_requires_smooth_coefficients() {
        let rough = example_1_1(0.8, 1.0, 0.0, 1, eye(1)).unwrap();
        let drv = BrownianDriver::from_seed(1, 0, 1.0, 4, 1).unwrap();
        assert!(integrate(&rough, &PhaseVector::new(&[1.0], &[0.0]), 1.0 / 16.0, 1.0, &drv, true).is_err());
    }

    #[test]
    fn blow_up_is_flagged() {
        let mut model = linear(eye(1), eye(1)).unwrap();
        model.b2 = Arc::new(|_, x: &[f64], out: &mut [f64]| out[0] = x[1] * x[1] * 100.0);
        let drv = BrownianDriver::from_seed(1, 0, 1.0, 8, 1).unwrap();
        let p = integrate(&model, &PhaseVector::new(&[0.0], &[5.0]), 1.0 / 256.0, 1.0, &drv, false).unwrap();
        assert!(p.blown_up && p.times.len() < 257);
    }

    #[test]
    fn lyapunov_examples() {
        let grid = box_grid(2, 10.0, 41);
        let times = [0.0, 0.5, 1.0];
        let m = example_1_1(1.0, 1.0, 0.0, 1, eye(1)).unwrap();
        let r = lyapunov_check(&m, &grid, &times).unwrap();
        // 𝓛H = ½|σ|²_F for the quadratic case
        assert!(r.generator_ratio <= 0.5 + 1e-12 && r.generator_ratio > 0.0);
        assert!(r.gradient_ratio <= 2.0);
        assert!(r.min_h >= 1.0);
        assert_relative_eq!(r.sandwich.0, 2.0, max_relative = 1e-3);
        let mut free = linear(DMatrix::zeros(1, 1), eye(1)).unwrap();
        free.lyapunov = Some(quadratic_lyapunov(1, 1, 1.0, 1.0));
        assert_relative_eq!(free.generator_h(0.0, &[3.0, 4.0]).unwrap(), 1.0, max_relative = 1e-15);
        let mut v = example_1_1(1.0, 1.0, 0.0, 1, eye(1)).unwrap();
        v.lyapunov = Some(quadratic_lyapunov(1, 1, 0.0, 0.5));
        let r = lyapunov_check(&v, &grid, &times).unwrap();
        assert!(r.gradient_ratio <= 2.0);
        let x2: f64 = 10.0;
        assert_relative_eq!(r.gradient_ratio, x2 * x2 / (1.0 + 0.5 * x2 * x2), max_relative = 1e-12);
    }

    #[test]
    fn moment_caps_are_monotone() {
        let mut m = linear(DMatrix::zeros(1, 1), eye(1)).unwrap();
        m.lyapunov = Some(quadratic_lyapunov(1, 1, 0.0, 1.0));
        let mc = McConfig::new(4000, 11);
        let r = moment_diag(&m, &PhaseVector::new(&[0.0], &[0.0]), 1.0, 1.0 / 128.0, 0.25, &[1.0, 2.0, 50.0], &mc).unwrap();
        assert!(r.estimates.windows(2).all(|w| w[0].value <= w[1].value));
        assert!(r.cap_hit_rates[2] < 1e-3);
        assert!(r.estimates[2].value.is_finite());
        assert!(moment_diag(&m, &PhaseVector::new(&[0.0], &[0.0]), 1.0, 1.0 / 128.0, 1.0, &[1.0], &mc).is_err());
    }

    #[test]
    fn constant_family_never_exceeds() {
        let mc = McConfig::new(300, 2);
        let r = stability_experiment(|_| holder_drift(2.0 / 3.0, 0.1), &PhaseVector::new(&[0.0], &[0.0]), 1.0, 1.0 / 64.0, 1e-9, &mc, &[1, 2, 3]).unwrap();
        assert!(r.rows.iter().all(|row| row.estimate.value == 0.0));
        assert!(r.non_increasing);
    }

    #[test]
    fn zero_drift_gap_is_the_riemann_sum_difference() {
        let mc = McConfig::new(1, 9);
        let still = linear(DMatrix::zeros(1, 1), eye(1)).unwrap();
        let r = pathwise_gap(&still, &PhaseVector::new(&[0.0], &[0.0]), 1.0, &[1.0 / 16.0, 1.0 / 32.0], &mc).unwrap();
        // X² = W at both resolutions, up to the summation order of the increments
        assert!(r.rows.iter().all(|row| row.estimate.value < 1e-14));
        // b = (x², 0): only the position block depends on the step
        let model = linear(eye(1), eye(1)).unwrap();
        let r = pathwise_gap(&model, &PhaseVector::new(&[0.0], &[0.0]), 1.0, &[1.0 / 16.0], &mc).unwrap();
        // same stream as pathwise_gap's only sample
        let mut rng = rng::stream(9, Purpose::Driver, 0);
        let drv = BrownianDriver::new(&mut rng, 1.0, 5, 1).unwrap();
        let w = drv.path(5).unwrap();
        let mut gap: f64 = 0.0;
        for k in 0..=16 {
            // X² = W at both resolutions; X¹ are left Riemann sums
            let coarse: f64 = (0..k).map(|j| w[2 * j] / 16.0).sum();
            let fine: f64 = (0..2 * k).map(|j| w[j] / 32.0).sum();
            gap = gap.max((coarse - fine).abs());
        }
        assert_relative_eq!(r.rows[0].estimate.value, gap, max_relative = 1e-12);
    }

    #[test]
    fn shard_layout_does_not_change_results() {
        let model = holder_drift(2.0 / 3.0, 0.01).unwrap();
        let x0 = PhaseVector::new(&[0.1], &[0.0]);
        let a = terminal_samples(&model, &x0, 1.0, 1.0 / 64.0, &McConfig::new(2500, 4)).unwrap();
        let b = terminal_samples(&model, &x0, 1.0, 1.0 / 64.0, &McConfig::new(2500, 4).with_exec(crate::par::Exec::Sequential)).unwrap();
        assert_eq!(a, b);
    }
}

//! Frozen linear Hamiltonian system with piecewise-constant coefficients
//!
//! ```text
//! dX¹ = B_r X² dr,   dX² = σ_r dW_r
//! ```
//!
//! Its solution is Gaussian. Covariances, Bismut weights and shift fields are
//! integrals of products of piecewise-affine kernels and are assembled exactly
//! with 3-point Gauss-Legendre on every piece (exact up to degree 5).

use std::io::Write;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::mc::{self, Estimate, McConfig};
use crate::quad;
use crate::rng::{self, Purpose};
use crate::stats::{self, LinearFit, Moments};

pub type Observable<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseVector {
    pub x1: DVector<f64>,
    pub x2: DVector<f64>,
}

impl PhaseVector {
    pub fn new(x1: &[f64], x2: &[f64]) -> Self {
        Self { x1: DVector::from_column_slice(x1), x2: DVector::from_column_slice(x2) }
    }

    pub fn zeros(d1: usize, d2: usize) -> Self {
        Self { x1: DVector::zeros(d1), x2: DVector::zeros(d2) }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.x1.iter().chain(self.x2.iter()).copied().collect()
    }

    pub fn norm(&self) -> f64 {
        (self.x1.norm_squared() + self.x2.norm_squared()).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct TimeMatrixPath {
    breaks: Vec<f64>,
    b: Vec<DMatrix<f64>>,
    sigma: Vec<DMatrix<f64>>,
    sigma_inv: Vec<DMatrix<f64>>,
    d1: usize,
    d2: usize,
    kappa: f64,
}

fn op_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

impl TimeMatrixPath {
    pub fn new(breaks: Vec<f64>, b: Vec<DMatrix<f64>>, sigma: Vec<DMatrix<f64>>) -> Result<Self> {
        let m = b.len();
        if m == 0 || breaks.len() != m + 1 || sigma.len() != m {
            return Err(Error::Dimension(format!(
                "{} breakpoints, {} B pieces, {} sigma pieces",
                breaks.len(),
                m,
                sigma.len()
            )));
        }
        if breaks.windows(2).any(|w| !(w[1] > w[0])) || breaks.iter().any(|t| !t.is_finite()) {
            return Err(Error::Domain("breakpoints must be finite and strictly ascending".into()));
        }
        let (d1, d2) = b[0].shape();
        let mut kappa: f64 = 0.0;
        let mut sigma_inv = Vec::with_capacity(m);
        for (i, (bi, si)) in b.iter().zip(&sigma).enumerate() {
            if bi.shape() != (d1, d2) || si.shape() != (d2, d2) {
                return Err(Error::Dimension(format!("piece {i}: B {:?}, sigma {:?}", bi.shape(), si.shape())));
            }
            let inv = si
                .clone()
                .try_inverse()
                .filter(|x| x.iter().all(|v| v.is_finite()))
                .ok_or_else(|| Error::Singular(format!("sigma piece {i}")))?;
            let mut k = op_norm(bi) + op_norm(si) + op_norm(&inv);
            if d1 <= d2 {
                let bbt = bi * bi.transpose();
                let bb_inv = bbt.try_inverse().ok_or_else(|| Error::Singular(format!("B B* piece {i}")))?;
                k += op_norm(&bb_inv);
            }
            if !k.is_finite() || k > 1e12 {
                return Err(Error::Singular(format!("piece {i} is ill-conditioned (kappa = {k:e})")));
            }
            kappa = kappa.max(k);
            sigma_inv.push(inv);
        }
        Ok(Self { breaks, b, sigma, sigma_inv, d1, d2, kappa })
    }

    pub fn constant(b: DMatrix<f64>, sigma: DMatrix<f64>, s: f64, t: f64) -> Result<Self> {
        Self::new(vec![s, t], vec![b], vec![sigma])
    }

    /// Scalar `B = σ = 1` on `[0, t]`.
    pub fn unit(t: f64) -> Result<Self> {
        Self::constant(DMatrix::identity(1, 1), DMatrix::identity(1, 1), 0.0, t)
    }

    /// Random well-conditioned path with `pieces` equal pieces on `[s, t]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, d1: usize, d2: usize, pieces: usize, s: f64, t: f64) -> Result<Self> {
        let breaks = (0..=pieces).map(|i| s + (t - s) * i as f64 / pieces as f64).collect();
        let mut entry = |rows: usize, cols: usize| {
            DMatrix::from_fn(rows, cols, |i, j| {
                let diag = if i == j { 0.8 + 0.6 * rng.random::<f64>() } else { 0.0 };
                diag + 0.25 * (2.0 * rng.random::<f64>() - 1.0)
            })
        };
        let b = (0..pieces).map(|_| entry(d1, d2)).collect();
        let sigma = (0..pieces).map(|_| entry(d2, d2)).collect();
        Self::new(breaks, b, sigma)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d1, self.d2)
    }

    pub fn span(&self) -> (f64, f64) {
        (self.breaks[0], self.breaks[self.breaks.len() - 1])
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }

    fn check(&self, s: f64, t: f64) -> Result<()> {
        let (a, b) = self.span();
        for x in [s, t] {
            if !(x >= a - 1e-14 && x <= b + 1e-14) {
                return Err(Error::OutOfSpan { t: x, start: a, end: b });
            }
        }
        if s > t {
            return Err(Error::Domain(format!("s = {s} > t = {t}")));
        }
        Ok(())
    }

    /// Pieces of `[a, b]` on which the coefficients are constant: `(lo, hi, index)`.
    fn pieces(&self, a: f64, b: f64) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::new();
        for i in 0..self.b.len() {
            let lo = self.breaks[i].max(a);
            let hi = self.breaks[i + 1].min(b);
            if hi > lo {
                out.push((lo, hi, i));
            }
        }
        out
    }

    /// Pieces of `[a, b]` additionally split at `extra` cut points.
    fn refined(&self, a: f64, b: f64, extra: &[f64]) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::new();
        for (lo, hi, i) in self.pieces(a, b) {
            let mut cuts: Vec<f64> = extra.iter().copied().filter(|c| *c > lo && *c < hi).collect();
            cuts.sort_by(f64::total_cmp);
            let mut prev = lo;
            for c in cuts.into_iter().chain([hi]) {
                if c > prev {
                    out.push((prev, c, i));
                    prev = c;
                }
            }
        }
        out
    }

}

/// `Γ_{s,t} = ∫_s^t B_r dr`
pub fn gamma(path: &TimeMatrixPath, s: f64, t: f64) -> Result<DMatrix<f64>> {
    path.check(s, t)?;
    let mut g = DMatrix::zeros(path.d1, path.d2);
    for (lo, hi, i) in path.pieces(s, t) {
        g += &path.b[i] * (hi - lo);
    }
    Ok(g)
}

/// `Q_{s,t} = ∫_s^t (t−r)(r−s) B_r B_r^* dr`
pub fn q_matrix(path: &TimeMatrixPath, s: f64, t: f64) -> Result<DMatrix<f64>> {
    path.check(s, t)?;
    if !(t > s) {
        return Err(Error::Domain("Q needs s < t".into()));
    }
    let mut q = DMatrix::zeros(path.d1, path.d1);
    for (lo, hi, i) in path.pieces(s, t) {
        let w = quad::gl3_integrate(lo, hi, |r| (t - r) * (r - s));
        q += &path.b[i] * path.b[i].transpose() * w;
    }
    Ok(q)
}

/// Γ_{r,t} for r in piece `i` ending at `hi`, as the affine map `g0 − r B_i`.
fn gamma_affine(path: &TimeMatrixPath, hi: f64, t: f64, i: usize) -> Result<DMatrix<f64>> {
    Ok(gamma(path, hi, t)? + &path.b[i] * hi)
}

/// Piecewise-affine shift field `Φ(r) = c0 + c1 r` on `[s, t]`.
#[derive(Debug, Clone)]
pub struct PhiShift {
    pub s: f64,
    pub t: f64,
    pieces: Vec<(f64, f64, DVector<f64>, DVector<f64>)>,
}

impl PhiShift {
    pub fn eval(&self, r: f64) -> DVector<f64> {
        let k = self.pieces.partition_point(|p| p.1 < r).min(self.pieces.len() - 1);
        let (_, _, c0, c1) = &self.pieces[k];
        c0 + c1 * r
    }

    /// `(lo, hi, c0, c1)` per affine piece.
    pub fn coefficients(&self) -> &[(f64, f64, DVector<f64>, DVector<f64>)] {
        &self.pieces
    }

    /// `∫_s^r Φ`
    pub fn cumulative(&self, r: f64) -> DVector<f64> {
        let mut acc = DVector::zeros(self.pieces[0].2.len());
        for (lo, hi, c0, c1) in &self.pieces {
            let top = hi.min(r);
            if top <= *lo {
                break;
            }
            acc += c0 * (top - lo) + c1 * (0.5 * (top * top - lo * lo));
        }
        acc
    }
}

/// Shift field of the Cameron-Martin argument: `Φ = h²/Δ + ψ` with
/// `ψ(r) = (Γ_{r,t} − Γ̄)^* Q̂^{-1} [h¹ + ∫ (t−r)/Δ B_r h² dr]`, `Γ̄ = Δ^{-1}∫Γ_{r,t} dr` and
/// `Q̂ = ∫(Γ_{r,t} − Γ̄)(Γ_{r,t} − Γ̄)^* dr`. For constant `B` this is
/// `h²/Δ + (t+s−2r) B^* Q^{-1}[h¹ + ∫ (t−r)/Δ B h² dr]`; the general form keeps
/// both null-shift identities exact when `B` jumps inside `[s, t]`.
pub fn phi_shift(path: &TimeMatrixPath, s: f64, t: f64, h: &PhaseVector) -> Result<PhiShift> {
    path.check(s, t)?;
    if !(t > s) {
        return Err(Error::Domain("shift field needs s < t".into()));
    }
    let (d1, d2) = path.dims();
    if h.x1.len() != d1 || h.x2.len() != d2 {
        return Err(Error::Dimension(format!("direction has dims ({}, {})", h.x1.len(), h.x2.len())));
    }
    let delta = t - s;
    let pieces = path.pieces(s, t);
    let affine: Vec<DMatrix<f64>> = pieces.iter().map(|&(_, hi, i)| gamma_affine(path, hi, t, i)).collect::<Result<_>>()?;
    let mut gbar = DMatrix::zeros(d1, d2);
    for ((lo, hi, i), g0) in pieces.iter().zip(&affine) {
        gbar += g0 * (hi - lo) - &path.b[*i] * (0.5 * (hi * hi - lo * lo));
    }
    gbar /= delta;
    let mut qhat = DMatrix::zeros(d1, d1);
    for ((lo, hi, i), g0) in pieces.iter().zip(&affine) {
        let nodes = quad::gauss_legendre(3);
        let (c, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        for (x, w) in nodes.0.iter().zip(&nodes.1) {
            let r = c + half * x;
            let k = g0 - &path.b[*i] * r - &gbar;
            qhat += &k * k.transpose() * (w * half);
        }
    }
    let mut drift = DMatrix::zeros(d1, d2);
    for (lo, hi, i) in &pieces {
        drift += &path.b[*i] * ((t - lo).powi(2) - (t - hi).powi(2)) * 0.5;
    }
    let rhs = &h.x1 + drift * &h.x2 / delta;
    let mu = if rhs.iter().all(|v| *v == 0.0) {
        DVector::zeros(d1)
    } else {
        qhat.clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("shift Gramian is not positive definite".into()))?
            .solve(&rhs)
    };
    let base = &h.x2 / delta;
    let out = pieces
        .iter()
        .zip(&affine)
        .map(|(&(lo, hi, i), g0)| {
            let c0 = &base + (g0 - &gbar).transpose() * &mu;
            let c1 = -(path.b[i].transpose() * &mu);
            (lo, hi, c0, c1)
        })
        .collect();
    Ok(PhiShift { s, t, pieces: out })
}

/// Residuals of `h² = ∫Φ` and `h¹ + ∫ B_r (h² − ∫_s^r Φ) dr = 0`.
pub fn null_shift_check(path: &TimeMatrixPath, s: f64, t: f64, h: &PhaseVector) -> Result<(f64, f64)> {
    let phi = phi_shift(path, s, t, h)?;
    let res1 = (&h.x2 - phi.cumulative(t)).norm();
    let mut acc = h.x1.clone();
    for (lo, hi, i) in path.pieces(s, t) {
        let (nodes, weights) = quad::gauss_legendre(3);
        let (c, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        for (x, w) in nodes.iter().zip(&weights) {
            let r = c + half * x;
            acc += &path.b[i] * (&h.x2 - phi.cumulative(r)) * (w * half);
        }
    }
    Ok((res1, acc.norm()))
}

/// Joint Gaussian law of `(X¹, X², ξ_1, …, ξ_n)`.
#[derive(Debug, serde::Serialize)]
pub struct GaussianLaw {
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<f64>,
    pub dim: usize,
    pub d1: usize,
    pub d2: usize,
    pub n_w: usize,
    #[serde(skip)]
    chol: OnceLock<DMatrix<f64>>,
}

impl Clone for GaussianLaw {
    fn clone(&self) -> Self {
        Self { chol: OnceLock::new(), ..self.shallow() }
    }
}

impl GaussianLaw {
    fn shallow(&self) -> Self {
        Self {
            mean: self.mean.clone(),
            cov: self.cov.clone(),
            dim: self.dim,
            d1: self.d1,
            d2: self.d2,
            n_w: self.n_w,
            chol: OnceLock::new(),
        }
    }

    pub fn from_parts(mean: Vec<f64>, cov: DMatrix<f64>, d1: usize, d2: usize, n_w: usize) -> Result<Self> {
        let dim = mean.len();
        if cov.shape() != (dim, dim) || d1 + d2 + n_w != dim {
            return Err(Error::Dimension(format!("mean {dim}, cov {:?}, blocks ({d1}, {d2}, {n_w})", cov.shape())));
        }
        let cov = cov.transpose().as_slice().to_vec();
        Ok(Self { mean, cov, dim, d1, d2, n_w, chol: OnceLock::new() })
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.cov)
    }

    pub fn cov_at(&self, i: usize, j: usize) -> f64 {
        self.cov[i * self.dim + j]
    }

    /// Lower Cholesky factor. The covariance is first rescaled to unit
    /// diagonal (state and weight blocks differ by many orders of magnitude
    /// on short intervals); if that fails, one jitter of `1e-12·trace·I` is
    /// added to the rescaled matrix, and a second failure is a hard error.
    pub fn cholesky(&self) -> Result<&DMatrix<f64>> {
        if let Some(l) = self.chol.get() {
            return Ok(l);
        }
        let c = self.cov_matrix();
        let scale: Vec<f64> = (0..self.dim).map(|i| if c[(i, i)] > 0.0 { c[(i, i)].sqrt() } else { 1.0 }).collect();
        let l = if c.iter().all(|v| *v == 0.0) {
            c
        } else {
            let r = DMatrix::from_fn(self.dim, self.dim, |i, j| c[(i, j)] / (scale[i] * scale[j]));
            let lr = match r.clone().cholesky() {
                Some(ch) => ch.l(),
                None => {
                    let jitter = 1e-12 * r.trace();
                    let shifted = r + DMatrix::identity(self.dim, self.dim) * jitter;
                    shifted.cholesky().ok_or(Error::NotPositiveDefinite)?.l()
                }
            };
            DMatrix::from_fn(self.dim, self.dim, |i, j| lr[(i, j)] * scale[i])
        };
        Ok(self.chol.get_or_init(|| l))
    }

    /// One draw into `out` (length `dim`); `z` is scratch of the same length.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64], out: &mut [f64]) -> Result<()> {
        let l = self.cholesky()?;
        rng::fill_normal(rng, z);
        for i in 0..self.dim {
            let mut v = self.mean[i];
            for (j, zj) in z.iter().enumerate().take(i + 1) {
                v += l[(i, j)] * zj;
            }
            out[i] = v;
        }
        Ok(())
    }

    /// `n` draws, row-major `n × dim`, from the given stream.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; n * self.dim];
        let mut z = vec![0.0; self.dim];
        for row in out.chunks_mut(self.dim) {
            self.draw(rng, &mut z, row)?;
        }
        Ok(out)
    }

    /// Block-parallel Monte-Carlo over draws: `body(draw, acc)` per sample.
    pub fn monte_carlo<F>(&self, mc: &McConfig, purpose: Purpose, width: usize, body: F) -> Result<Vec<Moments>>
    where
        F: Fn(&[f64], &mut [Moments]) + Sync,
    {
        self.cholesky()?;
        Ok(mc::run_blocks(mc, purpose, width, |rng, len, acc| {
            let mut z = vec![0.0; self.dim];
            let mut x = vec![0.0; self.dim];
            for _ in 0..len {
                self.draw(rng, &mut z, &mut x).expect("factor checked above");
                body(&x, acc);
            }
        }))
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::Io(e.into()))
    }
}

/// Exact law of `(X_{s,t}(x), ξ_1, …, ξ_n)` for the partition `s = s_0 < … < s_n = t`.
/// Direction `h_i` enters as `h̆_i = (h_i¹ + Γ_{s,s_{i−1}} h_i², h_i²)` and its weight
/// is the Wiener integral of `σ^{-1} Φ^{h̆_i}_{s_{i−1},s_i}` over `[s_{i−1}, s_i]`.
pub fn joint_law(
    path: &TimeMatrixPath,
    s: f64,
    t: f64,
    x: &PhaseVector,
    partition: &[f64],
    directions: &[PhaseVector],
) -> Result<GaussianLaw> {
    path.check(s, t)?;
    let (d1, d2) = path.dims();
    if x.x1.len() != d1 || x.x2.len() != d2 {
        return Err(Error::Dimension(format!("start point has dims ({}, {})", x.x1.len(), x.x2.len())));
    }
    let n_w = directions.len();
    if n_w > 0 {
        if partition.len() != n_w + 1 {
            return Err(Error::Dimension(format!("{} directions need {} partition points", n_w, n_w + 1)));
        }
        let ends_ok = (partition[0] - s).abs() < 1e-14 && (partition[n_w] - t).abs() < 1e-14;
        if !ends_ok || partition.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("partition must increase strictly from s to t".into()));
        }
    }
    let dim = d1 + d2 + n_w;
    let g_st = gamma(path, s, t)?;
    let mut mean = vec![0.0; dim];
    let m1 = &x.x1 + &g_st * &x.x2;
    mean[..d1].copy_from_slice(m1.as_slice());
    mean[d1..d1 + d2].copy_from_slice(x.x2.as_slice());

    let shifts: Vec<PhiShift> = directions
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let (a, b) = (partition[i], partition[i + 1]);
            let hb = PhaseVector { x1: &h.x1 + gamma(path, s, a)? * &h.x2, x2: h.x2.clone() };
            phi_shift(path, a, b, &hb)
        })
        .collect::<Result<_>>()?;

    let cuts: Vec<f64> = partition.to_vec();
    let mut cov = DMatrix::zeros(dim, dim);
    let (nodes, weights) = quad::gauss_legendre(3);
    let mut kernel = DMatrix::zeros(dim, d2);
    for (lo, hi, i) in path.refined(s, t, &cuts) {
        let g0 = gamma_affine(path, path.breaks[i + 1].min(t), t, i)?;
        let (c, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        let active = (n_w > 0).then(|| partition.partition_point(|&p| p <= c).clamp(1, n_w) - 1);
        for (xq, w) in nodes.iter().zip(&weights) {
            let r = c + half * xq;
            kernel.fill(0.0);
            let g = &g0 - &path.b[i] * r;
            kernel.rows_mut(0, d1).copy_from(&(&g * &path.sigma[i]));
            kernel.rows_mut(d1, d2).copy_from(&path.sigma[i]);
            if let Some(k) = active {
                let row = (&path.sigma_inv[i] * shifts[k].eval(r)).transpose();
                kernel.row_mut(d1 + d2 + k).copy_from(&row);
            }
            cov += &kernel * kernel.transpose() * (w * half);
        }
    }
    cov = (&cov + cov.transpose()) * 0.5;
    GaussianLaw::from_parts(mean, cov, d1, d2, n_w)
}

/// Uniform partition of `[s, t]` into `n` pieces.
pub fn uniform_partition(s: f64, t: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| if i == n { t } else { s + (t - s) * i as f64 / n as f64 }).collect()
}

/// `P_{s,t} f(x) = E f(X_{s,t}(x))` by exact sampling.
pub fn semigroup(
    path: &TimeMatrixPath,
    s: f64,
    t: f64,
    x: &PhaseVector,
    fs: &[Observable],
    mc: &McConfig,
) -> Result<Vec<Estimate>> {
    let law = joint_law(path, s, t, x, &[], &[])?;
    let acc = law.monte_carlo(mc, Purpose::Semigroup, fs.len(), |z, acc| {
        for (a, f) in acc.iter_mut().zip(fs) {
            a.push(f(z));
        }
    })?;
    Ok(acc.into_iter().map(Estimate::from).collect())
}

/// `∇_{h_1}…∇_{h_n} P_{s,t} f(x) = E[f(X) ∏ ξ_i]` on the uniform partition, n ≤ 3.
pub fn bismut_derivative(
    path: &TimeMatrixPath,
    s: f64,
    t: f64,
    x: &PhaseVector,
    fs: &[Observable],
    directions: &[PhaseVector],
    mc: &McConfig,
) -> Result<Vec<Estimate>> {
    let n = directions.len();
    if n == 0 || n > 3 {
        return Err(Error::InvalidParam { name: "directions", reason: format!("need 1..=3, got {n}") });
    }
    let law = joint_law(path, s, t, x, &uniform_partition(s, t, n), directions)?;
    let state = law.d1 + law.d2;
    let acc = law.monte_carlo(mc, Purpose::Bismut, fs.len(), |z, acc| {
        let w: f64 = z[state..].iter().product();
        for (a, f) in acc.iter_mut().zip(fs) {
            a.push(f(&z[..state]) * w);
        }
    })?;
    Ok(acc.into_iter().map(Estimate::from).collect())
}

/// Heuristic finite-difference step `ε = stderr_target^{1/3}`.
pub fn default_fd_eps(stderr_target: f64) -> f64 {
    stderr_target.cbrt()
}

/// Central differences with common random numbers. Since the flow is affine in
/// `x`, `X(x ± εh) = X(x) ± ε (h¹ + Γ_{s,t} h², h²)` on the same draw.
/// One direction gives the first derivative, two the mixed second derivative.
pub fn fd_derivative(
    path: &TimeMatrixPath,
    s: f64,
    t: f64,
    x: &PhaseVector,
    fs: &[Observable],
    directions: &[PhaseVector],
    eps: f64,
    mc: &McConfig,
) -> Result<Vec<Estimate>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParam { name: "eps", reason: format!("{eps} must be > 0") });
    }
    let g = gamma(path, s, t)?;
    let shift = |h: &PhaseVector| -> Vec<f64> {
        PhaseVector { x1: &h.x1 + &g * &h.x2, x2: h.x2.clone() }.to_vec()
    };
    let shifts: Vec<Vec<f64>> = directions.iter().map(shift).collect();
    let law = joint_law(path, s, t, x, &[], &[])?;
    let dim = law.dim;
    let acc = match shifts.as_slice() {
        [a] => law.monte_carlo(mc, Purpose::FiniteDifference, fs.len(), |z, acc| {
            let mut p = vec![0.0; dim];
            let mut m = vec![0.0; dim];
            for k in 0..dim {
                p[k] = z[k] + eps * a[k];
                m[k] = z[k] - eps * a[k];
            }
            for (acc, f) in acc.iter_mut().zip(fs) {
                acc.push((f(&p) - f(&m)) / (2.0 * eps));
            }
        })?,
        [a, b] => law.monte_carlo(mc, Purpose::FiniteDifference, fs.len(), |z, acc| {
            let mut pts = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
            let signs = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];
            for (pt, (sa, sb)) in pts.iter_mut().zip(signs) {
                for k in 0..dim {
                    pt[k] = z[k] + eps * (sa * a[k] + sb * b[k]);
                }
            }
            for (acc, f) in acc.iter_mut().zip(fs) {
                let v = f(&pts[0]) - f(&pts[1]) - f(&pts[2]) + f(&pts[3]);
                acc.push(v / (4.0 * eps * eps));
            }
        })?,
        _ => {
            return Err(Error::InvalidParam {
                name: "directions",
                reason: format!("finite differences support 1 or 2 directions, got {}", directions.len()),
            })
        }
    };
    Ok(acc.into_iter().map(Estimate::from).collect())
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct CommutationResidual {
    /// 1: `∇¹Pf = P∇¹f`; 2: `P∇²f = ∇²Pf − Γ^*∇¹Pf`.
    pub identity: u8,
    pub component: usize,
    pub residual: f64,
    pub stderr: f64,
}

/// Estimate both commutation identities. `grad` writes `∇f` (length d1+d2).
pub fn commutation_check(
    path: &TimeMatrixPath,
    s: f64,
    t: f64,
    x: &PhaseVector,
    f: Observable,
    grad: &(dyn Fn(&[f64], &mut [f64]) + Sync),
    mc: &McConfig,
) -> Result<Vec<CommutationResidual>> {
    let (d1, d2) = path.dims();
    let g = gamma(path, s, t)?;
    let comps: Vec<Box<dyn Fn(&[f64]) -> f64 + Sync>> = (0..d1 + d2)
        .map(|k| {
            Box::new(move |z: &[f64]| {
                let mut out = vec![0.0; d1 + d2];
                grad(z, &mut out);
                out[k]
            }) as Box<dyn Fn(&[f64]) -> f64 + Sync>
        })
        .collect();
    let refs: Vec<Observable> = comps.iter().map(|b| b.as_ref() as Observable).collect();
    let pushed = semigroup(path, s, t, x, &refs, mc)?;
    let mut out = Vec::new();
    for j in 0..d1 {
        let mut h = PhaseVector::zeros(d1, d2);
        h.x1[j] = 1.0;
        let lhs = bismut_derivative(path, s, t, x, &[f], &[h], mc)?[0];
        let rhs = pushed[j];
        out.push(CommutationResidual { identity: 1, component: j, residual: lhs.value - rhs.value, stderr: lhs.stderr.hypot(rhs.stderr) });
    }
    for k in 0..d2 {
        // ∇²_k Pf − (Γ^*∇¹Pf)_k is the derivative along (−Γ e_k, e_k)
        let mut h = PhaseVector::zeros(d1, d2);
        h.x2[k] = 1.0;
        h.x1 = -(&g * &h.x2);
        let rhs = bismut_derivative(path, s, t, x, &[f], &[h], mc)?[0];
        let lhs = pushed[d1 + k];
        out.push(CommutationResidual { identity: 2, component: k, residual: lhs.value - rhs.value, stderr: lhs.stderr.hypot(rhs.stderr) });
    }
    Ok(out)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ProbeRow {
    pub delta: f64,
    pub moment_p: f64,
    /// `x1`, `x2` or `grad1`.
    pub quantity: &'static str,
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ProbeRow>,
    pub slope_x1: LinearFit,
    pub slope_x2: LinearFit,
}

/// `‖X^{(i)}_{0,Δ}(0)‖_p` along a Δ-ladder for constant coefficients `(B, σ)`.
/// The p-th moment is estimated by Monte Carlo and its standard error is
/// propagated to the norm by the delta method.
pub fn scaling_probe(b: &DMatrix<f64>, sigma: &DMatrix<f64>, deltas: &[f64], p: f64, mc: &McConfig) -> Result<ScalingReport> {
    if deltas.len() < 6 {
        return Err(Error::Fit(format!("need >= 6 ladder points, got {}", deltas.len())));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidParam { name: "p", reason: format!("{p} must be >= 1") });
    }
    let (d1, d2) = b.shape();
    let mut rows = Vec::new();
    for (k, &delta) in deltas.iter().enumerate() {
        let path = TimeMatrixPath::constant(b.clone(), sigma.clone(), 0.0, delta)?;
        let law = joint_law(&path, 0.0, delta, &PhaseVector::zeros(d1, d2), &[], &[])?;
        let rung = mc.with_seed(mc.seed.wrapping_add(k as u64));
        let acc = law.monte_carlo(&rung, Purpose::Moment, 2, |z, acc| {
            let n1 = z[..d1].iter().map(|v| v * v).sum::<f64>().sqrt();
            let n2 = z[d1..d1 + d2].iter().map(|v| v * v).sum::<f64>().sqrt();
            acc[0].push(n1.powf(p));
            acc[1].push(n2.powf(p));
        })?;
        for (q, m) in ["x1", "x2"].into_iter().zip(acc) {
            let norm = m.mean.powf(1.0 / p);
            let se = norm / (p * m.mean) * m.stderr();
            rows.push(ProbeRow { delta, moment_p: p, quantity: q, estimate: norm, stderr: se });
        }
    }
    let fit = |q: &str| {
        let (x, y): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.quantity == q).map(|r| (r.delta, r.estimate)).unzip();
        stats::loglog_fit(&x, &y)
    };
    let slope_x1 = fit("x1")?;
    let slope_x2 = fit("x2")?;
    Ok(ScalingReport { rows, slope_x1, slope_x2 })
}

/// `|∇^{(1)} P_{0,Δ} f(x)|` along a Δ-ladder via the Bismut estimator; returns
/// rows and the fitted log-log slope.
pub fn gradient_probe(
    b: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    x: &PhaseVector,
    f: Observable,
    deltas: &[f64],
    mc: &McConfig,
) -> Result<(Vec<ProbeRow>, LinearFit)> {
    let (d1, d2) = b.shape();
    let mut rows = Vec::new();
    for (k, &delta) in deltas.iter().enumerate() {
        let path = TimeMatrixPath::constant(b.clone(), sigma.clone(), 0.0, delta)?;
        let rung = mc.with_seed(mc.seed.wrapping_add(k as u64));
        let mut sq = 0.0;
        let mut var = 0.0;
        for j in 0..d1 {
            let mut h = PhaseVector::zeros(d1, d2);
            h.x1[j] = 1.0;
            let e = bismut_derivative(&path, 0.0, delta, x, &[f], &[h], &rung)?[0];
            sq += e.value * e.value;
            var += (e.value * e.stderr).powi(2);
        }
        let norm = sq.sqrt();
        let se = if norm > 0.0 { var.sqrt() / norm } else { 0.0 };
        rows.push(ProbeRow { delta, moment_p: 1.0, quantity: "grad1", estimate: norm, stderr: se });
    }
    let (x, y): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (r.delta, r.estimate)).unzip();
    let fit = stats::loglog_fit(&x, &y)?;
    Ok((rows, fit))
}

/// CSV with columns `delta, moment_p, estimate, stderr` (plus the quantity name).
pub fn write_probe_csv<W: Write>(rows: &[ProbeRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["delta", "moment_p", "quantity", "estimate", "stderr"])?;
    for r in rows {
        out.write_record([
            format!("{:e}", r.delta),
            format!("{}", r.moment_p),
            r.quantity.to_string(),
            format!("{:e}", r.estimate),
            format!("{:e}", r.stderr),
        ])?;
    }
    out.flush()?;
    Ok(())
}

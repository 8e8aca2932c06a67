//! Zvonkin transform `Φ(x) = x + u_τ(x)` with `τ = T − t`, where
//! `u_τ(x) = ∫_0^τ e^{−λr} E f(X_r(x)) dr` for the autonomous model.
//!
//! `u` is estimated by Monte Carlo on a tensor grid. Sample `j` always uses
//! driver `j` of the `(seed, Zvonkin)` family, at every grid point and every
//! `λ`, so neighbouring values and `λ`-ladders share their noise. One path
//! serves the whole `τ`-ladder: the time integral is accumulated by the
//! trapezoid rule on the path's own grid.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mc::Estimate;
use crate::modulus::{self, ModulusFn, Verdict};
use crate::par;
use crate::rng::{self, Purpose};
use crate::sde_lab::{self, BrownianDriver, Field, SdeModel};
use crate::stats::{self, LinearFit, Moments};

/// Contraction required before a transform may be inverted.
pub const HOMEOMORPHISM_THRESHOLD: f64 = 0.5;
pub const INVERSION_TOL: f64 = 1e-10;
pub const MAX_INVERSION_STEPS: usize = 200;

/// Source term `f` and, optionally, its Jacobian.
#[derive(Clone)]
pub struct Source {
    pub label: String,
    pub f: Field,
    pub jacobian: Option<Field>,
}

impl Source {
    /// `f = (b¹, b²)`, without the extra drift `a`.
    pub fn drift(model: &SdeModel) -> Self {
        let m = model.clone();
        let f: Field = Arc::new(move |t, x: &[f64], out: &mut [f64]| {
            let (top, bottom) = out.split_at_mut(m.d1);
            (m.b1)(t, x, top);
            (m.b2)(t, x, bottom);
        });
        let jacobian = if model.a.is_none() { model.drift_jacobian.clone() } else { None };
        Self { label: format!("drift of {}", model.name), f, jacobian }
    }

    pub fn constant(c: Vec<f64>) -> Self {
        let d = c.len();
        Self {
            label: format!("constant {c:?}"),
            f: Arc::new(move |_, _, out: &mut [f64]| out.copy_from_slice(&c)),
            jacobian: Some(Arc::new(move |_, _, out: &mut [f64]| out[..d * d].iter_mut().for_each(|o| *o = 0.0))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMethod {
    /// Central differences with shared drivers.
    CrnFd,
    /// Pathwise `∫ e^{−λr} ∇f(X_r) J_r dr` along the variational flow.
    JacobianFlow,
}

/// Regular grid on the box `[lo, hi]` with `n_i ≥ 2` points per axis; the
/// first axis varies fastest.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TensorGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
}

impl TensorGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, n: Vec<usize>) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != n.len() || lo.is_empty() {
            return Err(Error::Dimension(format!("grid descriptor lengths {} {} {}", lo.len(), hi.len(), n.len())));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(b > a)) || n.iter().any(|k| *k < 2) {
            return Err(Error::InvalidParam { name: "grid", reason: format!("need lo < hi and n >= 2: {lo:?} {hi:?} {n:?}") });
        }
        Ok(Self { lo, hi, n })
    }

    pub fn dim(&self) -> usize {
        self.n.len()
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.n[axis] - 1) as f64
    }

    pub fn point(&self, mut k: usize) -> Vec<f64> {
        (0..self.dim())
            .map(|a| {
                let i = k % self.n[a];
                k /= self.n[a];
                self.lo[a] + i as f64 * self.spacing(a)
            })
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|k| self.point(k)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().enumerate().all(|(a, v)| *v >= self.lo[a] - 1e-12 && *v <= self.hi[a] + 1e-12)
    }

    /// Corner indices and multilinear weights around `x`.
    fn stencil(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        if !self.contains(x) {
            return Err(Error::OutsideHull);
        }
        let d = self.dim();
        let mut base = Vec::with_capacity(d);
        let mut frac = Vec::with_capacity(d);
        for a in 0..d {
            let s = ((x[a] - self.lo[a]) / self.spacing(a)).clamp(0.0, (self.n[a] - 1) as f64);
            let i = (s.floor() as usize).min(self.n[a] - 2);
            base.push(i);
            frac.push(s - i as f64);
        }
        Ok((0..1usize << d)
            .map(|corner| {
                let mut idx = 0;
                let mut stride = 1;
                let mut w = 1.0;
                for a in 0..d {
                    let up = (corner >> a) & 1;
                    idx += (base[a] + up) * stride;
                    stride *= self.n[a];
                    w *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
                }
                (idx, w)
            })
            .collect())
    }

    /// Multilinear interpolation of `width`-wide rows stored per grid point.
    pub fn interpolate(&self, table: &[f64], width: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; width];
        for (idx, w) in self.stencil(x)? {
            if w != 0.0 {
                out.iter_mut().zip(&table[idx * width..(idx + 1) * width]).for_each(|(o, v)| *o += w * v);
            }
        }
        Ok(out)
    }
}

/// Monte-Carlo settings of the representation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct UConfig {
    pub horizon: f64,
    /// Path step; `horizon / h` must be a power of two.
    pub h: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Relative FD step (times the grid spacing, or absolute when no grid).
    pub fd_eps: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TransformField {
    pub horizon: f64,
    pub lambda: f64,
    pub dim: usize,
    pub grid: TensorGrid,
    pub taus: Vec<f64>,
    /// `[τ][point][component]`
    pub u: Vec<f64>,
    pub u_stderr: Vec<f64>,
    /// `[τ][point][component × dim]`, row-major Jacobian of `u`.
    pub grad: Option<Vec<f64>>,
    pub grad_stderr: Option<Vec<f64>>,
    /// `max` over points and `τ` of `‖∇u‖_op`.
    pub contraction: Option<f64>,
    pub contraction_stderr: Option<f64>,
    pub blow_up_rate: f64,
    pub warnings: Vec<String>,
    pub config: Option<UConfig>,
}

/// Per-point results for several `λ` at once.
struct PointStats {
    /// `[λ][τ][comp]`
    u: Vec<Moments>,
    /// `[λ][τ][comp × dim]`
    grad: Vec<Moments>,
    blown: usize,
}

fn tau_steps(taus: &[f64], h: f64, horizon: f64) -> Result<Vec<usize>> {
    taus.iter()
        .map(|&t| {
            let k = (t / h).round();
            if !(t >= 0.0 && t <= horizon + 1e-12) || (t / h - k).abs() > 1e-9 * (1.0 + k) {
                Err(Error::InvalidParam { name: "taus", reason: format!("{t} is not a multiple of h = {h} inside [0, {horizon}]") })
            } else {
                Ok(k as usize)
            }
        })
        .collect()
}

/// Discounted trapezoid integrals of `f` along one path, at the requested steps.
/// `out[λ][τ][comp]`.
fn path_integrals(model: &SdeModel, source: &Source, x0: &[f64], h: f64, dw: &[f64], lambdas: &[Vec<f64>], steps: &[usize], out: &mut [f64]) -> bool {
    let d = model.dim();
    let nt = steps.len();
    let mut acc = vec![0.0; lambdas.len() * d];
    let mut prev = vec![0.0; d];
    let mut cur = vec![0.0; d];
    let record = |k: usize, acc: &[f64], out: &mut [f64]| {
        for (ti, &s) in steps.iter().enumerate() {
            if s == k {
                for li in 0..lambdas.len() {
                    out[(li * nt + ti) * d..(li * nt + ti + 1) * d].copy_from_slice(&acc[li * d..(li + 1) * d]);
                }
            }
        }
    };
    let blown = sde_lab::simulate(model, x0, 0.0, h, dw, |k, t, x| {
        (source.f)(t, x, &mut cur);
        if k > 0 {
            for (li, disc) in lambdas.iter().enumerate() {
                let (w0, w1) = (disc[k - 1], disc[k]);
                for c in 0..d {
                    acc[li * d + c] += 0.5 * h * (w0 * prev[c] + w1 * cur[c]);
                }
            }
        }
        record(k, &acc, out);
        prev.copy_from_slice(&cur);
    });
    blown
}

/// `out[λ][τ][comp × dim]` from the variational flow.
fn path_gradients(model: &SdeModel, source: &Source, x0: &[f64], h: f64, dw: &[f64], lambdas: &[Vec<f64>], steps: &[usize], out: &mut [f64]) -> Result<bool> {
    let d = model.dim();
    let dd = d * d;
    let nt = steps.len();
    let jf = source.jacobian.as_ref().ok_or(Error::InvalidParam { name: "method", reason: format!("{} has no Jacobian", source.label) })?;
    let mut acc = vec![0.0; lambdas.len() * dd];
    let mut prev = DMatrix::<f64>::zeros(d, d);
    let mut buf = vec![0.0; dd];
    sde_lab::simulate_with_jacobian(model, x0, 0.0, h, dw, |k, t, x, jac| {
        jf(t, x, &mut buf);
        let cur = DMatrix::from_row_slice(d, d, &buf) * jac;
        if k > 0 {
            for (li, disc) in lambdas.iter().enumerate() {
                let (w0, w1) = (disc[k - 1], disc[k]);
                for i in 0..d {
                    for j in 0..d {
                        acc[li * dd + i * d + j] += 0.5 * h * (w0 * prev[(i, j)] + w1 * cur[(i, j)]);
                    }
                }
            }
        }
        for (ti, &s) in steps.iter().enumerate() {
            if s == k {
                for li in 0..lambdas.len() {
                    out[(li * nt + ti) * dd..(li * nt + ti + 1) * dd].copy_from_slice(&acc[li * dd..(li + 1) * dd]);
                }
            }
        }
        prev = cur;
    })
}

fn point_stats(
    model: &SdeModel,
    source: &Source,
    x: &[f64],
    shared: &Shared,
    cfg: &UConfig,
    steps: &[usize],
    method: Option<GradMethod>,
    fd_steps: &[f64],
) -> Result<PointStats> {
    let d = model.dim();
    let nt = steps.len();
    let lambdas = &shared.discount;
    let nl = lambdas.len();
    let mut u = vec![Moments::default(); nl * nt * d];
    let mut grad = vec![Moments::default(); if method.is_some() { nl * nt * d * d } else { 0 }];
    let mut center = vec![0.0; nl * nt * d];
    let mut up = vec![0.0; nl * nt * d];
    let mut down = vec![0.0; nl * nt * d];
    let mut g = vec![0.0; nl * nt * d * d];
    let mut blown = 0;
    for dw in &shared.drivers {
        let mut bad = path_integrals(model, source, x, cfg.h, &dw, lambdas, steps, &mut center);
        match method {
            Some(GradMethod::CrnFd) => {
                for k in 0..d {
                    let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
                    xp[k] += fd_steps[k];
                    xm[k] -= fd_steps[k];
                    bad |= path_integrals(model, source, &xp, cfg.h, &dw, lambdas, steps, &mut up);
                    bad |= path_integrals(model, source, &xm, cfg.h, &dw, lambdas, steps, &mut down);
                    for block in 0..nl * nt {
                        for c in 0..d {
                            g[block * d * d + c * d + k] = (up[block * d + c] - down[block * d + c]) / (2.0 * fd_steps[k]);
                        }
                    }
                }
            }
            Some(GradMethod::JacobianFlow) => bad |= path_gradients(model, source, x, cfg.h, &dw, lambdas, steps, &mut g)?,
            None => {}
        }
        if bad {
            blown += 1;
            continue;
        }
        u.iter_mut().zip(&center).for_each(|(m, v)| m.push(*v));
        grad.iter_mut().zip(&g).for_each(|(m, v)| m.push(*v));
    }
    Ok(PointStats { u, grad, blown })
}

/// Drivers and discount weights `e^{−λkh}` common to every point.
struct Shared {
    drivers: Vec<Vec<f64>>,
    /// `[λ][k]`
    discount: Vec<Vec<f64>>,
}

impl Shared {
    fn new(model: &SdeModel, lambdas: &[f64], cfg: &UConfig) -> Result<Self> {
        let level = (cfg.horizon / cfg.h).log2().round() as u32;
        let steps = 1usize << level;
        let drivers = par::map_indexed(par::Exec::default(), cfg.n_samples, |j| {
            BrownianDriver::new(&mut rng::stream(cfg.seed, Purpose::Zvonkin, j as u64), cfg.horizon, level, model.d2)?.increments(level)
        });
        let drivers = drivers.into_iter().collect::<Result<_>>()?;
        let discount = lambdas.iter().map(|lam| (0..=steps).map(|k| (-lam * k as f64 * cfg.h).exp()).collect()).collect();
        Ok(Self { drivers, discount })
    }
}

fn check_config(model: &SdeModel, lambdas: &[f64], cfg: &UConfig) -> Result<()> {
    if lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::InvalidParam { name: "lambda", reason: format!("{lambdas:?} must be positive") });
    }
    let r = cfg.horizon / cfg.h;
    if !(r >= 1.0) || (r - r.round()).abs() > 1e-9 * r || !(r.round() as u64).is_power_of_two() {
        return Err(Error::InvalidParam { name: "h", reason: format!("{} is not T/2^k", cfg.h) });
    }
    if cfg.n_samples < 2 {
        return Err(Error::InvalidParam { name: "n_samples", reason: format!("{} < 2", cfg.n_samples) });
    }
    if model.d1 + model.d2 == 0 {
        return Err(Error::Dimension("empty model".into()));
    }
    Ok(())
}

fn op_norm(m: &[f64], d: usize) -> f64 {
    DMatrix::from_row_slice(d, d, m).svd(false, false).singular_values.max()
}

/// Estimate `u` on `grid` at every `τ` of `taus`; with `method`, also `∇u`.
pub fn solve_u(model: &SdeModel, source: &Source, lambda: f64, cfg: &UConfig, grid: &TensorGrid, taus: &[f64], method: Option<GradMethod>) -> Result<TransformField> {
    check_config(model, &[lambda], cfg)?;
    let d = model.dim();
    if grid.dim() != d {
        return Err(Error::Dimension(format!("grid of dim {} for a model of dim {d}", grid.dim())));
    }
    let steps = tau_steps(taus, cfg.h, cfg.horizon)?;
    let fd: Vec<f64> = (0..d).map(|a| cfg.fd_eps * grid.spacing(a)).collect();
    let exec = par::Exec::default();
    let shared = Shared::new(model, &[lambda], cfg)?;
    let per_point = par::map_indexed(exec, grid.len(), |k| point_stats(model, source, &grid.point(k), &shared, cfg, &steps, method, &fd));
    let per_point: Vec<PointStats> = per_point.into_iter().collect::<Result<_>>()?;
    let (np, nt) = (grid.len(), taus.len());
    let mut u = vec![0.0; nt * np * d];
    let mut u_se = vec![0.0; nt * np * d];
    let mut grad = method.map(|_| vec![0.0; nt * np * d * d]);
    let mut grad_se = method.map(|_| vec![0.0; nt * np * d * d]);
    let mut blown = 0;
    for (p, st) in per_point.iter().enumerate() {
        blown += st.blown;
        for ti in 0..nt {
            for c in 0..d {
                let m = &st.u[ti * d + c];
                // u at τ = 0 is zero by construction
                u[(ti * np + p) * d + c] = if steps[ti] == 0 { 0.0 } else { m.mean };
                u_se[(ti * np + p) * d + c] = if steps[ti] == 0 { 0.0 } else { m.stderr() };
            }
            if let (Some(g), Some(gs)) = (grad.as_mut(), grad_se.as_mut()) {
                for e in 0..d * d {
                    let m = &st.grad[ti * d * d + e];
                    g[(ti * np + p) * d * d + e] = if steps[ti] == 0 { 0.0 } else { m.mean };
                    gs[(ti * np + p) * d * d + e] = if steps[ti] == 0 { 0.0 } else { m.stderr() };
                }
            }
        }
    }
    let mut field = TransformField {
        horizon: cfg.horizon,
        lambda,
        dim: d,
        grid: grid.clone(),
        taus: taus.to_vec(),
        u,
        u_stderr: u_se,
        grad,
        grad_stderr: grad_se,
        contraction: None,
        contraction_stderr: None,
        blow_up_rate: blown as f64 / (np * cfg.n_samples) as f64,
        warnings: Vec::new(),
        config: Some(*cfg),
    };
    if blown > 0 {
        field.warnings.push(format!("{blown} paths blew up and were dropped"));
    }
    field.update_contraction();
    Ok(field)
}

/// Fill `∇u` into an existing field by re-running its Monte Carlo with the same drivers.
pub fn grad_u(model: &SdeModel, source: &Source, field: &TransformField, method: GradMethod) -> Result<TransformField> {
    let cfg = field.config.ok_or(Error::InvalidParam { name: "field", reason: "no Monte-Carlo configuration recorded".into() })?;
    solve_u(model, source, field.lambda, &cfg, &field.grid, &field.taus, Some(method))
}

impl TransformField {
    /// Field from closed-form `u` and `∇u` (row-major `dim × dim`), for tests and demos.
    pub fn from_fn(grid: TensorGrid, taus: Vec<f64>, horizon: f64, lambda: f64, u: impl Fn(f64, &[f64]) -> Vec<f64>, grad: impl Fn(f64, &[f64]) -> Vec<f64>) -> Self {
        let d = grid.dim();
        let pts = grid.points();
        let mut uv = Vec::with_capacity(taus.len() * pts.len() * d);
        let mut gv = Vec::with_capacity(taus.len() * pts.len() * d * d);
        for &t in &taus {
            for p in &pts {
                uv.extend(u(t, p));
                gv.extend(grad(t, p));
            }
        }
        let n = uv.len();
        let gn = gv.len();
        let mut f = Self {
            horizon,
            lambda,
            dim: d,
            grid,
            taus,
            u: uv,
            u_stderr: vec![0.0; n],
            grad: Some(gv),
            grad_stderr: Some(vec![0.0; gn]),
            contraction: None,
            contraction_stderr: None,
            blow_up_rate: 0.0,
            warnings: Vec::new(),
            config: None,
        };
        f.update_contraction();
        f
    }

    fn update_contraction(&mut self) {
        let (Some(g), Some(gs)) = (&self.grad, &self.grad_stderr) else { return };
        let dd = self.dim * self.dim;
        let mut best = (0.0, 0.0);
        for (block, se) in g.chunks(dd).zip(gs.chunks(dd)) {
            let n = op_norm(block, self.dim);
            if n > best.0 {
                best = (n, se.iter().map(|s| s * s).sum::<f64>().sqrt());
            }
        }
        self.contraction = Some(best.0);
        self.contraction_stderr = Some(best.1);
        if best.1 > 0.1 * best.0 && best.0 > 0.0 {
            self.warnings.push(format!("gradient stderr {:.3e} exceeds 0.1 x contraction {:.3e}; increase the sample size", best.1, best.0));
        }
    }

    pub fn tau_index(&self, tau: f64) -> Option<usize> {
        self.taus.iter().position(|t| (t - tau).abs() <= 1e-12 * (1.0 + tau))
    }

    fn block(&self, ti: usize, width: usize) -> std::ops::Range<usize> {
        let np = self.grid.len();
        ti * np * width..(ti + 1) * np * width
    }

    /// `u_τ(x)` for the `ti`-th entry of the `τ`-ladder.
    pub fn u_at(&self, ti: usize, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.block(ti, self.dim);
        self.grid.interpolate(&self.u[r], self.dim, x)
    }

    pub fn grad_at(&self, ti: usize, x: &[f64]) -> Result<DMatrix<f64>> {
        let g = self.grad.as_ref().ok_or(Error::InvalidParam { name: "field", reason: "gradient not populated".into() })?;
        let dd = self.dim * self.dim;
        let r = self.block(ti, dd);
        Ok(DMatrix::from_row_slice(self.dim, self.dim, &self.grid.interpolate(&g[r], dd, x)?))
    }

    /// Text form: a header line `T lambda dim`, the grid (`lo`, `hi`, `n`
    /// lines), the `τ` line, then one `u` row and one `grad` row per `(τ, point)`.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        writeln!(w, "{:e} {:e} {}", self.horizon, self.lambda, self.dim)?;
        writeln!(w, "{}", join(&self.grid.lo))?;
        writeln!(w, "{}", join(&self.grid.hi))?;
        writeln!(w, "{}", self.grid.n.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "))?;
        writeln!(w, "{}", join(&self.taus))?;
        let d = self.dim;
        let dd = d * d;
        let rows = self.taus.len() * self.grid.len();
        for r in 0..rows {
            writeln!(w, "u {}", join(&self.u[r * d..(r + 1) * d]))?;
        }
        if let Some(g) = &self.grad {
            for r in 0..rows {
                writeln!(w, "grad {}", join(&g[r * dd..(r + 1) * dd]))?;
            }
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        let bad = |pos: usize, msg: &str| Error::Parse { pos, msg: msg.to_string() };
        let nums = |pos: usize, s: &str| -> Result<Vec<f64>> { s.split_whitespace().map(|t| t.parse::<f64>().map_err(|_| bad(pos, &format!("bad number {t:?}")))).collect() };
        if lines.len() < 5 {
            return Err(bad(0, "truncated header"));
        }
        let head = nums(0, &lines[0])?;
        if head.len() != 3 {
            return Err(bad(0, "header needs `T lambda dim`"));
        }
        let (horizon, lambda, dim) = (head[0], head[1], head[2] as usize);
        let grid = TensorGrid::new(nums(1, &lines[1])?, nums(2, &lines[2])?, nums(3, &lines[3])?.iter().map(|v| *v as usize).collect())?;
        if grid.dim() != dim {
            return Err(bad(3, "grid dimension differs from header"));
        }
        let taus = nums(4, &lines[4])?;
        let (mut u, mut g) = (Vec::new(), Vec::new());
        for (k, line) in lines.iter().enumerate().skip(5) {
            match line.split_once(' ') {
                Some(("u", rest)) => u.extend(nums(k, rest)?),
                Some(("grad", rest)) => g.extend(nums(k, rest)?),
                _ if line.trim().is_empty() => {}
                _ => return Err(bad(k, "rows must start with `u` or `grad`")),
            }
        }
        let rows = taus.len() * grid.len();
        if u.len() != rows * dim || !(g.is_empty() || g.len() == rows * dim * dim) {
            return Err(bad(lines.len(), "table size does not match the grid"));
        }
        let n = u.len();
        let gn = g.len();
        let mut f = Self {
            horizon,
            lambda,
            dim,
            grid,
            taus,
            u,
            u_stderr: vec![0.0; n],
            grad: (!g.is_empty()).then_some(g),
            grad_stderr: (gn > 0).then(|| vec![0.0; gn]),
            contraction: None,
            contraction_stderr: None,
            blow_up_rate: 0.0,
            warnings: Vec::new(),
            config: None,
        };
        f.update_contraction();
        Ok(f)
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub contraction: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// `c(λ_{i+1}) ≤ c(λ_i) + 2·(combined stderr)` along the ladder.
    pub non_increasing: bool,
    /// Smallest `λ` with contraction below [`HOMEOMORPHISM_THRESHOLD`].
    pub threshold_lambda: Option<f64>,
}

/// Contraction `max_x ‖∇u_T(x)‖` over `probes` for each `λ`, all from the same drivers.
pub fn lambda_sweep(model: &SdeModel, source: &Source, lambdas: &[f64], cfg: &UConfig, probes: &[Vec<f64>], method: GradMethod) -> Result<SweepReport> {
    check_config(model, lambdas, cfg)?;
    if lambdas.len() < 4 || lambdas.windows(2).any(|w| w[1] <= w[0]) || lambdas[lambdas.len() - 1] / lambdas[0] < 64.0 {
        return Err(Error::InvalidParam { name: "lambdas", reason: "need >= 4 ascending values spanning a factor of 64".into() });
    }
    let d = model.dim();
    let steps = tau_steps(&[cfg.horizon], cfg.h, cfg.horizon)?;
    let fd = vec![cfg.fd_eps; d];
    let shared = Shared::new(model, lambdas, cfg)?;
    let stats = par::map_slice(par::Exec::default(), probes, |x| point_stats(model, source, x, &shared, cfg, &steps, Some(method), &fd));
    let stats: Vec<PointStats> = stats.into_iter().collect::<Result<_>>()?;
    let dd = d * d;
    let rows: Vec<SweepRow> = lambdas
        .iter()
        .enumerate()
        .map(|(li, &lambda)| {
            let mut best = (0.0, 0.0);
            for st in &stats {
                let block = &st.grad[li * dd..(li + 1) * dd];
                let means: Vec<f64> = block.iter().map(|m| m.mean).collect();
                let n = op_norm(&means, d);
                if n >= best.0 {
                    best = (n, block.iter().map(|m| m.stderr().powi(2)).sum::<f64>().sqrt());
                }
            }
            SweepRow { lambda, contraction: best.0, stderr: best.1 }
        })
        .collect();
    let non_increasing = rows.windows(2).all(|w| w[1].contraction <= w[0].contraction + 2.0 * w[0].stderr.hypot(w[1].stderr));
    let threshold_lambda = rows.iter().find(|r| r.contraction < HOMEOMORPHISM_THRESHOLD).map(|r| r.lambda);
    Ok(SweepReport { rows, non_increasing, threshold_lambda })
}

/// `∫_0^T e^{−λu} φ(u^{1/2}) / u du`.
pub fn envelope_integral(phi: &ModulusFn, lambda: f64, horizon: f64) -> Result<f64> {
    if !(lambda >= 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidParam { name: "lambda/T", reason: format!("({lambda}, {horizon})") });
    }
    let lt = horizon.ln();
    // u = T e^{−s}
    let rep = modulus::log_ladder(|s| (-lambda * horizon * (-s).exp()).exp() * phi.value_log((s - lt) / 2.0), 1e-12);
    match rep.verdict {
        Verdict::Converges => Ok(rep.value),
        _ => Err(Error::NotDini(format!("envelope integral for {phi} does not converge"))),
    }
}

/// Envelope integrals along `lambdas` and their log-log fit.
pub fn envelope_fit(phi: &ModulusFn, lambdas: &[f64], horizon: f64) -> Result<(Vec<f64>, LinearFit)> {
    let vals: Vec<f64> = lambdas.iter().map(|&l| envelope_integral(phi, l, horizon)).collect::<Result<_>>()?;
    let fit = stats::loglog_fit(lambdas, &vals)?;
    Ok((vals, fit))
}

/// `Φ = id + u_τ` at one entry of the field's `τ`-ladder.
#[derive(Debug, Clone, Copy)]
pub struct Transform<'a> {
    pub field: &'a TransformField,
    pub tau_index: usize,
    pub contraction: f64,
}

pub fn build_transform(field: &TransformField, tau_index: usize) -> Result<Transform<'_>> {
    if tau_index >= field.taus.len() {
        return Err(Error::InvalidParam { name: "tau_index", reason: format!("{tau_index} >= {}", field.taus.len()) });
    }
    let c = field.contraction.ok_or(Error::InvalidParam { name: "field", reason: "gradient not populated".into() })?;
    if !(c < HOMEOMORPHISM_THRESHOLD) {
        return Err(Error::NotContractive(c));
    }
    Ok(Transform { field, tau_index, contraction: c })
}

impl Transform<'_> {
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.field.u_at(self.tau_index, x)?;
        Ok(x.iter().zip(&u).map(|(a, b)| a + b).collect())
    }

    /// `Φ^{-1}(z)` by `y ← z − u(y)`; returns the point and the iteration count.
    pub fn inverse(&self, z: &[f64]) -> Result<(Vec<f64>, usize)> {
        let mut y = z.to_vec();
        for it in 0..MAX_INVERSION_STEPS {
            let u = self.field.u_at(self.tau_index, &y)?;
            let residual = y.iter().zip(&u).zip(z).map(|((a, b), c)| (a + b - c).abs()).fold(0.0, f64::max);
            if residual < INVERSION_TOL {
                return Ok((y, it));
            }
            y = z.iter().zip(&u).map(|(a, b)| a - b).collect();
        }
        Err(Error::NoConvergence { iterates: MAX_INVERSION_STEPS, tail: f64::NAN })
    }

    /// `∇Φ = I + ∇u`.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(self.field.dim, self.field.dim) + self.field.grad_at(self.tau_index, x)?)
    }
}

/// Coefficients of the transformed equation at one time.
pub struct Coefficients<'a> {
    pub transform: Transform<'a>,
    pub model: &'a SdeModel,
    pub t: f64,
}

pub fn transformed_coeffs<'a>(model: &'a SdeModel, transform: Transform<'a>) -> Result<Coefficients<'a>> {
    if model.dim() != transform.field.dim {
        return Err(Error::Dimension(format!("model dim {} vs field dim {}", model.dim(), transform.field.dim)));
    }
    let t = transform.field.horizon - transform.field.taus[transform.tau_index];
    Ok(Coefficients { transform, model, t })
}

impl Coefficients<'_> {
    /// `g(y) = (λu + ∇Φ·a)(Φ^{-1}(y))`.
    pub fn g(&self, y: &[f64]) -> Result<Vec<f64>> {
        let (x, _) = self.transform.inverse(y)?;
        let lam = self.transform.field.lambda;
        let mut out: Vec<f64> = self.transform.field.u_at(self.transform.tau_index, &x)?.iter().map(|v| lam * v).collect();
        if let Some(a) = &self.model.a {
            let mut av = vec![0.0; self.model.dim()];
            a(self.t, &x, &mut av);
            let j = self.transform.jacobian(&x)?;
            let ja = j * nalgebra::DVector::from_vec(av);
            out.iter_mut().zip(ja.iter()).for_each(|(o, v)| *o += v);
        }
        Ok(out)
    }

    /// `Θ(y) = (∇⁽²⁾Φ σ)(Φ^{-1}(y))`, a `d × d₂` matrix.
    pub fn theta(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        let (x, _) = self.transform.inverse(y)?;
        let d1 = self.model.d1;
        let d2 = self.model.d2;
        let j = self.transform.jacobian(&x)?;
        Ok(j.columns(d1, d2) * self.model.sigma_matrix(self.t, &x))
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LipschitzRow {
    pub scale: f64,
    pub constant: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LipschitzProfile {
    pub rows: Vec<LipschitzRow>,
    /// Log-log fit of `L(r)` against `r`.
    pub fit: LinearFit,
}

/// `L(r) = max |f(x + r e) − f(x)| / r` over base points `x` and unit directions `e`.
pub fn lipschitz_probe(f: impl Fn(&[f64]) -> Result<f64>, bases: &[Vec<f64>], directions: &[Vec<f64>], scales: &[f64]) -> Result<LipschitzProfile> {
    if scales.len() < 2 || scales.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidParam { name: "scales", reason: "need >= 2 positive scales".into() });
    }
    let mut rows = Vec::with_capacity(scales.len());
    for &r in scales {
        let mut best: f64 = 0.0;
        for x in bases {
            let fx = f(x)?;
            for e in directions {
                let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                let y: Vec<f64> = x.iter().zip(e).map(|(a, b)| a + r * b / norm).collect();
                best = best.max((f(&y)? - fx).abs() / r);
            }
        }
        rows.push(LipschitzRow { scale: r, constant: best });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.scale).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.constant.max(f64::MIN_POSITIVE)).collect();
    Ok(LipschitzProfile { fit: stats::loglog_fit(&x, &y)?, rows })
}

pub fn write_sweep_csv(path: &std::path::Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["lambda", "contraction", "stderr"])?;
    for r in rows {
        out.write_record([format!("{:e}", r.lambda), format!("{:e}", r.contraction), format!("{:e}", r.stderr)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_lipschitz_csv(path: &std::path::Path, rows: &[LipschitzRow]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["scale", "constant"])?;
    for r in rows {
        out.write_record([format!("{:e}", r.scale), format!("{:e}", r.constant)])?;
    }
    out.flush()?;
    Ok(())
}

impl From<&SweepRow> for Estimate {
    fn from(r: &SweepRow) -> Self {
        Estimate { value: r.contraction, stderr: r.stderr }
    }
}

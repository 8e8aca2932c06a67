//! Heat-semigroup probes on uniform grids.
//!
//! `P_θ` is convolution with the Gaussian of covariance `θI`. All kernel
//! derivatives are analytic; 2D kernels are applied as sums of separable
//! passes. Each pass pads its axis by linear extrapolation over the kernel
//! radius `8√θ`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::modulus::ModulusFn;
use crate::par::{self, Exec};
use crate::quad;
use crate::stats;

pub const MIN_POINTS: usize = 129;
pub const MAX_POINTS_2D: usize = 1025;
/// Kernel truncation radius in units of `√θ`.
pub const RADIUS: f64 = 8.0;
/// Log-slope of the modulus ladder (in `ln θ`) below which growth is flagged.
pub const DIVERGENCE_SLOPE: f64 = -0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Growth {
    Bounded,
    Polynomial,
}

impl fmt::Display for Growth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Growth::Bounded => "bounded",
            Growth::Polynomial => "polynomial",
        })
    }
}

impl FromStr for Growth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bounded" => Ok(Growth::Bounded),
            "polynomial" => Ok(Growth::Polynomial),
            _ => Err(Error::Parse { pos: 0, msg: format!("unknown growth tag {s:?}") }),
        }
    }
}

/// Samples on `[-L, L]^dim`, `n` points per axis. In 2D, `values[j*n + i]`
/// sits at `(x_i, x_j)`, so axis 1 runs along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    dim: usize,
    half_width: f64,
    n: usize,
    values: Vec<f64>,
    growth: Growth,
}

impl GridFunction {
    pub fn new(dim: usize, half_width: f64, n: usize, values: Vec<f64>, growth: Growth) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidParam { name: "dim", reason: format!("{dim} not in {{1, 2}}") });
        }
        if n < MIN_POINTS || n % 2 == 0 {
            return Err(Error::InvalidParam { name: "n", reason: format!("{n} must be odd and >= {MIN_POINTS}") });
        }
        if dim == 2 && n > MAX_POINTS_2D {
            return Err(Error::InvalidParam { name: "n", reason: format!("{n} exceeds the 2D cap {MAX_POINTS_2D}") });
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::InvalidParam { name: "L", reason: format!("{half_width} must be positive") });
        }
        if values.len() != n.pow(dim as u32) {
            return Err(Error::Dimension(format!("{} values for a {dim}D grid of {n} points per axis", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("grid value {v} is not finite")));
        }
        Ok(Self { dim, half_width, n, values, growth })
    }

    pub fn from_fn_1d(half_width: f64, n: usize, growth: Growth, f: impl Fn(f64) -> f64) -> Result<Self> {
        let h = 2.0 * half_width / (n as f64 - 1.0);
        let values = (0..n).map(|i| f(-half_width + i as f64 * h)).collect();
        Self::new(1, half_width, n, values, growth)
    }

    pub fn from_fn_2d(half_width: f64, n: usize, growth: Growth, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let h = 2.0 * half_width / (n as f64 - 1.0);
        let x = |i: usize| -half_width + i as f64 * h;
        let values = (0..n * n).map(|k| f(x(k % n), x(k / n))).collect();
        Self::new(2, half_width, n, values, growth)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn half_width(&self) -> f64 {
        self.half_width
    }
    pub fn growth(&self) -> Growth {
        self.growth
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.n as f64 - 1.0)
    }
    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing()
    }
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.n + i]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `h^d Σ f`.
    pub fn integral(&self) -> f64 {
        stats::pairwise_sum(&self.values) * self.spacing().powi(self.dim as i32)
    }

    fn same_grid(&self, other: &Self) -> bool {
        self.dim == other.dim && self.n == other.n && self.half_width == other.half_width
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        Self { values, ..self.clone() }
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{} {} {} {}", self.dim, self.n, self.half_width, self.growth)?;
        for row in self.values.chunks(self.n) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(Error::Parse { pos: 0, msg: "missing header".into() })??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse { pos: 0, msg: format!("header needs `dim n L growth`, got {header:?}") });
        }
        let num = |k: usize| -> Result<f64> {
            fields[k].parse().map_err(|_| Error::Parse { pos: k, msg: format!("bad header field {:?}", fields[k]) })
        };
        let dim = num(0)? as usize;
        let n = num(1)? as usize;
        let half_width = num(2)?;
        let growth = fields[3].parse()?;
        let mut values = Vec::new();
        for (k, line) in lines.enumerate() {
            for tok in line?.split_whitespace() {
                values.push(tok.parse().map_err(|_| Error::Parse { pos: k + 1, msg: format!("bad value {tok:?}") })?);
            }
        }
        Self::new(dim, half_width, n, values, growth)
    }
}

/// One-dimensional factors of the kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Factor {
    /// `g`
    Gauss,
    /// `∂_z g`
    Grad,
    /// `∂_θ g`
    Time,
    /// `∂_θ ∂_z g`
    GradTime,
}

fn factor_value(kind: Factor, theta: f64, z: f64) -> f64 {
    let g = (-z * z / (2.0 * theta)).exp() / (2.0 * std::f64::consts::PI * theta).sqrt();
    let q = z * z / (2.0 * theta * theta);
    match kind {
        Factor::Gauss => g,
        Factor::Grad => -z / theta * g,
        Factor::Time => g * (q - 0.5 / theta),
        Factor::GradTime => -z / theta * g * (q - 1.5 / theta),
    }
}

fn weights(kind: Factor, theta: f64, h: f64) -> Vec<f64> {
    let m = (RADIUS * theta.sqrt() / h).ceil() as isize;
    (-m..=m).map(|l| h * factor_value(kind, theta, l as f64 * h)).collect()
}

/// Convolve one line with `w` (odd length), padding by linear extrapolation.
fn convolve_line(line: &[f64], w: &[f64], out: &mut [f64]) {
    let n = line.len() as isize;
    let m = (w.len() / 2) as isize;
    let lo_slope = line[1] - line[0];
    let hi_slope = line[n as usize - 1] - line[n as usize - 2];
    let at = |k: isize| {
        if k < 0 {
            line[0] + k as f64 * lo_slope
        } else if k >= n {
            line[n as usize - 1] + (k - n + 1) as f64 * hi_slope
        } else {
            line[k as usize]
        }
    };
    for (i, o) in out.iter_mut().enumerate() {
        let i = i as isize;
        *o = (-m..=m).map(|l| w[(l + m) as usize] * at(i - l)).sum();
    }
}

/// Apply `w` along `axis` (1 or 2) of a square grid.
fn pass(exec: Exec, values: &[f64], n: usize, axis: usize, w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    if axis == 1 || values.len() == n {
        par::for_each_chunk_mut(exec, &mut out, n, |j, row| convolve_line(&values[j * n..(j + 1) * n], w, row));
        return out;
    }
    let cols = par::map_indexed(exec, n, |i| {
        let line: Vec<f64> = (0..n).map(|j| values[j * n + i]).collect();
        let mut col = vec![0.0; n];
        convolve_line(&line, w, &mut col);
        col
    });
    for (i, col) in cols.iter().enumerate() {
        for (j, v) in col.iter().enumerate() {
            out[j * n + i] = *v;
        }
    }
    out
}

fn check_theta(f: &GridFunction, theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidParam { name: "theta", reason: format!("{theta} not in (0, 1]") });
    }
    if theta.sqrt() < 2.0 * f.spacing() {
        return Err(Error::Resolution { sqrt_theta: theta.sqrt(), two_h: 2.0 * f.spacing() });
    }
    Ok(())
}

/// Separable terms `(axis-1 factor, axis-2 factor)` whose sum is the kernel.
fn terms(dim: usize, k: u8, j: u8, axis: usize) -> Vec<(Factor, Factor)> {
    use Factor::*;
    let along = |a: Factor, b: Factor| if axis == 1 { (a, b) } else { (b, a) };
    match (dim, k, j) {
        (1, 0, 0) => vec![(Gauss, Gauss)],
        (1, 0, 1) => vec![(Time, Gauss)],
        (1, 1, 0) => vec![(Grad, Gauss)],
        (1, 1, 1) => vec![(GradTime, Gauss)],
        (_, 0, 0) => vec![(Gauss, Gauss)],
        (_, 0, 1) => vec![(Time, Gauss), (Gauss, Time)],
        (_, 1, 0) => vec![along(Grad, Gauss)],
        _ => vec![along(GradTime, Gauss), along(Grad, Time)],
    }
}

fn apply_terms(exec: Exec, f: &GridFunction, theta: f64, terms: &[(Factor, Factor)]) -> Vec<f64> {
    let (n, h) = (f.n, f.spacing());
    let mut total = vec![0.0; f.values.len()];
    for &(a, b) in terms {
        let mut v = pass(exec, &f.values, n, 1, &weights(a, theta, h));
        if f.dim == 2 {
            v = pass(exec, &v, n, 2, &weights(b, theta, h));
        }
        total.iter_mut().zip(&v).for_each(|(t, x)| *t += x);
    }
    total
}

/// `∇^k ∂_θ^j P_θ f`. In 2D with `k = 1` the pointwise Euclidean norm of the gradient.
pub fn heat_apply(f: &GridFunction, theta: f64, k: u8, j: u8) -> Result<GridFunction> {
    heat_apply_with(f, theta, k, j, Exec::default())
}

pub fn heat_apply_with(f: &GridFunction, theta: f64, k: u8, j: u8, exec: Exec) -> Result<GridFunction> {
    check_theta(f, theta)?;
    if k > 1 || j > 1 {
        return Err(Error::InvalidParam { name: "k/j", reason: format!("({k}, {j}) must be 0 or 1") });
    }
    if f.dim == 2 && k == 1 {
        let g1 = apply_terms(exec, f, theta, &terms(2, k, j, 1));
        let g2 = apply_terms(exec, f, theta, &terms(2, k, j, 2));
        return Ok(f.with_values(g1.iter().zip(&g2).map(|(a, b)| a.hypot(*b)).collect()));
    }
    Ok(f.with_values(apply_terms(exec, f, theta, &terms(f.dim, k, j, 1))))
}

/// Axis-wise operator `P^{(axis)}_θ` (and its derivatives) on a 2D grid.
pub fn heat_apply_axis(f: &GridFunction, axis: usize, theta: f64, k: u8, j: u8) -> Result<GridFunction> {
    if f.dim != 2 {
        return Err(Error::Dimension(format!("axis operations need a 2D grid, got {}D", f.dim)));
    }
    if axis != 1 && axis != 2 {
        return Err(Error::InvalidParam { name: "axis", reason: format!("{axis} not in {{1, 2}}") });
    }
    check_theta(f, theta)?;
    let kind = match (k, j) {
        (0, 0) => Factor::Gauss,
        (0, 1) => Factor::Time,
        (1, 0) => Factor::Grad,
        (1, 1) => Factor::GradTime,
        _ => return Err(Error::InvalidParam { name: "k/j", reason: format!("({k}, {j}) must be 0 or 1") }),
    };
    let w = weights(kind, theta, f.spacing());
    Ok(f.with_values(pass(Exec::default(), &f.values, f.n, axis, &w)))
}

/// Largest `|a − b| / ψ(d)` over index pairs of one line with `d = |i−j|h ≤ 1`.
struct LineMax {
    value: f64,
    pair: (usize, usize),
}

fn line_seminorm(v: &[f64], h: f64, psi: &ModulusFn) -> LineMax {
    let n = v.len();
    let reach = ((1.0 / h) + 1e-9).floor() as usize;
    let stride = n.div_ceil(512).max(1);
    let mut best = LineMax { value: 0.0, pair: (0, 0) };
    let consider = |i: usize, j: usize, best: &mut LineMax| {
        if i == j || i.abs_diff(j) > reach {
            return;
        }
        let r = (v[i] - v[j]).abs() / psi.value(i.abs_diff(j) as f64 * h);
        if r > best.value {
            *best = LineMax { value: r, pair: (i.min(j), i.max(j)) };
        }
    };
    // coarse: all pairs on the strided grid
    for i in (0..n).step_by(stride) {
        for j in (i + stride..n.min(i + reach + 1)).step_by(stride) {
            consider(i, j, &mut best);
        }
    }
    // fine band of short separations
    let band = 2 * stride;
    for i in 0..n {
        for j in i + 1..n.min(i + band + 1) {
            consider(i, j, &mut best);
        }
    }
    // refine around the arg-max
    let (a, b) = best.pair;
    let window = |c: usize| c.saturating_sub(stride)..(c + stride + 1).min(n);
    for i in window(a) {
        for j in window(b) {
            consider(i, j, &mut best);
        }
    }
    best
}

/// `[f]_ψ = sup_{|x−y| ≤ 1} |f(x) − f(y)| / ψ(|x−y|)` by a two-scale pair search.
pub fn seminorm(f: &GridFunction, psi: &ModulusFn) -> f64 {
    let h = f.spacing();
    if f.dim == 1 {
        return line_seminorm(&f.values, h, psi).value;
    }
    let n = f.n;
    let stride = n.div_ceil(65).max(1);
    let reach = ((1.0 / h) + 1e-9).floor() as isize;
    let idx: Vec<usize> = (0..n).step_by(stride).collect();
    let ratio = |p: (usize, usize), q: (usize, usize)| {
        let di = p.0.abs_diff(q.0) as f64;
        let dj = p.1.abs_diff(q.1) as f64;
        let d = di.hypot(dj) * h;
        if d == 0.0 || d > 1.0 + 1e-12 {
            0.0
        } else {
            (f.at(p.0, p.1) - f.at(q.0, q.1)).abs() / psi.value(d)
        }
    };
    let coarse: Vec<(f64, (usize, usize), (usize, usize))> = par::map_indexed(Exec::default(), idx.len() * idx.len(), |k| {
        let p = (idx[k % idx.len()], idx[k / idx.len()]);
        let mut best = (0.0, p, p);
        for &qj in &idx {
            if (qj as isize - p.1 as isize).abs() > reach {
                continue;
            }
            for &qi in &idx {
                let r = ratio(p, (qi, qj));
                if r > best.0 {
                    best = (r, p, (qi, qj));
                }
            }
        }
        best
    });
    let band = 2isize.max(2 * stride as isize).min(reach);
    let fine: Vec<(f64, (usize, usize), (usize, usize))> = par::map_indexed(Exec::default(), n * n, |k| {
        let p = (k % n, k / n);
        let mut best = (0.0, p, p);
        for dj in -band..=band {
            for di in -band..=band {
                let (qi, qj) = (p.0 as isize + di, p.1 as isize + dj);
                if qi < 0 || qj < 0 || qi >= n as isize || qj >= n as isize {
                    continue;
                }
                let r = ratio(p, (qi as usize, qj as usize));
                if r > best.0 {
                    best = (r, p, (qi as usize, qj as usize));
                }
            }
        }
        best
    });
    let pick = |v: &[(f64, (usize, usize), (usize, usize))]| v.iter().copied().fold((0.0, (0, 0), (0, 0)), |a, b| if b.0 > a.0 { b } else { a });
    let (mut best, p, q) = {
        let a = pick(&coarse);
        let b = pick(&fine);
        if b.0 > a.0 {
            b
        } else {
            a
        }
    };
    let s = stride as isize;
    let win = |c: usize| (c as isize - s).max(0) as usize..((c as isize + s + 1) as usize).min(n);
    for pj in win(p.1) {
        for pi in win(p.0) {
            for qj in win(q.1) {
                for qi in win(q.0) {
                    best = f64::max(best, ratio((pi, pj), (qi, qj)));
                }
            }
        }
    }
    best
}

/// `[f]_{ψ,∞}` (axis 1) or `[f]_{∞,ψ}` (axis 2): the sup over the other
/// coordinate of the one-dimensional seminorm along `axis`.
pub fn axis_seminorm(f: &GridFunction, axis: usize, psi: &ModulusFn) -> Result<f64> {
    if f.dim != 2 {
        return Err(Error::Dimension(format!("axis operations need a 2D grid, got {}D", f.dim)));
    }
    let (n, h) = (f.n, f.spacing());
    let per_line = par::map_indexed(Exec::default(), n, |k| {
        let line: Vec<f64> = if axis == 1 { f.values[k * n..(k + 1) * n].to_vec() } else { (0..n).map(|j| f.values[j * n + k]).collect() };
        line_seminorm(&line, h, psi).value
    });
    match axis {
        1 | 2 => Ok(per_line.into_iter().fold(0.0, f64::max)),
        _ => Err(Error::InvalidParam { name: "axis", reason: format!("{axis} not in {{1, 2}}") }),
    }
}

/// `θ = 2^{-k}`, `k = 2, 3, …` while `√θ ≥ 2h`.
pub fn default_ladder(f: &GridFunction) -> Vec<f64> {
    (2..60).map(|k| 2f64.powi(-k)).take_while(|t| t.sqrt() >= 2.0 * f.spacing()).collect()
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LadderRow {
    pub theta: f64,
    pub term: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ModulusEstimate {
    /// `‖f‖_∞ + max_θ θ‖∂_θP_θf‖_∞/φ(√θ)` over the admissible rungs.
    pub value: f64,
    pub sup_norm: f64,
    pub rows: Vec<LadderRow>,
    /// Rungs of the requested ladder rejected by the resolution guard.
    pub skipped: Vec<f64>,
    /// Fitted slope of `ln term` against `ln θ`.
    pub slope: f64,
    /// The fitted slope is below [`DIVERGENCE_SLOPE`] on the whole ladder and on its finer half.
    pub divergent: bool,
}

pub fn modulus_estimate(f: &GridFunction, phi: &ModulusFn, ladder: &[f64]) -> Result<ModulusEstimate> {
    let (ok, skipped): (Vec<f64>, Vec<f64>) = ladder.iter().partition(|t| check_theta(f, **t).is_ok());
    if ok.len() < 3 {
        return Err(Error::InvalidParam { name: "theta_ladder", reason: format!("only {} admissible rungs", ok.len()) });
    }
    let mut rows = Vec::with_capacity(ok.len());
    for &theta in &ok {
        let d = heat_apply(f, theta, 0, 1)?;
        rows.push(LadderRow { theta, term: theta * d.sup_norm() / phi.value(theta.sqrt()) });
    }
    let sup_norm = f.sup_norm();
    let value = sup_norm + rows.iter().fold(0.0, |m: f64, r| m.max(r.term));
    let (slope, divergent) = growth_verdict(&rows);
    Ok(ModulusEstimate { value, sup_norm, rows, skipped, slope, divergent })
}

fn growth_verdict(rows: &[LadderRow]) -> (f64, bool) {
    let mut pos: Vec<&LadderRow> = rows.iter().filter(|r| r.term > 0.0).collect();
    if pos.len() < 4 {
        return (0.0, false);
    }
    pos.sort_by(|a, b| b.theta.total_cmp(&a.theta));
    let slope = |rs: &[&LadderRow]| {
        let x: Vec<f64> = rs.iter().map(|r| r.theta).collect();
        let y: Vec<f64> = rs.iter().map(|r| r.term).collect();
        stats::loglog_fit(&x, &y).map(|f| f.slope).unwrap_or(0.0)
    };
    let all = slope(&pos);
    let fine = slope(&pos[pos.len() / 2..]);
    (all, all < DIVERGENCE_SLOPE && fine < DIVERGENCE_SLOPE)
}

#[derive(Debug, Clone)]
pub struct CommutatorReport {
    pub theta: f64,
    pub field: GridFunction,
    /// `[F_θ]_ψ`
    pub seminorm: f64,
    /// `[F_θ]_ψ / ([f]_{ψφ} ‖g‖_∞ θ^{-1} φ(√θ))`
    pub implied_constant: f64,
}

/// `F_θ = ∂_θP_θ(fg) − f ∂_θP_θ g`.
pub fn commutator(f: &GridFunction, g: &GridFunction, theta: f64, psi: &ModulusFn, phi: &ModulusFn) -> Result<CommutatorReport> {
    if !f.same_grid(g) {
        return Err(Error::GridMismatch(format!("({}D, n={}, L={}) vs ({}D, n={}, L={})", f.dim, f.n, f.half_width, g.dim, g.n, g.half_width)));
    }
    let fg = f.with_values(f.values.iter().zip(&g.values).map(|(a, b)| a * b).collect());
    let left = heat_apply(&fg, theta, 0, 1)?;
    let right = heat_apply(g, theta, 0, 1)?;
    let field = f.with_values(left.values.iter().zip(&right.values).zip(&f.values).map(|((l, r), fv)| l - fv * r).collect());
    let s = seminorm(&field, psi);
    let scale = seminorm(f, &ModulusFn::product(psi.clone(), phi.clone())) * g.sup_norm() * phi.value(theta.sqrt()) / theta;
    let implied_constant = if s == 0.0 { 0.0 } else { s / scale };
    Ok(CommutatorReport { theta, field, seminorm: s, implied_constant })
}

pub fn commutator_ladder(f: &GridFunction, g: &GridFunction, thetas: &[f64], psi: &ModulusFn, phi: &ModulusFn) -> Result<Vec<CommutatorReport>> {
    thetas.iter().map(|&t| commutator(f, g, t, psi, phi)).collect()
}

/// `∫_{R^d} |z|^β ψ(|z|) p_θ(z) dz / (θ^{β/2} ψ(√θ))`, by radial quadrature.
pub fn moment_ratio(psi: &ModulusFn, beta: f64, theta: f64, dim: usize) -> Result<f64> {
    if !(theta > 0.0) || !(beta >= 0.0) || !(dim == 1 || dim == 2) {
        return Err(Error::InvalidParam { name: "theta/beta/dim", reason: format!("({theta}, {beta}, {dim})") });
    }
    let sd = theta.sqrt();
    // radial density of |z|: d = 1 → 2 g(r); d = 2 → r e^{-r²/2θ}/θ
    let density = |r: f64| match dim {
        1 => 2.0 * (-r * r / (2.0 * theta)).exp() / (2.0 * std::f64::consts::PI * theta).sqrt(),
        _ => r * (-r * r / (2.0 * theta)).exp() / theta,
    };
    let mut integrand = |r: f64| if r == 0.0 { 0.0 } else { r.powf(beta) * psi.value(r) * density(r) };
    let breaks = [0.0, 0.5 * sd, sd, 2.0 * sd, 4.0 * sd, 12.0 * sd];
    let m: f64 = breaks.windows(2).map(|w| quad::adaptive(w[0], w[1], 1e-14, &mut integrand)).sum();
    Ok(m / (sd.powf(beta) * psi.value(sd)))
}

/// `‖∇^k ∂_θ^j P_θ f‖_∞ θ^{k/2+j} / ψ(√θ)` along the ladder.
pub fn gradient_ladder(f: &GridFunction, psi: &ModulusFn, k: u8, j: u8, ladder: &[f64]) -> Result<Vec<LadderRow>> {
    ladder
        .iter()
        .map(|&theta| {
            let d = heat_apply(f, theta, k, j)?;
            let scale = theta.powf(k as f64 / 2.0 + j as f64) / psi.value(theta.sqrt());
            Ok(LadderRow { theta, term: d.sup_norm() * scale })
        })
        .collect()
}

pub fn write_ladder_csv(path: &std::path::Path, rows: &[LadderRow]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["theta", "term"])?;
    for r in rows {
        out.write_record([format!("{:e}", r.theta), format!("{:e}", r.term)])?;
    }
    out.flush()?;
    Ok(())
}

/// `√|x|` clipped at 1.
pub fn sqrt_abs_clipped(x: f64) -> f64 {
    x.abs().sqrt().min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(s: &str) -> ModulusFn {
        s.parse().unwrap()
    }

    fn line(l: f64, n: usize, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction::from_fn_1d(l, n, Growth::Polynomial, f).unwrap()
    }

    #[test]
    fn validation() {
        assert!(GridFunction::from_fn_1d(1.0, 128, Growth::Bounded, |x| x).is_err());
        assert!(GridFunction::from_fn_1d(1.0, 130, Growth::Bounded, |x| x).is_err());
        assert!(GridFunction::from_fn_1d(1.0, 129, Growth::Bounded, |_| f64::NAN).is_err());
        assert!(GridFunction::from_fn_2d(1.0, 1027, Growth::Bounded, |x, _| x).is_err());
        let f = line(1.0, 129, |x| x);
        assert!(matches!(heat_apply(&f, 1e-4, 0, 0), Err(Error::Resolution { .. })));
        assert!(heat_apply(&f, 1.5, 0, 0).is_err());
    }

    #[test]
    fn affine_and_constant_inputs() {
        let f = line(4.0, 1025, |x| 0.3 + 2.0 * x);
        let d = heat_apply(&f, 0.25, 0, 1).unwrap();
        assert!(d.sup_norm() < 1e-6, "{}", d.sup_norm());
        let p = heat_apply(&f, 0.25, 0, 0).unwrap();
        for (a, b) in p.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-10);
        }
        let c = line(4.0, 1025, |_| 1.7);
        assert!(heat_apply(&c, 0.1, 0, 0).unwrap().values().iter().all(|v| (v - 1.7).abs() < 1e-12));
        for (k, j) in [(0, 1), (1, 0), (1, 1)] {
            assert!(heat_apply(&c, 0.1, k, j).unwrap().sup_norm() < 1e-12);
        }
    }

    #[test]
    fn second_moment_at_origin() {
        let f = line(8.0, 2049, |x| x * x);
        let mid = 1024;
        for theta in [0.05, 0.2, 0.5] {
            let p = heat_apply(&f, theta, 0, 0).unwrap();
            assert_relative_eq!(p.values()[mid], theta, max_relative = 1e-10);
            // ∂_θ P_θ x² = 1, ∇P_θ x² = 2x
            assert_relative_eq!(heat_apply(&f, theta, 0, 1).unwrap().values()[mid], 1.0, max_relative = 1e-10);
            let g = heat_apply(&f, theta, 1, 0).unwrap();
            assert_relative_eq!(g.values()[mid + 100], 2.0 * f.coord(mid + 100), max_relative = 1e-10);
        }
    }

    #[test]
    fn two_dimensional_kernels() {
        let f = GridFunction::from_fn_2d(3.0, 257, Growth::Polynomial, |x, y| x * x + 3.0 * y * y).unwrap();
        let c = 128;
        let theta = 0.1;
        assert_relative_eq!(heat_apply(&f, theta, 0, 0).unwrap().at(c, c), 4.0 * theta, max_relative = 1e-10);
        // ½Δ(x² + 3y²) = 4
        assert_relative_eq!(heat_apply(&f, theta, 0, 1).unwrap().at(c, c), 4.0, max_relative = 1e-10);
        let (i, j) = (c + 20, c - 10);
        let grad = heat_apply(&f, theta, 1, 0).unwrap().at(i, j);
        assert_relative_eq!(grad, (2.0 * f.coord(i)).hypot(6.0 * f.coord(j)), max_relative = 1e-10);
        let ax = heat_apply_axis(&f, 2, theta, 0, 0).unwrap();
        assert_relative_eq!(ax.at(i, j), f.at(i, j) + 3.0 * theta, max_relative = 1e-10);
        let only_y = GridFunction::from_fn_2d(3.0, 257, Growth::Bounded, |_, y| y.sin()).unwrap();
        let same = heat_apply_axis(&only_y, 1, theta, 0, 0).unwrap();
        for (a, b) in same.values().iter().zip(only_y.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(heat_apply_axis(&line(1.0, 129, |x| x), 1, 0.1, 0, 0).is_err());
    }

    #[test]
    fn time_derivative_matches_difference_quotient() {
        let f = line(4.0, 1025, |x| (-(x * x)).exp() * x.cos());
        let (theta, eps) = (0.2, 1e-5);
        let d = heat_apply(&f, theta, 0, 1).unwrap();
        let up = heat_apply(&f, theta + eps, 0, 0).unwrap();
        let dn = heat_apply(&f, theta - eps, 0, 0).unwrap();
        let dg = heat_apply(&f, theta, 1, 1).unwrap();
        let gup = heat_apply(&f, theta + eps, 1, 0).unwrap();
        let gdn = heat_apply(&f, theta - eps, 1, 0).unwrap();
        for i in (200..800).step_by(37) {
            let fd = (up.values()[i] - dn.values()[i]) / (2.0 * eps);
            assert!((d.values()[i] - fd).abs() < 1e-7, "{i}");
            let fdg = (gup.values()[i] - gdn.values()[i]) / (2.0 * eps);
            assert!((dg.values()[i] - fdg).abs() < 1e-7, "{i}");
        }
    }

    #[test]
    fn semigroup_and_mass() {
        let f = line(6.0, 1201 | 1, |x| (-(4.0 * x * x)).exp());
        let a = heat_apply(&heat_apply(&f, 0.1, 0, 0).unwrap(), 0.15, 0, 0).unwrap();
        let b = heat_apply(&f, 0.25, 0, 0).unwrap();
        let worst = a.values().iter().zip(b.values()).fold(0.0, |m: f64, (x, y)| m.max((x - y).abs()));
        assert!(worst < 2e-13, "{worst}");
        assert!((b.integral() - f.integral()).abs() < 1e-8);
    }

    #[test]
    fn executors_agree() {
        let f = GridFunction::from_fn_2d(2.0, 129, Growth::Bounded, |x, y| (x * y).sin()).unwrap();
        let a = heat_apply_with(&f, 0.2, 1, 1, Exec::Parallel).unwrap();
        let b = heat_apply_with(&f, 0.2, 1, 1, Exec::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seminorm_examples() {
        assert_relative_eq!(seminorm(&line(1.0, 1025, |x| x), &m("pow(1)")), 1.0, max_relative = 1e-12);
        let s = seminorm(&line(1.0, 1025, |x| x.abs().sqrt()), &m("pow(0.5)"));
        assert!((s - 1.0).abs() < 1e-2, "{s}");
        assert_eq!(seminorm(&line(1.0, 1025, |_| 3.0), &m("pow(0.5)")), 0.0);
        let p = GridFunction::from_fn_2d(1.0, 129, Growth::Bounded, |x, y| x * y).unwrap();
        assert_relative_eq!(axis_seminorm(&p, 1, &m("pow(1)")).unwrap(), 1.0, max_relative = 1e-12);
        let x1 = GridFunction::from_fn_2d(1.0, 129, Growth::Bounded, |x, _| x).unwrap();
        assert_relative_eq!(axis_seminorm(&x1, 1, &m("pow(1)")).unwrap(), 1.0, max_relative = 1e-12);
        assert_eq!(axis_seminorm(&x1, 2, &m("pow(1)")).unwrap(), 0.0);
        assert_relative_eq!(seminorm(&x1, &m("pow(1)")), 1.0, max_relative = 1e-9);
    }

    #[test]
    fn seminorm_matches_brute_force() {
        let f = line(1.0, 257, |x| (3.0 * x).sin() + x.abs().powf(0.3));
        let psi = m("pow(0.3)");
        let h = f.spacing();
        let mut brute: f64 = 0.0;
        for i in 0..257 {
            for j in i + 1..257 {
                let d = (j - i) as f64 * h;
                if d <= 1.0 + 1e-12 {
                    brute = brute.max((f.values()[i] - f.values()[j]).abs() / psi.value(d));
                }
            }
        }
        assert_relative_eq!(seminorm(&f, &psi), brute, max_relative = 1e-12);
    }

    #[test]
    fn modulus_estimator_examples() {
        let phi = m("pow(0.5)");
        let lin = line(1.0, 1025, |x| 0.5 * x);
        let e = modulus_estimate(&lin, &phi, &default_ladder(&lin)).unwrap();
        assert!((e.value - e.sup_norm).abs() < 1e-6);
        let root = line(2.0, 2049, sqrt_abs_clipped);
        let e = modulus_estimate(&root, &phi, &default_ladder(&root)).unwrap();
        let ratio = e.value / seminorm(&root, &phi);
        assert!((0.1..=10.0).contains(&ratio), "{ratio}");
        assert!(!e.divergent, "{} {:?}", e.slope, e.rows);
        let sign = line(2.0, 2049, |x| x.signum());
        let e = modulus_estimate(&sign, &phi, &default_ladder(&sign)).unwrap();
        assert!(e.divergent, "{}", e.slope);
        let e = modulus_estimate(&sign, &m("pow(0.1)"), &default_ladder(&sign)).unwrap();
        assert!(e.divergent, "{} {:?}", e.slope, e.rows);
    }

    #[test]
    fn commutator_reductions() {
        let (psi, phi) = (m("pow(0.25)"), m("pow(0.25)"));
        let g = line(3.0, 1025, |x| x.cos());
        let c = line(3.0, 1025, |_| 2.0);
        let r = commutator(&c, &g, 0.1, &psi, &phi).unwrap();
        assert!(r.field.sup_norm() < 1e-12);
        let f = line(3.0, 1025, sqrt_abs_clipped);
        let one = line(3.0, 1025, |_| 1.0);
        let r = commutator(&f, &one, 0.1, &psi, &phi).unwrap();
        let d = heat_apply(&f, 0.1, 0, 1).unwrap();
        for (a, b) in r.field.values().iter().zip(d.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(commutator(&f, &line(3.0, 1027, |_| 1.0), 0.1, &psi, &phi), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn moment_ratio_scale_invariant_for_powers() {
        for alpha in [0.25, 0.5, 1.0] {
            let psi = ModulusFn::power(alpha).unwrap();
            for beta in [0.0, 1.0, 2.0] {
                for dim in [1, 2] {
                    let c: Vec<f64> = (1..12).map(|k| moment_ratio(&psi, beta, 2f64.powi(-k), dim).unwrap()).collect();
                    for v in &c {
                        assert_relative_eq!(*v, c[0], max_relative = 1e-8);
                    }
                }
            }
        }
        // d = 1, β = 0, ψ = 1: total mass
        assert_relative_eq!(moment_ratio(&m("const(1)"), 0.0, 0.3, 1).unwrap(), 1.0, max_relative = 1e-10);
        // d = 1, β = 2, ψ = 1: second moment / θ
        assert_relative_eq!(moment_ratio(&m("const(1)"), 2.0, 0.3, 1).unwrap(), 1.0, max_relative = 1e-10);
    }

    #[test]
    fn file_round_trip() {
        let f = GridFunction::from_fn_2d(1.5, 129, Growth::Bounded, |x, y| x - y * y).unwrap();
        let mut buf = Vec::new();
        f.write(&mut buf).unwrap();
        let g = GridFunction::read(buf.as_slice()).unwrap();
        assert_eq!(f, g);
        assert!(GridFunction::read("1 129 1.0 wobbly\n".as_bytes()).is_err());
        assert!(GridFunction::read("1 129 1.0 bounded\n1 2 3\n".as_bytes()).is_err());
    }
}

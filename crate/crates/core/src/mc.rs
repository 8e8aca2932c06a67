//! Block-structured Monte-Carlo driver.
//!
//! Samples are grouped in fixed blocks of [`BLOCK`]; block `i` draws from
//! `stream(seed, purpose, i)` and the per-block accumulators are merged by a
//! pairwise tree in block order. Results are therefore independent of the
//! executor and of the number of worker threads.

use rand_chacha::ChaCha8Rng;

use crate::par::{self, Exec};
use crate::rng::{self, Purpose, BLOCK};
use crate::stats::{self, Moments};

/// Mean and standard error of a Monte-Carlo average.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }

    /// Deviation from `target` in units of the standard error (0 if both vanish).
    pub fn z(&self, target: f64) -> f64 {
        let d = (self.value - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.stderr
        }
    }
}

impl From<Moments> for Estimate {
    fn from(m: Moments) -> Self {
        Self { value: m.mean, stderr: m.stderr() }
    }
}

/// `|a − b|` against `k` times the combined standard error of independent estimates.
pub fn agree(a: &Estimate, b: &Estimate, k: f64) -> bool {
    (a.value - b.value).abs() <= k * a.stderr.hypot(b.stderr)
}

#[derive(Debug, Clone, Copy)]
pub struct McConfig {
    pub n: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl McConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, exec: Exec::default() }
    }

    pub fn with_exec(self, exec: Exec) -> Self {
        Self { exec, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Run `n` samples in blocks; `body(rng, len, acc)` must push `len` samples
/// into the `width` accumulators.
pub fn run_blocks<F>(mc: &McConfig, purpose: Purpose, width: usize, body: F) -> Vec<Moments>
where
    F: Fn(&mut ChaCha8Rng, usize, &mut [Moments]) + Sync,
{
    let blocks = par::blocks(mc.n, BLOCK);
    let partial = par::map_slice(mc.exec, &blocks, |&(idx, len)| {
        let mut rng = rng::stream(mc.seed, purpose, idx as u64);
        let mut acc = vec![Moments::default(); width];
        body(&mut rng, len, &mut acc);
        acc
    });
    if partial.is_empty() {
        return vec![Moments::default(); width];
    }
    stats::merge_columns(&partial)
}

/// Per-sample outputs of `n` samples, concatenated in block order.
pub fn collect_blocks<T, F>(mc: &McConfig, purpose: Purpose, body: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng, usize) -> Vec<T> + Sync,
{
    let blocks = par::blocks(mc.n, BLOCK);
    let parts = par::map_slice(mc.exec, &blocks, |&(idx, len)| {
        let mut rng = rng::stream(mc.seed, purpose, idx as u64);
        body(&mut rng, len)
    });
    parts.into_iter().flatten().collect()
}

/// Moments of each column of per-sample rows, merged pairwise in block order.
pub fn column_moments(rows: &[Vec<f64>], width: usize) -> Vec<Moments> {
    let partial: Vec<Vec<Moments>> = rows
        .chunks(BLOCK)
        .map(|chunk| {
            let mut acc = vec![Moments::default(); width];
            for r in chunk {
                for (a, v) in acc.iter_mut().zip(r) {
                    a.push(*v);
                }
            }
            acc
        })
        .collect();
    if partial.is_empty() {
        return vec![Moments::default(); width];
    }
    stats::merge_columns(&partial)
}

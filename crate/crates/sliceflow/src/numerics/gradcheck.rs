//! Central finite-difference verification of tape gradients.
//!
//! The objective closure must populate the store's gradient buffers (after
//! zeroing them) and return the loss value; the checker then perturbs a
//! random subsample of coordinates per entry and compares.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::params::ParamStore;

#[derive(Debug, Clone)]
pub struct EntryCheck {
    pub name: String,
    pub max_rel_err: f32,
    pub ok: bool,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub entries: Vec<EntryCheck>,
    pub tol: f32,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f32 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f32::max)
    }

    pub fn all_ok(&self) -> bool {
        self.entries.iter().all(|e| e.ok)
    }

    pub fn failures(&self) -> Vec<&EntryCheck> {
        self.entries.iter().filter(|e| !e.ok).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f32,
    pub tol: f32,
    /// Coordinates sampled per entry (all of them when the entry is smaller).
    pub coords_per_entry: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            tol: 1e-3,
            coords_per_entry: 32,
            seed: 0x5eed,
        }
    }
}

/// Compare analytic gradients of `objective` against central differences.
pub fn gradcheck<F>(objective: F, params: &ParamStore, cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut ParamStore) -> Result<f32>,
{
    let mut work = params.clone();
    work.zero_grads();
    objective(&mut work)?;
    let analytic: Vec<Vec<f32>> = (0..work.len())
        .map(|i| work.grad_at(i).data().to_vec())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for i in 0..work.len() {
        let name = work.names()[i].clone();
        let n = work.value_at(i).len();
        let coords: Vec<usize> = if n <= cfg.coords_per_entry {
            (0..n).collect()
        } else {
            (0..cfg.coords_per_entry)
                .map(|_| rng.gen_range(0..n))
                .collect()
        };
        let mut max_rel = 0.0f32;
        for &j in &coords {
            let orig = work.value_at(i).data()[j];
            work.value_at_mut(i).data_mut()[j] = orig + cfg.eps;
            work.zero_grads();
            let plus = objective(&mut work)? as f64;
            work.value_at_mut(i).data_mut()[j] = orig - cfg.eps;
            work.zero_grads();
            let minus = objective(&mut work)? as f64;
            work.value_at_mut(i).data_mut()[j] = orig;

            let numeric = ((plus - minus) / (2.0 * cfg.eps as f64)) as f32;
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
        entries.push(EntryCheck {
            ok: max_rel <= cfg.tol,
            max_rel_err: max_rel,
            name,
        });
    }
    Ok(GradReport {
        entries,
        tol: cfg.tol,
    })
}

/// One random-direction comparison from [`directional_gradcheck`].
#[derive(Debug, Clone, Copy)]
pub struct DirectionCheck {
    pub analytic: f32,
    pub numeric: f32,
    pub rel_err: f32,
}

#[derive(Debug, Clone)]
pub struct DirectionalReport {
    pub checks: Vec<DirectionCheck>,
    pub tol: f32,
}

impl DirectionalReport {
    pub fn max_rel_err(&self) -> f32 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f32::max)
    }

    pub fn all_ok(&self) -> bool {
        self.checks.iter().all(|c| c.rel_err <= self.tol)
    }
}

/// Finite-difference check along random unit directions in the full
/// parameter space. Per-coordinate differencing of deep objectives drowns
/// small gradients in f32 forward noise; projecting onto a direction keeps
/// the compared quantity large while still covering every coordinate, so
/// this is the right tool for multi-layer compositions.
pub fn directional_gradcheck<F>(
    objective: F,
    params: &ParamStore,
    eps: f32,
    tol: f32,
    directions: usize,
    seed: u64,
) -> Result<DirectionalReport>
where
    F: Fn(&mut ParamStore) -> Result<f32>,
{
    let mut work = params.clone();
    work.zero_grads();
    objective(&mut work)?;
    let analytic_grads: Vec<Vec<f32>> = (0..work.len())
        .map(|i| work.grad_at(i).data().to_vec())
        .collect();

    let gnorm: f64 = analytic_grads
        .iter()
        .flatten()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::with_capacity(directions);
    for k in 0..directions {
        // the first direction follows the analytic gradient itself, so the
        // projected derivative is as large as it can be; the rest are random
        let mut dir: Vec<Vec<f32>> = if k == 0 {
            analytic_grads.clone()
        } else {
            (0..work.len())
                .map(|i| {
                    (0..work.value_at(i).len())
                        .map(|_| rng.gen_range(-1.0f32..1.0))
                        .collect()
                })
                .collect()
        };
        let norm: f64 = dir
            .iter()
            .flatten()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            continue;
        }
        for entry in &mut dir {
            for v in entry.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
        let analytic: f64 = analytic_grads
            .iter()
            .zip(&dir)
            .flat_map(|(g, d)| g.iter().zip(d).map(|(&a, &b)| a as f64 * b as f64))
            .sum();

        let mut eval = |sign: f32| -> Result<f64> {
            for i in 0..work.len() {
                let base = params.value_at(i).data().to_vec();
                let w = work.value_at_mut(i).data_mut();
                for (j, v) in w.iter_mut().enumerate() {
                    *v = base[j] + sign * eps * dir[i][j];
                }
            }
            work.zero_grads();
            let value = objective(&mut work)? as f64;
            Ok(value)
        };
        let d_full = (eval(1.0)? - eval(-1.0)?) / (2.0 * eps as f64);
        let d_half = (eval(0.5)? - eval(-0.5)?) / (eps as f64);
        for i in 0..work.len() {
            work.value_at_mut(i)
                .data_mut()
                .copy_from_slice(params.value_at(i).data());
        }
        // Richardson extrapolation cancels the O(eps^2) truncation term
        let numeric = (4.0 * d_half - d_full) / 3.0;
        // near-orthogonal random directions project to almost nothing, so
        // judge their mismatch against the gradient's own scale instead
        let floor = (0.1 * gnorm).max(1e-3);
        let rel = ((analytic - numeric).abs()
            / analytic.abs().max(numeric.abs()).max(floor)) as f32;
        checks.push(DirectionCheck {
            analytic: analytic as f32,
            numeric: numeric as f32,
            rel_err: rel,
        });
    }
    Ok(DirectionalReport { checks, tol })
}

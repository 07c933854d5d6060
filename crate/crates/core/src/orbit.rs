//! Independent check of invariance by direct integration of the flow:
//! `Phi_t(K(theta)) = K(theta + omega t)` for sampled angles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{KamError, Result};
use crate::hamiltonian::HamiltonianFamily;
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    /// Classical fourth-order Runge-Kutta.
    #[default]
    Rk4,
    /// Stormer-Verlet; symplectic for separable `H = T(p) + V(q)`.
    Leapfrog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrbitOptions {
    pub t_final: f64,
    pub dt: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Time between deviation checkpoints.
    pub checkpoint_every: f64,
    pub integrator: Integrator,
    /// `|x|` beyond which the integration is declared blown up.
    pub blowup: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for OrbitOptions {
    fn default() -> Self {
        Self {
            t_final: 100.0,
            dt: 1e-3,
            n_samples: 16,
            seed: 7,
            checkpoint_every: 1.0,
            integrator: Integrator::Rk4,
            blowup: 1e6,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitReport {
    pub max_deviation: f64,
    /// Largest `|H(x(t)) - H(x(0))|` seen at the checkpoints.
    pub energy_drift: f64,
    /// `(t, max over samples of the deviation at t)`.
    pub checkpoints: Vec<(f64, f64)>,
    pub t_final: f64,
    pub dt: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub integrator: Integrator,
}

impl OrbitReport {
    /// Largest deviation among checkpoints with `t <= t`.
    pub fn deviation_until(&self, t: f64) -> f64 {
        self.checkpoints.iter().filter(|c| c.0 <= t + 1e-12).map(|c| c.1).fold(0.0, f64::max)
    }
}

fn field(h: &HamiltonianFamily, x: &[f64], lambda: &[f64]) -> Vec<f64> {
    let n = h.n();
    let g = h.grad_x(x, lambda);
    (0..2 * n).map(|i| if i < n { g[n + i] } else { -g[i - n] }).collect()
}

fn rk4_step(h: &HamiltonianFamily, x: &mut [f64], lambda: &[f64], dt: f64) {
    let m = x.len();
    let k1 = field(h, x, lambda);
    let y: Vec<f64> = (0..m).map(|i| x[i] + 0.5 * dt * k1[i]).collect();
    let k2 = field(h, &y, lambda);
    let y: Vec<f64> = (0..m).map(|i| x[i] + 0.5 * dt * k2[i]).collect();
    let k3 = field(h, &y, lambda);
    let y: Vec<f64> = (0..m).map(|i| x[i] + dt * k3[i]).collect();
    let k4 = field(h, &y, lambda);
    for i in 0..m {
        x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn leapfrog_step(h: &HamiltonianFamily, x: &mut [f64], lambda: &[f64], dt: f64) {
    let n = h.n();
    let g = h.grad_x(x, lambda);
    for i in 0..n {
        x[n + i] -= 0.5 * dt * g[i];
    }
    let g = h.grad_x(x, lambda);
    for i in 0..n {
        x[i] += dt * g[n + i];
    }
    let g = h.grad_x(x, lambda);
    for i in 0..n {
        x[n + i] -= 0.5 * dt * g[i];
    }
}

struct SampleResult {
    deviations: Vec<f64>,
    drift: f64,
}

fn integrate_sample(
    h: &HamiltonianFamily,
    lambda: &[f64],
    k: &Embedding,
    omega: &[f64],
    theta: &[f64],
    opts: &OrbitOptions,
) -> Result<SampleResult> {
    let steps = (opts.t_final / opts.dt).round() as usize;
    let every = ((opts.checkpoint_every / opts.dt).round() as usize).max(1);
    let mut x = k.eval_real(theta);
    let e0 = h.value(&x, lambda);
    let mut deviations = Vec::new();
    let mut drift = 0.0f64;
    for s in 1..=steps {
        match opts.integrator {
            Integrator::Rk4 => rk4_step(h, &mut x, lambda, opts.dt),
            Integrator::Leapfrog => leapfrog_step(h, &mut x, lambda, opts.dt),
        }
        let t = s as f64 * opts.dt;
        if x.iter().any(|v| !v.is_finite() || v.abs() > opts.blowup) {
            return Err(KamError::IntegrationBlowup { t });
        }
        if s % every == 0 || s == steps {
            let shifted: Vec<f64> = theta.iter().zip(omega).map(|(a, w)| a + w * t).collect();
            let target = k.eval_real(&shifted);
            let dev = x.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            deviations.push(dev);
            drift = drift.max((h.value(&x, lambda) - e0).abs());
        }
    }
    Ok(SampleResult { deviations, drift })
}

/// Integrates from `K(theta_j)` for seeded random `theta_j` and measures the
/// distance to `K(theta_j + omega t)` at every checkpoint.
pub fn orbit_check(
    h: &HamiltonianFamily,
    lambda: &[f64],
    k: &Embedding,
    omega: &[f64],
    opts: &OrbitOptions,
) -> Result<OrbitReport> {
    assert!(opts.dt > 0.0 && opts.t_final > 0.0 && opts.n_samples > 0);
    let n = k.n();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let thetas: Vec<Vec<f64>> = (0..opts.n_samples).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
    let results = par::map_range(opts.exec, thetas.len(), |j| integrate_sample(h, lambda, k, omega, &thetas[j], opts));
    let mut per_checkpoint: Vec<f64> = Vec::new();
    let mut drift = 0.0f64;
    for r in results {
        let r = r?;
        if per_checkpoint.is_empty() {
            per_checkpoint = vec![0.0; r.deviations.len()];
        }
        for (a, b) in per_checkpoint.iter_mut().zip(&r.deviations) {
            *a = a.max(*b);
        }
        drift = drift.max(r.drift);
    }
    let steps = (opts.t_final / opts.dt).round() as usize;
    let every = ((opts.checkpoint_every / opts.dt).round() as usize).max(1);
    let times: Vec<f64> = (1..=steps).filter(|s| s % every == 0 || *s == steps).map(|s| s as f64 * opts.dt).collect();
    let checkpoints: Vec<(f64, f64)> = times.into_iter().zip(per_checkpoint).collect();
    Ok(OrbitReport {
        max_deviation: checkpoints.iter().map(|c| c.1).fold(0.0, f64::max),
        energy_drift: drift,
        checkpoints,
        t_final: opts.t_final,
        dt: opts.dt,
        n_samples: opts.n_samples,
        seed: opts.seed,
        integrator: opts.integrator,
    })
}

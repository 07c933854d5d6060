//! Quasi-Newton solver for the invariance equation
//! `d_omega K = J grad H_lambda(K)` in the analytic case, together with the
//! smallness ledger and the audit of the solver's conclusions.
//!
//! One step works in the frame `M = [DK | V]`, `V = J DK N`. Writing
//! `Delta K = M W`, the linearized equation becomes, up to terms quadratic in
//! the error,
//!
//! ```text
//! d_omega W1 = e1 + B1 dl - S W2
//! d_omega W2 = e2 + B2 dl
//! ```
//!
//! with `e = M^{-1} e`, `B = M^{-1} J d_lambda grad H` and the torsion
//! `S = [M^{-1} (d_omega V - J D^2H V)]_top`. The parameter increment `dl`
//! is the unique choice making both right-hand sides average-free when
//! `<W2> = 0`, which is a `2n x 2n` system whose leading part is `<Lambda>`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diophantine::FrequencyVector;
use crate::embedding::Embedding;
use crate::error::{KamError, Result};
use crate::fourier::{FourierMap, Grid, SmallDivisorOptions, StripNormValue};
use crate::hamiltonian::{self, HamiltonianFamily};
use crate::linalg;
use crate::nondegeneracy::{self, NondegeneracyData, NondegeneracyDiagnostics, NondegeneracyOptions};
use crate::par::{self, Exec};

/// Residuals below this are treated as round-off when calibrating `c`.
pub const CALIBRATION_FLOOR: f64 = 1e-12;

/// Steps ending below this fraction of the starting residual sit on the
/// discretization floor (aliasing, truncation, round-off) rather than in the
/// quadratic regime, and are left out of the calibration of `c`.
pub const CALIBRATION_RELATIVE_FLOOR: f64 = 1e-6;

/// Strip width, drift radius and the constants of the smallness conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamBudget {
    pub rho: f64,
    pub delta0: f64,
    pub r: f64,
    pub gamma: f64,
    pub sigma: f64,
    /// `None` means: calibrate from the observed contraction.
    pub c: Option<f64>,
    pub beta_step: f64,
    pub beta_total: f64,
}

pub fn delta0(rho: f64) -> f64 {
    (rho / 12.0).min(1.0)
}

/// `gamma^-2 delta0^(2 sigma - 1) 2^(-4 sigma)`.
pub fn beta_step(gamma: f64, sigma: f64, delta0: f64) -> f64 {
    gamma.powi(-2) * delta0.powf(2.0 * sigma - 1.0) * 2f64.powf(-4.0 * sigma)
}

/// `gamma^-2 delta0^(2 sigma - 1) / (2^(4 sigma) - 2^(2 sigma + 1))`.
pub fn beta_total(gamma: f64, sigma: f64, delta0: f64) -> f64 {
    gamma.powi(-2) * delta0.powf(2.0 * sigma - 1.0) / (2f64.powf(4.0 * sigma) - 2f64.powf(2.0 * sigma + 1.0))
}

impl KamBudget {
    pub fn new(rho: f64, r: f64, gamma: f64, sigma: f64, c: Option<f64>) -> Self {
        Self::with_delta0(rho, delta0(rho), r, gamma, sigma, c)
    }

    /// Budget with an explicit `delta0` (the driver uses `rho_k / 12`).
    pub fn with_delta0(rho: f64, delta0: f64, r: f64, gamma: f64, sigma: f64, c: Option<f64>) -> Self {
        assert!(rho > 0.0 && r > 0.0 && gamma > 0.0, "budget parameters must be positive");
        Self {
            rho,
            delta0,
            r,
            gamma,
            sigma,
            c,
            beta_step: beta_step(gamma, sigma, delta0),
            beta_total: beta_total(gamma, sigma, delta0),
        }
    }
}

/// Both smallness conditions for a given `||e||_rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallnessLedger {
    pub c: f64,
    pub e_norm: f64,
    /// `c gamma^-4 delta0^(-4 sigma) ||e||`, must be `< 1`.
    pub lhs_contraction: f64,
    /// `c gamma^-2 delta0^(-2 sigma) ||e||`, must be `< r`.
    pub lhs_radius: f64,
    pub r: f64,
    pub pass_contraction: bool,
    pub pass_radius: bool,
    pub margin_contraction: f64,
    pub margin_radius: f64,
}

impl SmallnessLedger {
    pub fn pass(&self) -> bool {
        self.pass_contraction && self.pass_radius
    }
}

pub fn check_smallness(budget: &KamBudget, c: f64, e_norm: f64) -> SmallnessLedger {
    let (g, s, d) = (budget.gamma, budget.sigma, budget.delta0);
    let lhs2 = c * g.powi(-4) * d.powf(-4.0 * s) * e_norm;
    let lhs3 = c * g.powi(-2) * d.powf(-2.0 * s) * e_norm;
    SmallnessLedger {
        c,
        e_norm,
        lhs_contraction: lhs2,
        lhs_radius: lhs3,
        r: budget.r,
        pass_contraction: lhs2 < 1.0,
        pass_radius: lhs3 < budget.r,
        margin_contraction: 1.0 - lhs2,
        margin_radius: budget.r - lhs3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Refuse to start when the smallness conditions fail (otherwise warn).
    pub enforce_smallness: bool,
    /// Turn a failed conclusion audit into [`KamError::DriftViolation`].
    pub enforce_drift: bool,
    #[serde(skip)]
    pub small_divisor: SmallDivisorOptions,
    #[serde(skip)]
    pub nondegeneracy: NondegeneracyOptions,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 25,
            enforce_smallness: false,
            enforce_drift: true,
            small_divisor: SmallDivisorOptions::default(),
            nondegeneracy: NondegeneracyOptions::default(),
            exec: Exec::default(),
        }
    }
}

fn check_dims(h: &HamiltonianFamily, lambda: &[f64], k: &Embedding, omega: &[f64]) -> Result<()> {
    if k.n() != h.n() || omega.len() != h.n() || lambda.len() != h.param_dim() {
        return Err(KamError::DimensionMismatch(format!(
            "family n = {}, d = {}; embedding n = {}; omega has {} entries; lambda has {}",
            h.n(),
            h.param_dim(),
            k.n(),
            omega.len(),
            lambda.len()
        )));
    }
    Ok(())
}

/// `e = J grad H_lambda(K) - d_omega K`, with the nonlinear term sampled on
/// the grid and truncated to the embedding's order. Also returns the
/// dropped-tail majorant of that analysis.
pub fn error_function_with(
    h: &HamiltonianFamily,
    lambda: &[f64],
    k: &Embedding,
    omega: &[f64],
    exec: Exec,
) -> Result<(FourierMap, f64)> {
    check_dims(h, lambda, k, omega)?;
    let n = k.n();
    let grid = Grid::for_kmax(n, k.kmax());
    let ks = k.sample(&grid);
    let fields = par::map_range(exec, grid.len(), |p| hamiltonian::vector_field(h, &ks[p * 2 * n..(p + 1) * 2 * n], lambda));
    let mut values = Vec::with_capacity(grid.len() * 2 * n);
    for f in fields {
        values.extend(f?);
    }
    let (field, tail) = FourierMap::analyze(&grid, &values, 2 * n, k.kmax());
    Ok((field.sub(&k.omega_derivative(omega)), tail))
}

pub fn error_function(h: &HamiltonianFamily, lambda: &[f64], k: &Embedding, omega: &[f64]) -> Result<FourierMap> {
    error_function_with(h, lambda, k, omega, Exec::default()).map(|(e, _)| e)
}

/// Diagnostics of one Newton step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub rho_in: f64,
    pub rho_out: f64,
    /// `||e||_{rho_in}` before the step.
    pub residual_in: f64,
    /// `||e'||_{rho_out}` after the step.
    pub residual_out: f64,
    pub delta_lambda: Vec<f64>,
    /// `||Delta K||_{rho_out}`.
    pub correction_norm: f64,
    /// Averages of the two cohomological right-hand sides after the solve.
    pub average_defects: [f64; 2],
    /// `||e'|| / (gamma^-4 (rho_in - rho_out)^(-4 sigma) ||e||^2)`.
    pub c_obs: f64,
    /// Condition number of the `Delta lambda` system.
    pub system_cond: f64,
    /// Dropped-tail majorant of the correction.
    pub truncation_tail: f64,
}

fn mat(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    linalg::from_row_slice(rows, cols, v)
}

fn grid_mean(grid_len: usize, per_point: impl Fn(usize) -> DMatrix<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(rows, cols);
    for p in 0..grid_len {
        acc += per_point(p);
    }
    acc / grid_len as f64
}

/// One quasi-Newton correction of `(K, lambda)` from strip `rho_in` to `rho_out`.
pub fn newton_step(
    h: &HamiltonianFamily,
    lambda: &[f64],
    k: &Embedding,
    freq: &FrequencyVector,
    rho_in: f64,
    rho_out: f64,
    opts: &SolverOptions,
) -> Result<(Embedding, Vec<f64>, StepReport)> {
    assert!(rho_out < rho_in, "the step must lose strip width");
    h.require_square_parameters()?;
    let omega = &freq.omega;
    let (e, _) = error_function_with(h, lambda, k, omega, opts.exec)?;
    let e_in = e.norm(rho_in);
    let n = k.n();
    let d = h.param_dim();
    let kmax = k.kmax();
    let exec = opts.exec;
    let grid = Grid::for_kmax(n, kmax);
    let npts = grid.len();

    let ks = k.sample(&grid);
    let dks = k.sample_jacobian(&grid);
    let es = e.synthesize(&grid);
    let j = linalg::symplectic(n);

    // V = J DK N pointwise; its omega-derivative goes through Fourier space
    let vs: Vec<f64> = par::map_range(exec, npts, |p| {
        let dk = mat(&dks[p * 2 * n * n..(p + 1) * 2 * n * n], 2 * n, n);
        let g = dk.transpose() * &dk;
        let nm = g.try_inverse().unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN));
        linalg::to_row_vec(&(&j * &dk * nm))
    })
    .into_iter()
    .flatten()
    .collect();
    if vs.iter().any(|v| !v.is_finite()) {
        return Err(KamError::DegenerateEmbedding { cond: f64::INFINITY, limit: opts.nondegeneracy.gram_cond_limit });
    }
    let (vmap, _) = FourierMap::analyze(&grid, &vs, 2 * n * n, kmax);
    let dvs = vmap.directional_derivative(omega).synthesize(&grid);

    // pointwise frame quantities: M^{-1}, M^{-1} e, B = M^{-1} J d_lambda grad H, S
    struct Point {
        m: DMatrix<f64>,
        et: Vec<f64>,
        b: Vec<f64>,
        s: Vec<f64>,
        cond: f64,
    }
    let points: Vec<Point> = par::map_range(exec, npts, |p| {
        let x = &ks[p * 2 * n..(p + 1) * 2 * n];
        let dk = mat(&dks[p * 2 * n * n..(p + 1) * 2 * n * n], 2 * n, n);
        let v = mat(&vs[p * 2 * n * n..(p + 1) * 2 * n * n], 2 * n, n);
        let dv = mat(&dvs[p * 2 * n * n..(p + 1) * 2 * n * n], 2 * n, n);
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.columns_mut(0, n).copy_from(&dk);
        m.columns_mut(n, n).copy_from(&v);
        let (minv, cond) = linalg::checked_inverse(&m).unwrap_or_else(|| (DMatrix::from_element(2 * n, 2 * n, f64::NAN), f64::INFINITY));
        let hess = h.hess_x(x, lambda);
        let lv = dv - &j * hess * &v;
        let s = (&minv * lv).rows(0, n).into_owned();
        let et = &minv * DVector::from_column_slice(&es[p * 2 * n..(p + 1) * 2 * n]);
        let b = &minv * &j * h.dgrad_dlambda(x, lambda);
        Point { m, et: et.as_slice().to_vec(), b: linalg::to_row_vec(&b), s: linalg::to_row_vec(&s), cond }
    });
    let worst = points.iter().map(|q| q.cond).fold(0.0, f64::max);
    if !worst.is_finite() || worst > opts.nondegeneracy.gram_cond_limit {
        return Err(KamError::DegenerateEmbedding { cond: worst, limit: opts.nondegeneracy.gram_cond_limit });
    }

    let et_vals: Vec<f64> = points.iter().flat_map(|q| q.et.iter().copied()).collect();
    let b_vals: Vec<f64> = points.iter().flat_map(|q| q.b.iter().copied()).collect();
    let (etmap, _) = FourierMap::analyze(&grid, &et_vals, 2 * n, kmax);
    let (bmap, _) = FourierMap::analyze(&grid, &b_vals, 2 * n * d, kmax);
    let e1 = etmap.components(0..n);
    let e2 = etmap.components(n..2 * n);
    let b1 = bmap.components(0..n * d);
    let b2 = bmap.components(n * d..2 * n * d);
    let e2_avg = e2.average();
    let b2_avg = b2.average();

    let sd = opts.small_divisor;
    let centered = |f: &FourierMap| f.sub(&FourierMap::constant(f.n(), f.kmax(), &f.average()));
    let w2e = centered(&e2).solve_small_divisor(omega, sd)?;
    let w2l = centered(&b2).solve_small_divisor(omega, sd)?;
    let w2e_s = w2e.synthesize(&grid);
    let w2l_s = w2l.synthesize(&grid);

    // <S W2e> and <S W2lambda> as grid means (the k = 0 coefficient of the products)
    let s_w2e = grid_mean(npts, |p| mat(&points[p].s, n, n) * mat(&w2e_s[p * n..(p + 1) * n], n, 1), n, 1);
    let s_w2l = grid_mean(npts, |p| mat(&points[p].s, n, n) * mat(&w2l_s[p * n * d..(p + 1) * n * d], n, d), n, d);

    let mut system = DMatrix::zeros(2 * n, d);
    system.rows_mut(0, n).copy_from(&(mat(&b1.average(), n, d) - s_w2l));
    system.rows_mut(n, n).copy_from(&mat(&b2_avg, n, d));
    let mut rhs = DVector::zeros(2 * n);
    let e1_avg = e1.average();
    for i in 0..n {
        rhs[i] = s_w2e[(i, 0)] - e1_avg[i];
        rhs[n + i] = -e2_avg[i];
    }
    let system_cond = linalg::condition_number(&system);
    let limit = opts.nondegeneracy.lambda_cond_limit;
    if system_cond > limit {
        return Err(KamError::SingularLambdaAverage { cond: system_cond, limit });
    }
    let dl_vec = system.clone().lu().solve(&rhs).ok_or(KamError::SingularLambdaAverage { cond: system_cond, limit })?;
    let dl: Vec<f64> = dl_vec.as_slice().to_vec();

    let w2 = w2e.add(&w2l.matvec(d, &dl));
    let w2_s = w2.synthesize(&grid);
    let rhs1_vals: Vec<f64> = (0..npts)
        .flat_map(|p| {
            let q = &points[p];
            let r = DVector::from_column_slice(&q.et[..n]) + mat(&q.b[..n * d], n, d) * &dl_vec
                - mat(&q.s, n, n) * DVector::from_column_slice(&w2_s[p * n..(p + 1) * n]);
            r.as_slice().to_vec()
        })
        .collect();
    let (rhs1, _) = FourierMap::analyze(&grid, &rhs1_vals, n, kmax);
    let rhs1_avg = rhs1.average();
    let eq2_avg: Vec<f64> = (0..n).map(|i| e2_avg[i] + (0..d).map(|c| b2_avg[i * d + c] * dl[c]).sum::<f64>()).collect();
    let average_defects = [linalg::max_abs_vec(&rhs1_avg), linalg::max_abs_vec(&eq2_avg)];
    let w1 = centered(&rhs1).solve_small_divisor(omega, sd)?;
    let w1_s = w1.synthesize(&grid);

    let dk_vals: Vec<f64> = (0..npts)
        .flat_map(|p| {
            let mut w = DVector::zeros(2 * n);
            for i in 0..n {
                w[i] = w1_s[p * n + i];
                w[n + i] = w2_s[p * n + i];
            }
            (&points[p].m * w).as_slice().to_vec()
        })
        .collect();
    let (delta, tail) = FourierMap::analyze(&grid, &dk_vals, 2 * n, kmax);
    let k_new = k.shifted(&delta);
    let lambda_new: Vec<f64> = lambda.iter().zip(&dl).map(|(a, b)| a + b).collect();

    let (e_new, _) = error_function_with(h, &lambda_new, &k_new, omega, exec)?;
    let e_out = e_new.norm(rho_out);
    let denom = freq.gamma.powi(-4) * (rho_in - rho_out).powf(-4.0 * freq.sigma) * e_in * e_in;
    let c_obs = if denom > 0.0 { e_out / denom } else { 0.0 };
    if e_out > e_in && e_out > CALIBRATION_FLOOR {
        return Err(KamError::StepDiverged { before: e_in, after: e_out });
    }
    let report = StepReport {
        rho_in,
        rho_out,
        residual_in: e_in,
        residual_out: e_out,
        delta_lambda: dl,
        correction_norm: delta.norm(rho_out),
        average_defects,
        c_obs,
        system_cond,
        truncation_tail: tail,
    };
    Ok((k_new, lambda_new, report))
}

/// Per-iteration history entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    /// Residual at the final strip `rho / 2` after this step.
    pub residual: f64,
    pub step: StepReport,
}

/// Conclusions of the analytic solve, recomputed from the inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConclusionAudit {
    /// `||K_inf - K_0||_{rho/2}` against `r`.
    pub k_drift: f64,
    /// `|lambda_inf - lambda_0|` (max norm) against `r`.
    pub lambda_drift: f64,
    pub r: f64,
    pub d0: f64,
    pub d_final: f64,
    pub v0: f64,
    pub v_final: f64,
    pub tau0: f64,
    pub tau_final: f64,
    pub beta_step: f64,
    pub slack: f64,
    pub pass_k: bool,
    pub pass_lambda: bool,
    pub pass_d: bool,
    pub pass_v: bool,
    pub pass_tau: bool,
}

impl ConclusionAudit {
    pub fn pass(&self) -> bool {
        self.pass_k && self.pass_lambda && self.pass_d && self.pass_v && self.pass_tau
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.pass_k {
            out.push(format!("||K - K0|| = {:e} > r = {:e}", self.k_drift, self.r));
        }
        if !self.pass_lambda {
            out.push(format!("|lambda - lambda0| = {:e} >= r = {:e}", self.lambda_drift, self.r));
        }
        if !self.pass_d {
            out.push(format!("d = {:e} > d0 + beta = {:e}", self.d_final, self.d0 + self.beta_step));
        }
        if !self.pass_v {
            out.push(format!("v = {:e} > v0 + beta = {:e}", self.v_final, self.v0 + self.beta_step));
        }
        if !self.pass_tau {
            out.push(format!("tau = {:e} > tau0 + beta = {:e}", self.tau_final, self.tau0 + self.beta_step));
        }
        out
    }
}

/// Slack allowed on the derivative and norm drift bounds.
pub const AUDIT_SLACK: f64 = 1e-9;

/// Recomputes the conclusions from scratch: drifts on the half strip and the
/// `beta_step` bounds on `d`, `v`, `tau`.
#[allow(clippy::too_many_arguments)]
pub fn audit_conclusions(
    h: &HamiltonianFamily,
    lambda0: &[f64],
    k0: &Embedding,
    lambda: &[f64],
    k: &Embedding,
    budget: &KamBudget,
    opts: &NondegeneracyOptions,
) -> Result<ConclusionAudit> {
    let rho = budget.rho;
    let before = nondegeneracy::nondegeneracy(h, lambda0, k0, rho, opts)?;
    let after = nondegeneracy::nondegeneracy(h, lambda, k, rho / 2.0, opts)?;
    let k_drift = k.distance(k0, rho / 2.0);
    let lambda_drift = lambda.iter().zip(lambda0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let beta = budget.beta_step;
    Ok(ConclusionAudit {
        k_drift,
        lambda_drift,
        r: budget.r,
        d0: before.d,
        d_final: after.d,
        v0: before.v,
        v_final: after.v,
        tau0: before.tau,
        tau_final: after.tau,
        beta_step: beta,
        slack: AUDIT_SLACK,
        pass_k: k_drift <= budget.r,
        pass_lambda: lambda_drift < budget.r,
        pass_d: after.d <= before.d + beta + AUDIT_SLACK,
        pass_v: after.v <= before.v + beta + AUDIT_SLACK,
        pass_tau: after.tau <= before.tau + beta + AUDIT_SLACK,
    })
}

/// Result of [`solve_analytic`].
#[derive(Debug, Clone)]
pub struct TorusSolution {
    pub k: Embedding,
    pub lambda: Vec<f64>,
    pub residual: StripNormValue,
    pub rho_final: f64,
    pub nondegeneracy: NondegeneracyData,
    pub initial_nondegeneracy: NondegeneracyDiagnostics,
    pub history: Vec<StepRecord>,
    /// Smallness conditions at the start, with the constant actually used.
    pub smallness: SmallnessLedger,
    /// Largest observed contraction constant (steps above the round-off floor).
    pub c_calibrated: f64,
    pub audit: ConclusionAudit,
    pub initial_residual: f64,
}

impl TorusSolution {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }
}

/// The strip schedule `rho_m = rho (1/2 + 2^(-m-1))`, decreasing to `rho / 2`.
pub fn analytic_strip(rho: f64, m: usize) -> f64 {
    rho * (0.5 + 0.5f64.powi(m as i32 + 1))
}

/// Iterates [`newton_step`] on the shrinking strips until `||e||_{rho/2} < tol`.
pub fn solve_analytic(
    h: &HamiltonianFamily,
    lambda0: &[f64],
    k0: &Embedding,
    freq: &FrequencyVector,
    budget: &KamBudget,
    opts: &SolverOptions,
) -> Result<TorusSolution> {
    h.require_square_parameters()?;
    check_dims(h, lambda0, k0, &freq.omega)?;
    let rho = budget.rho;
    let nd0 = nondegeneracy::nondegeneracy(h, lambda0, k0, rho, &opts.nondegeneracy)?;
    let (e0, _) = error_function_with(h, lambda0, k0, &freq.omega, opts.exec)?;
    let e0_norm = e0.norm(rho);
    if let Some(c) = budget.c {
        let ledger = check_smallness(budget, c, e0_norm);
        if opts.enforce_smallness && !ledger.pass() {
            return Err(KamError::SmallnessFailed(format!(
                "c gamma^-4 delta0^-4sigma ||e|| = {:e}, c gamma^-2 delta0^-2sigma ||e|| = {:e}, r = {:e}",
                ledger.lhs_contraction, ledger.lhs_radius, budget.r
            )));
        }
    }

    let mut k = k0.clone();
    let mut lambda = lambda0.to_vec();
    let mut history = Vec::new();
    let mut residual = e0.norm(rho / 2.0);
    let mut m = 0;
    while residual >= opts.tol {
        if m == opts.max_iter {
            return Err(KamError::BudgetExceeded { max_iter: opts.max_iter, residual });
        }
        let (rin, rout) = (analytic_strip(rho, m), analytic_strip(rho, m + 1));
        let (kn, ln, report) = newton_step(h, &lambda, &k, freq, rin, rout, opts)?;
        k = kn;
        lambda = ln;
        residual = error_function_with(h, &lambda, &k, &freq.omega, opts.exec)?.0.norm(rho / 2.0);
        history.push(StepRecord { iteration: m, residual, step: report });
        m += 1;
    }

    let floor = history.first().map_or(CALIBRATION_FLOOR, |r| CALIBRATION_FLOOR.max(CALIBRATION_RELATIVE_FLOOR * r.step.residual_in));
    let c_calibrated = history
        .iter()
        .filter(|r| r.step.residual_out >= floor)
        .map(|r| r.step.c_obs)
        .fold(0.0, f64::max);
    let smallness = check_smallness(budget, budget.c.unwrap_or(c_calibrated), e0_norm);
    let audit = audit_conclusions(h, lambda0, k0, &lambda, &k, budget, &opts.nondegeneracy)?;
    if opts.enforce_drift && !audit.pass() {
        return Err(KamError::DriftViolation(audit.failures().join("; ")));
    }
    let nd = nondegeneracy::nondegeneracy(h, &lambda, &k, rho / 2.0, &opts.nondegeneracy)?;
    Ok(TorusSolution {
        k,
        lambda,
        residual: StripNormValue { rho: rho / 2.0, value: residual },
        rho_final: rho / 2.0,
        nondegeneracy: nd,
        initial_nondegeneracy: nd0.diagnostics(),
        history,
        smallness,
        c_calibrated,
        audit,
        initial_residual: e0_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{builtin_family, FamilyOptions};
    use std::f64::consts::PI;

    const GOLDEN: f64 = 1.618_033_988_749_895;

    fn freq(omega: Vec<f64>) -> FrequencyVector {
        FrequencyVector::new(omega, 0.1, 1.0).unwrap()
    }

    fn forced(eps: f64) -> HamiltonianFamily {
        builtin_family("forced_rotator", 1, &FamilyOptions { epsilon: eps, ..FamilyOptions::default() }).unwrap()
    }

    #[test]
    fn smallness_examples() {
        let b = KamBudget::with_delta0(12.0, 1.0, 0.1, 1.0, 2.0, Some(1.0));
        let l = check_smallness(&b, 1.0, 0.5);
        assert_eq!(l.lhs_contraction, 0.5);
        assert!(l.pass_contraction && !l.pass_radius);
        let z = check_smallness(&b, 1.0, 0.0);
        assert!(z.pass() && z.margin_contraction == 1.0 && z.margin_radius == 0.1);
        assert_eq!(beta_step(1.0, 2.0, 1.0), 0.00390625);
        assert_eq!(beta_total(1.0, 2.0, 1.0), 1.0 / 224.0);
        assert!(b.beta_total > b.beta_step);
        assert_eq!(KamBudget::new(0.6, 0.1, 1.0, 2.0, None).delta0, 0.6 / 12.0);
        assert_eq!(KamBudget::new(24.0, 0.1, 1.0, 2.0, None).delta0, 1.0);
    }

    #[test]
    fn rotator_flat_torus_is_exact() {
        let h = builtin_family("rotator", 2, &FamilyOptions::default()).unwrap();
        let w = vec![1.0, GOLDEN];
        let k = Embedding::flat(2, 4, &w);
        let e = error_function(&h, &[0.0; 4], &k, &w).unwrap();
        assert_eq!(e.norm(0.2), 0.0);
    }

    #[test]
    fn forced_rotator_error_on_flat_torus() {
        let eps = 0.01;
        let h = forced(eps);
        let k = Embedding::flat(1, 8, &[GOLDEN]);
        let e = error_function(&h, &[0.0, 0.0], &k, &[GOLDEN]).unwrap();
        for t in [0.0, 0.2, 0.45, 0.8] {
            let v = e.eval_real(&[t]);
            assert!(v[0].abs() < 1e-15);
            assert!((v[1] + 2.0 * PI * eps * (2.0 * PI * t).cos()).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_error_step_is_identity() {
        let h = builtin_family("rotator", 1, &FamilyOptions::default()).unwrap();
        let k = Embedding::flat(1, 8, &[GOLDEN]);
        let (k1, l1, rep) = newton_step(&h, &[0.0, 0.0], &k, &freq(vec![GOLDEN]), 0.1, 0.075, &SolverOptions::default()).unwrap();
        assert_eq!(k1, k);
        assert_eq!(l1, vec![0.0, 0.0]);
        assert_eq!(rep.residual_out, 0.0);
    }

    #[test]
    fn first_step_matches_linear_theory() {
        // One step from the flat torus: q-correction eps cos/(2 pi w^2), p-correction -eps sin/w.
        let eps = 1e-4;
        let h = forced(eps);
        let k = Embedding::flat(1, 12, &[GOLDEN]);
        let (k1, l1, rep) = newton_step(&h, &[0.0, 0.0], &k, &freq(vec![GOLDEN]), 0.1, 0.075, &SolverOptions::default()).unwrap();
        for t in [0.0, 0.1, 0.6] {
            let v = k1.eval_real(&[t]);
            let dq = eps * (2.0 * PI * t).cos() / (2.0 * PI * GOLDEN * GOLDEN);
            let dp = -eps * (2.0 * PI * t).sin() / GOLDEN;
            assert!((v[0] - t - dq).abs() < 1e-12);
            assert!((v[1] - GOLDEN - dp).abs() < 1e-12);
        }
        assert!(l1.iter().all(|x| x.abs() < 1e-12));
        assert!(rep.average_defects[0] < 1e-12 && rep.average_defects[1] < 1e-12);
        assert!(rep.residual_out < 1e-3 * rep.residual_in);
    }

    #[test]
    fn forced_rotator_converges_quadratically() {
        let h = forced(1e-3);
        let k0 = Embedding::flat(1, 16, &[GOLDEN]);
        let f = freq(vec![GOLDEN]);
        let budget = KamBudget::new(0.1, 0.01, f.gamma, f.sigma, None);
        let sol = solve_analytic(&h, &[0.0, 0.0], &k0, &f, &budget, &SolverOptions::default()).unwrap();
        assert!(sol.residual.value < 1e-10);
        assert!(sol.iterations() <= 10 && sol.iterations() >= 2, "{}", sol.iterations());
        assert!(sol.audit.pass(), "{:?}", sol.audit.failures());
        let e = error_function(&h, &sol.lambda, &sol.k, &f.omega).unwrap();
        assert!((e.norm(0.05) - sol.residual.value).abs() < 1e-12);
        for r in &sol.history {
            assert!(r.step.average_defects[0] < 1e-12 && r.step.average_defects[1] < 1e-12);
        }
    }

    #[test]
    fn two_degree_of_freedom_solve() {
        let h = builtin_family("forced_rotator", 2, &FamilyOptions { epsilon: 1e-3, ..FamilyOptions::default() }).unwrap();
        let w = vec![1.0, GOLDEN];
        let f = FrequencyVector::new(w.clone(), 0.005, 1.5).unwrap();
        let k0 = Embedding::flat(2, 10, &w);
        let budget = KamBudget::new(0.1, 0.01, f.gamma, f.sigma, None);
        let sol = solve_analytic(&h, &[0.0; 4], &k0, &f, &budget, &SolverOptions::default()).unwrap();
        assert!(sol.residual.value < 1e-10);
    }

    #[test]
    fn sine_coupling_fails_nondegeneracy() {
        use crate::hamiltonian::Coupling;
        let o = FamilyOptions { epsilon: 1e-3, coupling: Coupling::Sine, ..FamilyOptions::default() };
        let h = builtin_family("forced_rotator", 1, &o).unwrap();
        let k0 = Embedding::flat(1, 8, &[GOLDEN]);
        let f = freq(vec![GOLDEN]);
        let budget = KamBudget::new(0.1, 0.01, f.gamma, f.sigma, None);
        let err = solve_analytic(&h, &[0.0, 0.0], &k0, &f, &budget, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, KamError::SingularLambdaAverage { .. }));
    }
}

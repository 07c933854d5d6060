//! Shrinking-strip cascade for a `C^l` family.
//!
//! Step one picks the first analytic approximant `H^{k0}` close enough to
//! `H` in `C^3` and solves the analytic problem for it at strip `rho`. Each
//! later step `k` swaps in the next approximant, checks the ledger
//! `A1(k)..A5(k)` and re-solves from `(lambda_{k-1}, K_{k-1})` on the strip
//! `rho_k = rho / 2^{k-1}` with drift budget `r_k = r 4^{-(l+sigma)(k-1)}`.
//! The increments `K_k - K_{k-1}` are what makes the limit `C^1`.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diophantine::FrequencyVector;
use crate::embedding::Embedding;
use crate::error::{KamError, Result};
use crate::fourier::Grid;
use crate::hamiltonian::{self, HamiltonianFamily, ParameterDomain, Smoothness};
use crate::kam_newton::{self, check_smallness, KamBudget, SmallnessLedger, SolverOptions, TorusSolution};
use crate::linalg;
use crate::nondegeneracy;
use crate::smoothing::{self, ApproximantSequence, CkOptions, SampleSet, ScalarFn};

/// `rho_k = rho / 2^{k-1}`, `delta_k = rho_k / 12`, `r_k = r q^{k-1}` with
/// `q = 4^{-(l + sigma)}`. Steps are numbered from 1 (step one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationSchedule {
    pub rho: f64,
    pub r: f64,
    pub l: f64,
    pub sigma: f64,
}

impl IterationSchedule {
    pub fn new(rho: f64, r: f64, l: f64, sigma: f64) -> Self {
        Self { rho, r, l, sigma }
    }

    /// `4^{-(l + sigma)}`.
    pub fn ratio(&self) -> f64 {
        4f64.powf(-(self.l + self.sigma))
    }

    pub fn rho_k(&self, k: usize) -> f64 {
        assert!(k >= 1);
        self.rho / 2f64.powi(k as i32 - 1)
    }

    pub fn delta_k(&self, k: usize) -> f64 {
        self.rho_k(k) / 12.0
    }

    pub fn r_k(&self, k: usize) -> f64 {
        assert!(k >= 1);
        self.r * self.ratio().powi(k as i32 - 1)
    }

    /// `r sum_{i<k} q^i`, the bound of A1(k) and A2(k). Never above `4r/3`.
    pub fn drift_bound(&self, k: usize) -> f64 {
        let q = self.ratio();
        self.r * (1.0 - q.powi(k as i32)) / (1.0 - q)
    }

    /// Strip `rho / 4^k` on which increments are measured.
    pub fn increment_strip(&self, k: usize) -> f64 {
        self.rho / 4f64.powi(k as i32)
    }

    /// `sum_{i>k} r_i`.
    pub fn tail_after(&self, k: usize) -> f64 {
        self.r_k(k + 1) / (1.0 - self.ratio())
    }

    /// `A 4^{-lk}` with `A = r 4^l`, which dominates `r_k`.
    pub fn lemma2_envelope(&self, k: usize) -> f64 {
        self.r * 4f64.powf(self.l) * 4f64.powf(-self.l * k as f64)
    }
}

/// Where the analytic approximants come from.
#[derive(Clone)]
pub enum ApproximationPlan {
    /// `H^k = H` for every `k` (the family is already analytic).
    Identity,
    /// A selected sequence; element `k` must carry a family.
    Selected(ApproximantSequence),
    /// Angle-spectrum truncations with `J = j_base 2^{k-2}` at raw index
    /// `k`. Step `s` of the cascade uses raw index `k0 + s - 1`, so
    /// `J_s rho_s` stays constant.
    StripMatched { j_base: usize },
}

impl ApproximationPlan {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Selected(_) => "selected",
            Self::StripMatched { .. } => "strip-matched",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriverOptions {
    /// Stop before step `k` once `r_k` falls below this.
    pub stop_tol: f64,
    /// Last step index.
    pub k_stop: usize,
    /// Smoothness `l` used for analytic families.
    pub l: f64,
    /// How many consecutive distances enter the tail sum of condition (10).
    pub horizon: usize,
    /// Largest raw index examined for `k0`.
    pub max_k0: usize,
    pub tube_per_axis: usize,
    /// Points per axis of the real-torus residual check.
    pub residual_grid: usize,
    pub ck: CkOptions,
    #[serde(skip)]
    pub solver: SolverOptions,
}

impl Default for DriverOptions {
    fn default() -> Self {
        Self {
            stop_tol: 1e-12,
            k_stop: 12,
            l: 4.0,
            horizon: 3,
            max_k0: 10,
            tube_per_axis: 32,
            residual_grid: 4096,
            ck: CkOptions::default(),
            solver: SolverOptions::default(),
        }
    }
}

/// A measured quantity next to its bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    pub fn below(measured: f64, bound: f64) -> Self {
        Self { measured, bound, pass: measured < bound }
    }

    pub fn at_most(measured: f64, bound: f64) -> Self {
        Self { measured, bound, pass: measured <= bound }
    }

    pub fn margin(&self) -> f64 {
        self.bound - self.measured
    }
}

/// The polynomial `(1 + mu)(1 + d)(1 + v)(1 + tau)` standing in for the
/// unspecified one behind the constant `c`. It is increasing in each
/// argument, so `c_k <= c` whenever every `y_k` stays below its barred value.
pub fn constant_polynomial(mu: f64, d: f64, v: f64, tau: f64) -> f64 {
    (1.0 + mu) * (1.0 + d) * (1.0 + v) * (1.0 + tau)
}

/// Max row sum.
fn inf_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// One examined candidate of step one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOneCandidate {
    pub raw: usize,
    pub level: usize,
    /// `|H^k - H|_{C^3}` on the `2r` tube.
    pub distance: f64,
    /// Consecutive distances over the horizon.
    pub tail_sum: f64,
    pub cond8: Check,
    pub cond9: Check,
    pub cond10: Check,
    /// `|<Lambda_0>^{-1} <Psi_0>|` against 1/2.
    pub neumann: Check,
    /// `|<Psi_0>|` against `d (v + 1) |H^k - H|_{C^3}`.
    pub psi_bound: Check,
    /// Position rule `A 4^{-(k-1)(l+2 sigma)} <= ||e_0||` for selected sequences.
    pub position_rule: bool,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOneReport {
    pub k0: usize,
    pub level: usize,
    pub e0_norm: f64,
    pub mu0: f64,
    pub d0: f64,
    pub v0: f64,
    pub tau0: f64,
    pub beta_total: f64,
    pub mu_bar: f64,
    pub d_bar: f64,
    pub nu_bar: f64,
    pub tau_bar: f64,
    pub candidates: Vec<StepOneCandidate>,
    /// Contraction constant observed in the first solve.
    pub c_observed: f64,
    pub kappa: f64,
    pub c: f64,
    pub c_k0: f64,
    /// Conditions (2)-(3) for `e_0` with `c`.
    pub smallness_e0: SmallnessLedger,
    /// `c_{k0} <= c`.
    pub cond11: Check,
    /// Conditions (12)-(13) for `e_{k0}` with `c_{k0}`.
    pub smallness_k0: SmallnessLedger,
    /// `||K_{k0} - K_0||_{rho/2} <= r`.
    pub cond14: Check,
    /// `|lambda_{k0} - lambda_0| <= r`.
    pub cond15: Check,
    pub iterations: usize,
    pub residual: f64,
}

/// One row of the ledger. Row 1 is step one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub k: usize,
    pub raw: usize,
    pub level: usize,
    pub kmax: usize,
    pub rho_k: f64,
    pub delta_k: f64,
    pub r_k: f64,
    pub e_norm: f64,
    pub mu: f64,
    pub d: f64,
    pub v: f64,
    pub tau: f64,
    /// Right-hand side of the Neumann bound (17) on `tau_k`.
    pub tau_neumann_bound: f64,
    pub psi_avg: f64,
    pub c_k: f64,
    pub a1: Check,
    pub a2: Check,
    pub a3: Check,
    pub a4: Check,
    pub a5: Check,
    /// `||K_k - K_{k-1}||_{rho / 4^k}` against `r_k`.
    pub increment: Check,
    pub lambda_increment: Check,
    pub iterations: usize,
    pub residual: f64,
}

impl LedgerRow {
    pub fn passes(&self) -> bool {
        [self.a1, self.a2, self.a3, self.a4, self.a5].iter().all(|c| c.pass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub k: usize,
    pub increment: f64,
    pub r_k: f64,
    pub lemma2: f64,
}

/// `|H^k - H^{k-1}|_{C^3}` against `||e_0|| 4^{-(k-1)(l+2 sigma)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximantDecayRow {
    pub k: usize,
    pub distance: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriveCertificate {
    pub family: String,
    pub plan: String,
    pub schedule: IterationSchedule,
    pub omega: Vec<f64>,
    pub k0: usize,
    pub step_one: StepOneReport,
    pub ledger: Vec<LedgerRow>,
    pub envelope: Vec<EnvelopeRow>,
    pub approximant_decay: Vec<ApproximantDecayRow>,
    /// Sup over `theta` of `|DK_k - DK_{k-1}|`.
    pub c1_stability: Vec<(usize, f64)>,
    pub lambda_final: Vec<f64>,
    /// `max |J grad H(K) - d_omega K|` on a real grid, for the original `H`.
    pub final_residual: f64,
    /// `|H^{last} - H|_{C^3}` on the `2r` tube.
    pub ck_tail: f64,
    pub r_last: f64,
    /// `10 (ck_tail + r_last)`.
    pub residual_bound: f64,
    /// `sum_{k > last} r_k`.
    pub truncation_tail: f64,
    pub steps: usize,
    pub stop_reason: String,
    pub beta_step: f64,
    pub beta_total: f64,
    #[serde(skip)]
    pub torus: Option<Embedding>,
}

impl DriveCertificate {
    pub fn torus(&self) -> &Embedding {
        self.torus.as_ref().expect("certificate carries its torus")
    }

    /// Ledger as CSV: `k, rho_k, delta_k, r_k, e_norm, A1..A5 margins, increment`.
    pub fn ledger_csv(&self) -> String {
        let mut s = String::from("k,rho_k,delta_k,r_k,e_norm,a1_margin,a2_margin,a3_margin,a4_margin,a5_margin,increment\n");
        for r in &self.ledger {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                r.k,
                r.rho_k,
                r.delta_k,
                r.r_k,
                r.e_norm,
                r.a1.margin(),
                r.a2.margin(),
                r.a3.margin(),
                r.a4.margin(),
                r.a5.margin(),
                r.increment.measured
            ));
        }
        s
    }

    pub fn all_ledger_rows_pass(&self) -> bool {
        self.ledger.iter().all(|r| r.passes() && r.increment.pass)
    }
}

/// Approximants by raw index with their `C^3` tables on the `2r` tube.
struct Approximants<'a> {
    plan: &'a ApproximationPlan,
    h: &'a HamiltonianFamily,
    samples: SampleSet,
    ck: CkOptions,
    target: Vec<f64>,
    tables: HashMap<usize, Vec<f64>>,
}

impl<'a> Approximants<'a> {
    fn family(&self, raw: usize) -> Result<(HamiltonianFamily, usize)> {
        match self.plan {
            ApproximationPlan::Identity => Ok((self.h.clone(), 0)),
            ApproximationPlan::Selected(seq) => {
                let e = seq.elements.get(raw - 1).ok_or_else(|| {
                    KamError::ApproximantExhausted(format!("only {} approximants were selected", seq.elements.len()))
                })?;
                let f = e.family.clone().ok_or_else(|| {
                    KamError::ApproximantExhausted(format!("approximant {raw} has no family attached"))
                })?;
                Ok((f.with_param_domain(self.h.param_domain.clone()), e.level))
            }
            ApproximationPlan::StripMatched { j_base } => {
                let j = if raw >= 2 { j_base << (raw - 2) } else { j_base / 2 };
                let f = self.h.truncate_angles(j).ok_or_else(|| {
                    KamError::ApproximantExhausted(format!("family `{}` has no angle spectrum", self.h.name))
                })?;
                Ok((f, j))
            }
        }
    }

    fn available(&self, raw: usize) -> bool {
        match self.plan {
            ApproximationPlan::Selected(seq) => raw >= 1 && raw <= seq.elements.len(),
            _ => true,
        }
    }

    fn table(&mut self, raw: usize) -> Result<&Vec<f64>> {
        if matches!(self.plan, ApproximationPlan::Identity) {
            return Ok(&self.target);
        }
        if !self.tables.contains_key(&raw) {
            let (f, _) = self.family(raw)?;
            let t = smoothing::ck_table(&smoothing::family_fn(&f), &self.samples, &self.ck);
            self.tables.insert(raw, t);
        }
        Ok(&self.tables[&raw])
    }

    fn to_target(&mut self, raw: usize) -> Result<f64> {
        let t = self.table(raw)?.clone();
        Ok(smoothing::table_distance(&t, &self.target))
    }

    fn between(&mut self, a: usize, b: usize) -> Result<f64> {
        let ta = self.table(a)?.clone();
        let tb = self.table(b)?;
        Ok(smoothing::table_distance(&ta, tb))
    }

    fn sup(&mut self, raw: usize) -> Result<f64> {
        Ok(self.table(raw)?.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }
}

/// Everything a step carries forward.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub k: usize,
    pub raw: usize,
    pub level: usize,
    pub family: HamiltonianFamily,
    pub lambda: Vec<f64>,
    pub torus: Embedding,
    pub tau: f64,
    pub increment: f64,
}

/// Barred constants fixed by step one.
#[derive(Debug, Clone, Copy)]
struct Bars {
    d: f64,
    nu: f64,
    tau: f64,
    kappa: f64,
    c: f64,
}

fn param_box(h: &HamiltonianFamily, lambda0: &[f64], r: f64) -> ParameterDomain {
    let pd = &h.param_domain;
    if pd.q_lower.iter().chain(&pd.q_upper).all(|v| v.is_finite()) {
        pd.clone()
    } else {
        ParameterDomain::around(lambda0.to_vec(), 2.0 * r, 3.0 * r)
    }
}

fn kmax_for(plan: &ApproximationPlan, level: usize, current: usize) -> usize {
    match plan {
        ApproximationPlan::StripMatched { .. } => current.max(2 * level),
        _ => current,
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn calibrated_c(sol: &TorusSolution) -> f64 {
    if sol.c_calibrated > 0.0 {
        sol.c_calibrated
    } else {
        sol.history.iter().map(|r| r.step.c_obs).fold(0.0, f64::max)
    }
}

fn budget_at(schedule: &IterationSchedule, freq: &FrequencyVector, k: usize, c: Option<f64>) -> KamBudget {
    KamBudget::with_delta0(schedule.rho_k(k), schedule.delta_k(k), schedule.r_k(k), freq.gamma, freq.sigma, c)
}

/// Smoothness class used by the schedule.
pub fn smoothness_of(h: &HamiltonianFamily, opts: &DriverOptions) -> f64 {
    match h.smoothness {
        Smoothness::Finite(l) => l as f64,
        Smoothness::Analytic => opts.l,
    }
}

/// `max |J grad H_lambda(K(theta)) - d_omega K(theta)|` over a real grid.
pub fn real_torus_residual(h: &HamiltonianFamily, lambda: &[f64], k: &Embedding, omega: &[f64], per_axis: usize) -> Result<f64> {
    let n = k.n();
    let per_axis = if n == 1 { per_axis } else { per_axis.min(64) };
    let grid = Grid::new(n, per_axis);
    let dk = k.omega_derivative(omega);
    let rows = crate::par::map_range(crate::par::Exec::default(), grid.len(), |p| {
        let t = grid.point(p);
        let f = hamiltonian::vector_field(h, &k.eval_real(&t), lambda)?;
        Ok(max_diff(&f, &dk.eval_real(&t)))
    });
    rows.into_iter().try_fold(0.0f64, |m, r: Result<f64>| Ok(m.max(r?)))
}

struct StepOneOutput {
    report: StepOneReport,
    state: IterationState,
    bars: Bars,
    row: LedgerRow,
}

#[allow(clippy::too_many_arguments)]
fn step_one_with(
    h: &HamiltonianFamily,
    approx: &mut Approximants,
    k0: &Embedding,
    lambda0: &[f64],
    freq: &FrequencyVector,
    budget: &KamBudget,
    schedule: &IterationSchedule,
    opts: &DriverOptions,
) -> Result<StepOneOutput> {
    let rho = budget.rho;
    let r = budget.r;
    let nd_opts = opts.solver.nondegeneracy;
    let nd0 = nondegeneracy::nondegeneracy(h, lambda0, k0, rho, &nd_opts)?;
    let e0_norm = kam_newton::error_function_with(h, lambda0, k0, &freq.omega, opts.solver.exec)?.0.norm(rho);
    let mu0 = approx.target.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let beta = budget.beta_total;
    let (mu_bar, d_bar, nu_bar, tau_bar) = (mu0 + 1.0, nd0.d + beta, nd0.v + beta, nd0.tau + beta + 1.0);
    let exponent = schedule.l + 2.0 * schedule.sigma;

    let mut candidates = Vec::new();
    let mut chosen = None;
    for raw in 2..=opts.max_k0.max(2) {
        if !approx.available(raw) {
            break;
        }
        let (fam, level) = approx.family(raw)?;
        let distance = approx.to_target(raw)?;
        let mut tail_sum = 0.0;
        for j in raw..raw + opts.horizon {
            if !approx.available(j + 1) {
                break;
            }
            tail_sum += approx.between(j, j + 1)?;
        }
        let cond8 = Check::below(d_bar * (nu_bar + 1.0) * distance * tau_bar, 0.25);
        let cond9 = Check::below(distance, 1.0);
        let cond10 = Check::below(2.0 * d_bar * (nu_bar + 1.0) * tau_bar * tau_bar * (distance + tail_sum), 1.0);
        let lam = nondegeneracy::compute_lambda(k0, &nd0.n_map, &fam, lambda0, &nd_opts)?;
        let psi = &lam.avg - &nd0.lambda_avg;
        let neumann = Check::below(inf_norm(&(&nd0.lambda_avg_inv * &psi)), 0.5);
        let psi_bound = Check::at_most(linalg::max_abs(&psi), d_bar * (nu_bar + 1.0) * distance);
        let position_rule = match approx.plan {
            ApproximationPlan::Selected(seq) => seq.a * 4f64.powf(-((raw - 1) as f64) * exponent) <= e0_norm,
            _ => true,
        };
        let accepted = cond8.pass && cond9.pass && cond10.pass && neumann.pass && position_rule;
        candidates.push(StepOneCandidate {
            raw,
            level,
            distance,
            tail_sum,
            cond8,
            cond9,
            cond10,
            neumann,
            psi_bound,
            position_rule,
            accepted,
        });
        if accepted {
            chosen = Some((raw, fam, level, distance));
            break;
        }
    }
    let (raw0, fam0, level0, _) = chosen.ok_or_else(|| {
        let last = candidates.last().map(|c| c.distance).unwrap_or(f64::NAN);
        KamError::ApproximantExhausted(format!(
            "no approximant among {} candidates meets (8)-(10) and the Neumann test (last C3 distance {last:e})",
            candidates.len()
        ))
    })?;

    let (start, _) = k0.retruncate(kmax_for(approx.plan, level0, k0.kmax()));
    let sol = kam_newton::solve_analytic(&fam0, lambda0, &start, freq, budget, &opts.solver)?;

    let mu_k0 = approx.sup(raw0)?;
    let tau_k0 = sol.initial_nondegeneracy.tau;
    let y_k0 = constant_polynomial(mu_k0, nd0.d, nd0.v, tau_k0);
    let y_bar = constant_polynomial(mu_bar, d_bar, nu_bar, tau_bar);
    let c_observed = calibrated_c(&sol);
    let (kappa, c, c_k0) = match budget.c {
        Some(c) => (c / y_bar, c, c / y_bar * y_k0),
        None => (c_observed / y_k0, c_observed / y_k0 * y_bar, c_observed),
    };

    let smallness_e0 = check_smallness(budget, c, e0_norm);
    if !smallness_e0.pass() {
        return Err(KamError::SmallnessFailed(format!(
            "for e_0: c gamma^-4 delta0^-4sigma ||e|| = {:e} (< 1 needed), c gamma^-2 delta0^-2sigma ||e|| = {:e} (< r = {:e} needed)",
            smallness_e0.lhs_contraction, smallness_e0.lhs_radius, r
        )));
    }
    let cond11 = Check::at_most(c_k0, c);
    let smallness_k0 = check_smallness(budget, c_k0, sol.initial_residual);
    let k_drift = sol.k.distance(k0, rho / 2.0);
    let l_drift = max_diff(&sol.lambda, lambda0);
    let cond14 = Check::at_most(k_drift, r);
    let cond15 = Check::at_most(l_drift, r);
    let violations = [
        ("(11) c_k0 <= c", cond11),
        ("(12) contraction smallness for e_k0", Check::below(smallness_k0.lhs_contraction, 1.0)),
        ("(13) radius smallness for e_k0", Check::below(smallness_k0.lhs_radius, r)),
        ("(14) ||K_k0 - K_0||", cond14),
        ("(15) |lambda_k0 - lambda_0|", cond15),
    ];
    if let Some((name, c)) = violations.iter().find(|(_, c)| !c.pass) {
        return Err(KamError::LedgerViolation { k: 1, condition: name.to_string(), measured: c.measured, bound: c.bound });
    }

    let increment = sol.k.distance(k0, schedule.increment_strip(1));
    let row = LedgerRow {
        k: 1,
        raw: raw0,
        level: level0,
        kmax: sol.k.kmax(),
        rho_k: rho,
        delta_k: schedule.delta_k(1),
        r_k: r,
        e_norm: sol.initial_residual,
        mu: mu_k0,
        d: nd0.d,
        v: nd0.v,
        tau: tau_k0,
        tau_neumann_bound: nd0.tau + 2.0 * d_bar * (nu_bar + 1.0) * tau_bar * tau_bar * candidates.last().unwrap().distance,
        psi_avg: {
            let c = candidates.last().unwrap();
            c.psi_bound.measured
        },
        c_k: c_k0,
        a1: Check::at_most(l_drift, schedule.drift_bound(1)),
        a2: Check::at_most(k_drift, schedule.drift_bound(1)),
        a3: cond11,
        a4: Check::below(smallness_k0.lhs_contraction, 1.0),
        a5: Check::below(smallness_k0.lhs_radius, r),
        increment: Check::at_most(increment, r),
        lambda_increment: Check::at_most(l_drift, r),
        iterations: sol.iterations(),
        residual: sol.residual.value,
    };
    let report = StepOneReport {
        k0: raw0,
        level: level0,
        e0_norm,
        mu0,
        d0: nd0.d,
        v0: nd0.v,
        tau0: nd0.tau,
        beta_total: beta,
        mu_bar,
        d_bar,
        nu_bar,
        tau_bar,
        candidates,
        c_observed,
        kappa,
        c,
        c_k0,
        smallness_e0,
        cond11,
        smallness_k0,
        cond14,
        cond15,
        iterations: sol.iterations(),
        residual: sol.residual.value,
    };
    let state = IterationState {
        k: 1,
        raw: raw0,
        level: level0,
        family: fam0,
        lambda: sol.lambda.clone(),
        torus: sol.k.clone(),
        tau: tau_k0,
        increment,
    };
    Ok(StepOneOutput { report, state, bars: Bars { d: d_bar, nu: nu_bar, tau: tau_bar, kappa, c }, row })
}

#[allow(clippy::too_many_arguments)]
fn inductive_step_with(
    state: &IterationState,
    approx: &mut Approximants,
    k0: &Embedding,
    lambda0: &[f64],
    freq: &FrequencyVector,
    schedule: &IterationSchedule,
    bars: &Bars,
    opts: &DriverOptions,
) -> Result<(IterationState, LedgerRow)> {
    let k = state.k + 1;
    let raw = state.raw + 1;
    let (fam, level) = approx.family(raw)?;
    let (rho_k, delta_k, r_k) = (schedule.rho_k(k), schedule.delta_k(k), schedule.r_k(k));
    let rho_prev = schedule.rho_k(k - 1);
    let nd_opts = opts.solver.nondegeneracy;
    let (torus, _) = state.torus.retruncate(kmax_for(approx.plan, level, state.torus.kmax()));

    let e_norm = kam_newton::error_function_with(&fam, &state.lambda, &torus, &freq.omega, opts.solver.exec)?.0.norm(rho_k);
    let pd = param_box(&fam, lambda0, schedule.r);
    let tube = SampleSet::tube(&state.torus, schedule.r_k(k - 1), &pd.q_lower, &pd.q_upper, opts.tube_per_axis);
    let fam_fn: ScalarFn = smoothing::family_fn(&fam);
    let mu = smoothing::ck_norm(&fam_fn, &tube, &opts.ck);
    // Measured at K_{k-1}'s own truncation: zero padding changes nothing in
    // K but lets round-off into modes that the strip rho_{k-1} amplifies.
    let prev = &state.torus;
    let nres = nondegeneracy::compute_n(prev, rho_prev, &nd_opts)?;
    let d = prev.jacobian_norm(rho_prev);
    let v = nres.map.norm(rho_prev);
    let lam_new = nondegeneracy::compute_lambda(prev, &nres.map, &fam, &state.lambda, &nd_opts)?;
    let lam_old = nondegeneracy::compute_lambda(prev, &nres.map, &state.family, &state.lambda, &nd_opts)?;
    let psi = &lam_new.avg - &lam_old.avg;
    let tau = lam_new.tau;
    let step_distance = approx.between(raw, raw - 1)?;
    let tau_neumann_bound = lam_old.tau + 2.0 * bars.d * (bars.nu + 1.0) * bars.tau * bars.tau * step_distance;

    let c_k = bars.kappa * constant_polynomial(mu, d, v, tau);
    let (g, s) = (freq.gamma, freq.sigma);
    let a3 = Check::at_most(c_k, bars.c);
    let a4 = Check::below(c_k * g.powi(-4) * delta_k.powf(-4.0 * s) * e_norm, 1.0);
    let a5 = Check::below(c_k * g.powi(-2) * delta_k.powf(-2.0 * s) * e_norm, r_k);
    for (name, c) in [("A3 c_k <= c", a3), ("A4 contraction smallness", a4), ("A5 radius smallness", a5)] {
        if !c.pass {
            return Err(KamError::LedgerViolation { k, condition: name.into(), measured: c.measured, bound: c.bound });
        }
    }

    let budget = budget_at(schedule, freq, k, Some(c_k));
    let sol = kam_newton::solve_analytic(&fam, &state.lambda, &torus, freq, &budget, &opts.solver)?;

    let a1 = Check::at_most(max_diff(&sol.lambda, lambda0), schedule.drift_bound(k));
    let a2 = Check::at_most(sol.k.distance(k0, schedule.rho_k(k + 1)), schedule.drift_bound(k));
    for (name, c) in [("A1 |lambda_k - lambda_0|", a1), ("A2 ||K_k - K_0||", a2)] {
        if !c.pass {
            return Err(KamError::LedgerViolation { k, condition: name.into(), measured: c.measured, bound: c.bound });
        }
    }
    let inc = sol.k.distance(&state.torus, schedule.increment_strip(k));
    let lam_inc = max_diff(&sol.lambda, &state.lambda);
    let increment = Check::at_most(inc, r_k);
    let lambda_increment = Check::below(lam_inc, r_k);
    if !increment.pass || !lambda_increment.pass {
        return Err(KamError::ConvergenceStalled { k, increment: inc.max(lam_inc), previous: state.increment });
    }
    let row = LedgerRow {
        k,
        raw,
        level,
        kmax: sol.k.kmax(),
        rho_k,
        delta_k,
        r_k,
        e_norm,
        mu,
        d,
        v,
        tau,
        tau_neumann_bound,
        psi_avg: linalg::max_abs(&psi),
        c_k,
        a1,
        a2,
        a3,
        a4,
        a5,
        increment,
        lambda_increment,
        iterations: sol.iterations(),
        residual: sol.residual.value,
    };
    let next = IterationState { k, raw, level, family: fam, lambda: sol.lambda, torus: sol.k, tau, increment: inc };
    Ok((next, row))
}

/// Runs step one and the inductive steps until `r_k < stop_tol` or
/// `k > k_stop`, and assembles the certificate.
pub fn drive(
    h: &HamiltonianFamily,
    k0: &Embedding,
    lambda0: &[f64],
    freq: &FrequencyVector,
    budget: &KamBudget,
    plan: &ApproximationPlan,
    opts: &DriverOptions,
) -> Result<DriveCertificate> {
    h.require_square_parameters()?;
    let l = smoothness_of(h, opts);
    let schedule = IterationSchedule::new(budget.rho, budget.r, l, freq.sigma);
    let pd = param_box(h, lambda0, budget.r);
    let samples = SampleSet::tube(k0, 2.0 * budget.r, &pd.q_lower, &pd.q_upper, opts.tube_per_axis);
    let target = smoothing::ck_table(&smoothing::family_fn(h), &samples, &opts.ck);
    let mut approx = Approximants { plan, h, samples, ck: opts.ck, target, tables: HashMap::new() };

    let one = step_one_with(h, &mut approx, k0, lambda0, freq, budget, &schedule, opts)?;
    let mut state = one.state;
    let mut ledger = vec![one.row];
    let mut envelope = vec![EnvelopeRow { k: 1, increment: state.increment, r_k: schedule.r_k(1), lemma2: schedule.lemma2_envelope(1) }];
    let mut decay = Vec::new();
    let mut c1 = Vec::new();
    let exponent = schedule.l + 2.0 * schedule.sigma;

    let stop_reason = loop {
        let k = state.k + 1;
        if k > opts.k_stop {
            break format!("reached k_stop = {}", opts.k_stop);
        }
        if schedule.r_k(k) < opts.stop_tol {
            break format!("r_{k} = {:e} below the stop tolerance {:e}", schedule.r_k(k), opts.stop_tol);
        }
        if matches!(plan, ApproximationPlan::Identity) && ledger.last().map(|r| r.residual) == Some(0.0) {
            break "exact torus: zero residual".to_string();
        }
        if !approx.available(state.raw + 1) {
            break format!("approximant sequence ends at raw index {}", state.raw);
        }
        let (next, row) = inductive_step_with(&state, &mut approx, k0, lambda0, freq, &schedule, &one.bars, opts)?;
        let dist = approx.between(next.raw, state.raw)?;
        let bound = one.report.e0_norm * 4f64.powf(-((k - 1) as f64) * exponent);
        decay.push(ApproximantDecayRow { k, distance: dist, bound, pass: dist <= bound });
        envelope.push(EnvelopeRow { k, increment: next.increment, r_k: schedule.r_k(k), lemma2: schedule.lemma2_envelope(k) });
        let kmax = next.torus.kmax().max(state.torus.kmax());
        let (a, _) = next.torus.periodic().retruncate(kmax);
        let (b, _) = state.torus.periodic().retruncate(kmax);
        c1.push((k, a.jacobian().sub(&b.jacobian()).norm(0.0)));
        ledger.push(row);
        state = next;
    };

    let final_residual = real_torus_residual(h, &state.lambda, &state.torus, &freq.omega, opts.residual_grid)?;
    let ck_tail = approx.to_target(state.raw)?;
    let r_last = schedule.r_k(state.k);
    Ok(DriveCertificate {
        family: h.name.clone(),
        plan: plan.label().to_string(),
        schedule,
        omega: freq.omega.clone(),
        k0: one.report.k0,
        step_one: one.report,
        ledger,
        envelope,
        approximant_decay: decay,
        c1_stability: c1,
        lambda_final: state.lambda.clone(),
        final_residual,
        ck_tail,
        r_last,
        residual_bound: 10.0 * (ck_tail + r_last),
        truncation_tail: schedule.tail_after(state.k),
        steps: state.k,
        stop_reason,
        beta_step: budget.beta_step,
        beta_total: budget.beta_total,
        torus: Some(state.torus),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{builtin_family, FamilyOptions};

    const GOLDEN: f64 = 1.618_033_988_749_895;

    #[test]
    fn schedule_closed_forms() {
        let s = IterationSchedule::new(0.1, 0.01, 4.0, 1.0);
        assert_eq!(s.ratio(), 1.0 / 1024.0);
        assert_eq!(s.rho_k(1), 0.1);
        assert_eq!(s.rho_k(3), 0.025);
        assert_eq!(s.delta_k(2), 0.05 / 12.0);
        assert_eq!(s.r_k(1), 0.01);
        assert_eq!(s.r_k(3), 0.01 / 1024.0 / 1024.0);
        assert!(s.drift_bound(30) <= 4.0 / 3.0 * 0.01);
        assert!((s.drift_bound(2) - 0.01 * (1.0 + 1.0 / 1024.0)).abs() < 1e-18);
        for k in 1..20 {
            assert!(s.r_k(k) <= s.lemma2_envelope(k));
        }
        let direct: f64 = (4..200).map(|k| s.r_k(k)).sum();
        assert!((s.tail_after(3) - direct).abs() < 1e-15 * direct);
    }

    #[test]
    fn exact_rotator_torus_stops_after_step_one() {
        let h = builtin_family("rotator", 1, &FamilyOptions::default()).unwrap();
        let k0 = Embedding::flat(1, 8, &[GOLDEN]);
        let f = FrequencyVector::new(vec![GOLDEN], 0.1, 1.0).unwrap();
        let budget = KamBudget::new(0.1, 0.01, 0.1, 1.0, None);
        let opts = DriverOptions { tube_per_axis: 8, ..DriverOptions::default() };
        let cert = drive(&h, &k0, &[0.0, 0.0], &f, &budget, &ApproximationPlan::Identity, &opts).unwrap();
        assert_eq!(cert.steps, 1);
        assert_eq!(cert.step_one.iterations, 0);
        assert_eq!(cert.k0, 2);
        assert_eq!(cert.torus(), &k0);
        assert_eq!(cert.final_residual, 0.0);
    }

    #[test]
    fn identity_plan_reproduces_the_analytic_solve() {
        let h = builtin_family("forced_rotator", 1, &FamilyOptions { epsilon: 1e-3, ..FamilyOptions::default() }).unwrap();
        let k0 = Embedding::flat(1, 16, &[GOLDEN]);
        let f = FrequencyVector::new(vec![GOLDEN], 0.1, 1.0).unwrap();
        let budget = KamBudget::new(0.1, 0.01, 0.1, 1.0, None);
        let opts = DriverOptions { tube_per_axis: 8, ..DriverOptions::default() };
        let cert = drive(&h, &k0, &[0.0, 0.0], &f, &budget, &ApproximationPlan::Identity, &opts).unwrap();
        let direct = kam_newton::solve_analytic(&h, &[0.0, 0.0], &k0, &f, &budget, &SolverOptions::default()).unwrap();
        assert_eq!(cert.torus(), &direct.k);
        assert_eq!(cert.lambda_final, direct.lambda);
        assert!(cert.all_ledger_rows_pass());
        assert!(cert.ledger[1..].iter().all(|r| r.iterations == 0));
        assert!(cert.steps >= 2);
        assert!(cert.ledger_csv().lines().count() == cert.ledger.len() + 1);
    }

    #[test]
    fn strip_matched_cascade_on_a_small_cutoff() {
        let o = FamilyOptions { epsilon: 1e-4, cutoff: 256, ..FamilyOptions::default() };
        let h = builtin_family("finite_smoothness", 1, &o).unwrap();
        let k0 = Embedding::flat(1, 16, &[GOLDEN]);
        let f = FrequencyVector::new(vec![GOLDEN], 0.1, 1.0).unwrap();
        let budget = KamBudget::new(0.1, 0.05, 0.1, 1.0, None);
        let mut opts = DriverOptions { tube_per_axis: 16, ..DriverOptions::default() };
        opts.solver.tol = 1e-12;
        let cert = drive(&h, &k0, &[0.0, 0.0], &f, &budget, &ApproximationPlan::StripMatched { j_base: 16 }, &opts).unwrap();
        assert!(cert.steps >= 3, "{}", cert.stop_reason);
        assert!(cert.all_ledger_rows_pass());
        for row in &cert.envelope {
            assert!(row.increment <= row.r_k);
        }
        assert!(cert.final_residual < cert.residual_bound, "{} vs {}", cert.final_residual, cert.residual_bound);
    }
}

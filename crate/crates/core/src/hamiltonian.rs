//! Parametrized Hamiltonian families `H(x; lambda)` on `T^n x R^n`.
//!
//! Coordinates are `x = (q, p)` with `q` periodic of period 1. The vector field
//! is `J grad_x H` with `J = [[0, I], [-I, 0]]`. Evaluators may omit any
//! derivative; missing ones are filled in by central differences.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::expr::{self, Expr, Scope};

const TAU: f64 = 2.0 * PI;

/// Regularity of a family: `C^l` or real-analytic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothness {
    Analytic,
    Finite(u32),
}

/// Pointwise evaluator of a family. Derivatives default to `None`, meaning
/// "use finite differences".
pub trait Evaluator: Send + Sync {
    fn value(&self, x: &[f64], lambda: &[f64]) -> f64;
    fn grad_x(&self, _x: &[f64], _lambda: &[f64]) -> Option<Vec<f64>> {
        None
    }
    fn hess_x(&self, _x: &[f64], _lambda: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
    fn dgrad_dlambda(&self, _x: &[f64], _lambda: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

/// Phase-space region: `q` free (periodic), `p` in a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDomain {
    pub p_lower: Vec<f64>,
    pub p_upper: Vec<f64>,
}

impl PhaseDomain {
    pub fn unbounded(n: usize) -> Self {
        Self { p_lower: vec![f64::NEG_INFINITY; n], p_upper: vec![f64::INFINITY; n] }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let n = self.p_lower.len();
        x.iter().all(|v| v.is_finite())
            && (0..n).all(|i| x[n + i] >= self.p_lower[i] && x[n + i] <= self.p_upper[i])
    }
}

/// The rectangle `A(Q)`, the compact parameter set `Q` inside it (a box) and
/// the base parameter `lambda_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDomain {
    pub rect_lower: Vec<f64>,
    pub rect_upper: Vec<f64>,
    pub q_lower: Vec<f64>,
    pub q_upper: Vec<f64>,
    pub center: Vec<f64>,
}

impl ParameterDomain {
    /// `Q = center ± q_half`, `A(Q) = center ± rect_half`.
    pub fn around(center: Vec<f64>, q_half: f64, rect_half: f64) -> Self {
        let rect_half = rect_half.max(q_half);
        Self {
            rect_lower: center.iter().map(|c| c - rect_half).collect(),
            rect_upper: center.iter().map(|c| c + rect_half).collect(),
            q_lower: center.iter().map(|c| c - q_half).collect(),
            q_upper: center.iter().map(|c| c + q_half).collect(),
            center,
        }
    }

    pub fn unbounded(d: usize) -> Self {
        Self::around(vec![0.0; d], f64::INFINITY, f64::INFINITY)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn in_rect(&self, lambda: &[f64]) -> bool {
        lambda.len() == self.dim()
            && lambda.iter().enumerate().all(|(i, &l)| l.is_finite() && l >= self.rect_lower[i] && l <= self.rect_upper[i])
    }

    pub fn in_q(&self, lambda: &[f64]) -> bool {
        lambda.len() == self.dim()
            && lambda.iter().enumerate().all(|(i, &l)| l.is_finite() && l >= self.q_lower[i] && l <= self.q_upper[i])
    }

    /// `Q` contains the closed max-norm ball of radius `2r` about the center,
    /// and `Q` sits inside `A(Q)`.
    pub fn validate(&self, r: f64) -> Result<()> {
        for i in 0..self.dim() {
            let c = self.center[i];
            if self.q_lower[i] < self.rect_lower[i] || self.q_upper[i] > self.rect_upper[i] {
                return Err(KamError::DomainViolation(format!("Q is not inside A(Q) along axis {i}")));
            }
            if c - 2.0 * r < self.q_lower[i] || c + 2.0 * r > self.q_upper[i] {
                return Err(KamError::DomainViolation(format!(
                    "Q does not contain the 2r-ball around lambda_0 along axis {i} (r = {r})"
                )));
            }
        }
        Ok(())
    }
}

type Truncator = Arc<dyn Fn(usize) -> HamiltonianFamily + Send + Sync>;

/// A `d`-parametric family on `T^n x R^n`.
#[derive(Clone)]
pub struct HamiltonianFamily {
    pub name: String,
    n: usize,
    d: usize,
    eval: Arc<dyn Evaluator>,
    pub smoothness: Smoothness,
    pub domain: PhaseDomain,
    pub param_domain: ParameterDomain,
    truncator: Option<Truncator>,
}

impl fmt::Debug for HamiltonianFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HamiltonianFamily")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("smoothness", &self.smoothness)
            .finish_non_exhaustive()
    }
}

fn fd_step(x: f64, power: f64) -> f64 {
    f64::EPSILON.powf(power) * x.abs().max(1.0)
}

impl HamiltonianFamily {
    pub fn new(name: impl Into<String>, n: usize, d: usize, eval: Arc<dyn Evaluator>, smoothness: Smoothness) -> Self {
        Self {
            name: name.into(),
            n,
            d,
            eval,
            smoothness,
            domain: PhaseDomain::unbounded(n),
            param_domain: ParameterDomain::unbounded(d),
            truncator: None,
        }
    }

    /// Family given only by its value; every derivative is a finite difference.
    pub fn from_fn(
        name: impl Into<String>,
        n: usize,
        d: usize,
        smoothness: Smoothness,
        f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        struct ValueOnly<F>(F);
        impl<F: Fn(&[f64], &[f64]) -> f64 + Send + Sync> Evaluator for ValueOnly<F> {
            fn value(&self, x: &[f64], l: &[f64]) -> f64 {
                (self.0)(x, l)
            }
        }
        Self::new(name, n, d, Arc::new(ValueOnly(f)), smoothness)
    }

    /// Attaches an angle-spectrum truncation `J -> H^{(J)}` keeping the
    /// Fourier modes of the `q`-dependence with `|k|_inf <= J`.
    pub fn with_truncator(mut self, t: impl Fn(usize) -> HamiltonianFamily + Send + Sync + 'static) -> Self {
        self.truncator = Some(Arc::new(t));
        self
    }

    pub fn with_param_domain(mut self, pd: ParameterDomain) -> Self {
        self.param_domain = pd;
        self
    }

    /// Angle-spectrum truncation, if the family exposes one.
    pub fn truncate_angles(&self, cutoff: usize) -> Option<HamiltonianFamily> {
        self.truncator.as_ref().map(|t| {
            let mut h = t(cutoff);
            h.domain = self.domain.clone();
            h.param_domain = self.param_domain.clone();
            h
        })
    }

    pub fn has_angle_spectrum(&self) -> bool {
        self.truncator.is_some()
    }

    /// Degrees of freedom `n` (phase dimension is `2n`).
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn phase_dim(&self) -> usize {
        2 * self.n
    }

    pub fn param_dim(&self) -> usize {
        self.d
    }

    pub fn evaluator(&self) -> &Arc<dyn Evaluator> {
        &self.eval
    }

    fn check(&self, x: &[f64], lambda: &[f64]) -> Result<()> {
        if x.len() != 2 * self.n || lambda.len() != self.d {
            return Err(KamError::DimensionMismatch(format!(
                "expected x in R^{} and lambda in R^{}, got {} and {}",
                2 * self.n,
                self.d,
                x.len(),
                lambda.len()
            )));
        }
        if !self.domain.contains(x) {
            return Err(KamError::DomainViolation(format!("x = {x:?}")));
        }
        if !self.param_domain.in_rect(lambda) {
            return Err(KamError::DomainViolation(format!("lambda = {lambda:?} outside A(Q)")));
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64], lambda: &[f64]) -> f64 {
        self.eval.value(x, lambda)
    }

    pub fn grad_x(&self, x: &[f64], lambda: &[f64]) -> Vec<f64> {
        if let Some(g) = self.eval.grad_x(x, lambda) {
            return g;
        }
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                let h = fd_step(x[i], 1.0 / 3.0);
                xp[i] = x[i] + h;
                let fp = self.eval.value(&xp, lambda);
                xp[i] = x[i] - h;
                let fm = self.eval.value(&xp, lambda);
                xp[i] = x[i];
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    pub fn hess_x(&self, x: &[f64], lambda: &[f64]) -> DMatrix<f64> {
        if let Some(h) = self.eval.hess_x(x, lambda) {
            return h;
        }
        let m = x.len();
        let mut out = DMatrix::zeros(m, m);
        let mut xp = x.to_vec();
        if self.eval.grad_x(x, lambda).is_some() {
            for j in 0..m {
                let h = fd_step(x[j], 1.0 / 3.0);
                xp[j] = x[j] + h;
                let gp = self.grad_x(&xp, lambda);
                xp[j] = x[j] - h;
                let gm = self.grad_x(&xp, lambda);
                xp[j] = x[j];
                for i in 0..m {
                    out[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
                }
            }
        } else {
            let f0 = self.eval.value(x, lambda);
            for i in 0..m {
                let hi = fd_step(x[i], 0.25);
                for j in i..m {
                    let hj = fd_step(x[j], 0.25);
                    let v = if i == j {
                        xp[i] = x[i] + hi;
                        let fp = self.eval.value(&xp, lambda);
                        xp[i] = x[i] - hi;
                        let fm = self.eval.value(&xp, lambda);
                        xp[i] = x[i];
                        (fp - 2.0 * f0 + fm) / (hi * hi)
                    } else {
                        let mut s = 0.0;
                        for (si, sj, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                            xp[i] = x[i] + si * hi;
                            xp[j] = x[j] + sj * hj;
                            s += w * self.eval.value(&xp, lambda);
                        }
                        xp[i] = x[i];
                        xp[j] = x[j];
                        s / (4.0 * hi * hj)
                    };
                    out[(i, j)] = v;
                    out[(j, i)] = v;
                }
            }
            return out;
        }
        (&out + out.transpose()) * 0.5
    }

    /// `d/dlambda grad_x H`, a `2n x d` matrix.
    pub fn dgrad_dlambda(&self, x: &[f64], lambda: &[f64]) -> DMatrix<f64> {
        if let Some(m) = self.eval.dgrad_dlambda(x, lambda) {
            return m;
        }
        let mut out = DMatrix::zeros(x.len(), lambda.len());
        let mut lp = lambda.to_vec();
        for j in 0..lambda.len() {
            let h = fd_step(lambda[j], 1.0 / 3.0);
            lp[j] = lambda[j] + h;
            let gp = self.grad_x(x, &lp);
            lp[j] = lambda[j] - h;
            let gm = self.grad_x(x, &lp);
            lp[j] = lambda[j];
            for i in 0..x.len() {
                out[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        out
    }

    /// Theorem entry requires `d = 2n`.
    pub fn require_square_parameters(&self) -> Result<()> {
        if self.d != 2 * self.n {
            return Err(KamError::DimensionMismatch(format!(
                "the solver needs 2n = {} parameters, the family has {}",
                2 * self.n,
                self.d
            )));
        }
        Ok(())
    }
}

/// `J grad_x H(x; lambda)`.
pub fn vector_field(h: &HamiltonianFamily, x: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
    h.check(x, lambda)?;
    let g = h.grad_x(x, lambda);
    let n = h.n();
    Ok((0..2 * n).map(|i| if i < n { g[n + i] } else { -g[i - n] }).collect())
}

/// `d/dlambda grad_x H(x; lambda)`.
pub fn param_coupling(h: &HamiltonianFamily, x: &[f64], lambda: &[f64]) -> Result<DMatrix<f64>> {
    h.check(x, lambda)?;
    Ok(h.dgrad_dlambda(x, lambda))
}

/// How `lambda = (a, b)` enters the built-in families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    /// `a.p + b.q`: constant shifts of the vector field. `<Lambda>` is the
    /// identity on the flat torus.
    #[default]
    Translation,
    /// `a.p + sum_j b_j sin(2 pi q_j)`. The `b` directions average out, so
    /// `<Lambda>` is singular for this coupling.
    Sine,
}

/// Options for [`builtin_family`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilyOptions {
    pub epsilon: f64,
    /// Smoothness class `l` of `finite_smoothness`.
    pub smoothness: u32,
    /// Number of harmonics kept in `finite_smoothness`.
    pub cutoff: usize,
    pub coupling: Coupling,
}

impl Default for FamilyOptions {
    fn default() -> Self {
        Self { epsilon: 0.0, smoothness: 4, cutoff: 4096, coupling: Coupling::Translation }
    }
}

#[derive(Debug, Clone, Copy)]
enum Trig {
    Sin,
    Cos,
}

#[derive(Debug, Clone)]
struct TrigTerm {
    amp: f64,
    k: Vec<i64>,
    kind: Trig,
}

/// `sum_j weights[j-1] cos(2 pi j q)` together with its first two derivatives.
fn cosine_series(q: f64, weights: &[f64]) -> (f64, f64, f64) {
    let (s1, c1) = (TAU * q).sin_cos();
    let (mut s, mut c) = (0.0, 1.0);
    let (mut v, mut d1, mut d2) = (0.0, 0.0, 0.0);
    for (j, &w) in weights.iter().enumerate() {
        let nc = c * c1 - s * s1;
        let ns = s * c1 + c * s1;
        c = nc;
        s = ns;
        let f = TAU * (j + 1) as f64;
        v += w * c;
        d1 -= w * f * s;
        d2 -= w * f * f * c;
    }
    (v, d1, d2)
}

/// `1/2 |p|^2 + coupling + V(q)` with `V` a trigonometric polynomial plus an
/// optional per-axis cosine series.
#[derive(Debug, Clone)]
struct Builtin {
    n: usize,
    coupling: Coupling,
    terms: Vec<TrigTerm>,
    series: Vec<f64>,
}

impl Builtin {
    fn potential(&self, q: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
        let n = self.n;
        let mut v = 0.0;
        let mut g = vec![0.0; n];
        let mut h = DMatrix::zeros(n, n);
        for t in &self.terms {
            let phase: f64 = TAU * t.k.iter().zip(q).map(|(&k, &x)| k as f64 * x).sum::<f64>();
            let (s, c) = phase.sin_cos();
            let (f0, f1, f2) = match t.kind {
                Trig::Sin => (s, c, -s),
                Trig::Cos => (c, -s, -c),
            };
            v += t.amp * f0;
            for i in 0..n {
                let ki = TAU * t.k[i] as f64;
                g[i] += t.amp * ki * f1;
                for j in 0..n {
                    h[(i, j)] += t.amp * ki * TAU * t.k[j] as f64 * f2;
                }
            }
        }
        if !self.series.is_empty() {
            for i in 0..n {
                let (a, b, c) = cosine_series(q[i], &self.series);
                v += a;
                g[i] += b;
                h[(i, i)] += c;
            }
        }
        (v, g, h)
    }
}

impl Evaluator for Builtin {
    fn value(&self, x: &[f64], l: &[f64]) -> f64 {
        let n = self.n;
        let (q, p) = x.split_at(n);
        let (a, b) = l.split_at(n);
        let mut v = 0.5 * p.iter().map(|y| y * y).sum::<f64>();
        v += a.iter().zip(p).map(|(a, p)| a * p).sum::<f64>();
        v += match self.coupling {
            Coupling::Translation => b.iter().zip(q).map(|(b, q)| b * q).sum::<f64>(),
            Coupling::Sine => b.iter().zip(q).map(|(b, q)| b * (TAU * q).sin()).sum::<f64>(),
        };
        v + self.potential(q).0
    }

    fn grad_x(&self, x: &[f64], l: &[f64]) -> Option<Vec<f64>> {
        let n = self.n;
        let (q, p) = x.split_at(n);
        let (a, b) = l.split_at(n);
        let (_, gv, _) = self.potential(q);
        let mut g = vec![0.0; 2 * n];
        for i in 0..n {
            g[i] = gv[i]
                + match self.coupling {
                    Coupling::Translation => b[i],
                    Coupling::Sine => b[i] * TAU * (TAU * q[i]).cos(),
                };
            g[n + i] = p[i] + a[i];
        }
        Some(g)
    }

    fn hess_x(&self, x: &[f64], l: &[f64]) -> Option<DMatrix<f64>> {
        let n = self.n;
        let q = &x[..n];
        let b = &l[n..];
        let (_, _, hv) = self.potential(q);
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] = hv[(i, j)];
            }
            if self.coupling == Coupling::Sine {
                h[(i, i)] -= b[i] * TAU * TAU * (TAU * q[i]).sin();
            }
            h[(n + i, n + i)] = 1.0;
        }
        Some(h)
    }

    fn dgrad_dlambda(&self, x: &[f64], _l: &[f64]) -> Option<DMatrix<f64>> {
        let n = self.n;
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        for j in 0..n {
            m[(n + j, j)] = 1.0;
            m[(j, n + j)] = match self.coupling {
                Coupling::Translation => 1.0,
                Coupling::Sine => TAU * (TAU * x[j]).cos(),
            };
        }
        Some(m)
    }
}

fn builtin_terms(name: &str, n: usize, eps: f64) -> Result<Vec<TrigTerm>> {
    let unit = |i: usize| {
        let mut k = vec![0i64; n];
        k[i] = 1;
        k
    };
    Ok(match name {
        "rotator" | "finite_smoothness" => Vec::new(),
        "forced_rotator" => {
            let mut t: Vec<TrigTerm> = (0..n).map(|i| TrigTerm { amp: eps, k: unit(i), kind: Trig::Sin }).collect();
            if n >= 2 {
                let mut k = vec![0i64; n];
                k[0] = 1;
                k[1] = 1;
                t.push(TrigTerm { amp: eps, k, kind: Trig::Sin });
            }
            t
        }
        "pendulum_family" => (0..n).map(|i| TrigTerm { amp: eps, k: unit(i), kind: Trig::Cos }).collect(),
        other => return Err(KamError::UnknownFamily(other.to_string())),
    })
}

/// Weights `eps j^{-(l + 3/2)}`, `j = 1..=cutoff`.
fn smoothness_weights(l: u32, eps: f64, cutoff: usize) -> Vec<f64> {
    (1..=cutoff).map(|j| eps * (j as f64).powf(-(l as f64 + 1.5))).collect()
}

fn make_builtin(name: &str, n: usize, opts: &FamilyOptions, angle_cutoff: Option<usize>) -> Result<HamiltonianFamily> {
    let mut terms = builtin_terms(name, n, opts.epsilon)?;
    let mut series = if name == "finite_smoothness" {
        smoothness_weights(opts.smoothness, opts.epsilon, opts.cutoff)
    } else {
        Vec::new()
    };
    if let Some(j) = angle_cutoff {
        terms.retain(|t| t.k.iter().all(|k| k.unsigned_abs() as usize <= j));
        series.truncate(j);
    }
    let smoothness = if name == "finite_smoothness" && angle_cutoff.is_none() {
        Smoothness::Finite(opts.smoothness)
    } else {
        Smoothness::Analytic
    };
    let label = match angle_cutoff {
        Some(j) => format!("{name}[J={j}]"),
        None => name.to_string(),
    };
    let eval = Builtin { n, coupling: opts.coupling, terms, series };
    Ok(HamiltonianFamily::new(label, n, 2 * n, Arc::new(eval), smoothness))
}

/// Built-in families, all of the form `1/2 |p|^2 + a.p + (b-coupling) + eps V(q)`:
///
/// * `rotator`: `V = 0`.
/// * `forced_rotator`: `V = sum_j sin(2 pi q_j)`, plus `sin(2 pi (q_1 + q_2))` for `n >= 2`.
/// * `pendulum_family`: `V = sum_j cos(2 pi q_j)`.
/// * `finite_smoothness`: `V = sum_j g(q_j)`, `g(q) = sum_{m<=cutoff} m^{-(l+3/2)} cos(2 pi m q)`,
///   which is `C^l` but not `C^{l+1}` in the limit of a large cutoff.
pub fn builtin_family(name: &str, n: usize, opts: &FamilyOptions) -> Result<HamiltonianFamily> {
    if n == 0 {
        return Err(KamError::DimensionMismatch("n must be positive".into()));
    }
    let fam = make_builtin(name, n, opts, None)?;
    let (name, opts) = (name.to_string(), opts.clone());
    Ok(fam.with_truncator(move |j| make_builtin(&name, n, &opts, Some(j)).expect("known family")))
}

/// Family given by an expression in `q1..qn`, `p1..pn` and parameters
/// `l1..ld` (for `d = 2n` also `a1..an`, `b1..bn`; for `n = 1` also `q`, `p`,
/// `a`, `b`). Derivatives are exact symbolic ones.
#[derive(Debug, Clone)]
struct ExprEval {
    value: Expr,
    grad: Vec<Expr>,
    hess: Vec<Vec<Expr>>,
    dlam: Vec<Vec<Expr>>,
    phase: usize,
}

impl ExprEval {
    fn slots(&self, x: &[f64], l: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(x.len() + l.len());
        v.extend_from_slice(x);
        v.extend_from_slice(l);
        v
    }
}

impl Evaluator for ExprEval {
    fn value(&self, x: &[f64], l: &[f64]) -> f64 {
        self.value.eval(&self.slots(x, l))
    }
    fn grad_x(&self, x: &[f64], l: &[f64]) -> Option<Vec<f64>> {
        let s = self.slots(x, l);
        Some(self.grad.iter().map(|e| e.eval(&s)).collect())
    }
    fn hess_x(&self, x: &[f64], l: &[f64]) -> Option<DMatrix<f64>> {
        let s = self.slots(x, l);
        Some(DMatrix::from_fn(self.phase, self.phase, |i, j| self.hess[i][j].eval(&s)))
    }
    fn dgrad_dlambda(&self, x: &[f64], l: &[f64]) -> Option<DMatrix<f64>> {
        let s = self.slots(x, l);
        let d = l.len();
        Some(DMatrix::from_fn(self.phase, d, |i, j| self.dlam[i][j].eval(&s)))
    }
}

pub fn expression_family(n: usize, d: usize, source: &str, constants: &BTreeMap<String, f64>) -> Result<HamiltonianFamily> {
    let mut scope = Scope { constants: constants.clone(), ..Scope::default() };
    for i in 0..n {
        scope.vars.insert(format!("q{}", i + 1), i);
        scope.vars.insert(format!("p{}", i + 1), n + i);
    }
    for j in 0..d {
        scope.vars.insert(format!("l{}", j + 1), 2 * n + j);
    }
    if d == 2 * n {
        for i in 0..n {
            scope.vars.insert(format!("a{}", i + 1), 2 * n + i);
            scope.vars.insert(format!("b{}", i + 1), 3 * n + i);
        }
    }
    if n == 1 {
        scope.vars.insert("q".into(), 0);
        scope.vars.insert("p".into(), 1);
        if d == 2 {
            scope.vars.insert("a".into(), 2);
            scope.vars.insert("b".into(), 3);
        }
    }
    let value = expr::parse(source, &scope)?;
    let phase = 2 * n;
    let grad: Vec<Expr> = (0..phase).map(|i| value.derivative(i)).collect();
    let hess = grad.iter().map(|g| (0..phase).map(|j| g.derivative(j)).collect()).collect();
    let dlam = grad.iter().map(|g| (0..d).map(|j| g.derivative(phase + j)).collect()).collect();
    let eval = ExprEval { value, grad, hess, dlam, phase };
    Ok(HamiltonianFamily::new("expression", n, d, Arc::new(eval), Smoothness::Analytic))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn opts(eps: f64) -> FamilyOptions {
        FamilyOptions { epsilon: eps, ..FamilyOptions::default() }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1.0)
    }

    fn fd_grad(h: &HamiltonianFamily, x: &[f64], l: &[f64], step: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += step;
                b[i] -= step;
                (h.value(&a, l) - h.value(&b, l)) / (2.0 * step)
            })
            .collect()
    }

    fn families() -> Vec<HamiltonianFamily> {
        let mut out = Vec::new();
        for n in 1..=2 {
            for name in ["rotator", "forced_rotator", "pendulum_family", "finite_smoothness"] {
                for coupling in [Coupling::Translation, Coupling::Sine] {
                    let o = FamilyOptions { epsilon: 0.07, cutoff: 64, coupling, ..FamilyOptions::default() };
                    out.push(builtin_family(name, n, &o).unwrap());
                }
            }
        }
        let src = "0.5*(p1^2 + p2^2) + a1*p1 + a2*p2 + b1*q1 + b2*q2 + eps*cos(2*pi*q1)*sin(2*pi*q2) + 0.1*p1*p2^3";
        let c = BTreeMap::from([("eps".to_string(), 0.05)]);
        out.push(expression_family(2, 4, src, &c).unwrap());
        out.push(HamiltonianFamily::from_fn("closure", 1, 2, Smoothness::Analytic, |x, l| {
            0.5 * x[1] * x[1] + l[0] * x[1] + l[1] * (2.0 * PI * x[0]).sin() + 0.03 * (2.0 * PI * x[0]).cos() * x[1]
        }));
        out
    }

    #[test]
    fn rotator_vector_field() {
        let h = builtin_family("rotator", 1, &opts(0.0)).unwrap();
        assert_eq!(vector_field(&h, &[0.3, 0.7], &[0.0, 0.0]).unwrap(), vec![0.7, 0.0]);
    }

    #[test]
    fn pendulum_vector_field() {
        let h = builtin_family("pendulum_family", 1, &opts(0.1)).unwrap();
        let f = vector_field(&h, &[0.25, 0.0], &[0.0, 0.0]).unwrap();
        assert!(f[0].abs() < 1e-15);
        assert!((f[1] - 0.2 * PI).abs() < 1e-14);
    }

    #[test]
    fn sine_coupling_columns() {
        let o = FamilyOptions { coupling: Coupling::Sine, ..opts(0.0) };
        let h = builtin_family("rotator", 1, &o).unwrap();
        let q = 0.13;
        let m = param_coupling(&h, &[q, 0.4], &[0.2, -0.1]).unwrap();
        assert_eq!(m[(0, 0)], 0.0);
        assert_eq!(m[(1, 0)], 1.0);
        assert!((m[(0, 1)] - TAU * (TAU * q).cos()).abs() < 1e-14);
        assert_eq!(m[(1, 1)], 0.0);
        // value is the fixture formula
        let v = h.value(&[q, 0.4], &[0.2, -0.1]);
        assert!((v - (0.08 + 0.08 - 0.1 * (TAU * q).sin())).abs() < 1e-15);
    }

    #[test]
    fn lambda_independent_family_has_zero_coupling() {
        let h = HamiltonianFamily::from_fn("free", 1, 2, Smoothness::Analytic, |x, _| 0.5 * x[1] * x[1]);
        let m = param_coupling(&h, &[0.1, 0.2], &[0.3, 0.4]).unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn derivatives_agree_with_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for h in families() {
            let phase = h.phase_dim();
            // nested finite differences on value-only families are noisier
            let analytic = h.evaluator().grad_x(&vec![0.0; phase], &vec![0.0; h.param_dim()]).is_some();
            let tol: f64 = if analytic { 1e-6 } else { 1e-4 };
            for _ in 0..20 {
                let x: Vec<f64> = (0..phase).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let l: Vec<f64> = (0..h.param_dim()).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let g = h.grad_x(&x, &l);
                let fd = fd_grad(&h, &x, &l, 1e-5);
                for i in 0..phase {
                    assert!(rel(g[i], fd[i]) < 1e-6, "{}: grad {i}: {} vs {}", h.name, g[i], fd[i]);
                }
                let hs = h.hess_x(&x, &l);
                assert!((&hs - hs.transpose()).amax() < 1e-10, "{}", h.name);
                for j in 0..phase {
                    let mut a = x.clone();
                    let mut b = x.clone();
                    a[j] += 1e-5;
                    b[j] -= 1e-5;
                    let (ga, gb) = (h.grad_x(&a, &l), h.grad_x(&b, &l));
                    for i in 0..phase {
                        let fd = (ga[i] - gb[i]) / 2e-5;
                        assert!(rel(hs[(i, j)], fd) < tol.max(1e-5), "{}: hess ({i},{j}): {} vs {fd}", h.name, hs[(i, j)]);
                    }
                }
                let m = h.dgrad_dlambda(&x, &l);
                for j in 0..l.len() {
                    let mut a = l.clone();
                    let mut b = l.clone();
                    a[j] += 1e-5;
                    b[j] -= 1e-5;
                    let (ga, gb) = (h.grad_x(&x, &a), h.grad_x(&x, &b));
                    for i in 0..phase {
                        let fd = (ga[i] - gb[i]) / 2e-5;
                        assert!(rel(m[(i, j)], fd) < tol, "{}: dlambda ({i},{j})", h.name);
                    }
                }
            }
        }
    }

    #[test]
    fn field_is_tangent_to_energy_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for h in families() {
            for _ in 0..50 {
                let x: Vec<f64> = (0..h.phase_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let l: Vec<f64> = (0..h.param_dim()).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let g = h.grad_x(&x, &l);
                let f = vector_field(&h, &x, &l).unwrap();
                let dot: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-12, "{}: {dot}", h.name);
            }
        }
    }

    #[test]
    fn unknown_family_and_domain_errors() {
        assert!(matches!(builtin_family("duffing", 1, &opts(0.0)), Err(KamError::UnknownFamily(_))));
        let mut h = builtin_family("rotator", 1, &opts(0.0)).unwrap();
        assert!(matches!(vector_field(&h, &[f64::NAN, 0.0], &[0.0, 0.0]), Err(KamError::DomainViolation(_))));
        h.domain = PhaseDomain { p_lower: vec![-1.0], p_upper: vec![1.0] };
        assert!(matches!(vector_field(&h, &[0.0, 2.0], &[0.0, 0.0]), Err(KamError::DomainViolation(_))));
        assert!(matches!(vector_field(&h, &[0.0], &[0.0, 0.0]), Err(KamError::DimensionMismatch(_))));
    }

    #[test]
    fn parameter_domain_checks_the_two_r_ball() {
        let pd = ParameterDomain::around(vec![0.0, 0.0], 0.1, 0.2);
        assert!(pd.validate(0.05).is_ok());
        assert!(pd.validate(0.051).is_err());
        assert!(pd.in_q(&[0.1, -0.1]) && !pd.in_q(&[0.11, 0.0]));
        assert!(pd.in_rect(&[0.2, 0.0]));
    }

    #[test]
    fn angle_truncation_is_exact_beyond_the_cutoff() {
        let o = FamilyOptions { epsilon: 1e-3, cutoff: 32, ..FamilyOptions::default() };
        let h = builtin_family("finite_smoothness", 1, &o).unwrap();
        let t = h.truncate_angles(40).unwrap();
        let t8 = h.truncate_angles(8).unwrap();
        assert_eq!(t.smoothness, Smoothness::Analytic);
        let x = [0.377, 0.2];
        let l = [0.01, -0.02];
        assert_eq!(h.value(&x, &l).to_bits(), t.value(&x, &l).to_bits());
        assert_ne!(h.value(&x, &l), t8.value(&x, &l));
        let f = builtin_family("forced_rotator", 2, &opts(0.1)).unwrap();
        let f0 = f.truncate_angles(0).unwrap();
        let r = builtin_family("rotator", 2, &opts(0.0)).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4];
        let l = [0.0; 4];
        assert_eq!(f0.value(&x, &l), r.value(&x, &l));
    }

    #[test]
    fn finite_smoothness_difference_quotients() {
        // g^(m)(q) as an exact series, then difference quotients at q = 0.
        let l = 4u32;
        let w = smoothness_weights(l, 1.0, 1 << 16);
        let deriv = |m: u32, q: f64| -> f64 {
            w.iter()
                .enumerate()
                .map(|(j, &wj)| {
                    let f = TAU * (j + 1) as f64;
                    let ph = f * q + m as f64 * PI / 2.0;
                    wj * f.powi(m as i32) * ph.cos()
                })
                .sum()
        };
        let quotient = |m: u32, h: f64| (deriv(m, h) - deriv(m, 0.0)).abs() / h;
        // C^4 data: third-derivative quotients stay bounded.
        let c4: Vec<f64> = [1e-2, 1e-3, 1e-4].iter().map(|&h| quotient(3, h)).collect();
        assert!(c4[2] < 2.0 * c4[0], "{c4:?}");
        // C^5 data: fourth-derivative quotients grow like h^{-1/2}.
        let c5: Vec<f64> = [1e-2, 1e-3, 1e-4].iter().map(|&h| quotient(4, h)).collect();
        assert!(c5[1] > 2.0 * c5[0] && c5[2] > 2.0 * c5[1], "{c5:?}");
    }

    #[test]
    fn expression_family_matches_builtin() {
        let e = expression_family(1, 2, "0.5*p^2 + a*p + b*q + eps*cos(2*pi*q)", &BTreeMap::from([("eps".into(), 0.1)])).unwrap();
        let b = builtin_family("pendulum_family", 1, &opts(0.1)).unwrap();
        let x = [0.31, -0.4];
        let l = [0.02, 0.03];
        assert!((e.value(&x, &l) - b.value(&x, &l)).abs() < 1e-14);
        let (ge, gb) = (e.grad_x(&x, &l), b.grad_x(&x, &l));
        assert!((ge[0] - gb[0]).abs() < 1e-13 && (ge[1] - gb[1]).abs() < 1e-14);
        assert!((e.hess_x(&x, &l) - b.hess_x(&x, &l)).amax() < 1e-12);
        assert!((e.dgrad_dlambda(&x, &l) - b.dgrad_dlambda(&x, &l)).amax() < 1e-14);
        assert!(expression_family(1, 2, "0.5*r^2", &BTreeMap::new()).is_err());
    }
}

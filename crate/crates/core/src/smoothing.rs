//! Analytic approximation of a `C^l` Hamiltonian near a torus.
//!
//! The pipeline: a rectangle `E(K0)` holding `B_{3r}(K0)`, a `C^infty`
//! cutoff equal to 1 near the torus and 0 beyond `5r/2`, a ladder of
//! approximants (tensor Bernstein polynomials, angle-spectrum truncations,
//! or the function itself when it is already analytic), `C^k` distances
//! measured by central differences on a fixed sample set, and the selection
//! of a subsequence whose distances decay like `4^{-k (l + 2 sigma)}`.
//!
//! Functions are handled on the joint variable `z = (x, lambda)`.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{KamError, Result};
use crate::fourier::Grid;
use crate::hamiltonian::{Evaluator, HamiltonianFamily, ParameterDomain};
use crate::par::{self, Exec};

/// A scalar function of the joint variable `z = (x, lambda)`.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `z -> H(z[..2n]; z[2n..])`.
pub fn family_fn(h: &HamiltonianFamily) -> ScalarFn {
    let h = h.clone();
    let m = h.phase_dim();
    Arc::new(move |z: &[f64]| h.value(&z[..m], &z[m..]))
}

// ---------------------------------------------------------------------------
// Rectangle

/// Coordinate box `[a_1, b_1] x ... x [a_2n, b_2n]` around the complexified
/// torus, widened by `3r` plus a margin, together with `A(Q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectangleDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub param_lower: Vec<f64>,
    pub param_upper: Vec<f64>,
    pub r: f64,
    pub margin: f64,
    pub rho: f64,
}

impl RectangleDomain {
    pub fn phase_dim(&self) -> usize {
        self.lower.len()
    }

    /// Lower corner of `E x A(Q)`.
    pub fn joint_lower(&self) -> Vec<f64> {
        self.lower.iter().chain(&self.param_lower).copied().collect()
    }

    pub fn joint_upper(&self) -> Vec<f64> {
        self.upper.iter().chain(&self.param_upper).copied().collect()
    }

    pub fn contains_phase(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(i, &v)| v >= self.lower[i] && v <= self.upper[i])
    }

    /// Monte-Carlo containment audit of `B_{3r}(K0)`: draws points within
    /// `3r` (componentwise modulus) of `K0(theta + i y)`, `|y| <= rho`, and
    /// counts those falling outside the rectangle.
    pub fn audit_containment(&self, k0: &Embedding, samples: usize, seed: u64) -> usize {
        let n = k0.n();
        let radius = 3.0 * self.r;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut outside = 0;
        let mut drawn = 0;
        while drawn < samples {
            let theta: Vec<Complex64> =
                (0..n).map(|_| Complex64::new(rng.gen::<f64>(), rng.gen_range(-self.rho..=self.rho))).collect();
            let w = k0.eval(&theta);
            if w.iter().any(|c| c.im.abs() >= radius) {
                continue;
            }
            drawn += 1;
            let z: Vec<f64> = w
                .iter()
                .map(|c| {
                    let reach = (radius * radius - c.im * c.im).sqrt();
                    c.re + rng.gen_range(-1.0..1.0) * reach
                })
                .collect();
            if !self.contains_phase(&z) {
                outside += 1;
            }
        }
        outside
    }
}

/// Samples `K0` on the strip: a real grid in `theta` times imaginary offsets
/// `{-rho, 0, rho}^n`.
fn strip_samples(k0: &Embedding, rho: f64) -> Vec<Vec<Complex64>> {
    let n = k0.n();
    let per_axis = (4 * k0.kmax() + 8).max(16);
    let per_axis = if n == 1 { per_axis } else { per_axis.min(((1e5f64).powf(1.0 / n as f64)) as usize).max(8) };
    // Closed grid `j / per_axis`, `j = 0..=per_axis`, so the lift reaches
    // the far end of the fundamental domain.
    let side = per_axis + 1;
    let offsets = 3usize.pow(n as u32);
    let mut out = Vec::with_capacity(side.pow(n as u32) * offsets);
    for p in 0..side.pow(n as u32) {
        let mut rem = p;
        let t: Vec<f64> = (0..n)
            .map(|_| {
                let j = rem % side;
                rem /= side;
                j as f64 / per_axis as f64
            })
            .collect();
        for o in 0..offsets {
            let mut rem = o;
            let theta: Vec<Complex64> = t
                .iter()
                .map(|&x| {
                    let y = (rem % 3) as f64 - 1.0;
                    rem /= 3;
                    Complex64::new(x, y * rho)
                })
                .collect();
            out.push(k0.eval(&theta));
        }
    }
    out
}

/// Per coordinate: `[min(Re - |Im|) - 3r - r/10, max(Re + |Im|) + 3r + r/10]`
/// over the strip samples of `K0`.
pub fn build_rectangle(k0: &Embedding, rho: f64, r: f64, params: &ParameterDomain) -> RectangleDomain {
    assert!(r > 0.0 && rho >= 0.0);
    let m = 2 * k0.n();
    let margin = r / 10.0;
    let mut lower = vec![f64::INFINITY; m];
    let mut upper = vec![f64::NEG_INFINITY; m];
    for w in strip_samples(k0, rho) {
        for i in 0..m {
            lower[i] = lower[i].min(w[i].re - w[i].im.abs());
            upper[i] = upper[i].max(w[i].re + w[i].im.abs());
        }
    }
    for i in 0..m {
        lower[i] -= 3.0 * r + margin;
        upper[i] += 3.0 * r + margin;
    }
    RectangleDomain {
        lower,
        upper,
        param_lower: params.rect_lower.clone(),
        param_upper: params.rect_upper.clone(),
        r,
        margin,
        rho,
    }
}

// ---------------------------------------------------------------------------
// Cutoff

/// `s(t) = h(t) / (h(t) + h(1 - t))`, `h(t) = exp(-1/t)` for `t > 0`: a
/// `C^infty` step, exactly 0 for `t <= 0` and exactly 1 for `t >= 1`.
pub fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / t).exp();
    let b = (-1.0 / (1.0 - t)).exp();
    a / (a + b)
}

/// `psi(x) = s((outer - g(x)) / (outer - inner))` where `g` is the distance
/// from `p` to the torus graph over the anchor angle `theta*(q)` solving
/// `q = theta* + P_q(theta*)`.
///
/// `g` uses the smooth `l^8` norm. The inner radius is chosen so that every
/// point within max-norm distance `2r` of the real torus has `g <= inner`,
/// which makes `psi` exactly 1 on `B_{2r}(K0)`; `outer = 5r/2` makes it
/// exactly 0 wherever the distance is at least `5r/2`.
#[derive(Debug, Clone)]
pub struct CutoffFunction {
    torus: Embedding,
    pub r: f64,
    pub inner: f64,
    pub outer: f64,
    /// Lipschitz majorants of the periodic parts of `K0_q` and `K0_p`.
    pub lip_q: f64,
    pub lip_p: f64,
}

impl CutoffFunction {
    pub fn torus(&self) -> &Embedding {
        &self.torus
    }

    /// `theta*(q)` by fixed-point iteration (a contraction since `lip_q < 1`).
    pub fn anchor(&self, q: &[f64]) -> Vec<f64> {
        let n = self.torus.n();
        let pq = self.torus.periodic().components(0..n);
        let mut theta = q.to_vec();
        for _ in 0..200 {
            let shift = pq.eval_real(&theta);
            let next: Vec<f64> = q.iter().zip(&shift).map(|(a, b)| a - b).collect();
            let change = next.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            theta = next;
            if change <= 4.0 * f64::EPSILON * q.iter().fold(1.0f64, |m, v| m.max(v.abs())) {
                break;
            }
        }
        theta
    }

    /// Graph distance `g(x)`.
    pub fn graph_distance(&self, x: &[f64]) -> f64 {
        let n = self.torus.n();
        let theta = self.anchor(&x[..n]);
        let pp = self.torus.periodic().components(n..2 * n).eval_real(&theta);
        let diffs: Vec<f64> = (0..n).map(|i| (x[n + i] - pp[i]).abs()).collect();
        if n == 1 {
            return diffs[0];
        }
        let scale = diffs.iter().fold(0.0f64, |m, v| m.max(*v));
        if scale == 0.0 {
            return 0.0;
        }
        scale * diffs.iter().map(|d| (d / scale).powi(8)).sum::<f64>().powf(0.125)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let g = self.graph_distance(x);
        if g <= self.inner {
            1.0
        } else if g >= self.outer {
            0.0
        } else {
            smooth_step((self.outer - g) / (self.outer - self.inner))
        }
    }
}

/// Builds the cutoff around the real torus `K0(T^n)`.
///
/// Fails when the torus is too tilted for the inner radius to stay below
/// `5r/2` (`lip_q >= 1` or `2r n^{1/8} (1 + lip_p / (1 - lip_q)) >= 5r/2`).
pub fn build_cutoff(k0: &Embedding, r: f64) -> Result<CutoffFunction> {
    assert!(r > 0.0);
    let n = k0.n();
    let jac = k0.periodic().jacobian();
    // Row-sum majorants from the coefficient sums of each entry.
    let row_sum = |rows: std::ops::Range<usize>| {
        rows.map(|i| (0..n).map(|j| jac.components(i * n + j..i * n + j + 1).norm(0.0)).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let lip_q = row_sum(0..n);
    let lip_p = row_sum(n..2 * n);
    if lip_q >= 1.0 {
        return Err(KamError::DomainViolation(format!("torus angle map is not invertible (Lipschitz {lip_q})")));
    }
    let inner = 2.0 * r * (n as f64).powf(0.125) * (1.0 + lip_p / (1.0 - lip_q));
    let outer = 2.5 * r;
    if inner >= outer {
        return Err(KamError::DomainViolation(format!(
            "cutoff inner radius {inner:e} does not fit below 5r/2 = {outer:e}"
        )));
    }
    Ok(CutoffFunction { torus: k0.clone(), r, inner, outer, lip_q, lip_p })
}

struct Localized {
    base: HamiltonianFamily,
    psi: CutoffFunction,
}

impl Localized {
    /// `Some(true)` inside the plateau, `Some(false)` beyond the outer radius.
    fn region(&self, x: &[f64]) -> Option<bool> {
        let g = self.psi.graph_distance(x);
        if g < self.psi.inner {
            Some(true)
        } else if g > self.psi.outer {
            Some(false)
        } else {
            None
        }
    }
}

impl Evaluator for Localized {
    fn value(&self, x: &[f64], l: &[f64]) -> f64 {
        let s = self.psi.value(x);
        if s == 0.0 {
            // The cutoff kills whatever the formula does out here.
            0.0
        } else if s == 1.0 {
            self.base.value(x, l)
        } else {
            s * self.base.value(x, l)
        }
    }

    fn grad_x(&self, x: &[f64], l: &[f64]) -> Option<Vec<f64>> {
        match self.region(x)? {
            true => Some(self.base.grad_x(x, l)),
            false => Some(vec![0.0; x.len()]),
        }
    }

    fn hess_x(&self, x: &[f64], l: &[f64]) -> Option<nalgebra::DMatrix<f64>> {
        match self.region(x)? {
            true => Some(self.base.hess_x(x, l)),
            false => Some(nalgebra::DMatrix::zeros(x.len(), x.len())),
        }
    }

    fn dgrad_dlambda(&self, x: &[f64], l: &[f64]) -> Option<nalgebra::DMatrix<f64>> {
        match self.region(x)? {
            true => Some(self.base.dgrad_dlambda(x, l)),
            false => Some(nalgebra::DMatrix::zeros(x.len(), l.len())),
        }
    }
}

/// `H psi` on `E x A(Q)`. Where `psi = 1` the value is `H`'s own, bit for bit.
pub fn localize(h: &HamiltonianFamily, psi: &CutoffFunction, rect: &RectangleDomain) -> HamiltonianFamily {
    let eval = Localized { base: h.clone(), psi: psi.clone() };
    let mut params = h.param_domain.clone();
    params.rect_lower = rect.param_lower.clone();
    params.rect_upper = rect.param_upper.clone();
    HamiltonianFamily::new(format!("{}*psi", h.name), h.n(), h.param_dim(), Arc::new(eval), h.smoothness)
        .with_param_domain(params)
}

// ---------------------------------------------------------------------------
// Bernstein approximants

/// Limits on the tensor Bernstein construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BernsteinCaps {
    /// Largest degree along any axis.
    pub degree_cap: usize,
    /// Largest number of nodes `prod (m_i + 1)`.
    pub node_cap: usize,
}

impl Default for BernsteinCaps {
    fn default() -> Self {
        Self { degree_cap: 1 << 14, node_cap: 1 << 22 }
    }
}

/// `B_m[f](z) = sum_i f(node_i) prod_j b_{m_j, i_j}(t_j)` over the affinely
/// normalized box, `t_j = (z_j - a_j) / (b_j - a_j)`. Evaluation clamps `t`
/// to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct BernsteinPolynomial {
    lower: Vec<f64>,
    upper: Vec<f64>,
    degrees: Vec<usize>,
    nodes: Vec<f64>,
    log_fact: Vec<f64>,
}

/// Binomial weights `b_{m,i}(t)` that are not negligible, centred on the
/// mode and computed from log-factorials, normalized to sum to one.
fn axis_weights(m: usize, t: f64, log_fact: &[f64]) -> (usize, Vec<f64>) {
    let t = t.clamp(0.0, 1.0);
    if t == 0.0 {
        return (0, vec![1.0]);
    }
    if t == 1.0 {
        return (m, vec![1.0]);
    }
    let mode = (((m + 1) as f64 * t).floor() as usize).min(m);
    let spread = ((m as f64 * t * (1.0 - t)).sqrt() * 12.0 + 12.0).ceil() as usize;
    let lo = mode.saturating_sub(spread);
    let hi = (mode + spread).min(m);
    let (lt, ls) = (t.ln(), (1.0 - t).ln());
    let lm = log_fact[m];
    let mut w: Vec<f64> = (lo..=hi)
        .map(|i| (lm - log_fact[i] - log_fact[m - i] + i as f64 * lt + (m - i) as f64 * ls).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    (lo, w)
}

impl BernsteinPolynomial {
    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn dim(&self) -> usize {
        self.degrees.len()
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        let d = self.dim();
        let axes: Vec<(usize, Vec<f64>)> = (0..d)
            .map(|j| {
                let t = (z[j] - self.lower[j]) / (self.upper[j] - self.lower[j]);
                axis_weights(self.degrees[j], t, &self.log_fact)
            })
            .collect();
        let mut strides = vec![1usize; d];
        for j in (0..d.saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * (self.degrees[j + 1] + 1);
        }
        // Odometer over the tensor window, last axis fastest.
        let mut idx = vec![0usize; d];
        let mut total = 0.0;
        loop {
            let mut w = 1.0;
            let mut flat = 0;
            for j in 0..d {
                w *= axes[j].1[idx[j]];
                flat += (axes[j].0 + idx[j]) * strides[j];
            }
            total += w * self.nodes[flat];
            let mut j = d;
            loop {
                if j == 0 {
                    return total;
                }
                j -= 1;
                idx[j] += 1;
                if idx[j] < axes[j].1.len() {
                    break;
                }
                idx[j] = 0;
            }
        }
    }

    pub fn into_fn(self) -> ScalarFn {
        let p = Arc::new(self);
        Arc::new(move |z: &[f64]| p.eval(z))
    }
}

/// Tensor-product Bernstein operator of `f` over `[lower, upper]` with the
/// given per-axis degrees. Nodes are evaluated under `exec`.
pub fn bernstein_approximant(
    f: &ScalarFn,
    lower: &[f64],
    upper: &[f64],
    degrees: &[usize],
    caps: BernsteinCaps,
    exec: Exec,
) -> Result<BernsteinPolynomial> {
    assert_eq!(lower.len(), degrees.len());
    assert_eq!(upper.len(), degrees.len());
    let top = degrees.iter().copied().max().unwrap_or(1);
    if degrees.contains(&0) {
        return Err(KamError::DegreeOverflow { degree: 0, cap: caps.degree_cap });
    }
    if top > caps.degree_cap {
        return Err(KamError::DegreeOverflow { degree: top, cap: caps.degree_cap });
    }
    let count = degrees.iter().try_fold(1usize, |acc, &m| acc.checked_mul(m + 1)).unwrap_or(usize::MAX);
    if count > caps.node_cap {
        return Err(KamError::DegreeOverflow { degree: top, cap: caps.degree_cap });
    }
    let d = degrees.len();
    let nodes = par::map_range(exec, count, |flat| {
        let mut z = vec![0.0; d];
        let mut rem = flat;
        for j in (0..d).rev() {
            let i = rem % (degrees[j] + 1);
            rem /= degrees[j] + 1;
            z[j] = lower[j] + (upper[j] - lower[j]) * i as f64 / degrees[j] as f64;
        }
        f(&z)
    });
    let mut log_fact = Vec::with_capacity(top + 1);
    let mut acc = 0.0;
    log_fact.push(0.0);
    for i in 1..=top {
        acc += (i as f64).ln();
        log_fact.push(acc);
    }
    Ok(BernsteinPolynomial { lower: lower.to_vec(), upper: upper.to_vec(), degrees: degrees.to_vec(), nodes, log_fact })
}

// ---------------------------------------------------------------------------
// Measured C^k distances

/// Points at which `C^k` quantities are sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
}

impl SampleSet {
    /// Cell-centred tensor grid with `per_axis` points on
    /// `[lower + inset, upper - inset]`.
    pub fn grid(lower: &[f64], upper: &[f64], per_axis: usize, inset: f64) -> Self {
        let d = lower.len();
        let total = per_axis.pow(d as u32);
        let points = (0..total)
            .map(|flat| {
                let mut rem = flat;
                let mut z = vec![0.0; d];
                for j in (0..d).rev() {
                    let i = rem % per_axis;
                    rem /= per_axis;
                    let (a, b) = (lower[j] + inset, upper[j] - inset);
                    z[j] = a + (b - a) * (i as f64 + 0.5) / per_axis as f64;
                }
                z
            })
            .collect();
        Self { dim: d, points }
    }

    /// Samples of `B_radius(K) x P` for a parameter box `P`: `K` on a
    /// `per_axis^n` angle grid, shifted by the centre and the max-norm
    /// extremes of the ball (all corners when `2n <= 2`, otherwise the axis
    /// points and the two diagonal corners), crossed with the box centre and
    /// its corners (its axis extremes when `d > 2`).
    pub fn tube(k: &Embedding, radius: f64, param_lower: &[f64], param_upper: &[f64], per_axis: usize) -> Self {
        let n = k.n();
        let m = 2 * n;
        let d = param_lower.len();
        let mut offsets: Vec<Vec<f64>> = Vec::new();
        if m <= 2 {
            for o in 0..3usize.pow(m as u32) {
                let mut rem = o;
                offsets.push(
                    (0..m)
                        .map(|_| {
                            let s = (rem % 3) as f64 - 1.0;
                            rem /= 3;
                            s * radius
                        })
                        .collect(),
                );
            }
        } else {
            offsets.push(vec![0.0; m]);
            for i in 0..m {
                for s in [-1.0, 1.0] {
                    let mut v = vec![0.0; m];
                    v[i] = s * radius;
                    offsets.push(v);
                }
            }
            offsets.push(vec![radius; m]);
            offsets.push(vec![-radius; m]);
        }
        let centre: Vec<f64> = param_lower.iter().zip(param_upper).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut params = vec![centre.clone()];
        if d <= 2 {
            for c in 0..(1usize << d) {
                params.push((0..d).map(|j| if c >> j & 1 == 1 { param_upper[j] } else { param_lower[j] }).collect());
            }
        } else {
            for j in 0..d {
                for bound in [param_lower[j], param_upper[j]] {
                    let mut v = centre.clone();
                    v[j] = bound;
                    params.push(v);
                }
            }
        }
        let grid = Grid::new(n, per_axis);
        let mut points = Vec::with_capacity(grid.len() * offsets.len() * params.len());
        for p in 0..grid.len() {
            let x = k.eval_real(&grid.point(p));
            for o in &offsets {
                for l in &params {
                    let mut z: Vec<f64> = x.iter().zip(o).map(|(a, b)| a + b).collect();
                    z.extend_from_slice(l);
                    points.push(z);
                }
            }
        }
        Self { dim: m + d, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Order, base step and execution policy of the finite-difference `C^k`
/// measurements. Partial derivatives of total order `j` use the absolute
/// step `fd_step * 10^(j-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CkOptions {
    pub order: usize,
    pub fd_step: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for CkOptions {
    fn default() -> Self {
        Self { order: 3, fd_step: 1e-4, exec: Exec::default() }
    }
}

impl CkOptions {
    pub fn step(&self, order: usize) -> f64 {
        if order == 0 {
            0.0
        } else {
            self.fd_step * 10f64.powi(order as i32 - 1)
        }
    }
}

/// Central stencil `(offset, weight)` for the `k`-th derivative at unit step.
fn stencil(k: usize) -> &'static [(i32, f64)] {
    match k {
        0 => &[(0, 1.0)],
        1 => &[(-1, -0.5), (1, 0.5)],
        2 => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        3 => &[(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
        4 => &[(-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0)],
        _ => panic!("finite-difference stencils go up to order 4"),
    }
}

/// Multi-indices `alpha` in `N^dim` with `|alpha| <= order`, graded.
pub fn multi_indices_upto(dim: usize, order: usize) -> Vec<Vec<usize>> {
    fn rec(dim: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == dim {
            if left == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        for a in (0..=left).rev() {
            prefix.push(a);
            rec(dim, left - a, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=order {
        rec(dim, total, &mut Vec::new(), &mut out);
    }
    out
}

fn partial(f: &ScalarFn, z: &[f64], alpha: &[usize], h: f64) -> f64 {
    let total: usize = alpha.iter().sum();
    if total == 0 {
        return f(z);
    }
    let axes: Vec<(usize, &[(i32, f64)])> =
        alpha.iter().enumerate().filter(|(_, &a)| a > 0).map(|(j, &a)| (j, stencil(a))).collect();
    let mut idx = vec![0usize; axes.len()];
    let mut zp = z.to_vec();
    let mut sum = 0.0;
    loop {
        let mut w = 1.0;
        for (slot, (j, st)) in axes.iter().enumerate() {
            let (off, wt) = st[idx[slot]];
            w *= wt;
            zp[*j] = z[*j] + off as f64 * h;
        }
        sum += w * f(&zp);
        let mut s = axes.len();
        loop {
            if s == 0 {
                return sum / h.powi(total as i32);
            }
            s -= 1;
            idx[s] += 1;
            if idx[s] < axes[s].1.len() {
                break;
            }
            idx[s] = 0;
        }
    }
}

/// All partials of order `<= opts.order` at every sample, point-major.
pub fn ck_table(f: &ScalarFn, samples: &SampleSet, opts: &CkOptions) -> Vec<f64> {
    let alphas = multi_indices_upto(samples.dim, opts.order);
    let rows = par::map_range(opts.exec, samples.len(), |p| {
        let z = &samples.points[p];
        alphas.iter().map(|a| partial(f, z, a, opts.step(a.iter().sum()))).collect::<Vec<f64>>()
    });
    rows.into_iter().flatten().collect()
}

/// `max |a - b|` between two tables of the same layout.
pub fn table_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Measured `|f - g|_{C^k}`: the largest central-difference estimate of any
/// partial of `f - g` of order `<= k` over the samples.
pub fn measure_ck_distance(f: &ScalarFn, g: &ScalarFn, samples: &SampleSet, opts: &CkOptions) -> f64 {
    let (f, g) = (f.clone(), g.clone());
    let diff: ScalarFn = Arc::new(move |z: &[f64]| f(z) - g(z));
    ck_norm(&diff, samples, opts)
}

/// Measured `|f|_{C^k}`.
pub fn ck_norm(f: &ScalarFn, samples: &SampleSet, opts: &CkOptions) -> f64 {
    ck_table(f, samples, opts).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

// ---------------------------------------------------------------------------
// Approximant ladders and subsequence selection

/// How approximants are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Tensor Bernstein polynomials of growing degree on the rectangle.
    #[default]
    Bernstein,
    /// Angle-spectrum truncations `H^{(J)}` of growing cutoff `J`.
    Spectral,
    /// The target itself (already analytic).
    Identity,
}

/// One rung of a ladder.
#[derive(Clone)]
pub struct Candidate {
    pub level: usize,
    pub func: ScalarFn,
    pub family: Option<HamiltonianFamily>,
}

type Maker = Arc<dyn Fn(usize) -> Result<Candidate> + Send + Sync>;

/// Increasing resolution levels and the constructor for each.
#[derive(Clone)]
pub struct Ladder {
    pub backend: Backend,
    pub levels: Vec<usize>,
    make: Maker,
}

fn doubling(first: usize, cap: usize) -> Vec<usize> {
    let mut v = vec![first];
    let mut m = first.max(1);
    if first == 0 {
        v.push(1);
    }
    while m * 2 <= cap {
        m *= 2;
        v.push(m);
    }
    v.retain(|&x| x <= cap);
    v
}

impl Ladder {
    pub fn new(backend: Backend, levels: Vec<usize>, make: impl Fn(usize) -> Result<Candidate> + Send + Sync + 'static) -> Self {
        Self { backend, levels, make: Arc::new(make) }
    }

    pub fn build(&self, level: usize) -> Result<Candidate> {
        (self.make)(level)
    }

    /// Degrees `1, 2, 4, ..., cap` on every axis not flagged affine; affine
    /// axes keep degree 1, which reproduces them exactly.
    pub fn bernstein(
        f: ScalarFn,
        lower: Vec<f64>,
        upper: Vec<f64>,
        affine: Vec<bool>,
        caps: BernsteinCaps,
        exec: Exec,
        family_dims: Option<(usize, usize)>,
    ) -> Self {
        let levels = doubling(1, caps.degree_cap);
        Self::new(Backend::Bernstein, levels, move |m| {
            let degrees: Vec<usize> = affine.iter().map(|&a| if a { 1 } else { m }).collect();
            let poly = bernstein_approximant(&f, &lower, &upper, &degrees, caps, exec)?;
            let func = poly.into_fn();
            let family = family_dims.map(|(n, d)| {
                let g = func.clone();
                HamiltonianFamily::from_fn(format!("bernstein[m={m}]"), n, d, crate::hamiltonian::Smoothness::Analytic, move |x, l| {
                    let mut z = x.to_vec();
                    z.extend_from_slice(l);
                    g(&z)
                })
            });
            Ok(Candidate { level: m, func, family })
        })
    }

    /// Cutoffs `0, 1, 2, 4, ..., cap` of the family's angle spectrum.
    pub fn spectral(h: &HamiltonianFamily, cap: usize) -> Result<Self> {
        if !h.has_angle_spectrum() {
            return Err(KamError::ApproximantExhausted(format!("family `{}` exposes no angle spectrum", h.name)));
        }
        let h = h.clone();
        Ok(Self::new(Backend::Spectral, doubling(0, cap), move |j| {
            let t = h.truncate_angles(j).expect("family has a truncator");
            Ok(Candidate { level: j, func: family_fn(&t), family: Some(t) })
        }))
    }

    /// The target itself at level 0.
    pub fn identity(h: &HamiltonianFamily) -> Self {
        let h = h.clone();
        Self::new(Backend::Identity, vec![0], move |_| Ok(Candidate { level: 0, func: family_fn(&h), family: Some(h.clone()) }))
    }
}

/// Options of [`select_subsequence`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionOptions {
    /// Smoothness class `l` of the target.
    pub l: f64,
    pub sigma: f64,
    /// `||e_0||_rho`, used by the `k0` rule.
    pub e0_norm: f64,
    /// Number of elements to produce.
    pub max_len: usize,
    pub ck: CkOptions,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self { l: 4.0, sigma: 1.0, e0_norm: 0.0, max_len: 12, ck: CkOptions::default() }
    }
}

/// One retained element `H^k`.
#[derive(Clone)]
pub struct Approximant {
    pub k: usize,
    pub level: usize,
    /// Measured `|H^k - H|_{C^3}`.
    pub distance: f64,
    /// `A 4^{-k (l + 2 sigma)}`.
    pub threshold: f64,
    pub func: ScalarFn,
    pub family: Option<HamiltonianFamily>,
}

/// What happened at each examined `(k, level)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub k: usize,
    pub level: usize,
    pub measured_distance: f64,
    pub threshold: f64,
    pub accepted: bool,
}

/// Where the ladder ran out before reaching a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stall {
    pub k: usize,
    pub level: usize,
    pub achieved: f64,
    pub threshold: f64,
}

#[derive(Clone)]
pub struct ApproximantSequence {
    pub backend: Backend,
    pub elements: Vec<Approximant>,
    /// Calibrated decay constant `A = 2 d_1 4^{l + 2 sigma}`.
    pub a: f64,
    /// `l + 2 sigma`.
    pub exponent: f64,
    pub k0: usize,
    pub records: Vec<SelectionRecord>,
    /// Re-measured `|H^k - H^{k+1}|_{C^3}` for consecutive retained elements.
    pub consecutive: Vec<f64>,
    /// Whether every consecutive distance satisfies `<= A 4^{-k(l+2 sigma)}`.
    pub envelope_holds: bool,
    pub stall: Option<Stall>,
}

impl ApproximantSequence {
    pub fn threshold(&self, k: usize) -> f64 {
        self.a * 4f64.powf(-(k as f64) * self.exponent)
    }

    /// Turns a stall into [`KamError::Stagnation`].
    pub fn strict(self) -> Result<Self> {
        match &self.stall {
            Some(s) => Err(KamError::Stagnation { level: s.level, achieved: s.achieved, threshold: s.threshold }),
            None => Ok(self),
        }
    }
}

/// Walks the ladder and keeps, for `k = 1, 2, ...`, the first rung (at or
/// after the previous one) whose measured `C^3` distance to the target is
/// at most half of `A 4^{-k (l + 2 sigma)}`. `A` is calibrated from the
/// coarsest rung so that it qualifies for `k = 1`. Both inequalities then
/// hold by the triangle inequality; the consecutive distances are
/// re-measured afterwards. `k0` is the smallest `k >= 2` with
/// `A 4^{-(k-1)(l + 2 sigma)} <= ||e_0||`.
pub fn select_subsequence(
    target: &ScalarFn,
    ladder: &Ladder,
    samples: &SampleSet,
    opts: &SelectionOptions,
) -> Result<ApproximantSequence> {
    assert!(!ladder.levels.is_empty());
    let exponent = opts.l + 2.0 * opts.sigma;
    let decay = 4f64.powf(-exponent);
    let target_table = ck_table(target, samples, &opts.ck);
    let mut cache: Vec<Option<(Candidate, Vec<f64>, f64)>> = vec![None; ladder.levels.len()];
    let mut measure = |i: usize| -> Result<(Candidate, Vec<f64>, f64)> {
        if let Some(hit) = &cache[i] {
            return Ok(hit.clone());
        }
        let c = ladder.build(ladder.levels[i])?;
        let table = ck_table(&c.func, samples, &opts.ck);
        let dist = table_distance(&table, &target_table);
        cache[i] = Some((c.clone(), table.clone(), dist));
        Ok((c, table, dist))
    };

    let (c1, t1, d1) = measure(0)?;
    let a = 2.0 * d1 / decay;
    let mut records = vec![SelectionRecord { k: 1, level: c1.level, measured_distance: d1, threshold: 2.0 * d1, accepted: true }];
    let mut elements = vec![Approximant {
        k: 1,
        level: c1.level,
        distance: d1,
        threshold: a * decay,
        func: c1.func.clone(),
        family: c1.family.clone(),
    }];
    let mut tables = vec![t1];
    let mut idx = 0;
    let mut stall = None;
    'outer: for k in 2..=opts.max_len.max(1) {
        let threshold = a * decay.powi(k as i32);
        for i in idx..ladder.levels.len() {
            let (c, table, dist) = match measure(i) {
                Ok(v) => v,
                // Running past what the backend can build ends the ladder.
                Err(KamError::DegreeOverflow { .. }) => break,
                Err(e) => return Err(e),
            };
            let accepted = dist <= 0.5 * threshold;
            if i != idx || accepted {
                records.push(SelectionRecord { k, level: c.level, measured_distance: dist, threshold, accepted });
            }
            if accepted {
                idx = i;
                elements.push(Approximant { k, level: c.level, distance: dist, threshold, func: c.func, family: c.family });
                tables.push(table);
                continue 'outer;
            }
        }
        let last = cache.iter().rev().flatten().next().map(|(c, _, d)| (c.level, *d)).unwrap_or((c1.level, d1));
        stall = Some(Stall { k, level: last.0, achieved: last.1, threshold });
        break;
    }

    let consecutive: Vec<f64> = tables.windows(2).map(|w| table_distance(&w[0], &w[1])).collect();
    let envelope_holds = consecutive.iter().enumerate().all(|(i, &d)| d <= a * decay.powi(i as i32 + 1));
    let mut k0 = 2;
    while a * decay.powi(k0 as i32 - 1) > opts.e0_norm && k0 < 10_000 {
        k0 += 1;
    }
    Ok(ApproximantSequence {
        backend: ladder.backend,
        elements,
        a,
        exponent,
        k0,
        records,
        consecutive,
        envelope_holds,
        stall,
    })
}

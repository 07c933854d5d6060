//! Truncated Fourier series on the n-torus.
//!
//! A [`FourierMap`] is a real-valued periodic map `T^n -> R^m` stored by its
//! complex coefficients `c_k`, `|k|_1 <= kmax`, with the basis
//! `exp(2 pi i k.theta)`. Nonlinear operations go through a uniform [`Grid`]:
//! synthesize, act pointwise, analyze back and re-truncate.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{KamError, Result};

const TWO_PI: f64 = 2.0 * PI;

/// All multi-indices `k` in `Z^n` with `|k|_1 <= kmax`, in lexicographic order.
pub fn multi_indices(n: usize, kmax: usize) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let mut cur = vec![0i64; n];
    fn rec(i: usize, budget: i64, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
        if i == cur.len() {
            out.push(cur.clone());
            return;
        }
        for v in -budget..=budget {
            cur[i] = v;
            rec(i + 1, budget - v.abs(), cur, out);
        }
        cur[i] = 0;
    }
    rec(0, kmax as i64, &mut cur, &mut out);
    out
}

pub fn l1(k: &[i64]) -> i64 {
    k.iter().map(|v| v.abs()).sum()
}

/// Lexicographically non-negative: zero, or first nonzero entry positive.
pub fn lex_nonneg(k: &[i64]) -> bool {
    k.iter().find(|&&v| v != 0).is_none_or(|&v| v > 0)
}

/// Strip-norm value `||f||_rho` (coefficient majorant).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StripNormValue {
    pub rho: f64,
    pub value: f64,
}

/// Options for [`FourierMap::solve_small_divisor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallDivisorOptions {
    /// Allowed magnitude of the k = 0 coefficient.
    pub average_tol: f64,
    /// Smallest admissible `|k.omega|`; `None` means `1e-14 * |omega|`.
    pub divisor_floor: Option<f64>,
}

impl Default for SmallDivisorOptions {
    fn default() -> Self {
        Self { average_tol: 1e-10, divisor_floor: None }
    }
}

/// Truncated Fourier representation of a real periodic map `T^n -> R^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierMap {
    n: usize,
    m: usize,
    kmax: usize,
    /// Dense storage over the box `[-kmax, kmax]^n`, `m` entries per mode.
    coeffs: Vec<Complex64>,
}

impl FourierMap {
    pub fn zeros(n: usize, m: usize, kmax: usize) -> Self {
        assert!(n >= 1 && m >= 1, "torus and target dimensions must be positive");
        let side = 2 * kmax + 1;
        Self { n, m, kmax, coeffs: vec![Complex64::new(0.0, 0.0); side.pow(n as u32) * m] }
    }

    pub fn constant(n: usize, kmax: usize, value: &[f64]) -> Self {
        let mut map = Self::zeros(n, value.len(), kmax);
        let zero = vec![0i64; n];
        let c: Vec<Complex64> = value.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        map.set_mode(&zero, &c);
        map
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn kmax(&self) -> usize {
        self.kmax
    }

    fn slot(&self, k: &[i64]) -> Option<usize> {
        if k.len() != self.n || l1(k) > self.kmax as i64 {
            return None;
        }
        let side = (2 * self.kmax + 1) as i64;
        let mut idx = 0i64;
        for &ki in k {
            idx = idx * side + (ki + self.kmax as i64);
        }
        Some(idx as usize * self.m)
    }

    /// Coefficient vector of mode `k` (zeros outside the truncation).
    pub fn coeff(&self, k: &[i64]) -> Vec<Complex64> {
        match self.slot(k) {
            Some(s) => self.coeffs[s..s + self.m].to_vec(),
            None => vec![Complex64::new(0.0, 0.0); self.m],
        }
    }

    fn coeff_slice(&self, k: &[i64]) -> &[Complex64] {
        let s = self.slot(k).expect("mode inside truncation");
        &self.coeffs[s..s + self.m]
    }

    /// Sets `c_k = c` and `c_{-k} = conj(c)`; for `k = 0` only the real part is kept.
    pub fn set_mode(&mut self, k: &[i64], c: &[Complex64]) {
        assert_eq!(c.len(), self.m);
        let s = self.slot(k).expect("mode outside truncation");
        let neg: Vec<i64> = k.iter().map(|v| -v).collect();
        let sn = self.slot(&neg).unwrap();
        for i in 0..self.m {
            if s == sn {
                self.coeffs[s + i] = Complex64::new(c[i].re, 0.0);
            } else {
                self.coeffs[s + i] = c[i];
                self.coeffs[sn + i] = c[i].conj();
            }
        }
    }

    /// Raw setter without the reality mirror (used by readers).
    fn set_raw(&mut self, k: &[i64], c: &[Complex64]) {
        let s = self.slot(k).expect("mode outside truncation");
        self.coeffs[s..s + self.m].copy_from_slice(c);
    }

    /// Stored multi-indices, lexicographic.
    pub fn modes(&self) -> Vec<Vec<i64>> {
        multi_indices(self.n, self.kmax)
    }

    /// `sum_k c_k exp(2 pi i k.theta)` at a complex point.
    pub fn eval(&self, theta: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(theta.len(), self.n);
        let mut out = vec![Complex64::new(0.0, 0.0); self.m];
        for k in self.modes() {
            let c = self.coeff_slice(&k);
            if c.iter().all(|z| z.norm_sqr() == 0.0) {
                continue;
            }
            let phase: Complex64 = k.iter().zip(theta).map(|(&ki, &t)| t * ki as f64).sum();
            let basis = (Complex64::i() * TWO_PI * phase).exp();
            for (o, ci) in out.iter_mut().zip(c) {
                *o += ci * basis;
            }
        }
        out
    }

    /// Real part of [`eval`](Self::eval) at a real point.
    pub fn eval_real(&self, theta: &[f64]) -> Vec<f64> {
        let t: Vec<Complex64> = theta.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.eval(&t).into_iter().map(|z| z.re).collect()
    }

    /// Coefficient majorant `sum_k |c_k|_inf exp(2 pi rho |k|_1)`.
    pub fn strip_norm(&self, rho: f64) -> Result<StripNormValue> {
        assert!(rho >= 0.0, "strip width must be non-negative");
        let mut total = 0.0;
        for k in self.modes() {
            let c = self.coeff_slice(&k);
            let cmax = c.iter().map(|z| z.norm()).fold(0.0, f64::max);
            if cmax > 0.0 {
                total += cmax * (TWO_PI * rho * l1(&k) as f64).exp();
            }
        }
        if !total.is_finite() {
            return Err(KamError::StripNormOverflow { rho });
        }
        Ok(StripNormValue { rho, value: total })
    }

    /// Strip norm as a plain number; overflow maps to `+inf`.
    pub fn norm(&self, rho: f64) -> f64 {
        self.strip_norm(rho).map(|s| s.value).unwrap_or(f64::INFINITY)
    }

    fn map_modes(&self, m_out: usize, f: impl Fn(&[i64], &[Complex64], &mut [Complex64])) -> Self {
        let mut out = Self::zeros(self.n, m_out, self.kmax);
        for k in self.modes() {
            let s_in = self.slot(&k).unwrap();
            let s_out = out.slot(&k).unwrap();
            let (src, dst) = (&self.coeffs[s_in..s_in + self.m], &mut out.coeffs[s_out..s_out + m_out]);
            f(&k, src, dst);
        }
        out
    }

    /// `d_omega f = sum_i omega_i d/d theta_i f`.
    pub fn directional_derivative(&self, omega: &[f64]) -> Self {
        assert_eq!(omega.len(), self.n);
        self.map_modes(self.m, |k, src, dst| {
            let kw: f64 = k.iter().zip(omega).map(|(&ki, &w)| ki as f64 * w).sum();
            let mult = Complex64::new(0.0, TWO_PI * kw);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = mult * s;
            }
        })
    }

    /// Matrix-valued `m x n` Jacobian, row-major (entry `(i, j)` at `i * n + j`).
    pub fn jacobian(&self) -> Self {
        let n = self.n;
        self.map_modes(self.m * n, |k, src, dst| {
            for (i, s) in src.iter().enumerate() {
                for j in 0..n {
                    dst[i * n + j] = Complex64::new(0.0, TWO_PI * k[j] as f64) * s;
                }
            }
        })
    }

    /// Reads each mode's `m = rows * cols` entries as a row-major matrix and
    /// applies it to `v`, giving a map with `rows` components.
    pub fn matvec(&self, cols: usize, v: &[f64]) -> Self {
        assert!(cols > 0 && self.m % cols == 0 && v.len() == cols);
        let rows = self.m / cols;
        self.map_modes(rows, |_, src, dst| {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = (0..cols).map(|j| src[i * cols + j] * v[j]).sum();
            }
        })
    }

    /// Torus average `<f>`, the real part of the k = 0 coefficient.
    pub fn average(&self) -> Vec<f64> {
        self.coeff_slice(&vec![0; self.n]).iter().map(|z| z.re).collect()
    }

    /// Solves `d_omega u = v` for `<v> = 0`: `u_k = v_k / (2 pi i k.omega)`, `u_0 = 0`.
    pub fn solve_small_divisor(&self, omega: &[f64], opts: SmallDivisorOptions) -> Result<Self> {
        assert_eq!(omega.len(), self.n);
        let avg = self.average().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if avg > opts.average_tol {
            return Err(KamError::ZeroAverageViolation { average: avg, tolerance: opts.average_tol });
        }
        let wnorm = omega.iter().fold(0.0f64, |a, w| a.max(w.abs()));
        let floor = opts.divisor_floor.unwrap_or(1e-14 * wnorm);
        let mut out = Self::zeros(self.n, self.m, self.kmax);
        for k in self.modes() {
            if k.iter().all(|&v| v == 0) {
                continue;
            }
            let kw: f64 = k.iter().zip(omega).map(|(&ki, &w)| ki as f64 * w).sum();
            if kw.abs() < floor || kw == 0.0 {
                return Err(KamError::SmallDivisorUnderflow { k, divisor: kw.abs(), floor });
            }
            let div = Complex64::new(0.0, TWO_PI * kw);
            let s = self.slot(&k).unwrap();
            for i in 0..self.m {
                out.coeffs[s + i] = self.coeffs[s + i] / div;
            }
        }
        Ok(out)
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &Self) -> Self {
        self.check_same(other);
        let mut out = self.clone();
        for (o, b) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *o += b * alpha;
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.axpy(-1.0, other)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c *= alpha);
        out
    }

    fn check_same(&self, other: &Self) {
        assert!(
            self.n == other.n && self.m == other.m && self.kmax == other.kmax,
            "incompatible Fourier maps ({},{},{}) vs ({},{},{})",
            self.n,
            self.m,
            self.kmax,
            other.n,
            other.m,
            other.kmax
        );
    }

    /// Re-expresses the map at another truncation order, returning the dropped
    /// tail majorant at `rho = 0`.
    pub fn retruncate(&self, kmax: usize) -> (Self, f64) {
        let mut out = Self::zeros(self.n, self.m, kmax);
        let mut tail = 0.0;
        for k in self.modes() {
            let c = self.coeff_slice(&k);
            if l1(&k) as usize <= kmax {
                out.set_raw(&k, c);
            } else {
                tail += c.iter().map(|z| z.norm()).fold(0.0, f64::max);
            }
        }
        (out, tail)
    }

    /// Components `range` of the target, as a new map.
    pub fn components(&self, range: std::ops::Range<usize>) -> Self {
        assert!(range.end <= self.m);
        let width = range.len();
        self.map_modes(width, |_, src, dst| dst.copy_from_slice(&src[range.clone()]))
    }

    /// Stacks the targets of several maps on the same torus.
    pub fn stack(parts: &[&Self]) -> Self {
        let first = parts[0];
        let m: usize = parts.iter().map(|p| p.m).sum();
        let mut out = Self::zeros(first.n, m, first.kmax);
        for k in first.modes() {
            let mut c = Vec::with_capacity(m);
            for p in parts {
                assert!(p.n == first.n && p.kmax == first.kmax);
                c.extend_from_slice(p.coeff_slice(&k));
            }
            out.set_raw(&k, &c);
        }
        out
    }

    /// Largest imaginary part of the k = 0 coefficient and the largest
    /// violation of `c_{-k} = conj(c_k)`.
    pub fn reality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for k in self.modes() {
            let neg: Vec<i64> = k.iter().map(|v| -v).collect();
            let a = self.coeff_slice(&k);
            let b = self.coeff_slice(&neg);
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y.conj()).norm());
            }
        }
        worst
    }

    /// Samples the map on a grid (real parts), point-major layout.
    pub fn synthesize(&self, grid: &Grid) -> Vec<f64> {
        assert_eq!(grid.n, self.n);
        assert!(grid.size > 2 * self.kmax, "grid too coarse for the stored band");
        let npts = grid.len();
        let mut out = vec![0.0; npts * self.m];
        let modes = self.modes();
        let mut buf = vec![Complex64::new(0.0, 0.0); npts];
        for comp in 0..self.m {
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for k in &modes {
                let c = self.coeff_slice(k)[comp];
                if c.norm_sqr() != 0.0 {
                    buf[grid.wrap_index(k)] = c;
                }
            }
            grid.fft(&mut buf, true);
            for (p, z) in buf.iter().enumerate() {
                out[p * self.m + comp] = z.re;
            }
        }
        out
    }

    /// Fourier analysis of real grid samples (point-major, `m` per point),
    /// truncated to `kmax`. Returns the map and the dropped-tail majorant.
    pub fn analyze(grid: &Grid, values: &[f64], m: usize, kmax: usize) -> (Self, f64) {
        let npts = grid.len();
        assert_eq!(values.len(), npts * m);
        assert!(grid.size > 2 * kmax, "grid too coarse for the requested band");
        let mut out = Self::zeros(grid.n, m, kmax);
        let modes = out.modes();
        let scale = 1.0 / npts as f64;
        let mut tail_per_slot = vec![0.0f64; npts];
        let mut buf = vec![Complex64::new(0.0, 0.0); npts];
        let kept: std::collections::HashSet<usize> = modes.iter().map(|k| grid.wrap_index(k)).collect();
        for comp in 0..m {
            for p in 0..npts {
                buf[p] = Complex64::new(values[p * m + comp], 0.0);
            }
            grid.fft(&mut buf, false);
            for k in &modes {
                let s = out.slot(k).unwrap();
                out.coeffs[s + comp] = buf[grid.wrap_index(k)] * scale;
            }
            for (p, z) in buf.iter().enumerate() {
                if !kept.contains(&p) {
                    tail_per_slot[p] = tail_per_slot[p].max(z.norm() * scale);
                }
            }
        }
        out.symmetrize();
        (out, tail_per_slot.iter().sum())
    }

    /// Enforces the reality invariant by averaging `c_k` with `conj(c_{-k})`.
    pub fn symmetrize(&mut self) {
        for k in self.modes() {
            if !lex_nonneg(&k) {
                continue;
            }
            let neg: Vec<i64> = k.iter().map(|v| -v).collect();
            let a = self.coeff_slice(&k).to_vec();
            let b = self.coeff_slice(&neg).to_vec();
            let c: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| (x + y.conj()) * 0.5).collect();
            self.set_mode(&k, &c);
        }
    }

    /// Text serialization: header `n m K_max`, then per mode with `k >= 0`
    /// lexicographically, the n integers of k and 2m floats (re/im interleaved).
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.n, self.m, self.kmax);
        for k in self.modes() {
            if !lex_nonneg(&k) {
                continue;
            }
            let ks: Vec<String> = k.iter().map(|v| v.to_string()).collect();
            s.push_str(&ks.join(" "));
            for c in self.coeff_slice(&k) {
                let _ = write!(s, " {:e} {:e}", c.re, c.im);
            }
            s.push('\n');
        }
        s
    }

    /// Parses the text format; accepts half (k >= 0) or full coefficient lists.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (hl, header) = lines.next().ok_or(KamError::Parse { line: 1, message: "empty torus file".into() })?;
        let h: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| KamError::Parse { line: hl + 1, message: format!("bad header: {e}") })?;
        if h.len() != 3 || h[0] == 0 || h[1] == 0 {
            return Err(KamError::Parse { line: hl + 1, message: "header must be `n m K_max`".into() });
        }
        let (n, m, kmax) = (h[0], h[1], h[2]);
        let mut map = Self::zeros(n, m, kmax);
        let mut seen = std::collections::HashSet::new();
        for (ln, line) in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != n + 2 * m {
                return Err(KamError::Parse { line: ln + 1, message: format!("expected {} fields, found {}", n + 2 * m, toks.len()) });
            }
            let k: Vec<i64> = toks[..n]
                .iter()
                .map(|t| t.parse::<i64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| KamError::Parse { line: ln + 1, message: format!("bad index: {e}") })?;
            if l1(&k) > kmax as i64 {
                return Err(KamError::Parse { line: ln + 1, message: format!("mode {k:?} exceeds K_max") });
            }
            let vals: Vec<f64> = toks[n..]
                .iter()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| KamError::Parse { line: ln + 1, message: format!("bad coefficient: {e}") })?;
            let c: Vec<Complex64> = vals.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect();
            map.set_raw(&k, &c);
            seen.insert(k);
        }
        for k in map.modes() {
            let neg: Vec<i64> = k.iter().map(|v| -v).collect();
            if seen.contains(&k) && !seen.contains(&neg) {
                let c: Vec<Complex64> = map.coeff_slice(&k).iter().map(|z| z.conj()).collect();
                map.set_raw(&neg, &c);
            }
        }
        Ok(map)
    }
}

/// Uniform grid `{ j / size : j in 0..size }^n` on the torus with cached FFT plans.
#[derive(Clone)]
pub struct Grid {
    pub n: usize,
    pub size: usize,
    fwd: Arc<dyn rustfft::Fft<f64>>,
    inv: Arc<dyn rustfft::Fft<f64>>,
}

impl std::fmt::Debug for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Grid").field("n", &self.n).field("size", &self.size).finish()
    }
}

impl Grid {
    pub fn new(n: usize, size: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { n, size, fwd: planner.plan_fft_forward(size), inv: planner.plan_fft_inverse(size) }
    }

    /// Smallest power of two with at least `2 (2 kmax + 1)` points per dimension.
    pub fn for_kmax(n: usize, kmax: usize) -> Self {
        Self::new(n, (2 * (2 * kmax + 1)).next_power_of_two())
    }

    pub fn len(&self) -> usize {
        self.size.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid point with flat index `p` (last axis fastest).
    pub fn point(&self, p: usize) -> Vec<f64> {
        let mut theta = vec![0.0; self.n];
        let mut rem = p;
        for i in (0..self.n).rev() {
            theta[i] = (rem % self.size) as f64 / self.size as f64;
            rem /= self.size;
        }
        theta
    }

    fn wrap_index(&self, k: &[i64]) -> usize {
        let s = self.size as i64;
        k.iter().fold(0usize, |acc, &ki| acc * self.size + ki.rem_euclid(s) as usize)
    }

    /// In-place n-dimensional FFT; `inverse` gives the unnormalized synthesis sum.
    fn fft(&self, data: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        let s = self.size;
        let total = data.len();
        let mut line = vec![Complex64::new(0.0, 0.0); s];
        for axis in 0..self.n {
            let stride = s.pow((self.n - 1 - axis) as u32);
            for start in 0..total {
                // first element of each line along `axis`
                if (start / stride) % s != 0 {
                    continue;
                }
                for j in 0..s {
                    line[j] = data[start + j * stride];
                }
                plan.process(&mut line);
                for j in 0..s {
                    data[start + j * stride] = line[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_map(n: usize, m: usize, kmax: usize, seed: u64) -> FourierMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = FourierMap::zeros(n, m, kmax);
        for k in f.modes() {
            if !lex_nonneg(&k) {
                continue;
            }
            let decay = 0.7f64.powi(l1(&k) as i32);
            let cs: Vec<Complex64> =
                (0..m).map(|_| c(rng.gen_range(-1.0..1.0) * decay, rng.gen_range(-1.0..1.0) * decay)).collect();
            f.set_mode(&k, &cs);
        }
        f
    }

    const GOLDEN: f64 = 1.618_033_988_749_895;

    #[test]
    fn eval_constant_and_cosine() {
        let f = FourierMap::constant(2, 3, &[1.5, -2.0]);
        let v = f.eval_real(&[0.3, 0.9]);
        assert_eq!(v, vec![1.5, -2.0]);

        let mut g = FourierMap::zeros(1, 1, 2);
        g.set_mode(&[1], &[c(0.5, 0.0)]);
        assert!((g.eval_real(&[0.0])[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn synthesis_matches_direct_dft() {
        let f = random_map(1, 2, 10, 7);
        let grid = Grid::new(1, 64);
        let vals = f.synthesize(&grid);
        for p in 0..64 {
            let theta = p as f64 / 64.0;
            // direct summation oracle
            for comp in 0..2 {
                let mut acc = c(0.0, 0.0);
                for k in -10i64..=10 {
                    let ck = f.coeff(&[k])[comp];
                    acc += ck * (c(0.0, TWO_PI * k as f64 * theta)).exp();
                }
                assert!((vals[p * 2 + comp] - acc.re).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn strip_norm_examples() {
        let f = FourierMap::constant(1, 4, &[-3.0]);
        assert_eq!(f.strip_norm(0.3).unwrap().value, 3.0);

        let mut g = FourierMap::zeros(1, 1, 3);
        g.set_mode(&[1], &[c(0.5, 0.0)]);
        let rho = 0.2;
        assert!((g.norm(rho) - (TWO_PI * rho).exp()).abs() < 1e-14);

        let mut h = FourierMap::zeros(1, 1, 12);
        for k in 0..=12i64 {
            h.set_mode(&[k], &[c(4f64.powi(-(k as i32)), 0.0)]);
        }
        let rho = 0.01;
        let oracle: f64 = (-12i64..=12).map(|k| 4f64.powi(-(k.abs() as i32)) * (TWO_PI * rho * k.abs() as f64).exp()).sum();
        assert!((h.norm(rho) - oracle).abs() < 1e-12);
    }

    #[test]
    fn strip_norm_overflow_is_reported() {
        let mut g = FourierMap::zeros(1, 1, 40);
        g.set_mode(&[40], &[c(1.0, 0.0)]);
        assert!(matches!(g.strip_norm(1e3), Err(KamError::StripNormOverflow { .. })));
    }

    #[test]
    fn derivative_examples() {
        let f = FourierMap::constant(1, 3, &[2.0]);
        assert_eq!(f.directional_derivative(&[1.0]).norm(0.0), 0.0);

        // sin(2 pi theta) -> 2 pi cos(2 pi theta)
        let mut s = FourierMap::zeros(1, 1, 2);
        s.set_mode(&[1], &[c(0.0, -0.5)]);
        let d = s.directional_derivative(&[1.0]);
        for &t in &[0.0, 0.1, 0.37] {
            assert!((d.eval_real(&[t])[0] - TWO_PI * (TWO_PI * t).cos()).abs() < 1e-13);
        }

        let mut g = FourierMap::zeros(2, 1, 2);
        g.set_mode(&[1, -1], &[c(1.0, 0.0)]);
        let dg = g.directional_derivative(&[1.0, GOLDEN]);
        let expected = c(0.0, TWO_PI * (1.0 - GOLDEN));
        assert!((dg.coeff(&[1, -1])[0] - expected).norm() < 1e-15);
    }

    #[test]
    fn jacobian_contracts_to_directional_derivative() {
        let f = random_map(2, 3, 6, 11);
        let w = [1.0, GOLDEN];
        let jac = f.jacobian();
        let dw = f.directional_derivative(&w);
        for k in f.modes() {
            let jk = jac.coeff(&k);
            let dk = dw.coeff(&k);
            for i in 0..3 {
                let contracted = jk[i * 2] * w[0] + jk[i * 2 + 1] * w[1];
                assert!((contracted - dk[i]).norm() < 1e-13);
            }
        }
        assert_eq!(FourierMap::constant(2, 3, &[1.0]).jacobian().norm(0.0), 0.0);
    }

    #[test]
    fn average_matches_trapezoid() {
        let mut g = FourierMap::zeros(1, 1, 2);
        g.set_mode(&[1], &[c(0.5, 0.0)]);
        assert_eq!(g.average(), vec![0.0]);

        let f = random_map(1, 2, 8, 3);
        let npts = 512;
        for comp in 0..2 {
            let trap: f64 = (0..npts).map(|j| f.eval_real(&[j as f64 / npts as f64])[comp]).sum::<f64>() / npts as f64;
            assert!((trap - f.average()[comp]).abs() < 1e-12);
        }
    }

    #[test]
    fn small_divisor_examples() {
        let mut v = FourierMap::zeros(1, 1, 3);
        v.set_mode(&[1], &[c(0.0, -0.5)]); // sin
        let u = v.solve_small_divisor(&[1.0], Default::default()).unwrap();
        for &t in &[0.0, 0.2, 0.71] {
            let want = -(TWO_PI * t).cos() / TWO_PI;
            assert!((u.eval_real(&[t])[0] - want).abs() < 1e-15);
        }
        let z = FourierMap::zeros(2, 2, 4);
        assert_eq!(z.solve_small_divisor(&[1.0, GOLDEN], Default::default()).unwrap(), z);
    }

    #[test]
    fn small_divisor_round_trip() {
        let mut v = random_map(2, 1, 6, 5); // 85 modes, >= 50 nonzero
        v.set_mode(&[0, 0], &[c(0.0, 0.0)]);
        let w = [1.0, GOLDEN];
        let u = v.solve_small_divisor(&w, Default::default()).unwrap();
        let back = u.directional_derivative(&w);
        for k in v.modes() {
            assert!((back.coeff(&k)[0] - v.coeff(&k)[0]).norm() < 1e-13);
        }
    }

    #[test]
    fn small_divisor_errors() {
        let f = FourierMap::constant(1, 2, &[1.0]);
        assert!(matches!(f.solve_small_divisor(&[1.0], Default::default()), Err(KamError::ZeroAverageViolation { .. })));
        let mut g = FourierMap::zeros(2, 1, 2);
        g.set_mode(&[1, -1], &[c(1.0, 0.0)]);
        assert!(matches!(
            g.solve_small_divisor(&[1.0, 1.0], Default::default()),
            Err(KamError::SmallDivisorUnderflow { .. })
        ));
    }

    #[test]
    fn analysis_inverts_synthesis() {
        let f = random_map(2, 2, 5, 9);
        let grid = Grid::for_kmax(2, 5);
        let (g, tail) = FourierMap::analyze(&grid, &f.synthesize(&grid), 2, 5);
        assert!(g.sub(&f).norm(0.0) < 1e-13);
        assert!(tail < 1e-13);
    }

    #[test]
    fn text_round_trip_and_full_lists() {
        let f = random_map(2, 2, 3, 1);
        let g = FourierMap::from_text(&f.to_text()).unwrap();
        assert_eq!(f, g);

        let full = "1 1 1\n-1 0.5 -0.25\n0 2 0\n1 0.5 0.25\n";
        let h = FourierMap::from_text(full).unwrap();
        assert_eq!(h.coeff(&[-1])[0], c(0.5, -0.25));
        assert!(FourierMap::from_text("1 1 1\n3 0 0\n").is_err());
    }
}

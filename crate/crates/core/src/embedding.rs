//! Torus embeddings `K(theta) = (theta, 0) + P(theta)` with `P` periodic.
//!
//! The affine part winds once around the angle directions and is never
//! stored; its Jacobian (the identity block) is added wherever `DK` is
//! formed.

use num_complex::Complex64;

use crate::error::{KamError, Result};
use crate::fourier::{FourierMap, Grid};

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    periodic: FourierMap,
}

impl Embedding {
    /// Wraps a periodic correction `T^n -> R^{2n}`.
    pub fn new(periodic: FourierMap) -> Result<Self> {
        if periodic.m() != 2 * periodic.n() {
            return Err(KamError::DimensionMismatch(format!(
                "an embedding of T^{} needs 2n = {} components, got {}",
                periodic.n(),
                2 * periodic.n(),
                periodic.m()
            )));
        }
        Ok(Self { periodic })
    }

    /// Flat torus `K(theta) = (theta, p0)`.
    pub fn flat(n: usize, kmax: usize, p0: &[f64]) -> Self {
        assert_eq!(p0.len(), n);
        let mut c = vec![0.0; n];
        c.extend_from_slice(p0);
        Self { periodic: FourierMap::constant(n, kmax, &c) }
    }

    pub fn periodic(&self) -> &FourierMap {
        &self.periodic
    }

    pub fn n(&self) -> usize {
        self.periodic.n()
    }

    pub fn kmax(&self) -> usize {
        self.periodic.kmax()
    }

    pub fn eval_real(&self, theta: &[f64]) -> Vec<f64> {
        let mut v = self.periodic.eval_real(theta);
        for (vi, t) in v.iter_mut().zip(theta) {
            *vi += t;
        }
        v
    }

    /// Evaluation at a complex angle (the strip `|Im theta| <= rho`).
    pub fn eval(&self, theta: &[Complex64]) -> Vec<Complex64> {
        let mut v = self.periodic.eval(theta);
        for (vi, t) in v.iter_mut().zip(theta) {
            *vi += t;
        }
        v
    }

    /// `K` at every grid point, point-major with `2n` values per point.
    pub fn sample(&self, grid: &Grid) -> Vec<f64> {
        let n = self.n();
        let mut v = self.periodic.synthesize(grid);
        for p in 0..grid.len() {
            let theta = grid.point(p);
            for i in 0..n {
                v[p * 2 * n + i] += theta[i];
            }
        }
        v
    }

    /// `DK` as a `2n x n` matrix-valued map, row-major, identity block included.
    pub fn jacobian(&self) -> FourierMap {
        let n = self.n();
        let mut eye = vec![0.0; 2 * n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        self.periodic.jacobian().add(&FourierMap::constant(n, self.kmax(), &eye))
    }

    /// `DK` at every grid point, `2n * n` row-major values per point.
    pub fn sample_jacobian(&self, grid: &Grid) -> Vec<f64> {
        self.jacobian().synthesize(grid)
    }

    /// `||DK||_rho` (the identity block counts).
    pub fn jacobian_norm(&self, rho: f64) -> f64 {
        self.jacobian().norm(rho)
    }

    /// `d_omega K = (omega, 0) + d_omega P`.
    pub fn omega_derivative(&self, omega: &[f64]) -> FourierMap {
        let n = self.n();
        let mut c = omega.to_vec();
        c.extend(std::iter::repeat_n(0.0, n));
        self.periodic.directional_derivative(omega).add(&FourierMap::constant(n, self.kmax(), &c))
    }

    /// `K + delta` for a periodic correction at the same truncation.
    pub fn shifted(&self, delta: &FourierMap) -> Self {
        Self { periodic: self.periodic.add(delta) }
    }

    /// `||K - other||_rho`; the maps are compared at the larger truncation.
    pub fn distance(&self, other: &Self, rho: f64) -> f64 {
        let kmax = self.kmax().max(other.kmax());
        let a = self.periodic.retruncate(kmax).0;
        let b = other.periodic.retruncate(kmax).0;
        a.sub(&b).norm(rho)
    }

    /// Same embedding at another truncation order, with the dropped tail.
    pub fn retruncate(&self, kmax: usize) -> (Self, f64) {
        let (p, tail) = self.periodic.retruncate(kmax);
        (Self { periodic: p }, tail)
    }

    /// Coefficient file of the periodic part.
    pub fn to_text(&self) -> String {
        self.periodic.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(FourierMap::from_text(text)?)
    }
}

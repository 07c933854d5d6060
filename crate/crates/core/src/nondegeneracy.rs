//! Non-degeneracy data of an embedding: `N = (DK^T DK)^{-1}`, the parameter
//! coupling matrix `Lambda(theta)`, its average and the scalar summaries
//! `d = ||DK||_rho`, `v = ||N||_rho`, `tau = |<Lambda>^{-1}|`.
//!
//! `Lambda` is the parameter coupling `J d_lambda grad H` written in the frame
//! `M = [DK | J DK N]`, i.e. `M^{-1} J d_lambda grad H`, which for an isotropic
//! torus stacks `N DK^T J d_lambda grad H` over `DK^T d_lambda grad H`. Its
//! average is exactly the matrix the Newton step inverts to choose `Delta lambda`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{KamError, Result};
use crate::fourier::{FourierMap, Grid};
use crate::hamiltonian::HamiltonianFamily;
use crate::linalg;
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NondegeneracyOptions {
    pub gram_cond_limit: f64,
    pub lambda_cond_limit: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for NondegeneracyOptions {
    fn default() -> Self {
        Self { gram_cond_limit: 1e8, lambda_cond_limit: 1e10, exec: Exec::default() }
    }
}

/// Scalar diagnostics block of the reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NondegeneracyDiagnostics {
    pub d: f64,
    pub v: f64,
    pub tau: f64,
    pub gram_cond: f64,
    pub lambda_cond: f64,
    pub residual_n: f64,
}

#[derive(Debug, Clone)]
pub struct NondegeneracyData {
    /// `N`, an `n x n` matrix-valued map (row-major).
    pub n_map: FourierMap,
    /// `Lambda`, a `2n x 2n` matrix-valued map (row-major).
    pub lambda_map: FourierMap,
    pub lambda_avg: DMatrix<f64>,
    pub lambda_avg_inv: DMatrix<f64>,
    pub d: f64,
    pub v: f64,
    pub tau: f64,
    /// Worst Gram condition number over the grid.
    pub gram_cond: f64,
    pub lambda_cond: f64,
    /// `||N DK^T DK - I||_rho`.
    pub residual_n: f64,
    pub rho: f64,
}

impl NondegeneracyData {
    pub fn diagnostics(&self) -> NondegeneracyDiagnostics {
        NondegeneracyDiagnostics {
            d: self.d,
            v: self.v,
            tau: self.tau,
            gram_cond: self.gram_cond,
            lambda_cond: self.lambda_cond,
            residual_n: self.residual_n,
        }
    }
}

/// `N` together with its worst Gram condition number and the residual
/// `||N DK^T DK - I||_rho`.
#[derive(Debug, Clone)]
pub struct NResult {
    pub map: FourierMap,
    pub gram_cond: f64,
    pub residual: f64,
}

fn gram_at(dk: &[f64], n: usize) -> DMatrix<f64> {
    let dkm = linalg::from_row_slice(2 * n, n, dk);
    dkm.transpose() * dkm
}

pub fn compute_n(k: &Embedding, rho: f64, opts: &NondegeneracyOptions) -> Result<NResult> {
    let n = k.n();
    let kmax = k.kmax();
    let grid = Grid::for_kmax(n, kmax);
    let dk = k.sample_jacobian(&grid);
    let w = 2 * n * n;
    let inverses = par::map_range(opts.exec, grid.len(), |p| {
        let g = gram_at(&dk[p * w..(p + 1) * w], n);
        match linalg::checked_inverse(&g) {
            Some((inv, cond)) => Ok((linalg::to_row_vec(&inv), cond)),
            None => Err(f64::INFINITY),
        }
    });
    let mut values = Vec::with_capacity(grid.len() * n * n);
    let mut worst = 0.0f64;
    for r in inverses {
        let (v, cond) = r.map_err(|cond| KamError::DegenerateEmbedding { cond, limit: opts.gram_cond_limit })?;
        worst = worst.max(cond);
        values.extend(v);
    }
    if worst > opts.gram_cond_limit {
        return Err(KamError::DegenerateEmbedding { cond: worst, limit: opts.gram_cond_limit });
    }
    let (map, _) = FourierMap::analyze(&grid, &values, n * n, kmax);
    // residual of the truncated N against the sampled Gram matrix
    let nsynth = map.synthesize(&grid);
    let res: Vec<f64> = (0..grid.len())
        .flat_map(|p| {
            let g = gram_at(&dk[p * w..(p + 1) * w], n);
            let nm = linalg::from_row_slice(n, n, &nsynth[p * n * n..(p + 1) * n * n]);
            linalg::to_row_vec(&(nm * g - DMatrix::identity(n, n)))
        })
        .collect();
    let (rmap, _) = FourierMap::analyze(&grid, &res, n * n, 2 * kmax);
    Ok(NResult { map, gram_cond: worst, residual: rmap.norm(rho) })
}

/// `Lambda` at a point from `DK` (`2n x n`), `N` (`n x n`) and
/// `d_lambda grad H` (`2n x d`): `[N DK^T J B ; DK^T B]`.
pub fn lambda_pointwise(dk: &DMatrix<f64>, nmat: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = dk.ncols();
    let j = linalg::symplectic(n);
    let top = nmat * dk.transpose() * &j * b;
    let bottom = dk.transpose() * b;
    let mut out = DMatrix::zeros(2 * n, b.ncols());
    out.rows_mut(0, n).copy_from(&top);
    out.rows_mut(n, n).copy_from(&bottom);
    out
}

/// `Lambda`, its average and (if invertible) inverse with `tau`.
#[derive(Debug, Clone)]
pub struct LambdaResult {
    pub map: FourierMap,
    pub avg: DMatrix<f64>,
    pub avg_inv: DMatrix<f64>,
    pub cond: f64,
    pub tau: f64,
}

pub fn compute_lambda(
    k: &Embedding,
    n_map: &FourierMap,
    h: &HamiltonianFamily,
    lambda: &[f64],
    opts: &NondegeneracyOptions,
) -> Result<LambdaResult> {
    h.require_square_parameters()?;
    let n = k.n();
    let d = h.param_dim();
    let kmax = k.kmax();
    let grid = Grid::for_kmax(n, kmax);
    let ks = k.sample(&grid);
    let dk = k.sample_jacobian(&grid);
    let ns = n_map.synthesize(&grid);
    let w = 2 * n * n;
    for p in 0..grid.len() {
        let x = &ks[p * 2 * n..(p + 1) * 2 * n];
        if !h.domain.contains(x) {
            return Err(KamError::DomainViolation(format!("K leaves the domain at x = {x:?}")));
        }
    }
    let samples = par::map_range(opts.exec, grid.len(), |p| {
        let x = &ks[p * 2 * n..(p + 1) * 2 * n];
        let b = h.dgrad_dlambda(x, lambda);
        let dkm = linalg::from_row_slice(2 * n, n, &dk[p * w..(p + 1) * w]);
        let nm = linalg::from_row_slice(n, n, &ns[p * n * n..(p + 1) * n * n]);
        linalg::to_row_vec(&lambda_pointwise(&dkm, &nm, &b))
    });
    let values: Vec<f64> = samples.into_iter().flatten().collect();
    let (map, _) = FourierMap::analyze(&grid, &values, 2 * n * d, kmax);
    let avg = linalg::from_row_slice(2 * n, d, &map.average());
    let cond = linalg::condition_number(&avg);
    if cond > opts.lambda_cond_limit {
        return Err(KamError::SingularLambdaAverage { cond, limit: opts.lambda_cond_limit });
    }
    let (avg_inv, _) =
        linalg::checked_inverse(&avg).ok_or(KamError::SingularLambdaAverage { cond, limit: opts.lambda_cond_limit })?;
    let tau = linalg::max_abs(&avg_inv);
    Ok(LambdaResult { map, avg, avg_inv, cond, tau })
}

/// `(d, v, tau) = (||DK||_rho, ||N||_rho, |<Lambda>^{-1}|)`.
pub fn summarize(k: &Embedding, n_map: &FourierMap, lambda_avg_inv: &DMatrix<f64>, rho: f64) -> (f64, f64, f64) {
    (k.jacobian_norm(rho), n_map.norm(rho), linalg::max_abs(lambda_avg_inv))
}

/// All non-degeneracy objects of `(K, lambda)` on the strip `rho`.
pub fn nondegeneracy(
    h: &HamiltonianFamily,
    lambda: &[f64],
    k: &Embedding,
    rho: f64,
    opts: &NondegeneracyOptions,
) -> Result<NondegeneracyData> {
    let nres = compute_n(k, rho, opts)?;
    let lres = compute_lambda(k, &nres.map, h, lambda, opts)?;
    let (d, v, tau) = summarize(k, &nres.map, &lres.avg_inv, rho);
    Ok(NondegeneracyData {
        n_map: nres.map,
        lambda_map: lres.map,
        lambda_avg: lres.avg,
        lambda_avg_inv: lres.avg_inv,
        d,
        v,
        tau,
        gram_cond: nres.gram_cond,
        lambda_cond: lres.cond,
        residual_n: nres.residual,
        rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{builtin_family, Coupling, FamilyOptions, Smoothness};
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn wavy(kmax: usize) -> Embedding {
        let mut p = FourierMap::zeros(1, 2, kmax);
        p.set_mode(&[1], &[Complex64::new(0.0, -0.005), Complex64::new(0.005, 0.0)]);
        Embedding::new(p).unwrap()
    }

    #[test]
    fn flat_torus_has_unit_n() {
        let k = Embedding::flat(1, 8, &[0.3]);
        let r = compute_n(&k, 0.1, &NondegeneracyOptions::default()).unwrap();
        assert!((r.map.average()[0] - 1.0).abs() < 1e-15);
        assert!(r.map.norm(0.1) - 1.0 < 1e-14);
        assert!(r.residual < 1e-14);
    }

    #[test]
    fn doubled_tangent_gives_quarter_gram_inverse() {
        // a doubled winding is not a periodic correction, so check the pointwise kernel
        let dk = DMatrix::from_row_slice(2, 1, &[2.0, 0.0]);
        let g = dk.transpose() * &dk;
        let (inv, _) = linalg::checked_inverse(&g).unwrap();
        assert_eq!(inv[(0, 0)], 0.25);
    }

    #[test]
    fn wavy_embedding_matches_pointwise_inverse() {
        let k = wavy(24);
        let r = compute_n(&k, 0.05, &NondegeneracyOptions::default()).unwrap();
        for t in [0.0, 0.013, 0.3, 0.71, 0.9] {
            let a = 1.0 + 0.02 * PI * (2.0 * PI * t).cos();
            let b = -0.02 * PI * (2.0 * PI * t).sin();
            let exact = 1.0 / (a * a + b * b);
            assert!((r.map.eval_real(&[t])[0] - exact).abs() < 1e-10);
        }
        assert!(r.residual < 1e-9, "{}", r.residual);
    }

    #[test]
    fn rotator_lambda_is_identity_on_flat_torus() {
        for n in 1..=2 {
            let h = builtin_family("rotator", n, &FamilyOptions::default()).unwrap();
            let k = Embedding::flat(n, 6, &vec![0.5; n]);
            let data = nondegeneracy(&h, &vec![0.0; 2 * n], &k, 0.1, &NondegeneracyOptions::default()).unwrap();
            assert!((&data.lambda_avg - DMatrix::identity(2 * n, 2 * n)).amax() < 1e-14);
            assert_eq!(data.tau, 1.0);
            assert_eq!(data.d, 1.0);
            assert!((data.v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn sine_coupling_is_singular() {
        let o = FamilyOptions { coupling: Coupling::Sine, ..FamilyOptions::default() };
        let h = builtin_family("rotator", 1, &o).unwrap();
        let k = Embedding::flat(1, 6, &[0.5]);
        let err = nondegeneracy(&h, &[0.0, 0.0], &k, 0.1, &NondegeneracyOptions::default()).unwrap_err();
        assert!(matches!(err, KamError::SingularLambdaAverage { .. }));
        // hand computation: Lambda = [[1, 0], [0, 2 pi cos(2 pi theta)]] pointwise
        let n = compute_n(&k, 0.1, &NondegeneracyOptions::default()).unwrap().map;
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 2.0 * PI * (2.0 * PI * 0.2f64).cos(), 1.0, 0.0]);
        let dk = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let nm = DMatrix::from_element(1, 1, n.average()[0]);
        let l = lambda_pointwise(&dk, &nm, &b);
        assert!((l[(0, 0)] - 1.0).abs() < 1e-15 && l[(0, 1)].abs() < 1e-15);
        assert!(l[(1, 0)].abs() < 1e-15 && (l[(1, 1)] - 2.0 * PI * (0.4 * PI).cos()).abs() < 1e-14);
    }

    #[test]
    fn lambda_free_family_is_singular() {
        let h = HamiltonianFamily::from_fn("free", 1, 2, Smoothness::Analytic, |x, _| 0.5 * x[1] * x[1]);
        let k = Embedding::flat(1, 4, &[0.5]);
        let err = nondegeneracy(&h, &[0.0, 0.0], &k, 0.1, &NondegeneracyOptions::default()).unwrap_err();
        assert!(matches!(err, KamError::SingularLambdaAverage { .. }));
    }

    #[test]
    fn lambda_average_is_grid_mean_and_frame_inverse() {
        let o = FamilyOptions { epsilon: 0.05, ..FamilyOptions::default() };
        let h = builtin_family("pendulum_family", 1, &o).unwrap();
        let k = wavy(12);
        let lambda = [0.01, -0.02];
        let data = nondegeneracy(&h, &lambda, &k, 0.05, &NondegeneracyOptions::default()).unwrap();
        let grid = Grid::for_kmax(1, 12);
        let mut mean = DMatrix::zeros(2, 2);
        let j = linalg::symplectic(1);
        for p in 0..grid.len() {
            let t = grid.point(p);
            let x = k.eval_real(&t);
            let dk = linalg::from_row_slice(2, 1, &k.jacobian().eval_real(&t));
            let g = (dk.transpose() * &dk)[(0, 0)];
            let nm = DMatrix::from_element(1, 1, 1.0 / g);
            let b = h.dgrad_dlambda(&x, &lambda);
            let l = lambda_pointwise(&dk, &nm, &b);
            // Lambda is M^{-1} J B for the frame M = [DK | J DK N]
            let mut m = DMatrix::zeros(2, 2);
            m.column_mut(0).copy_from(&dk.column(0));
            m.column_mut(1).copy_from(&(&j * &dk * &nm).column(0));
            let direct = m.try_inverse().unwrap() * &j * &b;
            assert!((&l - direct).amax() < 1e-12);
            mean += l;
        }
        mean /= grid.len() as f64;
        assert!((mean - &data.lambda_avg).amax() < 1e-10);
        assert!((&data.lambda_avg * &data.lambda_avg_inv - DMatrix::identity(2, 2)).amax() < 1e-9);
    }

    #[test]
    fn tau_matches_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let (inv, _) = linalg::checked_inverse(&a).unwrap();
        let direct = a.clone().lu().try_inverse().unwrap();
        let k = Embedding::flat(2, 2, &[0.0, 0.0]);
        let n_map = FourierMap::constant(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let (_, _, tau) = summarize(&k, &n_map, &inv, 0.1);
        assert!((tau - linalg::max_abs(&direct)).abs() < 1e-12 * tau);
    }
}

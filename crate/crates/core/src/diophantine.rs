//! Diophantine frequency vectors: `|k.omega| >= gamma |k|_1^{-sigma}` checked
//! over all `0 < |k|_1 <= K_max`.
//!
//! Enumeration runs shell by shell in `|k|_1`, one of each `{k, -k}` pair,
//! with no pruning. Shells are distributed over workers and the minimum is
//! reduced under a total order (value, then `k`), so the parallel and
//! sequential results agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::par::{self, Exec};

/// Frequency vector with its Diophantine constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyVector {
    pub omega: Vec<f64>,
    pub gamma: f64,
    pub sigma: f64,
    /// `K_max` of the last successful verification.
    pub verified_up_to: Option<usize>,
}

impl FrequencyVector {
    pub fn new(omega: Vec<f64>, gamma: f64, sigma: f64) -> Result<Self> {
        check_sigma(omega.len(), sigma)?;
        Ok(Self { omega, gamma, sigma, verified_up_to: None })
    }

    pub fn n(&self) -> usize {
        self.omega.len()
    }

    /// Verifies up to `kmax` and records it on success.
    pub fn verify(&mut self, kmax: usize) -> Result<DiophantineVerdict> {
        let verdict = verify_diophantine(&self.omega, self.gamma, self.sigma, kmax)?;
        if verdict.pass {
            self.verified_up_to = Some(kmax);
        }
        Ok(verdict)
    }
}

/// Outcome of [`verify_diophantine`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiophantineVerdict {
    pub pass: bool,
    /// Minimizer of `|k.omega| |k|_1^sigma`.
    pub worst_k: Vec<i64>,
    /// The minimum value, i.e. the estimated gamma at this truncation.
    pub gamma_est: f64,
    /// `gamma_est - gamma`; non-negative iff the check passes.
    pub margin: f64,
    pub verified_up_to: usize,
}

fn check_sigma(n: usize, sigma: f64) -> Result<()> {
    let min = n as f64 - 1.0;
    if sigma > min && sigma.is_finite() {
        Ok(())
    } else {
        Err(KamError::InvalidSigma { sigma, min })
    }
}

/// Visits every lexicographically positive `k` with `|k|_1 = s`.
pub fn for_each_in_shell(n: usize, s: i64, mut f: impl FnMut(&[i64])) {
    let mut k = vec![0i64; n];
    fn rec(i: usize, rem: i64, positive: bool, k: &mut Vec<i64>, f: &mut dyn FnMut(&[i64])) {
        let n = k.len();
        if i == n - 1 {
            // last coordinate takes the remaining budget
            if rem == 0 {
                if positive {
                    k[i] = 0;
                    f(k);
                }
            } else {
                k[i] = rem;
                f(k);
                if positive {
                    k[i] = -rem;
                    f(k);
                }
            }
            return;
        }
        let lo = if positive { -rem } else { 0 };
        for v in lo..=rem {
            k[i] = v;
            rec(i + 1, rem - v.abs(), positive || v > 0, k, f);
        }
    }
    rec(0, s, false, &mut k, &mut f);
}

#[derive(Debug, Clone)]
struct Candidate {
    value: f64,
    k: Vec<i64>,
}

fn order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.value.total_cmp(&b.value).then_with(|| a.k.cmp(&b.k))
}

fn scan(omega: &[f64], sigma: f64, kmax: usize, exec: Exec) -> Option<Candidate> {
    let n = omega.len();
    par::min_by_range(
        exec,
        kmax,
        |i| {
            let s = i as i64 + 1;
            let weight = (s as f64).powf(sigma);
            let mut best: Option<Candidate> = None;
            for_each_in_shell(n, s, |k| {
                let dot: f64 = k.iter().zip(omega).map(|(&ki, &w)| ki as f64 * w).sum();
                let value = dot.abs() * weight;
                let better = match &best {
                    None => true,
                    Some(b) => value.total_cmp(&b.value).then_with(|| k.cmp(b.k.as_slice())).is_lt(),
                };
                if better {
                    best = Some(Candidate { value, k: k.to_vec() });
                }
            });
            best
        },
        order,
    )
}

/// Checks `|k.omega| |k|_1^sigma >= gamma` for all `0 < |k|_1 <= kmax`.
pub fn verify_diophantine(omega: &[f64], gamma: f64, sigma: f64, kmax: usize) -> Result<DiophantineVerdict> {
    verify_diophantine_with(omega, gamma, sigma, kmax, Exec::default())
}

pub fn verify_diophantine_with(omega: &[f64], gamma: f64, sigma: f64, kmax: usize, exec: Exec) -> Result<DiophantineVerdict> {
    check_sigma(omega.len(), sigma)?;
    assert!(kmax >= 1, "K_max must be at least 1");
    let best = scan(omega, sigma, kmax, exec).expect("non-empty enumeration");
    Ok(DiophantineVerdict {
        pass: best.value >= gamma,
        gamma_est: best.value,
        margin: best.value - gamma,
        worst_k: best.k,
        verified_up_to: kmax,
    })
}

/// Largest admissible gamma at this truncation: `min |k.omega| |k|_1^sigma`.
pub fn estimate_gamma(omega: &[f64], sigma: f64, kmax: usize) -> Result<(f64, Vec<i64>)> {
    estimate_gamma_with(omega, sigma, kmax, Exec::default())
}

pub fn estimate_gamma_with(omega: &[f64], sigma: f64, kmax: usize, exec: Exec) -> Result<(f64, Vec<i64>)> {
    check_sigma(omega.len(), sigma)?;
    assert!(kmax >= 1, "K_max must be at least 1");
    let best = scan(omega, sigma, kmax, exec).expect("non-empty enumeration");
    if best.value == 0.0 {
        return Err(KamError::ResonantFrequency { k: best.k });
    }
    Ok((best.value, best.k))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOLDEN: f64 = 1.618_033_988_749_895;

    #[test]
    fn shells_enumerate_half_lattice() {
        for n in 1..=3 {
            for s in 1..=6i64 {
                let mut seen = Vec::new();
                for_each_in_shell(n, s, |k| seen.push(k.to_vec()));
                // brute force over the box
                let mut expect = Vec::new();
                for k in crate::fourier::multi_indices(n, s as usize) {
                    if crate::fourier::l1(&k) == s && crate::fourier::lex_nonneg(&k) {
                        expect.push(k);
                    }
                }
                seen.sort();
                expect.sort();
                assert_eq!(seen, expect, "n = {n}, s = {s}");
            }
        }
    }

    #[test]
    fn unit_frequency_passes() {
        let v = verify_diophantine(&[1.0], 1.0, 2.0, 100).unwrap();
        assert!(v.pass);
        assert_eq!(v.worst_k, vec![1]);
        assert_eq!(v.gamma_est, 1.0);
    }

    #[test]
    fn resonant_pair_fails() {
        let v = verify_diophantine(&[1.0, 1.0], 1e-9, 1.5, 10).unwrap();
        assert!(!v.pass);
        assert_eq!(v.worst_k, vec![1, -1]);
        assert!(matches!(estimate_gamma(&[1.0, 1.0], 1.5, 10), Err(KamError::ResonantFrequency { .. })));
    }

    #[test]
    fn invalid_sigma() {
        assert!(matches!(verify_diophantine(&[1.0, 2.0], 1.0, 1.0, 5), Err(KamError::InvalidSigma { .. })));
        assert!(matches!(estimate_gamma(&[1.0], -0.1, 5), Err(KamError::InvalidSigma { .. })));
    }

    #[test]
    fn one_dimensional_estimate() {
        let (g, k) = estimate_gamma(&[2.0], 2.0, 50).unwrap();
        assert_eq!(g, 2.0);
        assert_eq!(k, vec![1]);
    }

    #[test]
    fn consistency_and_scaling() {
        let w = [1.0, GOLDEN];
        let (g, _) = estimate_gamma(&w, 1.2, 300).unwrap();
        assert!(verify_diophantine(&w, g * (1.0 - 1e-12), 1.2, 300).unwrap().pass);
        let at = verify_diophantine(&w, g, 1.2, 300).unwrap();
        assert!(at.pass && at.margin == 0.0);
        let (g3, _) = estimate_gamma(&[3.0, 3.0 * GOLDEN], 1.2, 300).unwrap();
        assert!((g3 - 3.0 * g).abs() < 1e-12 * g3);
    }

    #[test]
    fn monotone_in_truncation() {
        let w = [1.0, GOLDEN, 2f64.sqrt()];
        let mut prev = f64::INFINITY;
        for kmax in [5, 10, 20, 40] {
            let (g, _) = estimate_gamma(&w, 2.5, kmax).unwrap();
            assert!(g <= prev);
            prev = g;
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let w = [0.7, GOLDEN];
        let a = estimate_gamma_with(&w, 1.3, 400, Exec::Sequential).unwrap();
        let b = estimate_gamma_with(&w, 1.3, 400, Exec::Parallel).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }
}

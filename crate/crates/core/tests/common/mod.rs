//! Test-only oracles that stay independent of the closed-form code paths.
#![allow(dead_code)]

pub mod instances;
pub mod lmm;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random symmetric positive definite matrix with unit-ish scale.
pub fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut s = &a * a.transpose() / n as f64;
    for i in 0..n {
        s[(i, i)] += 0.3;
    }
    s
}

/// Random correlation matrix.
pub fn random_corr(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let s = random_spd(n, rng);
    DMatrix::from_fn(n, n, |i, j| s[(i, j)] / (s[(i, i)] * s[(j, j)]).sqrt())
}

/// Plain Monte Carlo estimate of `P(X <= upper)`, `X ~ N(mean, cov)`, with
/// its binomial standard error.
pub fn mc_orthant(
    upper: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    let n = upper.len();
    let l = cov.clone().cholesky().expect("spd").l();
    let mut r = rng(seed);
    let mut z = vec![0.0; n];
    let mut hits = 0usize;
    for _ in 0..draws {
        for zi in z.iter_mut() {
            *zi = r.sample(StandardNormal);
        }
        let mut inside = true;
        for i in 0..n {
            let mut x = mean[i];
            for k in 0..=i {
                x += l[(i, k)] * z[k];
            }
            if x > upper[i] {
                inside = false;
                break;
            }
        }
        if inside {
            hits += 1;
        }
    }
    let p = hits as f64 / draws as f64;
    (p, (p * (1.0 - p) / draws as f64).sqrt().max(1e-12))
}

/// Monte Carlo of `E_z[g(z)]`, `z ~ N(0, I_k)`, with standard error.
pub fn mc_expectation(
    k: usize,
    draws: usize,
    seed: u64,
    mut g: impl FnMut(&[f64]) -> f64,
) -> (f64, f64) {
    let mut r = rng(seed);
    let mut z = vec![0.0; k];
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        for zi in z.iter_mut() {
            *zi = r.sample(StandardNormal);
        }
        let v = g(&z);
        s += v;
        s2 += v * v;
    }
    let m = s / draws as f64;
    let var = (s2 / draws as f64 - m * m).max(0.0);
    (m, (var / draws as f64).sqrt())
}

/// Standard normal CDF via a series independent of the library's erfc path
/// (statrs implementation).
pub fn phi_ref(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

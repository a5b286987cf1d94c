//! Randomized quasi-Monte Carlo evaluation of multivariate normal orthant
//! probabilities by Genz's separation-of-variables transform.
//!
//! The integrand for `P(X <= b)`, `X ~ N(0, L L^T)`, is
//!
//! ```text
//! f(w) = e_1 * e_2(w_1) * ... * e_n(w_1..w_{n-1}),
//! e_i  = Phi((b_i - sum_{k<i} L_ik y_k) / L_ii),   y_k = Phi^-1(w_k e_k)
//! ```
//!
//! integrated over the unit cube of dimension `n - 1` with a Kronecker
//! lattice (square roots of primes as generator), periodized by the baker's
//! transform and randomized by independent uniform shifts.

use super::{bvn, normal};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Accuracy and reproducibility settings for [`orthant_cdf`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdfConfig {
    pub abs_tolerance: f64,
    pub max_points: usize,
    pub rng_seed: u64,
    pub randomizations: usize,
    /// Genz-Bretz variable prioritization before integration.
    pub reorder: bool,
    /// Lattice points per randomization. `None` means adaptive doubling
    /// until `abs_tolerance` is met; `Some(n)` gives a deterministic smooth
    /// function of the inputs (common random numbers).
    pub fixed_points: Option<usize>,
    pub max_dim: usize,
}

impl Default for CdfConfig {
    fn default() -> Self {
        Self {
            abs_tolerance: 1e-4,
            max_points: 1_000_000,
            rng_seed: 0x5eed_2018,
            randomizations: 12,
            reorder: true,
            fixed_points: None,
            max_dim: 64,
        }
    }
}

impl CdfConfig {
    /// Settings for objective evaluation inside an optimizer.
    pub fn smooth(points: usize, seed: u64) -> Self {
        Self {
            rng_seed: seed,
            reorder: false,
            fixed_points: Some(points),
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tolerance > 0.0) {
            return Err(Error::Domain("abs_tolerance must be > 0".into()));
        }
        if self.max_points < 1000 {
            return Err(Error::Domain("max_points must be >= 1000".into()));
        }
        if self.randomizations < 2 {
            return Err(Error::Domain("need at least 2 randomizations".into()));
        }
        Ok(())
    }
}

/// Probability together with its randomized-QMC standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CdfValue {
    pub value: f64,
    pub err_estimate: f64,
}

impl CdfValue {
    pub const ONE: CdfValue = CdfValue {
        value: 1.0,
        err_estimate: 0.0,
    };
    pub const ZERO: CdfValue = CdfValue {
        value: 0.0,
        err_estimate: 0.0,
    };
}

const PIVOT_DROP: f64 = 1e-10;
const NEGATIVE_PIVOT: f64 = 1e-8;

fn primes() -> &'static [f64] {
    static PRIMES: OnceLock<Vec<f64>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        let mut out = Vec::with_capacity(256);
        let mut c = 2u64;
        while out.len() < 256 {
            if (2..c).take_while(|d| d * d <= c).all(|d| c % d != 0) {
                out.push((c as f64).sqrt().fract());
            }
            c += 1;
        }
        out
    })
}

/// Lower-triangular factor (row-major `n x n`) with the limits permuted to
/// match. Zero diagonal entries mark dropped (rank-deficient) directions.
struct Factor {
    n: usize,
    l: Vec<f64>,
    b: Vec<f64>,
}

/// Cholesky factorization, optionally with Genz-Bretz prioritization: at each
/// stage the remaining variable with the smallest conditional probability is
/// moved forward, and its truncated conditional mean is propagated.
fn factorize(b: &[f64], cov: &[f64], n: usize, reorder: bool) -> Result<Factor> {
    let mut c = cov.to_vec();
    let mut b = b.to_vec();
    let mut l = vec![0.0; n * n];
    let mut y = vec![0.0; n];
    let max_diag = (0..n).map(|i| cov[i * n + i]).fold(0.0, f64::max);
    let drop_tol = PIVOT_DROP * max_diag;
    for i in 0..n {
        if reorder && i + 1 < n {
            let mut best = i;
            let mut best_p = f64::INFINITY;
            for j in i..n {
                let mut s = 0.0;
                let mut v = c[j * n + j];
                for k in 0..i {
                    s += l[j * n + k] * y[k];
                    v -= l[j * n + k] * l[j * n + k];
                }
                if v > drop_tol {
                    let p = normal::cdf((b[j] - s) / v.sqrt());
                    if p < best_p {
                        best_p = p;
                        best = j;
                    }
                }
            }
            if best != i {
                b.swap(i, best);
                for k in 0..n {
                    c.swap(i * n + k, best * n + k);
                }
                for k in 0..n {
                    c.swap(k * n + i, k * n + best);
                }
                for k in 0..i {
                    l.swap(i * n + k, best * n + k);
                }
            }
        }
        let mut v = c[i * n + i];
        for k in 0..i {
            v -= l[i * n + k] * l[i * n + k];
        }
        if v < -NEGATIVE_PIVOT * max_diag.max(1e-300) {
            return Err(Error::Domain(format!(
                "covariance not positive semidefinite (pivot {v:.3e} at stage {i})"
            )));
        }
        if v <= drop_tol {
            // dependent direction: column stays zero
            y[i] = 0.0;
            continue;
        }
        let lii = v.sqrt();
        l[i * n + i] = lii;
        for j in (i + 1)..n {
            let mut s = c[j * n + i];
            for k in 0..i {
                s -= l[j * n + k] * l[i * n + k];
            }
            l[j * n + i] = s / lii;
        }
        if reorder {
            let mut s = 0.0;
            for k in 0..i {
                s += l[i * n + k] * y[k];
            }
            let u = (b[i] - s) / lii;
            let p = normal::cdf(u);
            y[i] = if p > 1e-300 { -normal::pdf(u) / p } else { u };
        }
    }
    Ok(Factor { n, l, b })
}

#[inline]
fn integrand(f: &Factor, e1: f64, w: &[f64], y: &mut [f64]) -> f64 {
    let n = f.n;
    let mut prod = e1;
    let mut e = e1;
    for i in 0..n {
        if i > 0 {
            let row = &f.l[i * n..i * n + i];
            let s: f64 = row.iter().zip(&y[..i]).map(|(a, b)| a * b).sum();
            let lii = f.l[i * n + i];
            e = if lii > 0.0 {
                normal::cdf((f.b[i] - s) / lii)
            } else if f.b[i] - s >= 0.0 {
                1.0
            } else {
                0.0
            };
            prod *= e;
            if prod == 0.0 {
                return 0.0;
            }
        }
        if i + 1 < n {
            y[i] = if f.l[i * n + i] > 0.0 {
                let u = (w[i] * e).clamp(1e-300, 1.0 - 1e-16);
                normal::inv_cdf(u)
            } else {
                0.0
            };
        }
    }
    prod
}

fn leading_factor(f: &Factor) -> f64 {
    let l11 = f.l[0];
    if l11 > 0.0 {
        normal::cdf(f.b[0] / l11)
    } else if f.b[0] >= 0.0 {
        1.0
    } else {
        0.0
    }
}

fn shifts(seed: u64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            (0..dim).map(|_| rng.random::<f64>()).collect()
        })
        .collect()
}

fn integrate(f: &Factor, cfg: &CdfConfig) -> CdfValue {
    let n = f.n;
    let e1 = leading_factor(f);
    if e1 == 0.0 {
        return CdfValue::ZERO;
    }
    if n == 1 {
        return CdfValue {
            value: e1,
            err_estimate: 0.0,
        };
    }
    let dim = n - 1;
    let gen = &primes()[..dim];
    let m = cfg.randomizations;
    let deltas = shifts(cfg.rng_seed, m, dim);
    let mut sums = vec![0.0; m];
    let mut y = vec![0.0; n];
    let mut w = vec![0.0; dim];
    let mut done = 0usize;
    let mut target = cfg.fixed_points.unwrap_or(64.max(200 / m.max(1)));
    loop {
        for k in (done + 1)..=target {
            let kf = k as f64;
            for (sum, delta) in sums.iter_mut().zip(&deltas) {
                for j in 0..dim {
                    let x = (kf * gen[j] + delta[j]).fract();
                    w[j] = (2.0 * x - 1.0).abs();
                }
                *sum += integrand(f, e1, &w, &mut y);
            }
        }
        done = target;
        let means: Vec<f64> = sums.iter().map(|s| s / done as f64).collect();
        let mean = means.iter().sum::<f64>() / m as f64;
        let var = means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0);
        let err = (var / m as f64).sqrt();
        let exhausted = 2 * target * m > cfg.max_points;
        if cfg.fixed_points.is_some() || err <= cfg.abs_tolerance || exhausted {
            return CdfValue {
                value: mean.clamp(0.0, 1.0),
                err_estimate: err,
            };
        }
        target *= 2;
    }
}

/// `P(X <= b)` for `X ~ N(0, cov)`, `cov` row-major `n x n`.
///
/// Infinite upper limits are marginalized out before integration; `n <= 2`
/// uses closed forms. The covariance is assumed symmetric (callers validate).
pub fn orthant_cdf(b: &[f64], cov: &[f64], cfg: &CdfConfig) -> Result<CdfValue> {
    let n = b.len();
    debug_assert_eq!(cov.len(), n * n);
    if b.iter().any(|v| v.is_nan()) || cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite input to orthant_cdf".into()));
    }
    if b.iter().any(|&v| v == f64::NEG_INFINITY) {
        return Ok(CdfValue::ZERO);
    }
    let keep: Vec<usize> = (0..n).filter(|&i| b[i] != f64::INFINITY).collect();
    if keep.len() < n {
        let m = keep.len();
        let bb: Vec<f64> = keep.iter().map(|&i| b[i]).collect();
        let mut cc = vec![0.0; m * m];
        for (r, &i) in keep.iter().enumerate() {
            for (s, &j) in keep.iter().enumerate() {
                cc[r * m + s] = cov[i * n + j];
            }
        }
        return orthant_cdf(&bb, &cc, cfg);
    }
    if n > cfg.max_dim {
        return Err(Error::Capacity(format!(
            "dimension {n} exceeds configured maximum {}",
            cfg.max_dim
        )));
    }
    match n {
        0 => Ok(CdfValue::ONE),
        1 => {
            let v = cov[0];
            if v < 0.0 {
                return Err(Error::Domain(format!("negative variance {v}")));
            }
            let value = if v == 0.0 {
                if b[0] >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                normal::cdf(b[0] / v.sqrt())
            };
            Ok(CdfValue {
                value,
                err_estimate: 0.0,
            })
        }
        2 if cov[0] > 0.0 && cov[3] > 0.0 => {
            let (s1, s2) = (cov[0].sqrt(), cov[3].sqrt());
            let r = cov[1] / (s1 * s2);
            if r.abs() > 1.0 + 1e-10 {
                return Err(Error::Domain(format!(
                    "covariance not positive semidefinite (correlation {r})"
                )));
            }
            let value = bvn::lower_orthant(b[0] / s1, b[1] / s2, r.clamp(-1.0, 1.0));
            Ok(CdfValue {
                value,
                err_estimate: 0.0,
            })
        }
        _ => {
            let f = factorize(b, cov, n, cfg.reorder)?;
            Ok(integrate(&f, cfg))
        }
    }
}

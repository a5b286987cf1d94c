//! Gaussian numerical primitives: orthant probabilities of multivariate
//! normals, conditioning of joint normals, and the skew-normal reduction
//! `Phi_m(l0; 0, D + L L^T) = E_z[Phi_m(l0 + L z; 0, D)]`.

pub mod bvn;
mod genz;
pub mod normal;

pub use genz::{orthant_cdf, CdfConfig, CdfValue};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// `Phi_n(upper; mean, cov)`.
#[derive(Clone, Debug)]
pub struct GaussianCdfQuery {
    pub upper: DVector<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianCdfQuery {
    pub fn new(upper: DVector<f64>, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { upper, mean, cov }
    }

    /// Zero-mean query.
    pub fn centered(upper: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let n = upper.len();
        Self {
            upper,
            mean: DVector::zeros(n),
            cov,
        }
    }

    pub fn dim(&self) -> usize {
        self.upper.len()
    }

    fn validate(&self, cfg: &CdfConfig) -> Result<()> {
        let n = self.dim();
        if n == 0 {
            return Err(Error::Domain("empty CDF query".into()));
        }
        if n > cfg.max_dim {
            return Err(Error::Capacity(format!(
                "dimension {n} exceeds configured maximum {}",
                cfg.max_dim
            )));
        }
        if self.mean.len() != n || self.cov.nrows() != n || self.cov.ncols() != n {
            return Err(Error::Domain("CDF query dimensions do not agree".into()));
        }
        for i in 0..n {
            if !(self.cov[(i, i)] > 0.0) {
                return Err(Error::Domain(format!("non-positive variance at {i}")));
            }
            for j in 0..i {
                let (a, b) = (self.cov[(i, j)], self.cov[(j, i)]);
                let scale = (self.cov[(i, i)] * self.cov[(j, j)]).sqrt();
                if (a - b).abs() > 1e-10 * scale {
                    return Err(Error::Domain(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Multivariate normal CDF with a randomized-QMC error estimate.
pub fn mvn_cdf(query: &GaussianCdfQuery, cfg: &CdfConfig) -> Result<CdfValue> {
    cfg.validate()?;
    query.validate(cfg)?;
    let n = query.dim();
    let b: Vec<f64> = (0..n).map(|i| query.upper[i] - query.mean[i]).collect();
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cov[i * n + j] = 0.5 * (query.cov[(i, j)] + query.cov[(j, i)]);
        }
    }
    orthant_cdf(&b, &cov, cfg)
}

/// Moments of `x_a | x_b = observed_values` for a joint normal.
pub fn conditional_normal(
    mean_joint: &DVector<f64>,
    cov_joint: &DMatrix<f64>,
    observed_idx: &[usize],
    observed_values: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = mean_joint.len();
    if cov_joint.nrows() != n
        || cov_joint.ncols() != n
        || observed_idx.len() != observed_values.len()
    {
        return Err(Error::Domain(
            "conditional_normal: dimension mismatch".into(),
        ));
    }
    let mut is_obs = vec![false; n];
    for &i in observed_idx {
        if i >= n || is_obs[i] {
            return Err(Error::Domain(format!("bad observed index {i}")));
        }
        is_obs[i] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&i| !is_obs[i]).collect();
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| cov_joint[(rows[r], cols[c])])
    };
    let s_aa = pick(&free, &free);
    let s_ab = pick(&free, observed_idx);
    let s_bb = pick(observed_idx, observed_idx);
    let mu_a = DVector::from_iterator(free.len(), free.iter().map(|&i| mean_joint[i]));
    if observed_idx.is_empty() {
        return Ok((mu_a, s_aa));
    }
    let resid = DVector::from_iterator(
        observed_idx.len(),
        observed_idx
            .iter()
            .zip(observed_values.iter())
            .map(|(&i, v)| v - mean_joint[i]),
    );
    let (gain_resid, gain_cov) = match s_bb.clone().cholesky() {
        Some(ch) => (ch.solve(&resid), ch.solve(&s_ab.transpose())),
        None => {
            let eig = s_bb.clone().symmetric_eigen();
            let max = eig.eigenvalues.amax();
            let min = eig.eigenvalues.min();
            if min < -1e-8 * max.max(1e-300) {
                return Err(Error::Numerical(format!(
                    "observed covariance block is indefinite (min eigenvalue {min:.3e})"
                )));
            }
            log::warn!("conditional_normal: singular observed block, using pseudo-inverse");
            let pinv = s_bb
                .svd(true, true)
                .pseudo_inverse(1e-10 * max.max(1e-300))
                .map_err(|e| Error::Numerical(e.to_string()))?;
            (&pinv * &resid, &pinv * s_ab.transpose())
        }
    };
    let mean = mu_a + &s_ab * gain_resid;
    let mut cov = s_aa - &s_ab * gain_cov;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean, cov))
}

/// `Phi_m(lambda0; 0, delta + lambda lambda^T)`, which equals
/// `integral Phi_m(lambda0 + lambda z; 0, delta) phi_k(z) dz`.
pub fn skew_normal_reduce(
    lambda0: &DVector<f64>,
    delta: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    cfg: &CdfConfig,
) -> Result<CdfValue> {
    let m = lambda0.len();
    if delta.shape() != (m, m) || lambda.nrows() != m {
        return Err(Error::Domain(
            "skew_normal_reduce: dimension mismatch".into(),
        ));
    }
    let cov = delta + lambda * lambda.transpose();
    mvn_cdf(&GaussianCdfQuery::centered(lambda0.clone(), cov), cfg)
}

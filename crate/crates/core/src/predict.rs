//! Predicted mean degradation toward the diagnosis threshold, with
//! Monte-Carlo bands over the sampling distribution of the estimates.

use crate::error::{Error, Result};
use crate::estimate::FitResult;
use crate::model::{design_row, parse_all, ModelSpec, ParameterLayout, Params, Term};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    /// Covariate values of the profile.
    pub profile: BTreeMap<String, f64>,
    /// Ascending model times.
    pub times: Vec<f64>,
    pub mc_draws: usize,
    pub level: f64,
    pub seed: u64,
}

impl PredictRequest {
    pub fn new(profile: BTreeMap<String, f64>, times: Vec<f64>, seed: u64) -> Self {
        PredictRequest {
            profile,
            times,
            mc_draws: 2000,
            level: 0.95,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() || self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Domain(
                "prediction needs a non-empty grid of finite times".into(),
            ));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain(
                "prediction times must be strictly ascending".into(),
            ));
        }
        if self.mc_draws == 0 {
            return Err(Error::Domain(
                "at least one Monte-Carlo draw is needed".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Domain(format!(
                "band level {} outside (0, 1)",
                self.level
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionPoint {
    pub time: f64,
    pub estimate: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub level: f64,
    /// Parameter draws behind the band; 0 when the band is omitted.
    pub draws: usize,
    pub points: Vec<PredictionPoint>,
}

struct Curve {
    fixed: Vec<Vec<Term>>,
    threshold: Vec<Term>,
    gamma: Vec<Vec<f64>>,
}

impl Curve {
    fn new(spec: &ModelSpec, profile: &BTreeMap<String, f64>) -> Result<Curve> {
        let ds = spec.diagnosis.as_ref().ok_or_else(|| {
            Error::Schema("prediction needs a model with a diagnosis process".into())
        })?;
        let gamma = (0..spec.n_domains())
            .map(|d| {
                let terms = parse_all(ds.contributions.get(d).map_or(&[][..], Vec::as_slice))?;
                design_row(&terms, 0.0, profile, "profile")
            })
            .collect::<Result<_>>()?;
        Ok(Curve {
            fixed: spec
                .domains
                .iter()
                .map(|d| parse_all(&d.fixed))
                .collect::<Result<_>>()?,
            threshold: parse_all(&ds.threshold)?,
            gamma,
        })
    }

    /// Mean degradation minus the threshold at each time.
    fn eval(&self, p: &Params, profile: &BTreeMap<String, f64>, times: &[f64]) -> Result<Vec<f64>> {
        let ep = p
            .diag
            .as_ref()
            .ok_or_else(|| Error::Schema("parameters lack the diagnosis block".into()))?;
        times
            .iter()
            .map(|&t| {
                let mut v = 0.0;
                for (d, dp) in p.domains.iter().enumerate() {
                    let g: f64 = self.gamma[d]
                        .iter()
                        .zip(&ep.contrib[d])
                        .map(|(a, b)| a * b)
                        .sum();
                    if g != 0.0 {
                        let x = design_row(&self.fixed[d], t, profile, "profile")?;
                        v += g * x.iter().zip(&dp.beta).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                let z = design_row(&self.threshold, t, profile, "profile")?;
                Ok(v - z.iter().zip(&ep.zeta).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect()
    }
}

/// Mean recentered degradation `E[Δ(t)] - ζ(t)` of the profile; 0 marks the
/// level above which diagnosis becomes positive.
pub fn degradation_curve(
    spec: &ModelSpec,
    p: &Params,
    profile: &BTreeMap<String, f64>,
    times: &[f64],
) -> Result<Vec<f64>> {
    Curve::new(spec, profile)?.eval(p, profile, times)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Square root of a covariance, tolerating tiny negative eigenvalues.
fn cov_root(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = cov.clone().cholesky() {
        return ch.l();
    }
    let eig = SymmetricEigen::new(cov.clone());
    &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
}

/// Point curve at the estimates plus a band from `mc_draws` parameter
/// vectors, the first being the estimate itself and the rest drawn from the
/// asymptotic normal distribution.
pub fn predict(spec: &ModelSpec, fit: &FitResult, req: &PredictRequest) -> Result<Prediction> {
    req.validate()?;
    let layout = ParameterLayout::new(spec)?;
    if fit.theta_hat.len() != layout.len() {
        return Err(Error::Schema(
            "fitted parameters do not match the model layout".into(),
        ));
    }
    let curve = Curve::new(spec, &req.profile)?;
    let estimate = curve.eval(&layout.unpack(&fit.theta_hat)?, &req.profile, &req.times)?;

    let Some(cov) = &fit.covariance else {
        log::warn!("no covariance of the estimates; prediction bands omitted");
        let points = req
            .times
            .iter()
            .zip(&estimate)
            .map(|(&time, &e)| PredictionPoint {
                time,
                estimate: e,
                lower: None,
                upper: None,
            })
            .collect();
        return Ok(Prediction {
            level: req.level,
            draws: 0,
            points,
        });
    };
    let free = layout.free_indices();
    let k = free.len();
    if cov.len() != k * k {
        return Err(Error::Schema(
            "covariance does not match the free parameters".into(),
        ));
    }
    let root = cov_root(&DMatrix::from_row_slice(k, k, cov));
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut curves = vec![estimate.clone()];
    let mut theta = fit.theta_hat.clone();
    for _ in 1..req.mc_draws {
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let step = &root * z;
        for (j, &i) in free.iter().enumerate() {
            theta[i] = fit.theta_hat[i] + step[j];
        }
        curves.push(curve.eval(&layout.unpack(&theta)?, &req.profile, &req.times)?);
    }
    let tail = 0.5 * (1.0 - req.level);
    let points = req
        .times
        .iter()
        .enumerate()
        .map(|(j, &time)| {
            let mut col: Vec<f64> = curves.iter().map(|c| c[j]).collect();
            col.sort_by(f64::total_cmp);
            PredictionPoint {
                time,
                estimate: estimate[j],
                lower: Some(quantile(&col, tail)),
                upper: Some(quantile(&col, 1.0 - tail)),
            }
        })
        .collect();
    Ok(Prediction {
        level: req.level,
        draws: req.mc_draws,
        points,
    })
}

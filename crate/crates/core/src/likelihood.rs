//! Closed-form log-likelihood of the joint model.
//!
//! Per subject, the transformed markers are jointly normal, so the marker
//! part is a normal log-density plus the link log-Jacobians. Given the
//! markers the latent processes at the endpoint occasions are normal too,
//! and the probability of the observed endpoint pattern integrates to one
//! orthant probability `Phi(zeta - Gamma mu; 0, I + Gamma V Gamma^T)`.
//! A positive final coordinate is handled by flipping its sign, which turns
//! the usual difference of two CDFs into a single orthant probability.

use crate::error::{Error, Result};
use crate::links::LinkKind;
use crate::model::{
    assemble_designs, DesignBundle, EndpointSet, LatentPoints, ModelSpec, ParameterLayout, Params,
    Process, SubjectData,
};
use crate::mvn::{orthant_cdf, CdfConfig, CdfValue};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectLogLik {
    pub marginal_marker_ll: f64,
    pub endpoint_ll: f64,
    pub entry_correction: f64,
    pub total: f64,
}

/// Counters accumulated over one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Endpoint probabilities floored at 1e-300.
    pub floored: usize,
    /// Subjects whose marker covariance was not positive definite.
    pub non_psd: usize,
    /// Evaluations rejected for a non-PSD random-effect covariance.
    pub non_psd_b: usize,
}

impl Diagnostics {
    fn add(&mut self, o: &Diagnostics) {
        self.floored += o.floored;
        self.non_psd += o.non_psd;
        self.non_psd_b += o.non_psd_b;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TotalLogLik {
    pub value: f64,
    pub diagnostics: Diagnostics,
    /// First subject (by index) that produced the `-inf` sentinel.
    pub offending: Option<String>,
}

/// Conditional moments and endpoint structures of one subject.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub mu_hy: DVector<f64>,
    pub v_hy: DMatrix<f64>,
    pub h_y: DVector<f64>,
    /// `log phi(H(Y); mu_hy, v_hy)`.
    pub log_density: f64,
    pub log_jacobian: f64,
    pub mu_lambda: DVector<f64>,
    pub v_lambda: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub zeta: DVector<f64>,
}

/// Parameter-dependent quantities shared by every subject.
struct Prepared {
    p: Params,
    beta: DVector<f64>,
    b: DMatrix<f64>,
}

/// Log-likelihood evaluator over a fixed dataset.
#[derive(Clone, Debug)]
pub struct Likelihood {
    pub spec: ModelSpec,
    pub layout: ParameterLayout,
    pub designs: Vec<DesignBundle>,
    pub cdf: CdfConfig,
}

/// Likelihood-mode CDF settings: fixed lattice size, no reordering.
pub fn default_cdf_config(seed: u64) -> CdfConfig {
    CdfConfig {
        randomizations: 2,
        ..CdfConfig::smooth(64, seed)
    }
}

impl Likelihood {
    pub fn new(spec: &ModelSpec, data: &[SubjectData], cdf: CdfConfig) -> Result<Self> {
        spec.validate()?;
        cdf.validate()?;
        let layout = ParameterLayout::new(spec)?;
        let designs = data
            .iter()
            .map(|s| assemble_designs(spec, s))
            .collect::<Result<Vec<_>>>()?;
        let lik = Self {
            spec: spec.clone(),
            layout,
            designs,
            cdf,
        };
        lik.check_data()?;
        Ok(lik)
    }

    fn check_data(&self) -> Result<()> {
        for d in &self.designs {
            for i in 0..d.n_obs() {
                let m = &self.spec.domains[d.obs_domain[i]].markers[d.obs_marker[i]];
                if let (LinkKind::Ispline, Some((lo, hi))) = (m.link.kind, m.link.boundary) {
                    let y = d.obs_value[i];
                    if !(y >= lo && y <= hi) {
                        return Err(Error::Domain(format!(
                            "subject {}: marker {} value {y} outside link boundary [{lo}, {hi}]",
                            d.id, m.name
                        )));
                    }
                }
            }
            if self.spec.domains.iter().any(|d| d.brownian) {
                let t0 = self.spec.brownian_origin;
                let times = d.obs_time.iter().chain(&d.endpoint.points.times);
                if let Some(t) = times.copied().find(|&t| t < t0) {
                    return Err(Error::Schema(format!(
                        "subject {}: time {t} precedes the Brownian origin {t0}",
                        d.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.designs.len()
    }

    fn prepare(&self, theta: &[f64]) -> Result<Option<Prepared>> {
        let p = self.layout.unpack(theta)?;
        let (b, pd) = p.b.build();
        if !pd {
            return Ok(None);
        }
        let beta = DVector::from_iterator(
            self.spec.p_total(),
            p.domains.iter().flat_map(|d| d.beta.iter().copied()),
        );
        Ok(Some(Prepared { p, beta, b }))
    }

    fn subject_cdf(&self, i: usize) -> CdfConfig {
        let seed = self
            .cdf
            .rng_seed
            .wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.cdf.clone().with_seed(seed)
    }

    /// Brownian covariance between rows (domain, time) of two point lists.
    fn brownian(&self, p: &Params, a: &[(usize, f64)], b: &[(usize, f64)]) -> Option<DMatrix<f64>> {
        if !self.spec.domains.iter().any(|d| d.brownian) {
            return None;
        }
        let t0 = self.spec.brownian_origin;
        Some(DMatrix::from_fn(a.len(), b.len(), |r, c| {
            let (da, ta) = a[r];
            let (db, tb) = b[c];
            if da == db && self.spec.domains[da].brownian {
                let s = p.domains[da].sigma_w;
                s * s * (ta - t0).min(tb - t0)
            } else {
                0.0
            }
        }))
    }

    fn point_rows(&self, pts: &LatentPoints) -> Vec<(usize, f64)> {
        (0..self.spec.n_domains())
            .flat_map(|d| pts.times.iter().map(move |&t| (d, t)))
            .collect()
    }

    /// Prior moments of the latent processes at `pts`.
    fn prior(&self, pr: &Prepared, pts: &LatentPoints) -> (DVector<f64>, DMatrix<f64>) {
        let mu = &pts.x * &pr.beta;
        let mut v = &pts.z * &pr.b * pts.z.transpose();
        if let Some(r) = {
            let rows = self.point_rows(pts);
            self.brownian(&pr.p, &rows, &rows)
        } {
            v += r;
        }
        (mu, v)
    }

    fn contributions(&self, pr: &Prepared, d: &DesignBundle, process: Process) -> Vec<f64> {
        let (rows, ep) = match process {
            Process::Diag => (&d.gamma_rows, pr.p.diag.as_ref()),
            Process::Death => (&d.delta_rows, pr.p.death.as_ref()),
        };
        let ep = ep.expect("endpoint parameters present");
        rows.iter()
            .zip(&ep.contrib)
            .map(|(r, c)| r.iter().zip(c).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Gamma` (coords x D*T) and the thresholds of an endpoint set.
    fn gamma_zeta(
        &self,
        pr: &Prepared,
        d: &DesignBundle,
        set: &EndpointSet,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let nd = self.spec.n_domains();
        let t_len = set.points.len();
        let nc = set.coords.len();
        let g_diag = if self.spec.diagnosis.is_some() {
            self.contributions(pr, d, Process::Diag)
        } else {
            Vec::new()
        };
        let g_death = if self.spec.death.is_some() {
            self.contributions(pr, d, Process::Death)
        } else {
            Vec::new()
        };
        let mut gamma = DMatrix::zeros(nc, nd * t_len);
        let mut zeta = DVector::zeros(nc);
        for (c, coord) in set.coords.iter().enumerate() {
            let (g, z) = match coord.process {
                Process::Diag => (&g_diag, &pr.p.diag.as_ref().unwrap().zeta),
                Process::Death => (&g_death, &pr.p.death.as_ref().unwrap().zeta),
            };
            for dd in 0..nd {
                gamma[(c, dd * t_len + coord.point)] = g[dd];
            }
            zeta[c] = coord.threshold_row.iter().zip(z).map(|(a, b)| a * b).sum();
        }
        (gamma, zeta)
    }

    /// Orthant probability of the endpoint pattern given latent moments.
    fn pattern_log_prob(
        &self,
        set: &EndpointSet,
        gamma: &DMatrix<f64>,
        zeta: &DVector<f64>,
        mu: &DVector<f64>,
        v: &DMatrix<f64>,
        cfg: &CdfConfig,
        diag: &mut Diagnostics,
    ) -> Result<f64> {
        let n = set.coords.len();
        if n == 0 {
            return Ok(0.0);
        }
        let mut upper = zeta - gamma * mu;
        let mut s = gamma * v * gamma.transpose();
        for c in 0..n {
            s[(c, c)] += 1.0;
        }
        if let Some(p) = set.positive {
            upper[p] = -upper[p];
            for c in 0..n {
                if c != p {
                    s[(p, c)] = -s[(p, c)];
                    s[(c, p)] = -s[(c, p)];
                }
            }
        }
        let mut flat = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                flat[r * n + c] = 0.5 * (s[(r, c)] + s[(c, r)]);
            }
        }
        let value = orthant_cdf(upper.as_slice(), &flat, cfg)?.value;
        if value < FLOOR {
            diag.floored += 1;
            return Ok(FLOOR.ln());
        }
        Ok(value.ln())
    }

    /// Marker part and conditional latent moments; `None` when the marker
    /// covariance is not positive definite or a link scale degenerates.
    fn marker_part(&self, pr: &Prepared, d: &DesignBundle) -> Result<Option<Workspace>> {
        let n = d.n_obs();
        let mut h = DVector::zeros(n);
        let mut log_j = 0.0;
        let mut err_var = DVector::zeros(n);
        for i in 0..n {
            let (dd, k) = (d.obs_domain[i], d.obs_marker[i]);
            let link = &self.spec.domains[dd].markers[k].link;
            let lp = &pr.p.domains[dd].links[k];
            if link.kind == LinkKind::Linear && !(lp.eta[1].abs() > 1e-8) {
                return Ok(None);
            }
            let (v, j) = link.transform_with_jacobian(lp, d.obs_value[i])?;
            if !(j > 0.0) {
                return Ok(None);
            }
            h[i] = v;
            log_j += j.ln();
            let s = pr.p.domains[dd].sigma[k];
            err_var[i] = s * s;
        }
        let mu_hy = &d.x * &pr.beta;
        let zb = &d.z * &pr.b;
        let mut v_hy = &zb * d.z.transpose();
        let obs_rows: Vec<(usize, f64)> =
            (0..n).map(|i| (d.obs_domain[i], d.obs_time[i])).collect();
        if let Some(r) = self.brownian(&pr.p, &obs_rows, &obs_rows) {
            v_hy += r;
        }
        for i in 0..n {
            v_hy[(i, i)] += err_var[i];
        }
        let pts = &d.endpoint.points;
        let (mu_prior, v_prior) = self.prior(pr, pts);
        let (mu_lambda, v_lambda, marker_ll) = if n == 0 {
            (mu_prior, v_prior, 0.0)
        } else {
            let Some(chol) = Cholesky::<f64, Dyn>::new(v_hy.clone()) else {
                return Ok(None);
            };
            let l = chol.l_dirty();
            let resid = &h - &mu_hy;
            let u = l.solve_lower_triangular(&resid).expect("triangular");
            let log_det: f64 = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
            let ll = -0.5 * (n as f64 * (2.0 * PI).ln() + log_det + u.norm_squared());
            if pts.is_empty() {
                (mu_prior, v_prior, ll)
            } else {
                let mut cross = &pts.z * zb.transpose();
                let pt_rows = self.point_rows(pts);
                if let Some(r) = self.brownian(&pr.p, &pt_rows, &obs_rows) {
                    cross += r;
                }
                let w = l
                    .solve_lower_triangular(&cross.transpose())
                    .expect("triangular");
                let mu = mu_prior + w.transpose() * &u;
                let mut v = v_prior - w.transpose() * &w;
                v = 0.5 * (&v + v.transpose());
                (mu, v, ll)
            }
        };
        let (gamma, zeta) = if d.endpoint.coords.is_empty() {
            (
                DMatrix::zeros(0, pts.len() * self.spec.n_domains()),
                DVector::zeros(0),
            )
        } else {
            self.gamma_zeta(pr, d, &d.endpoint)
        };
        Ok(Some(Workspace {
            mu_hy,
            v_hy,
            h_y: h,
            log_density: marker_ll,
            log_jacobian: log_j,
            mu_lambda,
            v_lambda,
            gamma,
            zeta,
        }))
    }

    fn subject_with(
        &self,
        pr: &Prepared,
        i: usize,
        diag: &mut Diagnostics,
    ) -> Result<SubjectLogLik> {
        let d = &self.designs[i];
        let Some(ws) = self.marker_part(pr, d)? else {
            diag.non_psd += 1;
            return Ok(neg_inf());
        };
        let marker_ll = ws.log_density + ws.log_jacobian;
        let cfg = self.subject_cdf(i);
        let endpoint_ll = self.pattern_log_prob(
            &d.endpoint,
            &ws.gamma,
            &ws.zeta,
            &ws.mu_lambda,
            &ws.v_lambda,
            &cfg,
            diag,
        )?;
        let entry_correction = match &d.entry {
            Some(set) => {
                let (mu, v) = self.prior(pr, &set.points);
                let (g, z) = self.gamma_zeta(pr, d, set);
                self.pattern_log_prob(set, &g, &z, &mu, &v, &cfg, diag)?
            }
            None => 0.0,
        };
        let total = marker_ll + endpoint_ll - entry_correction;
        Ok(SubjectLogLik {
            marginal_marker_ll: marker_ll,
            endpoint_ll,
            entry_correction,
            total,
        })
    }

    /// Per-subject decomposition at `theta` (full parameter vector).
    pub fn subject(&self, theta: &[f64], i: usize) -> Result<SubjectLogLik> {
        let mut diag = Diagnostics::default();
        match self.prepare(theta)? {
            Some(pr) => self.subject_with(&pr, i, &mut diag),
            None => Ok(neg_inf()),
        }
    }

    /// Conditional moments and endpoint structure of subject `i`.
    pub fn workspace(&self, theta: &[f64], i: usize) -> Result<Option<Workspace>> {
        match self.prepare(theta)? {
            Some(pr) => self.marker_part(&pr, &self.designs[i]),
            None => Ok(None),
        }
    }

    /// Conditional probability, given the subject's markers, that the first
    /// `n` endpoint coordinates are all negative, or (with `positive`) that
    /// the first `n - 1` are negative and coordinate `n` is positive.
    pub fn pattern_probability(
        &self,
        theta: &[f64],
        i: usize,
        n: usize,
        positive: bool,
    ) -> Result<CdfValue> {
        let ws = self
            .workspace(theta, i)?
            .ok_or_else(|| Error::Numerical("marker covariance not positive definite".into()))?;
        let total = ws.zeta.len();
        if n > total || (positive && n == 0) {
            return Err(Error::Domain(format!(
                "pattern over {n} of {total} coordinates"
            )));
        }
        if n == 0 {
            return Ok(CdfValue::ONE);
        }
        let g = ws.gamma.rows(0, n).into_owned();
        let mut upper = ws.zeta.rows(0, n) - &g * &ws.mu_lambda;
        let mut s = &g * &ws.v_lambda * g.transpose();
        for c in 0..n {
            s[(c, c)] += 1.0;
        }
        if positive {
            let p = n - 1;
            upper[p] = -upper[p];
            for c in 0..p {
                s[(p, c)] = -s[(p, c)];
                s[(c, p)] = -s[(c, p)];
            }
        }
        let flat: Vec<f64> = (0..n * n)
            .map(|k| 0.5 * (s[(k / n, k % n)] + s[(k % n, k / n)]))
            .collect();
        orthant_cdf(upper.as_slice(), &flat, &self.subject_cdf(i))
    }

    /// Sum over subjects in index order; worker count does not change the
    /// result.
    pub fn evaluate(&self, theta: &[f64]) -> Result<TotalLogLik> {
        let Some(pr) = self.prepare(theta)? else {
            return Ok(TotalLogLik {
                value: f64::NEG_INFINITY,
                diagnostics: Diagnostics {
                    non_psd_b: 1,
                    ..Default::default()
                },
                offending: None,
            });
        };
        let parts: Vec<Result<(SubjectLogLik, Diagnostics)>> = (0..self.designs.len())
            .into_par_iter()
            .map(|i| {
                let mut dg = Diagnostics::default();
                self.subject_with(&pr, i, &mut dg).map(|s| (s, dg))
            })
            .collect();
        let mut value = 0.0;
        let mut diagnostics = Diagnostics::default();
        let mut offending = None;
        for (i, part) in parts.into_iter().enumerate() {
            let (s, dg) = part?;
            diagnostics.add(&dg);
            if s.total == f64::NEG_INFINITY && offending.is_none() {
                offending = Some(self.designs[i].id.clone());
            }
            value += s.total;
        }
        if value.is_nan() {
            return Err(Error::Numerical("log-likelihood is NaN".into()));
        }
        Ok(TotalLogLik {
            value,
            diagnostics,
            offending,
        })
    }

    pub fn total(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(theta)?.value)
    }
}

fn neg_inf() -> SubjectLogLik {
    SubjectLogLik {
        marginal_marker_ll: f64::NEG_INFINITY,
        endpoint_ll: 0.0,
        entry_correction: 0.0,
        total: f64::NEG_INFINITY,
    }
}

//! Maximum-likelihood estimation: finite-difference derivatives, a
//! Marquardt-type Newton iteration, inverse-Hessian standard errors and a
//! staged initialization.

use crate::error::{Error, Result};
use crate::likelihood::Likelihood;
use crate::links::LinkKind;
use crate::model::{correlation, CovarianceB, ModelSpec, ParameterLayout, Process, SubjectData};
use crate::mvn::normal::inv_cdf as phi_inv;
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Bound on `max |Δθ|` between accepted iterates.
    pub param_tol: f64,
    /// Bound on the log-likelihood change between accepted iterates.
    pub ll_tol: f64,
    /// Bound on the relative distance to the maximum `gᵀ H⁻¹ g / n`.
    pub rdm_tol: f64,
    pub max_iter: usize,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Factor applied to the damping after a rejected step.
    pub marquardt_inflation: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            param_tol: 1e-4,
            ll_tol: 1e-4,
            rdm_tol: 1e-3,
            max_iter: 100,
            fd_step: 1e-4,
            marquardt_inflation: 10.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.param_tol, self.ll_tol, self.rdm_tol, self.fd_step]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
            && self.marquardt_inflation > 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(
                "optimizer tolerances and step must be positive, inflation above 1".into(),
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvergenceFlags {
    pub params: bool,
    pub ll: bool,
    pub rdm: bool,
}

impl ConvergenceFlags {
    pub fn all(&self) -> bool {
        self.params && self.ll && self.rdm
    }
}

/// JSON carries no infinities; non-finite values travel as strings.
mod extended_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(de::Error::custom(format!("not a number: {t}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    #[serde(with = "extended_float")]
    pub ll: f64,
    pub nu: f64,
    /// Largest parameter change of the previous step; absent at the start.
    pub max_step: Option<f64>,
    #[serde(with = "extended_float")]
    pub rdm: f64,
}

/// Outcome of a maximization over the free parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Full parameter vector, fixed entries included.
    pub theta_hat: Vec<f64>,
    pub free_names: Vec<String>,
    /// Standard errors of the free entries.
    pub se: Vec<Option<f64>>,
    /// Inverse Hessian of `-LL` over the free entries, row-major.
    pub covariance: Option<Vec<f64>>,
    #[serde(with = "extended_float")]
    pub final_ll: f64,
    #[serde(with = "extended_float")]
    pub initial_ll: f64,
    #[serde(with = "extended_float")]
    pub rdm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub convergence_flags: ConvergenceFlags,
    pub trace: Vec<IterationRecord>,
}

/// Value, gradient and Hessian from one finite-difference sweep.
#[derive(Clone, Debug)]
pub struct Derivatives {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

fn steps(x: &[f64], rel: f64) -> Vec<f64> {
    x.iter().map(|v| rel * v.abs().max(1.0)).collect()
}

fn shifted(x: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut y = x.to_vec();
    for &(j, h) in moves {
        y[j] += h;
    }
    y
}

fn eval_all<F>(f: &F, points: &[Vec<f64>]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    points.par_iter().map(|p| f(p)).collect()
}

/// Central-difference pairs `f(x ± h_j e_j)`, halving a coordinate's step
/// while either side is non-finite.
fn central_pairs<F>(f: &F, x: &[f64], h: &mut [f64]) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let n = x.len();
    let mut out = vec![(f64::NAN, f64::NAN); n];
    let mut pending: Vec<usize> = (0..n).collect();
    for attempt in 0..=5 {
        let points: Vec<Vec<f64>> = pending
            .iter()
            .flat_map(|&j| [shifted(x, &[(j, h[j])]), shifted(x, &[(j, -h[j])])])
            .collect();
        let vals = eval_all(f, &points)?;
        let mut retry = Vec::new();
        for (k, &j) in pending.iter().enumerate() {
            let (a, b) = (vals[2 * k], vals[2 * k + 1]);
            if a.is_finite() && b.is_finite() {
                out[j] = (a, b);
            } else if attempt < 5 {
                h[j] *= 0.5;
                retry.push(j);
            } else {
                return Err(Error::Numerical(format!(
                    "non-finite log-likelihood around coordinate {j}"
                )));
            }
        }
        if retry.is_empty() {
            break;
        }
        pending = retry;
    }
    Ok(out)
}

/// Gradient by central differences with step `rel·max(|x_j|, 1)`.
pub fn fd_gradient<F>(f: &F, x: &[f64], rel: f64) -> Result<DVector<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let mut h = steps(x, rel);
    let pairs = central_pairs(f, x, &mut h)?;
    Ok(DVector::from_iterator(
        x.len(),
        pairs.iter().zip(&h).map(|((a, b), h)| (a - b) / (2.0 * h)),
    ))
}

/// Value, central gradient and symmetrized Hessian. Diagonal entries are
/// central second differences; off-diagonals use the forward four-point
/// rule, which reuses the `+h` evaluations, or the same rule on another
/// corner when the forward corner is infeasible.
pub fn fd_derivatives<F>(f: &F, x: &[f64], rel: f64) -> Result<Derivatives>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let n = x.len();
    let value = f(x)?;
    if !value.is_finite() {
        return Err(Error::Numerical(
            "log-likelihood not finite at the expansion point".into(),
        ));
    }
    let mut h = steps(x, rel);
    let pairs = central_pairs(f, x, &mut h)?;
    let gradient = DVector::from_iterator(
        n,
        pairs.iter().zip(&h).map(|((a, b), h)| (a - b) / (2.0 * h)),
    );
    let mut hessian = DMatrix::zeros(n, n);
    for j in 0..n {
        hessian[(j, j)] = (pairs[j].0 - 2.0 * value + pairs[j].1) / (h[j] * h[j]);
    }
    let idx: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let points: Vec<Vec<f64>> = idx
        .iter()
        .map(|&(i, j)| shifted(x, &[(i, h[i]), (j, h[j])]))
        .collect();
    let vals = eval_all(f, &points)?;
    // near the edge of the parameter space, fall back to the other corners
    let side = |p: (f64, f64), s: f64| if s > 0.0 { p.0 } else { p.1 };
    let cross: Vec<Result<f64>> = idx
        .par_iter()
        .zip(vals)
        .map(|(&(i, j), v)| {
            if v.is_finite() {
                return Ok((v - pairs[i].0 - pairs[j].0 + value) / (h[i] * h[j]));
            }
            for (si, sj) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)] {
                let c = f(&shifted(x, &[(i, si * h[i]), (j, sj * h[j])]))?;
                if c.is_finite() {
                    let e = (c - side(pairs[i], si) - side(pairs[j], sj) + value) / (h[i] * h[j]);
                    return Ok(si * sj * e);
                }
            }
            Err(Error::Numerical(format!(
                "non-finite log-likelihood at every cross step ({i}, {j})"
            )))
        })
        .collect();
    for (&(i, j), e) in idx.iter().zip(cross) {
        let e = e?;
        hessian[(i, j)] = e;
        hessian[(j, i)] = e;
    }
    let hessian = (&hessian + hessian.transpose()) * 0.5;
    Ok(Derivatives {
        value,
        gradient,
        hessian,
    })
}

pub fn fd_hessian<F>(f: &F, x: &[f64], rel: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    Ok(fd_derivatives(f, x, rel)?.hessian)
}

/// Standard errors from the Hessian of `-LL`, with the covariance when it
/// is positive definite. Entries loading on non-positive eigen-directions
/// get no standard error.
pub fn standard_errors(neg_hessian: &DMatrix<f64>) -> (Vec<Option<f64>>, Option<DMatrix<f64>>) {
    let n = neg_hessian.nrows();
    if n == 0 {
        return (Vec::new(), Some(DMatrix::zeros(0, 0)));
    }
    if let Some(ch) = Cholesky::new(neg_hessian.clone()) {
        let cov = ch.inverse();
        let se = (0..n).map(|i| Some(cov[(i, i)].sqrt())).collect();
        return (se, Some(cov));
    }
    let eig = SymmetricEigen::new(neg_hessian.clone());
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let mut affected = vec![false; n];
    let mut pinv = DMatrix::zeros(n, n);
    for k in 0..n {
        let v = eig.eigenvectors.column(k);
        if eig.eigenvalues[k] > 1e-12 * scale {
            pinv += v * v.transpose() / eig.eigenvalues[k];
        } else {
            for i in 0..n {
                if v[i] * v[i] > 1e-8 {
                    affected[i] = true;
                }
            }
        }
    }
    log::warn!(
        "Hessian not positive definite; {} standard errors unavailable",
        affected.iter().filter(|a| **a).count()
    );
    let se = (0..n)
        .map(|i| (!affected[i]).then(|| pinv[(i, i)].sqrt()))
        .collect();
    (se, None)
}

/// Result of [`maximize`] on a generic objective.
#[derive(Clone, Debug)]
pub struct Maximum {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub rdm: f64,
    pub iterations: usize,
    pub flags: ConvergenceFlags,
    pub neg_hessian: Option<DMatrix<f64>>,
    pub trace: Vec<IterationRecord>,
}

fn rdm_of(neg_hessian: &DMatrix<f64>, g: &DVector<f64>) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    match Cholesky::new(neg_hessian.clone()) {
        Some(ch) => g.dot(&ch.solve(g)) / g.len() as f64,
        None => f64::INFINITY,
    }
}

/// Damped Newton ascent: solves `(-H + ν·diag|H|) δ = g`, inflating `ν`
/// until the step does not decrease `f`.
pub fn maximize<F>(f: &F, x0: &[f64], cfg: &OptimizerConfig) -> Result<Maximum>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut value = f(&x)?;
    if !value.is_finite() {
        return Err(Error::Init(
            "log-likelihood is not finite at the starting values".into(),
        ));
    }
    let initial_value = value;
    let mut nu = 1e-2;
    let mut last_step: Option<(f64, f64)> = None;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut flags = ConvergenceFlags::default();
    let mut rdm = f64::INFINITY;
    let mut neg_hessian = None;
    loop {
        let d = match fd_derivatives(f, &x, cfg.fd_step) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("derivatives failed at iteration {iterations}: {e}");
                break;
            }
        };
        let nh = -d.hessian;
        rdm = rdm_of(&nh, &d.gradient);
        flags.rdm = rdm <= cfg.rdm_tol;
        if let Some((dx, dll)) = last_step {
            flags.params = dx <= cfg.param_tol;
            flags.ll = dll.abs() <= cfg.ll_tol;
        }
        neg_hessian = Some(nh.clone());
        let record = IterationRecord {
            iter: iterations,
            ll: value,
            nu,
            max_step: last_step.map(|s| s.0),
            rdm,
        };
        log::info!(
            "iter {:>3}  ll {:.6}  nu {:.2e}  max|dtheta| {:.3e}  rdm {:.3e}",
            record.iter,
            record.ll,
            record.nu,
            record.max_step.unwrap_or(f64::NAN),
            record.rdm
        );
        trace.push(record);
        if flags.all() || iterations >= cfg.max_iter {
            break;
        }
        let scale: Vec<f64> = (0..n).map(|i| nh[(i, i)].abs().max(1e-8)).collect();
        let mut accepted = None;
        while nu <= 1e16 {
            let mut a = nh.clone();
            for i in 0..n {
                a[(i, i)] += nu * scale[i];
            }
            if let Some(ch) = Cholesky::new(a) {
                let delta = ch.solve(&d.gradient);
                let cand: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
                let fv = f(&cand)?;
                if fv.is_finite() && fv >= value {
                    accepted = Some((cand, fv, delta.amax()));
                    break;
                }
            }
            nu = (nu * cfg.marquardt_inflation).max(1e-6);
        }
        let Some((cand, fv, dx)) = accepted else {
            // no ascent direction left: judge convergence at the current point
            flags.params = true;
            flags.ll = true;
            break;
        };
        last_step = Some((dx, fv - value));
        x = cand;
        value = fv;
        iterations += 1;
        nu = (nu / cfg.marquardt_inflation).max(1e-10);
    }
    Ok(Maximum {
        x,
        value,
        initial_value,
        rdm,
        iterations,
        flags,
        neg_hessian,
        trace,
    })
}

/// Maximizes the log-likelihood over the free entries from `theta0`.
pub fn marquardt_fit(lik: &Likelihood, theta0: &[f64], cfg: &OptimizerConfig) -> Result<FitResult> {
    let layout = &lik.layout;
    if theta0.len() != layout.len() {
        return Err(Error::Schema(format!(
            "expected {} parameters, got {}",
            layout.len(),
            theta0.len()
        )));
    }
    let objective = |free: &[f64]| -> Result<f64> { lik.total(&layout.expand(free)?) };
    let m = maximize(&objective, &layout.free(theta0), cfg)?;
    let raw = layout.expand(&m.x)?;
    let theta_hat = layout.canonicalize(&lik.spec, &raw)?;
    let (se, cov) = match &m.neg_hessian {
        Some(nh) => standard_errors(nh),
        None => (vec![None; m.x.len()], None),
    };
    // sign flips from canonicalization carry over to the covariance
    let free_idx = layout.free_indices();
    let signs: Vec<f64> = free_idx
        .iter()
        .map(|&i| {
            if theta_hat[i] == -raw[i] && raw[i] != 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    let covariance = cov.map(|c| {
        let k = c.nrows();
        (0..k * k)
            .map(|e| c[(e / k, e % k)] * signs[e / k] * signs[e % k])
            .collect()
    });
    Ok(FitResult {
        theta_hat,
        free_names: layout.free_names().into_iter().map(String::from).collect(),
        se,
        covariance,
        final_ll: m.value,
        initial_ll: m.initial_value,
        rdm: m.rdm,
        iterations: m.iterations,
        converged: m.flags.all(),
        convergence_flags: m.flags,
        trace: m.trace,
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Starting values without any fitting: zero effects, unit error SDs,
/// slope SDs 0.5, links matched to the pooled marker moments, thresholds
/// from endpoint frequencies.
pub fn neutral_start(spec: &ModelSpec, data: &[SubjectData]) -> Result<Vec<f64>> {
    let layout = ParameterLayout::new(spec)?;
    let mut p = layout.unpack(&vec![0.0; layout.len()])?;
    for (d, dom) in spec.domains.iter().enumerate() {
        let dp = &mut p.domains[d];
        for (k, m) in dom.markers.iter().enumerate() {
            let vals: Vec<f64> = data
                .iter()
                .flat_map(|s| s.markers.iter())
                .filter(|o| o.domain == d && o.marker == k)
                .map(|o| o.value)
                .collect();
            let (mean, sd) = mean_sd(&vals);
            let sd = if sd > 0.0 { sd } else { 1.0 };
            dp.sigma[k] = 1.0;
            let eta = &mut dp.links[k].eta;
            match m.link.kind {
                LinkKind::Linear => {
                    eta[0] = mean;
                    eta[1] = sd * std::f64::consts::SQRT_2;
                }
                LinkKind::Ispline => {
                    let (lo, hi) = m.link.boundary.ok_or_else(|| {
                        Error::Schema(format!("marker {}: unresolved boundary", m.name))
                    })?;
                    let nb = (m.link.n_params() - 1) as f64;
                    eta[0] = std::f64::consts::SQRT_2 * (lo - mean) / sd;
                    let c = (std::f64::consts::SQRT_2 * (hi - lo) / sd / nb).sqrt();
                    for e in eta.iter_mut().skip(1) {
                        *e = c;
                    }
                }
            }
        }
        dp.sigma_w = if dom.brownian { 0.5 } else { 0.0 };
    }
    for s in p.b.sigmas.iter_mut() {
        *s = 0.5;
    }
    let (diag0, death0) = threshold_start(spec, data)?;
    if let Some(ep) = p.diag.as_mut() {
        ep.zeta[0] = diag0;
    }
    if let Some(ep) = p.death.as_mut() {
        ep.zeta[0] = death0;
    }
    layout.pack(&p)
}

/// Probit of the proportion of negative endpoint coordinates per process,
/// which maximizes the likelihood when all contributions are zero. The
/// proportion is capped to `[0.001, 0.999]`.
pub fn threshold_start(spec: &ModelSpec, data: &[SubjectData]) -> Result<(f64, f64)> {
    let mut counts = [(0usize, 0usize); 2];
    for s in data {
        let des = crate::model::assemble_designs(spec, s)?;
        for (c, coord) in des.endpoint.coords.iter().enumerate() {
            let k = usize::from(coord.process == Process::Death);
            counts[k].1 += 1;
            if des.endpoint.positive != Some(c) {
                counts[k].0 += 1;
            }
        }
    }
    let z = |(neg, total): (usize, usize), what: &str| {
        if total == 0 {
            return 0.0;
        }
        let frac = neg as f64 / total as f64;
        if frac > 0.999 {
            log::warn!("{what}: no or very few events, threshold start capped");
        } else if frac < 0.001 {
            log::warn!("{what}: very few negative records, threshold start capped");
        }
        phi_inv(frac.clamp(0.001, 0.999))
    };
    Ok((z(counts[0], "diagnosis"), z(counts[1], "death")))
}

fn marker_only(spec: &ModelSpec, domains: &[usize]) -> ModelSpec {
    ModelSpec {
        domains: domains.iter().map(|&d| spec.domains[d].clone()).collect(),
        diagnosis: None,
        death: None,
        competing: None,
        delayed_entry: false,
        brownian_origin: spec.brownian_origin,
    }
}

fn restrict(data: &[SubjectData], domains: &[usize]) -> Vec<SubjectData> {
    data.iter()
        .map(|s| {
            let mut s = s.clone();
            s.markers =
                s.markers
                    .iter()
                    .filter_map(|o| {
                        domains.iter().position(|&d| d == o.domain).map(|nd| {
                            crate::model::MarkerObs {
                                domain: nd,
                                ..o.clone()
                            }
                        })
                    })
                    .collect();
            s.diag.clear();
            s.event = None;
            s
        })
        .collect()
}

/// Copies entries of `from` into `to` by parameter name.
fn transfer(
    from_layout: &ParameterLayout,
    from: &[f64],
    to_layout: &ParameterLayout,
    to: &mut [f64],
) {
    for (i, e) in from_layout.entries.iter().enumerate() {
        if let Some(j) = to_layout.index_of(&e.name) {
            if !to_layout.entries[j].fixed {
                to[j] = from[i];
            }
        }
    }
}

fn stage(
    spec: &ModelSpec,
    data: &[SubjectData],
    start: &[f64],
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let lik = Likelihood::new(spec, data, crate::likelihood::default_cdf_config(seed))?;
    let fit = marquardt_fit(&lik, start, cfg)?;
    if !fit.final_ll.is_finite() {
        return Err(Error::Numerical(
            "stage fit did not produce a finite log-likelihood".into(),
        ));
    }
    Ok(fit.theta_hat)
}

/// Starting values for `spec` (links resolved): each domain's mixed model
/// alone, then all domains jointly with zero cross-domain correlations,
/// then endpoint parameters at zero contributions and frequency-based
/// thresholds. Falls back to [`neutral_start`] if a stage fails.
/// Shrinks free correlations of `B` toward zero until the correlation
/// matrix is comfortably positive definite; marker-only stages on small
/// samples can end on the boundary, where the derivatives are undefined.
fn interior_start(layout: &ParameterLayout, theta: &[f64]) -> Result<Vec<f64>> {
    let mut p = layout.unpack(theta)?;
    let unit = CovarianceB {
        sigmas: vec![1.0; p.b.q()],
        rhos: p.b.rhos.clone(),
    };
    let mut rhos = unit.rhos.clone();
    for _ in 0..50 {
        let r = CovarianceB {
            rhos: rhos.clone(),
            ..unit.clone()
        }
        .matrix();
        if r.nrows() == 0 || SymmetricEigen::new(r).eigenvalues.min() >= 0.05 {
            break;
        }
        for v in rhos.iter_mut() {
            *v = 2.0 * (0.9 * correlation(*v)).atanh();
        }
    }
    p.b.rhos = rhos;
    let mut out = layout.pack(&p)?;
    for (i, e) in layout.entries.iter().enumerate() {
        if e.fixed {
            out[i] = theta[i];
        }
    }
    Ok(out)
}

pub fn staged_init(
    spec: &ModelSpec,
    data: &[SubjectData],
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let layout = ParameterLayout::new(spec)?;
    let neutral = neutral_start(spec, data)?;
    let run = || -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..spec.n_domains()).collect();
        let joint_spec = marker_only(spec, &all);
        let joint_layout = ParameterLayout::new(&joint_spec)?;
        let mut joint = neutral_start(&joint_spec, data)?;
        for d in 0..spec.n_domains() {
            let sub = marker_only(spec, &[d]);
            let sub_layout = ParameterLayout::new(&sub)?;
            let sub_data = restrict(data, &[d]);
            let start = neutral_start(&sub, &sub_data)?;
            let est = stage(&sub, &sub_data, &start, cfg, seed)?;
            transfer(&sub_layout, &est, &joint_layout, &mut joint);
        }
        if spec.n_domains() > 1 {
            let joint_data = restrict(data, &all);
            joint = stage(&joint_spec, &joint_data, &joint, cfg, seed)?;
        }
        let mut theta = neutral.clone();
        transfer(&joint_layout, &joint, &layout, &mut theta);
        interior_start(&layout, &theta)
    };
    match run() {
        Ok(theta) => Ok(theta),
        Err(e) => {
            log::warn!("staged initialization failed ({e}); using neutral starting values");
            Ok(neutral)
        }
    }
}

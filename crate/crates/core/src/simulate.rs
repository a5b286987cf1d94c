//! Data generation under the joint model and a replication harness that
//! summarizes bias, standard errors and coverage.

use crate::error::{Error, Result};
use crate::estimate::{marquardt_fit, staged_init, OptimizerConfig};
use crate::likelihood::{default_cdf_config, Likelihood};
use crate::links::{LinkKind, LinkParams, LinkSpec};
use crate::model::{
    design_row, interval_of, midpoint, natural_spline_basis, parse_all, CovarianceB, DeathSpec,
    DiagSpec, DomainParams, DomainSpec, EndpointParams, EventRecord, MarkerObs, MarkerSpec,
    ModelSpec, ParameterLayout, Params, SubjectData, Term,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointKind {
    /// Markers only.
    None,
    /// Binary diagnosis at every visit.
    DiagAtVisits,
    /// Event in continuous time on the death interval grid of the spec.
    DiscretizedEvent,
    /// Both processes.
    Competing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    Gaussian,
    /// Logistic scaled to unit variance.
    Logistic,
}

impl ErrorDist {
    /// One zero-mean, unit-variance draw.
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            ErrorDist::Gaussian => rng.sample(StandardNormal),
            ErrorDist::Logistic => {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                3f64.sqrt() / std::f64::consts::PI * (u / (1.0 - u)).ln()
            }
        }
    }
}

/// A simulation design. Ages are in years; model time is
/// `(age - age_origin) / age_unit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDesign {
    pub name: String,
    pub n_subjects: usize,
    pub entry_mean: f64,
    pub entry_sd: f64,
    /// Entry ages outside this range are redrawn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_range: Option<(f64, f64)>,
    pub visit_spacing: f64,
    pub horizon: f64,
    pub jitter: f64,
    pub dropout_per_visit: f64,
    pub education_prob: f64,
    pub age_origin: f64,
    pub age_unit: f64,
    /// Keep only subjects event-free at entry.
    #[serde(default)]
    pub truncate_at_entry: bool,
    pub endpoint: EndpointKind,
    pub error_dist: ErrorDist,
    pub spec: ModelSpec,
    pub theta: Params,
    pub seed: u64,
}

/// A generated dataset with generation counters.
#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub subjects: Vec<SubjectData>,
    /// Marker values clamped to a link boundary.
    pub clamped: usize,
    /// Candidates discarded by entry truncation.
    pub rejected: usize,
}

impl SimulatedData {
    pub fn n_diagnosed(&self) -> usize {
        self.subjects.iter().filter(|s| s.diagnosed()).count()
    }

    pub fn n_deaths(&self) -> usize {
        self.subjects
            .iter()
            .filter(|s| s.event.is_some_and(|e| e.died))
            .count()
    }

    pub fn mean_visits(&self) -> f64 {
        let visits: usize = self
            .subjects
            .iter()
            .map(|s| {
                let mut t: Vec<f64> = s.markers.iter().map(|o| o.time).collect();
                t.sort_by(f64::total_cmp);
                t.dedup();
                t.len()
            })
            .sum();
        visits as f64 / self.subjects.len().max(1) as f64
    }
}

fn linear(name: &str) -> MarkerSpec {
    MarkerSpec {
        name: name.into(),
        link: LinkSpec::linear(),
        n_knots: None,
    }
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Two-domain model: domain 1 with two markers adjusted for education and
/// its interaction with time, domain 2 with one marker; correlated random
/// intercepts and slopes.
fn base_spec() -> ModelSpec {
    ModelSpec {
        domains: vec![
            DomainSpec {
                name: "d1".into(),
                fixed: strs(&["time", "EL", "EL*time"]),
                random: strs(&["time"]),
                brownian: false,
                markers: vec![linear("m1"), linear("m2")],
            },
            DomainSpec {
                name: "d2".into(),
                fixed: strs(&["time", "EL"]),
                random: strs(&["time"]),
                brownian: false,
                markers: vec![linear("m3")],
            },
        ],
        diagnosis: Some(DiagSpec::default()),
        death: None,
        competing: None,
        delayed_entry: false,
        brownian_origin: 0.0,
    }
}

fn base_theta() -> Params {
    let lp = |a: f64, b: f64| LinkParams::new(vec![a, b]);
    let mut rhos = vec![0.0; 6];
    // random effects ordered (i1, s1, i2, s2)
    for (i, j, v) in [
        (0, 1, -0.833),
        (2, 3, -1.070),
        (0, 2, 0.905),
        (1, 2, -0.956),
        (0, 3, -0.297),
        (1, 3, 1.899),
    ] {
        rhos[CovarianceB::pair_index(4, i, j)] = v;
    }
    Params {
        domains: vec![
            DomainParams {
                beta: vec![0.0, 1.0, -1.1, 0.1],
                links: vec![lp(18.0, 4.0), lp(20.0, 5.0)],
                sigma: vec![0.8, 0.3],
                sigma_w: 0.0,
            },
            DomainParams {
                beta: vec![0.0, 1.7, -0.5],
                links: vec![lp(5.0, 0.1)],
                sigma: vec![0.9],
                sigma_w: 0.0,
            },
        ],
        b: CovarianceB {
            sigmas: vec![1.0, 0.513, 1.0, 0.883],
            rhos,
        },
        diag: Some(EndpointParams {
            contrib: vec![vec![0.3], vec![0.4]],
            zeta: vec![3.0],
        }),
        death: None,
    }
}

/// Ten equal intervals of five years over ages 62 to 112.
fn decade_grid(origin: f64, unit: f64) -> Vec<f64> {
    (0..=10)
        .map(|k| (62.0 + 5.0 * k as f64 - origin) / unit)
        .collect()
}

impl SimDesign {
    /// Names accepted by [`SimDesign::scenario`].
    pub const SCENARIOS: [&'static str; 8] = [
        "I.1.a",
        "I.1.b",
        "I.2.a",
        "I.2.b",
        "I.3",
        "I.4",
        "II.1",
        "truncation",
    ];

    /// Built-in designs over the two-domain dementia-like model.
    pub fn scenario(name: &str, seed: u64) -> Result<SimDesign> {
        let mut d = SimDesign {
            name: name.into(),
            n_subjects: 500,
            entry_mean: 75.0,
            entry_sd: 3.0,
            entry_range: None,
            visit_spacing: 2.5,
            horizon: 20.0,
            jitter: 1.0,
            dropout_per_visit: 0.15,
            education_prob: 0.5,
            age_origin: 65.0,
            age_unit: 10.0,
            truncate_at_entry: false,
            endpoint: EndpointKind::DiagAtVisits,
            error_dist: ErrorDist::Gaussian,
            spec: base_spec(),
            theta: base_theta(),
            seed,
        };
        let scale_contrib = |d: &mut SimDesign, f: f64| {
            for c in d.theta.diag.as_mut().unwrap().contrib.iter_mut().flatten() {
                *c *= f;
            }
        };
        match name {
            "I.1.a" => {}
            "I.1.b" => d.n_subjects = 200,
            "I.2.a" | "I.2.b" => {
                scale_contrib(&mut d, 0.5);
                if name == "I.2.b" {
                    d.n_subjects = 200;
                }
            }
            "I.3" => {
                for dp in &mut d.theta.domains {
                    for s in &mut dp.sigma {
                        *s *= 2.0;
                    }
                }
            }
            "I.4" => {
                d.endpoint = EndpointKind::DiscretizedEvent;
                d.entry_range = Some((63.0, 87.0));
                d.spec.diagnosis = None;
                d.spec.death = Some(DeathSpec {
                    boundaries: decade_grid(d.age_origin, d.age_unit),
                    spline_knots: Vec::new(),
                    threshold: Vec::new(),
                    contributions: Vec::new(),
                });
                d.theta.diag = None;
                d.theta.death = Some(EndpointParams {
                    contrib: vec![vec![0.3], vec![0.4]],
                    zeta: vec![3.0],
                });
            }
            "II.1" => d.error_dist = ErrorDist::Logistic,
            "truncation" => {
                d.truncate_at_entry = true;
                d.spec.delayed_entry = true;
                d.entry_mean = 82.0;
                d.entry_sd = 5.0;
            }
            other => {
                return Err(Error::Schema(format!(
                    "unknown scenario {other}; known: {}",
                    Self::SCENARIOS.join(", ")
                )))
            }
        }
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.dropout_per_visit) || !prob(self.education_prob) {
            return Err(Error::Domain(
                "design probabilities must lie in [0, 1]".into(),
            ));
        }
        if !(self.visit_spacing > 0.0)
            || !(self.horizon >= 0.0)
            || !(self.age_unit > 0.0)
            || !(self.entry_sd >= 0.0)
        {
            return Err(Error::Domain(
                "visit spacing and age unit must be positive, horizon and entry SD nonnegative"
                    .into(),
            ));
        }
        if !(self.jitter >= 0.0 && 2.0 * self.jitter < self.visit_spacing) {
            return Err(Error::Domain(
                "visit jitter must be below half the spacing".into(),
            ));
        }
        ParameterLayout::new(&self.spec)?.pack(&self.theta)?;
        let need = match self.endpoint {
            EndpointKind::None => (false, false),
            EndpointKind::DiagAtVisits => (true, false),
            EndpointKind::DiscretizedEvent => (false, true),
            EndpointKind::Competing => (true, true),
        };
        if need != (self.spec.diagnosis.is_some(), self.spec.death.is_some()) {
            return Err(Error::Schema(
                "endpoint kind does not match the endpoint processes of the model".into(),
            ));
        }
        for m in self.spec.domains.iter().flat_map(|d| &d.markers) {
            if m.link.kind == LinkKind::Ispline
                && (m.link.boundary.is_none() || m.link.knots.is_empty() && m.n_knots != Some(0))
            {
                return Err(Error::Schema(format!(
                    "marker {}: generation needs explicit I-spline knots and boundary",
                    m.name
                )));
            }
        }
        Ok(())
    }

    /// Generating parameters as a full vector of the design's layout.
    pub fn theta_vector(&self) -> Result<Vec<f64>> {
        ParameterLayout::new(&self.spec)?.pack(&self.theta)
    }

    /// The same design with another seed.
    pub fn with_seed(&self, seed: u64) -> SimDesign {
        SimDesign {
            seed,
            ..self.clone()
        }
    }
}

struct Gen<'a> {
    d: &'a SimDesign,
    fixed: Vec<Vec<Term>>,
    random: Vec<Vec<Term>>,
    q_off: Vec<usize>,
    b_root: DMatrix<f64>,
    diag: Option<(&'a DiagSpec, Vec<Vec<Term>>, Vec<Term>)>,
    death: Option<(&'a DeathSpec, Vec<Vec<Term>>, Vec<Term>)>,
}

fn endpoint_terms(contributions: &[Vec<String>], n_domains: usize) -> Result<Vec<Vec<Term>>> {
    (0..n_domains)
        .map(|d| parse_all(contributions.get(d).map_or(&[][..], Vec::as_slice)))
        .collect()
}

struct Person {
    cov: BTreeMap<String, f64>,
    b: DVector<f64>,
    brownian: HashMap<u64, Vec<f64>>,
}

impl Gen<'_> {
    fn new(d: &SimDesign) -> Result<Gen<'_>> {
        let spec = &d.spec;
        let nd = spec.n_domains();
        let mut q_off = Vec::with_capacity(nd);
        let mut acc = 0;
        for k in 0..nd {
            q_off.push(acc);
            acc += spec.q(k);
        }
        let (b, _) = d.theta.b.build();
        let eig = SymmetricEigen::new(b);
        if eig.eigenvalues.iter().any(|&l| l < -1e-10) {
            return Err(Error::Domain(
                "generating random-effect covariance is not positive semidefinite".into(),
            ));
        }
        let root =
            &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        Ok(Gen {
            d,
            fixed: spec
                .domains
                .iter()
                .map(|x| parse_all(&x.fixed))
                .collect::<Result<_>>()?,
            random: spec
                .domains
                .iter()
                .map(|x| parse_all(&x.random))
                .collect::<Result<_>>()?,
            q_off,
            b_root: root,
            diag: match &spec.diagnosis {
                Some(ds) => Some((
                    ds,
                    endpoint_terms(&ds.contributions, nd)?,
                    parse_all(&ds.threshold)?,
                )),
                None => None,
            },
            death: match &spec.death {
                Some(ds) => Some((
                    ds,
                    endpoint_terms(&ds.contributions, nd)?,
                    parse_all(&ds.threshold)?,
                )),
                None => None,
            },
        })
    }

    fn lambda(&self, p: &Person, dom: usize, t: f64, id: &str) -> Result<f64> {
        let dp = &self.d.theta.domains[dom];
        let x = design_row(&self.fixed[dom], t, &p.cov, id)?;
        let z = design_row(&self.random[dom], t, &p.cov, id)?;
        let mut v: f64 = x.iter().zip(&dp.beta).map(|(a, b)| a * b).sum();
        v += z
            .iter()
            .enumerate()
            .map(|(c, a)| a * p.b[self.q_off[dom] + c])
            .sum::<f64>();
        if self.d.spec.domains[dom].brownian {
            v += p.brownian[&t.to_bits()][dom];
        }
        Ok(v)
    }

    fn degradation(
        &self,
        p: &Person,
        contrib: &[Vec<Term>],
        coef: &[Vec<f64>],
        t: f64,
        id: &str,
    ) -> Result<f64> {
        let mut v = 0.0;
        for dom in 0..self.d.spec.n_domains() {
            let row = design_row(&contrib[dom], 0.0, &p.cov, id)?;
            let g: f64 = row.iter().zip(&coef[dom]).map(|(a, b)| a * b).sum();
            if g != 0.0 {
                v += g * self.lambda(p, dom, t, id)?;
            }
        }
        Ok(v)
    }

    fn death_event(&self, rng: &mut ChaCha8Rng, p: &Person, s: usize, id: &str) -> Result<bool> {
        let (ds, contrib, terms) = self.death.as_ref().unwrap();
        let ep = self.d.theta.death.as_ref().unwrap();
        let m = midpoint(&ds.boundaries, s);
        let mut row = vec![1.0];
        row.extend(natural_spline_basis(&ds.spline_knots, m));
        row.extend(design_row(terms, m, &p.cov, id)?.into_iter().skip(1));
        let zeta: f64 = row.iter().zip(&ep.zeta).map(|(a, b)| a * b).sum();
        Ok(
            self.degradation(p, contrib, &ep.contrib, m, id)? + self.d.error_dist.sample(rng)
                >= zeta,
        )
    }

    fn brownian_paths(
        &self,
        rng: &mut ChaCha8Rng,
        times: &[f64],
        id: &str,
    ) -> Result<HashMap<u64, Vec<f64>>> {
        let spec = &self.d.spec;
        let mut out = HashMap::new();
        if !spec.domains.iter().any(|d| d.brownian) {
            return Ok(out);
        }
        let mut ts = times.to_vec();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let t0 = spec.brownian_origin;
        let mut prev = t0;
        let mut w = vec![0.0; spec.n_domains()];
        for &t in &ts {
            if t < t0 {
                return Err(Error::Domain(format!(
                    "subject {id}: time {t} precedes the Brownian origin"
                )));
            }
            for (dom, wd) in w.iter_mut().enumerate() {
                let sw = self.d.theta.domains[dom].sigma_w;
                let z: f64 = rng.sample(StandardNormal);
                *wd += sw * (t - prev).sqrt() * z;
            }
            prev = t;
            out.insert(t.to_bits(), w.clone());
        }
        Ok(out)
    }

    /// One candidate subject; `None` when truncation discards it.
    fn subject(
        &self,
        rng: &mut ChaCha8Rng,
        id: &str,
        clamped: &mut usize,
    ) -> Result<Option<SubjectData>> {
        let d = self.d;
        let spec = &d.spec;
        let el = f64::from(u8::from(rng.random_bool(d.education_prob)));
        let cov = BTreeMap::from([("EL".to_string(), el)]);
        let age = loop {
            let z: f64 = rng.sample(StandardNormal);
            let a = d.entry_mean + d.entry_sd * z;
            match d.entry_range {
                Some((lo, hi)) if !(a >= lo && a <= hi) => continue,
                _ => break a,
            }
        };
        let entry = (age - d.age_origin) / d.age_unit;
        let zb = DVector::from_fn(self.b_root.ncols(), |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let b = &self.b_root * zb;

        let n_sched = (d.horizon / d.visit_spacing + 1e-9).floor() as usize;
        let mut visits = vec![entry];
        for k in 1..=n_sched {
            let jit = if d.jitter > 0.0 {
                rng.random_range(-d.jitter..d.jitter)
            } else {
                0.0
            };
            visits.push(entry + (d.visit_spacing * k as f64 + jit) / d.age_unit);
        }
        let mut n_vis = 1;
        while n_vis < visits.len() && !rng.random_bool(d.dropout_per_visit) {
            n_vis += 1;
        }
        visits.truncate(n_vis);

        let mut needed = visits.clone();
        if let Some((ds, _, _)) = &self.death {
            let s_total = ds.boundaries.len() - 1;
            needed.extend((1..=s_total).map(|s| midpoint(&ds.boundaries, s)));
        }
        let brownian = self.brownian_paths(rng, &needed, id)?;
        let p = Person { cov, b, brownian };

        let mut event = None;
        if let Some((ds, _, _)) = &self.death {
            let bnd = &ds.boundaries;
            let s_total = bnd.len() - 1;
            let s0 = interval_of(bnd, entry, id)?;
            if d.truncate_at_entry {
                for s in 1..s0 {
                    if self.death_event(rng, &p, s, id)? {
                        return Ok(None);
                    }
                }
            }
            // vital status is known at the end of the interval holding the horizon
            let stop = entry + d.horizon / d.age_unit;
            let end = if stop >= bnd[s_total] {
                bnd[s_total]
            } else {
                bnd[interval_of(bnd, stop, id)?]
            };
            let mut time = end;
            let mut died = false;
            for s in s0..=s_total {
                if bnd[s - 1] >= end {
                    break;
                }
                if self.death_event(rng, &p, s, id)? {
                    let t = rng.random_range(bnd[s - 1].max(entry)..bnd[s]);
                    if t <= end {
                        time = t;
                        died = true;
                    }
                    break;
                }
            }
            visits.retain(|&v| if died { v < time } else { v <= time });
            event = Some(EventRecord { entry, time, died });
        }

        let mut diag = Vec::new();
        if let Some((_, contrib, terms)) = &self.diag {
            let ep = d.theta.diag.as_ref().unwrap();
            for (j, &t) in visits.iter().enumerate() {
                let row = design_row(terms, t, &p.cov, id)?;
                let zeta: f64 = row.iter().zip(&ep.zeta).map(|(a, b)| a * b).sum();
                let pos = self.degradation(&p, contrib, &ep.contrib, t, id)?
                    + d.error_dist.sample(rng)
                    >= zeta;
                diag.push((t, pos));
                if pos {
                    if j == 0 && d.truncate_at_entry {
                        return Ok(None);
                    }
                    break;
                }
            }
            visits.truncate(diag.len());
        }

        let mut markers = Vec::new();
        for &t in &visits {
            for (dom, ds) in spec.domains.iter().enumerate() {
                let lam = self.lambda(&p, dom, t, id)?;
                for (k, m) in ds.markers.iter().enumerate() {
                    let dp = &d.theta.domains[dom];
                    let z: f64 = rng.sample(StandardNormal);
                    let h = lam + dp.sigma[k] * z;
                    let lp = &dp.links[k];
                    let (lo, hi) = m.link.transformed_range(lp)?;
                    let value = if h < lo || h > hi {
                        *clamped += 1;
                        let (a, b) = m.link.boundary.expect("validated");
                        if h < lo {
                            a
                        } else {
                            b
                        }
                    } else {
                        m.link.inverse(lp, h)?
                    };
                    markers.push(MarkerObs {
                        domain: dom,
                        marker: k,
                        time: t,
                        value,
                    });
                }
            }
        }
        Ok(Some(SubjectData {
            id: id.into(),
            covariates: p.cov,
            markers,
            diag,
            event,
            entry,
        }))
    }
}

/// Draws a dataset; deterministic given the design (seed included).
pub fn generate_dataset(design: &SimDesign) -> Result<SimulatedData> {
    design.validate()?;
    let g = Gen::new(design)?;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let mut subjects = Vec::with_capacity(design.n_subjects);
    let mut clamped = 0;
    let mut rejected = 0;
    while subjects.len() < design.n_subjects {
        let id = (subjects.len() + 1).to_string();
        match g.subject(&mut rng, &id, &mut clamped)? {
            Some(s) => subjects.push(s),
            None => {
                rejected += 1;
                if rejected > 1000 * design.n_subjects.max(1) {
                    return Err(Error::Domain(
                        "entry truncation rejects nearly every candidate".into(),
                    ));
                }
            }
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} generated marker values clamped to link boundaries");
    }
    Ok(SimulatedData {
        subjects,
        clamped,
        rejected,
    })
}

/// One fitted replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub final_ll: f64,
    pub theta_hat: Vec<f64>,
    pub se: Vec<Option<f64>>,
    pub n_diagnosed: usize,
    pub n_deaths: usize,
    pub mean_visits: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub parameter: String,
    pub theta: f64,
    pub mean_est: f64,
    /// Relative bias in percent; absent when the generating value is 0.
    pub bias_pct: Option<f64>,
    pub mean_se: Option<f64>,
    pub emp_sd: f64,
    pub cr95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub design: String,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub n_converged: usize,
    pub n_replicates: usize,
    /// Set when more than 20% of the replicates did not converge.
    pub degraded: bool,
    pub outcomes: Vec<ReplicateOutcome>,
}

impl ReplicationReport {
    pub fn row(&self, parameter: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }
}

fn fit_replicate(
    design: &SimDesign,
    fit_spec: &ModelSpec,
    index: usize,
    cfg: &OptimizerConfig,
) -> Result<ReplicateOutcome> {
    let seed = design.seed.wrapping_add(index as u64);
    let data = generate_dataset(&design.with_seed(seed))?;
    let mut spec = fit_spec.clone();
    spec.resolve_links(&data.subjects)?;
    let theta0 = staged_init(&spec, &data.subjects, cfg, seed)?;
    let lik = Likelihood::new(&spec, &data.subjects, default_cdf_config(seed))?;
    let fit = marquardt_fit(&lik, &theta0, cfg)?;
    Ok(ReplicateOutcome {
        index,
        seed,
        converged: fit.converged,
        iterations: fit.iterations,
        final_ll: fit.final_ll,
        theta_hat: fit.theta_hat,
        se: fit.se,
        n_diagnosed: data.n_diagnosed(),
        n_deaths: data.n_deaths(),
        mean_visits: data.mean_visits(),
        error: None,
    })
}

/// Generates and fits `n_replicates` datasets (seeds `seed + r`) and
/// summarizes the converged fits against the generating values. The fitted
/// model is `fit_spec` when given, else the generating model.
pub fn run_replication(
    design: &SimDesign,
    fit_spec: Option<&ModelSpec>,
    n_replicates: usize,
    cfg: &OptimizerConfig,
) -> Result<ReplicationReport> {
    design.validate()?;
    let fit_spec = fit_spec.unwrap_or(&design.spec);
    let layout = ParameterLayout::new(fit_spec)?;
    let gen_layout = ParameterLayout::new(&design.spec)?;
    let gen_theta = design.theta_vector()?;
    let outcomes: Vec<ReplicateOutcome> = (0..n_replicates)
        .into_par_iter()
        .map(|r| {
            fit_replicate(design, fit_spec, r, cfg).unwrap_or_else(|e| ReplicateOutcome {
                index: r,
                seed: design.seed.wrapping_add(r as u64),
                converged: false,
                iterations: 0,
                final_ll: f64::NAN,
                theta_hat: Vec::new(),
                se: Vec::new(),
                n_diagnosed: 0,
                n_deaths: 0,
                mean_visits: 0.0,
                error: Some(e.to_string()),
            })
        })
        .collect();
    let ok: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.converged).collect();
    let free = layout.free_indices();
    let mut rows = Vec::new();
    for (fi, &i) in free.iter().enumerate() {
        let name = &layout.entries[i].name;
        let Some(gi) = gen_layout.index_of(name) else {
            continue;
        };
        let theta = gen_theta[gi];
        let est: Vec<f64> = ok.iter().map(|o| o.theta_hat[i]).collect();
        let n = est.len() as f64;
        let mean_est = est.iter().sum::<f64>() / n;
        let emp_sd = if est.len() < 2 {
            0.0
        } else {
            (est.iter().map(|e| (e - mean_est).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        let ses: Vec<f64> = ok.iter().filter_map(|o| o.se[fi]).collect();
        let mean_se = (!ses.is_empty()).then(|| ses.iter().sum::<f64>() / ses.len() as f64);
        let covered: Vec<bool> = ok
            .iter()
            .filter_map(|o| o.se[fi].map(|s| (o.theta_hat[i] - theta).abs() <= 1.96 * s))
            .collect();
        let cr95 = (!covered.is_empty())
            .then(|| 100.0 * covered.iter().filter(|c| **c).count() as f64 / covered.len() as f64);
        rows.push(ReportRow {
            parameter: name.clone(),
            theta,
            mean_est,
            bias_pct: (theta != 0.0).then(|| 100.0 * (mean_est - theta) / theta.abs()),
            mean_se,
            emp_sd,
            cr95,
        });
    }
    let n_converged = ok.len();
    Ok(ReplicationReport {
        design: design.name.clone(),
        seed: design.seed,
        rows,
        n_converged,
        n_replicates,
        degraded: (n_converged as f64) < 0.8 * n_replicates as f64,
        outcomes,
    })
}

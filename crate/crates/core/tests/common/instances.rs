//! Random small joint-model instances and a Monte Carlo oracle that works
//! from the raw data: random effects are drawn from their prior, the marker
//! density given the random effects acts as an importance weight, and the
//! endpoint probability given the latent values is a product of
//! independent probits.

use super::rng;
use latjoint::links::{LinkKind, LinkParams, LinkSpec};
use latjoint::model::{
    CompetingSpec, CovarianceB, DeathSpec, DiagSpec, DomainSpec, EventRecord, MarkerObs,
    MarkerSpec, ModelSpec, ParameterLayout, Params, SubjectData,
};
use latjoint::mvn::normal;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Diag,
    Death,
    Competing,
}

pub struct Instance {
    pub spec: ModelSpec,
    pub subject: SubjectData,
    pub theta: Vec<f64>,
}

pub const BOUNDARIES: [f64; 6] = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5];

fn gauss(r: &mut impl Rng) -> f64 {
    r.sample(StandardNormal)
}

pub fn random_spec(r: &mut impl Rng, kind: Kind, delayed_entry: bool) -> ModelSpec {
    let n_domains = r.random_range(1..=2);
    let domains = (0..n_domains)
        .map(|d| {
            let n_markers = r.random_range(1..=2);
            let markers = (0..n_markers)
                .map(|k| {
                    let link = if k == 1 && r.random_bool(0.5) {
                        LinkSpec::ispline(vec![-1.0, 0.5], -4.0, 4.0).unwrap()
                    } else {
                        LinkSpec::linear()
                    };
                    MarkerSpec {
                        name: format!("y{d}{k}"),
                        link,
                        n_knots: None,
                    }
                })
                .collect();
            DomainSpec {
                name: format!("d{d}"),
                fixed: vec!["time".into(), "x".into()],
                random: vec!["time".into()],
                brownian: false,
                markers,
            }
        })
        .collect();
    let contributions = if r.random_bool(0.5) {
        vec![vec!["x".to_string()]]
    } else {
        Vec::new()
    };
    let threshold = if r.random_bool(0.5) {
        vec!["x".to_string()]
    } else {
        Vec::new()
    };
    let diagnosis = matches!(kind, Kind::Diag | Kind::Competing).then(|| DiagSpec {
        threshold: threshold.clone(),
        contributions: contributions.clone(),
    });
    let death = matches!(kind, Kind::Death | Kind::Competing).then(|| DeathSpec {
        boundaries: BOUNDARIES.to_vec(),
        spline_knots: Vec::new(),
        threshold: if kind == Kind::Death {
            threshold.clone()
        } else {
            Vec::new()
        },
        contributions: Vec::new(),
    });
    let competing = (kind == Kind::Competing).then(|| CompetingSpec { window: 0.8 });
    ModelSpec {
        domains,
        diagnosis,
        death,
        competing,
        delayed_entry,
        brownian_origin: 0.0,
    }
}

pub fn random_params(r: &mut impl Rng, spec: &ModelSpec, layout: &ParameterLayout) -> Vec<f64> {
    let mut theta = layout.pack(&zero_params(spec, layout)).unwrap();
    loop {
        for (i, e) in layout.entries.iter().enumerate() {
            let n = &e.name;
            theta[i] = if n.starts_with("beta") {
                0.5 * gauss(r)
            } else if n.starts_with("eta") {
                if n.ends_with("[0]") {
                    0.5 * gauss(r)
                } else if n.ends_with("[1]") && !is_spline(spec, n) {
                    r.random_range(0.6..1.8) * if r.random_bool(0.5) { 1.0 } else { -1.0 }
                } else {
                    r.random_range(0.5..1.5)
                }
            } else if n.starts_with("sigma") {
                r.random_range(0.5..1.2)
            } else if n.starts_with("B.sd") {
                r.random_range(0.3..1.0)
            } else if n.starts_with("B.rho") {
                0.6 * gauss(r)
            } else if n.starts_with("gamma") || n.starts_with("delta") {
                0.7 * gauss(r)
            } else if n.starts_with("zeta") {
                0.4 + 0.5 * gauss(r)
            } else {
                theta[i]
            };
        }
        let theta = layout.expand(&layout.free(&theta)).unwrap();
        if layout.unpack(&theta).unwrap().b.build().1 {
            return theta;
        }
    }
}

fn is_spline(spec: &ModelSpec, name: &str) -> bool {
    spec.domains
        .iter()
        .flat_map(|d| &d.markers)
        .any(|m| name.starts_with(&format!("eta[{}]", m.name)) && m.link.kind == LinkKind::Ispline)
}

fn zero_params(spec: &ModelSpec, layout: &ParameterLayout) -> Params {
    layout
        .unpack(&vec![0.0; layout.len()])
        .map(|mut p| {
            for (d, dp) in p.domains.iter_mut().enumerate() {
                for (k, lp) in dp.links.iter_mut().enumerate() {
                    *lp = LinkParams::new(vec![0.0; spec.domains[d].markers[k].link.n_params()]);
                }
            }
            p
        })
        .unwrap()
}

/// Random subject with at most `max_coords` endpoint coordinates and the
/// requested final status.
pub fn random_subject(
    r: &mut impl Rng,
    spec: &ModelSpec,
    kind: Kind,
    event: bool,
    max_coords: usize,
) -> SubjectData {
    loop {
        let s = try_subject(r, spec, kind, event);
        let n = endpoint_coords(spec, &s).0.len();
        if n >= 1 && n <= max_coords {
            return s;
        }
    }
}

fn try_subject(r: &mut impl Rng, spec: &ModelSpec, kind: Kind, event: bool) -> SubjectData {
    let x: f64 = gauss(r);
    let entry: f64 = r.random_range(0.05..1.4);
    let mut diag = Vec::new();
    let mut t = entry;
    let n_visits = r.random_range(1..=3);
    for _ in 0..n_visits {
        diag.push((t, false));
        t += r.random_range(0.3..0.6);
    }
    let mut record = None;
    match kind {
        Kind::Diag => {
            if event {
                diag.last_mut().unwrap().1 = true;
            }
        }
        Kind::Death => {
            let end = (entry + r.random_range(0.0..1.2)).min(2.49);
            record = Some(EventRecord {
                entry,
                time: end,
                died: event,
            });
            diag.retain(|v| v.0 <= end);
        }
        Kind::Competing => {
            let diagnosed = event && r.random_bool(0.5);
            if diagnosed {
                diag.last_mut().unwrap().1 = true;
            }
            let last: f64 = diag.last().unwrap().0;
            let end = (last + r.random_range(0.0..1.0)).min(2.49);
            record = Some(EventRecord {
                entry,
                time: end,
                died: event && !diagnosed,
            });
        }
    }
    let last_time = diag.last().map(|v| v.0).unwrap_or(entry);
    let mut markers = Vec::new();
    for (d, dom) in spec.domains.iter().enumerate() {
        for (k, m) in dom.markers.iter().enumerate() {
            let n = r.random_range(0..=2);
            for _ in 0..n {
                let time = r.random_range(entry..=last_time);
                let value = match m.link.kind {
                    LinkKind::Linear => 1.5 * gauss(r),
                    LinkKind::Ispline => r.random_range(-3.9..3.9),
                };
                markers.push(MarkerObs {
                    domain: d,
                    marker: k,
                    time,
                    value,
                });
            }
        }
    }
    SubjectData {
        id: "s".into(),
        covariates: BTreeMap::from([("x".to_string(), x)]),
        markers,
        diag: if kind == Kind::Death {
            Vec::new()
        } else {
            diag
        },
        event: record,
        entry,
    }
}

fn interval(t: f64) -> usize {
    (1..BOUNDARIES.len())
        .find(|&s| t < BOUNDARIES[s])
        .unwrap_or(BOUNDARIES.len() - 1)
}

fn mid(s: usize) -> f64 {
    0.5 * (BOUNDARIES[s - 1] + BOUNDARIES[s])
}

/// Endpoint coordinates as `(time, is_death, positive)`, derived from the
/// raw record; second list holds the at-risk-at-entry coordinates.
pub fn endpoint_coords(
    spec: &ModelSpec,
    s: &SubjectData,
) -> (Vec<(f64, bool, bool)>, Vec<(f64, bool)>) {
    let mut out = Vec::new();
    let mut entry = Vec::new();
    if spec.diagnosis.is_some() {
        for &(t, pos) in &s.diag {
            out.push((t, false, pos));
        }
        if let Some(v) = s.diag.first() {
            entry.push((v.0, false));
        }
    }
    if spec.death.is_some() {
        let ev = s.event.unwrap();
        let s0 = interval(ev.entry);
        let (mut died, mut time) = (ev.died, ev.time);
        if let Some(c) = &spec.competing {
            let last = s.diag.last().unwrap().0;
            let last_negative = s
                .diag
                .iter()
                .filter(|v| !v.1)
                .map(|v| v.0)
                .fold(ev.entry, f64::max);
            let diagnosed = s.diag.last().unwrap().1;
            let within = time - last_negative <= c.window;
            if diagnosed || !within {
                died = false;
                time = last;
            }
        }
        let last = if died {
            interval(time)
        } else {
            BOUNDARIES[1..].iter().filter(|&&u| u <= time).count()
        };
        for k in s0..=last {
            out.push((mid(k), true, died && k == last));
        }
        for k in 1..s0 {
            entry.push((mid(k), true));
        }
    }
    (out, entry)
}

/// Monte Carlo estimates of the endpoint probability given the markers and
/// of the at-risk probability at entry, each with a standard error.
pub struct Oracle {
    pub endpoint: (f64, f64),
    pub entry: (f64, f64),
    pub marker_log_density: f64,
}

pub fn mc_oracle(inst: &Instance, draws: usize, seed: u64) -> Oracle {
    let spec = &inst.spec;
    let layout = ParameterLayout::new(spec).unwrap();
    let p = layout.unpack(&inst.theta).unwrap();
    let s = &inst.subject;
    let x = s.covariates["x"];
    let b = p.b.matrix();
    let q = b.nrows();
    let l = b.clone().cholesky().map(|c| c.l()).unwrap_or_else(|| {
        let e = b.clone().symmetric_eigen();
        let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
        &e.eigenvectors * d
    });
    let lambda = |d: usize, t: f64, bi: &DVector<f64>| -> f64 {
        let beta = &p.domains[d].beta;
        beta[0] + beta[1] * t + beta[2] * x + bi[2 * d] + bi[2 * d + 1] * t
    };
    let (coords, entry_coords) = endpoint_coords(spec, s);
    let contrib = |death: bool, d: usize| -> f64 {
        let ep = if death {
            p.death.as_ref().unwrap()
        } else {
            p.diag.as_ref().unwrap()
        };
        let c = &ep.contrib[d];
        c[0] + if c.len() > 1 { c[1] * x } else { 0.0 }
    };
    let threshold = |death: bool| -> f64 {
        let ep = if death {
            p.death.as_ref().unwrap()
        } else {
            p.diag.as_ref().unwrap()
        };
        ep.zeta[0]
            + if ep.zeta.len() > 1 {
                ep.zeta[1] * x
            } else {
                0.0
            }
    };
    let nd = spec.domains.len();
    let delta_at = |t: f64, death: bool, bi: &DVector<f64>| {
        (0..nd)
            .map(|d| contrib(death, d) * lambda(d, t, bi))
            .sum::<f64>()
    };

    let mut r = rng(seed);
    let mut logw = Vec::with_capacity(draws);
    let mut g = Vec::with_capacity(draws);
    let mut g0 = Vec::with_capacity(draws);
    let mut z = DVector::zeros(q);
    for _ in 0..draws {
        for i in 0..q {
            z[i] = gauss(&mut r);
        }
        let bi = &l * &z;
        let mut lw = 0.0;
        for o in &s.markers {
            let m = &spec.domains[o.domain].markers[o.marker];
            let lp = &p.domains[o.domain].links[o.marker];
            let h = m.link.transform(lp, o.value).unwrap();
            let sd = p.domains[o.domain].sigma[o.marker].abs();
            let u = (h - lambda(o.domain, o.time, &bi)) / sd;
            lw += -0.5 * u * u - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            lw += m.link.jacobian(lp, o.value).unwrap().ln();
        }
        logw.push(lw);
        let mut prob = 1.0;
        for &(t, death, pos) in &coords {
            let c = normal::cdf(threshold(death) - delta_at(t, death, &bi));
            prob *= if pos { 1.0 - c } else { c };
        }
        g.push(prob);
        let mut p0 = 1.0;
        for &(t, death) in &entry_coords {
            p0 *= normal::cdf(threshold(death) - delta_at(t, death, &bi));
        }
        g0.push(p0);
    }
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|v| (v - m).exp()).collect();
    let n = draws as f64;
    let wbar = w.iter().sum::<f64>() / n;
    let ratio = w.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / n / wbar;
    // delta-method SE of a ratio estimator
    let var = w
        .iter()
        .zip(&g)
        .map(|(a, b)| (a * (b - ratio)).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    let se = (var / n).sqrt() / wbar;
    let e_mean = g0.iter().sum::<f64>() / n;
    let e_var = g0.iter().map(|v| (v - e_mean).powi(2)).sum::<f64>() / (n - 1.0);
    Oracle {
        endpoint: (ratio, se),
        entry: (e_mean, (e_var / n).sqrt()),
        marker_log_density: m + wbar.ln(),
    }
}

pub fn random_instance(
    seed: u64,
    kind: Kind,
    event: bool,
    max_coords: usize,
    delayed_entry: bool,
) -> Instance {
    let mut r = rng(seed);
    let spec = random_spec(&mut r, kind, delayed_entry);
    let layout = ParameterLayout::new(&spec).unwrap();
    let theta = random_params(&mut r, &spec, &layout);
    let subject = random_subject(&mut r, &spec, kind, event, max_coords);
    Instance {
        spec,
        subject,
        theta,
    }
}

pub fn b_of(layout: &ParameterLayout, theta: &[f64]) -> CovarianceB {
    layout.unpack(theta).unwrap().b
}

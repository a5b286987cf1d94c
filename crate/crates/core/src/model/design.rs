use super::spline::natural_spline_basis;
use super::terms::{design_row, parse_all, Term};
use super::{DeathSpec, ModelSpec, SubjectData};
use crate::error::{Error, Result};
use nalgebra::DMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Process {
    Diag,
    Death,
}

/// One binary endpoint coordinate: "no event" means
/// `Delta(t) + eps < zeta_row . zeta`.
#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    /// Index into the latent time points.
    pub point: usize,
    pub process: Process,
    pub threshold_row: Vec<f64>,
}

/// Latent processes of every domain at a list of times. Row `d * T + j`
/// holds domain `d` at `times[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPoints {
    pub times: Vec<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl LatentPoints {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EndpointSet {
    pub points: LatentPoints,
    pub coords: Vec<Coordinate>,
    /// Coordinate carrying the observed event, if any.
    pub positive: Option<usize>,
}

/// Everything about one subject that does not depend on the parameters.
/// Marker rows are ordered by domain, then marker, then time.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignBundle {
    pub id: String,
    pub obs_domain: Vec<usize>,
    pub obs_marker: Vec<usize>,
    pub obs_time: Vec<f64>,
    pub obs_value: Vec<f64>,
    /// Block-diagonal fixed-effect design, `n_obs x p_total`.
    pub x: DMatrix<f64>,
    /// Block-diagonal random-effect design, `n_obs x q_total`.
    pub z: DMatrix<f64>,
    pub endpoint: EndpointSet,
    /// Pre-entry at-risk coordinates under the prior (delayed entry).
    pub entry: Option<EndpointSet>,
    /// Contribution covariate rows per domain (intercept first).
    pub gamma_rows: Vec<Vec<f64>>,
    pub delta_rows: Vec<Vec<f64>>,
}

impl DesignBundle {
    pub fn n_obs(&self) -> usize {
        self.obs_value.len()
    }
}

/// Interval (1-based) containing `t`; the last interval is closed.
pub fn interval_of(boundaries: &[f64], t: f64, subject: &str) -> Result<usize> {
    let s = boundaries.len() - 1;
    if !(t >= boundaries[0] && t <= boundaries[s]) {
        return Err(Error::Schema(format!(
            "subject {subject}: time {t} outside the death interval grid [{}, {}]",
            boundaries[0], boundaries[s]
        )));
    }
    Ok(boundaries[1..]
        .iter()
        .position(|&u| t < u)
        .map_or(s, |i| i + 1))
}

pub fn midpoint(boundaries: &[f64], s: usize) -> f64 {
    0.5 * (boundaries[s - 1] + boundaries[s])
}

/// Death intervals followed `(s0, s_last, died)`; no coordinates when
/// `s_last < s0`. Applies the competing-risk window when present.
pub(crate) fn death_intervals(
    spec: &ModelSpec,
    ds: &DeathSpec,
    subj: &SubjectData,
) -> Result<Option<(usize, usize, bool)>> {
    let Some(ev) = subj.event else {
        return Ok(None);
    };
    let b = &ds.boundaries;
    let s0 = interval_of(b, ev.entry, &subj.id)?;
    let (mut time, mut died) = (ev.time, ev.died);
    if let Some(window) = spec.competing_window() {
        let last_visit = subj.diag.last().map(|v| v.0);
        if subj.diagnosed() {
            time = last_visit.unwrap();
            died = false;
        } else {
            let reference = subj.diag.iter().map(|v| v.0).fold(ev.entry, f64::max);
            if time - reference > window {
                time = last_visit.unwrap_or(ev.entry).max(ev.entry);
                died = false;
            }
        }
    }
    if died {
        return Ok(Some((s0, interval_of(b, time, &subj.id)?, true)));
    }
    interval_of(b, time, &subj.id)?;
    // alive at `time`: every interval ending by then was survived
    let survived = b[1..].iter().filter(|&&u| u <= time).count();
    Ok(Some((s0, survived, false)))
}

struct Ctx<'a> {
    spec: &'a ModelSpec,
    fixed: Vec<Vec<Term>>,
    random: Vec<Vec<Term>>,
    p_off: Vec<usize>,
    q_off: Vec<usize>,
}

impl Ctx<'_> {
    fn rows(&self, d: usize, t: f64, subj: &SubjectData) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            design_row(&self.fixed[d], t, &subj.covariates, &subj.id)?,
            design_row(&self.random[d], t, &subj.covariates, &subj.id)?,
        ))
    }

    fn points(&self, times: Vec<f64>, subj: &SubjectData) -> Result<LatentPoints> {
        let nd = self.spec.n_domains();
        let t_len = times.len();
        let mut x = DMatrix::zeros(nd * t_len, self.spec.p_total());
        let mut z = DMatrix::zeros(nd * t_len, self.spec.q_total());
        for d in 0..nd {
            for (j, &t) in times.iter().enumerate() {
                let (xr, zr) = self.rows(d, t, subj)?;
                for (c, v) in xr.into_iter().enumerate() {
                    x[(d * t_len + j, self.p_off[d] + c)] = v;
                }
                for (c, v) in zr.into_iter().enumerate() {
                    z[(d * t_len + j, self.q_off[d] + c)] = v;
                }
            }
        }
        Ok(LatentPoints { times, x, z })
    }
}

fn offsets(counts: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    counts
        .map(|c| {
            let o = acc;
            acc += c;
            o
        })
        .collect()
}

fn contribution_rows(
    spec: &ModelSpec,
    contributions: &[Vec<String>],
    subj: &SubjectData,
) -> Result<Vec<Vec<f64>>> {
    (0..spec.n_domains())
        .map(|d| {
            let terms = parse_all(contributions.get(d).map_or(&[][..], Vec::as_slice))?;
            design_row(&terms, 0.0, &subj.covariates, &subj.id)
        })
        .collect()
}

fn death_threshold_row(
    ds: &DeathSpec,
    terms: &[Term],
    t: f64,
    subj: &SubjectData,
) -> Result<Vec<f64>> {
    let mut row = vec![1.0];
    row.extend(natural_spline_basis(&ds.spline_knots, t));
    row.extend(
        design_row(terms, t, &subj.covariates, &subj.id)?
            .into_iter()
            .skip(1),
    );
    Ok(row)
}

/// Builds the parameter-free design of one subject.
pub fn assemble_designs(spec: &ModelSpec, subj: &SubjectData) -> Result<DesignBundle> {
    subj.validate()?;
    let nd = spec.n_domains();
    let ctx = Ctx {
        spec,
        fixed: spec
            .domains
            .iter()
            .map(|d| parse_all(&d.fixed))
            .collect::<Result<_>>()?,
        random: spec
            .domains
            .iter()
            .map(|d| parse_all(&d.random))
            .collect::<Result<_>>()?,
        p_off: offsets((0..nd).map(|d| spec.p(d))),
        q_off: offsets((0..nd).map(|d| spec.q(d))),
    };

    let mut obs = subj.markers.clone();
    for o in &obs {
        if o.domain >= nd || o.marker >= spec.domains[o.domain].markers.len() {
            return Err(Error::Schema(format!(
                "subject {}: unknown marker index ({}, {})",
                subj.id, o.domain, o.marker
            )));
        }
    }
    obs.sort_by(|a, b| {
        (a.domain, a.marker)
            .cmp(&(b.domain, b.marker))
            .then(a.time.total_cmp(&b.time))
    });
    let n = obs.len();
    let mut x = DMatrix::zeros(n, spec.p_total());
    let mut z = DMatrix::zeros(n, spec.q_total());
    for (i, o) in obs.iter().enumerate() {
        let (xr, zr) = ctx.rows(o.domain, o.time, subj)?;
        for (c, v) in xr.into_iter().enumerate() {
            x[(i, ctx.p_off[o.domain] + c)] = v;
        }
        for (c, v) in zr.into_iter().enumerate() {
            z[(i, ctx.q_off[o.domain] + c)] = v;
        }
    }

    let mut times = Vec::new();
    let mut coords = Vec::new();
    let mut positive = None;
    let mut entry_times = Vec::new();
    let mut entry_coords = Vec::new();
    let mut gamma_rows = Vec::new();
    let mut delta_rows = Vec::new();

    if let Some(ds) = &spec.diagnosis {
        let terms = parse_all(&ds.threshold)?;
        gamma_rows = contribution_rows(spec, &ds.contributions, subj)?;
        for &(t, pos) in &subj.diag {
            coords.push(Coordinate {
                point: times.len(),
                process: Process::Diag,
                threshold_row: design_row(&terms, t, &subj.covariates, &subj.id)?,
            });
            times.push(t);
            if pos {
                positive = Some(coords.len() - 1);
            }
        }
        if spec.delayed_entry {
            if let Some(&(t, _)) = subj.diag.first() {
                entry_coords.push(Coordinate {
                    point: 0,
                    process: Process::Diag,
                    threshold_row: design_row(&terms, t, &subj.covariates, &subj.id)?,
                });
                entry_times.push(t);
            }
        }
    }
    if let Some(ds) = &spec.death {
        let terms = parse_all(&ds.threshold)?;
        delta_rows = contribution_rows(spec, &ds.contributions, subj)?;
        let Some((s0, si, died)) = death_intervals(spec, ds, subj)? else {
            return Err(Error::Schema(format!(
                "subject {}: death model needs an event record",
                subj.id
            )));
        };
        for s in s0..=si {
            let m = midpoint(&ds.boundaries, s);
            coords.push(Coordinate {
                point: times.len(),
                process: Process::Death,
                threshold_row: death_threshold_row(ds, &terms, m, subj)?,
            });
            times.push(m);
        }
        if died && si >= s0 {
            positive = Some(coords.len() - 1);
        }
        if spec.delayed_entry {
            // survived every interval before the entry interval
            for s in 1..s0 {
                let m = midpoint(&ds.boundaries, s);
                entry_coords.push(Coordinate {
                    point: entry_times.len(),
                    process: Process::Death,
                    threshold_row: death_threshold_row(ds, &terms, m, subj)?,
                });
                entry_times.push(m);
            }
        }
    }

    let endpoint = EndpointSet {
        points: ctx.points(times, subj)?,
        coords,
        positive,
    };
    let entry = if spec.delayed_entry && !entry_coords.is_empty() {
        Some(EndpointSet {
            points: ctx.points(entry_times, subj)?,
            coords: entry_coords,
            positive: None,
        })
    } else {
        None
    };
    Ok(DesignBundle {
        id: subj.id.clone(),
        obs_domain: obs.iter().map(|o| o.domain).collect(),
        obs_marker: obs.iter().map(|o| o.marker).collect(),
        obs_time: obs.iter().map(|o| o.time).collect(),
        obs_value: obs.iter().map(|o| o.value).collect(),
        x,
        z,
        endpoint,
        entry,
        gamma_rows,
        delta_rows,
    })
}

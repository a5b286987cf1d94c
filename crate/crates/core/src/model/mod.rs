//! Model specification, subject data, parameter layout and per-subject
//! design assembly.

mod design;
mod params;
mod spline;
mod terms;

pub use design::{
    assemble_designs, interval_of, midpoint, Coordinate, DesignBundle, EndpointSet, LatentPoints,
    Process,
};
pub use params::{
    correlation, CovarianceB, DomainParams, EndpointParams, ParamInfo, ParameterLayout, Params,
};
pub use spline::natural_spline_basis;
pub use terms::{design_row, parse_all, Term};

use crate::error::{Error, Result};
use crate::links::{quantile_knots, LinkKind, LinkSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec::linear()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerSpec {
    pub name: String,
    #[serde(default)]
    pub link: LinkSpec,
    /// Interior knots placed at pooled quantiles when an I-spline link has
    /// no explicit knots (default 3, i.e. the quartiles).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_knots: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Fixed-effect terms; the intercept is implicit and fixed at 0.
    #[serde(default)]
    pub fixed: Vec<String>,
    /// Random-effect terms; the random intercept is implicit with unit SD.
    #[serde(default)]
    pub random: Vec<String>,
    #[serde(default)]
    pub brownian: bool,
    pub markers: Vec<MarkerSpec>,
}

/// Threshold and contribution structure of one binary endpoint process.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagSpec {
    /// Threshold terms beyond the reference threshold.
    #[serde(default)]
    pub threshold: Vec<String>,
    /// Per-domain contribution covariates (intercept implicit). Missing
    /// entries mean intercept only.
    #[serde(default)]
    pub contributions: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeathSpec {
    /// Interval boundaries `l_1 < u_1 = l_2 < ... < u_S`.
    pub boundaries: Vec<f64>,
    /// Natural cubic spline knots for the threshold over time (`K` knots
    /// give `K - 1` basis functions; fewer than 2 means constant).
    #[serde(default)]
    pub spline_knots: Vec<f64>,
    #[serde(default)]
    pub threshold: Vec<String>,
    #[serde(default)]
    pub contributions: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompetingSpec {
    /// Deaths count only within this many time units after the last
    /// negative diagnosis (or entry).
    pub window: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub domains: Vec<DomainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<DiagSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub death: Option<DeathSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub competing: Option<CompetingSpec>,
    #[serde(default)]
    pub delayed_entry: bool,
    /// Origin `t0` of the Brownian terms.
    #[serde(default)]
    pub brownian_origin: f64,
}

impl ModelSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ModelSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn n_markers(&self) -> usize {
        self.domains.iter().map(|d| d.markers.len()).sum()
    }

    /// Random effects per domain, intercept included.
    pub fn q(&self, d: usize) -> usize {
        1 + self.domains[d].random.len()
    }

    pub fn q_total(&self) -> usize {
        (0..self.n_domains()).map(|d| self.q(d)).sum()
    }

    /// Fixed effects per domain, intercept included.
    pub fn p(&self, d: usize) -> usize {
        1 + self.domains[d].fixed.len()
    }

    pub fn p_total(&self) -> usize {
        (0..self.n_domains()).map(|d| self.p(d)).sum()
    }

    pub fn competing_window(&self) -> Option<f64> {
        match (&self.diagnosis, &self.death) {
            (Some(_), Some(_)) => Some(self.competing.as_ref().map_or(f64::INFINITY, |c| c.window)),
            _ => None,
        }
    }

    /// Marker lookup by name: `(domain, marker within domain)`.
    pub fn marker_index(&self, name: &str) -> Option<(usize, usize)> {
        self.domains.iter().enumerate().find_map(|(d, dom)| {
            dom.markers
                .iter()
                .position(|m| m.name == name)
                .map(|k| (d, k))
        })
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Schema("model needs at least one domain".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for dom in &self.domains {
            if !names.insert(dom.name.clone()) {
                return Err(Error::Schema(format!("duplicate domain name {}", dom.name)));
            }
            if dom.markers.is_empty() {
                return Err(Error::Schema(format!("domain {} has no markers", dom.name)));
            }
            for t in dom.fixed.iter().chain(&dom.random) {
                Term::parse(t)?;
            }
        }
        let mut markers = std::collections::BTreeSet::new();
        for m in self.domains.iter().flat_map(|d| &d.markers) {
            if !markers.insert(m.name.clone()) {
                return Err(Error::Schema(format!("duplicate marker name {}", m.name)));
            }
            if m.link.kind == LinkKind::Ispline && m.link.boundary.is_some() {
                if !m.link.knots.is_empty() || m.n_knots == Some(0) {
                    m.link.validate()?;
                }
            }
        }
        let check_endpoint =
            |threshold: &[String], contributions: &[Vec<String>], what: &str| -> Result<()> {
                for t in threshold {
                    Term::parse(t)?;
                }
                if contributions.len() > self.n_domains() {
                    return Err(Error::Schema(format!(
                        "{what}: more contribution blocks than domains"
                    )));
                }
                for t in contributions.iter().flatten() {
                    if Term::parse(t)?.uses_time() {
                        return Err(Error::Schema(format!(
                            "{what}: contribution covariate {t} may not depend on time"
                        )));
                    }
                }
                Ok(())
            };
        if let Some(d) = &self.diagnosis {
            check_endpoint(&d.threshold, &d.contributions, "diagnosis")?;
        }
        if let Some(d) = &self.death {
            check_endpoint(&d.threshold, &d.contributions, "death")?;
            if d.boundaries.len() < 2 || d.boundaries.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Schema(
                    "death interval boundaries must be strictly increasing (at least 2)".into(),
                ));
            }
            if d.spline_knots.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Schema(
                    "death spline knots must be strictly increasing".into(),
                ));
            }
        }
        if self.competing.is_some() && !(self.diagnosis.is_some() && self.death.is_some()) {
            return Err(Error::Schema(
                "competing settings need both diagnosis and death".into(),
            ));
        }
        if let Some(c) = &self.competing {
            if !(c.window > 0.0) {
                return Err(Error::Schema("competing window must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Fills automatic I-spline boundaries and knots from pooled data.
    pub fn resolve_links(&mut self, data: &[SubjectData]) -> Result<()> {
        for (d, dom) in self.domains.iter_mut().enumerate() {
            for (k, m) in dom.markers.iter_mut().enumerate() {
                if m.link.kind != LinkKind::Ispline {
                    continue;
                }
                let values: Vec<f64> = data
                    .iter()
                    .flat_map(|s| s.markers.iter())
                    .filter(|o| o.domain == d && o.marker == k)
                    .map(|o| o.value)
                    .collect();
                if m.link.boundary.is_none() {
                    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if !(lo < hi) {
                        return Err(Error::Schema(format!(
                            "marker {} has no spread for an I-spline link",
                            m.name
                        )));
                    }
                    m.link.boundary = Some((lo, hi));
                }
                if m.link.knots.is_empty() {
                    let count = m.n_knots.unwrap_or(3);
                    if count > 0 {
                        m.link.knots = quantile_knots(&values, count)?;
                    }
                    m.n_knots = Some(count);
                }
                m.link.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerObs {
    pub domain: usize,
    pub marker: usize,
    pub time: f64,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub entry: f64,
    pub time: f64,
    pub died: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectData {
    pub id: String,
    pub covariates: BTreeMap<String, f64>,
    pub markers: Vec<MarkerObs>,
    /// `(time, positive)` in increasing time.
    pub diag: Vec<(f64, bool)>,
    pub event: Option<EventRecord>,
    pub entry: f64,
}

impl SubjectData {
    pub fn diagnosed(&self) -> bool {
        self.diag.last().is_some_and(|v| v.1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Schema(format!("subject {}: {msg}", self.id));
        if self.diag.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(bad(
                "diagnosis visit times must be strictly increasing".into()
            ));
        }
        if self.diag.iter().rev().skip(1).any(|v| v.1) {
            return Err(bad("only the final diagnosis visit may be positive".into()));
        }
        if self.diagnosed() {
            let t = self.diag.last().unwrap().0;
            if self.markers.iter().any(|m| m.time > t) {
                return Err(bad("marker observations after a positive diagnosis".into()));
            }
        }
        if let Some(e) = &self.event {
            if !(e.time >= e.entry) {
                return Err(bad(format!(
                    "terminal time {} before entry {}",
                    e.time, e.entry
                )));
            }
        }
        if self
            .markers
            .iter()
            .any(|m| !m.value.is_finite() || !m.time.is_finite())
        {
            return Err(bad("non-finite marker observation".into()));
        }
        Ok(())
    }
}

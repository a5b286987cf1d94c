use super::terms::parse_all;
use super::ModelSpec;
use crate::error::{Error, Result};
use crate::links::{LinkKind, LinkParams};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Correlation from its unconstrained parameter: `(e^r - 1) / (e^r + 1)`.
pub fn correlation(rho: f64) -> f64 {
    (0.5 * rho).tanh()
}

/// Random-effect covariance through standard deviations and transformed
/// correlations (row-major upper triangle).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceB {
    pub sigmas: Vec<f64>,
    pub rhos: Vec<f64>,
}

impl CovarianceB {
    pub fn q(&self) -> usize {
        self.sigmas.len()
    }

    /// Index of pair `(i, j)`, `i < j`, in [`Self::rhos`].
    pub fn pair_index(q: usize, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < q);
        i * q - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let q = self.q();
        let mut b = DMatrix::zeros(q, q);
        for i in 0..q {
            b[(i, i)] = self.sigmas[i] * self.sigmas[i];
            for j in (i + 1)..q {
                let v = self.sigmas[i]
                    * self.sigmas[j]
                    * correlation(self.rhos[Self::pair_index(q, i, j)]);
                b[(i, j)] = v;
                b[(j, i)] = v;
            }
        }
        b
    }

    /// `B` and whether it is positive semidefinite (smallest eigenvalue
    /// not below `-1e-10`).
    pub fn build(&self) -> (DMatrix<f64>, bool) {
        let b = self.matrix();
        let pd = b.nrows() == 0 || SymmetricEigen::new(b.clone()).eigenvalues.min() >= -1e-10;
        (b, pd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    /// Fixed effects, intercept first (0).
    pub beta: Vec<f64>,
    pub links: Vec<LinkParams>,
    /// Measurement-error SDs per marker.
    pub sigma: Vec<f64>,
    pub sigma_w: f64,
}

/// Contributions per domain (intercept first) and threshold coefficients
/// (reference threshold first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointParams {
    pub contrib: Vec<Vec<f64>>,
    pub zeta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub domains: Vec<DomainParams>,
    pub b: CovarianceB,
    pub diag: Option<EndpointParams>,
    pub death: Option<EndpointParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub fixed: bool,
    /// Value held by fixed entries.
    pub fixed_value: f64,
}

/// Named blocks of the flat parameter vector and the identifiability mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub entries: Vec<ParamInfo>,
    pub blocks: Vec<(String, Range<usize>)>,
    shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Shape {
    p: Vec<usize>,
    eta: Vec<Vec<usize>>,
    brownian: Vec<bool>,
    q: usize,
    diag: Option<(Vec<usize>, usize)>,
    death: Option<(Vec<usize>, usize)>,
}

struct Builder {
    entries: Vec<ParamInfo>,
    blocks: Vec<(String, Range<usize>)>,
}

impl Builder {
    fn block(&mut self, name: String, items: Vec<(String, Option<f64>)>) {
        let start = self.entries.len();
        for (n, fixed) in items {
            self.entries.push(ParamInfo {
                name: n,
                fixed: fixed.is_some(),
                fixed_value: fixed.unwrap_or(0.0),
            });
        }
        self.blocks.push((name, start..self.entries.len()));
    }
}

fn contrib_counts(spec: &ModelSpec, contributions: &[Vec<String>]) -> Vec<usize> {
    (0..spec.n_domains())
        .map(|d| 1 + contributions.get(d).map_or(0, Vec::len))
        .collect()
}

impl ParameterLayout {
    /// Layout for a spec whose link knots are resolved.
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            entries: Vec::new(),
            blocks: Vec::new(),
        };
        let mut re_labels = Vec::new();
        for dom in &spec.domains {
            let dn = &dom.name;
            let mut items = vec![(format!("beta[{dn}](intercept)"), Some(0.0))];
            items.extend(dom.fixed.iter().map(|t| (format!("beta[{dn}]({t})"), None)));
            b.block(format!("beta[{dn}]"), items);
            for m in &dom.markers {
                if m.link.kind == LinkKind::Ispline {
                    m.link.validate()?;
                }
                let items = (0..m.link.n_params())
                    .map(|l| (format!("eta[{}][{l}]", m.name), None))
                    .collect();
                b.block(format!("eta[{}]", m.name), items);
                b.block(
                    format!("sigma[{}]", m.name),
                    vec![(format!("sigma[{}]", m.name), None)],
                );
            }
            if dom.brownian {
                b.block(
                    format!("sigma_w[{dn}]"),
                    vec![(format!("sigma_w[{dn}]"), None)],
                );
            }
            re_labels.push(format!("{dn}:intercept"));
            re_labels.extend(dom.random.iter().map(|t| format!("{dn}:{t}")));
        }
        let mut items = Vec::new();
        let mut pos = 0;
        for d in 0..spec.n_domains() {
            for r in 0..spec.q(d) {
                items.push((
                    format!("B.sd[{}]", re_labels[pos]),
                    if r == 0 { Some(1.0) } else { None },
                ));
                pos += 1;
            }
        }
        b.block("B.sd".into(), items);
        let q = re_labels.len();
        let mut items = Vec::new();
        for i in 0..q {
            for j in (i + 1)..q {
                items.push((format!("B.rho[{},{}]", re_labels[i], re_labels[j]), None));
            }
        }
        b.block("B.rho".into(), items);

        let endpoint = |b: &mut Builder,
                        tag: &str,
                        contributions: &[Vec<String>],
                        zname: &str,
                        zterms: Vec<String>| {
            for (d, dom) in spec.domains.iter().enumerate() {
                let mut items = vec![(format!("{tag}[{}](intercept)", dom.name), None)];
                if let Some(c) = contributions.get(d) {
                    items.extend(
                        c.iter()
                            .map(|t| (format!("{tag}[{}]({t})", dom.name), None)),
                    );
                }
                b.block(format!("{tag}[{}]", dom.name), items);
            }
            let mut items = vec![(format!("{zname}0"), None)];
            items.extend(zterms.into_iter().map(|t| (format!("{zname}({t})"), None)));
            b.block(zname.to_string(), items);
        };
        let mut diag = None;
        if let Some(ds) = &spec.diagnosis {
            endpoint(
                &mut b,
                "gamma",
                &ds.contributions,
                "zeta_diag",
                ds.threshold.clone(),
            );
            diag = Some((
                contrib_counts(spec, &ds.contributions),
                1 + ds.threshold.len(),
            ));
        }
        let mut death = None;
        if let Some(ds) = &spec.death {
            let k = ds.spline_knots.len();
            let mut terms: Vec<String> = (1..k).map(|j| format!("ns{j}")).collect();
            terms.extend(ds.threshold.iter().cloned());
            let nz = 1 + terms.len();
            endpoint(&mut b, "delta", &ds.contributions, "zeta_death", terms);
            death = Some((contrib_counts(spec, &ds.contributions), nz));
        }
        for dom in &spec.domains {
            parse_all(&dom.fixed)?;
        }
        let shape = Shape {
            p: (0..spec.n_domains()).map(|d| spec.p(d)).collect(),
            eta: spec
                .domains
                .iter()
                .map(|d| d.markers.iter().map(|m| m.link.n_params()).collect())
                .collect(),
            brownian: spec.domains.iter().map(|d| d.brownian).collect(),
            q,
            diag,
            death,
        };
        Ok(Self {
            entries: b.entries,
            blocks: b.blocks,
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_free(&self) -> usize {
        self.entries.iter().filter(|e| !e.fixed).count()
    }

    pub fn fixed_mask(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.fixed).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn free_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.fixed)
            .map(|e| e.name.as_str())
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn block(&self, name: &str) -> Option<Range<usize>> {
        self.blocks
            .iter()
            .find(|b| b.0 == name)
            .map(|b| b.1.clone())
    }

    /// Positions of free entries in the full vector.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.entries[i].fixed)
            .collect()
    }

    pub fn free(&self, theta: &[f64]) -> Vec<f64> {
        self.free_indices().into_iter().map(|i| theta[i]).collect()
    }

    /// Full vector from free entries, fixed entries at their constants.
    pub fn expand(&self, free: &[f64]) -> Result<Vec<f64>> {
        if free.len() != self.n_free() {
            return Err(Error::Schema(format!(
                "expected {} free parameters, got {}",
                self.n_free(),
                free.len()
            )));
        }
        let mut it = free.iter();
        Ok(self
            .entries
            .iter()
            .map(|e| {
                if e.fixed {
                    e.fixed_value
                } else {
                    *it.next().unwrap()
                }
            })
            .collect())
    }

    pub fn pack(&self, p: &Params) -> Result<Vec<f64>> {
        let sh = &self.shape;
        let mismatch =
            |what: &str| Error::Schema(format!("parameter structure mismatch in {what}"));
        let mut out = Vec::with_capacity(self.len());
        if p.domains.len() != sh.p.len() {
            return Err(mismatch("domains"));
        }
        for (d, dp) in p.domains.iter().enumerate() {
            if dp.beta.len() != sh.p[d]
                || dp.links.len() != sh.eta[d].len()
                || dp.sigma.len() != sh.eta[d].len()
            {
                return Err(mismatch("domain block"));
            }
            out.extend(&dp.beta);
            for (k, lp) in dp.links.iter().enumerate() {
                if lp.eta.len() != sh.eta[d][k] {
                    return Err(mismatch("link parameters"));
                }
                out.extend(&lp.eta);
                out.push(dp.sigma[k]);
            }
            if sh.brownian[d] {
                out.push(dp.sigma_w);
            }
        }
        if p.b.sigmas.len() != sh.q || p.b.rhos.len() != sh.q * (sh.q.saturating_sub(1)) / 2 {
            return Err(mismatch("B"));
        }
        out.extend(&p.b.sigmas);
        out.extend(&p.b.rhos);
        for (ep, shape) in [(&p.diag, &sh.diag), (&p.death, &sh.death)] {
            match (ep, shape) {
                (None, None) => {}
                (Some(ep), Some((counts, nz))) => {
                    if ep.contrib.len() != counts.len() || ep.zeta.len() != *nz {
                        return Err(mismatch("endpoint"));
                    }
                    for (c, n) in ep.contrib.iter().zip(counts) {
                        if c.len() != *n {
                            return Err(mismatch("contributions"));
                        }
                        out.extend(c);
                    }
                    out.extend(&ep.zeta);
                }
                _ => return Err(mismatch("endpoint presence")),
            }
        }
        for (v, e) in out.iter_mut().zip(&self.entries) {
            if e.fixed {
                *v = e.fixed_value;
            }
        }
        Ok(out)
    }

    pub fn unpack(&self, theta: &[f64]) -> Result<Params> {
        if theta.len() != self.len() {
            return Err(Error::Schema(format!(
                "expected {} parameters, got {}",
                self.len(),
                theta.len()
            )));
        }
        let sh = &self.shape;
        let mut pos = 0;
        let mut take = |n: usize| {
            let v: Vec<f64> = (pos..pos + n)
                .map(|i| {
                    if self.entries[i].fixed {
                        self.entries[i].fixed_value
                    } else {
                        theta[i]
                    }
                })
                .collect();
            pos += n;
            v
        };
        let mut domains = Vec::with_capacity(sh.p.len());
        for d in 0..sh.p.len() {
            let beta = take(sh.p[d]);
            let mut links = Vec::new();
            let mut sigma = Vec::new();
            for &n in &sh.eta[d] {
                links.push(LinkParams::new(take(n)));
                sigma.push(take(1)[0]);
            }
            let sigma_w = if sh.brownian[d] { take(1)[0] } else { 0.0 };
            domains.push(DomainParams {
                beta,
                links,
                sigma,
                sigma_w,
            });
        }
        let sigmas = take(sh.q);
        let rhos = take(sh.q * sh.q.saturating_sub(1) / 2);
        let mut endpoint = |shape: &Option<(Vec<usize>, usize)>| {
            shape.as_ref().map(|(counts, nz)| EndpointParams {
                contrib: counts.iter().map(|&n| take(n)).collect(),
                zeta: take(*nz),
            })
        };
        let diag = endpoint(&sh.diag);
        let death = endpoint(&sh.death);
        Ok(Params {
            domains,
            b: CovarianceB { sigmas, rhos },
            diag,
            death,
        })
    }

    /// Resolves sign symmetries: SDs reported positive (flipping a B SD
    /// together with the correlations of its row), I-spline coefficients
    /// as absolute values. The model is unchanged.
    pub fn canonicalize(&self, spec: &ModelSpec, theta: &[f64]) -> Result<Vec<f64>> {
        let mut p = self.unpack(theta)?;
        for (d, dp) in p.domains.iter_mut().enumerate() {
            for s in dp.sigma.iter_mut() {
                *s = s.abs();
            }
            dp.sigma_w = dp.sigma_w.abs();
            for (k, lp) in dp.links.iter_mut().enumerate() {
                if spec.domains[d].markers[k].link.kind == LinkKind::Ispline {
                    for e in lp.eta.iter_mut().skip(1) {
                        *e = e.abs();
                    }
                }
            }
        }
        let q = p.b.q();
        for i in 0..q {
            if p.b.sigmas[i] < 0.0 {
                p.b.sigmas[i] = -p.b.sigmas[i];
                for j in 0..q {
                    if j != i {
                        let k = CovarianceB::pair_index(q, i.min(j), i.max(j));
                        p.b.rhos[k] = -p.b.rhos[k];
                    }
                }
            }
        }
        self.pack(&p)
    }
}

//! Monotone link functions mapping raw marker values onto the latent scale.
//!
//! Two families are available: the location/scale transform
//! `H(y) = (y - eta0) / eta1`, and a linear combination of quadratic
//! I-splines with squared coefficients,
//! `H(y) = eta0 + sum_l eta_l^2 IS_l(y)`, which is nondecreasing for every
//! parameter vector.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Linear,
    Ispline,
}

/// Shape of one marker's link function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub kind: LinkKind,
    /// Interior knots (I-spline only).
    #[serde(default)]
    pub knots: Vec<f64>,
    /// Marker range `(min, max)`; required for I-splines.
    #[serde(default)]
    pub boundary: Option<(f64, f64)>,
}

/// Unconstrained link parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub eta: Vec<f64>,
}

impl LinkParams {
    pub fn new(eta: Vec<f64>) -> Self {
        Self { eta }
    }
}

const MIN_SCALE: f64 = 1e-8;

impl LinkSpec {
    pub fn linear() -> Self {
        Self {
            kind: LinkKind::Linear,
            knots: Vec::new(),
            boundary: None,
        }
    }

    pub fn ispline(knots: Vec<f64>, min: f64, max: f64) -> Result<Self> {
        let s = Self {
            kind: LinkKind::Ispline,
            knots,
            boundary: Some((min, max)),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn n_params(&self) -> usize {
        match self.kind {
            LinkKind::Linear => 2,
            LinkKind::Ispline => self.knots.len() + 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == LinkKind::Linear {
            return Ok(());
        }
        let (lo, hi) = self
            .boundary
            .ok_or_else(|| Error::Schema("I-spline link needs a boundary".into()))?;
        if !(lo < hi) {
            return Err(Error::Schema(format!(
                "I-spline boundary ({lo}, {hi}) is empty"
            )));
        }
        let mut prev = lo;
        for &k in &self.knots {
            if !(k > prev) {
                return Err(Error::Schema(format!(
                    "I-spline knots must be strictly increasing inside ({lo}, {hi}): {:?}",
                    self.knots
                )));
            }
            prev = k;
        }
        if !(hi > prev) {
            return Err(Error::Schema(format!(
                "I-spline knot {prev} not inside boundary"
            )));
        }
        Ok(())
    }

    fn check_params(&self, p: &LinkParams) -> Result<()> {
        if p.eta.len() != self.n_params() {
            return Err(Error::Schema(format!(
                "link expects {} parameters, got {}",
                self.n_params(),
                p.eta.len()
            )));
        }
        if self.kind == LinkKind::Linear && !(p.eta[1].abs() > MIN_SCALE) {
            return Err(Error::Domain(format!(
                "linear link scale {} too close to 0",
                p.eta[1]
            )));
        }
        Ok(())
    }

    fn in_range(&self, y: f64) -> Result<()> {
        if let (LinkKind::Ispline, Some((lo, hi))) = (self.kind, self.boundary) {
            if !(y >= lo && y <= hi) {
                return Err(Error::Domain(format!(
                    "marker value {y} outside link boundary [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn transform(&self, p: &LinkParams, y: f64) -> Result<f64> {
        self.check_params(p)?;
        self.in_range(y)?;
        Ok(match self.kind {
            LinkKind::Linear => (y - p.eta[0]) / p.eta[1],
            LinkKind::Ispline => {
                let basis = ISplineBasis::new(self);
                let mut v = p.eta[0];
                basis.for_each_value(y, |l, is| v += p.eta[l + 1] * p.eta[l + 1] * is);
                v
            }
        })
    }

    /// `dH/dy`, nonnegative.
    pub fn jacobian(&self, p: &LinkParams, y: f64) -> Result<f64> {
        self.check_params(p)?;
        self.in_range(y)?;
        Ok(match self.kind {
            LinkKind::Linear => (1.0 / p.eta[1]).abs(),
            LinkKind::Ispline => {
                let basis = ISplineBasis::new(self);
                let mut v = 0.0;
                basis.for_each_derivative(y, |l, m| v += p.eta[l + 1] * p.eta[l + 1] * m);
                v
            }
        })
    }

    /// Transformed value and Jacobian in one pass.
    pub fn transform_with_jacobian(&self, p: &LinkParams, y: f64) -> Result<(f64, f64)> {
        Ok((self.transform(p, y)?, self.jacobian(p, y)?))
    }

    /// Range of `H` over the boundary (infinite for linear links).
    pub fn transformed_range(&self, p: &LinkParams) -> Result<(f64, f64)> {
        self.check_params(p)?;
        match self.kind {
            LinkKind::Linear => Ok((f64::NEG_INFINITY, f64::INFINITY)),
            LinkKind::Ispline => {
                let top: f64 = p.eta[1..].iter().map(|e| e * e).sum();
                Ok((p.eta[0], p.eta[0] + top))
            }
        }
    }

    pub fn inverse(&self, p: &LinkParams, z: f64) -> Result<f64> {
        self.check_params(p)?;
        match self.kind {
            LinkKind::Linear => Ok(p.eta[0] + p.eta[1] * z),
            LinkKind::Ispline => {
                let (zlo, zhi) = self.transformed_range(p)?;
                if !(z >= zlo && z <= zhi) {
                    return Err(Error::Domain(format!(
                        "transformed value {z} outside link range [{zlo}, {zhi}]"
                    )));
                }
                let (mut lo, mut hi) = self.boundary.expect("validated");
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let h = self.transform(p, mid)?;
                    if (h - z).abs() <= 1e-12 || hi - lo <= 1e-15 * (1.0 + mid.abs()) {
                        return Ok(mid);
                    }
                    if h < z {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }
}

/// Quadratic I-spline basis on `[a, b]` with interior knots. `IS_l` is the
/// integral of the order-2 M-spline `M_l`, written as a tail sum of
/// order-3 B-splines: `IS_l = sum_{j >= l} B_{j,3}`.
#[derive(Clone, Debug)]
pub struct ISplineBasis {
    t: Vec<f64>,
    n_basis: usize,
}

impl ISplineBasis {
    pub fn new(spec: &LinkSpec) -> Self {
        let (a, b) = spec.boundary.expect("I-spline boundary");
        let mut t = vec![a, a, a];
        t.extend_from_slice(&spec.knots);
        t.extend_from_slice(&[b, b, b]);
        Self {
            n_basis: spec.knots.len() + 2,
            t,
        }
    }

    /// Number of I-spline functions (excluding the intercept).
    pub fn len(&self) -> usize {
        self.n_basis
    }

    pub fn is_empty(&self) -> bool {
        self.n_basis == 0
    }

    fn span(&self, x: f64) -> usize {
        let last = self.t.len() - 4;
        let mut mu = 2;
        while mu < last && self.t[mu + 1] <= x {
            mu += 1;
        }
        mu
    }

    /// Nonzero B-splines of the given degree at `x` in span `mu`:
    /// values for indices `mu - degree ..= mu`.
    fn bsplines(&self, mu: usize, degree: usize, x: f64, out: &mut [f64; 3]) {
        let t = &self.t;
        let mut left = [0.0; 3];
        let mut right = [0.0; 3];
        out[0] = 1.0;
        for j in 1..=degree {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { out[r] / denom } else { 0.0 };
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    /// Calls `f(l, IS_{l+1}(x))` for every basis function with `l` zero-based.
    pub fn for_each_value(&self, x: f64, mut f: impl FnMut(usize, f64)) {
        let mu = self.span(x);
        let mut n = [0.0; 3];
        self.bsplines(mu, 2, x, &mut n);
        // B_{j,3} index j runs over mu-2..=mu with values n[0..3]
        for l in 1..=self.n_basis {
            let v = if l + 2 <= mu {
                1.0
            } else if l > mu {
                0.0
            } else {
                (l..=mu).map(|j| n[j + 2 - mu]).sum()
            };
            f(l - 1, v);
        }
    }

    /// Calls `f(l, IS'_{l+1}(x))`.
    pub fn for_each_derivative(&self, x: f64, mut f: impl FnMut(usize, f64)) {
        let mu = self.span(x);
        let mut n = [0.0; 3];
        self.bsplines(mu, 1, x, &mut n);
        let t = &self.t;
        for l in 1..=self.n_basis {
            // IS_l' = 2 B_{l,2} / (t_{l+2} - t_l), B_{j,2} nonzero for j in mu-1..=mu
            let v = if l + 1 == mu || l == mu {
                let width = t[l + 2] - t[l];
                if width > 0.0 {
                    2.0 * n[l + 1 - mu] / width
                } else {
                    0.0
                }
            } else {
                0.0
            };
            f(l - 1, v);
        }
    }

    pub fn values(&self, x: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.n_basis];
        self.for_each_value(x, |l, s| v[l] = s);
        v
    }

    pub fn derivatives(&self, x: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.n_basis];
        self.for_each_derivative(x, |l, s| v[l] = s);
        v
    }
}

/// Sample quantiles (linear interpolation between order statistics).
pub fn quantiles(values: &[f64], probs: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    probs
        .iter()
        .map(|&p| {
            if v.is_empty() {
                return f64::NAN;
            }
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(v.len() - 1);
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        })
        .collect()
}

/// Interior knots at equally spaced quantiles (quartiles for `count = 3`).
pub fn quantile_knots(values: &[f64], count: usize) -> Result<Vec<f64>> {
    let probs: Vec<f64> = (1..=count).map(|i| i as f64 / (count + 1) as f64).collect();
    let k = quantiles(values, &probs);
    if k.windows(2).any(|w| !(w[1] > w[0])) || k.iter().any(|x| !x.is_finite()) {
        return Err(Error::Schema(format!(
            "quantile knots {k:?} are not strictly increasing; give knots explicitly"
        )));
    }
    Ok(k)
}

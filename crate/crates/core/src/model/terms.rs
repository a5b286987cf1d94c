use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// One design column: `"time"`, `"time^2"`, a covariate name such as
/// `"EL"`, or an interaction like `"EL*time"`.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub covariate: Option<String>,
    pub time_power: u32,
}

fn time_power(s: &str) -> Option<Result<u32>> {
    if s == "time" {
        return Some(Ok(1));
    }
    let rest = s.strip_prefix("time^")?;
    Some(match rest.parse::<u32>() {
        Ok(p) if p >= 1 => Ok(p),
        _ => Err(Error::Schema(format!("bad time power in term {s:?}"))),
    })
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_alphanumeric() || c == '_' || c == '.')
        && !s.starts_with(|c: char| c.is_ascii_digit())
}

impl Term {
    pub fn parse(text: &str) -> Result<Term> {
        let parts: Vec<&str> = text.split('*').map(str::trim).collect();
        let mut covariate = None;
        let mut power = 0;
        for p in &parts {
            match time_power(p) {
                Some(r) => {
                    if power > 0 {
                        return Err(Error::Schema(format!("term {text:?} repeats time")));
                    }
                    power = r?;
                }
                None => {
                    if !valid_name(p) || covariate.is_some() {
                        return Err(Error::Schema(format!("cannot parse term {text:?}")));
                    }
                    covariate = Some(p.to_string());
                }
            }
        }
        if parts.is_empty() || (covariate.is_none() && power == 0) {
            return Err(Error::Schema(format!("empty term {text:?}")));
        }
        Ok(Term {
            covariate,
            time_power: power,
        })
    }

    pub fn uses_time(&self) -> bool {
        self.time_power > 0
    }

    pub fn eval(&self, t: f64, cov: &BTreeMap<String, f64>, subject: &str) -> Result<f64> {
        let c = match &self.covariate {
            Some(name) => *cov.get(name).ok_or_else(|| {
                Error::Schema(format!(
                    "subject {subject}: missing covariate column {name}"
                ))
            })?,
            None => 1.0,
        };
        Ok(c * t.powi(self.time_power as i32))
    }
}

pub fn parse_all(terms: &[String]) -> Result<Vec<Term>> {
    terms.iter().map(|t| Term::parse(t)).collect()
}

/// Intercept followed by the terms.
pub fn design_row(
    terms: &[Term],
    t: f64,
    cov: &BTreeMap<String, f64>,
    subject: &str,
) -> Result<Vec<f64>> {
    let mut row = Vec::with_capacity(terms.len() + 1);
    row.push(1.0);
    for term in terms {
        row.push(term.eval(t, cov, subject)?);
    }
    Ok(row)
}

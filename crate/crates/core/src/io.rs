//! Plain-text file formats: long-format data CSVs, result tables and the
//! reloadable fitted-model file.
//!
//! Every written file opens with a comment line
//! `# latjoint <kind> v1 seed=<seed>`; readers skip lines starting with `#`.

use crate::error::{Error, Result};
use crate::estimate::{FitResult, OptimizerConfig};
use crate::model::{EventRecord, MarkerObs, ModelSpec, ParameterLayout, SubjectData};
use crate::mvn::normal;
use crate::predict::Prediction;
use crate::simulate::ReplicationReport;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;

pub fn header_line(kind: &str, seed: u64) -> String {
    format!("# latjoint {kind} v{FORMAT_VERSION} seed={seed}")
}

/// Data files of one dataset. Only the marker file is mandatory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataPaths {
    pub markers: PathBuf,
    pub diag: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
}

struct Table {
    file: String,
    columns: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let file = path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Schema(format!("{file}: {e}")))?;
        let columns = rdr
            .headers()
            .map_err(|e| Error::Schema(format!("{file}: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Schema(format!("{file}: {e}")))?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Table {
            file,
            columns,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{name}`", self.file)))
    }

    fn err(&self, line: u64, column: &str, msg: impl std::fmt::Display) -> Error {
        Error::Schema(format!("{}:{line}: column `{column}`: {msg}", self.file))
    }

    fn text<'a>(&self, rec: &'a csv::StringRecord, line: u64, col: usize) -> Result<&'a str> {
        match rec.get(col) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(self.err(line, &self.columns[col], "missing value")),
        }
    }

    fn number(&self, rec: &csv::StringRecord, line: u64, col: usize) -> Result<f64> {
        let v = self.text(rec, line, col)?;
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(self.err(
                line,
                &self.columns[col],
                format!("`{v}` is not a finite number"),
            )),
        }
    }

    fn flag(&self, rec: &csv::StringRecord, line: u64, col: usize) -> Result<bool> {
        match self.text(rec, line, col)? {
            "0" => Ok(false),
            "1" => Ok(true),
            v => Err(self.err(
                line,
                &self.columns[col],
                format!("status `{v}` is not 0 or 1"),
            )),
        }
    }
}

#[derive(Default)]
struct Builder {
    index: HashMap<String, usize>,
    subjects: Vec<SubjectData>,
}

impl Builder {
    fn get(&mut self, id: &str) -> &mut SubjectData {
        let i = *self.index.entry(id.to_string()).or_insert_with(|| {
            self.subjects.push(SubjectData {
                id: id.to_string(),
                covariates: BTreeMap::new(),
                markers: Vec::new(),
                diag: Vec::new(),
                event: None,
                entry: f64::NAN,
            });
            self.subjects.len() - 1
        });
        &mut self.subjects[i]
    }
}

/// Reads a dataset. Subjects appear in order of first mention, scanning the
/// covariate, marker, diagnosis and event files in that order.
pub fn read_dataset(spec: &ModelSpec, paths: &DataPaths) -> Result<Vec<SubjectData>> {
    let mut b = Builder::default();
    let mut with_covariates = None;
    let mut n_cov = 0;
    if let Some(p) = &paths.covariates {
        let t = Table::read(p)?;
        let id = t.column("id")?;
        for (line, rec) in &t.rows {
            let sid = t.text(rec, *line, id)?.to_string();
            if b.index.contains_key(&sid) {
                return Err(t.err(*line, "id", format!("subject {sid} listed twice")));
            }
            let mut cov = BTreeMap::new();
            for (c, name) in t.columns.iter().enumerate() {
                if c != id {
                    cov.insert(name.clone(), t.number(rec, *line, c)?);
                }
            }
            b.get(&sid).covariates = cov;
        }
        with_covariates = Some(t.file.clone());
        n_cov = b.subjects.len();
    }

    let t = Table::read(&paths.markers)?;
    let (id, time, domain) = (t.column("id")?, t.column("time")?, t.column("domain")?);
    let (marker, value) = (t.column("marker")?, t.column("value")?);
    for (line, rec) in &t.rows {
        let mname = t.text(rec, *line, marker)?;
        let (d, k) = spec
            .marker_index(mname)
            .ok_or_else(|| t.err(*line, "marker", format!("unknown marker `{mname}`")))?;
        let dname = t.text(rec, *line, domain)?;
        if spec.domains[d].name != dname {
            return Err(t.err(
                *line,
                "domain",
                format!("marker `{mname}` does not belong to domain `{dname}`"),
            ));
        }
        let obs = MarkerObs {
            domain: d,
            marker: k,
            time: t.number(rec, *line, time)?,
            value: t.number(rec, *line, value)?,
        };
        let sid = t.text(rec, *line, id)?;
        b.get(sid).markers.push(obs);
    }

    if let Some(p) = &paths.diag {
        let t = Table::read(p)?;
        let (id, time, status) = (t.column("id")?, t.column("time")?, t.column("status")?);
        for (line, rec) in &t.rows {
            let v = (t.number(rec, *line, time)?, t.flag(rec, *line, status)?);
            let sid = t.text(rec, *line, id)?;
            b.get(sid).diag.push(v);
        }
    }

    if let Some(p) = &paths.events {
        let t = Table::read(p)?;
        let (id, entry, time, status) = (
            t.column("id")?,
            t.column("entry")?,
            t.column("time")?,
            t.column("status")?,
        );
        for (line, rec) in &t.rows {
            let ev = EventRecord {
                entry: t.number(rec, *line, entry)?,
                time: t.number(rec, *line, time)?,
                died: t.flag(rec, *line, status)?,
            };
            let sid = t.text(rec, *line, id)?;
            let s = b.get(sid);
            if s.event.replace(ev).is_some() {
                return Err(t.err(*line, "id", format!("subject {sid} has two event records")));
            }
        }
    }

    for (i, s) in b.subjects.iter_mut().enumerate() {
        if let Some(file) = &with_covariates {
            if i >= n_cov {
                return Err(Error::Schema(format!(
                    "{file}: no covariate row for subject {}",
                    s.id
                )));
            }
        }
        s.entry = match &s.event {
            Some(ev) => ev.entry,
            None => s
                .diag
                .iter()
                .map(|v| v.0)
                .chain(s.markers.iter().map(|o| o.time))
                .fold(f64::INFINITY, f64::min),
        };
        if !s.entry.is_finite() {
            s.entry = 0.0;
        }
        s.validate()?;
    }
    Ok(b.subjects)
}

fn create(path: &Path, kind: &str, seed: u64) -> Result<csv::Writer<BufWriter<File>>> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{}", header_line(kind, seed))?;
    Ok(csv::Writer::from_writer(f))
}

fn finish(w: csv::Writer<BufWriter<File>>) -> Result<()> {
    w.into_inner()
        .map_err(|e| Error::Io(e.into_error()))?
        .flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same value.
fn num(x: f64) -> String {
    if x != 0.0 && (x.abs() < 1e-4 || x.abs() >= 1e15) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, num)
}

/// Writes `markers.csv`, `diag.csv`, `events.csv` and `covariates.csv`
/// into `dir`.
pub fn write_dataset(
    dir: &Path,
    spec: &ModelSpec,
    subjects: &[SubjectData],
    seed: u64,
) -> Result<DataPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = DataPaths {
        markers: dir.join("markers.csv"),
        diag: Some(dir.join("diag.csv")),
        events: Some(dir.join("events.csv")),
        covariates: Some(dir.join("covariates.csv")),
    };

    let mut w = create(&paths.markers, "markers", seed)?;
    w.write_record(["id", "time", "domain", "marker", "value"])?;
    for s in subjects {
        for o in &s.markers {
            let d = &spec.domains[o.domain];
            w.write_record([
                s.id.as_str(),
                &num(o.time),
                &d.name,
                &d.markers[o.marker].name,
                &num(o.value),
            ])?;
        }
    }
    finish(w)?;

    let mut w = create(paths.diag.as_ref().unwrap(), "diag", seed)?;
    w.write_record(["id", "time", "status"])?;
    for s in subjects {
        for &(t, pos) in &s.diag {
            w.write_record([s.id.as_str(), &num(t), if pos { "1" } else { "0" }])?;
        }
    }
    finish(w)?;

    let mut w = create(paths.events.as_ref().unwrap(), "events", seed)?;
    w.write_record(["id", "entry", "time", "status"])?;
    for s in subjects {
        if let Some(ev) = &s.event {
            w.write_record([
                s.id.as_str(),
                &num(ev.entry),
                &num(ev.time),
                if ev.died { "1" } else { "0" },
            ])?;
        }
    }
    finish(w)?;

    let names: Vec<&String> = subjects
        .first()
        .map_or_else(Vec::new, |s| s.covariates.keys().collect());
    if subjects
        .iter()
        .any(|s| !s.covariates.keys().eq(names.iter().copied()))
    {
        return Err(Error::Schema(
            "subjects carry different covariate names".into(),
        ));
    }
    let mut w = create(paths.covariates.as_ref().unwrap(), "covariates", seed)?;
    w.write_record(std::iter::once("id").chain(names.iter().map(|n| n.as_str())))?;
    for s in subjects {
        let mut rec = vec![s.id.clone()];
        rec.extend(s.covariates.values().map(|v| num(*v)));
        w.write_record(&rec)?;
    }
    finish(w)?;
    Ok(paths)
}

/// A fit together with everything needed to reuse it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittedModel {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub spec: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub fit: FitResult,
}

impl FittedModel {
    pub fn new(spec: ModelSpec, optimizer: OptimizerConfig, fit: FitResult, seed: u64) -> Self {
        FittedModel {
            format: "latjoint-fit".into(),
            version: FORMAT_VERSION,
            seed,
            spec,
            optimizer,
            fit,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: FittedModel = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if m.format != "latjoint-fit" || m.version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "{}: not a version {FORMAT_VERSION} fitted-model file",
                path.display()
            )));
        }
        m.spec.validate()?;
        Ok(m)
    }
}

/// Two-sided Wald p-value of `estimate / se`.
pub fn wald_p(estimate: f64, se: f64) -> f64 {
    2.0 * normal::cdf(-(estimate / se).abs())
}

/// Free parameters with estimate, standard error, Wald statistic and p-value.
pub fn write_estimates(path: &Path, spec: &ModelSpec, fit: &FitResult, seed: u64) -> Result<()> {
    let layout = ParameterLayout::new(spec)?;
    let mut w = create(path, "estimates", seed)?;
    w.write_record(["parameter", "estimate", "se", "wald_z", "p_value"])?;
    for (name, se) in fit.free_names.iter().zip(&fit.se) {
        let i = layout
            .index_of(name)
            .ok_or_else(|| Error::Schema(format!("parameter {name} is not in the model layout")))?;
        let est = fit.theta_hat[i];
        let z = se.map(|s| est / s);
        let p = se.map(|s| wald_p(est, s));
        w.write_record([name.as_str(), &num(est), &opt(*se), &opt(z), &opt(p)])?;
    }
    finish(w)
}

/// Convergence summary as `key,value` rows.
pub fn write_convergence(
    path: &Path,
    fit: &FitResult,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<()> {
    let mut w = create(path, "convergence", seed)?;
    w.write_record(["key", "value"])?;
    let f = &fit.convergence_flags;
    let rows = [
        ("converged", fit.converged.to_string()),
        ("iterations", fit.iterations.to_string()),
        ("initial_loglik", num(fit.initial_ll)),
        ("final_loglik", num(fit.final_ll)),
        ("rdm", num(fit.rdm)),
        ("rdm_tol", num(cfg.rdm_tol)),
        ("rdm_met", f.rdm.to_string()),
        ("param_tol", num(cfg.param_tol)),
        ("params_met", f.params.to_string()),
        ("ll_tol", num(cfg.ll_tol)),
        ("ll_met", f.ll.to_string()),
    ];
    for (k, v) in rows {
        w.write_record([k, v.as_str()])?;
    }
    finish(w)
}

pub fn write_replication(path: &Path, report: &ReplicationReport) -> Result<()> {
    let mut w = create(path, "replication", report.seed)?;
    w.write_record([
        "parameter",
        "theta",
        "mean_est",
        "bias_pct",
        "mean_SE",
        "emp_SD",
        "CR95",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.parameter.as_str(),
            &num(r.theta),
            &num(r.mean_est),
            &opt(r.bias_pct),
            &opt(r.mean_se),
            &num(r.emp_sd),
            &opt(r.cr95),
        ])?;
    }
    finish(w)
}

/// Per-replicate outcomes, one row each.
pub fn write_outcomes(path: &Path, report: &ReplicationReport) -> Result<()> {
    let mut w = create(path, "replicates", report.seed)?;
    w.write_record([
        "replicate",
        "seed",
        "converged",
        "iterations",
        "final_loglik",
        "n_diagnosed",
        "n_deaths",
        "mean_visits",
        "error",
    ])?;
    for o in &report.outcomes {
        w.write_record([
            o.index.to_string(),
            o.seed.to_string(),
            o.converged.to_string(),
            o.iterations.to_string(),
            num(o.final_ll),
            o.n_diagnosed.to_string(),
            o.n_deaths.to_string(),
            num(o.mean_visits),
            o.error.clone().unwrap_or_default(),
        ])?;
    }
    finish(w)
}

pub fn replication_summary(report: &ReplicationReport) -> String {
    let mut s = format!("{}\n", header_line("summary", report.seed));
    s += &format!("design {}\n", report.design);
    s += &format!(
        "replicates {} converged {}\n",
        report.n_replicates, report.n_converged
    );
    if report.degraded {
        s += "DEGRADED: more than 20% of the replicates did not converge\n";
    }
    s += &format!(
        "{:<32} {:>10} {:>10} {:>8} {:>8} {:>8} {:>6}\n",
        "parameter", "theta", "mean", "bias%", "SE", "SD", "CR95"
    );
    let cell = |x: Option<f64>, p: usize| x.map_or_else(|| "-".to_string(), |v| format!("{v:.p$}"));
    for r in &report.rows {
        s += &format!(
            "{:<32} {:>10.4} {:>10.4} {:>8} {:>8} {:>8.4} {:>6}\n",
            r.parameter,
            r.theta,
            r.mean_est,
            cell(r.bias_pct, 2),
            cell(r.mean_se, 4),
            r.emp_sd,
            cell(r.cr95, 1)
        );
    }
    s
}

pub fn write_prediction(path: &Path, pred: &Prediction, seed: u64) -> Result<()> {
    let mut w = create(path, "prediction", seed)?;
    w.write_record(["time", "estimate", "lower", "upper"])?;
    for p in &pred.points {
        w.write_record([num(p.time), num(p.estimate), opt(p.lower), opt(p.upper)])?;
    }
    finish(w)
}

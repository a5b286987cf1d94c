use crate::{
    DesignArgs, FitArgs, MvncdfArgs, OptimizerArgs, PredictArgs, ReplicateArgs, SimulateArgs,
};
use latjoint::estimate::{marquardt_fit, neutral_start, staged_init, OptimizerConfig};
use latjoint::io::{self, DataPaths, FittedModel};
use latjoint::likelihood::{default_cdf_config, Likelihood};
use latjoint::model::{ModelSpec, ParameterLayout};
use latjoint::mvn::{mvn_cdf, CdfConfig, GaussianCdfQuery};
use latjoint::predict::PredictRequest;
use latjoint::simulate::{generate_dataset, run_replication, SimDesign};
use latjoint::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub enum Outcome {
    Done,
    NotConverged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Init {
    Staged,
    Neutral,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn load_spec(path: &Path) -> Result<ModelSpec> {
    ModelSpec::from_toml(&read_text(path)?)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn optimizer(a: &OptimizerArgs) -> Result<OptimizerConfig> {
    let mut cfg = OptimizerConfig::default();
    if let Some(n) = a.max_iter {
        cfg.max_iter = n;
    }
    if let Some(t) = a.tol_rdm {
        cfg.rdm_tol = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_design(a: &DesignArgs) -> Result<SimDesign> {
    let mut d = match (&a.scenario, &a.design) {
        (Some(name), _) => SimDesign::scenario(name, a.seed)?,
        (None, Some(path)) => toml::from_str::<SimDesign>(&read_text(path)?)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?,
        (None, None) => return Err(Error::Schema("give --scenario or --design".into())),
    };
    d.seed = a.seed;
    if let Some(n) = a.n_subjects {
        d.n_subjects = n;
    }
    d.validate()?;
    Ok(d)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn fit(a: FitArgs) -> Result<Outcome> {
    let mut spec = load_spec(&a.spec)?;
    let paths = DataPaths {
        markers: a.markers,
        diag: a.diag,
        events: a.events,
        covariates: a.covariates,
    };
    let data = io::read_dataset(&spec, &paths)?;
    spec.resolve_links(&data)?;
    let cfg = optimizer(&a.opt)?;
    let lik = Likelihood::new(&spec, &data, default_cdf_config(a.seed))?;
    let theta0 = match a.init {
        Init::Staged => staged_init(&spec, &data, &cfg, a.seed)?,
        Init::Neutral => neutral_start(&spec, &data)?,
    };
    let fit = marquardt_fit(&lik, &theta0, &cfg)?;

    fs::create_dir_all(&a.out)?;
    io::write_estimates(&a.out.join("estimates.csv"), &spec, &fit, a.seed)?;
    io::write_convergence(&a.out.join("convergence.csv"), &fit, &cfg, a.seed)?;
    let converged = fit.converged;
    println!(
        "{} subjects, {} free parameters, log-likelihood {:.6}, {} iterations, {}",
        data.len(),
        fit.free_names.len(),
        fit.final_ll,
        fit.iterations,
        if converged {
            "converged"
        } else {
            "NOT converged"
        }
    );
    FittedModel::new(spec, cfg, fit, a.seed).save(&a.out.join("fit.json"))?;
    Ok(if converged {
        Outcome::Done
    } else {
        Outcome::NotConverged
    })
}

pub fn simulate(a: SimulateArgs) -> Result<Outcome> {
    let d = load_design(&a.design)?;
    let data = generate_dataset(&d)?;
    io::write_dataset(&a.out, &d.spec, &data.subjects, d.seed)?;
    let head = io::header_line("spec", d.seed);
    write_text(
        &a.out.join("spec.toml"),
        &format!("{head}\n{}", d.spec.to_toml()?),
    )?;
    let design = toml::to_string_pretty(&d).map_err(Error::TomlSer)?;
    write_text(
        &a.out.join("design.toml"),
        &format!("{}\n{design}", io::header_line("design", d.seed)),
    )?;

    let layout = ParameterLayout::new(&d.spec)?;
    let theta = d.theta_vector()?;
    let mut truth = format!(
        "{}\nparameter,value,fixed\n",
        io::header_line("truth", d.seed)
    );
    for (e, v) in layout.entries.iter().zip(&theta) {
        truth += &format!("{},{v},{}\n", e.name, e.fixed);
    }
    write_text(&a.out.join("truth.csv"), &truth)?;
    println!(
        "{} subjects, {:.2} visits per subject, {} diagnosed, {} deaths, {} clamped values, {} rejected at entry",
        data.subjects.len(),
        data.mean_visits(),
        data.n_diagnosed(),
        data.n_deaths(),
        data.clamped,
        data.rejected
    );
    Ok(Outcome::Done)
}

pub fn replicate(a: ReplicateArgs) -> Result<Outcome> {
    let d = load_design(&a.design)?;
    let fit_spec = a.spec.as_deref().map(load_spec).transpose()?;
    let cfg = optimizer(&a.opt)?;
    let report = run_replication(&d, fit_spec.as_ref(), a.replicates, &cfg)?;
    fs::create_dir_all(&a.out)?;
    io::write_replication(&a.out.join("replication.csv"), &report)?;
    io::write_outcomes(&a.out.join("replicates.csv"), &report)?;
    let summary = io::replication_summary(&report);
    write_text(&a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(if report.degraded {
        Outcome::NotConverged
    } else {
        Outcome::Done
    })
}

fn parse_profile(items: &[String]) -> Result<BTreeMap<String, f64>> {
    items
        .iter()
        .map(|item| {
            let (k, v) = item.split_once('=').ok_or_else(|| {
                Error::Schema(format!("profile entry `{item}` is not name=value"))
            })?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Schema(format!("profile value `{v}` is not a number")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

fn parse_times(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Schema(format!("cannot parse time grid `{text}`"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() == 3 {
        let v: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let (start, stop, step) = (v[0], v[1], v[2]);
        if !(step > 0.0) || !(stop >= start) {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|k| start + k as f64 * step).collect());
    }
    text.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect()
}

pub fn predict(a: PredictArgs) -> Result<Outcome> {
    let model = FittedModel::load(&a.fit)?;
    if !model.fit.converged {
        log::warn!("the fitted model did not converge");
    }
    let req = PredictRequest {
        profile: parse_profile(&a.profile)?,
        times: parse_times(&a.times)?,
        mc_draws: a.draws,
        level: a.level,
        seed: a.seed,
    };
    let pred = latjoint::predict::predict(&model.spec, &model.fit, &req)?;
    fs::create_dir_all(&a.out)?;
    io::write_prediction(&a.out.join("prediction.csv"), &pred, a.seed)?;
    println!(
        "{} grid points, {} parameter draws",
        pred.points.len(),
        pred.draws
    );
    Ok(Outcome::Done)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CdfInput {
    upper: Vec<f64>,
    cov: Vec<Vec<f64>>,
    mean: Option<Vec<f64>>,
    #[serde(default)]
    config: Option<CdfConfig>,
}

pub fn mvncdf(a: MvncdfArgs) -> Result<Outcome> {
    let input: CdfInput = toml::from_str(&read_text(&a.input)?)
        .map_err(|e| Error::Schema(format!("{}: {e}", a.input.display())))?;
    let n = input.upper.len();
    if input.cov.len() != n || input.cov.iter().any(|r| r.len() != n) {
        return Err(Error::Schema(format!(
            "{}: cov must be {n} x {n}",
            a.input.display()
        )));
    }
    let cov = DMatrix::from_fn(n, n, |i, j| input.cov[i][j]);
    let mean = DVector::from_vec(input.mean.unwrap_or_else(|| vec![0.0; n]));
    let query = GaussianCdfQuery::new(DVector::from_vec(input.upper), mean, cov);
    let cfg = input.config.unwrap_or_default().with_seed(a.seed);
    let v = mvn_cdf(&query, &cfg)?;
    println!("{}", v.value);
    log::info!("error estimate {:e}", v.err_estimate);
    Ok(Outcome::Done)
}

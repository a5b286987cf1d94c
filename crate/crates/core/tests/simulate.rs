mod common;

use common::lmm::gaussian_design;
use latjoint::estimate::{marquardt_fit, staged_init, OptimizerConfig};
use latjoint::likelihood::{default_cdf_config, Likelihood};
use latjoint::simulate::{generate_dataset, run_replication, ErrorDist, SimDesign};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixed_part(design: &SimDesign, dom: usize, t: f64, el: f64) -> f64 {
    let beta = &design.theta.domains[dom].beta;
    let row: Vec<f64> = if dom == 0 {
        vec![1.0, t, el, el * t]
    } else {
        vec![1.0, t, el]
    };
    row.iter().zip(beta).map(|(a, b)| a * b).sum()
}

#[test]
fn marker_residual_sd_matches_sigma() {
    let mut d = SimDesign {
        n_subjects: 2600,
        ..SimDesign::scenario("I.1.a", 101).unwrap()
    };
    // without random effects the latent value is the fixed part
    d.theta.b.sigmas.iter_mut().for_each(|s| *s = 0.0);
    let data = generate_dataset(&d).unwrap();
    assert_eq!(data.clamped, 0);
    let mut res: [Vec<f64>; 3] = Default::default();
    for s in &data.subjects {
        let el = s.covariates["EL"];
        for o in &s.markers {
            let m = &d.spec.domains[o.domain].markers[o.marker];
            let lp = &d.theta.domains[o.domain].links[o.marker];
            let h = m.link.transform(lp, o.value).unwrap();
            let slot = if o.domain == 0 { o.marker } else { 2 };
            res[slot].push(h - fixed_part(&d, o.domain, o.time, el));
        }
    }
    let sigmas = [
        d.theta.domains[0].sigma[0],
        d.theta.domains[0].sigma[1],
        d.theta.domains[1].sigma[0],
    ];
    for (r, sigma) in res.iter().zip(sigmas) {
        assert!(r.len() >= 10_000, "{} observations", r.len());
        let n = r.len() as f64;
        let sd = (r.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert!((sd / sigma - 1.0).abs() < 0.05, "sd {sd} vs {sigma}");
    }
}

#[test]
fn random_effect_correlations_match_b() {
    // two exactly spaced visits and negligible noise identify each subject's effects
    let mut d = gaussian_design(10_000, 102);
    d.jitter = 0.0;
    d.dropout_per_visit = 0.0;
    d.horizon = d.visit_spacing;
    for dp in &mut d.theta.domains {
        dp.sigma.iter_mut().for_each(|s| *s = 1e-9);
    }
    let data = generate_dataset(&d).unwrap();
    let mut effects = Vec::new();
    for s in &data.subjects {
        let el = s.covariates["EL"];
        let mut b = Vec::new();
        for dom in 0..2 {
            let obs: Vec<_> = s.markers.iter().filter(|o| o.domain == dom).collect();
            assert_eq!(obs.len(), 2);
            let m = &d.spec.domains[dom].markers[0];
            let lp = &d.theta.domains[dom].links[0];
            let r: Vec<(f64, f64)> = obs
                .iter()
                .map(|o| {
                    (
                        o.time,
                        m.link.transform(lp, o.value).unwrap() - fixed_part(&d, dom, o.time, el),
                    )
                })
                .collect();
            let slope = (r[1].1 - r[0].1) / (r[1].0 - r[0].0);
            b.push(r[0].1 - slope * r[0].0);
            b.push(slope);
        }
        effects.push(DVector::from_vec(b));
    }
    let n = effects.len() as f64;
    let mean = effects.iter().fold(DVector::zeros(4), |a, e| a + e) / n;
    let cov = effects.iter().fold(DMatrix::zeros(4, 4), |a, e| {
        a + (e - &mean) * (e - &mean).transpose()
    }) / n;
    let (b, _) = d.theta.b.build();
    for i in 0..4 {
        assert!(
            (cov[(i, i)].sqrt() / b[(i, i)].sqrt() - 1.0).abs() < 0.05,
            "sd {i}"
        );
        for j in (i + 1)..4 {
            let got = cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt();
            let want = b[(i, j)] / (b[(i, i)] * b[(j, j)]).sqrt();
            assert!((got - want).abs() < 0.05, "corr ({i},{j}): {got} vs {want}");
        }
    }
}

#[test]
fn error_draws_have_unit_variance() {
    for (dist, seed) in [(ErrorDist::Logistic, 7), (ErrorDist::Gaussian, 8)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..100_000).map(|_| dist.sample(&mut rng)).collect();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 1.0).abs() < 0.02, "{dist:?} variance {var}");
        assert!(mean.abs() < 0.01);
    }
}

#[test]
fn logistic_draws_follow_the_scaled_cdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 100_000;
    let x: Vec<f64> = (0..n)
        .map(|_| ErrorDist::Logistic.sample(&mut rng))
        .collect();
    let s = 3f64.sqrt() / std::f64::consts::PI;
    for q in [-2.0, -0.5, 0.0, 1.0, 2.5] {
        let emp = x.iter().filter(|&&v| v <= q).count() as f64 / n as f64;
        let want = 1.0 / (1.0 + (-q / s).exp());
        assert!(
            (emp - want).abs() < 4.0 * (want * (1.0 - want) / n as f64).sqrt() + 1e-4,
            "{q}: {emp} vs {want}"
        );
    }
}

#[test]
fn visit_and_diagnosis_rates_resemble_the_reference_design() {
    let mut diag = 0.0;
    let mut visits = 0.0;
    let reps = 4;
    for r in 0..reps {
        let data = generate_dataset(&SimDesign::scenario("I.1.a", 200 + r).unwrap()).unwrap();
        diag += data.n_diagnosed() as f64 / 500.0 / reps as f64;
        visits += data.mean_visits() / reps as f64;
    }
    assert!((visits - 4.3).abs() < 0.3, "visits {visits}");
    assert!((diag - 0.30).abs() < 0.05, "diagnosed {diag}");

    let mut weak = 0.0;
    for r in 0..reps {
        let data = generate_dataset(&SimDesign::scenario("I.2.a", 300 + r).unwrap()).unwrap();
        weak += data.n_diagnosed() as f64 / 500.0 / reps as f64;
    }
    assert!((weak - 0.11).abs() < 0.03, "diagnosed {weak}");
}

#[test]
fn truncated_design_admits_only_event_free_entrants() {
    let d = SimDesign {
        n_subjects: 300,
        ..SimDesign::scenario("truncation", 103).unwrap()
    };
    let data = generate_dataset(&d).unwrap();
    assert!(data.rejected > 0);
    assert!(data.subjects.iter().all(|s| !s.diag[0].1));
}

#[test]
fn event_design_records_vital_status() {
    let d = SimDesign {
        n_subjects: 400,
        ..SimDesign::scenario("I.4", 104).unwrap()
    };
    let data = generate_dataset(&d).unwrap();
    let bnd = &d.spec.death.as_ref().unwrap().boundaries;
    for s in &data.subjects {
        let ev = s.event.as_ref().unwrap();
        assert!(ev.time >= ev.entry && ev.time <= bnd[bnd.len() - 1]);
        assert!(s.markers.iter().all(|o| o.time <= ev.time));
        assert!(s.diag.is_empty());
        // follow-up never ends inside an interval, else deaths there would be over-represented
        if !ev.died {
            assert!(bnd.contains(&ev.time), "censored at {}", ev.time);
        }
    }
    let frac = data.n_deaths() as f64 / 400.0;
    assert!(frac > 0.2 && frac < 0.8, "{frac}");
}

#[test]
fn single_replicate_report_is_the_fit() {
    let d = gaussian_design(80, 105);
    let cfg = OptimizerConfig::default();
    let report = run_replication(&d, None, 1, &cfg).unwrap();
    assert_eq!(report.n_replicates, 1);

    let data = generate_dataset(&d).unwrap();
    let mut spec = d.spec.clone();
    spec.resolve_links(&data.subjects).unwrap();
    let theta0 = staged_init(&spec, &data.subjects, &cfg, d.seed).unwrap();
    let lik = Likelihood::new(&spec, &data.subjects, default_cdf_config(d.seed)).unwrap();
    let fit = marquardt_fit(&lik, &theta0, &cfg).unwrap();
    assert!(fit.converged);
    assert_eq!(report.n_converged, 1);
    for (k, name) in fit.free_names.iter().enumerate() {
        let row = report.row(name).unwrap();
        let i = lik.layout.index_of(name).unwrap();
        assert_eq!(row.mean_est, fit.theta_hat[i]);
        assert_eq!(row.mean_se, fit.se[k]);
        assert_eq!(row.emp_sd, 0.0);
    }
}

#[test]
fn replication_is_deterministic_and_order_free() {
    let d = gaussian_design(60, 106);
    let cfg = OptimizerConfig::default();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_replication(&d, None, 3, &cfg).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert!(a
        .outcomes
        .iter()
        .enumerate()
        .all(|(i, o)| o.index == i && o.seed == 106 + i as u64));
}

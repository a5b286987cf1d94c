//! Fixtures shared by the benchmarks.

use latjoint::likelihood::{default_cdf_config, Likelihood};
use latjoint::simulate::{generate_dataset, SimDesign};

/// Likelihood of a simulated scenario and its generating parameters.
pub fn scenario_likelihood(name: &str, n_subjects: usize, seed: u64) -> (Likelihood, Vec<f64>) {
    let mut design = SimDesign::scenario(name, seed).expect("known scenario");
    design.n_subjects = n_subjects;
    let data = generate_dataset(&design).expect("simulation");
    let mut spec = design.spec.clone();
    spec.resolve_links(&data.subjects).expect("links");
    let theta = design.theta_vector().expect("parameters");
    let lik = Likelihood::new(&spec, &data.subjects, default_cdf_config(seed)).expect("likelihood");
    (lik, theta)
}

/// Equicorrelated covariance of dimension `n`, row-major.
pub fn equicorrelated(n: usize, rho: f64) -> Vec<f64> {
    (0..n * n)
        .map(|k| if k / n == k % n { 1.0 } else { rho })
        .collect()
}

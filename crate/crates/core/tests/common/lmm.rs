//! Gaussian two-domain mixed model: data design, a direct EM fit on the
//! observed scale and the analytic score in the latent parameterization.

use latjoint::model::{ModelSpec, Params, SubjectData};
use latjoint::simulate::{generate_dataset, EndpointKind, SimDesign};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

/// One marker per domain, linear links, no endpoint.
pub fn gaussian_design(n: usize, seed: u64) -> SimDesign {
    let mut d = SimDesign::scenario("I.1.a", seed).unwrap();
    d.name = "gaussian".into();
    d.n_subjects = n;
    d.endpoint = EndpointKind::None;
    d.spec.diagnosis = None;
    d.spec.domains[0].markers.truncate(1);
    d.theta.diag = None;
    d.theta.domains[0].links.truncate(1);
    d.theta.domains[0].sigma.truncate(1);
    d
}

pub fn gaussian_data(n: usize, seed: u64) -> (ModelSpec, Vec<SubjectData>, SimDesign) {
    let d = gaussian_design(n, seed);
    let data = generate_dataset(&d).unwrap();
    (d.spec.clone(), data.subjects, d)
}

/// Fixed rows `[1, t, EL, EL t]` (domain 1) and `[1, t, EL]` (domain 2);
/// random rows `[1, t]`.
struct Stacked {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    dom: Vec<usize>,
}

fn stack(s: &SubjectData) -> Stacked {
    let el = s.covariates["EL"];
    let mut rows: Vec<_> = s.markers.iter().collect();
    rows.sort_by(|a, b| a.domain.cmp(&b.domain).then(a.time.total_cmp(&b.time)));
    let n = rows.len();
    let mut x = DMatrix::zeros(n, 7);
    let mut z = DMatrix::zeros(n, 4);
    let mut y = DVector::zeros(n);
    let mut dom = Vec::new();
    for (i, o) in rows.iter().enumerate() {
        let t = o.time;
        y[i] = o.value;
        dom.push(o.domain);
        if o.domain == 0 {
            for (c, v) in [1.0, t, el, el * t].into_iter().enumerate() {
                x[(i, c)] = v;
            }
            z[(i, 0)] = 1.0;
            z[(i, 1)] = t;
        } else {
            for (c, v) in [1.0, t, el].into_iter().enumerate() {
                x[(i, 4 + c)] = v;
            }
            z[(i, 2)] = 1.0;
            z[(i, 3)] = t;
        }
    }
    Stacked { y, x, z, dom }
}

/// Maximum likelihood fit of `y = X a + Z u + e`, `u ~ N(0, D)`,
/// `e ~ N(0, s_d^2)` per domain.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub alpha: DVector<f64>,
    pub d: DMatrix<f64>,
    pub s2: [f64; 2],
    pub loglik: f64,
    pub iterations: usize,
}

fn covariance(st: &Stacked, d: &DMatrix<f64>, s2: &[f64; 2]) -> DMatrix<f64> {
    let mut v = &st.z * d * st.z.transpose();
    for i in 0..st.dom.len() {
        v[(i, i)] += s2[st.dom[i]];
    }
    v
}

fn loglik(data: &[Stacked], alpha: &DVector<f64>, d: &DMatrix<f64>, s2: &[f64; 2]) -> f64 {
    data.iter()
        .map(|st| {
            let v = covariance(st, d, s2);
            let ch = v.cholesky().unwrap();
            let r = &st.y - &st.x * alpha;
            let logdet: f64 = ch.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
            -0.5 * (r.dot(&ch.solve(&r))
                + logdet
                + r.len() as f64 * (2.0 * std::f64::consts::PI).ln())
        })
        .sum()
}

pub fn em_fit(subjects: &[SubjectData]) -> EmFit {
    let data: Vec<Stacked> = subjects.iter().map(stack).collect();
    let mut alpha = DVector::zeros(7);
    for (d, c) in [(0usize, 0usize), (1, 4)] {
        let vals: Vec<f64> = data
            .iter()
            .flat_map(|s| (0..s.dom.len()).filter(|&i| s.dom[i] == d).map(|i| s.y[i]))
            .collect();
        alpha[c] = vals.iter().sum::<f64>() / vals.len() as f64;
    }
    let mut d = DMatrix::identity(4, 4);
    let mut s2 = [1.0, 1.0];
    let mut iterations = 0;
    let mut last_ll = f64::NEG_INFINITY;
    for it in 0..200_000 {
        iterations = it + 1;
        // GLS update of the fixed effects at the current variance components
        let mut xtx = DMatrix::zeros(7, 7);
        let mut xty = DVector::zeros(7);
        for st in &data {
            let ch = covariance(st, &d, &s2).cholesky().unwrap();
            xtx += st.x.transpose() * ch.solve(&st.x);
            xty += st.x.transpose() * ch.solve(&st.y);
        }
        alpha = xtx.cholesky().unwrap().solve(&xty);
        // E-step in information form, then the variance components
        let dinv = d.clone().cholesky().unwrap().inverse();
        let mut dsum = DMatrix::zeros(4, 4);
        let mut ssum = [0.0; 2];
        let mut nobs = [0usize; 2];
        for st in &data {
            let r = &st.y - &st.x * &alpha;
            let w = DVector::from_fn(st.dom.len(), |i, _| 1.0 / s2[st.dom[i]]);
            let zw = DMatrix::from_fn(st.z.nrows(), 4, |i, j| st.z[(i, j)] * w[i]);
            let c = (&dinv + zw.transpose() * &st.z)
                .cholesky()
                .unwrap()
                .inverse();
            let u = &c * (zw.transpose() * &r);
            dsum += &u * u.transpose() + &c;
            let e = &r - &st.z * &u;
            let zc = &st.z * &c;
            for i in 0..st.dom.len() {
                ssum[st.dom[i]] += e[i] * e[i] + zc.row(i).dot(&st.z.row(i));
                nobs[st.dom[i]] += 1;
            }
        }
        let new_d = dsum / data.len() as f64;
        d = (&new_d + new_d.transpose()) * 0.5;
        s2 = [ssum[0] / nobs[0] as f64, ssum[1] / nobs[1] as f64];
        let ll = loglik(&data, &alpha, &d, &s2);
        assert!(
            ll.is_finite() && ll >= last_ll - 1e-8,
            "EM lost ascent at {it}: {ll} < {last_ll}"
        );
        let done = ll - last_ll < 1e-12;
        last_ll = ll;
        if done {
            break;
        }
    }
    let ll = loglik(&data, &alpha, &d, &s2);
    EmFit {
        alpha,
        d,
        s2,
        loglik: ll,
        iterations,
    }
}

/// EM estimates in the latent parameterization, keyed by parameter name.
/// `signs` gives the sign of each domain's link slope.
pub fn em_as_latent(fit: &EmFit, signs: [f64; 2]) -> BTreeMap<String, f64> {
    let eta1 = [
        signs[0] * fit.d[(0, 0)].sqrt(),
        signs[1] * fit.d[(2, 2)].sqrt(),
    ];
    let dom_of = [0usize, 0, 1, 1];
    let b = DMatrix::from_fn(4, 4, |i, j| {
        fit.d[(i, j)] / (eta1[dom_of[i]] * eta1[dom_of[j]])
    });
    let mut out = BTreeMap::new();
    out.insert("eta[m1][0]".into(), fit.alpha[0]);
    out.insert("eta[m1][1]".into(), eta1[0]);
    out.insert("beta[d1](time)".into(), fit.alpha[1] / eta1[0]);
    out.insert("beta[d1](EL)".into(), fit.alpha[2] / eta1[0]);
    out.insert("beta[d1](EL*time)".into(), fit.alpha[3] / eta1[0]);
    out.insert("sigma[m1]".into(), fit.s2[0].sqrt() / eta1[0].abs());
    out.insert("eta[m3][0]".into(), fit.alpha[4]);
    out.insert("eta[m3][1]".into(), eta1[1]);
    out.insert("beta[d2](time)".into(), fit.alpha[5] / eta1[1]);
    out.insert("beta[d2](EL)".into(), fit.alpha[6] / eta1[1]);
    out.insert("sigma[m3]".into(), fit.s2[1].sqrt() / eta1[1].abs());
    out.insert("B.sd[d1:time]".into(), b[(1, 1)].sqrt());
    out.insert("B.sd[d2:time]".into(), b[(3, 3)].sqrt());
    let labels = ["d1:intercept", "d1:time", "d2:intercept", "d2:time"];
    for i in 0..4 {
        for j in (i + 1)..4 {
            let r = b[(i, j)] / (b[(i, i)] * b[(j, j)]).sqrt();
            out.insert(
                format!("B.rho[{},{}]", labels[i], labels[j]),
                2.0 * r.atanh(),
            );
        }
    }
    out
}

/// Score of the observed-data log-likelihood in the latent
/// parameterization, keyed by parameter name.
pub fn analytic_score(subjects: &[SubjectData], p: &Params) -> BTreeMap<String, f64> {
    let beta: Vec<f64> = p.domains[0]
        .beta
        .iter()
        .chain(&p.domains[1].beta)
        .copied()
        .collect();
    let eta = [&p.domains[0].links[0].eta, &p.domains[1].links[0].eta];
    let sig = [p.domains[0].sigma[0], p.domains[1].sigma[0]];
    let (bmat, _) = p.b.build();
    let (s, rho) = (&p.b.sigmas, &p.b.rhos);
    let mut g_beta = DVector::zeros(7);
    let mut g_eta = [[0.0; 2]; 2];
    let mut g_sig = [0.0; 2];
    let mut g_b = DMatrix::zeros(4, 4);
    let beta = DVector::from_vec(beta);
    for subj in subjects {
        let st = stack(subj);
        let h = DVector::from_fn(st.y.len(), |i, _| {
            (st.y[i] - eta[st.dom[i]][0]) / eta[st.dom[i]][1]
        });
        let mut v = &st.z * &bmat * st.z.transpose();
        for i in 0..st.dom.len() {
            v[(i, i)] += sig[st.dom[i]].powi(2);
        }
        let vinv = v.try_inverse().unwrap();
        let r = &h - &st.x * &beta;
        let a = &vinv * &r;
        g_beta += st.x.transpose() * &a;
        for i in 0..st.dom.len() {
            let k = st.dom[i];
            g_eta[k][0] += a[i] / eta[k][1];
            g_eta[k][1] += a[i] * h[i] / eta[k][1] - 1.0 / eta[k][1];
            g_sig[k] += sig[k] * (a[i] * a[i] - vinv[(i, i)]);
        }
        g_b += 0.5 * st.z.transpose() * (&a * a.transpose() - &vinv) * &st.z;
    }
    let mut out = BTreeMap::new();
    for (name, idx) in [
        ("beta[d1](time)", 1),
        ("beta[d1](EL)", 2),
        ("beta[d1](EL*time)", 3),
        ("beta[d2](time)", 5),
        ("beta[d2](EL)", 6),
    ] {
        out.insert(name.to_string(), g_beta[idx]);
    }
    for (k, m) in ["m1", "m3"].iter().enumerate() {
        out.insert(format!("eta[{m}][0]"), g_eta[k][0]);
        out.insert(format!("eta[{m}][1]"), g_eta[k][1]);
        out.insert(format!("sigma[{m}]"), g_sig[k]);
    }
    // chain rule through B_jk = s_j s_k tanh(rho_jk / 2)
    let pair = |i: usize, j: usize| i * 4 - i * (i + 1) / 2 + (j - i - 1);
    let corr = |i: usize, j: usize| {
        if i == j {
            1.0
        } else {
            (0.5 * rho[pair(i.min(j), i.max(j))]).tanh()
        }
    };
    for (name, i) in [("B.sd[d1:time]", 1usize), ("B.sd[d2:time]", 3)] {
        let mut g = 0.0;
        for j in 0..4 {
            // dB_ij/ds_i, counting both (i, j) and (j, i)
            let d = if i == j {
                2.0 * s[i]
            } else {
                s[j] * corr(i, j)
            };
            g += if i == j {
                g_b[(i, i)] * d
            } else {
                2.0 * g_b[(i, j)] * d
            };
        }
        out.insert(name.to_string(), g);
    }
    let labels = ["d1:intercept", "d1:time", "d2:intercept", "d2:time"];
    for i in 0..4 {
        for j in (i + 1)..4 {
            let c = corr(i, j);
            let d = s[i] * s[j] * 0.5 * (1.0 - c * c);
            out.insert(
                format!("B.rho[{},{}]", labels[i], labels[j]),
                2.0 * g_b[(i, j)] * d,
            );
        }
    }
    out
}

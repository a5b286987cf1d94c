use latjoint::links::{ISplineBasis, LinkParams, LinkSpec};
use proptest::prelude::*;

fn spline_case() -> impl Strategy<Value = (LinkSpec, LinkParams)> {
    (1usize..=5, -5.0f64..5.0, 1.0f64..30.0)
        .prop_flat_map(|(k, lo, width)| {
            (
                proptest::collection::vec(0.02f64..1.0, k + 1),
                proptest::collection::vec(-2.0f64..2.0, k + 3),
                Just((lo, width)),
            )
        })
        .prop_map(|(gaps, eta, (lo, width))| {
            let total: f64 = gaps.iter().sum();
            let mut acc = lo;
            let knots: Vec<f64> = gaps[..gaps.len() - 1]
                .iter()
                .map(|g| {
                    acc += g / total * width;
                    acc
                })
                .collect();
            (
                LinkSpec::ispline(knots, lo, lo + width).unwrap(),
                LinkParams::new(eta),
            )
        })
}

fn unit_points(spec: &LinkSpec, u: &[f64]) -> Vec<f64> {
    let (a, b) = spec.boundary.unwrap();
    let mut v: Vec<f64> = u.iter().map(|t| a + t * (b - a)).collect();
    v.sort_by(|x, y| x.partial_cmp(y).unwrap());
    v
}

proptest! {
    #[test]
    fn ispline_link_is_monotone((spec, p) in spline_case(), u in proptest::collection::vec(0.0f64..=1.0, 2..20)) {
        let ys = unit_points(&spec, &u);
        let hs: Vec<f64> = ys.iter().map(|&y| spec.transform(&p, y).unwrap()).collect();
        for w in hs.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12);
        }
        for &y in &ys {
            prop_assert!(spec.jacobian(&p, y).unwrap() >= 0.0);
        }
    }

    #[test]
    fn ispline_basis_in_unit_interval((spec, _p) in spline_case(), t in 0.0f64..=1.0) {
        let (a, b) = spec.boundary.unwrap();
        let basis = ISplineBasis::new(&spec);
        let y = a + t * (b - a);
        let v = basis.values(y);
        for w in v.windows(2) {
            // tail sums shrink with the index
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        for s in v {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
        }
    }

    #[test]
    fn ispline_range_matches_endpoints((spec, p) in spline_case()) {
        let (a, b) = spec.boundary.unwrap();
        let (lo, hi) = spec.transformed_range(&p).unwrap();
        prop_assert!((spec.transform(&p, a).unwrap() - lo).abs() < 1e-10);
        prop_assert!((spec.transform(&p, b).unwrap() - hi).abs() < 1e-10 * (1.0 + hi.abs()));
    }

    #[test]
    fn ispline_jacobian_matches_finite_difference((spec, p) in spline_case(), t in 0.01f64..0.99) {
        let (a, b) = spec.boundary.unwrap();
        let y = a + t * (b - a);
        let h = 1e-6 * (b - a);
        let fd = (spec.transform(&p, y + h).unwrap() - spec.transform(&p, y - h).unwrap()) / (2.0 * h);
        let j = spec.jacobian(&p, y).unwrap();
        let scale: f64 = p.eta.iter().map(|e| e * e).sum::<f64>() / (b - a);
        // FD straddling a knot sees a kink in the derivative only at order h
        prop_assert!((fd - j).abs() <= 1e-5 * (1.0 + scale), "fd {fd} vs {j}");
    }

    #[test]
    fn ispline_inverse_round_trips((spec, p) in spline_case(), t in 0.0f64..=1.0) {
        let (lo, hi) = spec.transformed_range(&p).unwrap();
        prop_assume!(hi - lo > 1e-6);
        let z = lo + t * (hi - lo);
        let y = spec.inverse(&p, z).unwrap();
        prop_assert!((spec.transform(&p, y).unwrap() - z).abs() <= 1e-8);
    }

    #[test]
    fn linear_inverse_round_trips(e0 in -50.0f64..50.0, e1 in prop_oneof![-10.0f64..-0.01, 0.01f64..10.0], y in -100.0f64..100.0) {
        let spec = LinkSpec::linear();
        let p = LinkParams::new(vec![e0, e1]);
        let z = spec.transform(&p, y).unwrap();
        prop_assert!((spec.inverse(&p, z).unwrap() - y).abs() <= 1e-10 * (1.0 + y.abs()));
        prop_assert!((spec.jacobian(&p, y).unwrap() - 1.0 / e1.abs()).abs() < 1e-15 / e1.abs());
    }
}

#[test]
fn ispline_values_match_direct_integration() {
    // IS_l(x) is the integral of its derivative from the lower boundary
    let spec = LinkSpec::ispline(vec![1.0, 2.5, 6.0], 0.0, 8.0).unwrap();
    let basis = ISplineBasis::new(&spec);
    for &x in &[0.5, 1.0, 2.0, 3.7, 6.0, 7.99] {
        let n = 20_000;
        let h = x / n as f64;
        let mut acc = vec![0.0; basis.len()];
        for i in 0..n {
            let m = basis.derivatives((i as f64 + 0.5) * h);
            for (a, d) in acc.iter_mut().zip(m) {
                *a += d * h;
            }
        }
        for (a, v) in acc.iter().zip(basis.values(x)) {
            assert!((a - v).abs() < 1e-6, "x={x}: {a} vs {v}");
        }
    }
}

#[test]
fn ispline_derivatives_integrate_to_one() {
    let spec = LinkSpec::ispline(vec![3.0, 4.0], 0.0, 10.0).unwrap();
    let basis = ISplineBasis::new(&spec);
    let n = 40_000;
    let h = 10.0 / n as f64;
    let mut acc = vec![0.0; basis.len()];
    for i in 0..n {
        for (a, d) in acc.iter_mut().zip(basis.derivatives((i as f64 + 0.5) * h)) {
            *a += d * h;
        }
    }
    for a in acc {
        assert!((a - 1.0).abs() < 1e-6);
    }
}

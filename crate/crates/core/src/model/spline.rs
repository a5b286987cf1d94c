/// Natural cubic spline basis without the constant: `x` followed by
/// `d_k(x) - d_{K-1}(x)` for `k = 1..K-2`, where
/// `d_k(x) = ((x - k_k)_+^3 - (x - k_K)_+^3) / (k_K - k_k)`.
/// `K` knots give `K - 1` functions; fewer than 2 knots give none.
pub fn natural_spline_basis(knots: &[f64], x: f64) -> Vec<f64> {
    let k = knots.len();
    if k < 2 {
        return Vec::new();
    }
    let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    let last = knots[k - 1];
    let d = |j: usize| (cube(x - knots[j]) - cube(x - last)) / (last - knots[j]);
    let mut out = Vec::with_capacity(k - 1);
    out.push(x);
    let dk1 = d(k - 2);
    for j in 0..k - 2 {
        out.push(d(j) - dk1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_beyond_boundary_knots() {
        let knots = [0.0, 1.0, 2.5, 4.0];
        for j in 0..3 {
            let f = |x: f64| natural_spline_basis(&knots, x)[j];
            // second differences vanish outside [k_1, k_K]
            for &x in &[-3.0, -1.0, 5.0, 8.0] {
                let h = 0.1;
                let dd = f(x + h) - 2.0 * f(x) + f(x - h);
                assert!(dd.abs() < 1e-9, "basis {j} curved at {x}: {dd}");
            }
        }
    }

    #[test]
    fn continuous_second_derivative_at_knots() {
        let knots = [0.0, 1.0, 2.5, 4.0];
        for &kx in &knots {
            for j in 0..3 {
                let f = |x: f64| natural_spline_basis(&knots, x)[j];
                let h = 1e-3;
                let left = (f(kx - h) - 2.0 * f(kx - 2.0 * h) + f(kx - 3.0 * h)) / (h * h);
                let right = (f(kx + 3.0 * h) - 2.0 * f(kx + 2.0 * h) + f(kx + h)) / (h * h);
                assert!(
                    (left - right).abs() < 0.05,
                    "knot {kx} basis {j}: {left} vs {right}"
                );
            }
        }
    }

    #[test]
    fn sizes() {
        assert!(natural_spline_basis(&[1.0], 0.0).is_empty());
        assert_eq!(natural_spline_basis(&[0.0, 1.0], 0.5), vec![0.5]);
        assert_eq!(natural_spline_basis(&[0.0, 1.0, 2.0], 0.5).len(), 2);
    }
}

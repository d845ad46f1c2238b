//! Reference-element quadrature rules.
//!
//! Reference triangle: vertices (0,0), (1,0), (0,1). Reference square: [0,1]².
//! Weights sum to the reference measure.

/// A quadrature point in reference coordinates and its weight.
#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub x: [f64; 2],
    pub w: f64,
}

// Degree-4 Dunavant rule, barycentric orbits (a, a, 1-2a).
const DUNAVANT4: [(f64, f64); 2] =
    [(0.445_948_490_915_964_9, 0.223_381_589_678_011_47), (0.091_576_213_509_770_74, 0.109_951_743_655_321_87)];

/// Six-point rule on the reference triangle, exact for degree 4.
pub fn triangle_degree4() -> Vec<QuadPoint> {
    let mut pts = Vec::with_capacity(6);
    for &(a, w) in &DUNAVANT4 {
        let b = 1.0 - 2.0 * a;
        for bary in [[b, a, a], [a, b, a], [a, a, b]] {
            pts.push(QuadPoint { x: [bary[1], bary[2]], w: 0.5 * w });
        }
    }
    pts
}

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_unit(n: usize) -> Vec<(f64, f64)> {
    match n {
        1 => vec![(0.5, 1.0)],
        2 => {
            let d = 0.5 / 3f64.sqrt();
            vec![(0.5 - d, 0.5), (0.5 + d, 0.5)]
        }
        3 => {
            let d = 0.5 * (0.6f64).sqrt();
            vec![(0.5 - d, 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 + d, 5.0 / 18.0)]
        }
        _ => panic!("gauss_unit supports 1..=3 points"),
    }
}

/// 3×3 tensor Gauss rule on the reference square, exact for degree 5 per variable.
pub fn square_gauss3() -> Vec<QuadPoint> {
    let g = gauss_unit(3);
    let mut pts = Vec::with_capacity(9);
    for &(y, wy) in &g {
        for &(x, wx) in &g {
            pts.push(QuadPoint { x: [x, y], w: wx * wy });
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri_monomial(p: i32, q: i32) -> f64 {
        // ∫ x^p y^q over the reference triangle = p! q! / (p+q+2)!
        let fact = |n: i32| (1..=n).map(|k| k as f64).product::<f64>();
        fact(p) * fact(q) / fact(p + q + 2)
    }

    #[test]
    fn triangle_rule_is_exact_to_degree_four() {
        let rule = triangle_degree4();
        for p in 0..=4 {
            for q in 0..=(4 - p) {
                let approx: f64 = rule.iter().map(|qp| qp.w * qp.x[0].powi(p) * qp.x[1].powi(q)).sum();
                assert!((approx - tri_monomial(p, q)).abs() < 1e-15, "x^{p} y^{q}");
            }
        }
    }

    #[test]
    fn square_rule_is_exact_to_degree_five() {
        let rule = square_gauss3();
        for p in 0..=5 {
            for q in 0..=5 {
                let approx: f64 = rule.iter().map(|qp| qp.w * qp.x[0].powi(p) * qp.x[1].powi(q)).sum();
                let exact = 1.0 / ((p + 1) as f64 * (q + 1) as f64);
                assert!((approx - exact).abs() < 1e-15);
            }
        }
    }
}

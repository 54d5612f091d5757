//! Direct least-squares conic fitting constrained to an ellipse, and
//! conversion from conic coefficients to geometric ellipse parameters.
//!
//! The fit minimizes the algebraic residual subject to 4AC − B² = 1, which
//! guarantees an ellipse (never a hyperbola or parabola) in one
//! non-iterative solve. Points are isotropically normalized first for
//! conditioning.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::geometry::Point2;

#[derive(Debug, Clone, PartialEq)]
pub enum EllipseError {
    TooFewPoints { needed: usize, got: usize },
    /// The constrained system has no ellipse solution (degenerate or
    /// collinear input).
    NotAnEllipse,
    NumericalFailure(&'static str),
}

impl std::fmt::Display for EllipseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::TooFewPoints { needed, got } => {
                write!(f, "too few points for an ellipse fit: need {needed}, got {got}")
            }
            Self::NotAnEllipse => write!(f, "points do not determine an ellipse"),
            Self::NumericalFailure(what) => write!(f, "numerical failure: {what}"),
        }
    }
}

impl std::error::Error for EllipseError {}

/// Geometric ellipse parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: Point2,
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Rotation of the major axis from +u, radians, in (−π/2, π/2].
    pub angle: f64,
}

impl Ellipse {
    pub fn eccentricity(&self) -> f64 {
        (1.0 - (self.semi_minor / self.semi_major).powi(2)).max(0.0).sqrt()
    }
}

/// Fits an ellipse to scattered points by the direct least-squares method.
pub fn fit_ellipse(points: &[Point2]) -> Result<Ellipse, EllipseError> {
    if points.len() < 5 {
        return Err(EllipseError::TooFewPoints { needed: 5, got: points.len() });
    }

    // Isotropic normalization: centroid to origin, mean radius to sqrt(2).
    let n = points.len() as f64;
    let mu = points.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.u / n, acc.1 + p.v / n));
    let mean_r = points
        .iter()
        .map(|p| (p.u - mu.0).hypot(p.v - mu.1))
        .sum::<f64>()
        / n;
    if mean_r < 1e-12 {
        return Err(EllipseError::NotAnEllipse);
    }
    let scale = std::f64::consts::SQRT_2 / mean_r;

    let mut d1 = DMatrix::<f64>::zeros(points.len(), 3);
    let mut d2 = DMatrix::<f64>::zeros(points.len(), 3);
    for (i, p) in points.iter().enumerate() {
        let x = (p.u - mu.0) * scale;
        let y = (p.v - mu.1) * scale;
        d1[(i, 0)] = x * x;
        d1[(i, 1)] = x * y;
        d1[(i, 2)] = y * y;
        d2[(i, 0)] = x;
        d2[(i, 1)] = y;
        d2[(i, 2)] = 1.0;
    }
    let s1 = d1.transpose() * &d1;
    let s2 = d1.transpose() * &d2;
    let s3 = d2.transpose() * &d2;
    let s3_inv = s3.try_inverse().ok_or(EllipseError::NotAnEllipse)?;
    let t = -(s3_inv * s2.transpose());
    let m_full = &s1 + &s2 * &t;
    // Apply the inverse constraint matrix C1⁻¹ for 4AC − B² = 1.
    let m = Matrix3::new(
        m_full[(2, 0)] / 2.0,
        m_full[(2, 1)] / 2.0,
        m_full[(2, 2)] / 2.0,
        -m_full[(1, 0)],
        -m_full[(1, 1)],
        -m_full[(1, 2)],
        m_full[(0, 0)] / 2.0,
        m_full[(0, 1)] / 2.0,
        m_full[(0, 2)] / 2.0,
    );

    // Eigenvector with positive constraint value 4AC − B².
    let quadratic = eigenvector_with_positive_constraint(&m).ok_or(EllipseError::NotAnEllipse)?;
    let linear = Vector3::new(
        t[(0, 0)] * quadratic[0] + t[(0, 1)] * quadratic[1] + t[(0, 2)] * quadratic[2],
        t[(1, 0)] * quadratic[0] + t[(1, 1)] * quadratic[1] + t[(1, 2)] * quadratic[2],
        t[(2, 0)] * quadratic[0] + t[(2, 1)] * quadratic[1] + t[(2, 2)] * quadratic[2],
    );
    let conic = [quadratic[0], quadratic[1], quadratic[2], linear[0], linear[1], linear[2]];

    let normalized = conic_to_ellipse(&conic).ok_or(EllipseError::NotAnEllipse)?;
    // Undo the isotropic normalization.
    Ok(Ellipse {
        center: Point2::new(normalized.center.u / scale + mu.0, normalized.center.v / scale + mu.1),
        semi_major: normalized.semi_major / scale,
        semi_minor: normalized.semi_minor / scale,
        angle: normalized.angle,
    })
}

/// Real eigenvalues of a 3x3 matrix via its characteristic cubic.
fn real_eigenvalues(m: &Matrix3<f64>) -> Vec<f64> {
    // det(M − λI) = −λ³ + c2 λ² + c1 λ + c0.
    let c2 = m.trace();
    let c1 = 0.5 * ((m * m).trace() - c2 * c2);
    let c0 = m.determinant();
    // Solve λ³ − c2 λ² − c1 λ − c0 = 0.
    solve_cubic(1.0, -c2, -c1, -c0)
}

/// Real roots of a x³ + b x² + c x + d.
fn solve_cubic(a: f64, b: f64, c: f64, d: f64) -> Vec<f64> {
    let b = b / a;
    let c = c / a;
    let d = d / a;
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let shift = -b / 3.0;
    let disc = (q / 2.0) * (q / 2.0) + (p / 3.0) * (p / 3.0) * (p / 3.0);
    let mut roots = Vec::new();
    if disc > 1e-14 {
        let sq = disc.sqrt();
        let u = (-q / 2.0 + sq).cbrt();
        let v = (-q / 2.0 - sq).cbrt();
        roots.push(u + v + shift);
    } else if disc < -1e-14 {
        // Three distinct real roots (trigonometric form).
        let r = (-p / 3.0).sqrt();
        let phi = (3.0 * q / (2.0 * p) / r).clamp(-1.0, 1.0).acos();
        for k in 0..3 {
            roots.push(2.0 * r * ((phi + 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos() + shift);
        }
    } else {
        // Repeated roots.
        let u = (-q / 2.0).cbrt();
        roots.push(2.0 * u + shift);
        roots.push(-u + shift);
    }
    roots
}

fn eigenvector_with_positive_constraint(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for lambda in real_eigenvalues(m) {
        let shifted = m - Matrix3::identity() * lambda;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.as_ref()?;
        let v = Vector3::new(v_t[(2, 0)], v_t[(2, 1)], v_t[(2, 2)]);
        let constraint = 4.0 * v[0] * v[2] - v[1] * v[1];
        if constraint > 0.0 {
            // Among valid candidates keep the smallest residual ‖(M−λ)v‖.
            let residual = (shifted * v).norm();
            if best.as_ref().is_none_or(|(r, _)| residual < *r) {
                best = Some((residual, v));
            }
        }
    }
    best.map(|(_, v)| v)
}

/// Converts conic coefficients `[A, B, C, D, E, F]` of
/// `Ax² + Bxy + Cy² + Dx + Ey + F = 0` to geometric parameters.
pub fn conic_to_ellipse(conic: &[f64; 6]) -> Option<Ellipse> {
    let [mut a, mut b, mut c, mut d, mut e, mut f] = *conic;
    if b * b - 4.0 * a * c >= -1e-300 {
        return None; // not an ellipse
    }
    let denom = b * b - 4.0 * a * c;
    let cx = (2.0 * c * d - b * e) / denom;
    let cy = (2.0 * a * e - b * d) / denom;
    // Normalize the overall sign so the quadratic form is positive
    // definite and the recentered constant is negative.
    let mu = a * cx * cx + b * cx * cy + c * cy * cy + d * cx + e * cy + f;
    if mu.abs() < 1e-300 {
        return None;
    }
    if mu > 0.0 {
        a = -a;
        b = -b;
        c = -c;
        d = -d;
        e = -e;
        f = -f;
    }
    let mu = a * cx * cx + b * cx * cy + c * cy * cy + d * cx + e * cy + f;
    // Quadratic form eigenvalues (both positive).
    let half_trace = (a + c) / 2.0;
    let det_q = a * c - b * b / 4.0;
    let gap = (half_trace * half_trace - det_q).max(0.0).sqrt();
    let l_small = half_trace - gap; // major axis
    let l_large = half_trace + gap; // minor axis
    if l_small <= 0.0 {
        return None;
    }
    let semi_major = (-mu / l_small).sqrt();
    let semi_minor = (-mu / l_large).sqrt();
    // Major-axis direction: eigenvector of the smaller eigenvalue of
    // [[A, B/2], [B/2, C]].
    let mut angle = if b.abs() < 1e-12 * (a.abs() + c.abs()) {
        if a <= c {
            0.0
        } else {
            std::f64::consts::FRAC_PI_2
        }
    } else {
        (l_small - a).atan2(b / 2.0)
    };
    if angle > std::f64::consts::FRAC_PI_2 {
        angle -= std::f64::consts::PI;
    }
    if angle <= -std::f64::consts::FRAC_PI_2 {
        angle += std::f64::consts::PI;
    }
    Some(Ellipse { center: Point2::new(cx, cy), semi_major, semi_minor, angle })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_ellipse(e: &Ellipse, count: usize) -> Vec<Point2> {
        (0..count)
            .map(|i| {
                let t = std::f64::consts::TAU * (i as f64) / (count as f64);
                let (ca, sa) = (e.angle.cos(), e.angle.sin());
                let x = e.semi_major * t.cos();
                let y = e.semi_minor * t.sin();
                Point2::new(
                    e.center.u + ca * x - sa * y,
                    e.center.v + sa * x + ca * y,
                )
            })
            .collect()
    }

    fn assert_close(a: &Ellipse, b: &Ellipse, tol: f64) {
        assert!(a.center.distance(&b.center) < tol, "center {:?} vs {:?}", a.center, b.center);
        assert!((a.semi_major - b.semi_major).abs() < tol);
        assert!((a.semi_minor - b.semi_minor).abs() < tol);
    }

    #[test]
    fn recovers_exact_ellipse() {
        let truth = Ellipse {
            center: Point2::new(320.5, 241.25),
            semi_major: 40.0,
            semi_minor: 25.0,
            angle: 0.6,
        };
        let fitted = fit_ellipse(&sample_ellipse(&truth, 64)).unwrap();
        assert_close(&fitted, &truth, 1e-8);
        let da = (fitted.angle - truth.angle).abs();
        assert!(da.min(std::f64::consts::PI - da) < 1e-8, "angle {}", fitted.angle);
    }

    #[test]
    fn recovers_circle() {
        let truth = Ellipse {
            center: Point2::new(-3.0, 7.0),
            semi_major: 12.0,
            semi_minor: 12.0,
            angle: 0.0,
        };
        let fitted = fit_ellipse(&sample_ellipse(&truth, 40)).unwrap();
        assert_close(&fitted, &truth, 1e-8);
        assert!(fitted.eccentricity() < 1e-6);
    }

    #[test]
    fn partial_arc_still_fits() {
        let truth = Ellipse {
            center: Point2::new(100.0, 50.0),
            semi_major: 30.0,
            semi_minor: 18.0,
            angle: -0.4,
        };
        let points: Vec<Point2> = sample_ellipse(&truth, 200)
            .into_iter()
            .take(120) // 60% of the boundary
            .collect();
        let fitted = fit_ellipse(&points).unwrap();
        assert_close(&fitted, &truth, 1e-6);
    }

    #[test]
    fn too_few_points() {
        let points = vec![Point2::new(0.0, 0.0); 4];
        assert_eq!(
            fit_ellipse(&points),
            Err(EllipseError::TooFewPoints { needed: 5, got: 4 })
        );
    }

    #[test]
    fn collinear_points_are_rejected() {
        let points: Vec<Point2> = (0..20).map(|i| Point2::new(i as f64, 2.0 * i as f64)).collect();
        assert!(fit_ellipse(&points).is_err());
    }

    #[test]
    fn quantized_boundary_center_is_accurate() {
        // Integer-rounded boundary samples, as produced by a raster mask.
        let truth = Ellipse {
            center: Point2::new(320.3, 240.7),
            semi_major: 38.0,
            semi_minor: 31.0,
            angle: 0.3,
        };
        let points: Vec<Point2> = sample_ellipse(&truth, 240)
            .into_iter()
            .map(|p| Point2::new(p.u.round(), p.v.round()))
            .collect();
        let fitted = fit_ellipse(&points).unwrap();
        assert!(fitted.center.distance(&truth.center) < 0.1);
    }
}

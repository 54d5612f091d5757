//! Elementary 3D/2D geometry: pinhole projection, ray–sphere intersection,
//! specular reflection, point-to-ray distances and null-ray extraction from
//! stacked plane constraints.
//!
//! All lengths are millimeters in camera-centered coordinates: the camera
//! center is the origin and +z points into the scene.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Unit vectors must satisfy `|norm - 1| <= UNIT_NORM_TOL`.
pub const UNIT_NORM_TOL: f64 = 1e-12;

/// A point counts as "on" a sphere surface when within this distance (mm).
pub const ON_SURFACE_TOL: f64 = 1e-6;

/// Relative gap between the two smallest singular values below which the
/// null direction of a stacked-normal system is not unique.
pub const NULL_RAY_GAP_TOL: f64 = 1e-9;

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    /// Point is at or behind the camera plane; it cannot be projected.
    NonPositiveDepth { z: f64 },
    /// Ray misses the sphere entirely.
    NoIntersection,
    /// Both ray–sphere intersections lie at non-positive ray parameters.
    BehindCamera,
    /// Point claimed to be on a sphere surface is not.
    OffSurface { distance: f64 },
    /// A direction was requested from a (near-)zero vector.
    ZeroVector,
    /// Too few plane constraints for a null-ray solve.
    InsufficientConstraints { needed: usize, got: usize },
    /// The constraint system does not pin down a unique direction.
    DegenerateSystem,
    /// A constructor argument violates a type invariant.
    InvalidParameter(&'static str),
}

impl std::fmt::Display for GeometryError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::NonPositiveDepth { z } => write!(f, "non-positive depth z = {z}"),
            Self::NoIntersection => write!(f, "ray does not intersect sphere"),
            Self::BehindCamera => write!(f, "intersections lie behind the ray origin"),
            Self::OffSurface { distance } => {
                write!(f, "point is {distance} mm off the sphere surface")
            }
            Self::ZeroVector => write!(f, "cannot normalize a zero vector"),
            Self::InsufficientConstraints { needed, got } => {
                write!(f, "need at least {needed} plane constraints, got {got}")
            }
            Self::DegenerateSystem => write!(f, "constraint system is degenerate"),
            Self::InvalidParameter(what) => write!(f, "invalid parameter: {what}"),
        }
    }
}

impl std::error::Error for GeometryError {}

pub type GeoResult<T> = Result<T, GeometryError>;

// ── Domain types ────────────────────────────────────────────────────────

/// Image-plane point in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub u: f64,
    pub v: f64,
}

impl Point2 {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// 3D point in millimeters, camera-centered coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Self = Self { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_vec(v: Vector3<f64>) -> Self {
        Self { x: v.x, y: v.y, z: v.z }
    }

    pub fn to_vec(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        (self.to_vec() - other.to_vec()).norm()
    }

    pub fn translated(&self, by: Vector3<f64>) -> Point3 {
        Point3::from_vec(self.to_vec() + by)
    }
}

/// Direction with unit norm (within [`UNIT_NORM_TOL`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec3 {
    v: Vector3<f64>,
}

impl UnitVec3 {
    /// Normalizes `v`; fails on (near-)zero input.
    pub fn new(v: Vector3<f64>) -> GeoResult<Self> {
        let n = v.norm();
        if !n.is_finite() || n < 1e-300 {
            return Err(GeometryError::ZeroVector);
        }
        Ok(Self { v: v / n })
    }

    pub fn from_components(x: f64, y: f64, z: f64) -> GeoResult<Self> {
        Self::new(Vector3::new(x, y, z))
    }

    pub fn as_vec(&self) -> Vector3<f64> {
        self.v
    }

    pub fn x(&self) -> f64 {
        self.v.x
    }

    pub fn y(&self) -> f64 {
        self.v.y
    }

    pub fn z(&self) -> f64 {
        self.v.z
    }

    pub fn dot(&self, other: &UnitVec3) -> f64 {
        self.v.dot(&other.v)
    }

    pub fn flipped(&self) -> UnitVec3 {
        Self { v: -self.v }
    }

    /// Unsigned angle to another unit vector, radians.
    pub fn angle_to(&self, other: &UnitVec3) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos()
    }
}

impl Serialize for UnitVec3 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.v.x, self.v.y, self.v.z].serialize(s)
    }
}

impl<'de> Deserialize<'de> for UnitVec3 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x, y, z] = <[f64; 3]>::deserialize(d)?;
        let v = Vector3::new(x, y, z);
        if (v.norm() - 1.0).abs() > UNIT_NORM_TOL {
            return Err(serde::de::Error::custom("direction is not unit norm"));
        }
        Ok(Self { v })
    }
}

/// Ray with a point origin and unit direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray3 {
    pub origin: Point3,
    pub direction: UnitVec3,
}

impl Ray3 {
    pub fn new(origin: Point3, direction: UnitVec3) -> Self {
        Self { origin, direction }
    }

    pub fn point_at(&self, t: f64) -> Point3 {
        self.origin.translated(self.direction.as_vec() * t)
    }
}

/// Sphere with positive radius (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Point3,
    pub radius: f64,
}

impl Sphere {
    pub fn new(center: Point3, radius: f64) -> GeoResult<Self> {
        if !(radius > 0.0) {
            return Err(GeometryError::InvalidParameter("sphere radius must be > 0"));
        }
        Ok(Self { center, radius })
    }
}

/// Calibrated pinhole camera: focal length and principal point in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub focal_px: f64,
    pub principal: Point2,
    pub width: u32,
    pub height: u32,
}

impl PinholeCamera {
    pub fn new(focal_px: f64, principal: Point2, width: u32, height: u32) -> GeoResult<Self> {
        if !(focal_px > 0.0) {
            return Err(GeometryError::InvalidParameter("focal length must be > 0"));
        }
        let inside = principal.u >= 0.0
            && principal.u <= width as f64
            && principal.v >= 0.0
            && principal.v <= height as f64;
        if !inside {
            return Err(GeometryError::InvalidParameter(
                "principal point must lie inside the image bounds",
            ));
        }
        Ok(Self { focal_px, principal, width, height })
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.u >= 0.0 && p.u < self.width as f64 && p.v >= 0.0 && p.v < self.height as f64
    }
}

// ── Operations ──────────────────────────────────────────────────────────

/// Projects a 3D point in front of the camera to pixel coordinates.
pub fn project(camera: &PinholeCamera, p: Point3) -> GeoResult<Point2> {
    if p.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth { z: p.z });
    }
    Ok(Point2::new(
        camera.focal_px * (p.x / p.z) + camera.principal.u,
        camera.focal_px * (p.y / p.z) + camera.principal.v,
    ))
}

/// Unit direction of the camera ray through an image point.
pub fn back_project(camera: &PinholeCamera, q: Point2) -> UnitVec3 {
    let v = Vector3::new(
        (q.u - camera.principal.u) / camera.focal_px,
        (q.v - camera.principal.v) / camera.focal_px,
        1.0,
    );
    // z component is 1, so the vector is never zero.
    UnitVec3::new(v).expect("back-projected direction is nonzero")
}

/// Nearest intersection of a ray with a sphere, at the smallest positive
/// ray parameter (the camera-facing surface).
pub fn ray_sphere_near_intersection(ray: &Ray3, sphere: &Sphere) -> GeoResult<Point3> {
    let c = sphere.center.to_vec() - ray.origin.to_vec();
    let g = ray.direction.as_vec();
    let b = g.dot(&c);
    let disc = b * b - (c.dot(&c) - sphere.radius * sphere.radius);
    if disc < 0.0 {
        return Err(GeometryError::NoIntersection);
    }
    let root = disc.sqrt();
    let t_near = b - root;
    let t_far = b + root;
    let t = if t_near > 0.0 {
        t_near
    } else if t_far > 0.0 {
        t_far
    } else {
        return Err(GeometryError::BehindCamera);
    };
    Ok(ray.point_at(t))
}

/// Reflects `incoming` about `normal`: `r = 2 (n·g) n − g`.
///
/// With the inward surface normal convention used throughout (normal points
/// from the surface point toward the sphere center), the result spans the
/// reflected line; incidence and reflection angles against the normal are
/// equal by construction.
pub fn reflect_about_normal(incoming: UnitVec3, normal: UnitVec3) -> UnitVec3 {
    let g = incoming.as_vec();
    let n = normal.as_vec();
    let r = 2.0 * n.dot(&g) * n - g;
    UnitVec3::new(r).expect("reflection of a unit vector is unit")
}

/// Inward surface normal at a point on a sphere: `(C − G) / |C − G|`.
pub fn surface_normal(sphere: &Sphere, g: Point3) -> GeoResult<UnitVec3> {
    let to_center = sphere.center.to_vec() - g.to_vec();
    let distance = (to_center.norm() - sphere.radius).abs();
    if distance > ON_SURFACE_TOL {
        return Err(GeometryError::OffSurface { distance });
    }
    UnitVec3::new(to_center)
}

/// Distance from a point to the infinite line through `ray_origin` with
/// direction `dir`: `‖(G − L) − [(G − L)·r̂] r̂‖`.
pub fn point_to_ray_distance(point: Point3, ray_origin: Point3, dir: UnitVec3) -> f64 {
    let w = ray_origin.to_vec() - point.to_vec();
    let r = dir.as_vec();
    (w - w.dot(&r) * r).norm()
}

/// Half-line variant: distance to `{origin + t·dir : t ≥ 0}`. When the
/// point projects behind the origin this is the distance to the origin.
pub fn point_to_half_line_distance(point: Point3, ray_origin: Point3, dir: UnitVec3) -> f64 {
    let w = point.to_vec() - ray_origin.to_vec();
    let t = w.dot(&dir.as_vec()).max(0.0);
    (w - t * dir.as_vec()).norm()
}

/// Image of a small 3D disc under first-order (affine) projection: an
/// ellipse centered exactly at the projection of the disc center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageEllipse {
    pub center: Point2,
    /// Columns are the images of the disc's two radius vectors, px.
    pub axes: [[f64; 2]; 2],
}

impl ImageEllipse {
    /// Maps unit-disc coordinates (a, b) with a² + b² ≤ 1 into the image.
    pub fn point_at(&self, a: f64, b: f64) -> Point2 {
        Point2::new(
            self.center.u + self.axes[0][0] * a + self.axes[0][1] * b,
            self.center.v + self.axes[1][0] * a + self.axes[1][1] * b,
        )
    }

    fn det(&self) -> f64 {
        self.axes[0][0] * self.axes[1][1] - self.axes[0][1] * self.axes[1][0]
    }

    /// True when the pixel lies inside (or on) the ellipse.
    pub fn contains(&self, p: &Point2) -> bool {
        let det = self.det();
        if det.abs() < 1e-12 {
            return false;
        }
        let du = p.u - self.center.u;
        let dv = p.v - self.center.v;
        let a = (self.axes[1][1] * du - self.axes[0][1] * dv) / det;
        let b = (-self.axes[1][0] * du + self.axes[0][0] * dv) / det;
        a * a + b * b <= 1.0
    }

    /// Semi-major and semi-minor axis lengths, px.
    pub fn semi_axes(&self) -> (f64, f64) {
        // Singular values of the 2x2 axes matrix.
        let [[a, b], [c, d]] = self.axes;
        let q = a * a + b * b + c * c + d * d;
        let det = (a * d - b * c).abs();
        let s = (q + 2.0 * det).max(0.0).sqrt();
        let t = (q - 2.0 * det).max(0.0).sqrt();
        (0.5 * (s + t), 0.5 * (s - t).abs())
    }

    /// Conservative pixel bounding box (u_min, v_min, u_max, v_max).
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let ru = self.axes[0][0].hypot(self.axes[0][1]);
        let rv = self.axes[1][0].hypot(self.axes[1][1]);
        (self.center.u - ru, self.center.v - rv, self.center.u + ru, self.center.v + rv)
    }
}

/// Projects a disc of the given radius centered at `center` with plane
/// normal `normal` to an image ellipse, linearizing the projection at the
/// disc center. Fails when the center is not in front of the camera.
pub fn project_disc_affine(
    camera: &PinholeCamera,
    center: Point3,
    normal: UnitVec3,
    radius: f64,
) -> GeoResult<ImageEllipse> {
    let c2 = project(camera, center)?;
    // In-plane orthonormal basis.
    let n = normal.as_vec();
    let seed = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = n.cross(&seed).normalize();
    let e2 = n.cross(&e1);
    let f = camera.focal_px;
    let (x, y, z) = (center.x, center.y, center.z);
    // Projection Jacobian at the disc center.
    let jac = |d: Vector3<f64>| {
        [
            f * (d.x / z - x * d.z / (z * z)),
            f * (d.y / z - y * d.z / (z * z)),
        ]
    };
    let a1 = jac(e1 * radius);
    let a2 = jac(e2 * radius);
    Ok(ImageEllipse { center: c2, axes: [[a1[0], a2[0]], [a1[1], a2[1]]] })
}

/// Direction `v` minimizing `Σ (nᵢ·v)²` for stacked plane normals: the right
/// singular vector with the smallest singular value, oriented so `v.z > 0`.
///
/// Normals are scale-normalized before stacking so each plane constraint
/// carries equal weight. Requires two or more independent constraints.
pub fn solve_null_ray(plane_normals: &[Vector3<f64>]) -> GeoResult<UnitVec3> {
    let rows: Vec<Vector3<f64>> = plane_normals
        .iter()
        .filter(|n| n.norm() >= 1e-15)
        .map(|n| n / n.norm())
        .collect();
    if rows.len() < 2 {
        return Err(GeometryError::InsufficientConstraints { needed: 2, got: rows.len() });
    }
    // Pad with zero rows so the thin SVD still exposes the full 3x3 V.
    let mut a = DMatrix::<f64>::zeros(rows.len().max(3), 3);
    for (i, n) in rows.iter().enumerate() {
        a.set_row(i, &n.transpose());
    }
    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    // Singular values come back sorted in decreasing order.
    if (sv[1] - sv[2]).abs() <= NULL_RAY_GAP_TOL * sv[0] {
        return Err(GeometryError::DegenerateSystem);
    }
    let v_t = svd.v_t.as_ref().expect("V^T requested");
    let v = Vector3::new(v_t[(2, 0)], v_t[(2, 1)], v_t[(2, 2)]);
    let v = if v.z < 0.0 { -v } else { v };
    UnitVec3::new(v)
}

//! From cornea 3D and pupil 2D to gaze: pupil lifting onto the corneal
//! ball, optical-axis construction, and per-subject calibration of
//! optical-to-visual-axis mappers (second-order polynomial and a small
//! fully-connected network).

pub mod net;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    self, GeometryError, PinholeCamera, Point2, Point3, Ray3, Sphere, UnitVec3,
};
use crate::metrics::angular_error_arcmin;

pub use net::{fit_net_mapper, NetMapper, NetTrainConfig};

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum MapperError {
    /// The pupil ray misses the corneal ball; the frame is rejected.
    NoIntersection,
    /// Cornea and pupil centers coincide; no axis direction exists.
    CoincidentPoints,
    /// Calibration design matrix is rank deficient (too few or degenerate
    /// pairs).
    RankDeficient,
    /// Too few calibration pairs for the requested mapper.
    TooFewPairs { needed: usize, got: usize },
    /// Training diverged.
    NonFiniteLoss { iteration: u32 },
    Geometry(GeometryError),
    /// Bad mapper file.
    Format(String),
}

impl std::fmt::Display for MapperError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::NoIntersection => write!(f, "pupil ray misses the corneal ball"),
            Self::CoincidentPoints => write!(f, "cornea and pupil centers coincide"),
            Self::RankDeficient => write!(f, "calibration design matrix is rank deficient"),
            Self::TooFewPairs { needed, got } => {
                write!(f, "need at least {needed} calibration pairs, got {got}")
            }
            Self::NonFiniteLoss { iteration } => {
                write!(f, "training loss became non-finite at iteration {iteration}")
            }
            Self::Geometry(e) => write!(f, "{e}"),
            Self::Format(msg) => write!(f, "mapper file: {msg}"),
        }
    }
}

impl std::error::Error for MapperError {}

impl From<GeometryError> for MapperError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::NoIntersection | GeometryError::BehindCamera => Self::NoIntersection,
            other => Self::Geometry(other),
        }
    }
}

pub type MapperResult<T> = Result<T, MapperError>;

// ── Axes ────────────────────────────────────────────────────────────────

/// Optical axis: unit direction from the cornea center through the pupil,
/// anchored at the cornea center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalAxis {
    pub direction: UnitVec3,
    pub anchor: Point3,
}

/// Visual axis (gaze): unit direction from the cornea center toward the
/// fixation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisualAxis {
    pub direction: UnitVec3,
    pub anchor: Point3,
}

/// Lifts a 2D pupil center onto the corneal ball: the near intersection of
/// the camera ray through the pupil with the sphere around the cornea 3D
/// center.
pub fn lift_pupil_to_3d(
    pupil_2d: Point2,
    cornea_3d: Point3,
    camera: &PinholeCamera,
    radius: f64,
) -> MapperResult<Point3> {
    let sphere = Sphere::new(cornea_3d, radius)?;
    let ray = Ray3::new(Point3::ORIGIN, geometry::back_project(camera, pupil_2d));
    Ok(geometry::ray_sphere_near_intersection(&ray, &sphere)?)
}

/// Optical axis from the cornea and pupil centers, pointing out of the eye.
pub fn optical_axis(cornea_3d: Point3, pupil_3d: Point3) -> MapperResult<OpticalAxis> {
    let d = pupil_3d.to_vec() - cornea_3d.to_vec();
    if d.norm() < 1e-9 {
        return Err(MapperError::CoincidentPoints);
    }
    Ok(OpticalAxis { direction: UnitVec3::new(d)?, anchor: cornea_3d })
}

// ── Calibration data ────────────────────────────────────────────────────

/// Per-subject calibration samples: estimated optical axis directions
/// paired with the visual-axis directions implied by the known targets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub pairs: Vec<(UnitVec3, UnitVec3)>,
}

impl CalibrationSet {
    pub fn push(&mut self, optical: UnitVec3, visual: UnitVec3) {
        self.pairs.push((optical, visual));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

// ── Polynomial mapper ───────────────────────────────────────────────────

/// Tangent-plane coordinates (x/z, y/z) of a direction. The z sign of the
/// hemisphere is carried separately so the parametrization stays smooth
/// for gaze directions clustered around either camera half-space.
fn tangent(dir: &UnitVec3) -> (f64, f64) {
    (dir.x() / dir.z(), dir.y() / dir.z())
}

fn quadratic_basis(x: f64, y: f64) -> [f64; 6] {
    [1.0, x, y, x * x, x * y, y * y]
}

/// Full second-order polynomial map between unit directions in tangent
/// coordinates: 6 coefficients per output component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyMapper {
    pub coeffs_u: [f64; 6],
    pub coeffs_v: [f64; 6],
    /// Hemisphere of the fitted visual directions (sign of z).
    pub z_sign: f64,
    /// RMS and max angular residual on the calibration set, arcmin.
    pub residual_rms_arcmin: f64,
    pub residual_max_arcmin: f64,
}

/// Fits the polynomial mapper by linear least squares per output tangent
/// coordinate over the basis {1, x, y, x², xy, y²}.
pub fn fit_poly_mapper(calib: &CalibrationSet) -> MapperResult<PolyMapper> {
    let n = calib.len();
    if n < 6 {
        return Err(MapperError::RankDeficient);
    }
    let mut design = DMatrix::<f64>::zeros(n, 6);
    let mut target_u = DMatrix::<f64>::zeros(n, 1);
    let mut target_v = DMatrix::<f64>::zeros(n, 1);
    let mut z_sign_sum = 0.0;
    for (i, (optical, visual)) in calib.pairs.iter().enumerate() {
        let (x, y) = tangent(optical);
        for (j, b) in quadratic_basis(x, y).iter().enumerate() {
            design[(i, j)] = *b;
        }
        let (tu, tv) = tangent(visual);
        target_u[(i, 0)] = tu;
        target_v[(i, 0)] = tv;
        z_sign_sum += visual.z().signum();
    }
    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * max_sv).count();
    if rank < 6 {
        return Err(MapperError::RankDeficient);
    }
    let solve = |target: &DMatrix<f64>| -> [f64; 6] {
        let sol = svd.solve(target, 1e-12 * max_sv).expect("SVD solve after rank check");
        [sol[(0, 0)], sol[(1, 0)], sol[(2, 0)], sol[(3, 0)], sol[(4, 0)], sol[(5, 0)]]
    };
    let mut mapper = PolyMapper {
        coeffs_u: solve(&target_u),
        coeffs_v: solve(&target_v),
        z_sign: if z_sign_sum >= 0.0 { 1.0 } else { -1.0 },
        residual_rms_arcmin: 0.0,
        residual_max_arcmin: 0.0,
    };
    let mut sum_sq = 0.0;
    let mut max = 0.0_f64;
    for (optical, visual) in &calib.pairs {
        let predicted = mapper.map_direction(optical);
        let err = angular_error_arcmin(&predicted, visual);
        sum_sq += err * err;
        max = max.max(err);
    }
    mapper.residual_rms_arcmin = (sum_sq / n as f64).sqrt();
    mapper.residual_max_arcmin = max;
    Ok(mapper)
}

impl PolyMapper {
    pub fn map_direction(&self, optical: &UnitVec3) -> UnitVec3 {
        let (x, y) = tangent(optical);
        let basis = quadratic_basis(x, y);
        let tu: f64 = basis.iter().zip(&self.coeffs_u).map(|(b, c)| b * c).sum();
        let tv: f64 = basis.iter().zip(&self.coeffs_v).map(|(b, c)| b * c).sum();
        UnitVec3::from_components(tu * self.z_sign, tv * self.z_sign, self.z_sign)
            .expect("tangent reconstruction is nonzero")
    }
}

// ── Unified mapper interface ────────────────────────────────────────────

pub const MAPPER_FILE_VERSION: u32 = 1;

/// A calibrated optical-to-visual axis map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GazeMapper {
    Polynomial(PolyMapper),
    Network(NetMapper),
}

/// Applies a fitted mapper: unit visual axis anchored at the cornea center.
pub fn map_gaze(mapper: &GazeMapper, axis: &OpticalAxis) -> VisualAxis {
    let direction = match mapper {
        GazeMapper::Polynomial(poly) => poly.map_direction(&axis.direction),
        GazeMapper::Network(machine) => machine.map_direction(&axis.direction),
    };
    VisualAxis { direction, anchor: axis.anchor }
}

#[derive(Debug, Serialize, Deserialize)]
struct MapperFile {
    version: u32,
    #[serde(flatten)]
    mapper: GazeMapper,
}

/// Serializes a mapper to the versioned structured-text format. Reloading
/// reproduces `map_gaze` outputs bit-exactly.
pub fn mapper_to_json(mapper: &GazeMapper) -> String {
    serde_json::to_string(&MapperFile { version: MAPPER_FILE_VERSION, mapper: mapper.clone() })
        .expect("mapper serialization is infallible")
}

pub fn mapper_from_json(text: &str) -> MapperResult<GazeMapper> {
    let file: MapperFile =
        serde_json::from_str(text).map_err(|e| MapperError::Format(e.to_string()))?;
    if file.version != MAPPER_FILE_VERSION {
        return Err(MapperError::Format(format!("unsupported version {}", file.version)));
    }
    Ok(file.mapper)
}

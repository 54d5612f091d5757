//! Run configuration: a TOML file with [camera], [rig], [eye], [noise],
//! [solver], [mapper] and [run] sections. Every key has a default; unknown
//! keys are errors. Lengths accept bare numbers (millimeters) or strings
//! with an explicit mm/cm/m suffix.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cornea::{CorneaMode, LiftConfig, RefinementConfig};
use crate::geometry::{GeometryError, PinholeCamera, Point2, Point3};
use crate::mapper::NetTrainConfig;
use crate::raster::{BlobConfig, DetectConfig, LabelingConfig, PupilConfig, RenderConfig};
use crate::sim::{AnatomyRanges, LedRig, NoiseSpec, ProtocolConfig, SimError, SubjectParams};

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Io(msg) => write!(f, "config io: {msg}"),
            Self::Parse(msg) => write!(f, "config parse: {msg}"),
            Self::Invalid(msg) => write!(f, "config invalid: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<GeometryError> for ConfigError {
    fn from(e: GeometryError) -> Self {
        Self::Invalid(e.to_string())
    }
}

impl From<SimError> for ConfigError {
    fn from(e: SimError) -> Self {
        Self::Invalid(e.to_string())
    }
}

// ── Length with unit suffixes ───────────────────────────────────────────

/// A length in millimeters. Deserializes from a bare number (mm) or a
/// string with an explicit suffix: "8mm", "0.8cm", "0.008m".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Length(pub f64);

impl Length {
    pub fn mm(&self) -> f64 {
        self.0
    }

    fn parse(text: &str) -> Result<Length, String> {
        let text = text.trim();
        let (number, factor) = if let Some(v) = text.strip_suffix("mm") {
            (v, 1.0)
        } else if let Some(v) = text.strip_suffix("cm") {
            (v, 10.0)
        } else if let Some(v) = text.strip_suffix('m') {
            (v, 1000.0)
        } else {
            return Err(format!("length '{text}' needs an mm/cm/m suffix"));
        };
        number
            .trim()
            .parse::<f64>()
            .map(|v| Length(v * factor))
            .map_err(|_| format!("bad length '{text}'"))
    }
}

impl Serialize for Length {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Length {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(Length(v)),
            Raw::Text(text) => Length::parse(&text).map_err(serde::de::Error::custom),
        }
    }
}

fn point3(v: &[Length; 3]) -> Point3 {
    Point3::new(v[0].mm(), v[1].mm(), v[2].mm())
}

// ── Sections ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSection {
    pub focal_px: f64,
    pub principal: [f64; 2],
    pub size: [u32; 2],
}

impl Default for CameraSection {
    fn default() -> Self {
        Self { focal_px: 600.0, principal: [320.0, 240.0], size: [640, 480] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigSection {
    pub leds: Vec<[Length; 3]>,
}

impl Default for RigSection {
    fn default() -> Self {
        let rig = LedRig::default();
        Self {
            leds: rig
                .leds
                .iter()
                .map(|p| [Length(p.x), Length(p.y), Length(p.z)])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EyeSection {
    pub eyeball_center: [Length; 3],
    pub center_jitter: Length,
    pub kappa_deg: [f64; 2],
    pub kappa_jitter_deg: f64,
    pub cornea_radius: Length,
    pub cornea_radius_jitter: Length,
    pub cornea_offset: Length,
    pub pupil_on_cornea: bool,
    pub pupil_plane_offset: Length,
    pub pupil_radius: Length,
    pub iris_radius: Length,
    pub eyeball_radius: Length,
}

impl Default for EyeSection {
    fn default() -> Self {
        let s = SubjectParams::default();
        let r = AnatomyRanges::default();
        Self {
            eyeball_center: [
                Length(s.eyeball_center.x),
                Length(s.eyeball_center.y),
                Length(s.eyeball_center.z),
            ],
            center_jitter: Length(r.center_jitter),
            kappa_deg: [s.kappa_deg.0, s.kappa_deg.1],
            kappa_jitter_deg: r.kappa_jitter_deg,
            cornea_radius: Length(s.cornea_radius),
            cornea_radius_jitter: Length(r.cornea_radius_jitter),
            cornea_offset: Length(s.cornea_offset),
            pupil_on_cornea: s.pupil_on_cornea,
            pupil_plane_offset: Length(s.pupil_plane_offset),
            pupil_radius: Length(s.pupil_radius),
            iris_radius: Length(s.iris_radius),
            eyeball_radius: Length(s.eyeball_radius),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub keypoint_sigma: f64,
    pub glint_dropout_prob: f64,
    pub distractor_count_mean: f64,
    pub seed: u64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { keypoint_sigma: 0.0, glint_dropout_prob: 0.0, distractor_count_mean: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub z_min: Length,
    pub z_max: Length,
    pub z_step: Length,
    pub cornea_radius: Length,
    pub coarse_to_fine: bool,
    pub coarse_points: u32,
    pub half_line: bool,
    pub refine_steps: u32,
    pub refine_step_size: f64,
    pub glint_freedom: bool,
    pub tether_weight: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let lift = LiftConfig::default();
        let refine = RefinementConfig::default();
        Self {
            z_min: Length(lift.z_min),
            z_max: Length(lift.z_max),
            z_step: Length(lift.z_step),
            cornea_radius: Length(lift.cornea_radius),
            coarse_to_fine: lift.coarse_to_fine,
            coarse_points: lift.coarse_points,
            half_line: lift.half_line,
            refine_steps: refine.steps,
            refine_step_size: refine.step_size,
            glint_freedom: refine.glint_freedom,
            tether_weight: refine.tether_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapperKind {
    Polynomial,
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperSection {
    pub kind: MapperKind,
    pub net_iterations: u32,
    pub net_learning_rate: f64,
    pub net_seed: u64,
    pub net_hidden: Vec<usize>,
}

impl Default for MapperSection {
    fn default() -> Self {
        let net = NetTrainConfig::default();
        Self {
            kind: MapperKind::Polynomial,
            net_iterations: net.iterations,
            net_learning_rate: net.learning_rate,
            net_seed: net.seed,
            net_hidden: net.hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionSource {
    /// Exact simulator observations.
    Oracle,
    /// Simulator observations with the configured noise.
    NoisyOracle,
    /// Rendered frames through the classical raster detector.
    RasterClassical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub subjects: u32,
    pub frames_per_target: u32,
    pub detection: DetectionSource,
    pub cornea: CorneaMode,
    pub depths_m: Vec<f64>,
    pub calibration_depth_m: f64,
    pub grid_half_angle_narrow_deg: f64,
    pub grid_half_angle_wide_deg: f64,
    pub grid_narrow_vertical_offset_deg: f64,
    pub histogram_bin_arcmin: f64,
    pub histogram_bins: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        let protocol = ProtocolConfig::default();
        Self {
            subjects: 20,
            frames_per_target: 10,
            detection: DetectionSource::Oracle,
            cornea: CorneaMode::SvdLift,
            depths_m: protocol.depths_m,
            calibration_depth_m: protocol.calibration_depth_m,
            grid_half_angle_narrow_deg: protocol.grid_half_angle_narrow_deg,
            grid_half_angle_wide_deg: protocol.grid_half_angle_wide_deg,
            grid_narrow_vertical_offset_deg: protocol.grid_narrow_vertical_offset_deg,
            histogram_bin_arcmin: 10.0,
            histogram_bins: 100,
        }
    }
}

/// The whole configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub camera: CameraSection,
    pub rig: RigSection,
    pub eye: EyeSection,
    pub noise: NoiseSection,
    pub solver: SolverSection,
    pub mapper: MapperSection,
    pub run: RunSection,
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<AppConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<AppConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Overrides detection/cornea/mapper from a variant name of the form
    /// `SOURCE:CORNEA:MAPPER`, e.g. `noisy-oracle:refine-lift:polynomial`.
    pub fn apply_variant(&mut self, variant: &str) -> Result<(), ConfigError> {
        let parts: Vec<&str> = variant.split(':').collect();
        if parts.len() != 3 {
            return Err(ConfigError::Invalid(format!(
                "variant '{variant}' is not SOURCE:CORNEA:MAPPER"
            )));
        }
        self.run.detection = match parts[0] {
            "oracle" => DetectionSource::Oracle,
            "noisy-oracle" => DetectionSource::NoisyOracle,
            "raster-classical" => DetectionSource::RasterClassical,
            other => {
                return Err(ConfigError::Invalid(format!("unknown detection source '{other}'")))
            }
        };
        self.run.cornea = match parts[1] {
            "svd-lift" => CorneaMode::SvdLift,
            "refine-lift" => CorneaMode::RefineLift,
            other => return Err(ConfigError::Invalid(format!("unknown cornea mode '{other}'"))),
        };
        self.mapper.kind = match parts[2] {
            "polynomial" | "poly" => MapperKind::Polynomial,
            "network" | "net" => MapperKind::Network,
            other => return Err(ConfigError::Invalid(format!("unknown mapper '{other}'"))),
        };
        Ok(())
    }

    pub fn variant_name(&self) -> String {
        let source = match self.run.detection {
            DetectionSource::Oracle => "oracle",
            DetectionSource::NoisyOracle => "noisy-oracle",
            DetectionSource::RasterClassical => "raster-classical",
        };
        let cornea = match self.run.cornea {
            CorneaMode::SvdLift => "svd-lift",
            CorneaMode::RefineLift => "refine-lift",
        };
        let mapper = match self.mapper.kind {
            MapperKind::Polynomial => "polynomial",
            MapperKind::Network => "network",
        };
        format!("{source}:{cornea}:{mapper}")
    }

    // ── Domain conversions ─────────────────────────────────────────────

    pub fn camera(&self) -> Result<PinholeCamera, ConfigError> {
        Ok(PinholeCamera::new(
            self.camera.focal_px,
            Point2::new(self.camera.principal[0], self.camera.principal[1]),
            self.camera.size[0],
            self.camera.size[1],
        )?)
    }

    pub fn rig(&self) -> Result<LedRig, ConfigError> {
        if self.rig.leds.len() != 4 {
            return Err(ConfigError::Invalid(format!(
                "rig needs exactly 4 LEDs, got {}",
                self.rig.leds.len()
            )));
        }
        let leds = [
            point3(&self.rig.leds[0]),
            point3(&self.rig.leds[1]),
            point3(&self.rig.leds[2]),
            point3(&self.rig.leds[3]),
        ];
        Ok(LedRig::new(leds)?)
    }

    pub fn subject_base(&self) -> SubjectParams {
        SubjectParams {
            eyeball_center: point3(&self.eye.eyeball_center),
            kappa_deg: (self.eye.kappa_deg[0], self.eye.kappa_deg[1]),
            cornea_radius: self.eye.cornea_radius.mm(),
            cornea_offset: self.eye.cornea_offset.mm(),
            pupil_on_cornea: self.eye.pupil_on_cornea,
            pupil_plane_offset: self.eye.pupil_plane_offset.mm(),
            pupil_radius: self.eye.pupil_radius.mm(),
            iris_radius: self.eye.iris_radius.mm(),
            eyeball_radius: self.eye.eyeball_radius.mm(),
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            subjects: self.run.subjects,
            frames_per_target: self.run.frames_per_target,
            depths_m: self.run.depths_m.clone(),
            calibration_depth_m: self.run.calibration_depth_m,
            grid_half_angle_narrow_deg: self.run.grid_half_angle_narrow_deg,
            grid_half_angle_wide_deg: self.run.grid_half_angle_wide_deg,
            grid_narrow_vertical_offset_deg: self.run.grid_narrow_vertical_offset_deg,
            anatomy: AnatomyRanges {
                base: self.subject_base(),
                center_jitter: self.eye.center_jitter.mm(),
                kappa_jitter_deg: self.eye.kappa_jitter_deg,
                cornea_radius_jitter: self.eye.cornea_radius_jitter.mm(),
            },
        }
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            keypoint_sigma: self.noise.keypoint_sigma,
            glint_dropout_prob: self.noise.glint_dropout_prob,
            distractor_count_mean: self.noise.distractor_count_mean,
            seed: self.noise.seed,
        }
    }

    pub fn lift(&self) -> LiftConfig {
        LiftConfig {
            cornea_radius: self.solver.cornea_radius.mm(),
            z_min: self.solver.z_min.mm(),
            z_max: self.solver.z_max.mm(),
            z_step: self.solver.z_step.mm(),
            coarse_to_fine: self.solver.coarse_to_fine,
            coarse_points: self.solver.coarse_points,
            half_line: self.solver.half_line,
        }
    }

    pub fn refinement(&self) -> RefinementConfig {
        RefinementConfig {
            steps: self.solver.refine_steps,
            step_size: self.solver.refine_step_size,
            glint_freedom: self.solver.glint_freedom,
            tether_weight: self.solver.tether_weight,
        }
    }

    pub fn net_train(&self) -> NetTrainConfig {
        NetTrainConfig {
            iterations: self.mapper.net_iterations,
            learning_rate: self.mapper.net_learning_rate,
            seed: self.mapper.net_seed,
            hidden: self.mapper.net_hidden.clone(),
            ..NetTrainConfig::default()
        }
    }

    pub fn render(&self) -> RenderConfig {
        RenderConfig::default()
    }

    pub fn detect(&self) -> DetectConfig {
        DetectConfig {
            bright_fraction: Some(crate::raster::DEFAULT_BRIGHT_FRACTION),
            blobs: Some(BlobConfig::default()),
            pupil: Some(PupilConfig::default()),
            labeling: Some(LabelingConfig {
                lift: LiftConfig { coarse_to_fine: true, ..self.lift() },
                ..LabelingConfig::default()
            }),
        }
    }
}

/// FNV-1a hash of the canonical JSON form; embedded in every report.
pub fn config_hash(config: &AppConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in canonical.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

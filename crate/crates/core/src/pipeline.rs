//! Experiment runner: generates protocol frames, runs a pipeline variant
//! (detection source x cornea mode x mapper), aggregates metrics and emits
//! report files. Every run is a pure function of (config, seed); outputs
//! are byte-stable.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{config_hash, AppConfig, ConfigError, DetectionSource, MapperKind};
use crate::cornea::estimate_cornea;
use crate::geometry::{PinholeCamera, Point2, Point3, UnitVec3};
use crate::mapper::{
    fit_net_mapper, fit_poly_mapper, lift_pupil_to_3d, map_gaze, optical_axis, CalibrationSet,
    GazeMapper, OpticalAxis,
};
use crate::metrics::{angular_error_arcmin, labeled_euclidean_error, Histogram, SampleStats};
use crate::raster::{detect_frame, render_frame};
use crate::sim::{
    eye_pose_for_target, frame_stream, protocol_targets, sample_subject, synthesize_frame,
    FrameObservation, GazeTarget, NoiseSpec,
};

#[derive(Debug)]
pub enum PipelineError {
    Config(ConfigError),
    Sim(crate::sim::SimError),
    Io { path: PathBuf, source: std::io::Error },
}

impl std::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(e) => write!(f, "{e}"),
            Self::Sim(e) => write!(f, "simulation: {e}"),
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e)
    }
}

impl From<crate::sim::SimError> for PipelineError {
    fn from(e: crate::sim::SimError) -> Self {
        Self::Sim(e)
    }
}

pub type PipelineResult<T> = Result<T, PipelineError>;

// ── Per-frame outcome records ───────────────────────────────────────────

pub const RUN_SCHEMA_VERSION: u32 = 1;

/// One evaluated (or rejected) frame of a run. Serialized as JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutcome {
    pub schema: u32,
    pub subject: u32,
    pub row: u8,
    pub col: u8,
    pub depth_m: f64,
    pub frame: u32,
    pub calibration: bool,
    /// "ok" or the rejection reason.
    pub status: String,
    pub ae_arcmin: Option<f64>,
    pub cornea3d_err_mm: Option<f64>,
    pub cornea2d_err_px: Option<f64>,
    pub led_loss_mm2: Option<f64>,
    pub lee_px: Option<f64>,
    pub lee_excluded: Option<usize>,
    pub presence_correct: u8,
    pub refinement_monotone: Option<bool>,
}

/// Aggregated metrics of one variant run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub config_hash: String,
    pub frames_total: usize,
    pub calibration_frames: usize,
    pub evaluated: usize,
    pub rejected: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
    /// Pooled angular error over evaluated frames, arcmin.
    pub angular_error: Option<SampleStats>,
    /// Mean AE per 3x3 grid direction (row-major), arcmin.
    pub per_direction: Vec<DirectionStats>,
    /// Mean AE per depth plane, arcmin.
    pub per_depth: Vec<DepthStats>,
    pub lee_mean_px: Option<f64>,
    pub presence_accuracy: f64,
    pub cornea3d_err_mm: Option<SampleStats>,
    pub cornea2d_err_px: Option<SampleStats>,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionStats {
    pub row: u8,
    pub col: u8,
    pub count: usize,
    pub mean_ae_arcmin: f64,
    pub std_ae_arcmin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthStats {
    pub depth_m: f64,
    pub count: usize,
    pub mean_ae_arcmin: f64,
    pub std_ae_arcmin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: MetricsReport,
    pub frames: Vec<FrameOutcome>,
}

// ── Per-frame estimation ────────────────────────────────────────────────

struct FrameEstimate {
    optical: OpticalAxis,
    cornea_3d: Point3,
    cornea_2d: Point2,
    led_loss: f64,
    refinement_monotone: Option<bool>,
    observation: FrameObservation,
}

fn observe(
    config: &AppConfig,
    detection: DetectionSource,
    eye: &crate::sim::EyeState,
    subject: &crate::sim::SubjectParams,
    rig: &crate::sim::LedRig,
    camera: &PinholeCamera,
    noise: &NoiseSpec,
    stream: u64,
) -> PipelineResult<(FrameObservation, crate::sim::FrameTruth)> {
    let synthesized = match detection {
        DetectionSource::Oracle => {
            synthesize_frame(eye, subject, rig, camera, &NoiseSpec::noiseless(noise.seed), stream)?
        }
        _ => synthesize_frame(eye, subject, rig, camera, noise, stream)?,
    };
    let truth = synthesized.truth.clone().expect("simulator attaches truth");
    match detection {
        DetectionSource::Oracle | DetectionSource::NoisyOracle => Ok((synthesized, truth)),
        DetectionSource::RasterClassical => {
            let img = render_frame(
                eye,
                subject,
                rig,
                camera,
                &config.render(),
                &synthesized.distractors,
            );
            match detect_frame(&img, rig, camera, &config.detect()) {
                Ok(mut detected) => {
                    detected.truth = Some(truth.clone());
                    Ok((detected, truth))
                }
                Err(_) => {
                    // Detection failure: an empty observation the estimator
                    // will reject (counted, not fatal).
                    let mut empty = synthesized.clone();
                    empty.pupil = crate::sim::Keypoint::absent();
                    for g in empty.glints.iter_mut() {
                        g.uv = None;
                    }
                    Ok((empty, truth))
                }
            }
        }
    }
}

fn estimate_frame(
    config: &AppConfig,
    obs: &FrameObservation,
    rig: &crate::sim::LedRig,
    camera: &PinholeCamera,
) -> Result<FrameEstimate, String> {
    let estimate = estimate_cornea(
        obs,
        rig,
        camera,
        config.run.cornea,
        &config.refinement(),
        &config.lift(),
    )
    .map_err(|e| reason_key("cornea", &e.to_string()))?;
    let pupil_uv = obs.pupil.uv.ok_or_else(|| "pupil-absent".to_string())?;
    let pupil_3d = lift_pupil_to_3d(pupil_uv, estimate.cornea_3d, camera, config.lift().cornea_radius)
        .map_err(|e| reason_key("pupil", &e.to_string()))?;
    let optical = optical_axis(estimate.cornea_3d, pupil_3d)
        .map_err(|e| reason_key("axis", &e.to_string()))?;
    let refinement_monotone = if estimate.refinement_trace.is_empty() {
        None
    } else {
        Some(estimate.refinement_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12))
    };
    Ok(FrameEstimate {
        optical,
        cornea_3d: estimate.cornea_3d,
        cornea_2d: estimate.cornea_2d,
        led_loss: estimate.led_loss,
        refinement_monotone,
        observation: obs.clone(),
    })
}

/// Short machine-readable rejection keys for grouping.
fn reason_key(stage: &str, detail: &str) -> String {
    let slug: String = detail
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect::<String>()
        .split('-')
        .filter(|s| !s.is_empty())
        .take(4)
        .collect::<Vec<_>>()
        .join("-");
    format!("{stage}:{slug}")
}

// ── The pipeline ────────────────────────────────────────────────────────

/// Runs one variant end to end: per subject, calibrate the mapper on the
/// calibration-plane frames, evaluate on the remaining targets, aggregate.
/// Per-frame failures are counted as rejections and never abort the run.
pub fn run_pipeline(config: &AppConfig) -> PipelineResult<RunOutput> {
    let camera = config.camera()?;
    let rig = config.rig()?;
    let protocol = config.protocol();
    let noise = config.noise();
    let targets = protocol_targets(&protocol);

    let mut frames = Vec::new();
    let mut presence_correct_total = 0u64;
    let mut presence_total = 0u64;

    for subject_idx in 0..protocol.subjects {
        let subject = sample_subject(&protocol, noise.seed, subject_idx);

        // Pose and estimate every frame of this subject in protocol order.
        struct Pending {
            target: GazeTarget,
            frame: u32,
            calibration: bool,
            truth: crate::sim::FrameTruth,
            estimate: Result<FrameEstimate, String>,
        }
        let mut pending = Vec::new();
        for (target_idx, target) in targets.iter().enumerate() {
            let eye = eye_pose_for_target(target, &subject)?;
            let calibration = (target.depth_m - protocol.calibration_depth_m).abs() < 1e-12;
            for frame_idx in 0..protocol.frames_per_target {
                let stream = frame_stream(subject_idx, target_idx as u32, frame_idx);
                let (obs, truth) = observe(
                    config,
                    config.run.detection,
                    &eye,
                    &subject,
                    &rig,
                    &camera,
                    &noise,
                    stream,
                )?;
                let estimate = estimate_frame(config, &obs, &rig, &camera);
                pending.push(Pending {
                    target: target.clone(),
                    frame: frame_idx,
                    calibration,
                    truth,
                    estimate,
                });
            }
        }

        // Calibration: target-implied visual axis against estimated optical.
        let mut calib = CalibrationSet::default();
        for p in pending.iter().filter(|p| p.calibration) {
            if let Ok(est) = &p.estimate {
                let to_target = p.target.position.to_vec() - est.cornea_3d.to_vec();
                if let Ok(visual) = UnitVec3::new(to_target) {
                    calib.push(est.optical.direction, visual);
                }
            }
        }
        let mapper: Result<GazeMapper, String> = match config.mapper.kind {
            MapperKind::Polynomial => fit_poly_mapper(&calib)
                .map(GazeMapper::Polynomial)
                .map_err(|e| reason_key("calibration", &e.to_string())),
            MapperKind::Network => fit_net_mapper(&calib, &config.net_train())
                .map(GazeMapper::Network)
                .map_err(|e| reason_key("calibration", &e.to_string())),
        };

        for p in pending {
            let mut outcome = FrameOutcome {
                schema: RUN_SCHEMA_VERSION,
                subject: subject_idx,
                row: p.target.row,
                col: p.target.col,
                depth_m: p.target.depth_m,
                frame: p.frame,
                calibration: p.calibration,
                status: "ok".into(),
                ae_arcmin: None,
                cornea3d_err_mm: None,
                cornea2d_err_px: None,
                led_loss_mm2: None,
                lee_px: None,
                lee_excluded: None,
                presence_correct: 0,
                refinement_monotone: None,
            };

            match &p.estimate {
                Err(reason) => outcome.status = reason.clone(),
                Ok(est) => {
                    outcome.cornea3d_err_mm = Some(est.cornea_3d.distance(&p.truth.cornea_3d));
                    outcome.cornea2d_err_px = Some(est.cornea_2d.distance(&p.truth.cornea_2d));
                    outcome.led_loss_mm2 = Some(est.led_loss);
                    outcome.refinement_monotone = est.refinement_monotone;

                    let predicted: Vec<Option<Point2>> =
                        est.observation.glints.iter().map(|g| g.uv).collect();
                    let lee = labeled_euclidean_error(&p.truth.glints_2d, &predicted);
                    outcome.lee_px = Some(lee.sum_px);
                    outcome.lee_excluded = Some(lee.excluded);
                    let correct = est
                        .observation
                        .glints
                        .iter()
                        .zip(&p.truth.glints_2d)
                        .filter(|(g, t)| g.present() == t.is_some())
                        .count();
                    outcome.presence_correct = correct as u8;

                    if !p.calibration {
                        match &mapper {
                            Err(reason) => outcome.status = reason.clone(),
                            Ok(mapper) => {
                                let visual = map_gaze(mapper, &est.optical);
                                outcome.ae_arcmin = Some(angular_error_arcmin(
                                    &visual.direction,
                                    &p.truth.visual_axis,
                                ));
                            }
                        }
                    }
                }
            }
            // Presence accuracy pools over frames that survived end to end,
            // matching how saved runs re-aggregate.
            if outcome.status == "ok" {
                presence_correct_total += outcome.presence_correct as u64;
                presence_total += 4;
            }
            frames.push(outcome);
        }
    }

    let metrics = aggregate(config, &frames, presence_correct_total, presence_total);
    Ok(RunOutput { metrics, frames })
}

/// Builds the metrics report from per-frame outcomes (also used by the
/// standalone `report` command to re-aggregate saved runs).
pub fn aggregate(
    config: &AppConfig,
    frames: &[FrameOutcome],
    presence_correct: u64,
    presence_total: u64,
) -> MetricsReport {
    let mut rejected_by_reason: BTreeMap<String, usize> = BTreeMap::new();
    let mut ae = Vec::new();
    let mut cornea3d = Vec::new();
    let mut cornea2d = Vec::new();
    let mut lee_values = Vec::new();
    let mut by_direction: BTreeMap<(u8, u8), Vec<f64>> = BTreeMap::new();
    let mut by_depth: BTreeMap<String, (f64, Vec<f64>)> = BTreeMap::new();
    let mut calibration_frames = 0;
    let mut rejected = 0;

    for f in frames {
        if f.calibration {
            calibration_frames += 1;
        }
        if f.status != "ok" {
            rejected += 1;
            *rejected_by_reason.entry(f.status.clone()).or_default() += 1;
            continue;
        }
        if let Some(v) = f.cornea3d_err_mm {
            cornea3d.push(v);
        }
        if let Some(v) = f.cornea2d_err_px {
            cornea2d.push(v);
        }
        if let Some(v) = f.lee_px {
            lee_values.push(v);
        }
        if let Some(v) = f.ae_arcmin {
            ae.push(v);
            by_direction.entry((f.row, f.col)).or_default().push(v);
            by_depth
                .entry(format!("{}", f.depth_m))
                .or_insert_with(|| (f.depth_m, Vec::new()))
                .1
                .push(v);
        }
    }

    let mut per_direction = Vec::new();
    for row in 0..3u8 {
        for col in 0..3u8 {
            let values = by_direction.get(&(row, col)).cloned().unwrap_or_default();
            let stats = SampleStats::from_values(&values);
            per_direction.push(DirectionStats {
                row,
                col,
                count: values.len(),
                mean_ae_arcmin: stats.map_or(f64::NAN, |s| s.mean),
                std_ae_arcmin: stats.map_or(f64::NAN, |s| s.std),
            });
        }
    }
    let mut per_depth: Vec<DepthStats> = by_depth
        .values()
        .map(|(depth, values)| {
            let stats = SampleStats::from_values(values);
            DepthStats {
                depth_m: *depth,
                count: values.len(),
                mean_ae_arcmin: stats.map_or(f64::NAN, |s| s.mean),
                std_ae_arcmin: stats.map_or(f64::NAN, |s| s.std),
            }
        })
        .collect();
    per_depth.sort_by(|a, b| a.depth_m.partial_cmp(&b.depth_m).expect("finite depths"));

    MetricsReport {
        variant: config.variant_name(),
        config_hash: config_hash(config),
        frames_total: frames.len(),
        calibration_frames,
        evaluated: frames.len() - rejected,
        rejected,
        rejected_by_reason,
        angular_error: SampleStats::from_values(&ae),
        per_direction,
        per_depth,
        lee_mean_px: if lee_values.is_empty() {
            None
        } else {
            Some(lee_values.iter().sum::<f64>() / lee_values.len() as f64)
        },
        presence_accuracy: if presence_total == 0 {
            f64::NAN
        } else {
            presence_correct as f64 / presence_total as f64
        },
        cornea3d_err_mm: SampleStats::from_values(&cornea3d),
        cornea2d_err_px: SampleStats::from_values(&cornea2d),
        histogram: Histogram::collect(
            &ae,
            config.run.histogram_bin_arcmin,
            config.run.histogram_bins,
        ),
    }
}

// ── Report emission ─────────────────────────────────────────────────────

fn write_file(path: &Path, bytes: &[u8]) -> PipelineResult<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })?;
    file.write_all(bytes)
        .map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |v| format!("{v}"))
}

/// Writes the report files for a run: summary (CSV and JSON), per-direction
/// and per-depth tables, histogram bins, per-frame records, and the
/// resolved config echo. Returns the paths written.
pub fn emit_report(
    output: &RunOutput,
    config: &AppConfig,
    dir: &Path,
) -> PipelineResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .map_err(|e| PipelineError::Io { path: dir.to_path_buf(), source: e })?;
    let m = &output.metrics;
    let mut written = Vec::new();

    let summary_csv = dir.join("summary.csv");
    let ae = m.angular_error;
    let csv = format!(
        "variant,config_hash,frames_total,evaluated,rejected,mean_ae_arcmin,std_ae_arcmin,\
         q1_ae_arcmin,q2_ae_arcmin,q3_ae_arcmin,lee_mean_px,presence_accuracy,\
         cornea3d_err_mean_mm\n{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        m.variant,
        m.config_hash,
        m.frames_total,
        m.evaluated,
        m.rejected,
        fmt_opt(ae.map(|s| s.mean)),
        fmt_opt(ae.map(|s| s.std)),
        fmt_opt(ae.map(|s| s.q1)),
        fmt_opt(ae.map(|s| s.q2)),
        fmt_opt(ae.map(|s| s.q3)),
        fmt_opt(m.lee_mean_px),
        m.presence_accuracy,
        fmt_opt(m.cornea3d_err_mm.map(|s| s.mean)),
    );
    write_file(&summary_csv, csv.as_bytes())?;
    written.push(summary_csv);

    let summary_json = dir.join("summary.json");
    let json = serde_json::to_string_pretty(m).expect("metrics serialize");
    write_file(&summary_json, json.as_bytes())?;
    written.push(summary_json);

    let direction_csv = dir.join("per_direction.csv");
    let mut text = String::from("row,col,count,mean_ae_arcmin,std_ae_arcmin\n");
    for d in &m.per_direction {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            d.row, d.col, d.count, d.mean_ae_arcmin, d.std_ae_arcmin
        ));
    }
    write_file(&direction_csv, text.as_bytes())?;
    written.push(direction_csv);

    let depth_csv = dir.join("per_depth.csv");
    let mut text = String::from("depth_m,count,mean_ae_arcmin,std_ae_arcmin\n");
    for d in &m.per_depth {
        text.push_str(&format!(
            "{},{},{},{}\n",
            d.depth_m, d.count, d.mean_ae_arcmin, d.std_ae_arcmin
        ));
    }
    write_file(&depth_csv, text.as_bytes())?;
    written.push(depth_csv);

    let histogram_csv = dir.join("histogram.csv");
    let mut text = String::from("bin_lo_arcmin,bin_hi_arcmin,count\n");
    for (i, count) in m.histogram.counts.iter().enumerate() {
        let lo = i as f64 * m.histogram.bin_width;
        text.push_str(&format!("{},{},{}\n", lo, lo + m.histogram.bin_width, count));
    }
    write_file(&histogram_csv, text.as_bytes())?;
    written.push(histogram_csv);

    let frames_path = dir.join("frames.jsonl");
    let mut buf = Vec::new();
    for frame in &output.frames {
        serde_json::to_writer(&mut buf, frame).expect("frame outcome serializes");
        buf.push(b'\n');
    }
    write_file(&frames_path, &buf)?;
    written.push(frames_path);

    let meta_path = dir.join("run_config.json");
    let meta = serde_json::to_string_pretty(&serde_json::json!({
        "config_hash": config_hash(config),
        "variant": config.variant_name(),
        "config": config,
    }))
    .expect("config serializes");
    write_file(&meta_path, meta.as_bytes())?;
    written.push(meta_path);

    Ok(written)
}

/// Reads per-frame outcome records back from JSON lines.
pub fn read_frame_outcomes<R: std::io::BufRead>(r: R) -> std::io::Result<Vec<FrameOutcome>> {
    let mut frames = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameOutcome = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        frames.push(record);
    }
    Ok(frames)
}

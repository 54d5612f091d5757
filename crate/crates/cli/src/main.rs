//! Command-line runner for the gaze-estimation pipeline: dataset
//! simulation, raster detection, cornea/gaze solving, mapper calibration,
//! full evaluation runs and report re-aggregation.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use glintrack_core::config::{AppConfig, ConfigError};
use glintrack_core::cornea::estimate_cornea;
use glintrack_core::mapper::{
    fit_net_mapper, fit_poly_mapper, lift_pupil_to_3d, map_gaze, mapper_from_json,
    mapper_to_json, optical_axis, CalibrationSet, GazeMapper,
};
use glintrack_core::pipeline::{aggregate, emit_report, read_frame_outcomes, run_pipeline};
use glintrack_core::raster::{detect_frame, render_frame, GrayImage};
use glintrack_core::sim::{
    eye_pose_for_target, generate_protocol_dataset, protocol_targets, sample_subject,
    Dataset, FrameRecord,
};

#[derive(Parser)]
#[command(name = "glintrack", version, about = "Corneal-reflection gaze estimation toolkit")]
struct Cli {
    /// Path to a TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides [noise].seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline variant, SOURCE:CORNEA:MAPPER
    /// (e.g. noisy-oracle:refine-lift:polynomial).
    #[arg(long, global = true)]
    variant: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a protocol dataset as JSON lines (optionally with PGM frames).
    Simulate {
        #[command(flatten)]
        out: OutDir,
        /// Also render one PGM image per frame under <out>/frames/.
        #[arg(long)]
        render: bool,
    },
    /// Detect pupil and labeled glints in PGM frames.
    Detect {
        /// Directory of .pgm frames.
        #[arg(long)]
        frames: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
    /// Solve cornea position and optical axis per frame of a dataset.
    Solve {
        /// Dataset JSON-lines file from `simulate`.
        #[arg(long)]
        input: PathBuf,
        /// Apply a fitted mapper (from `calibrate`) to emit visual axes.
        #[arg(long)]
        mapper: Option<PathBuf>,
        /// Dump refinement traces as CSV (record,step,loss).
        #[arg(long)]
        traces: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Fit a gaze mapper from the calibration frames of a dataset.
    Calibrate {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
    /// Run the full pipeline and write report files.
    Evaluate {
        #[command(flatten)]
        out: OutDir,
        /// Summary format printed to stdout (all files are always written).
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Re-aggregate the report of a finished run directory.
    Report {
        /// Run directory containing frames.jsonl and run_config.json.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        out: OutDir,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

#[derive(Debug)]
enum AppError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<glintrack_core::pipeline::PipelineError> for AppError {
    fn from(e: glintrack_core::pipeline::PipelineError) -> Self {
        match e {
            glintrack_core::pipeline::PipelineError::Config(c) => Self::Config(c.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> AppError {
    AppError::Runtime(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not config errors.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<AppConfig, AppError> {
    let mut config = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.noise.seed = seed;
    }
    if let Some(variant) = &cli.variant {
        config.apply_variant(variant)?;
    }
    Ok(config)
}

fn create_dir(path: &Path) -> Result<(), AppError> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn run(cli: Cli) -> Result<(), AppError> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Simulate { out, render } => simulate(&config, &out.out, *render),
        Command::Detect { frames, out } => detect(&config, frames, &out.out),
        Command::Solve { input, mapper, traces, out } => {
            solve(&config, input, mapper.as_deref(), traces.as_deref(), &out.out)
        }
        Command::Calibrate { input, out } => calibrate(&config, input, &out.out),
        Command::Evaluate { out, format } => evaluate(&config, &out.out, *format),
        Command::Report { input, out, format } => report(input, &out.out, *format),
    }
}

fn simulate(config: &AppConfig, out: &Path, render: bool) -> Result<(), AppError> {
    let camera = config.camera()?;
    let rig = config.rig()?;
    let protocol = config.protocol();
    let noise = config.noise();
    let dataset = generate_protocol_dataset(&protocol, &camera, &rig, &noise)
        .map_err(|e| AppError::Runtime(e.to_string()))?;
    create_dir(out)?;
    let path = out.join("dataset.jsonl");
    let file = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    dataset.write_jsonl(BufWriter::new(file)).map_err(|e| io_err(&path, e))?;
    println!("wrote {} frames to {}", dataset.frames.len(), path.display());

    if render {
        let frames_dir = out.join("frames");
        create_dir(&frames_dir)?;
        let targets = protocol_targets(&protocol);
        let render_config = config.render();
        for record in &dataset.frames {
            let subject = sample_subject(&protocol, noise.seed, record.subject);
            let target_idx = targets
                .iter()
                .position(|t| t == &record.target)
                .expect("record targets come from the protocol");
            let eye = eye_pose_for_target(&targets[target_idx], &subject)
                .map_err(|e| AppError::Runtime(e.to_string()))?;
            let img = render_frame(
                &eye,
                &subject,
                &rig,
                &camera,
                &render_config,
                &record.obs.distractors,
            );
            let name = format!(
                "sub{:03}_tgt{:02}_f{:02}.pgm",
                record.subject, target_idx, record.frame
            );
            let path = frames_dir.join(name);
            let file = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            img.write_pgm(BufWriter::new(file)).map_err(|e| io_err(&path, e))?;
        }
        println!("rendered {} frames to {}", dataset.frames.len(), frames_dir.display());
    }
    Ok(())
}

fn detect(config: &AppConfig, frames: &Path, out: &Path) -> Result<(), AppError> {
    let camera = config.camera()?;
    let rig = config.rig()?;
    let detect_config = config.detect();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(frames)
        .map_err(|e| io_err(frames, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "pgm"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(AppError::Runtime(format!("no .pgm frames in {}", frames.display())));
    }
    create_dir(out)?;
    let path = out.join("observations.jsonl");
    let file = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    let mut writer = BufWriter::new(file);
    let mut detected = 0usize;
    for entry in &entries {
        let file = std::fs::File::open(entry).map_err(|e| io_err(entry, e))?;
        let img = GrayImage::read_pgm(std::io::BufReader::new(file))
            .map_err(|e| AppError::Runtime(format!("{}: {e}", entry.display())))?;
        let record = match detect_frame(&img, &rig, &camera, &detect_config) {
            Ok(obs) => {
                detected += 1;
                serde_json::json!({
                    "file": entry.file_name().map(|n| n.to_string_lossy().into_owned()),
                    "obs": obs,
                })
            }
            Err(e) => serde_json::json!({
                "file": entry.file_name().map(|n| n.to_string_lossy().into_owned()),
                "error": e.to_string(),
            }),
        };
        serde_json::to_writer(&mut writer, &record).map_err(|e| io_err(&path, e.into()))?;
        writer.write_all(b"\n").map_err(|e| io_err(&path, e))?;
    }
    writer.flush().map_err(|e| io_err(&path, e))?;
    println!("detected {detected}/{} frames -> {}", entries.len(), path.display());
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Vec<FrameRecord>, AppError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    Dataset::read_jsonl(std::io::BufReader::new(file)).map_err(|e| io_err(path, e))
}

fn solve(
    config: &AppConfig,
    input: &Path,
    mapper_path: Option<&Path>,
    traces_path: Option<&Path>,
    out: &Path,
) -> Result<(), AppError> {
    let camera = config.camera()?;
    let rig = config.rig()?;
    let lift = config.lift();
    let refinement = config.refinement();
    let mapper: Option<GazeMapper> = match mapper_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            Some(mapper_from_json(&text).map_err(|e| AppError::Config(e.to_string()))?)
        }
        None => None,
    };
    let records = read_dataset(input)?;
    create_dir(out)?;
    let path = out.join("solutions.jsonl");
    let file = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    let mut writer = BufWriter::new(file);
    let mut traces: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut solved = 0usize;
    for (index, record) in records.iter().enumerate() {
        let output = match estimate_cornea(
            &record.obs,
            &rig,
            &camera,
            config.run.cornea,
            &refinement,
            &lift,
        ) {
            Err(e) => serde_json::json!({
                "record": index,
                "subject": record.subject,
                "status": e.to_string(),
            }),
            Ok(estimate) => {
                if traces_path.is_some() && !estimate.refinement_trace.is_empty() {
                    traces.push((index, estimate.refinement_trace.clone()));
                }
                let gaze = record.obs.pupil.uv.and_then(|pupil_uv| {
                    let pupil_3d =
                        lift_pupil_to_3d(pupil_uv, estimate.cornea_3d, &camera, lift.cornea_radius)
                            .ok()?;
                    let axis = optical_axis(estimate.cornea_3d, pupil_3d).ok()?;
                    let visual = mapper.as_ref().map(|m| map_gaze(m, &axis));
                    Some((axis, visual))
                });
                solved += 1;
                serde_json::json!({
                    "record": index,
                    "subject": record.subject,
                    "status": "ok",
                    "cornea": estimate,
                    "optical_axis": gaze.as_ref().map(|(axis, _)| axis),
                    "visual_axis": gaze.as_ref().and_then(|(_, v)| v.as_ref()),
                })
            }
        };
        serde_json::to_writer(&mut writer, &output).map_err(|e| io_err(&path, e.into()))?;
        writer.write_all(b"\n").map_err(|e| io_err(&path, e))?;
    }
    writer.flush().map_err(|e| io_err(&path, e))?;
    if let Some(tp) = traces_path {
        let mut text = String::from("record,step,loss\n");
        for (record, trace) in &traces {
            for (step, loss) in trace.iter().enumerate() {
                text.push_str(&format!("{record},{step},{loss}\n"));
            }
        }
        std::fs::write(tp, text).map_err(|e| io_err(tp, e))?;
    }
    println!("solved {solved}/{} records -> {}", records.len(), path.display());
    Ok(())
}

fn calibrate(config: &AppConfig, input: &Path, out: &Path) -> Result<(), AppError> {
    let camera = config.camera()?;
    let rig = config.rig()?;
    let lift = config.lift();
    let refinement = config.refinement();
    let records = read_dataset(input)?;
    let mut calib = CalibrationSet::default();
    for record in records.iter().filter(|r| r.calibration) {
        let Ok(estimate) = estimate_cornea(
            &record.obs,
            &rig,
            &camera,
            config.run.cornea,
            &refinement,
            &lift,
        ) else {
            continue;
        };
        let Some(pupil_uv) = record.obs.pupil.uv else { continue };
        let Ok(pupil_3d) =
            lift_pupil_to_3d(pupil_uv, estimate.cornea_3d, &camera, lift.cornea_radius)
        else {
            continue;
        };
        let Ok(axis) = optical_axis(estimate.cornea_3d, pupil_3d) else { continue };
        let to_target = record.target.position.to_vec() - estimate.cornea_3d.to_vec();
        let Ok(visual) = glintrack_core::geometry::UnitVec3::new(to_target) else { continue };
        calib.push(axis.direction, visual);
    }
    let mapper = match config.mapper.kind {
        glintrack_core::config::MapperKind::Polynomial => fit_poly_mapper(&calib)
            .map(GazeMapper::Polynomial)
            .map_err(|e| AppError::Runtime(format!("calibration: {e}")))?,
        glintrack_core::config::MapperKind::Network => {
            fit_net_mapper(&calib, &config.net_train())
                .map(GazeMapper::Network)
                .map_err(|e| AppError::Runtime(format!("calibration: {e}")))?
        }
    };
    create_dir(out)?;
    let path = out.join("mapper.json");
    std::fs::write(&path, mapper_to_json(&mapper)).map_err(|e| io_err(&path, e))?;
    println!("fitted mapper from {} pairs -> {}", calib.len(), path.display());
    Ok(())
}

fn print_summary(metrics: &glintrack_core::pipeline::MetricsReport, format: Format) {
    match format {
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(metrics).expect("metrics serialize"));
        }
        Format::Csv => {
            println!("variant,mean_ae_arcmin,std_ae_arcmin,q1_ae_arcmin,q2_ae_arcmin,q3_ae_arcmin,evaluated,rejected");
            let ae = metrics.angular_error;
            let get = |f: fn(&glintrack_core::metrics::SampleStats) -> f64| {
                ae.as_ref().map_or("nan".to_string(), |s| format!("{}", f(s)))
            };
            println!(
                "{},{},{},{},{},{},{},{}",
                metrics.variant,
                get(|s| s.mean),
                get(|s| s.std),
                get(|s| s.q1),
                get(|s| s.q2),
                get(|s| s.q3),
                metrics.evaluated,
                metrics.rejected
            );
        }
    }
}

fn evaluate(config: &AppConfig, out: &Path, format: Format) -> Result<(), AppError> {
    let output = run_pipeline(config)?;
    let written = emit_report(&output, config, out)?;
    print_summary(&output.metrics, format);
    eprintln!("wrote {} report files to {}", written.len(), out.display());
    Ok(())
}

fn report(input: &Path, out: &Path, format: Format) -> Result<(), AppError> {
    let meta_path = input.join("run_config.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: serde_json::Value =
        serde_json::from_str(&meta_text).map_err(|e| AppError::Runtime(e.to_string()))?;
    let config: AppConfig = serde_json::from_value(
        meta.get("config").cloned().ok_or_else(|| {
            AppError::Runtime(format!("{}: missing 'config' field", meta_path.display()))
        })?,
    )
    .map_err(|e| AppError::Config(e.to_string()))?;

    let frames_path = input.join("frames.jsonl");
    let file = std::fs::File::open(&frames_path).map_err(|e| io_err(&frames_path, e))?;
    let frames = read_frame_outcomes(std::io::BufReader::new(file))
        .map_err(|e| io_err(&frames_path, e))?;
    let presence_correct: u64 = frames
        .iter()
        .filter(|f| f.status == "ok")
        .map(|f| f.presence_correct as u64)
        .sum();
    let presence_total = 4 * frames.iter().filter(|f| f.status == "ok").count() as u64;
    let metrics = aggregate(&config, &frames, presence_correct, presence_total);
    let output = glintrack_core::pipeline::RunOutput { metrics, frames };
    emit_report(&output, &config, out)?;
    print_summary(&output.metrics, format);
    Ok(())
}

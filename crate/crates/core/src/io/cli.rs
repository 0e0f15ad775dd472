//! The `linevo` command line.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 IO or file
//! format error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ConfigError, RunConfig};
use super::formats::{self, FormatError, MetricsRow};
use crate::association::{associate_lines, nearest_neighbor_match, Match, MatchSet};
use crate::descriptor::{build_descriptor, FeatureMap, LineDescriptor};
use crate::evaluation::{ate_rmse, bootstrap_mean_ci, mean, median, Trajectory};
use crate::geometry::{Eye, LineSegment2D, Pose};
use crate::optimizer::optimize;
use crate::simulator::{
    generate_scene, render_frame, run_pipeline, synth_feature_maps, window_graph, AmbiguitySuite, EyeObservation,
    MatcherKind, ShortLineSuite, WeightMode, WindowFrame,
};
use crate::weighting::{line_weights, LineTrack, WeightedMatch};

#[derive(Debug, Parser)]
#[command(name = "linevo", version, about = "Point-line stereo odometry experiments on synthetic scenes")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `scene.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "linevo_out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// One pipeline run on the configured scene.
    Single,
    /// Matcher comparison on noisy frame pairs.
    Ambiguity,
    /// Weighting comparison on corridor runs with short fragments.
    ShortLines,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene and write detections, feature maps and ground truth.
    Simulate,
    /// Compute line descriptors for one simulated frame.
    Describe {
        frame: PathBuf,
        /// Feature map directory; defaults to the matching `fmaps/` entry.
        #[arg(long)]
        fmaps: Option<PathBuf>,
    },
    /// Associate the lines of two frames.
    Match {
        frame_a: PathBuf,
        frame_b: PathBuf,
        #[arg(long)]
        fmaps_a: Option<PathBuf>,
        #[arg(long)]
        fmaps_b: Option<PathBuf>,
        /// `ot` or `nn`; overrides `pipeline.matcher`.
        #[arg(long)]
        matcher: Option<String>,
    },
    /// Reliability weights for a match file against frame B's segments.
    Weight {
        matches: PathBuf,
        frame_b: PathBuf,
        /// Keyframes each matched line has been seen in.
        #[arg(long, default_value_t = 2)]
        n_obs: u32,
    },
    /// Bundle adjustment over the first frames of a simulated run.
    Optimize {
        run_dir: PathBuf,
        /// Initial camera-to-world trajectory (TUM); defaults to the ground truth.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// Perturbs every pose but the first by this many rad and meters.
        #[arg(long, default_value_t = 0.0)]
        perturb: f64,
    },
    /// Full odometry pipeline with metrics.
    Run {
        /// `ot` or `nn`; overrides `pipeline.matcher`.
        #[arg(long)]
        matcher: Option<String>,
        /// `adaptive` or `uniform`; overrides `pipeline.weight_mode`.
        #[arg(long)]
        weights: Option<String>,
        /// Adds wall-clock columns to the metrics CSV.
        #[arg(long)]
        timings: bool,
        #[arg(long, value_enum, default_value_t = Suite::Single)]
        suite: Suite,
    },
    /// ATE RMSE of an estimated TUM trajectory against a reference, in cm.
    Evaluate { estimate: PathBuf, reference: PathBuf },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Format(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) | CliError::Format(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Format(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn format_err(path: &Path, e: FormatError) -> CliError {
    CliError::Format(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn parse_with<T>(path: &Path, f: impl FnOnce(&str) -> Result<T, FormatError>) -> Result<T, CliError> {
    f(&read_text(path)?).map_err(|e| format_err(path, e))
}

/// Defaults, then the config file, then `LINEVO_*` variables, then flags.
pub fn resolve_config(
    path: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        let text = read_text(path)?;
        cfg.apply_text(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    cfg.apply_env(env)?;
    if let Some(seed) = seed {
        cfg.scene.seed = seed;
    }
    Ok(cfg)
}

fn frame_name(k: usize) -> String {
    format!("{k:06}")
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve_config(cli.config.as_deref(), std::env::vars(), cli.seed)?;
    if let Command::Match { matcher: Some(m), .. } | Command::Run { matcher: Some(m), .. } = &cli.command {
        cfg.set("pipeline.matcher", m)?;
    }
    if let Command::Run { weights: Some(w), .. } = &cli.command {
        cfg.set("pipeline.weight_mode", w)?;
    }
    cfg.validate()?;
    let out = cli.out.as_path();
    if !matches!(cli.command, Command::Evaluate { .. }) {
        write_file(&out.join("config.txt"), cfg.to_text())?;
    }
    match &cli.command {
        Command::Simulate => simulate(&cfg, out),
        Command::Describe { frame, fmaps } => describe(&cfg, out, frame, fmaps.as_deref()),
        Command::Match {
            frame_a,
            frame_b,
            fmaps_a,
            fmaps_b,
            ..
        } => match_frames(&cfg, out, frame_a, frame_b, fmaps_a.as_deref(), fmaps_b.as_deref()),
        Command::Weight { matches, frame_b, n_obs } => weight(&cfg, out, matches, frame_b, *n_obs),
        Command::Optimize {
            run_dir,
            init,
            frames,
            perturb,
        } => optimize_window(&cfg, out, run_dir, init.as_deref(), *frames, *perturb),
        Command::Run { timings, suite, .. } => {
            metrics_so_far(out, *timings)?;
            match suite {
                Suite::Single => run_single(&cfg, out, *timings),
                Suite::Ambiguity => run_ambiguity(&cfg, out, *timings),
                Suite::ShortLines => run_short_lines(&cfg, out, *timings),
            }
        }
        Command::Evaluate { estimate, reference } => evaluate(estimate, reference),
    }
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scene = generate_scene(&cfg.scene).map_err(|e| CliError::Config(e.to_string()))?;
    let cam = &cfg.pipeline.camera;
    let mut gt = Trajectory::default();
    for (k, pose) in scene.poses.iter().enumerate() {
        gt.push(scene.stamps[k], pose.inverse()).map_err(|e| CliError::Numerical(e.to_string()))?;
        let obs = render_frame(&scene, k, pose, cam, &cfg.noise);
        let dir = out.join("frames").join(frame_name(k));
        write_file(&dir.join("lines.txt"), formats::write_segments(&obs.left.lines))?;
        write_file(&dir.join("keypoints.txt"), formats::write_keypoints(&obs.left.keypoints))?;
        write_file(&dir.join("right_lines.txt"), formats::write_segments(&obs.right.lines))?;
        write_file(&dir.join("right_keypoints.txt"), formats::write_keypoints(&obs.right.keypoints))?;
        let maps = synth_feature_maps(&scene, k, pose, cam, Eye::Left, &cfg.pipeline.features, &cfg.noise)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let fdir = out.join("fmaps").join(frame_name(k));
        write_file(&fdir.join("line.fmap"), formats::write_feature_map(&maps.line))?;
        write_file(&fdir.join("point.fmap"), formats::write_feature_map(&maps.point))?;
    }
    write_file(&out.join("gt_trajectory.txt"), formats::write_tum(&gt))?;
    println!("simulated {} frames into {}", scene.poses.len(), out.display());
    Ok(())
}

/// `<run>/frames/<name>` pairs with `<run>/fmaps/<name>`.
fn default_fmaps(frame: &Path) -> PathBuf {
    let name = frame.file_name().map(PathBuf::from).unwrap_or_default();
    frame
        .parent()
        .and_then(Path::parent)
        .map(|run| run.join("fmaps").join(&name))
        .unwrap_or_else(|| PathBuf::from("fmaps").join(name))
}

fn read_map(path: &Path) -> Result<FeatureMap, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    formats::read_feature_map(&bytes).map_err(|e| format_err(path, e))
}

struct DescribedFrame {
    segs: Vec<LineSegment2D>,
    /// Row of each described segment in the detection file.
    rows: Vec<usize>,
    descs: Vec<LineDescriptor>,
    n_rows: usize,
}

fn describe_dir(cfg: &RunConfig, frame: &Path, fmaps: Option<&Path>) -> Result<DescribedFrame, CliError> {
    let segs = parse_with(&frame.join("lines.txt"), formats::read_segments)?;
    let kps = parse_with(&frame.join("keypoints.txt"), formats::read_keypoints)?;
    let fdir = fmaps.map(Path::to_path_buf).unwrap_or_else(|| default_fmaps(frame));
    let map_line = read_map(&fdir.join("line.fmap"))?;
    let map_pt = read_map(&fdir.join("point.fmap"))?;
    let positions: Vec<_> = kps.iter().map(|k| k.uv).collect();
    let mut described = DescribedFrame {
        segs: Vec::new(),
        rows: Vec::new(),
        descs: Vec::new(),
        n_rows: segs.len(),
    };
    for (row, seg) in segs.iter().enumerate() {
        if let Ok(d) = build_descriptor(&map_line, &map_pt, seg, &positions, &cfg.pipeline.descriptor) {
            described.segs.push(*seg);
            described.rows.push(row);
            described.descs.push(d);
        }
    }
    if described.segs.len() < segs.len() {
        eprintln!("{}: {} segments could not be described", frame.display(), segs.len() - described.segs.len());
    }
    Ok(described)
}

fn describe(cfg: &RunConfig, out: &Path, frame: &Path, fmaps: Option<&Path>) -> Result<(), CliError> {
    let d = describe_dir(cfg, frame, fmaps)?;
    let ids: Vec<u64> = d.segs.iter().map(|s| s.track_id.unwrap_or(0)).collect();
    write_file(&out.join("descriptors.txt"), formats::write_descriptors(&ids, &d.descs))?;
    println!("described {} of {} segments", d.descs.len(), d.n_rows);
    Ok(())
}

fn match_frames(
    cfg: &RunConfig,
    out: &Path,
    frame_a: &Path,
    frame_b: &Path,
    fmaps_a: Option<&Path>,
    fmaps_b: Option<&Path>,
) -> Result<(), CliError> {
    let a = describe_dir(cfg, frame_a, fmaps_a)?;
    let b = describe_dir(cfg, frame_b, fmaps_b)?;
    let local = match cfg.pipeline.matcher {
        MatcherKind::Ot => associate_lines(&a.segs, &b.segs, &a.descs, &b.descs, &cfg.pipeline.ot)
            .map_err(|e| CliError::Numerical(e.to_string()))?,
        MatcherKind::Nn => nearest_neighbor_match(&a.descs, &b.descs),
    };
    if let Some(w) = &local.warning {
        eprintln!("warning: {w:?}");
    }
    // report indices as rows of the detection files
    let pairs: Vec<Match> = local
        .pairs
        .iter()
        .map(|p| Match {
            i: a.rows[p.i],
            j: b.rows[p.j],
            confidence: p.confidence,
        })
        .collect();
    let unmatched = |rows: usize, used: Vec<usize>| (0..rows).filter(|r| !used.contains(r)).collect();
    let ms = MatchSet {
        unmatched_a: unmatched(a.n_rows, pairs.iter().map(|p| p.i).collect()),
        unmatched_b: unmatched(b.n_rows, pairs.iter().map(|p| p.j).collect()),
        pairs,
        warning: local.warning,
    };
    write_file(&out.join("matches.txt"), formats::write_matches(&ms))?;
    println!("{} matches", ms.pairs.len());
    Ok(())
}

fn weight(cfg: &RunConfig, out: &Path, matches: &Path, frame_b: &Path, n_obs: u32) -> Result<(), CliError> {
    let ms = parse_with(matches, formats::read_matches)?;
    let segs = parse_with(&frame_b.join("lines.txt"), formats::read_segments)?;
    let tracks = ms
        .pairs
        .iter()
        .map(|p| {
            let seg = segs.get(p.j).ok_or_else(|| {
                CliError::Format(format!("{}: match row j = {} but frame B has {} segments", matches.display(), p.j, segs.len()))
            })?;
            Ok((
                p.j,
                LineTrack {
                    track_id: seg.track_id.unwrap_or(p.j as u64),
                    n_obs,
                    latest_start: seg.start,
                    latest_end: seg.end,
                },
            ))
        })
        .collect::<Result<_, CliError>>()?;
    let mut ws = line_weights(&ms, &tracks, &cfg.pipeline.weights).map_err(|e| CliError::Numerical(e.to_string()))?;
    if cfg.pipeline.weight_mode == WeightMode::Uniform {
        ws.iter_mut().for_each(|w: &mut WeightedMatch| w.weight = 1.0);
    }
    write_file(&out.join("weights.txt"), formats::write_weights(&ws))?;
    println!("{} weights", ws.len());
    Ok(())
}

fn read_eye(dir: &Path, prefix: &str) -> Result<EyeObservation, CliError> {
    Ok(EyeObservation {
        keypoints: parse_with(&dir.join(format!("{prefix}keypoints.txt")), formats::read_keypoints)?,
        lines: parse_with(&dir.join(format!("{prefix}lines.txt")), formats::read_segments)?,
    })
}

fn optimize_window(
    cfg: &RunConfig,
    out: &Path,
    run_dir: &Path,
    init: Option<&Path>,
    n_frames: usize,
    perturb: f64,
) -> Result<(), CliError> {
    let init_path = init.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("gt_trajectory.txt"));
    let init = parse_with(&init_path, formats::read_tum)?;
    let n = n_frames.min(init.len());
    if n < 2 {
        return Err(CliError::Config("optimize needs at least two frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.scene.seed);
    let mut unit = || {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        v / v.norm().max(1e-12)
    };
    let mut eyes = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    for k in 0..n {
        let dir = run_dir.join("frames").join(frame_name(k));
        eyes.push((read_eye(&dir, "")?, read_eye(&dir, "right_")?));
        let mut cam_to_world = init.poses()[k];
        if k > 0 && perturb > 0.0 {
            let delta = Pose::from_axis_angle(unit() * perturb, unit() * perturb);
            cam_to_world = cam_to_world.compose(&delta);
        }
        poses.push(cam_to_world.inverse());
    }
    let frames: Vec<WindowFrame<'_>> = (0..n)
        .map(|k| WindowFrame {
            pose_id: k as u64,
            pose: poses[k],
            left: &eyes[k].0,
            right: &eyes[k].1,
        })
        .collect();
    let (graph, rejected) = window_graph(&frames, &cfg.pipeline);
    let (solved, report) = optimize(&graph, &cfg.pipeline.solver).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut est = Trajectory::default();
    for k in 0..n {
        let pose = solved.pose(k as u64).expect("window pose");
        est.push(init.stamps()[k], pose.inverse()).map_err(|e| CliError::Numerical(e.to_string()))?;
    }
    write_file(&out.join("trajectory.txt"), formats::write_tum(&est))?;
    let text = format!(
        "iterations {}\ninitial_cost {}\nfinal_cost {}\nconverged {}\nuninitialized_landmarks {rejected}\n",
        report.iterations, report.initial_cost, report.final_cost, report.converged
    );
    write_file(&out.join("optimize_report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Current contents of `metrics.csv`, or a fresh header. Fails when an
/// existing file has other columns.
fn metrics_so_far(out: &Path, with_stages: bool) -> Result<String, CliError> {
    let path = out.join("metrics.csv");
    let header = formats::metrics_header(with_stages);
    if !path.exists() {
        return Ok(format!("{header}\n"));
    }
    let existing = read_text(&path)?;
    let (cols, _) = formats::read_metrics(&existing).map_err(|e| format_err(&path, e))?;
    if cols.join(",") != header {
        return Err(CliError::Format(format!(
            "{}: existing header `{}` differs from `{header}`",
            path.display(),
            cols.join(",")
        )));
    }
    Ok(existing)
}

/// Appends to `metrics.csv`, writing the header for a new file.
fn append_metrics(out: &Path, rows: &[MetricsRow], with_stages: bool) -> Result<(), CliError> {
    let path = out.join("metrics.csv");
    let mut text = metrics_so_far(out, with_stages)?;
    for row in rows {
        text.push_str(&row.to_csv(with_stages));
        text.push('\n');
    }
    write_file(&path, text)
}

fn run_single(cfg: &RunConfig, out: &Path, timings: bool) -> Result<(), CliError> {
    let p = &cfg.pipeline;
    let result = run_pipeline(&cfg.scene, &cfg.noise, p).map_err(|e| CliError::Config(e.to_string()))?;
    let ate = ate_rmse(&result.estimated, &result.ground_truth).map_err(|e| CliError::Numerical(e.to_string()))?;
    let totals = result.match_totals();
    write_file(&out.join("trajectory.txt"), formats::write_tum(&result.estimated))?;
    write_file(&out.join("gt_trajectory.txt"), formats::write_tum(&result.ground_truth))?;
    for log in &result.match_logs {
        let pairs: Vec<Match> = log.pairs.iter().map(|&(i, j, confidence)| Match { i, j, confidence }).collect();
        let free = |n: usize, used: Vec<usize>| (0..n).filter(|k| !used.contains(k)).collect();
        let ms = MatchSet {
            unmatched_a: free(log.ids_a.len(), pairs.iter().map(|p| p.i).collect()),
            unmatched_b: free(log.ids_b.len(), pairs.iter().map(|p| p.j).collect()),
            pairs,
            warning: None,
        };
        let name = format!("{}_{}.txt", frame_name(log.frame_a), frame_name(log.frame_b));
        write_file(&out.join("matches").join(name), formats::write_matches(&ms))?;
    }
    for log in &result.weight_logs {
        let ws: Vec<WeightedMatch> = log
            .entries
            .iter()
            .map(|e| WeightedMatch {
                i: e.i,
                j: e.j,
                confidence: e.confidence,
                weight: e.weight,
            })
            .collect();
        write_file(&out.join("weights").join(format!("{}.txt", frame_name(log.frame))), formats::write_weights(&ws))?;
    }
    let f = &result.failures;
    let report = format!(
        "optimized_windows {}\nconverged_windows {}\ndescriptor_failures {}\npoint_triangulation_failures {}\n\
         line_triangulation_failures {}\nassociation_warnings {}\nassociation_errors {}\nweight_errors {}\n\
         optimizer_errors {}\noptimizer_not_converged {}\n",
        result.optimized_windows,
        result.converged_windows,
        f.descriptor,
        f.point_triangulation,
        f.line_triangulation,
        f.association_warnings,
        f.association_errors,
        f.weight_errors,
        f.optimizer_errors,
        f.optimizer_not_converged
    );
    write_file(&out.join("report.txt"), &report)?;
    let row = MetricsRow {
        run_id: format!("{}_s{}_{}_{}", cfg.scene.trajectory.name(), cfg.scene.seed, p.matcher.name(), p.weight_mode.name()),
        ate_rmse_cm: Some(ate),
        precision: totals.precision(),
        recall: totals.recall(),
        mean_runtime_ms: timings.then(|| result.timings.mean_frame_ms()),
        stages: timings.then_some(result.timings),
    };
    append_metrics(out, &[row], timings)?;
    println!(
        "ate_rmse_cm {ate:.2} precision {:.4} recall {:.4} converged_windows {}/{}",
        totals.precision(),
        totals.recall(),
        result.converged_windows,
        result.optimized_windows
    );
    Ok(())
}

fn run_ambiguity(cfg: &RunConfig, out: &Path, timings: bool) -> Result<(), CliError> {
    let matcher = cfg.pipeline.matcher;
    let suite = AmbiguitySuite::default();
    let clock = std::time::Instant::now();
    let trials = suite
        .run(&cfg.scene, &cfg.noise, &cfg.pipeline, matcher)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let elapsed_ms = clock.elapsed().as_secs_f64() * 1e3;
    let mut csv = String::from("seed,frame_a,frame_b,accepted,correct,possible,precision,recall\n");
    for t in &trials {
        let c = &t.counts;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            t.seed,
            t.frame_a,
            t.frame_b,
            c.accepted,
            c.correct,
            c.possible,
            c.precision(),
            c.recall()
        ));
    }
    write_file(&out.join(format!("ambiguity_{}.csv", matcher.name())), csv)?;
    let precision: Vec<f64> = trials.iter().map(|t| t.counts.precision()).collect();
    let recall: Vec<f64> = trials.iter().map(|t| t.counts.recall()).collect();
    let row = MetricsRow {
        run_id: format!("ambiguity_s{}_{}", cfg.scene.seed, matcher.name()),
        ate_rmse_cm: None,
        precision: mean(&precision),
        recall: mean(&recall),
        mean_runtime_ms: timings.then(|| elapsed_ms / trials.len().max(1) as f64),
        stages: None,
    };
    append_metrics(out, &[row], timings)?;
    let (lo, hi) = bootstrap_mean_ci(&precision, 10_000, 0.05, cfg.scene.seed);
    println!(
        "{} pairs, matcher {}: mean precision {:.4} (95% CI {lo:.4}..{hi:.4}), mean recall {:.4}",
        trials.len(),
        matcher.name(),
        mean(&precision),
        mean(&recall)
    );
    Ok(())
}

fn run_short_lines(cfg: &RunConfig, out: &Path, timings: bool) -> Result<(), CliError> {
    let mode = cfg.pipeline.weight_mode;
    let runs = ShortLineSuite::default()
        .run(&cfg.scene, &cfg.noise, &cfg.pipeline, mode)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let rows: Vec<MetricsRow> = runs
        .iter()
        .map(|r| MetricsRow {
            run_id: format!("short_lines_s{}_{}", r.seed, mode.name()),
            ate_rmse_cm: Some(r.ate_cm),
            precision: r.counts.precision(),
            recall: r.counts.recall(),
            mean_runtime_ms: timings.then_some(r.mean_frame_ms),
            stages: None,
        })
        .collect();
    append_metrics(out, &rows, timings)?;
    let ates: Vec<f64> = runs.iter().map(|r| r.ate_cm).collect();
    println!("{} corridor runs, weights {}: median ate_rmse_cm {:.2}", runs.len(), mode.name(), median(&ates));
    Ok(())
}

fn evaluate(estimate: &Path, reference: &Path) -> Result<(), CliError> {
    let est = parse_with(estimate, formats::read_tum)?;
    let reference = parse_with(reference, formats::read_tum)?;
    let ate = ate_rmse(&est, &reference).map_err(|e| CliError::Numerical(e.to_string()))?;
    println!("{ate:.2}");
    Ok(())
}

//! Command line frontend: scene generation, rendering, localization and the
//! experiment harness.
//!
//! Exit codes: 0 on success, 2 when a localization run returns a failure
//! code, 1 on usage or I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use vtsm_core::geometry::{Pose, StereoRig};
use vtsm_core::harness::{
    load_results, report_tables, run_experiment, step_size_sweep, ExperimentConfig, TrajectoryKind,
};
use vtsm_core::meshmap::{SamplingMask, TexturedMesh};
use vtsm_core::render::{load_intensity_png, save_depth_raw, save_intensity_png};
use vtsm_core::scenegen::{
    bake_map_texture, generate_depot, render_query_pair, ShadingSpec, TerrainSpec,
};
use vtsm_core::vtsm::{localize, multi_seed_localize, StereoQuery, VtsmConfig};

#[derive(Parser)]
#[command(
    name = "vtsm",
    about = "Stereo relocalization against textured mesh maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural depot scene (mesh, texture, mask, rig).
    GenerateScene(GenerateSceneArgs),
    /// Render a stereo pair of a scene from a pose under a lighting spec.
    Render(RenderArgs),
    /// Localize a query stereo pair against a scene map.
    Localize(LocalizeArgs),
    /// Run a configured experiment grid (or a mapping step-size sweep).
    Experiment(ExperimentArgs),
    /// Aggregate persisted trial records into CSV and SVG tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateSceneArgs {
    /// Terrain spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Output scene directory.
    #[arg(long)]
    out: PathBuf,
    /// Bake this lighting spec into the stored texture (mapping-time sun).
    #[arg(long)]
    bake_shading: Option<PathBuf>,
    /// Stereo rig JSON to store with the scene (defaults to the desk rig).
    #[arg(long)]
    rig: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene directory from generate-scene.
    #[arg(long)]
    scene: PathBuf,
    /// Camera pose JSON (world -> camera).
    #[arg(long)]
    pose: PathBuf,
    /// Lighting spec JSON; omit for unshaded rendering.
    #[arg(long)]
    shading: Option<PathBuf>,
    /// Output image directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LocalizeArgs {
    /// Scene directory holding the map (mesh, texture, mask, rig).
    #[arg(long)]
    scene: PathBuf,
    /// Query directory with left.png and right.png.
    #[arg(long)]
    query: PathBuf,
    /// Initial pose guess JSON.
    #[arg(long)]
    guess: PathBuf,
    /// Loop configuration JSON (all fields optional).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output outcome JSON.
    #[arg(long)]
    out: PathBuf,
    /// Evaluate this many wide-uncertainty pose seeds first.
    #[arg(long)]
    seeds: Option<usize>,
    /// Uncertainty radius for --seeds, in meters.
    #[arg(long, default_value_t = 0.5)]
    wide_bound: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Results directory (holds resumable per-trial records).
    #[arg(long)]
    out: PathBuf,
    /// Override worker thread count.
    #[arg(long)]
    jobs: Option<usize>,
    /// Run a mapping step-size sweep with these comma-separated steps (m).
    #[arg(long, value_delimiter = ',')]
    sweep_steps: Option<Vec<f64>>,
    /// Mapping trajectory for the sweep.
    #[arg(long, value_parser = parse_trajectory, default_value = "wave")]
    trajectory: TrajectoryKind,
}

fn parse_trajectory(s: &str) -> Result<TrajectoryKind, String> {
    match s {
        "wave" => Ok(TrajectoryKind::Wave),
        "forward" => Ok(TrajectoryKind::Forward),
        other => Err(format!("unknown trajectory `{other}` (wave|forward)")),
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Results directory written by `experiment`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for cells.csv and trials.svg.
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn default_rig() -> StereoRig {
    StereoRig::new(
        1100.0,
        vtsm_core::geometry::PixelCoord::new(480.0, 640.0),
        0.20,
        960,
        1280,
        0.1,
        50.0,
    )
    .expect("desk rig is valid")
}

fn load_scene(dir: &Path) -> Result<(TexturedMesh, SamplingMask, StereoRig)> {
    let mesh = TexturedMesh::load(&dir.join("mesh.obj"))
        .with_context(|| format!("loading scene mesh from {}", dir.display()))?;
    let mask = SamplingMask::load(&mesh, &dir.join("mask.json"))
        .with_context(|| format!("loading mask from {}", dir.display()))?;
    let rig: StereoRig = read_json(&dir.join("rig.json"))?;
    rig.validate().context("scene rig")?;
    Ok((mesh, mask, rig))
}

fn cmd_generate_scene(args: &GenerateSceneArgs) -> Result<()> {
    let spec: TerrainSpec = read_json(&args.spec)?;
    let (mut mesh, mask) = generate_depot(&spec)?;
    if let Some(shading_path) = &args.bake_shading {
        let shading: ShadingSpec = read_json(shading_path)?;
        mesh = bake_map_texture(&mesh, &shading);
    }
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    mesh.save(&args.out.join("mesh.obj"), "texture.png")?;
    mask.save(&args.out.join("mask.json"))?;
    let rig = match &args.rig {
        Some(path) => read_json(path)?,
        None => default_rig(),
    };
    write_json(&args.out.join("rig.json"), &rig)?;
    write_json(&args.out.join("spec.json"), &spec)?;
    println!(
        "scene `{}`: {} triangles, {} mask triangles -> {}",
        spec.kind.label(),
        mesh.triangles().len(),
        mask.triangle_indices().len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    let (mesh, _, rig) = load_scene(&args.scene)?;
    let pose: Pose = read_json(&args.pose)?;
    let shading: Option<ShadingSpec> = match &args.shading {
        Some(p) => Some(read_json(p)?),
        None => None,
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let (left, right) = match &shading {
        Some(s) => render_query_pair(&mesh, &rig, &pose, s),
        None => (
            vtsm_core::render::render_frame(
                &mesh,
                &pose,
                &rig,
                vtsm_core::geometry::CameraSide::Left,
                None,
            ),
            vtsm_core::render::render_frame(
                &mesh,
                &pose,
                &rig,
                vtsm_core::geometry::CameraSide::Right,
                None,
            ),
        ),
    };
    for (frame, name) in [(&left, "left"), (&right, "right")] {
        save_intensity_png(
            &frame.intensity,
            rig.rows,
            rig.cols,
            &args.out.join(format!("{name}.png")),
        )?;
        save_depth_raw(
            &frame.depth,
            rig.rows,
            rig.cols,
            &args.out.join(format!("{name}_depth.f32")),
        )?;
    }
    println!(
        "rendered {}x{} stereo pair -> {}",
        rig.cols,
        rig.rows,
        args.out.display()
    );
    Ok(())
}

fn cmd_localize(args: &LocalizeArgs) -> Result<bool> {
    let (mesh, mask, rig) = load_scene(&args.scene)?;
    let guess: Pose = read_json(&args.guess)?;
    let config: VtsmConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => VtsmConfig::default(),
    };
    let (left, lr, lc) = load_intensity_png(&args.query.join("left.png"))?;
    let (right, rr, rc) = load_intensity_png(&args.query.join("right.png"))?;
    anyhow::ensure!(
        lr == rr && lc == rc,
        "left and right query sizes differ ({lr}x{lc} vs {rr}x{rc})"
    );
    let query = StereoQuery {
        left: &left,
        right: &right,
        rows: lr,
        cols: lc,
    };
    let outcome = match args.seeds {
        Some(seeds) => multi_seed_localize(
            &query,
            &mesh,
            &mask,
            &rig,
            &guess,
            args.wide_bound,
            seeds,
            &config,
        )?,
        None => localize(&query, &mesh, &mask, &rig, &guess, &config)?,
    };
    write_json(&args.out, &outcome)?;
    match &outcome.status {
        vtsm_core::vtsm::LocalizeStatus::Success { converged_early } => {
            println!(
                "localized in {} rounds ({} attempts{}) -> {}",
                outcome.trace.len(),
                outcome.template_attempts,
                if *converged_early {
                    ", converged early"
                } else {
                    ""
                },
                args.out.display()
            );
            Ok(true)
        }
        vtsm_core::vtsm::LocalizeStatus::Failure { code } => {
            println!("localization failed: {code:?} -> {}", args.out.display());
            Ok(false)
        }
    }
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let mut config: ExperimentConfig = read_json(&args.config)?;
    if let Some(jobs) = args.jobs {
        config.jobs = jobs;
    }
    match &args.sweep_steps {
        Some(steps) => {
            let results = step_size_sweep(&config, args.trajectory, steps, &args.out)?;
            write_json(&args.out.join("sweep.json"), &results)?;
            for step in &results {
                for cell in &step.cells {
                    println!(
                        "step {:.2} m (range {:.2} m) {} {}: success {:.0}%, final {:.1} mm",
                        step.step_m,
                        step.range_m,
                        cell.scene,
                        cell.shading,
                        cell.success_rate * 100.0,
                        cell.mean_final_error_mm
                    );
                }
            }
        }
        None => {
            let cells = run_experiment(&config, &args.out)?;
            write_json(&args.out.join("cells.json"), &cells)?;
            for cell in &cells {
                println!(
                    "{} {}: success {:.0}% ({}/{}), init {:.1} mm, final {:.1} mm (median {:.1})",
                    cell.scene,
                    cell.shading,
                    cell.success_rate * 100.0,
                    cell.successes,
                    cell.trials,
                    cell.mean_init_error_mm,
                    cell.mean_final_error_mm,
                    cell.median_final_error_mm
                );
            }
        }
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let cells = load_results(&args.input)?;
    anyhow::ensure!(
        !cells.is_empty(),
        "no trial records in {}",
        args.input.display()
    );
    report_tables(&cells, &args.out)?;
    println!(
        "wrote {} and {}",
        args.out.join("cells.csv").display(),
        args.out.join("trials.svg").display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1; clap's help/version output exits 0.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::GenerateScene(args) => cmd_generate_scene(args).map(|()| true),
        Command::Render(args) => cmd_render(args).map(|()| true),
        Command::Localize(args) => cmd_localize(args),
        Command::Experiment(args) => cmd_experiment(args).map(|()| true),
        Command::Report(args) => cmd_report(args).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

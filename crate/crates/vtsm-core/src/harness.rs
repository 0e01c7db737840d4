//! Experiment runner: lighting-difference grids over procedural scenes,
//! wide-uncertainty recovery studies, and mapping-step-size sweeps, with
//! per-trial records on disk (runs are resumable) and CSV/SVG reports that
//! are pure folds of those records.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{compose, pose_error, sample_unit_vector, Pose, StereoRig};
use crate::scenegen::{
    bake_map_texture, generate_depot, render_query_pair, SceneError, ShadingSpec, TerrainSpec,
};
use crate::vtsm::{localize, multi_seed_localize, FailureCode, StereoQuery, VtsmConfig, VtsmError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Vtsm(#[from] VtsmError),
    #[error("json error on {path}: {message}")]
    Json { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Camera viewpoint set for queries or mapping coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ViewpointSet {
    /// Poses on a circle of `radius_m` at `height_m`, all looking at the
    /// world origin.
    Ring {
        radius_m: f64,
        height_m: f64,
        count: usize,
        start_deg: f64,
    },
    /// Poses on an x-y grid at `height_m`, looking at the origin.
    Grid {
        x_range_m: [f64; 2],
        y_range_m: [f64; 2],
        nx: usize,
        ny: usize,
        height_m: f64,
    },
}

impl ViewpointSet {
    pub fn poses(&self) -> Vec<Pose> {
        match *self {
            ViewpointSet::Ring {
                radius_m,
                height_m,
                count,
                start_deg,
            } => (0..count)
                .map(|i| {
                    let a = (start_deg + 360.0 * i as f64 / count as f64).to_radians();
                    Pose::look_at(
                        Vector3::new(radius_m * a.cos(), radius_m * a.sin(), height_m),
                        Vector3::zeros(),
                        "world",
                        "camera",
                    )
                    .expect("ring viewpoint")
                })
                .collect(),
            ViewpointSet::Grid {
                x_range_m,
                y_range_m,
                nx,
                ny,
                height_m,
            } => {
                let mut poses = Vec::with_capacity(nx * ny);
                for j in 0..ny {
                    for i in 0..nx {
                        let fx = if nx > 1 {
                            i as f64 / (nx - 1) as f64
                        } else {
                            0.5
                        };
                        let fy = if ny > 1 {
                            j as f64 / (ny - 1) as f64
                        } else {
                            0.5
                        };
                        let x = x_range_m[0] + (x_range_m[1] - x_range_m[0]) * fx;
                        let y = y_range_m[0] + (y_range_m[1] - y_range_m[0]) * fy;
                        poses.push(
                            Pose::look_at(
                                Vector3::new(x, y, height_m),
                                Vector3::zeros(),
                                "world",
                                "camera",
                            )
                            .expect("grid viewpoint"),
                        );
                    }
                }
                poses
            }
        }
    }
}

/// A query lighting condition with a label for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledShading {
    pub label: String,
    pub shading: ShadingSpec,
}

/// Multi-seed settings for wide-uncertainty cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedSettings {
    pub wide_bound_m: f64,
    pub seeds: usize,
}

/// Full experiment description; serializable so a run is reproducible from
/// its config file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenes: Vec<TerrainSpec>,
    pub mapping_shading: ShadingSpec,
    pub query_shadings: Vec<LabeledShading>,
    pub query_viewpoints: ViewpointSet,
    /// Where the mapping rover imaged from; used for the distance/angle
    /// report axes and the step-size sweep.
    pub mapping_viewpoints: ViewpointSet,
    /// Initial-guess translation perturbation range (meters).
    pub guess_translation_m: [f64; 2],
    /// Initial-guess rotation perturbation upper bound (degrees).
    pub guess_rotation_deg: f64,
    pub trials_per_cell: usize,
    pub rig: StereoRig,
    pub vtsm: VtsmConfig,
    /// Run each trial through the multi-seed mode instead of plain localize.
    pub multi_seed: Option<MultiSeedSettings>,
    pub seed: u64,
    /// Worker threads for the trial queue.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    1
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.trials_per_cell == 0 {
            return Err(HarnessError::Config("trials_per_cell must be >= 1".into()));
        }
        if self.scenes.is_empty() || self.query_shadings.is_empty() {
            return Err(HarnessError::Config("need scenes and shadings".into()));
        }
        if self.guess_translation_m[0] < 0.0
            || self.guess_translation_m[1] < self.guess_translation_m[0]
        {
            return Err(HarnessError::Config("bad guess translation range".into()));
        }
        self.vtsm.validate()?;
        Ok(())
    }
}

/// Everything one trial produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub scene: String,
    pub shading: String,
    pub trial: usize,
    pub seed: u64,
    pub viewpoint_index: usize,
    pub success: bool,
    pub converged_early: bool,
    pub failure_code: Option<FailureCode>,
    pub init_error_mm: f64,
    pub final_error_mm: f64,
    pub init_rotation_deg: f64,
    pub final_rotation_deg: f64,
    pub distance_to_mapping_m: f64,
    pub angle_to_mapping_deg: f64,
    pub template_attempts: usize,
    /// Wall-clock seconds; excluded from serialization so repeated runs
    /// produce byte-identical record files and summaries.
    #[serde(skip, default)]
    pub runtime_s: f64,
}

/// Aggregates for one (scene, shading) cell; a pure fold of its records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub scene: String,
    pub shading: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Means over successful trials, to match how end errors are quoted.
    pub mean_init_error_mm: f64,
    pub mean_final_error_mm: f64,
    pub median_final_error_mm: f64,
    pub records: Vec<TrialRecord>,
}

impl CellResult {
    pub fn from_records(scene: &str, shading: &str, mut records: Vec<TrialRecord>) -> Self {
        records.sort_by_key(|r| r.trial);
        let trials = records.len();
        let ok: Vec<&TrialRecord> = records.iter().filter(|r| r.success).collect();
        let successes = ok.len();
        let mean = |f: &dyn Fn(&TrialRecord) -> f64| -> f64 {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
            }
        };
        let mut finals: Vec<f64> = ok.iter().map(|r| r.final_error_mm).collect();
        finals.sort_by(f64::total_cmp);
        let median = if finals.is_empty() {
            f64::NAN
        } else if finals.len() % 2 == 1 {
            finals[finals.len() / 2]
        } else {
            0.5 * (finals[finals.len() / 2 - 1] + finals[finals.len() / 2])
        };
        CellResult {
            scene: scene.to_owned(),
            shading: shading.to_owned(),
            trials,
            successes,
            success_rate: successes as f64 / trials.max(1) as f64,
            mean_init_error_mm: mean(&|r| r.init_error_mm),
            mean_final_error_mm: mean(&|r| r.final_error_mm),
            median_final_error_mm: median,
            records,
        }
    }
}

fn split_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ a.wrapping_mul(0x9e3779b97f4a7c15) ^ b.wrapping_mul(0xd1b54a32d192ed03);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// Draws the perturbed initial guess for a trial: translation magnitude
/// uniform in the configured range, direction uniform on the sphere,
/// rotation angle uniform in [0, max].
pub fn perturb_guess(truth: &Pose, range_m: [f64; 2], max_rot_deg: f64, seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = sample_unit_vector(&mut rng);
    let magnitude = rng.gen_range(range_m[0]..=range_m[1]);
    let axis = sample_unit_vector(&mut rng);
    let angle = rng.gen_range(0.0..=max_rot_deg.to_radians());
    // Composed on the world side so the measured error of the guess equals
    // the drawn magnitudes exactly.
    let d = Pose::from_axis_angle(
        axis,
        angle,
        direction * magnitude,
        truth.from_frame(),
        truth.from_frame(),
    );
    compose(&d, truth).expect("frame-preserving guess perturbation")
}

#[cfg(not(target_arch = "wasm32"))]
fn clock_seconds() -> f64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[cfg(target_arch = "wasm32")]
fn clock_seconds() -> f64 {
    0.0
}

struct PreparedScene {
    label: String,
    query_mesh: crate::meshmap::TexturedMesh,
    map_mesh: crate::meshmap::TexturedMesh,
    mask: crate::meshmap::SamplingMask,
}

fn trial_path(out_dir: &Path, scene: &str, shading: &str, trial: usize) -> PathBuf {
    out_dir
        .join("trials")
        .join(format!("{scene}_{shading}_t{trial:03}.json"))
}

/// Runs every (scene, shading, trial) cell of the experiment. Existing trial
/// records in `out_dir/trials/` are reused, so interrupted runs resume.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<Vec<CellResult>, HarnessError> {
    config.validate()?;
    fs::create_dir_all(out_dir.join("trials")).map_err(io_err(out_dir))?;

    // Scenes are shared across cells; build them up front.
    let mut scenes = Vec::new();
    for spec in &config.scenes {
        let (query_mesh, mask) = generate_depot(spec)?;
        let map_mesh = bake_map_texture(&query_mesh, &config.mapping_shading);
        scenes.push(PreparedScene {
            label: spec.kind.label().to_owned(),
            query_mesh,
            map_mesh,
            mask,
        });
    }
    let query_poses = config.query_viewpoints.poses();
    let mapping_poses = config.mapping_viewpoints.poses();

    // Flat job list over (scene, shading, trial).
    struct Job {
        scene_idx: usize,
        shading_idx: usize,
        trial: usize,
    }
    let mut jobs = Vec::new();
    for scene_idx in 0..scenes.len() {
        for shading_idx in 0..config.query_shadings.len() {
            for trial in 0..config.trials_per_cell {
                jobs.push(Job {
                    scene_idx,
                    shading_idx,
                    trial,
                });
            }
        }
    }

    let run_trial = |job: &Job| -> Result<TrialRecord, HarnessError> {
        let scene = &scenes[job.scene_idx];
        let labeled = &config.query_shadings[job.shading_idx];
        let path = trial_path(out_dir, &scene.label, &labeled.label, job.trial);
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(record) = serde_json::from_str::<TrialRecord>(&text) {
                return Ok(record);
            }
        }
        let cell_key = (job.scene_idx * 101 + job.shading_idx) as u64;
        let trial_seed = split_seed(config.seed, cell_key, job.trial as u64);
        let viewpoint_index = job.trial % query_poses.len();
        let truth = &query_poses[viewpoint_index];
        let started = clock_seconds();

        let (left, right) =
            render_query_pair(&scene.query_mesh, &config.rig, truth, &labeled.shading);
        let query = StereoQuery::from_frames(&left, &right);
        let guess = perturb_guess(
            truth,
            config.guess_translation_m,
            config.guess_rotation_deg,
            split_seed(trial_seed, 1, 0),
        );
        let (init_err, init_rot) = pose_error(truth, &guess).expect("same frames");

        let mut vtsm = config.vtsm.clone();
        vtsm.seed = split_seed(trial_seed, 2, 0);
        let outcome = match config.multi_seed {
            Some(ms) => multi_seed_localize(
                &query,
                &scene.map_mesh,
                &scene.mask,
                &config.rig,
                &guess,
                ms.wide_bound_m,
                ms.seeds,
                &vtsm,
            )?,
            None => localize(
                &query,
                &scene.map_mesh,
                &scene.mask,
                &config.rig,
                &guess,
                &vtsm,
            )?,
        };
        let (final_err, final_rot) = pose_error(truth, &outcome.final_pose).expect("same frames");

        // Distance and angle to the nearest mapping viewpoint.
        let truth_center = truth.center();
        let mut best_d = f64::INFINITY;
        let mut best_angle = 0.0;
        for m in &mapping_poses {
            let d = (m.center() - truth_center).norm();
            if d < best_d {
                best_d = d;
                let rel = m.rotation().transpose() * truth.rotation();
                best_angle = crate::geometry::rotation_angle_of(&rel).to_degrees();
            }
        }

        let record = TrialRecord {
            scene: scene.label.clone(),
            shading: labeled.label.clone(),
            trial: job.trial,
            seed: vtsm.seed,
            viewpoint_index,
            success: outcome.is_success(),
            converged_early: matches!(
                outcome.status,
                crate::vtsm::LocalizeStatus::Success {
                    converged_early: true
                }
            ),
            failure_code: match outcome.status {
                crate::vtsm::LocalizeStatus::Failure { code } => Some(code),
                _ => None,
            },
            init_error_mm: init_err * 1000.0,
            final_error_mm: final_err * 1000.0,
            init_rotation_deg: init_rot,
            final_rotation_deg: final_rot,
            distance_to_mapping_m: best_d,
            angle_to_mapping_deg: best_angle,
            template_attempts: outcome.template_attempts,
            runtime_s: clock_seconds() - started,
        };
        let text = serde_json::to_string_pretty(&record).expect("record serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(record)
    };

    let workers = config.jobs.max(1).min(jobs.len().max(1));
    let mut results: Vec<Option<Result<TrialRecord, HarnessError>>> =
        (0..jobs.len()).map(|_| None).collect();
    if workers <= 1 {
        for (i, job) in jobs.iter().enumerate() {
            results[i] = Some(run_trial(job));
        }
    } else {
        let next = AtomicUsize::new(0);
        let slots = Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let r = run_trial(&jobs[i]);
                    slots.lock().expect("result slots")[i] = Some(r);
                });
            }
        });
    }

    // Group records into cells in configuration order.
    let mut cells = Vec::new();
    let mut it = results.into_iter();
    for scene in &scenes {
        for labeled in &config.query_shadings {
            let mut records = Vec::with_capacity(config.trials_per_cell);
            for _ in 0..config.trials_per_cell {
                records.push(it.next().expect("job per trial").expect("slot filled")?);
            }
            cells.push(CellResult::from_records(
                &scene.label,
                &labeled.label,
                records,
            ));
        }
    }
    Ok(cells)
}

/// Re-aggregates cells from the records persisted in `results_dir/trials/`.
pub fn load_results(results_dir: &Path) -> Result<Vec<CellResult>, HarnessError> {
    let trials = results_dir.join("trials");
    let mut by_cell: std::collections::BTreeMap<(String, String), Vec<TrialRecord>> =
        std::collections::BTreeMap::new();
    let entries = fs::read_dir(&trials).map_err(io_err(&trials))?;
    for entry in entries {
        let entry = entry.map_err(io_err(&trials))?;
        let path = entry.path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let record: TrialRecord = serde_json::from_str(&text).map_err(|e| HarnessError::Json {
            path: path.clone(),
            message: e.to_string(),
        })?;
        by_cell
            .entry((record.scene.clone(), record.shading.clone()))
            .or_default()
            .push(record);
    }
    Ok(by_cell
        .into_iter()
        .map(|((scene, shading), records)| CellResult::from_records(&scene, &shading, records))
        .collect())
}

/// Writes `cells.csv` (one row per cell) and `trials.svg` (one point per
/// trial, distance/angle to the nearest mapping viewpoint, colored by final
/// error; failures drawn as gray crosses).
pub fn report_tables(results: &[CellResult], out_dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join("cells.csv");
    let mut csv = String::from(
        "scene,shading,trials,successes,success_rate,mean_init_mm,mean_final_mm,median_final_mm\n",
    );
    for cell in results {
        csv.push_str(&format!(
            "{},{},{},{},{:.4},{:.3},{:.3},{:.3}\n",
            cell.scene,
            cell.shading,
            cell.trials,
            cell.successes,
            cell.success_rate,
            cell.mean_init_error_mm,
            cell.mean_final_error_mm,
            cell.median_final_error_mm
        ));
    }
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;

    let svg_path = out_dir.join("trials.svg");
    fs::write(&svg_path, scatter_svg(results)).map_err(io_err(&svg_path))
}

fn error_color(error_mm: f64, cap_mm: f64) -> String {
    let t = (error_mm / cap_mm).clamp(0.0, 1.0);
    let r = (255.0 * t).round() as u8;
    let g = (200.0 * (1.0 - t)).round() as u8;
    format!("rgb({r},{g},60)")
}

/// Scatter of (distance to nearest mapping viewpoint, angular difference),
/// one mark per trial.
fn scatter_svg(results: &[CellResult]) -> String {
    let (w, h, ml, mb) = (640.0, 480.0, 60.0, 50.0);
    let records: Vec<&TrialRecord> = results.iter().flat_map(|c| c.records.iter()).collect();
    let max_d = records
        .iter()
        .map(|r| r.distance_to_mapping_m)
        .fold(0.1f64, f64::max);
    let max_a = records
        .iter()
        .map(|r| r.angle_to_mapping_deg)
        .fold(1.0f64, f64::max);
    let cap = 150.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{ml}\" y1=\"{y0}\" x2=\"{w2}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{y0}\" x2=\"{ml}\" y2=\"10\" stroke=\"black\"/>\n\
         <text x=\"{xc}\" y=\"{ylab}\" font-size=\"14\" text-anchor=\"middle\">distance to nearest mapping viewpoint [m]</text>\n\
         <text x=\"16\" y=\"{yc}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 16 {yc})\">angular difference [deg]</text>\n",
        y0 = h - mb,
        w2 = w - 10.0,
        xc = ml + (w - ml - 10.0) / 2.0,
        ylab = h - 12.0,
        yc = (h - mb) / 2.0,
    );
    for r in records {
        let x = ml + (w - ml - 10.0) * (r.distance_to_mapping_m / max_d);
        let y = (h - mb) - (h - mb - 10.0) * (r.angle_to_mapping_deg / max_a);
        if r.success {
            svg.push_str(&format!(
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"{}\"><title>{} {} t{}: {:.1} mm</title></circle>\n",
                error_color(r.final_error_mm, cap),
                r.scene,
                r.shading,
                r.trial,
                r.final_error_mm
            ));
        } else {
            svg.push_str(&format!(
                "<g stroke=\"gray\" stroke-width=\"2\"><line x1=\"{a:.2}\" y1=\"{b:.2}\" x2=\"{c:.2}\" y2=\"{d:.2}\"/><line x1=\"{a:.2}\" y1=\"{d:.2}\" x2=\"{c:.2}\" y2=\"{b:.2}\"/><title>{} {} t{}</title></g>\n",
                r.scene,
                r.shading,
                r.trial,
                a = x - 4.0,
                b = y - 4.0,
                c = x + 4.0,
                d = y + 4.0,
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Mapping trajectory shapes for the step-size study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    /// Weaving path across the scene.
    Wave,
    /// Straight drive-by.
    Forward,
}

/// One step size's aggregate in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub step_m: f64,
    /// Maximum distance from a query viewpoint to its nearest mapping
    /// viewpoint.
    pub range_m: f64,
    pub cells: Vec<CellResult>,
}

/// Mapping viewpoints along a trajectory, one every `step_m` meters.
pub fn trajectory_viewpoints(
    kind: TrajectoryKind,
    extent_m: [f64; 2],
    height_m: f64,
    step_m: f64,
) -> Vec<Pose> {
    let length = extent_m[0] * 0.8;
    let count = ((length / step_m).floor() as usize) + 1;
    (0..count)
        .map(|i| {
            let s = i as f64 * step_m;
            let x = -length / 2.0 + s;
            let y = match kind {
                TrajectoryKind::Wave => {
                    0.25 * extent_m[1] * (s * std::f64::consts::TAU / extent_m[0]).sin()
                }
                TrajectoryKind::Forward => -0.25 * extent_m[1],
            };
            let target = match kind {
                // Wave: look at the scene center; forward: look ahead.
                TrajectoryKind::Wave => Vector3::zeros(),
                TrajectoryKind::Forward => Vector3::new(x + 1.0, -0.25 * extent_m[1], 0.0),
            };
            Pose::look_at(Vector3::new(x, y, height_m), target, "world", "camera")
                .expect("trajectory viewpoint")
        })
        .collect()
}

/// Re-runs the experiment once per step size, degrading the map mesh and
/// texture resolution by the step ratio (mapping sparser means a coarser
/// reconstruction) and sub-sampling the mapping trajectory. Reports range
/// and per-cell errors per step.
pub fn step_size_sweep(
    config: &ExperimentConfig,
    kind: TrajectoryKind,
    step_sizes_m: &[f64],
    out_dir: &Path,
) -> Result<Vec<StepResult>, HarnessError> {
    if step_sizes_m.is_empty() {
        return Err(HarnessError::Config("need at least one step size".into()));
    }
    let base = step_sizes_m.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut out = Vec::new();
    for &step in step_sizes_m {
        let factor = (step / base).round().max(1.0) as usize;
        let mut sub = config.clone();
        for spec in &mut sub.scenes {
            spec.grid = [
                (spec.grid[0] / factor).max(16),
                (spec.grid[1] / factor).max(16),
            ];
            spec.texture_resolution = (spec.texture_resolution / factor).max(64);
        }
        // The degraded map only affects the map side; queries render from
        // the full-fidelity scene. run_experiment regenerates both from the
        // spec, so keep the query scene pristine by overriding inside.
        let step_dir = out_dir.join(format!("step_{:.2}", step));
        let cells = run_step_experiment(config, &sub, kind, step, &step_dir)?;
        let mapping = trajectory_viewpoints(kind, config.scenes[0].extent_m, 1.7, step);
        let range = config
            .query_viewpoints
            .poses()
            .iter()
            .map(|q| {
                mapping
                    .iter()
                    .map(|m| (m.center() - q.center()).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0f64, f64::max);
        out.push(StepResult {
            step_m: step,
            range_m: range,
            cells,
        });
    }
    // Sweep summary CSV.
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let path = out_dir.join("sweep.csv");
    let mut csv = String::from("step_m,range_m,scene,shading,success_rate,mean_final_mm\n");
    for s in &out {
        for c in &s.cells {
            csv.push_str(&format!(
                "{:.2},{:.2},{},{},{:.4},{:.3}\n",
                s.step_m, s.range_m, c.scene, c.shading, c.success_rate, c.mean_final_error_mm
            ));
        }
    }
    fs::write(&path, csv).map_err(io_err(&path))?;
    Ok(out)
}

/// Like `run_experiment` but with a degraded map built from `map_config`
/// while queries render from the full-fidelity scene in `config`.
fn run_step_experiment(
    config: &ExperimentConfig,
    map_config: &ExperimentConfig,
    _kind: TrajectoryKind,
    step: f64,
    out_dir: &Path,
) -> Result<Vec<CellResult>, HarnessError> {
    config.validate()?;
    fs::create_dir_all(out_dir.join("trials")).map_err(io_err(out_dir))?;
    let mut cells = Vec::new();
    for (scene_idx, (spec, map_spec)) in config.scenes.iter().zip(&map_config.scenes).enumerate() {
        let (query_mesh, _) = generate_depot(spec)?;
        let (degraded_mesh, degraded_mask) = generate_depot(map_spec)?;
        let map_mesh = bake_map_texture(&degraded_mesh, &config.mapping_shading);
        let query_poses = config.query_viewpoints.poses();
        for (shading_idx, labeled) in config.query_shadings.iter().enumerate() {
            let mut records = Vec::new();
            for trial in 0..config.trials_per_cell {
                let label = format!("{}_s{:.2}", spec.kind.label(), step);
                let path = trial_path(out_dir, &label, &labeled.label, trial);
                if let Ok(text) = fs::read_to_string(&path) {
                    if let Ok(record) = serde_json::from_str::<TrialRecord>(&text) {
                        records.push(record);
                        continue;
                    }
                }
                let cell_key = (scene_idx * 101 + shading_idx) as u64 + (step * 1000.0) as u64;
                let trial_seed = split_seed(config.seed, cell_key, trial as u64);
                let viewpoint_index = trial % query_poses.len();
                let truth = &query_poses[viewpoint_index];
                let started = clock_seconds();
                let (left, right) =
                    render_query_pair(&query_mesh, &config.rig, truth, &labeled.shading);
                let query = StereoQuery::from_frames(&left, &right);
                let guess = perturb_guess(
                    truth,
                    config.guess_translation_m,
                    config.guess_rotation_deg,
                    split_seed(trial_seed, 1, 0),
                );
                let (init_err, init_rot) = pose_error(truth, &guess).expect("same frames");
                let mut vtsm = config.vtsm.clone();
                vtsm.seed = split_seed(trial_seed, 2, 0);
                let outcome = localize(
                    &query,
                    &map_mesh,
                    &degraded_mask,
                    &config.rig,
                    &guess,
                    &vtsm,
                )?;
                let (final_err, final_rot) =
                    pose_error(truth, &outcome.final_pose).expect("same frames");
                let record = TrialRecord {
                    scene: label.clone(),
                    shading: labeled.label.clone(),
                    trial,
                    seed: vtsm.seed,
                    viewpoint_index,
                    success: outcome.is_success(),
                    converged_early: matches!(
                        outcome.status,
                        crate::vtsm::LocalizeStatus::Success {
                            converged_early: true
                        }
                    ),
                    failure_code: match outcome.status {
                        crate::vtsm::LocalizeStatus::Failure { code } => Some(code),
                        _ => None,
                    },
                    init_error_mm: init_err * 1000.0,
                    final_error_mm: final_err * 1000.0,
                    init_rotation_deg: init_rot,
                    final_rotation_deg: final_rot,
                    distance_to_mapping_m: 0.0,
                    angle_to_mapping_deg: 0.0,
                    template_attempts: outcome.template_attempts,
                    runtime_s: clock_seconds() - started,
                };
                let text = serde_json::to_string_pretty(&record).expect("record serializes");
                fs::write(&path, text).map_err(io_err(&path))?;
                records.push(record);
            }
            cells.push(CellResult::from_records(
                &format!("{}_s{:.2}", spec.kind.label(), step),
                &labeled.label,
                records,
            ));
        }
    }
    Ok(cells)
}

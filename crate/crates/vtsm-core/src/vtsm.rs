//! The iterative localization loop: randomized virtual viewpoints, template
//! synthesis and matching, correspondence accumulation, robust pose update,
//! and the search strategies (stall, reseed, anneal, distribute, reuse) plus
//! the multi-seed wide-uncertainty mode.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    compose, sample_perturbation, sample_unit_vector, Pose, SearchBounds, StereoRig,
};
use crate::matcher::{default_modalities, match_stereo, ImageView, MatchModality, MatcherParams};
use crate::meshmap::{sample_visible_point, MeshError, SamplingMask, TexturedMesh};
use crate::posesolve::{ransac_align, stereo_triangulate, Correspondence, SolverParams};
use crate::render::{synthesize_template, ValidityParams};

#[derive(Debug, Error)]
pub enum VtsmError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("query frame size {got_rows}x{got_cols} does not match rig {rows}x{cols}")]
    FrameSizeMismatch {
        got_rows: usize,
        got_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// Tuning knobs of the localization loop. Everything is serializable so a
/// run is fully described by (config, inputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VtsmConfig {
    /// Correspondences collected per iteration.
    pub target_correspondences: usize,
    /// Maximum successful pose updates.
    pub max_iterations: usize,
    /// Initial viewpoint randomization bounds.
    pub initial_bounds: SearchBounds,
    /// Bound decay per successful iteration (0 = stop randomizing,
    /// 1 = keep constant).
    pub anneal_factor: f64,
    /// Template side in pixels (power of two).
    pub template_side: usize,
    /// Epipolar gate on |u_L - u_R| in pixels.
    pub epipolar_threshold_px: f64,
    /// Pose-update translation delta below which the loop stops early.
    pub convergence_threshold_m: f64,
    /// Fraction of the previous iteration's inliers carried over.
    pub reuse_fraction: f64,
    /// Consecutive stalls allowed before giving up.
    pub stall_limit: usize,
    /// Consecutive reseeds allowed before giving up.
    pub reseed_limit: usize,
    /// Perturbation bounds applied by a reseed.
    pub reseed_bounds: SearchBounds,
    /// Spread viewpoint randomization over the best recent hypotheses.
    pub distribute: bool,
    /// Template attempts allowed per collection round, as a multiple of the
    /// correspondence target.
    pub attempt_budget_multiplier: usize,
    /// RNG seed; fixed seed means bit-identical outcomes.
    pub seed: u64,
    /// Modality order; empty means the default for `template_side`.
    pub modalities: Vec<MatchModality>,
    pub matcher: MatcherParams,
    pub solver: SolverParams,
    /// Template validity parameters; `None` derives them from the side.
    pub validity: Option<ValidityParams>,
}

impl Default for VtsmConfig {
    fn default() -> Self {
        Self {
            target_correspondences: 100,
            max_iterations: 5,
            initial_bounds: SearchBounds {
                translation_m: 0.20,
                rotation_deg: 1.5,
            },
            anneal_factor: 0.5,
            template_side: 128,
            epipolar_threshold_px: 8.0,
            convergence_threshold_m: 1e-3,
            reuse_fraction: 0.5,
            stall_limit: 3,
            reseed_limit: 10,
            reseed_bounds: SearchBounds {
                translation_m: 0.50,
                rotation_deg: 1.5,
            },
            distribute: false,
            attempt_budget_multiplier: 50,
            seed: 0,
            modalities: Vec::new(),
            matcher: MatcherParams::default(),
            solver: SolverParams::default(),
            validity: None,
        }
    }
}

impl VtsmConfig {
    pub fn validate(&self) -> Result<(), VtsmError> {
        if self.target_correspondences < 3 {
            return Err(VtsmError::InvalidConfig(
                "need at least 3 correspondences".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.anneal_factor) {
            return Err(VtsmError::InvalidConfig(
                "anneal factor outside [0,1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.reuse_fraction) {
            return Err(VtsmError::InvalidConfig(
                "reuse fraction outside [0,1)".into(),
            ));
        }
        if self.max_iterations == 0 || self.attempt_budget_multiplier == 0 {
            return Err(VtsmError::InvalidConfig(
                "iteration and budget limits must be positive".into(),
            ));
        }
        if self.convergence_threshold_m <= 0.0 || self.epipolar_threshold_px <= 0.0 {
            return Err(VtsmError::InvalidConfig(
                "thresholds must be positive".into(),
            ));
        }
        if !self.template_side.is_power_of_two() {
            return Err(VtsmError::InvalidConfig(
                "template side must be a power of two".into(),
            ));
        }
        Ok(())
    }

    pub fn modalities_or_default(&self) -> Vec<MatchModality> {
        if self.modalities.is_empty() {
            default_modalities(self.template_side)
        } else {
            self.modalities.clone()
        }
    }

    pub fn validity_or_default(&self) -> ValidityParams {
        self.validity
            .unwrap_or_else(|| ValidityParams::for_template_side(self.template_side))
    }

    fn margin_px(&self) -> f64 {
        (self.template_side / 2) as f64 + 8.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureCode {
    StallLimitExceeded,
    ReseedLimitExceeded,
    NoVisiblePoints,
    AttemptBudgetExceeded,
    AllSeedsFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LocalizeStatus {
    Success { converged_early: bool },
    Failure { code: FailureCode },
}

impl LocalizeStatus {
    pub fn is_success(&self) -> bool {
        matches!(self, LocalizeStatus::Success { .. })
    }
}

/// What a collection round did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundAction {
    Updated,
    Stalled,
    Reseeded,
    Terminal,
}

/// One collection round of the loop, with enough audit data to re-check the
/// loop's invariants from the serialized outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    /// Count of successful updates before this round.
    pub iteration: usize,
    pub action: RoundAction,
    pub bounds: SearchBounds,
    pub attempts: usize,
    pub correspondences: usize,
    pub reused: usize,
    pub inlier_count: usize,
    /// Translation delta of the pose update (meters), when one happened.
    pub pose_delta_m: Option<f64>,
    /// Viewpoint perturbations were sampled in the tangent plane.
    pub planar: bool,
    /// Largest viewpoint translation sampled this round (meters).
    pub max_viewpoint_translation_m: f64,
    /// Largest viewpoint rotation sampled this round (degrees).
    pub max_viewpoint_rotation_deg: f64,
    /// Largest |translation . normal| over planar samples (meters).
    pub max_tangent_violation_m: f64,
    /// Largest |u_L - u_R| over accepted matches (pixels).
    pub max_epipolar_px: f64,
    /// Smallest disparity over accepted matches (pixels).
    pub min_disparity_px: f64,
}

/// Seed-phase summary of the multi-seed mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedPhase {
    pub seeds: usize,
    pub best_seed: usize,
    pub best_inliers: usize,
    pub attempts: usize,
}

/// Everything a localization run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizeOutcome {
    pub status: LocalizeStatus,
    pub final_pose: Pose,
    pub trace: Vec<RoundTrace>,
    pub template_attempts: usize,
    /// Wall-clock seconds; excluded from serialization so identical runs
    /// produce byte-identical outcome files.
    #[serde(skip, default)]
    pub duration_s: f64,
    pub seed: u64,
    pub seed_phase: Option<SeedPhase>,
}

impl LocalizeOutcome {
    pub fn is_success(&self) -> bool {
        self.status.is_success()
    }
}

/// Left and right query intensities, row-major, in [0,1].
pub struct StereoQuery<'a> {
    pub left: &'a [f64],
    pub right: &'a [f64],
    pub rows: usize,
    pub cols: usize,
}

impl<'a> StereoQuery<'a> {
    pub fn from_frames(
        left: &'a crate::render::RenderedFrame,
        right: &'a crate::render::RenderedFrame,
    ) -> Self {
        Self {
            left: &left.intensity,
            right: &right.intensity,
            rows: left.rig.rows,
            cols: left.rig.cols,
        }
    }
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

/// Exact annealing step: both bounds scaled by `gamma`.
pub fn anneal(bounds: &SearchBounds, gamma: f64) -> SearchBounds {
    bounds.scaled(gamma)
}

/// Picks a candidate pose with probability proportional to its inlier count.
pub fn distribute_pick<'a, R: Rng>(
    candidates: &'a [(Pose, usize)],
    rng: &mut R,
) -> Option<&'a Pose> {
    let total: usize = candidates.iter().map(|(_, c)| c).sum();
    if candidates.is_empty() || total == 0 {
        return None;
    }
    let mut ticket = rng.gen_range(0..total);
    for (pose, count) in candidates {
        if ticket < *count {
            return Some(pose);
        }
        ticket -= count;
    }
    unreachable!("ticket always lands in a bucket")
}

/// Uniformly samples `floor(fraction * target)` of the inliers (all of them
/// if fewer exist) and marks them as reused.
pub fn reuse_carryover<R: Rng>(
    inliers: &[Correspondence],
    fraction: f64,
    target: usize,
    rng: &mut R,
) -> Vec<Correspondence> {
    let want = ((fraction * target as f64).floor() as usize).min(inliers.len());
    if want == 0 {
        return Vec::new();
    }
    // Partial Fisher-Yates over an index vector.
    let mut idx: Vec<usize> = (0..inliers.len()).collect();
    for k in 0..want {
        let j = rng.gen_range(k..idx.len());
        idx.swap(k, j);
    }
    idx[..want]
        .iter()
        .map(|&i| Correspondence {
            reused: true,
            ..inliers[i].clone()
        })
        .collect()
}

/// Mutable search state threaded through the loop rounds.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub estimate: Pose,
    pub bounds: SearchBounds,
    pub stall_count: usize,
    pub reseed_count: usize,
    pub successes: usize,
}

impl SearchState {
    pub fn new(initial: Pose, bounds: SearchBounds) -> Self {
        Self {
            estimate: initial,
            bounds,
            stall_count: 0,
            reseed_count: 0,
            successes: 0,
        }
    }

    /// Keeps the pose and bounds, discarding this round's correspondences.
    pub fn stall(&mut self, limit: usize) -> Result<(), FailureCode> {
        if self.stall_count >= limit {
            return Err(FailureCode::StallLimitExceeded);
        }
        self.stall_count += 1;
        Ok(())
    }

    /// Jumps the estimate by a random perturbation within `bounds`; the
    /// search bounds themselves stay unchanged.
    pub fn reseed<R: Rng>(
        &mut self,
        bounds: &SearchBounds,
        limit: usize,
        rng: &mut R,
    ) -> Result<(), FailureCode> {
        if self.reseed_count >= limit {
            return Err(FailureCode::ReseedLimitExceeded);
        }
        self.reseed_count += 1;
        let d = sample_perturbation(bounds, &Vector3::z(), false, self.estimate.to_frame(), rng);
        self.estimate = compose(&self.estimate, &d).expect("frame-preserving reseed");
        Ok(())
    }

    /// A successful update resets both consecutive counters.
    pub fn record_success(&mut self, new_estimate: Pose, gamma: f64) {
        self.estimate = new_estimate;
        self.bounds = anneal(&self.bounds, gamma);
        self.stall_count = 0;
        self.reseed_count = 0;
        self.successes += 1;
    }
}

/// Face normal of the mask triangle nearest the estimate's ground
/// projection, used as the planar-search tangent normal (world frame).
fn local_surface_normal(mesh: &TexturedMesh, mask: &SamplingMask, estimate: &Pose) -> Vector3<f64> {
    let center = estimate.center();
    let mut best = f64::INFINITY;
    let mut normal = Vector3::z();
    for &ti in mask.triangle_indices() {
        let tri = mesh.triangles()[ti as usize];
        let a = &mesh.vertices()[tri[0] as usize];
        let b = &mesh.vertices()[tri[1] as usize];
        let c = &mesh.vertices()[tri[2] as usize];
        let cx = (a.x + b.x + c.x) / 3.0;
        let cy = (a.y + b.y + c.y) / 3.0;
        let d2 = (cx - center.x).powi(2) + (cy - center.y).powi(2);
        if d2 < best {
            best = d2;
            normal = (b - a)
                .cross(&(c - a))
                .try_normalize(1e-14)
                .unwrap_or(Vector3::z());
        }
    }
    normal
}

enum RoundOutcome {
    Collected {
        correspondences: Vec<Correspondence>,
        reused: usize,
    },
    NoVisible,
    BudgetExhausted {
        correspondences: Vec<Correspondence>,
        reused: usize,
    },
    GlobalBudgetExceeded,
}

struct RoundStats {
    attempts: usize,
    max_translation: f64,
    max_rotation_deg: f64,
    max_tangent: f64,
    max_epipolar: f64,
    min_disparity: f64,
}

impl RoundStats {
    fn new() -> Self {
        Self {
            attempts: 0,
            max_translation: 0.0,
            max_rotation_deg: 0.0,
            max_tangent: 0.0,
            max_epipolar: 0.0,
            min_disparity: f64::INFINITY,
        }
    }
}

struct LoopContext<'a> {
    query: &'a StereoQuery<'a>,
    mesh: &'a TexturedMesh,
    mask: &'a SamplingMask,
    rig: &'a StereoRig,
    config: &'a VtsmConfig,
    modalities: Vec<MatchModality>,
    validity: ValidityParams,
}

/// One correspondence-collection round from `state.estimate`.
#[allow(clippy::too_many_arguments)]
fn collect_round<R: Rng>(
    ctx: &LoopContext<'_>,
    state: &SearchState,
    candidates: &[(Pose, usize)],
    carry: &[Correspondence],
    planar: bool,
    normal_world: &Vector3<f64>,
    total_attempts: &mut usize,
    global_budget: usize,
    stats: &mut RoundStats,
    rng: &mut R,
) -> RoundOutcome {
    let cfg = ctx.config;
    let mut correspondences: Vec<Correspondence> = carry.to_vec();
    let reused = correspondences.len();
    let budget = cfg.attempt_budget_multiplier * cfg.target_correspondences;
    let margin = cfg.margin_px();
    // Normal expressed in the estimate camera frame, where perturbations live.
    let mut no_visible_streak = 0usize;
    let left_view = ImageView::new(ctx.query.left, ctx.query.rows, ctx.query.cols);
    let right_view = ImageView::new(ctx.query.right, ctx.query.rows, ctx.query.cols);

    while correspondences.len() < cfg.target_correspondences {
        if stats.attempts >= budget {
            return RoundOutcome::BudgetExhausted {
                correspondences,
                reused,
            };
        }
        if *total_attempts >= global_budget {
            return RoundOutcome::GlobalBudgetExceeded;
        }
        stats.attempts += 1;
        *total_attempts += 1;

        let center_pose = if cfg.distribute && state.successes > 0 {
            distribute_pick(candidates, rng)
                .unwrap_or(&state.estimate)
                .clone()
        } else {
            state.estimate.clone()
        };
        let normal_cam = center_pose.rotate_vector(normal_world);
        let delta = sample_perturbation(
            &state.bounds,
            &normal_cam,
            planar,
            center_pose.to_frame(),
            rng,
        );
        stats.max_translation = stats.max_translation.max(delta.translation().norm());
        stats.max_rotation_deg = stats
            .max_rotation_deg
            .max(delta.rotation_angle().to_degrees());
        if planar {
            stats.max_tangent = stats
                .max_tangent
                .max(delta.translation().dot(&normal_cam).abs());
        }
        let viewpoint = compose(&center_pose, &delta).expect("frame-preserving perturbation");

        let point =
            match sample_visible_point(ctx.mesh, ctx.mask, &viewpoint, ctx.rig, margin, 64, rng) {
                Ok(p) => {
                    no_visible_streak = 0;
                    p
                }
                Err(MeshError::NoVisiblePoints) => {
                    no_visible_streak += 1;
                    // A pose that sees nothing at all for this long is lost;
                    // hand control back so the caller can reseed.
                    if no_visible_streak >= 25 && correspondences.len() == reused {
                        return RoundOutcome::NoVisible;
                    }
                    continue;
                }
                Err(_) => continue,
            };

        let left_template = match synthesize_template(
            ctx.mesh,
            ctx.mask,
            &viewpoint,
            ctx.rig,
            crate::geometry::CameraSide::Left,
            &point,
            cfg.template_side,
            &ctx.validity,
        ) {
            Ok(t) => t,
            Err(_) => continue,
        };
        let right_template = match synthesize_template(
            ctx.mesh,
            ctx.mask,
            &viewpoint,
            ctx.rig,
            crate::geometry::CameraSide::Right,
            &point,
            cfg.template_side,
            &ctx.validity,
        ) {
            Ok(t) => t,
            Err(_) => continue,
        };

        let Some(accepted) = match_stereo(
            &left_template,
            &right_template,
            left_view,
            right_view,
            &viewpoint,
            &point,
            ctx.rig,
            &state.bounds,
            &ctx.modalities,
            cfg.epipolar_threshold_px,
            &cfg.matcher,
        ) else {
            continue;
        };

        let (ul, vl) = (accepted.left.location.u, accepted.left.location.v);
        let (ur, vr) = (accepted.right.location.u, accepted.right.location.v);
        let Ok(p_camera) = stereo_triangulate(ul, vl, ur, vr, ctx.rig, cfg.solver.min_disparity_px)
        else {
            continue;
        };
        stats.max_epipolar = stats.max_epipolar.max((ul - ur).abs());
        stats.min_disparity = stats.min_disparity.min(vl - vr);
        correspondences.push(Correspondence {
            p_world: [point.position.x, point.position.y, point.position.z],
            p_camera: [p_camera.x, p_camera.y, p_camera.z],
            score: accepted.left.score.min(accepted.right.score),
            reused: false,
        });
    }
    RoundOutcome::Collected {
        correspondences,
        reused,
    }
}

/// Runs the full localization loop from `initial_guess`.
pub fn localize(
    query: &StereoQuery<'_>,
    mesh: &TexturedMesh,
    mask: &SamplingMask,
    rig: &StereoRig,
    initial_guess: &Pose,
    config: &VtsmConfig,
) -> Result<LocalizeOutcome, VtsmError> {
    config.validate()?;
    if query.rows != rig.rows || query.cols != rig.cols {
        return Err(VtsmError::FrameSizeMismatch {
            got_rows: query.rows,
            got_cols: query.cols,
            rows: rig.rows,
            cols: rig.cols,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    localize_inner(
        query,
        mesh,
        mask,
        rig,
        initial_guess,
        config,
        &mut rng,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
fn localize_inner(
    query: &StereoQuery<'_>,
    mesh: &TexturedMesh,
    mask: &SamplingMask,
    rig: &StereoRig,
    initial_guess: &Pose,
    config: &VtsmConfig,
    rng: &mut ChaCha8Rng,
    seed_phase: Option<SeedPhase>,
) -> Result<LocalizeOutcome, VtsmError> {
    let started = clock_seconds();
    let ctx = LoopContext {
        query,
        mesh,
        mask,
        rig,
        config,
        modalities: config.modalities_or_default(),
        validity: config.validity_or_default(),
    };
    let mut state = SearchState::new(initial_guess.clone(), config.initial_bounds);
    let mut carry: Vec<Correspondence> = Vec::new();
    let mut candidates: Vec<(Pose, usize)> = Vec::new();
    let mut trace: Vec<RoundTrace> = Vec::new();
    let mut total_attempts = seed_phase.as_ref().map_or(0, |s| s.attempts);
    let global_budget = total_attempts
        + config.attempt_budget_multiplier
            * config.target_correspondences
            * (config.max_iterations + config.stall_limit + config.reseed_limit);

    if mask.is_empty() || mask.vertex_indices().is_empty() {
        return Ok(LocalizeOutcome {
            status: LocalizeStatus::Failure {
                code: FailureCode::NoVisiblePoints,
            },
            final_pose: state.estimate,
            trace,
            template_attempts: total_attempts,
            duration_s: clock_seconds() - started,
            seed: config.seed,
            seed_phase,
        });
    }

    let status = loop {
        let planar = state.successes == 0;
        let normal_world = local_surface_normal(mesh, mask, &state.estimate);
        let mut stats = RoundStats::new();
        let outcome = collect_round(
            &ctx,
            &state,
            &candidates,
            &carry,
            planar,
            &normal_world,
            &mut total_attempts,
            global_budget,
            &mut stats,
            rng,
        );
        let mut round = RoundTrace {
            iteration: state.successes,
            action: RoundAction::Terminal,
            bounds: state.bounds,
            attempts: stats.attempts,
            correspondences: 0,
            reused: 0,
            inlier_count: 0,
            pose_delta_m: None,
            planar,
            max_viewpoint_translation_m: stats.max_translation,
            max_viewpoint_rotation_deg: stats.max_rotation_deg,
            max_tangent_violation_m: stats.max_tangent,
            max_epipolar_px: stats.max_epipolar,
            min_disparity_px: stats.min_disparity,
        };

        let alignment = match outcome {
            RoundOutcome::GlobalBudgetExceeded => {
                trace.push(round);
                break LocalizeStatus::Failure {
                    code: FailureCode::AttemptBudgetExceeded,
                };
            }
            RoundOutcome::NoVisible => None,
            RoundOutcome::BudgetExhausted {
                correspondences,
                reused,
            } => {
                round.correspondences = correspondences.len();
                round.reused = reused;
                None
            }
            RoundOutcome::Collected {
                correspondences,
                reused,
            } => {
                round.correspondences = correspondences.len();
                round.reused = reused;
                ransac_align(
                    &correspondences,
                    &config.solver,
                    state.estimate.from_frame(),
                    state.estimate.to_frame(),
                    rng,
                )
                .ok()
                .map(|a| (a, correspondences))
            }
        };

        match alignment {
            Some((align, correspondences)) => {
                let new_estimate = align.transform.clone();
                let delta = (new_estimate.translation() - state.estimate.translation()).norm();
                round.inlier_count = align.inliers.len();
                round.pose_delta_m = Some(delta);
                round.action = RoundAction::Updated;
                trace.push(round);
                state.record_success(new_estimate, config.anneal_factor);
                let inlier_corrs: Vec<Correspondence> = align
                    .inliers
                    .iter()
                    .map(|&i| correspondences[i].clone())
                    .collect();
                carry = reuse_carryover(
                    &inlier_corrs,
                    config.reuse_fraction,
                    config.target_correspondences,
                    rng,
                );
                candidates = align.candidates;
                if state.successes >= config.max_iterations {
                    break LocalizeStatus::Success {
                        converged_early: false,
                    };
                }
                if delta < config.convergence_threshold_m {
                    break LocalizeStatus::Success {
                        converged_early: true,
                    };
                }
            }
            None => {
                // Alignment failed: stall when past successes anchor the
                // pose, reseed while still searching for the first lock.
                if state.successes > 0 {
                    match state.stall(config.stall_limit) {
                        Ok(()) => {
                            round.action = RoundAction::Stalled;
                            trace.push(round);
                        }
                        Err(code) => {
                            trace.push(round);
                            break LocalizeStatus::Failure { code };
                        }
                    }
                } else {
                    match state.reseed(&config.reseed_bounds, config.reseed_limit, rng) {
                        Ok(()) => {
                            round.action = RoundAction::Reseeded;
                            trace.push(round);
                            carry.clear();
                        }
                        Err(code) => {
                            trace.push(round);
                            break LocalizeStatus::Failure { code };
                        }
                    }
                }
            }
        }
    };

    Ok(LocalizeOutcome {
        status,
        final_pose: state.estimate,
        trace,
        template_attempts: total_attempts,
        duration_s: clock_seconds() - started,
        seed: config.seed,
        seed_phase,
    })
}

fn split_seed(seed: u64, stream: u64) -> u64 {
    let mut h = seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// Result of evaluating one pose seed: one collection round plus alignment.
struct SeedScore {
    pose: Pose,
    inliers: usize,
    attempts: usize,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_seed(
    query: &StereoQuery<'_>,
    mesh: &TexturedMesh,
    mask: &SamplingMask,
    rig: &StereoRig,
    seed_pose: &Pose,
    config: &VtsmConfig,
    rng_seed: u64,
) -> SeedScore {
    let ctx = LoopContext {
        query,
        mesh,
        mask,
        rig,
        config,
        modalities: config.modalities_or_default(),
        validity: config.validity_or_default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let state = SearchState::new(seed_pose.clone(), config.initial_bounds);
    let normal_world = local_surface_normal(mesh, mask, seed_pose);
    let mut stats = RoundStats::new();
    let mut total = 0usize;
    let outcome = collect_round(
        &ctx,
        &state,
        &[],
        &[],
        true,
        &normal_world,
        &mut total,
        usize::MAX,
        &mut stats,
        &mut rng,
    );
    let correspondences = match outcome {
        RoundOutcome::Collected {
            correspondences, ..
        } => correspondences,
        // A partial collection can still vote if it has enough agreement.
        RoundOutcome::BudgetExhausted {
            correspondences, ..
        } => correspondences,
        _ => Vec::new(),
    };
    let aligned = if correspondences.len() >= 3 {
        ransac_align(
            &correspondences,
            &config.solver,
            seed_pose.from_frame(),
            seed_pose.to_frame(),
            &mut rng,
        )
        .ok()
    } else {
        None
    };
    match aligned {
        Some(a) => SeedScore {
            pose: a.transform,
            inliers: a.inliers.len(),
            attempts: stats.attempts,
        },
        None => SeedScore {
            pose: seed_pose.clone(),
            inliers: 0,
            attempts: stats.attempts,
        },
    }
}

/// Wide-uncertainty mode: samples `n_seeds` poses within `wide_bound_m` of
/// the guess, runs one collection+alignment round on each, then runs the
/// full loop from the best seed's updated pose with the standard bounds.
///
/// Seeds evaluate on independent RNG streams and results are committed by
/// seed index, so the outcome does not depend on scheduling.
pub fn multi_seed_localize(
    query: &StereoQuery<'_>,
    mesh: &TexturedMesh,
    mask: &SamplingMask,
    rig: &StereoRig,
    initial_guess: &Pose,
    wide_bound_m: f64,
    n_seeds: usize,
    config: &VtsmConfig,
) -> Result<LocalizeOutcome, VtsmError> {
    config.validate()?;
    if wide_bound_m < config.initial_bounds.translation_m {
        return Err(VtsmError::InvalidConfig(format!(
            "wide bound {wide_bound_m} below the per-seed search bound {}",
            config.initial_bounds.translation_m
        )));
    }
    if n_seeds == 0 {
        return Err(VtsmError::InvalidConfig("need at least one seed".into()));
    }
    let started = clock_seconds();

    // Seed poses: translation-only jumps, magnitude uniform in [0, wide].
    let mut pose_rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, 0x5eed));
    let seed_poses: Vec<Pose> = (0..n_seeds)
        .map(|_| {
            let direction = sample_unit_vector(&mut pose_rng);
            let magnitude: f64 = pose_rng.gen_range(0.0..=wide_bound_m);
            let d = Pose::from_axis_angle(
                Vector3::z(),
                0.0,
                direction * magnitude,
                initial_guess.to_frame(),
                initial_guess.to_frame(),
            );
            compose(initial_guess, &d).expect("frame-preserving seed jump")
        })
        .collect();

    let mut scores: Vec<Option<SeedScore>> = (0..n_seeds).map(|_| None).collect();
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(n_seeds);
    if workers <= 1 {
        for (i, pose) in seed_poses.iter().enumerate() {
            scores[i] = Some(evaluate_seed(
                query,
                mesh,
                mask,
                rig,
                pose,
                config,
                split_seed(config.seed, 1000 + i as u64),
            ));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results = std::sync::Mutex::new(&mut scores);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= n_seeds {
                        break;
                    }
                    let score = evaluate_seed(
                        query,
                        mesh,
                        mask,
                        rig,
                        &seed_poses[i],
                        config,
                        split_seed(config.seed, 1000 + i as u64),
                    );
                    results.lock().expect("seed results lock")[i] = Some(score);
                });
            }
        });
    }

    let mut best_seed = 0usize;
    let mut best_inliers = 0usize;
    let mut attempts = 0usize;
    for (i, s) in scores.iter().enumerate() {
        let s = s.as_ref().expect("every seed evaluated");
        attempts += s.attempts;
        if s.inliers > best_inliers {
            best_inliers = s.inliers;
            best_seed = i;
        }
    }
    let phase = SeedPhase {
        seeds: n_seeds,
        best_seed,
        best_inliers,
        attempts,
    };
    if best_inliers == 0 {
        return Ok(LocalizeOutcome {
            status: LocalizeStatus::Failure {
                code: FailureCode::AllSeedsFailed,
            },
            final_pose: initial_guess.clone(),
            trace: Vec::new(),
            template_attempts: attempts,
            duration_s: clock_seconds() - started,
            seed: config.seed,
            seed_phase: Some(phase),
        });
    }
    let start_pose = scores[best_seed].as_ref().unwrap().pose.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, 2));
    let mut outcome = localize_inner(
        query,
        mesh,
        mask,
        rig,
        &start_pose,
        config,
        &mut rng,
        Some(phase),
    )?;
    outcome.duration_s = clock_seconds() - started;
    Ok(outcome)
}

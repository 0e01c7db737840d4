//! Browser demo over the core pipeline: generate a small depot scene, orbit
//! a camera around it under a movable sun, inspect synthesized templates
//! (with their validity masks), and run the localizer while watching the
//! pose error shrink per iteration.
//!
//! Build with `wasm-pack build --target web crates/vtsm-demo` and serve the
//! `www/` page next to the generated `pkg/`.

use std::cell::RefCell;

use nalgebra::Vector3;
use wasm_bindgen::prelude::wasm_bindgen;

use vtsm_core::geometry::{pose_error, CameraSide, PixelCoord, Pose, StereoRig};
use vtsm_core::harness::perturb_guess;
use vtsm_core::meshmap::{SamplingMask, TexturedMesh};
use vtsm_core::render::{render_frame, synthesize_template, ValidityParams};
use vtsm_core::scenegen::{
    bake_map_texture, generate_depot, render_query_pair, ShadingSpec, TerrainKind, TerrainSpec,
    TextureNoise,
};
use vtsm_core::vtsm::{localize, RoundAction, StereoQuery, VtsmConfig};

const ROWS: usize = 360;
const COLS: usize = 480;
const TEMPLATE_SIDE: usize = 64;

struct DemoScene {
    albedo: TexturedMesh,
    map: TexturedMesh,
    mask: SamplingMask,
    rig: StereoRig,
    mapping_sun: (f64, f64),
}

thread_local! {
    static SCENE: RefCell<Option<DemoScene>> = const { RefCell::new(None) };
}

fn demo_rig() -> StereoRig {
    StereoRig::new(
        420.0,
        PixelCoord::new(ROWS as f64 / 2.0, COLS as f64 / 2.0),
        0.15,
        ROWS,
        COLS,
        0.1,
        50.0,
    )
    .expect("demo rig is valid")
}

fn demo_spec(kind: TerrainKind, seed: u64) -> TerrainSpec {
    TerrainSpec {
        kind,
        extent_m: [4.0, 4.0],
        grid: [112, 112],
        rock_density: match kind {
            TerrainKind::Cfa6 => 0.06,
            TerrainKind::Cfa2 => 0.02,
            TerrainKind::Flagstone => 0.0,
        },
        fracture_density: 1.4,
        texture_noise: TextureNoise::default(),
        texture_resolution: 512,
        seed,
    }
}

fn ring_pose(angle_deg: f64, radius: f64, height: f64) -> Pose {
    let a = angle_deg.to_radians();
    Pose::look_at(
        Vector3::new(radius * a.cos(), radius * a.sin(), height),
        Vector3::zeros(),
        "world",
        "camera",
    )
    .expect("ring pose")
}

fn shading(elevation_deg: f64, azimuth_deg: f64) -> ShadingSpec {
    ShadingSpec::from_sun_angles(elevation_deg.clamp(5.0, 90.0), azimuth_deg, 0.35, true)
}

fn gray_to_rgba(gray: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(gray.len() * 4);
    for &g in gray {
        let v = (g.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[v, v, v, 255]);
    }
    out
}

/// Generates the scene and its mapping-time map. Returns a JSON summary.
#[wasm_bindgen]
pub fn init_scene(kind: &str, seed: u32, sun_elevation: f64, sun_azimuth: f64) -> String {
    let kind = match kind {
        "flagstone" => TerrainKind::Flagstone,
        "cfa6" => TerrainKind::Cfa6,
        _ => TerrainKind::Cfa2,
    };
    let spec = demo_spec(kind, seed as u64);
    let (albedo, mask) = match generate_depot(&spec) {
        Ok(x) => x,
        Err(e) => return format!("{{\"error\": \"{e}\"}}"),
    };
    let map = bake_map_texture(&albedo, &shading(sun_elevation, sun_azimuth));
    let summary = serde_json::json!({
        "kind": kind.label(),
        "triangles": albedo.triangles().len(),
        "mask_triangles": mask.triangle_indices().len(),
        "mask_vertices": mask.vertex_indices().len(),
    });
    SCENE.with(|s| {
        *s.borrow_mut() = Some(DemoScene {
            albedo,
            map,
            mask,
            rig: demo_rig(),
            mapping_sun: (sun_elevation, sun_azimuth),
        })
    });
    summary.to_string()
}

/// Renders the left camera view of the live scene as RGBA bytes
/// (`view_cols() * view_rows() * 4`).
#[wasm_bindgen]
pub fn render_view(
    camera_angle_deg: f64,
    camera_radius_m: f64,
    camera_height_m: f64,
    sun_elevation: f64,
    sun_azimuth: f64,
    show_map_texture: bool,
) -> Vec<u8> {
    SCENE.with(|s| {
        let scene = s.borrow();
        let Some(scene) = scene.as_ref() else {
            return Vec::new();
        };
        let pose = ring_pose(camera_angle_deg, camera_radius_m.max(0.5), camera_height_m);
        let frame = if show_map_texture {
            // The map as the matcher sees it: stale baked lighting.
            render_frame(&scene.map, &pose, &scene.rig, CameraSide::Left, None)
        } else {
            render_frame(
                &scene.albedo,
                &pose,
                &scene.rig,
                CameraSide::Left,
                Some(&shading(sun_elevation, sun_azimuth)),
            )
        };
        gray_to_rgba(&frame.intensity)
    })
}

#[wasm_bindgen]
pub fn view_rows() -> usize {
    ROWS
}

#[wasm_bindgen]
pub fn view_cols() -> usize {
    COLS
}

#[wasm_bindgen]
pub fn template_side() -> usize {
    TEMPLATE_SIDE
}

/// Synthesizes a template at a random visible mask point and returns it as
/// RGBA with invalid pixels tinted red.
#[wasm_bindgen]
pub fn sample_template(camera_angle_deg: f64, point_seed: u32) -> Vec<u8> {
    SCENE.with(|s| {
        let scene = s.borrow();
        let Some(scene) = scene.as_ref() else {
            return Vec::new();
        };
        let pose = ring_pose(camera_angle_deg, 1.5, 1.3);
        let mut rng = rand_chacha_rng(point_seed);
        let margin = (TEMPLATE_SIDE / 2) as f64 + 8.0;
        let Ok(point) = vtsm_core::meshmap::sample_visible_point(
            &scene.map,
            &scene.mask,
            &pose,
            &scene.rig,
            margin,
            64,
            &mut rng,
        ) else {
            return Vec::new();
        };
        let Ok(patch) = synthesize_template(
            &scene.map,
            &scene.mask,
            &pose,
            &scene.rig,
            CameraSide::Left,
            &point,
            TEMPLATE_SIDE,
            &ValidityParams::for_template_side(TEMPLATE_SIDE),
        ) else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(patch.intensity.len() * 4);
        for i in 0..patch.intensity.len() {
            let v = (patch.intensity[i].clamp(0.0, 1.0) * 255.0).round() as u8;
            if patch.validity[i] {
                out.extend_from_slice(&[v, v, v, 255]);
            } else {
                out.extend_from_slice(&[v.saturating_add(70), v / 2, v / 2, 255]);
            }
        }
        out
    })
}

fn rand_chacha_rng(seed: u32) -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed as u64)
}

/// Runs the localizer against a query rendered under the given sun, starting
/// from a guess perturbed by `perturb_cm`. Returns a JSON report with the
/// per-round trace.
#[wasm_bindgen]
pub fn run_localization(
    camera_angle_deg: f64,
    query_sun_elevation: f64,
    query_sun_azimuth: f64,
    perturb_cm: f64,
    seed: u32,
) -> String {
    SCENE.with(|s| {
        let scene = s.borrow();
        let Some(scene) = scene.as_ref() else {
            return "{\"error\": \"no scene: call init_scene first\"}".to_string();
        };
        let truth = ring_pose(camera_angle_deg, 1.5, 1.3);
        let (left, right) = render_query_pair(
            &scene.albedo,
            &scene.rig,
            &truth,
            &shading(query_sun_elevation, query_sun_azimuth),
        );
        let query = StereoQuery::from_frames(&left, &right);
        let p = (perturb_cm / 100.0).clamp(0.0, 0.25);
        let guess = perturb_guess(&truth, [p, p], 1.0, seed as u64 ^ 0xd15c0);
        let (init_err, _) = pose_error(&truth, &guess).expect("same frames");
        let config = VtsmConfig {
            target_correspondences: 30,
            template_side: TEMPLATE_SIDE,
            attempt_budget_multiplier: 8,
            solver: vtsm_core::posesolve::SolverParams {
                min_inliers: 10,
                inlier_threshold_m: 0.05,
                ..Default::default()
            },
            seed: seed as u64,
            ..Default::default()
        };
        let outcome = match localize(&query, &scene.map, &scene.mask, &scene.rig, &guess, &config) {
            Ok(o) => o,
            Err(e) => return format!("{{\"error\": \"{e}\"}}"),
        };
        let (final_err, final_rot) = pose_error(&truth, &outcome.final_pose).expect("same frames");
        let rounds: Vec<serde_json::Value> = outcome
            .trace
            .iter()
            .map(|r| {
                serde_json::json!({
                    "iteration": r.iteration,
                    "action": match r.action {
                        RoundAction::Updated => "updated",
                        RoundAction::Stalled => "stalled",
                        RoundAction::Reseeded => "reseeded",
                        RoundAction::Terminal => "terminal",
                    },
                    "bounds_cm": r.bounds.translation_m * 100.0,
                    "attempts": r.attempts,
                    "correspondences": r.correspondences,
                    "inliers": r.inlier_count,
                    "delta_mm": r.pose_delta_m.map(|d| d * 1000.0),
                })
            })
            .collect();
        serde_json::json!({
            "success": outcome.is_success(),
            "mapping_sun": {"elevation": scene.mapping_sun.0, "azimuth": scene.mapping_sun.1},
            "init_error_mm": init_err * 1000.0,
            "final_error_mm": final_err * 1000.0,
            "final_rotation_deg": final_rot,
            "attempts": outcome.template_attempts,
            "rounds": rounds,
        })
        .to_string()
    })
}

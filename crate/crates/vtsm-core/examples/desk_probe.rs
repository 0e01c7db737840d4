//! Quick desk-scale timing probe (not part of the test suite).

use nalgebra::Vector3;
use vtsm_core::geometry::{pose_error, PixelCoord, Pose, StereoRig};
use vtsm_core::harness::perturb_guess;
use vtsm_core::scenegen::{
    bake_map_texture, generate_depot, render_query_pair, ShadingSpec, TerrainSpec,
};
use vtsm_core::vtsm::{localize, StereoQuery, VtsmConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let which = std::env::args().nth(1).unwrap_or_else(|| "cfa2".into());
    let (spec, map_shading, query_shading) = match which.as_str() {
        "flag6h" => (
            TerrainSpec::flagstone_analog(2001),
            ShadingSpec::morning(),
            ShadingSpec::afternoon(),
        ),
        "cfa6_6h" => (
            TerrainSpec::cfa6_analog(2003),
            ShadingSpec::morning(),
            ShadingSpec::afternoon(),
        ),
        "cfa6_3h" => (
            TerrainSpec::cfa6_analog(2003),
            ShadingSpec::morning(),
            ShadingSpec::noon(),
        ),
        _ => (
            TerrainSpec::cfa2_analog(2002),
            ShadingSpec::morning(),
            ShadingSpec::morning(),
        ),
    };
    let (mesh, mask) = generate_depot(&spec).unwrap();
    eprintln!(
        "[{:7.1?}] scene: {} triangles, {} mask tris",
        t0.elapsed(),
        mesh.triangles().len(),
        mask.triangle_indices().len()
    );
    let map_mesh = bake_map_texture(&mesh, &map_shading);
    eprintln!("[{:7.1?}] baked", t0.elapsed());
    let rig = StereoRig::new(
        1100.0,
        PixelCoord::new(480.0, 640.0),
        0.20,
        960,
        1280,
        0.1,
        50.0,
    )
    .unwrap();
    let truth = Pose::look_at(
        Vector3::new(2.2, 0.0, 1.7),
        Vector3::zeros(),
        "world",
        "camera",
    )
    .unwrap();
    let (left, right) = render_query_pair(&mesh, &rig, &truth, &query_shading);
    eprintln!("[{:7.1?}] query rendered", t0.elapsed());
    let query = StereoQuery::from_frames(&left, &right);
    let guess = perturb_guess(&truth, [0.10, 0.20], 1.5, 12345);
    let (init_t, init_r) = pose_error(&truth, &guess).unwrap();
    let mut config = VtsmConfig {
        seed: 7,
        ..Default::default()
    };
    if let Ok(v) = std::env::var("INLIER_THRESH") {
        config.solver.inlier_threshold_m = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("BUDGET_MULT") {
        config.attempt_budget_multiplier = v.parse().unwrap();
    }
    if std::env::args().nth(2).as_deref() == Some("lap_first") {
        use vtsm_core::matcher::{MatchModality, TemplateFilter};
        config.modalities = vec![
            MatchModality {
                size: 128,
                filter: TemplateFilter::Laplacian,
            },
            MatchModality {
                size: 128,
                filter: TemplateFilter::SobelMagnitude,
            },
            MatchModality {
                size: 128,
                filter: TemplateFilter::Grayscale,
            },
            MatchModality {
                size: 64,
                filter: TemplateFilter::Grayscale,
            },
        ];
    }
    let outcome = localize(&query, &map_mesh, &mask, &rig, &guess, &config).unwrap();
    let (fin_t, fin_r) = pose_error(&truth, &outcome.final_pose).unwrap();
    eprintln!(
        "[{:7.1?}] localize: {:?}, rounds {}, attempts {}",
        t0.elapsed(),
        outcome.status,
        outcome.trace.len(),
        outcome.template_attempts
    );
    for r in &outcome.trace {
        eprintln!(
            "  round it={} act={:?} bounds=({:.3},{:.2}) attempts={} corr={} inl={} delta={:?}",
            r.iteration,
            r.action,
            r.bounds.translation_m,
            r.bounds.rotation_deg,
            r.attempts,
            r.correspondences,
            r.inlier_count,
            r.pose_delta_m
        );
    }
    eprintln!(
        "init err {:.1} mm / {:.2} deg -> final {:.1} mm / {:.2} deg",
        init_t * 1000.0,
        init_r,
        fin_t * 1000.0,
        fin_r
    );
}

//! Residual diagnosis: match templates synthesized at the true pose against
//! a query under a different sun, then measure 3-D residuals against the
//! true transform.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtsm_core::geometry::{PixelCoord, Pose, SearchBounds, StereoRig};
use vtsm_core::matcher::{default_modalities, match_stereo, ImageView, MatcherParams};
use vtsm_core::meshmap::sample_visible_point;
use vtsm_core::posesolve::stereo_triangulate;
use vtsm_core::render::{synthesize_template, ValidityParams};
use vtsm_core::scenegen::{
    bake_map_texture, generate_depot, render_query_pair, ShadingSpec, TerrainSpec,
};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "cfa6".into());
    let spec = match which.as_str() {
        "flag" => TerrainSpec::flagstone_analog(2001),
        _ => TerrainSpec::cfa6_analog(2003),
    };
    let (mesh, mask) = generate_depot(&spec).unwrap();
    let map_mesh = bake_map_texture(&mesh, &ShadingSpec::morning());
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
    let (left, right) = render_query_pair(&mesh, &rig, &truth, &ShadingSpec::afternoon());
    let lv = ImageView::new(&left.intensity, rig.rows, rig.cols);
    let rv = ImageView::new(&right.intensity, rig.rows, rig.cols);
    let params = MatcherParams::default();
    let modalities = match std::env::args().nth(2).as_deref() {
        Some("sobel") => vec![vtsm_core::matcher::MatchModality {
            size: 128,
            filter: vtsm_core::matcher::TemplateFilter::SobelMagnitude,
        }],
        Some("sobel_first") => {
            let mut m = default_modalities(128);
            m.rotate_right(1);
            m.swap(0, 1);
            m
        }
        Some("laplacian") => vec![vtsm_core::matcher::MatchModality {
            size: 128,
            filter: vtsm_core::matcher::TemplateFilter::Laplacian,
        }],
        _ => default_modalities(128),
    };
    let validity = ValidityParams::for_template_side(128);
    let bounds = SearchBounds::new(0.20, 1.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let perturbed = std::env::args().nth(3).as_deref() == Some("perturbed");
    // Estimate 0.18 m off the truth, like a fresh localization round.
    let est_offset = vtsm_core::geometry::Pose::from_axis_angle(
        Vector3::z(),
        0.0,
        Vector3::new(0.12, -0.10, 0.07),
        "world",
        "world",
    );
    let estimate = vtsm_core::geometry::compose(&est_offset, &truth).unwrap();
    let mut residuals = Vec::new();
    let mut rejects = 0;
    let mut by_modality = std::collections::BTreeMap::new();
    for _ in 0..120 {
        let viewpoint = if perturbed {
            let d = vtsm_core::geometry::sample_perturbation(
                &bounds,
                &Vector3::z(),
                false,
                estimate.to_frame(),
                &mut rng,
            );
            vtsm_core::geometry::compose(&estimate, &d).unwrap()
        } else {
            truth.clone()
        };
        let point =
            match sample_visible_point(&map_mesh, &mask, &viewpoint, &rig, 72.0, 64, &mut rng) {
                Ok(p) => p,
                Err(_) => continue,
            };
        let lt = match synthesize_template(
            &map_mesh,
            &mask,
            &viewpoint,
            &rig,
            vtsm_core::geometry::CameraSide::Left,
            &point,
            128,
            &validity,
        ) {
            Ok(t) => t,
            Err(_) => continue,
        };
        let rt = match synthesize_template(
            &map_mesh,
            &mask,
            &viewpoint,
            &rig,
            vtsm_core::geometry::CameraSide::Right,
            &point,
            128,
            &validity,
        ) {
            Ok(t) => t,
            Err(_) => continue,
        };
        let Some(m) = match_stereo(
            &lt,
            &rt,
            lv,
            rv,
            &viewpoint,
            &point,
            &rig,
            &bounds,
            &modalities,
            8.0,
            &params,
        ) else {
            rejects += 1;
            continue;
        };
        let p_cam = stereo_triangulate(
            m.left.location.u,
            m.left.location.v,
            m.right.location.u,
            m.right.location.v,
            &rig,
            0.5,
        )
        .unwrap();
        let expect = truth.transform_point(&point.position);
        let r = (p_cam - expect).norm();
        // Pixel error of the left match against the exact projection.
        let (lp, _) =
            vtsm_core::geometry::project(&expect, &rig, vtsm_core::geometry::CameraSide::Left)
                .unwrap();
        let px_err = ((m.left.location.u - lp.u.round()).powi(2)
            + (m.left.location.v - lp.v.round()).powi(2))
        .sqrt();
        *by_modality
            .entry(format!("{:?}", m.left.modality))
            .or_insert(0usize) += 1;
        residuals.push((r, px_err, m.left.score.min(m.right.score)));
    }
    residuals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = residuals.len();
    eprintln!("accepted {n}, rejected {rejects}");
    if n > 0 {
        let med = residuals[n / 2];
        eprintln!(
            "residual median {:.3} m (px {:.1}, score {:.2})",
            med.0, med.1, med.2
        );
        for q in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let i = ((n as f64 * q) as usize).min(n - 1);
            eprintln!(
                "  q{:>2}: residual {:.3} m, px {:.1}, score {:.2}",
                (q * 100.0) as u32,
                residuals[i].0,
                residuals[i].1,
                residuals[i].2
            );
        }
        let within = |t: f64| residuals.iter().filter(|r| r.0 < t).count();
        eprintln!(
            "inliers at 3cm: {}, 5cm: {}, 7cm: {}, 10cm: {}",
            within(0.03),
            within(0.05),
            within(0.07),
            within(0.10)
        );
    }
    eprintln!("modalities: {by_modality:?}");
}

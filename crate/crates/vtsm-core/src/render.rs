//! Software rasterizer producing template patches and full frames of the
//! mesh map, plus the two-rule pixel validity computation for templates.
//!
//! Rasterization is perspective-correct barycentric with a single z-buffer
//! and no anti-aliasing. Every per-pixel quantity is evaluated directly from
//! the triangle data (no incremental accumulation), so rendering any window
//! of the virtual full frame is bit-identical to cropping a full-frame
//! render.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraSide, PixelCoord, Pose, StereoRig};
use crate::meshmap::{MapPoint, SamplingMask, TexturedMesh};
use crate::scenegen::ShadingSpec;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(
        "patch of side {side} centered at ({u:.1},{v:.1}) does not fit the {rows}x{cols} frame"
    )]
    PatchOutOfFrame {
        side: usize,
        u: f64,
        v: f64,
        rows: usize,
        cols: usize,
    },
    #[error("patch center is behind or too close to the camera")]
    CenterNotVisible,
    #[error("image i/o failed for {path}: {message}")]
    ImageIo {
        path: std::path::PathBuf,
        message: String,
    },
}

/// Validity parameters for template synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityParams {
    /// Depth agreement tolerance between masked and full renders (meters).
    pub depth_tolerance_m: f64,
    /// Minimum depth jump that counts as a discontinuity edge (meters).
    pub edge_threshold_m: f64,
    /// Chebyshev radius (pixels) within which background pixels may borrow
    /// validity from a foreground region across a depth edge.
    pub dilation_radius_px: usize,
}

impl Default for ValidityParams {
    fn default() -> Self {
        Self {
            depth_tolerance_m: 1e-3,
            edge_threshold_m: 0.05,
            dilation_radius_px: 16,
        }
    }
}

impl ValidityParams {
    /// Default parameters for a template of side `l` (dilation radius l/8).
    pub fn for_template_side(l: usize) -> Self {
        Self {
            dilation_radius_px: (l / 8).max(1),
            ..Self::default()
        }
    }
}

/// Square image tile with intensity, depth and per-pixel validity, anchored
/// at an integer pixel position of the virtual full frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Side length in pixels.
    pub side: usize,
    /// Patch center in full-frame coordinates (integer-valued).
    pub anchor: PixelCoord,
    /// Row-major intensities in [0,1]; 0 where no surface.
    pub intensity: Vec<f64>,
    /// Row-major depths in meters; +inf where no surface.
    pub depth: Vec<f64>,
    /// Row-major validity flags.
    pub validity: Vec<bool>,
}

impl Patch {
    /// Top-left corner (row) of the patch in frame coordinates.
    pub fn origin_u(&self) -> i64 {
        self.anchor.u as i64 - (self.side / 2) as i64
    }

    /// Top-left corner (column) of the patch in frame coordinates.
    pub fn origin_v(&self) -> i64 {
        self.anchor.v as i64 - (self.side / 2) as i64
    }

    pub fn valid_fraction(&self) -> f64 {
        self.validity.iter().filter(|&&b| b).count() as f64 / self.validity.len() as f64
    }

    /// Central sub-patch of side `sub` (preserving the anchor pixel).
    pub fn central(&self, sub: usize) -> Patch {
        assert!(sub <= self.side && sub > 0);
        let off = (self.side - sub) / 2;
        let mut intensity = Vec::with_capacity(sub * sub);
        let mut depth = Vec::with_capacity(sub * sub);
        let mut validity = Vec::with_capacity(sub * sub);
        for r in 0..sub {
            let s = (r + off) * self.side + off;
            intensity.extend_from_slice(&self.intensity[s..s + sub]);
            depth.extend_from_slice(&self.depth[s..s + sub]);
            validity.extend_from_slice(&self.validity[s..s + sub]);
        }
        Patch {
            side: sub,
            anchor: self.anchor,
            intensity,
            depth,
            validity,
        }
    }
}

/// Full-frame render with the pose and rig that produced it.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub intensity: Vec<f64>,
    pub depth: Vec<f64>,
    pub pose: Pose,
    pub rig: StereoRig,
    pub side: CameraSide,
}

impl RenderedFrame {
    pub fn rows(&self) -> usize {
        self.rig.rows
    }

    pub fn cols(&self) -> usize {
        self.rig.cols
    }
}

/// Pixel window of the virtual full frame: origin (row, col) plus size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub u0: i64,
    pub v0: i64,
    pub rows: usize,
    pub cols: usize,
}

impl Window {
    pub fn fits(&self, rig: &StereoRig) -> bool {
        self.u0 >= 0
            && self.v0 >= 0
            && self.u0 + self.rows as i64 <= rig.rows as i64
            && self.v0 + self.cols as i64 <= rig.cols as i64
    }
}

/// Rasterizes `mesh` (optionally restricted to `triangles` of a mask) into
/// the window, writing depth and optionally shaded intensity.
fn rasterize_window(
    mesh: &TexturedMesh,
    restrict: Option<&[u32]>,
    viewpoint: &Pose,
    rig: &StereoRig,
    side: CameraSide,
    window: Window,
    shading: Option<&ShadingSpec>,
    mut intensity: Option<&mut [f64]>,
    depth: &mut [f64],
) {
    debug_assert_eq!(depth.len(), window.rows * window.cols);
    depth.fill(f64::INFINITY);
    if let Some(ref mut img) = intensity {
        img.fill(0.0);
    }
    let offset = rig.side_offset(side);
    let sun = shading.map(|s| s.sun());

    let tri_indices: Box<dyn Iterator<Item = usize>> = match restrict {
        Some(list) => Box::new(list.iter().map(|&i| i as usize)),
        None => Box::new(0..mesh.triangles().len()),
    };

    for ti in tri_indices {
        let tri = mesh.triangles()[ti];
        let world: [Vector3<f64>; 3] = [
            mesh.vertices()[tri[0] as usize],
            mesh.vertices()[tri[1] as usize],
            mesh.vertices()[tri[2] as usize],
        ];
        let mut cam: [Vector3<f64>; 3] = [Vector3::zeros(); 3];
        for k in 0..3 {
            let mut p = viewpoint.transform_point(&world[k]);
            p.x -= offset;
            cam[k] = p;
        }
        // Clip against the near plane; each clip vertex carries its camera
        // position plus interpolated uv / world position / normal.
        let mut poly: Vec<ClipVertex> = Vec::with_capacity(4);
        for k in 0..3 {
            poly.push(ClipVertex {
                cam: cam[k],
                uv: mesh.texcoords()[tri[k] as usize],
                world: world[k],
                normal: mesh.normals()[tri[k] as usize],
            });
        }
        let poly = clip_near(poly, rig.near_m);
        if poly.len() < 3 {
            continue;
        }
        // Fan-triangulate the clipped polygon.
        for f in 1..poly.len() - 1 {
            raster_triangle(
                [&poly[0], &poly[f], &poly[f + 1]],
                mesh,
                rig,
                window,
                sun.as_ref(),
                shading,
                intensity.as_deref_mut(),
                depth,
            );
        }
    }
}

#[derive(Clone)]
struct ClipVertex {
    cam: Vector3<f64>,
    uv: [f64; 2],
    world: Vector3<f64>,
    normal: Vector3<f64>,
}

fn lerp_vertex(a: &ClipVertex, b: &ClipVertex, t: f64) -> ClipVertex {
    ClipVertex {
        cam: a.cam + (b.cam - a.cam) * t,
        uv: [
            a.uv[0] + (b.uv[0] - a.uv[0]) * t,
            a.uv[1] + (b.uv[1] - a.uv[1]) * t,
        ],
        world: a.world + (b.world - a.world) * t,
        normal: a.normal + (b.normal - a.normal) * t,
    }
}

fn clip_near(poly: Vec<ClipVertex>, near: f64) -> Vec<ClipVertex> {
    if poly.iter().all(|v| v.cam.z >= near) {
        return poly;
    }
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = &poly[i];
        let b = &poly[(i + 1) % poly.len()];
        let (ain, bin) = (a.cam.z >= near, b.cam.z >= near);
        if ain {
            out.push(a.clone());
        }
        if ain != bin {
            let t = (near - a.cam.z) / (b.cam.z - a.cam.z);
            out.push(lerp_vertex(a, b, t));
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn raster_triangle(
    v: [&ClipVertex; 3],
    mesh: &TexturedMesh,
    rig: &StereoRig,
    window: Window,
    sun: Option<&Vector3<f64>>,
    shading: Option<&ShadingSpec>,
    mut intensity: Option<&mut [f64]>,
    depth: &mut [f64],
) {
    // Screen coordinates (v = x-like, u = y-like) and inverse depth.
    let mut sx = [0.0f64; 3];
    let mut sy = [0.0f64; 3];
    let mut iz = [0.0f64; 3];
    for k in 0..3 {
        let z = v[k].cam.z;
        sx[k] = rig.principal.v + rig.focal_px * v[k].cam.x / z;
        sy[k] = rig.principal.u + rig.focal_px * v[k].cam.y / z;
        iz[k] = 1.0 / z;
    }
    let area = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sy[1] - sy[0]) * (sx[2] - sx[0]);
    if area.abs() < 1e-12 {
        return;
    }

    let u_min = sy
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .ceil()
        .max(window.u0 as f64) as i64;
    let u_max = sy
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .floor()
        .min((window.u0 + window.rows as i64 - 1) as f64) as i64;
    let v_min = sx
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .ceil()
        .max(window.v0 as f64) as i64;
    let v_max = sx
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .floor()
        .min((window.v0 + window.cols as i64 - 1) as f64) as i64;
    if u_min > u_max || v_min > v_max {
        return;
    }

    let inv_area = 1.0 / area;
    for pu in u_min..=u_max {
        let py = pu as f64;
        let row_base = (pu - window.u0) as usize * window.cols;
        for pv in v_min..=v_max {
            let px = pv as f64;
            // Barycentric weights from direct edge evaluation (window-origin
            // independent, hence bit-stable across window choices).
            let w0 = ((sx[1] - px) * (sy[2] - py) - (sy[1] - py) * (sx[2] - px)) * inv_area;
            let w1 = ((sx[2] - px) * (sy[0] - py) - (sy[2] - py) * (sx[0] - px)) * inv_area;
            let w2 = 1.0 - w0 - w1;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            let izp = w0 * iz[0] + w1 * iz[1] + w2 * iz[2];
            let z = 1.0 / izp;
            let idx = row_base + (pv - window.v0) as usize;
            if z >= depth[idx] {
                continue;
            }
            depth[idx] = z;
            if let Some(ref mut img) = intensity {
                // Perspective-correct attribute interpolation.
                let pc = |a0: f64, a1: f64, a2: f64| -> f64 {
                    (w0 * a0 * iz[0] + w1 * a1 * iz[1] + w2 * a2 * iz[2]) * z
                };
                let s = pc(v[0].uv[0], v[1].uv[0], v[2].uv[0]);
                let t = pc(v[0].uv[1], v[1].uv[1], v[2].uv[1]);
                let mut value = mesh.texture().sample_bilinear(s, t);
                if let (Some(sun), Some(spec)) = (sun, shading) {
                    let n = Vector3::new(
                        pc(v[0].normal.x, v[1].normal.x, v[2].normal.x),
                        pc(v[0].normal.y, v[1].normal.y, v[2].normal.y),
                        pc(v[0].normal.z, v[1].normal.z, v[2].normal.z),
                    )
                    .try_normalize(1e-12)
                    .unwrap_or(Vector3::z());
                    let p_world = Vector3::new(
                        pc(v[0].world.x, v[1].world.x, v[2].world.x),
                        pc(v[0].world.y, v[1].world.y, v[2].world.y),
                        pc(v[0].world.z, v[1].world.z, v[2].world.z),
                    );
                    let mut lambert = n.dot(sun).max(0.0);
                    if spec.cast_shadows && lambert > 0.0 {
                        let origin = p_world + n * 1e-4;
                        if mesh.ray_blocked(&origin, sun) {
                            lambert = 0.0;
                        }
                    }
                    value *= spec.ambient + (1.0 - spec.ambient) * lambert;
                }
                img[idx] = value;
            }
        }
    }
}

/// Conservative ground-plane radius covering everything a patch window of
/// side `l` can see around `center`, including nearby relief leaning in.
fn patch_cull_radius(viewpoint: &Pose, rig: &StereoRig, center: &MapPoint, l: usize) -> f64 {
    let depth = viewpoint
        .transform_point(&center.position)
        .z
        .max(rig.near_m);
    l as f64 * depth / rig.focal_px + 0.5
}

/// Renders an `l x l` patch of the mesh centered on `center`'s projection.
pub fn render_patch(
    mesh: &TexturedMesh,
    viewpoint: &Pose,
    rig: &StereoRig,
    side: CameraSide,
    center: &MapPoint,
    l: usize,
    shading: Option<&ShadingSpec>,
) -> Result<Patch, RenderError> {
    let window = patch_window(viewpoint, rig, side, center, l)?;
    let radius = patch_cull_radius(viewpoint, rig, center, l);
    let near = mesh.triangles_near(center.position.x, center.position.y, radius);
    let mut intensity = vec![0.0; l * l];
    let mut depth = vec![f64::INFINITY; l * l];
    rasterize_window(
        mesh,
        Some(&near),
        viewpoint,
        rig,
        side,
        window,
        shading,
        Some(&mut intensity),
        &mut depth,
    );
    let validity = depth.iter().map(|d| d.is_finite()).collect();
    Ok(Patch {
        side: l,
        anchor: PixelCoord::new(
            (window.u0 + (l / 2) as i64) as f64,
            (window.v0 + (l / 2) as i64) as f64,
        ),
        intensity,
        depth,
        validity,
    })
}

/// The patch window for `center` as seen from `viewpoint`, or an error when
/// the projection (rounded to the pixel grid) leaves no room for the patch.
pub fn patch_window(
    viewpoint: &Pose,
    rig: &StereoRig,
    side: CameraSide,
    center: &MapPoint,
    l: usize,
) -> Result<Window, RenderError> {
    let p_cam = viewpoint.transform_point(&center.position);
    let (px, _) =
        crate::geometry::project(&p_cam, rig, side).map_err(|_| RenderError::CenterNotVisible)?;
    let cu = px.u.round();
    let cv = px.v.round();
    let window = Window {
        u0: cu as i64 - (l / 2) as i64,
        v0: cv as i64 - (l / 2) as i64,
        rows: l,
        cols: l,
    };
    if !window.fits(rig) {
        return Err(RenderError::PatchOutOfFrame {
            side: l,
            u: px.u,
            v: px.v,
            rows: rig.rows,
            cols: rig.cols,
        });
    }
    Ok(window)
}

/// Depth-only render of the masked mesh over the same window as a patch.
pub fn render_masked_depth(
    mesh: &TexturedMesh,
    mask: &SamplingMask,
    viewpoint: &Pose,
    rig: &StereoRig,
    side: CameraSide,
    window: Window,
) -> Vec<f64> {
    let mut depth = vec![f64::INFINITY; window.rows * window.cols];
    rasterize_window(
        mesh,
        Some(mask.triangle_indices()),
        viewpoint,
        rig,
        side,
        window,
        None,
        None,
        &mut depth,
    );
    depth
}

/// `render_masked_depth` restricted to triangles near the patch center.
fn render_masked_depth_near(
    mesh: &TexturedMesh,
    mask: &SamplingMask,
    viewpoint: &Pose,
    rig: &StereoRig,
    side: CameraSide,
    window: Window,
    center: &MapPoint,
    l: usize,
) -> Vec<f64> {
    let radius = patch_cull_radius(viewpoint, rig, center, l);
    let near: Vec<u32> = mesh
        .triangles_near(center.position.x, center.position.y, radius)
        .into_iter()
        .filter(|&t| mask.contains_triangle(t))
        .collect();
    let mut depth = vec![f64::INFINITY; window.rows * window.cols];
    rasterize_window(
        mesh,
        Some(&near),
        viewpoint,
        rig,
        side,
        window,
        None,
        None,
        &mut depth,
    );
    depth
}

/// Per-pixel validity of a template from the two rules: (1) the masked
/// render agrees with the full render at the pixel, or (2) the pixel is
/// background lying across a depth discontinuity within `dilation_radius_px`
/// of a rule-1 region.
pub fn compute_validity(full: &Patch, masked_depth: &[f64], params: &ValidityParams) -> Vec<bool> {
    let n = full.side;
    assert_eq!(masked_depth.len(), n * n);
    let mut rule1 = vec![false; n * n];
    for i in 0..n * n {
        rule1[i] = masked_depth[i].is_finite()
            && full.depth[i].is_finite()
            && (masked_depth[i] - full.depth[i]).abs() <= params.depth_tolerance_m;
    }
    // Min foreground depth within a Chebyshev ball, by separable min passes.
    let k = params.dilation_radius_px;
    let big = f64::INFINITY;
    let fg: Vec<f64> = (0..n * n)
        .map(|i| if rule1[i] { full.depth[i] } else { big })
        .collect();
    let mut rows_min = vec![big; n * n];
    for r in 0..n {
        for c in 0..n {
            let lo = c.saturating_sub(k);
            let hi = (c + k).min(n - 1);
            let mut m = big;
            for cc in lo..=hi {
                m = m.min(fg[r * n + cc]);
            }
            rows_min[r * n + c] = m;
        }
    }
    let mut fg_min = vec![big; n * n];
    for c in 0..n {
        for r in 0..n {
            let lo = r.saturating_sub(k);
            let hi = (r + k).min(n - 1);
            let mut m = big;
            for rr in lo..=hi {
                m = m.min(rows_min[rr * n + c]);
            }
            fg_min[r * n + c] = m;
        }
    }
    (0..n * n)
        .map(|i| {
            rule1[i]
                || (full.depth[i].is_finite()
                    && fg_min[i].is_finite()
                    && full.depth[i] - fg_min[i] > params.edge_threshold_m)
        })
        .collect()
}

/// Renders the left or right template for `center`: full-mesh patch plus
/// masked depth, combined into the two-rule validity.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_template(
    mesh: &TexturedMesh,
    mask: &SamplingMask,
    viewpoint: &Pose,
    rig: &StereoRig,
    side: CameraSide,
    center: &MapPoint,
    l: usize,
    params: &ValidityParams,
) -> Result<Patch, RenderError> {
    let mut patch = render_patch(mesh, viewpoint, rig, side, center, l, None)?;
    if mask.covers_all(mesh) {
        // Masked and full renders coincide; rule 1 holds wherever there is
        // a surface at all.
        patch.validity = patch.depth.iter().map(|d| d.is_finite()).collect();
        return Ok(patch);
    }
    let window = Window {
        u0: patch.origin_u(),
        v0: patch.origin_v(),
        rows: l,
        cols: l,
    };
    let masked = render_masked_depth_near(mesh, mask, viewpoint, rig, side, window, center, l);
    patch.validity = compute_validity(&patch, &masked, params);
    Ok(patch)
}

/// Renders a full frame.
pub fn render_frame(
    mesh: &TexturedMesh,
    viewpoint: &Pose,
    rig: &StereoRig,
    side: CameraSide,
    shading: Option<&ShadingSpec>,
) -> RenderedFrame {
    let mut intensity = vec![0.0; rig.rows * rig.cols];
    let mut depth = vec![f64::INFINITY; rig.rows * rig.cols];
    rasterize_window(
        mesh,
        None,
        viewpoint,
        rig,
        side,
        Window {
            u0: 0,
            v0: 0,
            rows: rig.rows,
            cols: rig.cols,
        },
        shading,
        Some(&mut intensity),
        &mut depth,
    );
    RenderedFrame {
        intensity,
        depth,
        pose: viewpoint.clone(),
        rig: rig.clone(),
        side,
    }
}

/// Writes an intensity image as 8-bit grayscale PNG.
pub fn save_intensity_png(
    intensity: &[f64],
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<(), RenderError> {
    let mut img = image::GrayImage::new(cols as u32, rows as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        *px = image::Luma([(intensity[i].clamp(0.0, 1.0) * 255.0).round() as u8]);
    }
    img.save(path).map_err(|e| RenderError::ImageIo {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

/// Loads an 8-bit grayscale PNG as intensities in [0,1].
pub fn load_intensity_png(path: &Path) -> Result<(Vec<f64>, usize, usize), RenderError> {
    let img = image::open(path)
        .map_err(|e| RenderError::ImageIo {
            path: path.to_owned(),
            message: e.to_string(),
        })?
        .into_luma8();
    let (cols, rows) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Ok((data, rows, cols))
}

/// Writes depth as raw little-endian f32 plus a JSON header file
/// `<path>.json` with rows, cols and units.
pub fn save_depth_raw(
    depth: &[f64],
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<(), RenderError> {
    let io_err = |e: std::io::Error| RenderError::ImageIo {
        path: path.to_owned(),
        message: e.to_string(),
    };
    let mut bytes = Vec::with_capacity(depth.len() * 4);
    for &d in depth {
        bytes.extend_from_slice(&(d as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(io_err)?;
    let header = serde_json::json!({"rows": rows, "cols": cols, "units": "m"});
    let mut header_path = path.as_os_str().to_owned();
    header_path.push(".json");
    std::fs::write(std::path::PathBuf::from(header_path), header.to_string()).map_err(io_err)
}

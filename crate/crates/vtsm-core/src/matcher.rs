//! Masked zero-mean normalized cross-correlation template search.
//!
//! The search is an exhaustive integer-offset scan of a query window. Sums
//! over the sliding window come from integral images with a sparse
//! correction for invalid template pixels, and the cross term is a dense
//! product accumulated in lanes, so the whole scan stays exact in f64 while
//! autovectorizing. A brute-force double loop over valid pixels (the test
//! oracle) must agree to 1e-9 on every instance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{compose, project, CameraSide, PixelCoord, Pose, SearchBounds, StereoRig};
use crate::meshmap::MapPoint;
use crate::render::{Patch, Window};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("search window {rows}x{cols} cannot fit a {size} template")]
    WindowTooSmall {
        rows: usize,
        cols: usize,
        size: usize,
    },
    #[error("template valid fraction {fraction:.3} below minimum {min:.3}")]
    InsufficientValidPixels { fraction: f64, min: f64 },
    #[error("template has no intensity variation over its valid pixels")]
    DegenerateTemplate,
    #[error("point projects outside the frame under every extremal pose")]
    PointLeavesFrame,
    #[error("no scorable offset in the search window")]
    NoScorableOffset,
}

/// Derivative filter applied to template and query before correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateFilter {
    Grayscale,
    SobelMagnitude,
    Laplacian,
}

impl TemplateFilter {
    /// Stencil radius; filtered pixels need this margin of sources.
    pub fn radius(&self) -> usize {
        match self {
            TemplateFilter::Grayscale => 0,
            _ => 1,
        }
    }
}

/// One way of matching a template: a size (the full side or half of it) and
/// a filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchModality {
    pub size: usize,
    pub filter: TemplateFilter,
}

/// First-accept modality order: full-size grayscale, half-size grayscale,
/// then the derivative filters at full size.
pub fn default_modalities(template_side: usize) -> Vec<MatchModality> {
    vec![
        MatchModality {
            size: template_side,
            filter: TemplateFilter::Grayscale,
        },
        MatchModality {
            size: template_side / 2,
            filter: TemplateFilter::Grayscale,
        },
        MatchModality {
            size: template_side,
            filter: TemplateFilter::SobelMagnitude,
        },
        MatchModality {
            size: template_side,
            filter: TemplateFilter::Laplacian,
        },
    ]
}

/// Matcher acceptance thresholds and window sizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherParams {
    /// Minimum NCC score for a match to count.
    pub min_score: f64,
    /// Minimum fraction of valid template pixels under a modality.
    pub min_valid_fraction: f64,
    /// Extra pixels added around the projected search bounds.
    pub window_margin_px: f64,
}

impl Default for MatcherParams {
    fn default() -> Self {
        Self {
            min_score: 0.5,
            min_valid_fraction: 0.3,
            window_margin_px: 8.0,
        }
    }
}

/// Result of one template search.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Template-center position in the query image.
    pub location: PixelCoord,
    /// Zero-mean NCC score in [-1, 1].
    pub score: f64,
    pub modality: MatchModality,
    /// Fraction of template pixels that entered the correlation.
    pub valid_fraction: f64,
}

/// Borrowed view of a query intensity image.
#[derive(Debug, Clone, Copy)]
pub struct ImageView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
}

impl<'a> ImageView<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols }
    }
}

/// Template values + validity under a modality, on the modality's grid.
struct PreparedTemplate {
    size: usize,
    /// Zero-mean values over valid pixels, 0 at invalid pixels.
    values: Vec<f64>,
    valid: Vec<bool>,
    valid_count: usize,
    /// Sum of squared zero-mean values.
    energy: f64,
}

fn filter_image(data: &[f64], rows: usize, cols: usize, filter: TemplateFilter) -> Vec<f64> {
    match filter {
        TemplateFilter::Grayscale => data.to_vec(),
        TemplateFilter::SobelMagnitude => {
            let mut out = vec![0.0; rows * cols];
            for r in 1..rows.saturating_sub(1) {
                for c in 1..cols - 1 {
                    let at = |dr: isize, dc: isize| {
                        data[(r as isize + dr) as usize * cols + (c as isize + dc) as usize]
                    };
                    let gx = at(-1, 1) + 2.0 * at(0, 1) + at(1, 1)
                        - at(-1, -1)
                        - 2.0 * at(0, -1)
                        - at(1, -1);
                    let gy = at(1, -1) + 2.0 * at(1, 0) + at(1, 1)
                        - at(-1, -1)
                        - 2.0 * at(-1, 0)
                        - at(-1, 1);
                    out[r * cols + c] = (gx * gx + gy * gy).sqrt();
                }
            }
            out
        }
        TemplateFilter::Laplacian => {
            let mut out = vec![0.0; rows * cols];
            for r in 1..rows.saturating_sub(1) {
                for c in 1..cols - 1 {
                    let i = r * cols + c;
                    out[i] =
                        data[i - cols] + data[i + cols] + data[i - 1] + data[i + 1] - 4.0 * data[i];
                }
            }
            out
        }
    }
}

fn prepare_template(
    template: &Patch,
    modality: MatchModality,
    params: &MatcherParams,
) -> Result<PreparedTemplate, MatchError> {
    let cropped;
    let src = if modality.size < template.side {
        cropped = template.central(modality.size);
        &cropped
    } else {
        template
    };
    let n = src.side;
    let values = filter_image(&src.intensity, n, n, modality.filter);
    let radius = modality.filter.radius();
    let mut valid = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            if r < radius || c < radius || r >= n - radius || c >= n - radius {
                continue;
            }
            let mut ok = true;
            'taps: for dr in 0..=2 * radius {
                for dc in 0..=2 * radius {
                    if !src.validity[(r + dr - radius) * n + (c + dc - radius)] {
                        ok = false;
                        break 'taps;
                    }
                }
            }
            valid[r * n + c] = ok;
        }
    }
    let valid_count = valid.iter().filter(|&&b| b).count();
    let fraction = valid_count as f64 / (n * n) as f64;
    if fraction < params.min_valid_fraction {
        return Err(MatchError::InsufficientValidPixels {
            fraction,
            min: params.min_valid_fraction,
        });
    }
    let sum: f64 = values
        .iter()
        .zip(&valid)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .sum();
    let mean = sum / valid_count as f64;
    let mut zeroed = vec![0.0; n * n];
    let mut energy = 0.0;
    for i in 0..n * n {
        if valid[i] {
            let v = values[i] - mean;
            zeroed[i] = v;
            energy += v * v;
        }
    }
    if energy <= 1e-12 {
        return Err(MatchError::DegenerateTemplate);
    }
    Ok(PreparedTemplate {
        size: n,
        values: zeroed,
        valid,
        valid_count,
        energy,
    })
}

/// Dense dot product with 8-lane accumulation (vectorizes; order is fixed
/// so results are reproducible).
#[inline]
fn dot_rows(t: &[f64], q: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let tc = t.chunks_exact(8);
    let qc = q.chunks_exact(8);
    let tr = tc.remainder();
    let qr = qc.remainder();
    for (a, b) in tc.zip(qc) {
        for k in 0..8 {
            acc[k] += a[k] * b[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (a, b) in tr.iter().zip(qr) {
        s += a * b;
    }
    s
}

/// Cross terms for two horizontally adjacent offsets in one pass over the
/// template, halving template loads on the hot path.
#[inline]
fn cross_pair(
    values: &[f64],
    ts: usize,
    q: &[f64],
    wcols: usize,
    ou: usize,
    ov: usize,
) -> (f64, f64) {
    let mut acc0 = [0.0f64; 4];
    let mut acc1 = [0.0f64; 4];
    for tr in 0..ts {
        let t_row = &values[tr * ts..tr * ts + ts];
        let base = (ou + tr) * wcols + ov;
        let q0 = &q[base..base + ts];
        let q1 = &q[base + 1..base + 1 + ts];
        let tc = t_row.chunks_exact(4);
        let q0c = q0.chunks_exact(4);
        let q1c = q1.chunks_exact(4);
        let rem = tc.remainder().len();
        for ((a, b0), b1) in tc.zip(q0c).zip(q1c) {
            for k in 0..4 {
                acc0[k] += a[k] * b0[k];
                acc1[k] += a[k] * b1[k];
            }
        }
        if rem > 0 {
            let s = ts - rem;
            for k in 0..rem {
                acc0[0] += t_row[s + k] * q0[s + k];
                acc1[0] += t_row[s + k] * q1[s + k];
            }
        }
    }
    (
        (acc0[0] + acc0[1]) + (acc0[2] + acc0[3]),
        (acc1[0] + acc1[1]) + (acc1[2] + acc1[3]),
    )
}

/// Exhaustive masked zero-mean NCC search of `template` over every integer
/// placement inside `window` (frame coordinates). Ties break toward the
/// smallest (u, v).
pub fn ncc_match(
    template: &Patch,
    query: ImageView<'_>,
    window: Window,
    modality: MatchModality,
    params: &MatcherParams,
) -> Result<MatchResult, MatchError> {
    let prepared = prepare_template(template, modality, params)?;
    let ts = prepared.size;

    // Clamp the window to the query frame, shrinking by the filter radius so
    // query-side filtered values always have their full stencil.
    let radius = modality.filter.radius() as i64;
    let u0 = window.u0.max(radius);
    let v0 = window.v0.max(radius);
    let u1 = (window.u0 + window.rows as i64).min(query.rows as i64 - radius);
    let v1 = (window.v0 + window.cols as i64).min(query.cols as i64 - radius);
    if u1 - u0 < ts as i64 || v1 - v0 < ts as i64 {
        return Err(MatchError::WindowTooSmall {
            rows: (u1 - u0).max(0) as usize,
            cols: (v1 - v0).max(0) as usize,
            size: ts,
        });
    }
    let wrows = (u1 - u0) as usize;
    let wcols = (v1 - v0) as usize;

    // Filtered query window. The filter reads one pixel beyond the window,
    // which the clamping above guarantees to exist.
    let q = extract_filtered(query, u0, v0, wrows, wcols, modality.filter);

    // Integral images of q and q^2.
    let stride = wcols + 1;
    let mut sat = vec![0.0f64; (wrows + 1) * stride];
    let mut sat2 = vec![0.0f64; (wrows + 1) * stride];
    for r in 0..wrows {
        let mut row_sum = 0.0;
        let mut row_sum2 = 0.0;
        for c in 0..wcols {
            let v = q[r * wcols + c];
            row_sum += v;
            row_sum2 += v * v;
            sat[(r + 1) * stride + c + 1] = sat[r * stride + c + 1] + row_sum;
            sat2[(r + 1) * stride + c + 1] = sat2[r * stride + c + 1] + row_sum2;
        }
    }

    // Invalid template pixels as flattened window offsets for the sparse
    // correction of the box sums.
    let invalid: Vec<usize> = (0..ts * ts)
        .filter(|&i| !prepared.valid[i])
        .map(|i| (i / ts) * wcols + (i % ts))
        .collect();

    let n_valid = prepared.valid_count as f64;
    let offs_u = wrows - ts + 1;
    let offs_v = wcols - ts + 1;
    let mut best_score = f64::NEG_INFINITY;
    let mut best = None;
    let mut consider = |score: f64, ou: usize, ov: usize| {
        if score > best_score {
            best_score = score;
            best = Some((ou, ov));
        }
    };
    for ou in 0..offs_u {
        let stats_at = |ov: usize| -> (f64, f64) {
            let box_sum = |s: &[f64]| -> f64 {
                s[(ou + ts) * stride + ov + ts]
                    - s[ou * stride + ov + ts]
                    - s[(ou + ts) * stride + ov]
                    + s[ou * stride + ov]
            };
            let mut s_q = box_sum(&sat);
            let mut s_q2 = box_sum(&sat2);
            let base = ou * wcols + ov;
            for &d in &invalid {
                let v = q[base + d];
                s_q -= v;
                s_q2 -= v * v;
            }
            (s_q, s_q2)
        };
        let score_of = |cross: f64, s_q: f64, s_q2: f64| -> Option<f64> {
            let var_q = s_q2 - s_q * s_q / n_valid;
            if var_q <= 1e-12 {
                return None;
            }
            Some(cross / (prepared.energy * var_q).sqrt())
        };
        let mut ov = 0;
        while ov + 2 <= offs_v {
            let (c0, c1) = cross_pair(&prepared.values, ts, &q, wcols, ou, ov);
            for (o, cross) in [c0, c1].into_iter().enumerate() {
                let (s_q, s_q2) = stats_at(ov + o);
                if let Some(score) = score_of(cross, s_q, s_q2) {
                    consider(score, ou, ov + o);
                }
            }
            ov += 2;
        }
        while ov < offs_v {
            let mut cross = 0.0;
            for tr in 0..ts {
                let t_row = &prepared.values[tr * ts..tr * ts + ts];
                let q_row = &q[(ou + tr) * wcols + ov..(ou + tr) * wcols + ov + ts];
                cross += dot_rows(t_row, q_row);
            }
            let (s_q, s_q2) = stats_at(ov);
            if let Some(score) = score_of(cross, s_q, s_q2) {
                consider(score, ou, ov);
            }
            ov += 1;
        }
    }
    let (ou, ov) = best.ok_or(MatchError::NoScorableOffset)?;
    Ok(MatchResult {
        location: PixelCoord::new(
            (u0 + ou as i64 + (ts / 2) as i64) as f64,
            (v0 + ov as i64 + (ts / 2) as i64) as f64,
        ),
        score: best_score,
        modality,
        valid_fraction: n_valid / (ts * ts) as f64,
    })
}

fn extract_filtered(
    query: ImageView<'_>,
    u0: i64,
    v0: i64,
    rows: usize,
    cols: usize,
    filter: TemplateFilter,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    match filter {
        TemplateFilter::Grayscale => {
            for r in 0..rows {
                let src = (u0 as usize + r) * query.cols + v0 as usize;
                out[r * cols..r * cols + cols].copy_from_slice(&query.data[src..src + cols]);
            }
        }
        TemplateFilter::SobelMagnitude => {
            for r in 0..rows {
                for c in 0..cols {
                    let at = |dr: i64, dc: i64| {
                        query.data[((u0 + r as i64 + dr) * query.cols as i64 + v0 + c as i64 + dc)
                            as usize]
                    };
                    let gx = at(-1, 1) + 2.0 * at(0, 1) + at(1, 1)
                        - at(-1, -1)
                        - 2.0 * at(0, -1)
                        - at(1, -1);
                    let gy = at(1, -1) + 2.0 * at(1, 0) + at(1, 1)
                        - at(-1, -1)
                        - 2.0 * at(-1, 0)
                        - at(-1, 1);
                    out[r * cols + c] = (gx * gx + gy * gy).sqrt();
                }
            }
        }
        TemplateFilter::Laplacian => {
            for r in 0..rows {
                for c in 0..cols {
                    let at = |dr: i64, dc: i64| {
                        query.data[((u0 + r as i64 + dr) * query.cols as i64 + v0 + c as i64 + dc)
                            as usize]
                    };
                    out[r * cols + c] =
                        at(-1, 0) + at(1, 0) + at(0, -1) + at(0, 1) - 4.0 * at(0, 0);
                }
            }
        }
    }
    out
}

/// Search window for `point` under the pose uncertainty `bounds`: bounding
/// rectangle of the point's projections from the nominal viewpoint plus the
/// 12 extremal single-axis perturbations, inflated by the template half-size
/// and the window margin.
pub fn compute_search_window(
    bounds: &SearchBounds,
    viewpoint: &Pose,
    point: &MapPoint,
    rig: &StereoRig,
    side: CameraSide,
    template_size: usize,
    params: &MatcherParams,
) -> Result<Window, MatchError> {
    let frame = viewpoint.to_frame();
    let mut deltas = vec![Pose::identity(frame)];
    for axis in 0..3 {
        let mut e = nalgebra::Vector3::zeros();
        e[axis] = 1.0;
        for sign in [-1.0, 1.0] {
            deltas.push(Pose::from_axis_angle(
                nalgebra::Vector3::z(),
                0.0,
                e * (sign * bounds.translation_m),
                frame,
                frame,
            ));
            deltas.push(Pose::from_axis_angle(
                e,
                sign * bounds.rotation_deg.to_radians(),
                nalgebra::Vector3::zeros(),
                frame,
                frame,
            ));
        }
    }
    let mut min_u = f64::INFINITY;
    let mut max_u = f64::NEG_INFINITY;
    let mut min_v = f64::INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    let mut any = false;
    for d in &deltas {
        let pose = compose(viewpoint, d).expect("frame-preserving delta");
        let p_cam = pose.transform_point(&point.position);
        if let Ok((px, _)) = project(&p_cam, rig, side) {
            min_u = min_u.min(px.u);
            max_u = max_u.max(px.u);
            min_v = min_v.min(px.v);
            max_v = max_v.max(px.v);
            any = true;
        }
    }
    if !any {
        return Err(MatchError::PointLeavesFrame);
    }
    let half = (template_size / 2) as f64;
    let m = params.window_margin_px;
    let u0 = (min_u - half - m).floor().max(0.0) as i64;
    let v0 = (min_v - half - m).floor().max(0.0) as i64;
    let u1 = ((max_u + half + m).ceil() as i64 + 1).min(rig.rows as i64);
    let v1 = ((max_v + half + m).ceil() as i64 + 1).min(rig.cols as i64);
    if u1 - u0 < template_size as i64 || v1 - v0 < template_size as i64 {
        return Err(MatchError::PointLeavesFrame);
    }
    Ok(Window {
        u0,
        v0,
        rows: (u1 - u0) as usize,
        cols: (v1 - v0) as usize,
    })
}

/// Accepted stereo match: one result per camera, same modality.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoMatch {
    pub left: MatchResult,
    pub right: MatchResult,
}

impl StereoMatch {
    pub fn disparity(&self) -> f64 {
        self.left.location.v - self.right.location.v
    }
}

/// Matches the left and right templates independently in their search
/// windows, trying modalities in order and accepting the first one whose
/// results pass the epipolar gate (`|u_L - u_R| <= epipolar_threshold`),
/// the minimum score on both sides, and positive disparity. `None` is a
/// rejection, not an error; the caller resamples.
#[allow(clippy::too_many_arguments)]
pub fn match_stereo(
    left_template: &Patch,
    right_template: &Patch,
    left_query: ImageView<'_>,
    right_query: ImageView<'_>,
    viewpoint: &Pose,
    point: &MapPoint,
    rig: &StereoRig,
    bounds: &SearchBounds,
    modalities: &[MatchModality],
    epipolar_threshold: f64,
    params: &MatcherParams,
) -> Option<StereoMatch> {
    for &modality in modalities {
        let window_l = match compute_search_window(
            bounds,
            viewpoint,
            point,
            rig,
            CameraSide::Left,
            modality.size,
            params,
        ) {
            Ok(w) => w,
            Err(_) => continue,
        };
        let window_r = match compute_search_window(
            bounds,
            viewpoint,
            point,
            rig,
            CameraSide::Right,
            modality.size,
            params,
        ) {
            Ok(w) => w,
            Err(_) => continue,
        };
        let left = match ncc_match(left_template, left_query, window_l, modality, params) {
            Ok(r) => r,
            Err(_) => continue,
        };
        let right = match ncc_match(right_template, right_query, window_r, modality, params) {
            Ok(r) => r,
            Err(_) => continue,
        };
        let epipolar_ok = (left.location.u - right.location.u).abs() <= epipolar_threshold;
        let scores_ok = left.score >= params.min_score && right.score >= params.min_score;
        let disparity_ok = left.location.v - right.location.v > 0.0;
        if epipolar_ok && scores_ok && disparity_ok {
            return Some(StereoMatch { left, right });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force masked zero-mean NCC, straight from the definition.
    fn oracle_ncc(
        template: &[f64],
        valid: &[bool],
        ts: usize,
        query: &[f64],
        qrows: usize,
        qcols: usize,
        window: (usize, usize, usize, usize),
    ) -> Option<(usize, usize, f64)> {
        let (u0, v0, wrows, wcols) = window;
        assert!(u0 + wrows <= qrows && v0 + wcols <= qcols);
        let mut best: Option<(usize, usize, f64)> = None;
        for ou in 0..=wrows - ts {
            for ov in 0..=wcols - ts {
                let mut n = 0usize;
                let mut mt = 0.0;
                let mut mq = 0.0;
                for r in 0..ts {
                    for c in 0..ts {
                        if valid[r * ts + c] {
                            n += 1;
                            mt += template[r * ts + c];
                            mq += query[(u0 + ou + r) * qcols + v0 + ov + c];
                        }
                    }
                }
                if n == 0 {
                    continue;
                }
                mt /= n as f64;
                mq /= n as f64;
                let mut st = 0.0;
                let mut sq = 0.0;
                let mut cross = 0.0;
                for r in 0..ts {
                    for c in 0..ts {
                        if valid[r * ts + c] {
                            let a = template[r * ts + c] - mt;
                            let b = query[(u0 + ou + r) * qcols + v0 + ov + c] - mq;
                            st += a * a;
                            sq += b * b;
                            cross += a * b;
                        }
                    }
                }
                if st <= 1e-12 || sq <= 1e-12 {
                    continue;
                }
                let score = cross / (st * sq).sqrt();
                if best.is_none() || score > best.unwrap().2 {
                    best = Some((ou, ov, score));
                }
            }
        }
        best
    }

    fn patch_from(data: Vec<f64>, valid: Vec<bool>, side: usize) -> Patch {
        Patch {
            side,
            anchor: PixelCoord::new((side / 2) as f64, (side / 2) as f64),
            depth: vec![1.0; side * side],
            intensity: data,
            validity: valid,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
        (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn self_match_scores_one_at_source_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (qr, qc) = (96usize, 120usize);
        let query = random_image(&mut rng, qr, qc);
        let ts = 32;
        let (su, sv) = (21usize, 44usize);
        let mut tdata = vec![0.0; ts * ts];
        for r in 0..ts {
            for c in 0..ts {
                tdata[r * ts + c] = query[(su + r) * qc + sv + c];
            }
        }
        let template = patch_from(tdata, vec![true; ts * ts], ts);
        let window = Window {
            u0: 0,
            v0: 0,
            rows: qr,
            cols: qc,
        };
        let modality = MatchModality {
            size: ts,
            filter: TemplateFilter::Grayscale,
        };
        let result = ncc_match(
            &template,
            ImageView::new(&query, qr, qc),
            window,
            modality,
            &MatcherParams::default(),
        )
        .unwrap();
        assert_eq!(result.location.u as usize, su + ts / 2);
        assert_eq!(result.location.v as usize, sv + ts / 2);
        assert!((result.score - 1.0).abs() < 1e-12, "score {}", result.score);
    }

    #[test]
    fn ncc_is_invariant_to_affine_intensity_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let (qr, qc) = (80usize, 80usize);
        let query = random_image(&mut rng, qr, qc);
        let ts = 16;
        let (su, sv) = (30usize, 12usize);
        let mut tdata = vec![0.0; ts * ts];
        for r in 0..ts {
            for c in 0..ts {
                tdata[r * ts + c] = query[(su + r) * qc + sv + c];
            }
        }
        let scaled: Vec<f64> = query.iter().map(|&v| 0.35 * v + 0.2).collect();
        let template = patch_from(tdata, vec![true; ts * ts], ts);
        let window = Window {
            u0: 0,
            v0: 0,
            rows: qr,
            cols: qc,
        };
        let modality = MatchModality {
            size: ts,
            filter: TemplateFilter::Grayscale,
        };
        let result = ncc_match(
            &template,
            ImageView::new(&scaled, qr, qc),
            window,
            modality,
            &MatcherParams::default(),
        )
        .unwrap();
        assert_eq!(result.location.u as usize, su + ts / 2);
        assert_eq!(result.location.v as usize, sv + ts / 2);
        assert!((result.score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn masked_match_agrees_with_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for trial in 0..25 {
            let (qr, qc) = (rng.gen_range(48..80), rng.gen_range(48..96));
            let query = random_image(&mut rng, qr, qc);
            let ts = [8usize, 16, 24][trial % 3];
            let mut tdata = random_image(&mut rng, ts, ts);
            // Plant the template (on its valid pixels) somewhere in the query.
            let valid: Vec<bool> = (0..ts * ts).map(|_| rng.gen_bool(0.6)).collect();
            let (pu, pv) = (rng.gen_range(0..qr - ts), rng.gen_range(0..qc - ts));
            for r in 0..ts {
                for c in 0..ts {
                    if valid[r * ts + c] {
                        tdata[r * ts + c] = query[(pu + r) * qc + pv + c];
                    }
                }
            }
            let template = patch_from(tdata.clone(), valid.clone(), ts);
            let window = Window {
                u0: 0,
                v0: 0,
                rows: qr,
                cols: qc,
            };
            let modality = MatchModality {
                size: ts,
                filter: TemplateFilter::Grayscale,
            };
            let params = MatcherParams {
                min_valid_fraction: 0.2,
                ..Default::default()
            };
            let got = ncc_match(
                &template,
                ImageView::new(&query, qr, qc),
                window,
                modality,
                &params,
            )
            .unwrap();
            let (ou, ov, score) =
                oracle_ncc(&tdata, &valid, ts, &query, qr, qc, (0, 0, qr, qc)).unwrap();
            assert_eq!(got.location.u as usize, ou + ts / 2, "trial {trial}");
            assert_eq!(got.location.v as usize, ov + ts / 2, "trial {trial}");
            assert!((got.score - score).abs() < 1e-9, "trial {trial}");
            assert_eq!(
                (ou, ov),
                (pu, pv),
                "planted offset recovered, trial {trial}"
            );
        }
    }

    #[test]
    fn scores_never_exceed_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..20 {
            let (qr, qc) = (40usize, 40usize);
            let query = random_image(&mut rng, qr, qc);
            let ts = 12;
            let tdata = random_image(&mut rng, ts, ts);
            let template = patch_from(tdata, vec![true; ts * ts], ts);
            let window = Window {
                u0: 0,
                v0: 0,
                rows: qr,
                cols: qc,
            };
            let modality = MatchModality {
                size: ts,
                filter: TemplateFilter::Grayscale,
            };
            let r = ncc_match(
                &template,
                ImageView::new(&query, qr, qc),
                window,
                modality,
                &MatcherParams::default(),
            )
            .unwrap();
            assert!(r.score.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn degenerate_template_is_rejected() {
        let ts = 16;
        let template = patch_from(vec![0.5; ts * ts], vec![true; ts * ts], ts);
        let query = vec![0.1; 64 * 64];
        let window = Window {
            u0: 0,
            v0: 0,
            rows: 64,
            cols: 64,
        };
        let modality = MatchModality {
            size: ts,
            filter: TemplateFilter::Grayscale,
        };
        assert!(matches!(
            ncc_match(
                &template,
                ImageView::new(&query, 64, 64),
                window,
                modality,
                &MatcherParams::default()
            ),
            Err(MatchError::DegenerateTemplate)
        ));
    }

    #[test]
    fn insufficient_validity_is_rejected() {
        let ts = 16;
        let mut valid = vec![false; ts * ts];
        valid[0] = true;
        valid[5] = true;
        let template = patch_from(vec![0.5; ts * ts], valid, ts);
        let query = vec![0.1; 64 * 64];
        let window = Window {
            u0: 0,
            v0: 0,
            rows: 64,
            cols: 64,
        };
        let modality = MatchModality {
            size: ts,
            filter: TemplateFilter::Grayscale,
        };
        assert!(matches!(
            ncc_match(
                &template,
                ImageView::new(&query, 64, 64),
                window,
                modality,
                &MatcherParams::default()
            ),
            Err(MatchError::InsufficientValidPixels { .. })
        ));
    }

    #[test]
    fn filtered_match_agrees_with_filtered_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for &filter in &[TemplateFilter::SobelMagnitude, TemplateFilter::Laplacian] {
            let (qr, qc) = (64usize, 72usize);
            let query = random_image(&mut rng, qr, qc);
            let ts = 16;
            let (pu, pv) = (17usize, 25usize);
            let mut tdata = vec![0.0; ts * ts];
            for r in 0..ts {
                for c in 0..ts {
                    tdata[r * ts + c] = query[(pu + r) * qc + pv + c];
                }
            }
            let template = patch_from(tdata.clone(), vec![true; ts * ts], ts);
            let window = Window {
                u0: 2,
                v0: 2,
                rows: qr - 4,
                cols: qc - 4,
            };
            let modality = MatchModality { size: ts, filter };
            let got = ncc_match(
                &template,
                ImageView::new(&query, qr, qc),
                window,
                modality,
                &MatcherParams::default(),
            )
            .unwrap();

            // Oracle: filter template and the full query with the same
            // stencils, erode template validity, then brute-force NCC.
            let ft = filter_image(&tdata, ts, ts, filter);
            let mut fvalid = vec![false; ts * ts];
            for r in 1..ts - 1 {
                for c in 1..ts - 1 {
                    fvalid[r * ts + c] = true;
                }
            }
            let fq = filter_image(&query, qr, qc, filter);
            // Match the implementation's clamped window (radius 1).
            let (ou, ov, score) =
                oracle_ncc(&ft, &fvalid, ts, &fq, qr, qc, (2, 2, qr - 4, qc - 4)).unwrap();
            assert_eq!(got.location.u as usize, 2 + ou + ts / 2, "{filter:?}");
            assert_eq!(got.location.v as usize, 2 + ov + ts / 2, "{filter:?}");
            assert!((got.score - score).abs() < 1e-9, "{filter:?}");
            assert_eq!((2 + ou, 2 + ov), (pu, pv), "{filter:?}");
        }
    }

    #[test]
    fn zero_bounds_window_is_template_footprint_plus_margin() {
        let rig = StereoRig::new(
            500.0,
            PixelCoord::new(240.0, 320.0),
            0.1,
            480,
            640,
            0.05,
            100.0,
        )
        .unwrap();
        let viewpoint = Pose::look_at(
            nalgebra::Vector3::new(0.0, -1.0, 1.5),
            nalgebra::Vector3::new(0.0, 0.0, 0.0),
            "world",
            "cam",
        )
        .unwrap();
        let point = MapPoint {
            position: nalgebra::Vector3::new(0.0, 0.0, 0.0),
            vertex_index: 0,
            normal: nalgebra::Vector3::z(),
        };
        let params = MatcherParams::default();
        let w = compute_search_window(
            &SearchBounds::zero(),
            &viewpoint,
            &point,
            &rig,
            CameraSide::Left,
            64,
            &params,
        )
        .unwrap();
        // Point projects to a single pixel: window = template + 2*margin (+1
        // for the ceil/floor bracket around the fractional projection).
        assert!(w.rows <= 64 + 2 * 8 + 2);
        assert!(w.cols <= 64 + 2 * 8 + 2);
        assert!(w.rows >= 64 + 2 * 8);
        assert!(w.cols >= 64 + 2 * 8);
    }

    #[test]
    fn windows_nest_as_bounds_grow() {
        let rig = StereoRig::new(
            1100.0,
            PixelCoord::new(480.0, 640.0),
            0.2,
            960,
            1280,
            0.1,
            100.0,
        )
        .unwrap();
        let viewpoint = Pose::look_at(
            nalgebra::Vector3::new(0.0, -2.2, 1.7),
            nalgebra::Vector3::new(0.0, 0.0, 0.0),
            "world",
            "cam",
        )
        .unwrap();
        let point = MapPoint {
            position: nalgebra::Vector3::new(0.1, 0.2, 0.0),
            vertex_index: 0,
            normal: nalgebra::Vector3::z(),
        };
        let params = MatcherParams::default();
        let mut prev: Option<Window> = None;
        for t in [0.0, 0.05, 0.1, 0.2] {
            let w = compute_search_window(
                &SearchBounds::new(t, 1.5).unwrap(),
                &viewpoint,
                &point,
                &rig,
                CameraSide::Left,
                128,
                &params,
            )
            .unwrap();
            if let Some(p) = prev {
                assert!(w.u0 <= p.u0 && w.v0 <= p.v0);
                assert!(w.u0 + w.rows as i64 >= p.u0 + p.rows as i64);
                assert!(w.v0 + w.cols as i64 >= p.v0 + p.cols as i64);
            }
            prev = Some(w);
        }
    }

    #[test]
    fn paper_scale_window_is_hundreds_of_pixels() {
        // 20 Mpixel rig, ~4 m depth, 0.20 m / 1.5 deg uncertainty: the search
        // window lands in the several-hundred-pixel range per side.
        let rig = StereoRig::new(
            3440.0,
            PixelCoord::new(1824.0, 2736.0),
            0.4,
            3648,
            5472,
            0.2,
            100.0,
        )
        .unwrap();
        let viewpoint = Pose::look_at(
            nalgebra::Vector3::new(0.0, -3.4, 2.0),
            nalgebra::Vector3::new(0.0, 0.0, 0.0),
            "world",
            "cam",
        )
        .unwrap();
        let point = MapPoint {
            position: nalgebra::Vector3::new(0.0, 0.0, 0.0),
            vertex_index: 0,
            normal: nalgebra::Vector3::z(),
        };
        let w = compute_search_window(
            &SearchBounds::new(0.20, 1.5).unwrap(),
            &viewpoint,
            &point,
            &rig,
            CameraSide::Left,
            256,
            &MatcherParams::default(),
        )
        .unwrap();
        assert!(w.rows > 400 && w.rows < 1200, "rows {}", w.rows);
        assert!(w.cols > 400 && w.cols < 1200, "cols {}", w.cols);
    }

    #[test]
    fn modality_order_does_not_change_the_only_possible_acceptance() {
        // The full-size template has too few valid pixels, so only the
        // half-size modality can accept; its result must not depend on where
        // it sits in the order.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (qr, qc) = (128usize, 128usize);
        let query = random_image(&mut rng, qr, qc);
        let ts = 48;
        let (pu, pv) = (40usize, 36usize);
        let mut tdata = random_image(&mut rng, ts, ts);
        let mut valid = vec![false; ts * ts];
        // Valid only in the central quarter: full-size fraction 0.25 < 0.3.
        for r in ts / 4..3 * ts / 4 {
            for c in ts / 4..3 * ts / 4 {
                valid[r * ts + c] = true;
                tdata[r * ts + c] = query[(pu + r) * qc + pv + c];
            }
        }
        let template = patch_from(tdata, valid, ts);
        let window = Window {
            u0: 0,
            v0: 0,
            rows: qr,
            cols: qc,
        };
        let params = MatcherParams::default();
        let big = MatchModality {
            size: ts,
            filter: TemplateFilter::Grayscale,
        };
        let small = MatchModality {
            size: ts / 2,
            filter: TemplateFilter::Grayscale,
        };
        assert!(ncc_match(
            &template,
            ImageView::new(&query, qr, qc),
            window,
            big,
            &params
        )
        .is_err());
        let a = ncc_match(
            &template,
            ImageView::new(&query, qr, qc),
            window,
            small,
            &params,
        )
        .unwrap();
        assert_eq!(a.location.u as usize, pu + ts / 2);
        assert_eq!(a.location.v as usize, pv + ts / 2);
        assert!((a.score - 1.0).abs() < 1e-9);
    }
}

//! Textured triangle mesh maps, sampling masks and visibility queries.
//!
//! The on-disk format is a small Wavefront OBJ subset (`v`, `vt`, `f` with
//! `v/vt` indices, `o` groups named `persistent*` / `mutable*` carrying the
//! per-triangle material tag) plus a sidecar JSON `{"texture": <path>}`
//! pointing at an 8-bit RGB PNG. Masks serialize as a JSON list of triangle
//! indices.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraSide, Pose, StereoRig};
use crate::raycast::TriangleGrid;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("face {face} references out-of-range index {index}")]
    IndexOutOfRange { face: usize, index: i64 },
    #[error("triangle {index} is degenerate (area {area:.3e} m^2)")]
    DegenerateTriangle { index: usize, area: f64 },
    #[error("texture coordinate {index} outside [0,1]")]
    TexCoordOutOfRange { index: usize },
    #[error("mask triangle index {index} out of range for mesh with {count} triangles")]
    MaskOutOfRange { index: u32, count: usize },
    #[error("no visible mask vertices to sample from")]
    NoVisiblePoints,
    #[error("bad sidecar {path}: {message}")]
    Sidecar { path: PathBuf, message: String },
}

/// Whether a triangle is expected to persist between mapping and
/// relocalization (rock, bedrock) or may change (sand).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaterialTag {
    Persistent,
    Mutable,
}

/// Grayscale texture image, values in [0,1], row-major with `t` mapping to
/// rows and `s` to columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Texture {
    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn sample_bilinear(&self, s: f64, t: f64) -> f64 {
        let x = (s.clamp(0.0, 1.0)) * (self.width - 1) as f64;
        let y = (t.clamp(0.0, 1.0)) * (self.height - 1) as f64;
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let d = &self.data;
        let top = d[y0 * self.width + x0] * (1.0 - fx) + d[y0 * self.width + x1] * fx;
        let bot = d[y1 * self.width + x0] * (1.0 - fx) + d[y1 * self.width + x1] * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Triangle mesh with per-vertex texture coordinates, per-triangle material
/// tags and a grayscale texture. Immutable once built.
#[derive(Debug, Clone)]
pub struct TexturedMesh {
    vertices: Vec<Vector3<f64>>,
    texcoords: Vec<[f64; 2]>,
    triangles: Vec<[u32; 3]>,
    materials: Vec<MaterialTag>,
    normals: Vec<Vector3<f64>>,
    texture: Texture,
    grid: TriangleGrid,
}

impl TexturedMesh {
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        texcoords: Vec<[f64; 2]>,
        triangles: Vec<[u32; 3]>,
        materials: Vec<MaterialTag>,
        texture: Texture,
    ) -> Result<Self, MeshError> {
        assert_eq!(vertices.len(), texcoords.len());
        assert_eq!(triangles.len(), materials.len());
        let n = vertices.len() as i64;
        for (fi, tri) in triangles.iter().enumerate() {
            for &i in tri {
                if i as i64 >= n {
                    return Err(MeshError::IndexOutOfRange {
                        face: fi,
                        index: i as i64,
                    });
                }
            }
            let a = &vertices[tri[0] as usize];
            let b = &vertices[tri[1] as usize];
            let c = &vertices[tri[2] as usize];
            let area = 0.5 * (b - a).cross(&(c - a)).norm();
            if area <= 1e-12 {
                return Err(MeshError::DegenerateTriangle { index: fi, area });
            }
        }
        for (i, tc) in texcoords.iter().enumerate() {
            if !(0.0..=1.0).contains(&tc[0]) || !(0.0..=1.0).contains(&tc[1]) {
                return Err(MeshError::TexCoordOutOfRange { index: i });
            }
        }
        let normals = vertex_normals(&vertices, &triangles);
        let grid = TriangleGrid::build(&vertices, &triangles);
        Ok(Self {
            vertices,
            texcoords,
            triangles,
            materials,
            normals,
            texture,
            grid,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn texcoords(&self) -> &[[f64; 2]] {
        &self.texcoords
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn materials(&self) -> &[MaterialTag] {
        &self.materials
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn texture(&self) -> &Texture {
        &self.texture
    }

    /// Rebuilds the mesh with new vertex positions, keeping connectivity,
    /// texture coordinates and material tags.
    pub fn with_vertices(&self, vertices: Vec<Vector3<f64>>) -> Result<Self, MeshError> {
        Self::new(
            vertices,
            self.texcoords.clone(),
            self.triangles.clone(),
            self.materials.clone(),
            self.texture.clone(),
        )
    }

    /// Rebuilds the mesh with a different texture.
    pub fn with_texture(&self, texture: Texture) -> Self {
        let mut m = self.clone();
        m.texture = texture;
        m
    }

    /// Whether the open segment from `origin` toward vertex `vertex_index`
    /// is blocked by any triangle more than `tol` meters before the vertex.
    pub fn segment_occluded(&self, origin: &Vector3<f64>, vertex_index: u32, tol: f64) -> bool {
        let target = &self.vertices[vertex_index as usize];
        let dir = target - origin;
        let len = dir.norm();
        if len <= tol {
            return false;
        }
        let t_hi = 1.0 - tol / len;
        self.grid.any_hit(
            &self.vertices,
            &self.triangles,
            origin,
            &dir,
            1e-9,
            t_hi,
            Some(vertex_index),
        )
    }

    /// Whether anything blocks the ray from `origin` in direction `dir`
    /// (used for sun shadows; `origin` should be nudged off the surface).
    pub fn ray_blocked(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> bool {
        self.grid.any_hit(
            &self.vertices,
            &self.triangles,
            origin,
            dir,
            1e-9,
            f64::INFINITY,
            None,
        )
    }

    /// Triangle indices within `radius` (in XY) of a point, conservatively
    /// from the acceleration grid.
    pub fn triangles_near(&self, x: f64, y: f64, radius: f64) -> Vec<u32> {
        self.grid.triangles_near_disc(x, y, radius)
    }

    /// Topmost surface point and smooth normal on the vertical through
    /// `(x, y)`, for terrain-like meshes.
    pub fn surface_at_xy(&self, x: f64, y: f64) -> Option<(f64, Vector3<f64>)> {
        let top = self.grid.max_z() + 1.0;
        let origin = Vector3::new(x, y, top);
        let dir = Vector3::new(0.0, 0.0, -1.0);
        let (t, ti) = self.grid.closest_hit(
            &self.vertices,
            &self.triangles,
            &origin,
            &dir,
            1e-9,
            f64::INFINITY,
        )?;
        let z = top - t;
        let tri = self.triangles[ti as usize];
        let (a, b, c) = (
            &self.vertices[tri[0] as usize],
            &self.vertices[tri[1] as usize],
            &self.vertices[tri[2] as usize],
        );
        // 2-D barycentric coordinates in the XY plane.
        let det = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
        let (w0, w1, w2) = if det.abs() < 1e-15 {
            (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
        } else {
            let w1 = ((x - a.x) * (c.y - a.y) - (y - a.y) * (c.x - a.x)) / det;
            let w2 = ((b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x)) / det;
            (1.0 - w1 - w2, w1, w2)
        };
        let n = (self.normals[tri[0] as usize] * w0
            + self.normals[tri[1] as usize] * w1
            + self.normals[tri[2] as usize] * w2)
            .try_normalize(1e-12)
            .unwrap_or(Vector3::z());
        Some((z, n))
    }

    pub fn load(obj_path: &Path) -> Result<Self, MeshError> {
        let io_err = |source| MeshError::Io {
            path: obj_path.to_owned(),
            source,
        };
        let content = fs::read_to_string(obj_path).map_err(io_err)?;
        let parse_err = |line: usize, message: String| MeshError::Parse {
            path: obj_path.to_owned(),
            line,
            message,
        };

        let mut positions: Vec<Vector3<f64>> = Vec::new();
        let mut uvs: Vec<[f64; 2]> = Vec::new();
        // (position index, uv index) pairs become output vertices; a position
        // used with two different uvs is split.
        let mut vertex_of: HashMap<(u32, u32), u32> = HashMap::new();
        let mut vertices = Vec::new();
        let mut texcoords = Vec::new();
        let mut triangles: Vec<[u32; 3]> = Vec::new();
        let mut materials = Vec::new();
        let mut current_tag = MaterialTag::Persistent;

        for (ln, raw) in content.lines().enumerate() {
            let line_no = ln + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            match key {
                "v" => {
                    let mut read = || -> Result<f64, MeshError> {
                        parts
                            .next()
                            .ok_or_else(|| parse_err(line_no, "missing vertex coordinate".into()))?
                            .parse()
                            .map_err(|e| parse_err(line_no, format!("bad float: {e}")))
                    };
                    positions.push(Vector3::new(read()?, read()?, read()?));
                }
                "vt" => {
                    let mut read = || -> Result<f64, MeshError> {
                        parts
                            .next()
                            .ok_or_else(|| parse_err(line_no, "missing uv coordinate".into()))?
                            .parse()
                            .map_err(|e| parse_err(line_no, format!("bad float: {e}")))
                    };
                    uvs.push([read()?, read()?]);
                }
                "o" | "g" => {
                    let name = parts.next().unwrap_or("");
                    current_tag = if name.starts_with("mutable") {
                        MaterialTag::Mutable
                    } else {
                        MaterialTag::Persistent
                    };
                }
                "f" => {
                    let mut corner_ids = Vec::with_capacity(3);
                    for corner in parts {
                        let mut it = corner.split('/');
                        let vi: i64 = it
                            .next()
                            .unwrap()
                            .parse()
                            .map_err(|e| parse_err(line_no, format!("bad face index: {e}")))?;
                        let ti: i64 = match it.next() {
                            Some(s) if !s.is_empty() => s
                                .parse()
                                .map_err(|e| parse_err(line_no, format!("bad uv index: {e}")))?,
                            _ => vi,
                        };
                        let resolve = |idx: i64, len: usize| -> Result<u32, MeshError> {
                            let resolved = if idx < 0 { len as i64 + idx } else { idx - 1 };
                            if resolved < 0 || resolved >= len as i64 {
                                Err(MeshError::IndexOutOfRange {
                                    face: triangles.len(),
                                    index: idx,
                                })
                            } else {
                                Ok(resolved as u32)
                            }
                        };
                        let pi = resolve(vi, positions.len())?;
                        let ui = if uvs.is_empty() {
                            0
                        } else {
                            resolve(ti, uvs.len())?
                        };
                        let next_id = vertex_of.len() as u32;
                        let id = *vertex_of.entry((pi, ui)).or_insert(next_id);
                        if id == next_id {
                            vertices.push(positions[pi as usize]);
                            texcoords.push(if uvs.is_empty() {
                                [0.0, 0.0]
                            } else {
                                uvs[ui as usize]
                            });
                        }
                        corner_ids.push(id);
                    }
                    if corner_ids.len() != 3 {
                        return Err(parse_err(
                            line_no,
                            format!("expected triangle, got {} corners", corner_ids.len()),
                        ));
                    }
                    triangles.push([corner_ids[0], corner_ids[1], corner_ids[2]]);
                    materials.push(current_tag);
                }
                // Ignore other directives (vn, s, mtllib, usemtl).
                _ => {}
            }
        }

        let sidecar = obj_path.with_extension("json");
        let texture = if sidecar.exists() {
            let text = fs::read_to_string(&sidecar).map_err(io_err)?;
            let meta: SidecarJson =
                serde_json::from_str(&text).map_err(|e| MeshError::Sidecar {
                    path: sidecar.clone(),
                    message: e.to_string(),
                })?;
            let tex_path = sidecar
                .parent()
                .unwrap_or(Path::new("."))
                .join(meta.texture);
            load_texture_png(&tex_path)?
        } else {
            Texture::constant(4, 4, 0.5)
        };

        Self::new(vertices, texcoords, triangles, materials, texture)
    }

    /// Writes `<stem>.obj`, `<stem>.json` and the texture PNG next to it.
    pub fn save(&self, obj_path: &Path, texture_name: &str) -> Result<(), MeshError> {
        let io_err = |source| MeshError::Io {
            path: obj_path.to_owned(),
            source,
        };
        let file = fs::File::create(obj_path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        let mut write =
            |s: String| -> Result<(), MeshError> { w.write_all(s.as_bytes()).map_err(io_err) };
        for v in &self.vertices {
            // Shortest round-trip float formatting keeps vertex data bit-exact.
            write(format!("v {} {} {}\n", v.x, v.y, v.z))?;
        }
        for tc in &self.texcoords {
            write(format!("vt {} {}\n", tc[0], tc[1]))?;
        }
        let mut current: Option<MaterialTag> = None;
        let mut group = 0usize;
        for (tri, &tag) in self.triangles.iter().zip(&self.materials) {
            if current != Some(tag) {
                let name = match tag {
                    MaterialTag::Persistent => "persistent",
                    MaterialTag::Mutable => "mutable",
                };
                write(format!("o {name}_{group}\n"))?;
                group += 1;
                current = Some(tag);
            }
            write(format!(
                "f {a}/{a} {b}/{b} {c}/{c}\n",
                a = tri[0] + 1,
                b = tri[1] + 1,
                c = tri[2] + 1
            ))?;
        }
        drop(w);

        let sidecar = obj_path.with_extension("json");
        let meta = serde_json::to_string_pretty(&SidecarJson {
            texture: texture_name.to_owned(),
        })
        .expect("sidecar serializes");
        fs::write(&sidecar, meta).map_err(io_err)?;
        let tex_path = obj_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(texture_name);
        save_texture_png(&self.texture, &tex_path)
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarJson {
    texture: String,
}

fn load_texture_png(path: &Path) -> Result<Texture, MeshError> {
    let io_err = |message: String| MeshError::Sidecar {
        path: path.to_owned(),
        message,
    };
    let img = image::open(path)
        .map_err(|e| io_err(e.to_string()))?
        .into_rgb8();
    let (width, height) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; width * height];
    for (i, px) in img.pixels().enumerate() {
        // ITU-R 601 luma; weights sum to 1 so gray images stay k/255.
        data[i] =
            (0.299 * px.0[0] as f64 + 0.587 * px.0[1] as f64 + 0.114 * px.0[2] as f64) / 255.0;
    }
    Ok(Texture {
        width,
        height,
        data,
    })
}

fn save_texture_png(tex: &Texture, path: &Path) -> Result<(), MeshError> {
    let mut img = image::RgbImage::new(tex.width as u32, tex.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let v = (tex.data[i].clamp(0.0, 1.0) * 255.0).round() as u8;
        *px = image::Rgb([v, v, v]);
    }
    img.save(path).map_err(|e| MeshError::Sidecar {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn vertex_normals(vertices: &[Vector3<f64>], triangles: &[[u32; 3]]) -> Vec<Vector3<f64>> {
    let mut normals = vec![Vector3::zeros(); vertices.len()];
    for tri in triangles {
        let a = &vertices[tri[0] as usize];
        let b = &vertices[tri[1] as usize];
        let c = &vertices[tri[2] as usize];
        // Cross product norm is twice the area, giving the area weighting.
        let n = (b - a).cross(&(c - a));
        for &i in tri {
            normals[i as usize] += n;
        }
    }
    for n in &mut normals {
        *n = n.try_normalize(1e-14).unwrap_or(Vector3::z());
    }
    normals
}

/// Subset of a mesh's triangles deemed persistent enough for matching.
#[derive(Debug, Clone)]
pub struct SamplingMask {
    triangle_indices: Vec<u32>,
    vertex_indices: Vec<u32>,
    member: Vec<bool>,
}

impl SamplingMask {
    pub fn new(mesh: &TexturedMesh, mut triangle_indices: Vec<u32>) -> Result<Self, MeshError> {
        let count = mesh.triangles().len();
        for &i in &triangle_indices {
            if i as usize >= count {
                return Err(MeshError::MaskOutOfRange { index: i, count });
            }
        }
        triangle_indices.sort_unstable();
        triangle_indices.dedup();
        let mut vertex_indices: Vec<u32> = triangle_indices
            .iter()
            .flat_map(|&t| mesh.triangles()[t as usize])
            .collect();
        vertex_indices.sort_unstable();
        vertex_indices.dedup();
        let mut member = vec![false; count];
        for &t in &triangle_indices {
            member[t as usize] = true;
        }
        Ok(Self {
            triangle_indices,
            vertex_indices,
            member,
        })
    }

    /// Mask covering every triangle of the mesh.
    pub fn full(mesh: &TexturedMesh) -> Self {
        Self::new(mesh, (0..mesh.triangles().len() as u32).collect()).expect("full mask is valid")
    }

    /// Mask of all triangles with the given material tag.
    pub fn from_material(mesh: &TexturedMesh, tag: MaterialTag) -> Self {
        let indices = mesh
            .materials()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == tag)
            .map(|(i, _)| i as u32)
            .collect();
        Self::new(mesh, indices).expect("material mask is valid")
    }

    pub fn triangle_indices(&self) -> &[u32] {
        &self.triangle_indices
    }

    pub fn vertex_indices(&self) -> &[u32] {
        &self.vertex_indices
    }

    pub fn is_empty(&self) -> bool {
        self.triangle_indices.is_empty()
    }

    /// Whether the mask covers every triangle of `mesh`.
    pub fn covers_all(&self, mesh: &TexturedMesh) -> bool {
        self.triangle_indices.len() == mesh.triangles().len()
    }

    pub fn contains_triangle(&self, index: u32) -> bool {
        self.member.get(index as usize).copied().unwrap_or(false)
    }

    pub fn save(&self, path: &Path) -> Result<(), MeshError> {
        let text = serde_json::to_string(&self.triangle_indices).expect("mask serializes");
        fs::write(path, text).map_err(|source| MeshError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(mesh: &TexturedMesh, path: &Path) -> Result<Self, MeshError> {
        let text = fs::read_to_string(path).map_err(|source| MeshError::Io {
            path: path.to_owned(),
            source,
        })?;
        let indices: Vec<u32> = serde_json::from_str(&text).map_err(|e| MeshError::Sidecar {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        Self::new(mesh, indices)
    }
}

/// A sampled map vertex with its surface normal.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub position: Vector3<f64>,
    pub vertex_index: u32,
    pub normal: Vector3<f64>,
}

/// Visibility test for a single mask vertex from a camera pose: in-frame in
/// both cameras with `margin_px` to spare, front-facing, and unoccluded by
/// the full mesh (1e-6 m tolerance).
pub fn vertex_visible(
    mesh: &TexturedMesh,
    vertex_index: u32,
    viewpoint: &Pose,
    rig: &StereoRig,
    margin_px: f64,
) -> bool {
    let v = &mesh.vertices()[vertex_index as usize];
    let p_cam = viewpoint.transform_point(v);
    if p_cam.z < rig.near_m || p_cam.z > rig.far_m {
        return false;
    }
    for side in [CameraSide::Left, CameraSide::Right] {
        match project(&p_cam, rig, side) {
            Ok((px, _)) => {
                if px.u < margin_px
                    || px.u > (rig.rows - 1) as f64 - margin_px
                    || px.v < margin_px
                    || px.v > (rig.cols - 1) as f64 - margin_px
                {
                    return false;
                }
            }
            Err(_) => return false,
        }
    }
    let center = viewpoint.center();
    let view = v - center;
    if mesh.normals()[vertex_index as usize].dot(&view) >= 0.0 {
        return false;
    }
    !mesh.segment_occluded(&center, vertex_index, 1e-6)
}

/// All mask vertices visible from `viewpoint`; order follows the mask's
/// sorted vertex list, so the result is deterministic.
pub fn visible_mask_vertices(
    mesh: &TexturedMesh,
    mask: &SamplingMask,
    viewpoint: &Pose,
    rig: &StereoRig,
    margin_px: f64,
) -> Vec<MapPoint> {
    mask.vertex_indices()
        .iter()
        .filter(|&&vi| vertex_visible(mesh, vi, viewpoint, rig, margin_px))
        .map(|&vi| MapPoint {
            position: mesh.vertices()[vi as usize],
            vertex_index: vi,
            normal: mesh.normals()[vi as usize],
        })
        .collect()
}

/// Uniform random choice among visible points.
pub fn sample_point<R: Rng>(visible: &[MapPoint], rng: &mut R) -> Result<MapPoint, MeshError> {
    if visible.is_empty() {
        return Err(MeshError::NoVisiblePoints);
    }
    Ok(visible[rng.gen_range(0..visible.len())].clone())
}

/// Rejection-sampling equivalent of `visible_mask_vertices` +
/// [`sample_point`]: draws mask vertices uniformly and keeps the first
/// visible one. Distributionally identical to sampling the visible list, but
/// avoids scanning every vertex per viewpoint. Falls back to the full scan
/// after `max_tries` misses so emptiness is detected exactly.
pub fn sample_visible_point<R: Rng>(
    mesh: &TexturedMesh,
    mask: &SamplingMask,
    viewpoint: &Pose,
    rig: &StereoRig,
    margin_px: f64,
    max_tries: usize,
    rng: &mut R,
) -> Result<MapPoint, MeshError> {
    let verts = mask.vertex_indices();
    if verts.is_empty() {
        return Err(MeshError::NoVisiblePoints);
    }
    for _ in 0..max_tries {
        let vi = verts[rng.gen_range(0..verts.len())];
        if vertex_visible(mesh, vi, viewpoint, rig, margin_px) {
            return Ok(MapPoint {
                position: mesh.vertices()[vi as usize],
                vertex_index: vi,
                normal: mesh.normals()[vi as usize],
            });
        }
    }
    let visible = visible_mask_vertices(mesh, mask, viewpoint, rig, margin_px);
    sample_point(&visible, rng)
}

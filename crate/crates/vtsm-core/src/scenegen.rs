//! Procedural depot-analog scenes: a height-field terrain with rocks or
//! fractured slabs, a grayscale albedo texture with per-material statistics,
//! a persistence mask, and relit query imagery.
//!
//! Scenes stand in for a physically captured testbed: the map texture can be
//! baked under one sun (the mapping session) while query frames are rendered
//! under another, which is exactly the mismatch the localizer must survive.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraSide, Pose, StereoRig};
use crate::meshmap::{MaterialTag, SamplingMask, Texture, TexturedMesh};
use crate::render::{render_frame, RenderedFrame};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid terrain spec: {0}")]
    InvalidSpec(String),
    #[error("rock density {target:.3} unreachable, placed {reached:.3} before budget ran out")]
    DensityUnreachable { target: f64, reached: f64 },
    #[error(transparent)]
    Mesh(#[from] crate::meshmap::MeshError),
}

/// Terrain family, loosely graded by how much of the scene is expected to
/// persist: fractured slabs, a 6% rock distribution over sand, or pebbles on
/// an undisturbed surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerrainKind {
    Flagstone,
    Cfa6,
    Cfa2,
}

impl TerrainKind {
    pub fn label(&self) -> &'static str {
        match self {
            TerrainKind::Flagstone => "flagstone",
            TerrainKind::Cfa6 => "cfa6",
            TerrainKind::Cfa2 => "cfa2",
        }
    }
}

/// Directional sun plus ambient light; shading is Lambertian with optional
/// hard cast shadows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadingSpec {
    /// Unit vector pointing from the surface toward the sun; must have z > 0.
    pub sun_direction: [f64; 3],
    /// Fraction of flat ambient light in [0,1].
    pub ambient: f64,
    /// Ray-cast hard shadows toward the sun.
    pub cast_shadows: bool,
}

impl ShadingSpec {
    /// Sun direction from elevation above the horizon and azimuth (degrees,
    /// measured from +x toward +y).
    pub fn from_sun_angles(
        elevation_deg: f64,
        azimuth_deg: f64,
        ambient: f64,
        cast_shadows: bool,
    ) -> Self {
        let el = elevation_deg.to_radians();
        let az = azimuth_deg.to_radians();
        Self {
            sun_direction: [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()],
            ambient,
            cast_shadows,
        }
    }

    pub fn sun(&self) -> Vector3<f64> {
        Vector3::new(
            self.sun_direction[0],
            self.sun_direction[1],
            self.sun_direction[2],
        )
        .normalize()
    }

    /// Morning-analog sun: low in the east. Ambient fill approximates sky
    /// light, so shadows darken rather than black out.
    pub fn morning() -> Self {
        Self::from_sun_angles(45.0, 90.0, 0.45, true)
    }

    /// Noon-analog sun: high.
    pub fn noon() -> Self {
        Self::from_sun_angles(75.0, 180.0, 0.45, true)
    }

    /// Afternoon-analog sun: low in the west.
    pub fn afternoon() -> Self {
        Self::from_sun_angles(45.0, 270.0, 0.45, true)
    }
}

/// Texture synthesis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureNoise {
    /// Wavelength of the slow albedo variation (meters).
    pub scale_m: f64,
    /// Amplitude of the slow variation.
    pub contrast: f64,
    /// Amplitude of per-texel speckle.
    pub speckle: f64,
}

impl Default for TextureNoise {
    fn default() -> Self {
        Self {
            scale_m: 0.35,
            contrast: 0.10,
            speckle: 0.07,
        }
    }
}

/// Procedural scene description; the same spec and seed always regenerate
/// the identical scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub kind: TerrainKind,
    /// Scene extent in meters along x and y, centered on the origin.
    pub extent_m: [f64; 2],
    /// Height-field cells along x and y.
    pub grid: [usize; 2],
    /// Target cumulative fractional area of rocks (cfa kinds).
    pub rock_density: f64,
    /// Slab seeds per square meter (flagstone).
    pub fracture_density: f64,
    pub texture_noise: TextureNoise,
    /// Albedo texture resolution (square).
    pub texture_resolution: usize,
    pub seed: u64,
}

impl TerrainSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.extent_m[0] <= 0.0 || self.extent_m[1] <= 0.0 {
            return Err(SceneError::InvalidSpec("extent must be positive".into()));
        }
        if !(0.0..=0.2).contains(&self.rock_density) {
            return Err(SceneError::InvalidSpec(format!(
                "rock density {} outside [0, 0.2]",
                self.rock_density
            )));
        }
        if self.grid[0] < 2 || self.grid[1] < 2 {
            return Err(SceneError::InvalidSpec("grid too coarse".into()));
        }
        if self.texture_resolution < 8 {
            return Err(SceneError::InvalidSpec("texture too small".into()));
        }
        Ok(())
    }

    fn desk_scale(kind: TerrainKind, seed: u64) -> Self {
        Self {
            kind,
            extent_m: [8.0, 8.0],
            grid: [256, 256],
            rock_density: match kind {
                TerrainKind::Cfa6 => 0.06,
                TerrainKind::Cfa2 => 0.02,
                TerrainKind::Flagstone => 0.0,
            },
            fracture_density: 0.75,
            texture_noise: TextureNoise::default(),
            texture_resolution: 2048,
            seed,
        }
    }

    pub fn flagstone_analog(seed: u64) -> Self {
        Self::desk_scale(TerrainKind::Flagstone, seed)
    }

    pub fn cfa6_analog(seed: u64) -> Self {
        Self::desk_scale(TerrainKind::Cfa6, seed)
    }

    pub fn cfa2_analog(seed: u64) -> Self {
        Self::desk_scale(TerrainKind::Cfa2, seed)
    }
}

// Deterministic lattice hash noise.

fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((ix as u64).wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add((iy as u64).wrapping_mul(0x94d049bb133111eb));
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise in [0,1] with unit wavelength.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let ix = x.floor();
    let iy = y.floor();
    let fx = smooth(x - ix);
    let fy = smooth(y - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let v00 = hash2(ix, iy, seed);
    let v10 = hash2(ix + 1, iy, seed);
    let v01 = hash2(ix, iy + 1, seed);
    let v11 = hash2(ix + 1, iy + 1, seed);
    (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
}

/// Three-octave fractal noise in [-1, 1].
fn fbm(x: f64, y: f64, seed: u64) -> f64 {
    let n = value_noise(x, y, seed)
        + 0.5 * value_noise(x * 2.0 + 13.7, y * 2.0 + 7.3, seed ^ 0xabcdef)
        + 0.25 * value_noise(x * 4.0 + 101.3, y * 4.0 + 57.9, seed ^ 0x123456);
    (n / 1.75) * 2.0 - 1.0
}

#[derive(Debug, Clone, Copy)]
struct Rock {
    x: f64,
    y: f64,
    radius: f64,
    height: f64,
    tint: f64,
}

#[derive(Debug, Clone, Copy)]
struct SlabSeed {
    x: f64,
    y: f64,
    offset: f64,
    tint: f64,
}

/// Internal scene layout shared by the height, material and texture stages.
struct Layout {
    rocks: Vec<Rock>,
    slabs: Vec<SlabSeed>,
    crack_half_width: f64,
}

impl Layout {
    fn rock_at(&self, x: f64, y: f64) -> Option<&Rock> {
        self.rocks
            .iter()
            .find(|r| (x - r.x).hypot(y - r.y) <= r.radius)
    }

    /// Nearest slab seed and the gap to the second nearest.
    fn slab_at(&self, x: f64, y: f64) -> Option<(usize, f64)> {
        if self.slabs.is_empty() {
            return None;
        }
        let mut d1 = f64::INFINITY;
        let mut d2 = f64::INFINITY;
        let mut best = 0;
        for (i, s) in self.slabs.iter().enumerate() {
            let d = (x - s.x).hypot(y - s.y);
            if d < d1 {
                d2 = d1;
                d1 = d;
                best = i;
            } else if d < d2 {
                d2 = d;
            }
        }
        Some((best, d2 - d1))
    }

    fn in_crack(&self, x: f64, y: f64) -> bool {
        match self.slab_at(x, y) {
            Some((_, gap)) => gap < 2.0 * self.crack_half_width,
            None => false,
        }
    }
}

fn place_rocks(spec: &TerrainSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Rock>, SceneError> {
    let (ex, ey) = (spec.extent_m[0], spec.extent_m[1]);
    let area = ex * ey;
    let target = spec.rock_density * area;
    let (r_min, r_max) = match spec.kind {
        TerrainKind::Cfa6 => (0.07, 0.18),
        _ => (0.03, 0.06),
    };
    let mut rocks: Vec<Rock> = Vec::new();
    let mut covered = 0.0;
    let mut attempts = 0usize;
    let budget = 200_000;
    while covered < target {
        attempts += 1;
        if attempts > budget {
            return Err(SceneError::DensityUnreachable {
                target: spec.rock_density,
                reached: covered / area,
            });
        }
        let radius = rng.gen_range(r_min..=r_max);
        let x = rng.gen_range((-ex / 2.0 + radius)..(ex / 2.0 - radius));
        let y = rng.gen_range((-ey / 2.0 + radius)..(ey / 2.0 - radius));
        let overlaps = rocks
            .iter()
            .any(|r| (x - r.x).hypot(y - r.y) < radius + r.radius + 0.02);
        if overlaps {
            continue;
        }
        rocks.push(Rock {
            x,
            y,
            radius,
            height: 0.55 * radius,
            tint: rng.gen_range(-0.08..0.08),
        });
        covered += std::f64::consts::PI * radius * radius;
    }
    Ok(rocks)
}

fn build_layout(spec: &TerrainSpec, rng: &mut ChaCha8Rng) -> Result<Layout, SceneError> {
    let (ex, ey) = (spec.extent_m[0], spec.extent_m[1]);
    let mut rocks = Vec::new();
    let mut slabs = Vec::new();
    match spec.kind {
        TerrainKind::Flagstone => {
            let count = ((spec.fracture_density * ex * ey).round() as usize).max(3);
            for _ in 0..count {
                slabs.push(SlabSeed {
                    x: rng.gen_range(-ex / 2.0..ex / 2.0),
                    y: rng.gen_range(-ey / 2.0..ey / 2.0),
                    offset: rng.gen_range(-0.012..0.012),
                    tint: rng.gen_range(-0.10..0.10),
                });
            }
        }
        TerrainKind::Cfa6 | TerrainKind::Cfa2 => {
            rocks = place_rocks(spec, rng)?;
        }
    }
    Ok(Layout {
        rocks,
        slabs,
        crack_half_width: 0.018,
    })
}

fn surface_height(spec: &TerrainSpec, layout: &Layout, x: f64, y: f64) -> f64 {
    let mut h = 0.03 * fbm(x / 1.9, y / 1.9, spec.seed ^ 0x5eed_0001);
    match spec.kind {
        TerrainKind::Flagstone => {
            if layout.in_crack(x, y) {
                h -= 0.025;
            } else if let Some((i, _)) = layout.slab_at(x, y) {
                h += layout.slabs[i].offset;
            }
        }
        _ => {
            if let Some(rock) = layout.rock_at(x, y) {
                let d = (x - rock.x).hypot(y - rock.y) / rock.radius;
                h += rock.height * (1.0 - d * d).max(0.0).sqrt();
            }
        }
    }
    h
}

fn albedo_at(spec: &TerrainSpec, layout: &Layout, x: f64, y: f64, tx: i64, ty: i64) -> f64 {
    let noise = &spec.texture_noise;
    let slow = noise.contrast * fbm(x / noise.scale_m, y / noise.scale_m, spec.seed ^ 0x7e87);
    let speckle = noise.speckle * (hash2(tx, ty, spec.seed ^ 0x51ec) * 2.0 - 1.0);
    let base = match spec.kind {
        TerrainKind::Flagstone => {
            if layout.in_crack(x, y) {
                0.34
            } else {
                let (i, _) = layout.slab_at(x, y).expect("slabs exist");
                0.55 + layout.slabs[i].tint + 0.06 * fbm(x / 0.05, y / 0.05, spec.seed ^ 0x51ab)
            }
        }
        _ => match layout.rock_at(x, y) {
            Some(rock) => {
                // Mottled rock faces: coarse veining plus fine grain.
                0.42 + rock.tint
                    + 0.14 * fbm(x / 0.05, y / 0.05, spec.seed ^ 0x0c4a)
                    + 0.08 * fbm(x / 0.015, y / 0.015, spec.seed ^ 0x77aa)
            }
            None => {
                // Sand carries granules and embedded pebbles, not a flat
                // wash: centimeter-scale structure keeps templates textured
                // under any sun.
                let granules = 0.09 * fbm(x / 0.012, y / 0.012, spec.seed ^ 0x9ab1);
                let pebble_field = value_noise(x / 0.035, y / 0.035, spec.seed ^ 0x3e8f);
                let pebbles = if pebble_field > 0.78 { -0.16 } else { 0.0 };
                0.62 + 0.05 * fbm(x / 0.08, y / 0.08, spec.seed ^ 0x5a4d) + granules + pebbles
            }
        },
    };
    (base + slow + speckle).clamp(0.02, 0.98)
}

/// Generates the terrain mesh, its albedo texture and the sampling mask of
/// persistent triangles. Deterministic in the spec's seed.
pub fn generate_depot(spec: &TerrainSpec) -> Result<(TexturedMesh, SamplingMask), SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = build_layout(spec, &mut rng)?;
    let (ex, ey) = (spec.extent_m[0], spec.extent_m[1]);
    let (gx, gy) = (spec.grid[0], spec.grid[1]);

    let mut vertices = Vec::with_capacity((gx + 1) * (gy + 1));
    let mut texcoords = Vec::with_capacity((gx + 1) * (gy + 1));
    for j in 0..=gy {
        for i in 0..=gx {
            let x = -ex / 2.0 + ex * i as f64 / gx as f64;
            let y = -ey / 2.0 + ey * j as f64 / gy as f64;
            vertices.push(Vector3::new(x, y, surface_height(spec, &layout, x, y)));
            texcoords.push([i as f64 / gx as f64, j as f64 / gy as f64]);
        }
    }
    let mut triangles = Vec::with_capacity(gx * gy * 2);
    let mut materials = Vec::with_capacity(gx * gy * 2);
    for j in 0..gy {
        for i in 0..gx {
            let a = (j * (gx + 1) + i) as u32;
            let b = a + 1;
            let c = a + gx as u32 + 2;
            let d = a + gx as u32 + 1;
            for tri in [[a, b, c], [a, c, d]] {
                let cx: f64 = tri.iter().map(|&v| vertices[v as usize].x).sum::<f64>() / 3.0;
                let cy: f64 = tri.iter().map(|&v| vertices[v as usize].y).sum::<f64>() / 3.0;
                let tag = match spec.kind {
                    TerrainKind::Flagstone => {
                        if layout.in_crack(cx, cy) {
                            MaterialTag::Mutable
                        } else {
                            MaterialTag::Persistent
                        }
                    }
                    TerrainKind::Cfa6 => {
                        if layout.rock_at(cx, cy).is_some() {
                            MaterialTag::Persistent
                        } else {
                            MaterialTag::Mutable
                        }
                    }
                    // Undisturbed scene: everything persists.
                    TerrainKind::Cfa2 => MaterialTag::Persistent,
                };
                triangles.push(tri);
                materials.push(tag);
            }
        }
    }

    let res = spec.texture_resolution;
    let mut data = vec![0.0f64; res * res];
    for ty in 0..res {
        let t = ty as f64 / (res - 1) as f64;
        let y = -ey / 2.0 + ey * t;
        for tx in 0..res {
            let s = tx as f64 / (res - 1) as f64;
            let x = -ex / 2.0 + ex * s;
            let a = albedo_at(spec, &layout, x, y, tx as i64, ty as i64);
            // Born quantized so PNG round trips are exact.
            data[ty * res + tx] = (a * 255.0).round() / 255.0;
        }
    }
    let texture = Texture {
        width: res,
        height: res,
        data,
    };

    let mesh = TexturedMesh::new(vertices, texcoords, triangles, materials, texture)?;
    let mask = SamplingMask::from_material(&mesh, MaterialTag::Persistent);
    Ok((mesh, mask))
}

/// Re-renders the albedo texture with baked-in lighting: each texel is shaded
/// at its surface point under `shading`. This is the "map" texture whose
/// lighting is frozen at mapping time.
pub fn bake_map_texture(mesh: &TexturedMesh, shading: &ShadingSpec) -> TexturedMesh {
    let sun = shading.sun();
    let tex = mesh.texture();
    let mut data = tex.data.clone();
    let (min, max) = mesh.vertices().iter().fold(
        (
            (f64::INFINITY, f64::INFINITY),
            (f64::NEG_INFINITY, f64::NEG_INFINITY),
        ),
        |(lo, hi), v| {
            (
                (lo.0.min(v.x), lo.1.min(v.y)),
                (hi.0.max(v.x), hi.1.max(v.y)),
            )
        },
    );
    for ty in 0..tex.height {
        let t = ty as f64 / (tex.height - 1) as f64;
        let y = min.1 + (max.1 - min.1) * t;
        for tx in 0..tex.width {
            let s = tx as f64 / (tex.width - 1) as f64;
            let x = min.0 + (max.0 - min.0) * s;
            let Some((z, normal)) = mesh.surface_at_xy(x, y) else {
                continue;
            };
            let mut lambert = normal.dot(&sun).max(0.0);
            if shading.cast_shadows && lambert > 0.0 {
                let origin = Vector3::new(x, y, z) + normal * 1e-4;
                if mesh.ray_blocked(&origin, &sun) {
                    lambert = 0.0;
                }
            }
            let shade = shading.ambient + (1.0 - shading.ambient) * lambert;
            let i = ty * tex.width + tx;
            data[i] = ((data[i] * shade).clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    mesh.with_texture(Texture {
        width: tex.width,
        height: tex.height,
        data,
    })
}

/// Renders the left and right query frames under the given shading.
pub fn render_query_pair(
    mesh: &TexturedMesh,
    rig: &StereoRig,
    pose: &Pose,
    shading: &ShadingSpec,
) -> (RenderedFrame, RenderedFrame) {
    (
        render_frame(mesh, pose, rig, CameraSide::Left, Some(shading)),
        render_frame(mesh, pose, rig, CameraSide::Right, Some(shading)),
    )
}

/// Displaces mutable-tagged vertices vertically by smooth noise with the
/// requested RMS magnitude; vertices touching any persistent triangle stay
/// put.
pub fn perturb_mutable<R: Rng>(
    mesh: &TexturedMesh,
    magnitude_m: f64,
    rng: &mut R,
) -> Result<TexturedMesh, SceneError> {
    if magnitude_m == 0.0 {
        return Ok(mesh.clone());
    }
    let mut persistent_vertex = vec![false; mesh.vertices().len()];
    for (tri, &tag) in mesh.triangles().iter().zip(mesh.materials()) {
        if tag == MaterialTag::Persistent {
            for &v in tri {
                persistent_vertex[v as usize] = true;
            }
        }
    }
    let noise_seed: u64 = rng.gen();
    let raw: Vec<f64> = mesh
        .vertices()
        .iter()
        .map(|v| fbm(v.x / 0.5, v.y / 0.5, noise_seed))
        .collect();
    let targets: Vec<usize> = (0..mesh.vertices().len())
        .filter(|&i| !persistent_vertex[i])
        .collect();
    if targets.is_empty() {
        return Ok(mesh.clone());
    }
    let rms = (targets.iter().map(|&i| raw[i] * raw[i]).sum::<f64>() / targets.len() as f64).sqrt();
    let scale = if rms > 1e-12 { magnitude_m / rms } else { 0.0 };
    let mut vertices = mesh.vertices().to_vec();
    for &i in &targets {
        vertices[i].z += raw[i] * scale;
    }
    Ok(mesh.with_vertices(vertices)?)
}

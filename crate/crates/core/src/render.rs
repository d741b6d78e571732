//! Headless, deterministic z-buffer rasterizer for canonical multi-view renders.
//!
//! Flat shading with a headlight (a point light at the eye), no anti-aliasing,
//! and only f64 arithmetic in a fixed order, so identical inputs give
//! byte-identical images.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Ambient/diffuse/specular ratios forced onto every mesh before rendering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialOverride {
    pub ambient: f64,
    pub diffuse: f64,
    pub specular: f64,
    pub shininess: f64,
}

impl Default for MaterialOverride {
    fn default() -> Self {
        MaterialOverride {
            ambient: 0.4,
            diffuse: 0.4,
            specular: 0.1,
            shininess: 32.0,
        }
    }
}

/// Orbit camera preset: eight azimuths around `look_at` at a fixed horizontal
/// `distance` and absolute eye height `elevation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    pub distance: f64,
    pub elevation: f64,
    pub look_at: [f64; 3],
    /// Degrees. Azimuth 0 puts the eye on +z looking toward -z.
    pub azimuths_deg: Vec<f64>,
    pub image_size: usize,
    pub fov_y_deg: f64,
}

pub const NUM_VIEWS: usize = 8;

fn canonical_azimuths() -> Vec<f64> {
    (0..NUM_VIEWS).map(|k| 45.0 * k as f64).collect()
}

impl ViewConfig {
    /// Object-embedding camera: distance 3, elevation 1, looking at the origin.
    pub fn object_preset(image_size: usize) -> Self {
        ViewConfig {
            distance: 3.0,
            elevation: 1.0,
            look_at: [0.0, 0.0, 0.0],
            azimuths_deg: canonical_azimuths(),
            image_size,
            fov_y_deg: 45.0,
        }
    }

    /// Scene-visualization camera: distance 8, elevation 2.5, looking at (0, 1, 0).
    pub fn scene_preset(image_size: usize) -> Self {
        ViewConfig {
            distance: 8.0,
            elevation: 2.5,
            look_at: [0.0, 1.0, 0.0],
            azimuths_deg: canonical_azimuths(),
            image_size,
            fov_y_deg: 45.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.azimuths_deg.len() != NUM_VIEWS {
            return Err(Error::InvalidArgument(format!(
                "view config needs exactly {NUM_VIEWS} azimuths, got {}",
                self.azimuths_deg.len()
            )));
        }
        let step = 360.0 / NUM_VIEWS as f64;
        for (k, a) in self.azimuths_deg.iter().enumerate() {
            let expected = self.azimuths_deg[0] + step * k as f64;
            if (a - expected).abs() > 1e-9 {
                return Err(Error::InvalidArgument(
                    "azimuths must be uniformly spaced 45 degrees apart".into(),
                ));
            }
        }
        if self.image_size == 0 || !(self.distance > 0.0) || !(self.fov_y_deg > 0.0) {
            return Err(Error::InvalidArgument("degenerate view config".into()));
        }
        Ok(())
    }

    pub fn eye(&self, view: usize) -> [f64; 3] {
        let a = self.azimuths_deg[view].to_radians();
        [
            self.look_at[0] + self.distance * a.sin(),
            self.elevation,
            self.look_at[2] + self.distance * a.cos(),
        ]
    }

    /// Stable content hash, recorded in index manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("view config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

/// RGBA8 image. `alpha == 0` marks background pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewImage {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
    /// Optional provenance tag (asset class) carried alongside the pixels.
    /// Only test-double encoders read it.
    pub label: Option<String>,
}

impl ViewImage {
    pub fn coverage(&self) -> usize {
        self.rgba.chunks_exact(4).filter(|p| p[3] != 0).count()
    }

    /// Mean RGB in `[0, 1]` over covered pixels, or `None` for an empty image.
    pub fn mean_foreground_color(&self) -> Option<[f64; 3]> {
        let mut acc = [0u64; 3];
        let mut n = 0u64;
        for p in self.rgba.chunks_exact(4) {
            if p[3] != 0 {
                for k in 0..3 {
                    acc[k] += p[k] as u64;
                }
                n += 1;
            }
        }
        (n > 0).then(|| acc.map(|a| a as f64 / (255.0 * n as f64)))
    }

    /// RGB channels as `[0, 1]` floats in CHW order.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0f32; 3 * plane];
        for (i, p) in self.rgba.chunks_exact(4).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = p[c] as f32 / 255.0;
            }
        }
        out
    }

    /// Nearest-neighbour resample.
    pub fn resized(&self, width: usize, height: usize) -> ViewImage {
        let mut rgba = vec![0u8; width * height * 4];
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                let src = 4 * (sy * self.width + sx);
                let dst = 4 * (y * width + x);
                rgba[dst..dst + 4].copy_from_slice(&self.rgba[src..src + 4]);
            }
        }
        ViewImage {
            width,
            height,
            rgba,
            label: self.label.clone(),
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::Render(e.to_string()))?;
            w.write_image_data(&self.rgba)
                .map_err(|e| Error::Render(e.to_string()))?;
        }
        Ok(out)
    }
}

/// Similarity transform placing a mesh in the world: `p -> linear * p + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub linear: [[f64; 3]; 3],
    pub offset: [f64; 3],
}

impl Placement {
    pub const IDENTITY: Placement = Placement {
        linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        offset: [0.0; 3],
    };

    /// Scale by `size` (per axis), rotate by `yaw` about +y, translate.
    pub fn from_pose(translation: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Placement {
            linear: [
                [c * size[0], 0.0, s * size[2]],
                [0.0, size[1], 0.0],
                [-s * size[0], 0.0, c * size[2]],
            ],
            offset: translation,
        }
    }

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.linear;
        std::array::from_fn(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + self.offset[r])
    }
}

pub struct RenderObject<'a> {
    pub mesh: &'a Mesh,
    pub placement: Placement,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    if n > 0.0 {
        [a[0] / n, a[1] / n, a[2] / n]
    } else {
        a
    }
}

/// Pinhole camera basis.
struct CameraFrame {
    eye: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
    back: [f64; 3],
    focal: f64,
    width: usize,
    height: usize,
}

const NEAR: f64 = 0.05;

impl CameraFrame {
    fn new(eye: [f64; 3], target: [f64; 3], fov_y_deg: f64, width: usize, height: usize) -> Self {
        let back = normalize(sub(eye, target));
        let world_up = if back[1].abs() > 0.999 {
            [0.0, 0.0, -1.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let right = normalize(cross(world_up, back));
        let up = cross(back, right);
        let focal = 1.0 / (0.5 * fov_y_deg.to_radians()).tan();
        CameraFrame {
            eye,
            right,
            up,
            back,
            focal,
            width,
            height,
        }
    }

    /// World point to camera space; visible points have negative z.
    fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = sub(p, self.eye);
        [dot(d, self.right), dot(d, self.up), dot(d, self.back)]
    }

    /// Camera-space point to (pixel x, pixel y, inverse depth).
    fn project(&self, c: [f64; 3]) -> [f64; 3] {
        let depth = -c[2];
        let aspect = self.width as f64 / self.height as f64;
        let xn = self.focal * c[0] / (depth * aspect);
        let yn = self.focal * c[1] / depth;
        [
            (xn + 1.0) * 0.5 * self.width as f64,
            (1.0 - yn) * 0.5 * self.height as f64,
            1.0 / depth,
        ]
    }
}

fn clip_near(poly: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let inside = |p: &[f64; 3]| p[2] <= -NEAR;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        match (inside(&a), inside(&b)) {
            (true, true) => out.push(b),
            (true, false) | (false, true) => {
                let t = (-NEAR - a[2]) / (b[2] - a[2]);
                let hit = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), -NEAR];
                out.push(hit);
                if !inside(&a) {
                    out.push(b);
                }
            }
            (false, false) => {}
        }
    }
    out
}

fn edge(a: [f64; 3], b: [f64; 3], px: f64, py: f64) -> f64 {
    (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
}

/// Renders objects from `eye` toward `target`.
pub fn render(
    objects: &[RenderObject<'_>],
    eye: [f64; 3],
    target: [f64; 3],
    fov_y_deg: f64,
    width: usize,
    height: usize,
    material: &MaterialOverride,
    background: [u8; 3],
) -> ViewImage {
    let cam = CameraFrame::new(eye, target, fov_y_deg, width, height);
    let mut inv_depth = vec![0.0f64; width * height];
    let mut rgba = Vec::with_capacity(width * height * 4);
    for _ in 0..width * height {
        rgba.extend_from_slice(&[background[0], background[1], background[2], 0]);
    }

    for obj in objects {
        let world: Vec<[f64; 3]> = obj
            .mesh
            .positions
            .iter()
            .map(|&p| obj.placement.apply(p))
            .collect();
        for (fi, f) in obj.mesh.faces.iter().enumerate() {
            let tri = [
                world[f[0] as usize],
                world[f[1] as usize],
                world[f[2] as usize],
            ];
            let n = normalize(cross(sub(tri[1], tri[0]), sub(tri[2], tri[0])));
            let center = std::array::from_fn(|k| (tri[0][k] + tri[1][k] + tri[2][k]) / 3.0);
            let to_eye = normalize(sub(cam.eye, center));
            // two-sided lighting
            let ndl = dot(n, to_eye).abs();
            let albedo = obj.mesh.face_colors[fi];
            // headlight: light and view directions coincide, so the half vector is `to_eye`
            let spec = material.specular * ndl.powf(material.shininess);
            let shade: [u8; 3] = std::array::from_fn(|k| {
                let c = albedo[k] * (material.ambient + material.diffuse * ndl) + spec;
                (c.clamp(0.0, 1.0) * 255.0).round() as u8
            });

            let cam_pts: Vec<[f64; 3]> = tri.iter().map(|&p| cam.to_camera(p)).collect();
            let clipped = clip_near(&cam_pts);
            if clipped.len() < 3 {
                continue;
            }
            let screen: Vec<[f64; 3]> = clipped.iter().map(|&c| cam.project(c)).collect();
            for k in 1..screen.len() - 1 {
                raster_triangle(
                    [screen[0], screen[k], screen[k + 1]],
                    shade,
                    width,
                    height,
                    &mut inv_depth,
                    &mut rgba,
                );
            }
        }
    }
    ViewImage {
        width,
        height,
        rgba,
        label: None,
    }
}

fn raster_triangle(
    v: [[f64; 3]; 3],
    color: [u8; 3],
    width: usize,
    height: usize,
    inv_depth: &mut [f64],
    rgba: &mut [u8],
) {
    let area = edge(v[0], v[1], v[2][0], v[2][1]);
    if area.abs() < 1e-12 {
        return;
    }
    let minx = v.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let maxx = v
        .iter()
        .map(|p| p[0])
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil()
        .min(width as f64) as usize;
    let miny = v.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let maxy = v
        .iter()
        .map(|p| p[1])
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil()
        .min(height as f64) as usize;
    for y in miny..maxy {
        let py = y as f64 + 0.5;
        for x in minx..maxx {
            let px = x as f64 + 0.5;
            let w0 = edge(v[1], v[2], px, py) / area;
            let w1 = edge(v[2], v[0], px, py) / area;
            let w2 = edge(v[0], v[1], px, py) / area;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            let z = w0 * v[0][2] + w1 * v[1][2] + w2 * v[2][2];
            let idx = y * width + x;
            if z > inv_depth[idx] {
                inv_depth[idx] = z;
                let o = 4 * idx;
                rgba[o] = color[0];
                rgba[o + 1] = color[1];
                rgba[o + 2] = color[2];
                rgba[o + 3] = 255;
            }
        }
    }
}

/// White background used for every canonical render.
pub const BACKGROUND: [u8; 3] = [255, 255, 255];

/// Renders an asset from the eight canonical directions after normalizing it
/// into the centred unit cube.
pub fn render_object_views(
    mesh: &Mesh,
    cfg: &ViewConfig,
    material: &MaterialOverride,
) -> Result<Vec<ViewImage>> {
    cfg.validate()?;
    let unit = mesh.normalized_unit_cube()?;
    let objects = [RenderObject {
        mesh: &unit,
        placement: Placement::IDENTITY,
    }];
    Ok((0..NUM_VIEWS)
        .map(|k| {
            render(
                &objects,
                cfg.eye(k),
                cfg.look_at,
                cfg.fov_y_deg,
                cfg.image_size,
                cfg.image_size,
                material,
                BACKGROUND,
            )
        })
        .collect())
}

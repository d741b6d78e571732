//! Triangle meshes: parametric primitives, OBJ loading, unit-cube normalization.

use std::f64::consts::TAU;
use std::path::Path;

use crate::error::{Error, Result};

/// Indexed triangle mesh with one albedo color per face.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub positions: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub face_colors: Vec<[f64; 3]>,
}

impl Mesh {
    pub fn new(positions: Vec<[f64; 3]>, faces: Vec<[u32; 3]>, color: [f64; 3]) -> Self {
        let face_colors = vec![color; faces.len()];
        Mesh {
            positions,
            faces,
            face_colors,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn set_color(&mut self, color: [f64; 3]) {
        self.face_colors = vec![color; self.faces.len()];
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Uniformly rescales and recentres so the bounding box is centred at the
    /// origin with its longest side equal to 1.
    pub fn normalized_unit_cube(&self) -> Result<Mesh> {
        if self.is_empty() {
            return Err(Error::Render("mesh has no faces".into()));
        }
        let (lo, hi) = self.bounds();
        let center: [f64; 3] = std::array::from_fn(|k| 0.5 * (lo[k] + hi[k]));
        let longest = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        if !(longest > 0.0) || !longest.is_finite() {
            return Err(Error::Render("mesh has a degenerate bounding box".into()));
        }
        let s = 1.0 / longest;
        let positions = self
            .positions
            .iter()
            .map(|p| std::array::from_fn(|k| (p[k] - center[k]) * s))
            .collect();
        Ok(Mesh {
            positions,
            faces: self.faces.clone(),
            face_colors: self.face_colors.clone(),
        })
    }

    /// Non-uniformly rescales so the bounding box becomes `[-1, 1]^3`.
    pub fn normalized_box(&self) -> Result<Mesh> {
        if self.is_empty() {
            return Err(Error::Render("mesh has no faces".into()));
        }
        let (lo, hi) = self.bounds();
        let positions = self
            .positions
            .iter()
            .map(|p| {
                std::array::from_fn(|k| {
                    let ext = hi[k] - lo[k];
                    if ext > 0.0 {
                        2.0 * (p[k] - lo[k]) / ext - 1.0
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        Ok(Mesh {
            positions,
            faces: self.faces.clone(),
            face_colors: self.face_colors.clone(),
        })
    }

    pub fn append(&mut self, other: &Mesh) {
        let base = self.positions.len() as u32;
        self.positions.extend_from_slice(&other.positions);
        self.faces
            .extend(other.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        self.face_colors.extend_from_slice(&other.face_colors);
    }

    /// Axis-aligned box spanning `[-1, 1]^3`.
    pub fn unit_box(color: [f64; 3]) -> Mesh {
        let mut positions = Vec::with_capacity(8);
        for &x in &[-1.0, 1.0] {
            for &y in &[-1.0, 1.0] {
                for &z in &[-1.0, 1.0] {
                    positions.push([x, y, z]);
                }
            }
        }
        // vertex index = 4*ix + 2*iy + iz
        let quads = [
            [0, 1, 3, 2], // -x
            [4, 6, 7, 5], // +x
            [0, 4, 5, 1], // -y
            [2, 3, 7, 6], // +y
            [0, 2, 6, 4], // -z
            [1, 5, 7, 3], // +z
        ];
        let faces = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        Mesh::new(positions, faces, color)
    }

    /// Vertical cylinder of radius 1 and height 2, centred at the origin.
    pub fn unit_cylinder(segments: usize, color: [f64; 3]) -> Mesh {
        let n = segments.max(3);
        let mut positions = Vec::with_capacity(2 * n + 2);
        for i in 0..n {
            let a = TAU * i as f64 / n as f64;
            let (s, c) = a.sin_cos();
            positions.push([c, -1.0, s]);
            positions.push([c, 1.0, s]);
        }
        let bottom = positions.len() as u32;
        positions.push([0.0, -1.0, 0.0]);
        let top = bottom + 1;
        positions.push([0.0, 1.0, 0.0]);
        let mut faces = Vec::with_capacity(4 * n);
        for i in 0..n as u32 {
            let j = (i + 1) % n as u32;
            let (b0, t0, b1, t1) = (2 * i, 2 * i + 1, 2 * j, 2 * j + 1);
            faces.push([b0, t0, t1]);
            faces.push([b0, t1, b1]);
            faces.push([bottom, b0, b1]);
            faces.push([top, t1, t0]);
        }
        Mesh::new(positions, faces, color)
    }

    /// Triangular prism: a ramp rising from the front (+z) edge to the back
    /// (-z) edge, spanning `[-1, 1]^3`.
    pub fn unit_wedge(color: [f64; 3]) -> Mesh {
        let positions = vec![
            [-1.0, -1.0, 1.0],  // 0 front bottom left
            [1.0, -1.0, 1.0],   // 1 front bottom right
            [-1.0, -1.0, -1.0], // 2 back bottom left
            [1.0, -1.0, -1.0],  // 3 back bottom right
            [-1.0, 1.0, -1.0],  // 4 back top left
            [1.0, 1.0, -1.0],   // 5 back top right
        ];
        let faces = vec![
            [0, 2, 3],
            [0, 3, 1], // bottom
            [2, 4, 5],
            [2, 5, 3], // back
            [0, 1, 5],
            [0, 5, 4], // slope
            [0, 4, 2], // left
            [1, 3, 5], // right
        ];
        Mesh::new(positions, faces, color)
    }

    /// Latitude/longitude sphere of radius 1.
    pub fn uv_sphere(rings: usize, sectors: usize, color: [f64; 3]) -> Mesh {
        let rings = rings.max(3);
        let sectors = sectors.max(3);
        let mut positions = Vec::new();
        for r in 0..=rings {
            let phi = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..sectors {
                let theta = TAU * s as f64 / sectors as f64;
                positions.push([phi.sin() * theta.cos(), phi.cos(), phi.sin() * theta.sin()]);
            }
        }
        let mut faces = Vec::new();
        for r in 0..rings as u32 {
            for s in 0..sectors as u32 {
                let s1 = (s + 1) % sectors as u32;
                let a = r * sectors as u32 + s;
                let b = r * sectors as u32 + s1;
                let c = (r + 1) * sectors as u32 + s;
                let d = (r + 1) * sectors as u32 + s1;
                if r != 0 {
                    faces.push([a, b, c]);
                }
                if r + 1 != rings as u32 {
                    faces.push([b, d, c]);
                }
            }
        }
        Mesh::new(positions, faces, color)
    }

    /// Parses vertex and face records of a Wavefront OBJ file. Polygons are
    /// fan-triangulated; materials are ignored and `color` is used throughout.
    pub fn parse_obj(text: &str, color: [f64; 3]) -> Result<Mesh> {
        let mut positions = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let coords: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Parse {
                            path: format!("line {}", lineno + 1),
                            message: e.to_string(),
                        })?;
                    if coords.len() != 3 {
                        return Err(Error::Parse {
                            path: format!("line {}", lineno + 1),
                            message: "vertex needs 3 coordinates".into(),
                        });
                    }
                    positions.push([coords[0], coords[1], coords[2]]);
                }
                Some("f") => {
                    let n = positions.len() as i64;
                    let idx: Vec<u32> = it
                        .map(|tok| {
                            let first = tok.split('/').next().unwrap_or("");
                            let i: i64 = first.parse().map_err(|_| Error::Parse {
                                path: format!("line {}", lineno + 1),
                                message: format!("bad face index `{tok}`"),
                            })?;
                            let resolved = if i < 0 { n + i } else { i - 1 };
                            if resolved < 0 || resolved >= n {
                                return Err(Error::Parse {
                                    path: format!("line {}", lineno + 1),
                                    message: format!("face index {i} out of range"),
                                });
                            }
                            Ok(resolved as u32)
                        })
                        .collect::<Result<_>>()?;
                    for k in 1..idx.len().saturating_sub(1) {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Ok(Mesh::new(positions, faces, color))
    }

    pub fn load_obj(path: impl AsRef<Path>, color: [f64; 3]) -> Result<Mesh> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Mesh::parse_obj(&text, color)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_span_unit_box() {
        for m in [
            Mesh::unit_box([1.0; 3]),
            Mesh::unit_cylinder(24, [1.0; 3]),
            Mesh::unit_wedge([1.0; 3]),
            Mesh::uv_sphere(12, 24, [1.0; 3]),
        ] {
            let (lo, hi) = m.bounds();
            for k in 0..3 {
                assert!((lo[k] + 1.0).abs() < 1e-9 && (hi[k] - 1.0).abs() < 1e-9);
            }
            assert_eq!(m.faces.len(), m.face_colors.len());
        }
    }

    #[test]
    fn unit_cube_normalization() {
        let mut m = Mesh::unit_box([0.5; 3]);
        for p in &mut m.positions {
            p[0] = p[0] * 3.0 + 10.0;
        }
        let n = m.normalized_unit_cube().unwrap();
        let (lo, hi) = n.bounds();
        assert!((hi[0] - lo[0] - 1.0).abs() < 1e-12);
        assert!((hi[1] - lo[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((lo[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_mesh_is_rejected() {
        let m = Mesh::new(vec![[0.0; 3]], vec![], [1.0; 3]);
        assert!(m.normalized_unit_cube().is_err());
    }

    #[test]
    fn obj_quads_and_negative_indices() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\nf -4 -3 -2\n";
        let m = Mesh::parse_obj(text, [1.0; 3]).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3], [0, 1, 2]]);
        assert!(Mesh::parse_obj("v 0 0 0\nf 1 2 3\n", [1.0; 3]).is_err());
    }
}

use serde::{Deserialize, Serialize};

use super::geometry::{self, Point2};
use crate::error::{Error, Result};

/// Smallest accepted mask side.
pub const MIN_MASK_RESOLUTION: usize = 4;

/// Square binary occupancy grid. Row `i` spans z, column `j` spans x, both
/// increasing from `-extent/2`. Serialized as one `0`/`1` string per row.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "MaskRepr", into = "MaskRepr")]
pub struct FloorMask {
    pub resolution: usize,
    pub cells: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    resolution: usize,
    rows: Vec<String>,
}

impl TryFrom<MaskRepr> for FloorMask {
    type Error = String;

    fn try_from(r: MaskRepr) -> std::result::Result<Self, String> {
        if r.rows.len() != r.resolution {
            return Err(format!(
                "mask has {} rows, resolution is {}",
                r.rows.len(),
                r.resolution
            ));
        }
        let mut cells = Vec::with_capacity(r.resolution * r.resolution);
        for (i, row) in r.rows.iter().enumerate() {
            if row.len() != r.resolution {
                return Err(format!("mask row {i} has length {}", row.len()));
            }
            for ch in row.bytes() {
                match ch {
                    b'0' => cells.push(0),
                    b'1' => cells.push(1),
                    other => return Err(format!("mask row {i} has byte {other:#x}")),
                }
            }
        }
        Ok(FloorMask {
            resolution: r.resolution,
            cells,
        })
    }
}

impl From<FloorMask> for MaskRepr {
    fn from(m: FloorMask) -> Self {
        let rows = m
            .cells
            .chunks(m.resolution.max(1))
            .map(|row| row.iter().map(|&c| if c == 0 { '0' } else { '1' }).collect())
            .collect();
        MaskRepr {
            resolution: m.resolution,
            rows,
        }
    }
}

impl FloorMask {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.resolution + col]
    }

    pub fn filled(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }

    /// Cells as `0.0`/`1.0`, row-major.
    pub fn to_f32(&self) -> Vec<f32> {
        self.cells.iter().map(|&c| c as f32).collect()
    }
}

/// Rasterizes a floor outline onto an `resolution x resolution` grid covering
/// `[-extent/2, extent/2]^2`. A cell is set iff its center lies inside the polygon.
pub fn rasterize_floor(polygon: &[Point2], resolution: usize, extent: f64) -> Result<FloorMask> {
    if resolution < MIN_MASK_RESOLUTION {
        return Err(Error::InvalidArgument(format!(
            "mask resolution {resolution} below minimum {MIN_MASK_RESOLUTION}"
        )));
    }
    if !(extent > 0.0) {
        return Err(Error::InvalidArgument("extent must be positive".into()));
    }
    if polygon.len() < 3 || geometry::signed_area(polygon).abs() < 1e-12 {
        return Err(Error::Geometry("degenerate floor polygon (zero area)".into()));
    }
    let cell = extent / resolution as f64;
    let origin = -0.5 * extent;
    let mut cells = vec![0u8; resolution * resolution];
    for i in 0..resolution {
        let z = origin + (i as f64 + 0.5) * cell;
        for j in 0..resolution {
            let x = origin + (j as f64 + 0.5) * cell;
            if geometry::contains(polygon, [x, z]) {
                cells[i * resolution + j] = 1;
            }
        }
    }
    Ok(FloorMask { resolution, cells })
}

//! Planar polygon helpers on the floor (x, z) plane.

pub type Point2 = [f64; 2];

/// Shoelace signed area; positive for counter-clockwise winding.
pub fn signed_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, z0] = poly[i];
        let [x1, z1] = poly[(i + 1) % n];
        acc += x0 * z1 - x1 * z0;
    }
    0.5 * acc
}

/// Area centroid. Falls back to the vertex mean for degenerate input.
pub fn centroid(poly: &[Point2]) -> Point2 {
    let a = signed_area(poly);
    let n = poly.len();
    if a.abs() < 1e-12 || n < 3 {
        let (sx, sz) = poly
            .iter()
            .fold((0.0, 0.0), |(sx, sz), p| (sx + p[0], sz + p[1]));
        let k = n.max(1) as f64;
        return [sx / k, sz / k];
    }
    let mut cx = 0.0;
    let mut cz = 0.0;
    for i in 0..n {
        let [x0, z0] = poly[i];
        let [x1, z1] = poly[(i + 1) % n];
        let cross = x0 * z1 - x1 * z0;
        cx += (x0 + x1) * cross;
        cz += (z0 + z1) * cross;
    }
    [cx / (6.0 * a), cz / (6.0 * a)]
}

/// Crossing-number test. Points exactly on an edge follow the half-open rule,
/// so adjacent polygons never both claim a boundary point.
pub fn contains(poly: &[Point2], p: Point2) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let [xi, zi] = poly[i];
        let [xj, zj] = poly[j];
        if (zi > p[1]) != (zj > p[1]) {
            let x_cross = xi + (p[1] - zi) * (xj - xi) / (zj - zi);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Point2, b: Point2, p: Point2) -> bool {
    p[0] >= a[0].min(b[0]) - 1e-12
        && p[0] <= a[0].max(b[0]) + 1e-12
        && p[1] >= a[1].min(b[1]) - 1e-12
        && p[1] <= a[1].max(b[1]) + 1e-12
}

fn segments_intersect(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// True when no two non-adjacent edges intersect.
pub fn is_simple(poly: &[Point2]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        for j in (i + 1)..n {
            // adjacent edges share a vertex
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let c = poly[j];
            let d = poly[(j + 1) % n];
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Ear-clipping triangulation of a simple counter-clockwise polygon.
/// Returns index triples into `poly`.
pub fn triangulate(poly: &[Point2]) -> Vec<[usize; 3]> {
    let n = poly.len();
    if n < 3 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if signed_area(poly) < 0.0 {
        idx.reverse();
    }
    let mut tris = Vec::with_capacity(n - 2);
    let mut guard = 0;
    while idx.len() > 3 && guard < n * n {
        guard += 1;
        let m = idx.len();
        let mut clipped = false;
        for k in 0..m {
            let ia = idx[(k + m - 1) % m];
            let ib = idx[k];
            let ic = idx[(k + 1) % m];
            let (a, b, c) = (poly[ia], poly[ib], poly[ic]);
            if orient(a, b, c) <= 0.0 {
                continue;
            }
            let blocked = idx.iter().any(|&o| {
                if o == ia || o == ib || o == ic {
                    return false;
                }
                let p = poly[o];
                orient(a, b, p) >= 0.0 && orient(b, c, p) >= 0.0 && orient(c, a, p) >= 0.0
            });
            if blocked {
                continue;
            }
            tris.push([ia, ib, ic]);
            idx.remove(k);
            clipped = true;
            break;
        }
        if !clipped {
            break;
        }
    }
    if idx.len() == 3 {
        tris.push([idx[0], idx[1], idx[2]]);
    }
    tris
}

//! Geometric body measurements: enclosed volume and horizontal girths.

use crate::body::Mesh;

/// Volumes at or below this (m³) are treated as an inverted or open mesh.
pub const MIN_VOLUME: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeasureError {
    #[error("mesh volume {0} m^3 is not positive; the mesh is inverted or not closed")]
    NonPositiveVolume(f64),
    #[error("mesh has no vertical extent")]
    NoExtent,
    #[error("plane at height {height} m does not intersect the mesh")]
    NoIntersection { height: f64 },
}

/// Signed volume enclosed by a closed, outward-oriented mesh.
pub fn mesh_volume(mesh: &Mesh) -> Result<f64, MeasureError> {
    let v = signed_volume(mesh);
    if v <= MIN_VOLUME {
        return Err(MeasureError::NonPositiveVolume(v));
    }
    Ok(v)
}

/// Sum of origin-apex tetrahedra, without the orientation check.
pub fn signed_volume(mesh: &Mesh) -> f64 {
    let mut six_v = 0.0;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        six_v += a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0]);
    }
    six_v / 6.0
}

/// (min y, max y) over all vertices.
pub fn vertical_range(mesh: &Mesh) -> Option<(f64, f64)> {
    let mut it = mesh.vertices.iter().map(|v| v[1]);
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), y| (lo.min(y), hi.max(y))))
}

/// Perimeter of the convex hull of the mesh's cross-section with the
/// horizontal plane at `height_fraction` of its vertical extent.
pub fn circumference(mesh: &Mesh, height_fraction: f64) -> Result<f64, MeasureError> {
    let (lo, hi) = vertical_range(mesh).ok_or(MeasureError::NoExtent)?;
    if hi <= lo {
        return Err(MeasureError::NoExtent);
    }
    let y = lo + height_fraction * (hi - lo);
    let points = slice_points(mesh, y);
    if points.is_empty() {
        return Err(MeasureError::NoIntersection { height: y });
    }
    Ok(polygon_perimeter(&convex_hull(points)))
}

/// Points where triangle edges meet the plane `y = level`, projected to (x, z).
pub fn slice_points(mesh: &Mesh, level: f64) -> Vec<[f64; 2]> {
    let mut pts = Vec::new();
    for f in 0..mesh.faces.len() {
        let tri = mesh.triangle(f);
        for e in 0..3 {
            let (p, q) = (tri[e], tri[(e + 1) % 3]);
            let (dp, dq) = (p[1] - level, q[1] - level);
            if dp == 0.0 {
                pts.push([p[0], p[2]]);
            }
            if (dp < 0.0 && dq > 0.0) || (dp > 0.0 && dq < 0.0) {
                let t = dp / (dp - dq);
                pts.push([p[0] + t * (q[0] - p[0]), p[2] + t * (q[2] - p[2])]);
            }
        }
    }
    pts
}

/// Andrew's monotone chain; returns the hull counter-clockwise without
/// collinear points.
pub fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Closed-polygon perimeter. A single point has perimeter 0; two points
/// count the segment twice.
pub fn polygon_perimeter(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 2 {
        return 0.0;
    }
    (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            (b[0] - a[0]).hypot(b[1] - a[1])
        })
        .sum()
}

#[cfg(test)]
pub(crate) mod shapes {
    use crate::body::Mesh;

    /// Vertical prism over a convex polygon ordered by angle from +x toward +z,
    /// spanning `y0..y1`.
    pub fn prism(polygon: &[[f64; 2]], y0: f64, y1: f64) -> Mesh {
        let n = polygon.len() as u32;
        let mut vertices = Vec::new();
        for &y in &[y0, y1] {
            vertices.extend(polygon.iter().map(|p| [p[0], y, p[1]]));
        }
        let mut faces = Vec::new();
        for k in 0..n {
            let (a, b, c, d) = (k, (k + 1) % n, n + (k + 1) % n, n + k);
            faces.push([a, c, b]);
            faces.push([a, d, c]);
        }
        for k in 1..n - 1 {
            faces.push([0, k, k + 1]);
            faces.push([n, n + k + 1, n + k]);
        }
        Mesh::new(vertices, faces)
    }

    pub fn unit_cube() -> Mesh {
        prism(&[[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]], 0.0, 1.0)
    }

    pub fn regular_polygon(n: usize, r: f64) -> Vec<[f64; 2]> {
        (0..n)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                [r * a.cos(), r * a.sin()]
            })
            .collect()
    }
}

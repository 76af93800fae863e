//! Depth-map rendering of the posed body and its 8-bit conditioning image.
//!
//! Pixel `(px, py)` covers `[px, px+1) x [py, py+1)` and is sampled at its
//! center. Image y grows downward. Coverage uses edge functions with a
//! top-left tie rule, so a pixel center lying exactly on an edge shared by
//! two triangles is drawn by exactly one of them. Depth is view-space Z,
//! interpolated perspective-correctly (1/Z is affine in screen space for
//! pinhole cameras).

use image::{ImageBuffer, Luma};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::io::Cursor;
use std::path::Path;

use crate::body::{axis_angle_to_matrix, BodyModel, BodyModelError, Mesh, PoseParams, ShapeParams};
use crate::exec::Exec;

/// Paper-default conditioning resolution (width x height).
pub const DEFAULT_WIDTH: u32 = 768;
pub const DEFAULT_HEIGHT: u32 = 1024;

/// Pinhole vertices closer than this (m) are treated as behind the camera.
pub const NEAR_PLANE: f64 = 1e-6;

const TILE_ROWS: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error(transparent)]
    Body(#[from] BodyModelError),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image size mismatch: expected {expected:?}, got {got:?}")]
    SizeMismatch { expected: (u32, u32), got: (u32, u32) },
}

pub type Result<T, E = RenderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Projection {
    /// `x = f·X/Z + cx`, `y = f·Y/Z + cy`; depth is Z.
    Pinhole { focal: f64, principal: [f64; 2] },
    /// `x = s·X + tx`, `y = s·Y + ty`; depth is `Z + depth_offset`.
    WeakPerspective {
        scale: f64,
        translation: [f64; 2],
        #[serde(default)]
        depth_offset: f64,
    },
}

/// Camera with a world-to-camera rigid transform `p_cam = R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub projection: Projection,
    /// Axis-angle, radians.
    #[serde(default)]
    pub rotation: [f64; 3],
    /// Meters.
    #[serde(default)]
    pub translation: [f64; 3],
}

impl Camera {
    /// Frontal pinhole camera for a y-up body standing on y = 0, facing +z,
    /// about 1.7 m tall. The body fills roughly 85% of the frame height.
    pub fn frontal(width: u32, height: u32) -> Self {
        let distance = 3.0;
        Camera {
            width,
            height,
            projection: Projection::Pinhole {
                focal: 0.85 * height as f64 * distance / 1.8,
                principal: [width as f64 / 2.0, height as f64 / 2.0],
            },
            rotation: [std::f64::consts::PI, 0.0, 0.0],
            translation: [0.0, 0.86, distance],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::InvalidCamera(format!("image size {}x{}", self.width, self.height)));
        }
        let ok = match self.projection {
            Projection::Pinhole { focal, principal } => {
                focal > 0.0 && focal.is_finite() && principal.iter().all(|x| x.is_finite())
            }
            Projection::WeakPerspective { scale, translation, depth_offset } => {
                scale > 0.0
                    && scale.is_finite()
                    && translation.iter().all(|x| x.is_finite())
                    && depth_offset.is_finite()
            }
        };
        if !ok || self.rotation.iter().chain(&self.translation).any(|x| !x.is_finite()) {
            return Err(RenderError::InvalidCamera("focal/scale must be positive and all values finite".into()));
        }
        Ok(())
    }

    fn world_to_camera(&self) -> (Matrix3<f64>, Vector3<f64>) {
        (axis_angle_to_matrix(self.rotation), Vector3::from(self.translation))
    }

    pub fn is_pinhole(&self) -> bool {
        matches!(self.projection, Projection::Pinhole { .. })
    }
}

/// A projected vertex. `in_front` is false for pinhole points at or behind
/// the near plane; their pixel coordinates are meaningless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub in_front: bool,
}

pub fn project(camera: &Camera, vertices: &[[f64; 3]]) -> Result<Vec<Projected>> {
    camera.validate()?;
    let (r, t) = camera.world_to_camera();
    Ok(vertices
        .iter()
        .map(|v| {
            let p = r * Vector3::from(*v) + t;
            match camera.projection {
                Projection::Pinhole { focal, principal } => {
                    let in_front = p.z > NEAR_PLANE;
                    let z = if in_front { p.z } else { f64::NAN };
                    Projected {
                        x: focal * p.x / z + principal[0],
                        y: focal * p.y / z + principal[1],
                        depth: p.z,
                        in_front,
                    }
                }
                Projection::WeakPerspective { scale, translation, depth_offset } => Projected {
                    x: scale * p.x + translation[0],
                    y: scale * p.y + translation[1],
                    depth: p.z + depth_offset,
                    in_front: true,
                },
            }
        })
        .collect())
}

/// Metric depth buffer. Background pixels hold `f64::INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
}

impl DepthMap {
    pub fn background(width: u32, height: u32) -> Self {
        Self { width, height, depth: vec![f64::INFINITY; width as usize * height as usize] }
    }

    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.depth[y as usize * self.width as usize + x as usize]
    }

    pub fn is_foreground(&self, x: u32, y: u32) -> bool {
        self.at(x, y).is_finite()
    }

    pub fn foreground_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }

    /// 16-bit grayscale in millimeters; background 0, foreground clamped to [1, 65535].
    pub fn to_png_mm(&self) -> Result<Vec<u8>> {
        let data: Vec<u16> = self
            .depth
            .iter()
            .map(|&d| if d.is_finite() { (d * 1000.0).round().clamp(1.0, 65535.0) as u16 } else { 0 })
            .collect();
        let img: ImageBuffer<Luma<u16>, _> =
            ImageBuffer::from_raw(self.width, self.height, data).expect("sized buffer");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Inverse of [`DepthMap::to_png_mm`], up to millimeter quantization.
    pub fn from_png_mm(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.into_luma16();
        let (w, h) = img.dimensions();
        let depth =
            img.into_raw().into_iter().map(|v| if v == 0 { f64::INFINITY } else { v as f64 / 1000.0 }).collect();
        Ok(Self { width: w, height: h, depth })
    }
}

struct ScreenTriangle {
    index: u32,
    p: [[f64; 2]; 3],
    /// Reciprocal depth for pinhole, depth for weak perspective.
    attr: [f64; 3],
    area: f64,
    row_min: usize,
    row_max: usize,
    col_min: usize,
    col_max: usize,
    /// Whether the edge opposite vertex `i` owns pixel centers lying on it.
    owns_edge: [bool; 3],
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Top-left ownership for an edge traversed `a -> b` with the interior on
/// the positive side.
fn owns(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

fn setup_triangles(mesh: &Mesh, camera: &Camera, projected: &[Projected]) -> Vec<ScreenTriangle> {
    let (w, h) = (camera.width as f64, camera.height as f64);
    let pinhole = camera.is_pinhole();
    let mut out = Vec::new();
    for (index, f) in mesh.faces.iter().enumerate() {
        let v = f.map(|i| projected[i as usize]);
        if v.iter().any(|q| !q.in_front) {
            continue;
        }
        let mut p = v.map(|q| [q.x, q.y]);
        let mut attr = v.map(|q| if pinhole { 1.0 / q.depth } else { q.depth });
        let mut area = edge(p[0], p[1], p[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            p.swap(1, 2);
            attr.swap(1, 2);
            area = -area;
        }
        let (xmin, xmax) = (p[0][0].min(p[1][0]).min(p[2][0]), p[0][0].max(p[1][0]).max(p[2][0]));
        let (ymin, ymax) = (p[0][1].min(p[1][1]).min(p[2][1]), p[0][1].max(p[1][1]).max(p[2][1]));
        if xmax < 0.0 || ymax < 0.0 || xmin >= w || ymin >= h {
            continue;
        }
        // Pixel centers px + 0.5 within [min, max].
        let first = |lo: f64| (lo - 0.5).ceil().max(0.0) as usize;
        let last = |hi: f64, n: f64| ((hi - 0.5).floor()).min(n - 1.0);
        let (cl, cm) = (first(xmin), last(xmax, w));
        let (rl, rm) = (first(ymin), last(ymax, h));
        if cm < 0.0 || rm < 0.0 || (cm as usize) < cl || (rm as usize) < rl {
            continue;
        }
        out.push(ScreenTriangle {
            index: index as u32,
            owns_edge: [owns(p[1], p[2]), owns(p[2], p[0]), owns(p[0], p[1])],
            p,
            attr,
            area,
            row_min: rl,
            row_max: rm as usize,
            col_min: cl,
            col_max: cm as usize,
        });
    }
    out
}

/// Z-buffered depth rasterization.
pub fn rasterize_depth(mesh: &Mesh, camera: &Camera) -> Result<DepthMap> {
    rasterize_depth_with(mesh, camera, Exec::default())
}

pub fn rasterize_depth_with(mesh: &Mesh, camera: &Camera, exec: Exec) -> Result<DepthMap> {
    let projected = project(camera, &mesh.vertices)?;
    let tris = setup_triangles(mesh, camera, &projected);
    let width = camera.width as usize;
    let pinhole = camera.is_pinhole();
    // (depth, owning triangle) per pixel; each tile owns a band of rows.
    let mut cells = vec![(f64::INFINITY, u32::MAX); width * camera.height as usize];
    exec.for_each_chunk_mut(&mut cells, TILE_ROWS * width, |tile, band| {
        let row0 = tile * TILE_ROWS;
        let row1 = row0 + band.len() / width;
        for t in tris.iter().filter(|t| t.row_max >= row0 && t.row_min < row1) {
            for row in t.row_min.max(row0)..=t.row_max.min(row1 - 1) {
                let py = row as f64 + 0.5;
                for col in t.col_min..=t.col_max {
                    let pc = [col as f64 + 0.5, py];
                    let w = [edge(t.p[1], t.p[2], pc), edge(t.p[2], t.p[0], pc), edge(t.p[0], t.p[1], pc)];
                    if (0..3).any(|i| w[i] < 0.0 || (w[i] == 0.0 && !t.owns_edge[i])) {
                        continue;
                    }
                    let interp = (w[0] * t.attr[0] + w[1] * t.attr[1] + w[2] * t.attr[2]) / t.area;
                    let depth = if pinhole { 1.0 / interp } else { interp };
                    if depth <= 0.0 || !depth.is_finite() {
                        continue;
                    }
                    let cell = &mut band[(row - row0) * width + col];
                    if depth < cell.0 || (depth == cell.0 && t.index < cell.1) {
                        *cell = (depth, t.index);
                    }
                }
            }
        }
    });
    Ok(DepthMap { width: camera.width, height: camera.height, depth: cells.into_iter().map(|c| c.0).collect() })
}

/// 8-bit grayscale conditioning image: background 0, nearest surface 255,
/// farthest 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditioningImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl ConditioningImage {
    pub fn at(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_gray_image(&self) -> image::GrayImage {
        image::GrayImage::from_raw(self.width, self.height, self.data.clone()).expect("sized buffer")
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_gray_image().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.into_luma8();
        let (width, height) = img.dimensions();
        Ok(Self { width, height, data: img.into_raw() })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }
}

/// Min–max normalization over foreground depths, inverted so near is bright.
pub fn normalize_for_conditioning(depth: &DepthMap) -> ConditioningImage {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &d in depth.depth.iter().filter(|d| d.is_finite()) {
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let range = hi - lo;
    let data = depth
        .depth
        .iter()
        .map(|&d| {
            if !d.is_finite() {
                0
            } else if range > 0.0 {
                (1.0 + 254.0 * (hi - d) / range).round() as u8
            } else {
                255
            }
        })
        .collect();
    ConditioningImage { width: depth.width, height: depth.height, data }
}

/// Skin, rasterize and normalize in one step.
pub fn render_conditioning(
    model: &BodyModel,
    beta: &ShapeParams,
    theta: &PoseParams,
    camera: &Camera,
) -> Result<ConditioningImage> {
    render_conditioning_with(model, beta, theta, camera, Exec::default())
}

pub fn render_conditioning_with(
    model: &BodyModel,
    beta: &ShapeParams,
    theta: &PoseParams,
    camera: &Camera,
    exec: Exec,
) -> Result<ConditioningImage> {
    let mesh = model.skin_with(beta, theta, exec)?;
    Ok(normalize_for_conditioning(&rasterize_depth_with(&mesh, camera, exec)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::make_test_model;

    fn pinhole(w: u32, h: u32, f: f64) -> Camera {
        Camera {
            width: w,
            height: h,
            projection: Projection::Pinhole { focal: f, principal: [w as f64 / 2.0, h as f64 / 2.0] },
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = pinhole(64, 48, 100.0);
        let p = project(&cam, &[[0.0, 0.0, 2.0]]).unwrap()[0];
        assert_eq!((p.x, p.y, p.depth), (32.0, 24.0, 2.0));
        let behind = project(&cam, &[[0.0, 0.0, -1.0]]).unwrap()[0];
        assert!(!behind.in_front);
    }

    #[test]
    fn weak_perspective_is_affine() {
        let cam = Camera {
            width: 10,
            height: 10,
            projection: Projection::WeakPerspective { scale: 100.0, translation: [7.0, 3.0], depth_offset: 1.5 },
            rotation: [0.0; 3],
            translation: [0.0; 3],
        };
        let p = project(&cam, &[[0.5, 0.0, 0.25]]).unwrap()[0];
        assert_eq!((p.x, p.y, p.depth), (57.0, 3.0, 1.75));
    }

    #[test]
    fn invalid_cameras() {
        let mut cam = pinhole(0, 10, 1.0);
        assert!(cam.validate().is_err());
        cam = pinhole(10, 10, -1.0);
        assert!(matches!(project(&cam, &[]), Err(RenderError::InvalidCamera(_))));
    }

    #[test]
    fn empty_mesh_is_all_background() {
        let d = rasterize_depth(&Mesh::new(vec![], vec![]), &pinhole(16, 16, 10.0)).unwrap();
        assert_eq!(d.foreground_count(), 0);
        assert!(normalize_for_conditioning(&d).data.iter().all(|&v| v == 0));
    }

    fn quad(z: f64, half: f64) -> (Vec<[f64; 3]>, Vec<[u32; 3]>) {
        (vec![[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]], vec![[0, 1, 2], [0, 2, 3]])
    }

    #[test]
    fn nearer_plane_wins_regardless_of_order() {
        let (mut v, mut f) = quad(2.0, 2.5);
        let (v2, f2) = quad(1.0, 0.2);
        let off = v.len() as u32;
        v.extend(v2);
        f.extend(f2.iter().map(|t| t.map(|i| i + off)));
        let cam = pinhole(32, 32, 16.0);
        let a = rasterize_depth(&Mesh::new(v.clone(), f.clone()), &cam).unwrap();
        f.reverse();
        let b = rasterize_depth(&Mesh::new(v, f), &cam).unwrap();
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.at(16, 16), 1.0);
        assert_eq!(a.at(1, 1), 2.0);
        let img = normalize_for_conditioning(&a);
        assert_eq!(img.at(16, 16), 255);
        assert_eq!(img.at(1, 1), 1);
        assert_eq!(img.at(0, 0), 1);
    }

    #[test]
    fn shared_edges_draw_each_pixel_once() {
        // Quad whose diagonal passes exactly through pixel centers.
        let cam = Camera {
            width: 8,
            height: 8,
            projection: Projection::WeakPerspective { scale: 1.0, translation: [0.0, 0.0], depth_offset: 0.0 },
            rotation: [0.0; 3],
            translation: [0.0; 3],
        };
        let v = vec![[0.5, 0.5, 1.0], [6.5, 0.5, 1.0], [6.5, 6.5, 1.0], [0.5, 6.5, 1.0]];
        let t1 = Mesh::new(v.clone(), vec![[0, 1, 2]]);
        let t2 = Mesh::new(v.clone(), vec![[0, 2, 3]]);
        let both = Mesh::new(v, vec![[0, 1, 2], [0, 2, 3]]);
        let (a, b, c) = (
            rasterize_depth(&t1, &cam).unwrap(),
            rasterize_depth(&t2, &cam).unwrap(),
            rasterize_depth(&both, &cam).unwrap(),
        );
        for i in 0..64 {
            let (fa, fb) = (a.depth[i].is_finite(), b.depth[i].is_finite());
            assert!(!(fa && fb), "pixel {i} drawn twice");
            assert_eq!(fa || fb, c.depth[i].is_finite());
        }
    }

    #[test]
    fn constant_depth_is_all_255() {
        let mut d = DepthMap::background(4, 4);
        d.depth[5] = 3.0;
        d.depth[6] = 3.0;
        let img = normalize_for_conditioning(&d);
        assert_eq!(img.data.iter().filter(|&&v| v == 255).count(), 2);
        assert_eq!(img.data.iter().filter(|&&v| v == 0).count(), 14);
    }

    #[test]
    fn png_round_trips() {
        let mut d = DepthMap::background(3, 2);
        d.depth[1] = 2.3456;
        d.depth[4] = 0.0001;
        let back = DepthMap::from_png_mm(&d.to_png_mm().unwrap()).unwrap();
        assert_eq!(back.depth[1], 2.346);
        assert_eq!(back.depth[4], 0.001);
        assert!(back.depth[0].is_infinite());
        let img = normalize_for_conditioning(&d);
        assert_eq!(ConditioningImage::from_png(&img.to_png().unwrap()).unwrap(), img);
    }

    #[test]
    fn exec_strategies_agree() {
        let m = make_test_model(0);
        let mut theta = PoseParams::zeros(4);
        theta.0[1] = [0.2, 0.0, 0.1];
        let cam = Camera::frontal(96, 128);
        let a = render_conditioning_with(&m, &ShapeParams::zeros(4), &theta, &cam, Exec::Sequential).unwrap();
        let b = render_conditioning_with(&m, &ShapeParams::zeros(4), &theta, &cam, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.foreground_count() > 1000);
    }
}

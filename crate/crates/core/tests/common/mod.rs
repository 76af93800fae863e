//! Brute-force reference implementations used as test oracles. Nothing here
//! calls into the library's numerical code paths.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::Rng;
use reshape_core::body::{BodyModel, Mesh};

pub type M3 = [[f64; 3]; 3];

pub fn mat_mul(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn mat_vec(a: &M3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// Rotation about a unit axis by the exponential-map angle, written out in
/// components.
pub fn rodrigues(r: [f64; 3]) -> M3 {
    let angle = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if angle == 0.0 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let [x, y, z] = r.map(|c| c / angle);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Linear blend skinning straight from the model arrays, one vertex at a
/// time, with forward kinematics by walking each joint's ancestor chain.
pub fn naive_skin(model: &BodyModel, beta: &[f64], theta: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let p = model.parts();
    let (nv, nj, nb) = (model.num_vertices(), model.num_joints(), p.num_betas);
    let mut shaped = p.template_vertices.clone();
    for v in 0..nv {
        for c in 0..3 {
            for k in 0..nb {
                shaped[v][c] += p.shape_dirs[(v * 3 + c) * nb + k] * beta[k];
            }
        }
    }
    let mut joints = vec![[0.0; 3]; nj];
    for j in 0..nj {
        for v in 0..nv {
            for c in 0..3 {
                joints[j][c] += p.joint_regressor[j * nv + v] * shaped[v][c];
            }
        }
    }
    let rots: Vec<M3> = theta.iter().map(|r| rodrigues(*r)).collect();
    let root = (0..nj).find(|&j| p.parents[j].is_none()).unwrap();
    let mut features = Vec::new();
    for j in (0..nj).filter(|&j| j != root) {
        for a in 0..3 {
            for b in 0..3 {
                features.push(rots[j][a][b] - if a == b { 1.0 } else { 0.0 });
            }
        }
    }
    let nf = features.len();

    // G_j = G_parent · [R_j | J_j − J_parent], walked up from the root.
    fn global(j: usize, parents: &[Option<usize>], rots: &[M3], joints: &[[f64; 3]]) -> (M3, [f64; 3]) {
        match parents[j] {
            None => (rots[j], joints[j]),
            Some(q) => {
                let (pr, pt) = global(q, parents, rots, joints);
                let local = [0, 1, 2].map(|c| joints[j][c] - joints[q][c]);
                let moved = mat_vec(&pr, local);
                (mat_mul(&pr, &rots[j]), [0, 1, 2].map(|c| moved[c] + pt[c]))
            }
        }
    }
    let transforms: Vec<(M3, [f64; 3])> = (0..nj)
        .map(|j| {
            let (r, t) = global(j, &p.parents, &rots, &joints);
            let rj = mat_vec(&r, joints[j]);
            (r, [0, 1, 2].map(|c| t[c] - rj[c]))
        })
        .collect();

    (0..nv)
        .map(|v| {
            let mut rest = shaped[v];
            for c in 0..3 {
                for f in 0..nf {
                    rest[c] += p.pose_dirs[(v * 3 + c) * nf + f] * features[f];
                }
            }
            let mut out = [0.0; 3];
            for j in 0..nj {
                let w = p.skin_weights[v * nj + j];
                let moved = mat_vec(&transforms[j].0, rest);
                for c in 0..3 {
                    out[c] += w * (moved[c] + transforms[j].1[c]);
                }
            }
            out
        })
        .collect()
}

pub fn max_vertex_diff(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .fold(0.0, f64::max)
}

/// Pinhole with the identity extrinsics, principal point at the centre.
pub struct SimplePinhole {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
}

impl SimplePinhole {
    pub fn principal(&self) -> [f64; 2] {
        [self.width as f64 / 2.0, self.height as f64 / 2.0]
    }

    pub fn to_pixel(&self, p: [f64; 3]) -> [f64; 2] {
        let c = self.principal();
        [self.focal * p[0] / p[2] + c[0], self.focal * p[1] / p[2] + c[1]]
    }
}

/// Möller–Trumbore ray/triangle intersection; returns the ray parameter.
fn ray_triangle(dir: [f64; 3], tri: [[f64; 3]; 3]) -> Option<f64> {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let cross =
        |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let (e1, e2) = (sub(tri[1], tri[0]), sub(tri[2], tri[0]));
    let p = cross(dir, e2);
    let det = dot(e1, p);
    if det.abs() < 1e-14 {
        return None;
    }
    let s = [-tri[0][0], -tri[0][1], -tri[0][2]];
    let u = dot(s, p) / det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = cross(s, e1);
    let v = dot(dir, q) / det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = dot(e2, q) / det;
    (t > 0.0).then_some(t)
}

/// Depth (camera z) of the nearest surface through every pixel centre, by
/// casting a ray against every triangle. Background is +∞.
pub fn raycast_depth(mesh: &Mesh, cam: &SimplePinhole) -> Vec<f64> {
    let c = cam.principal();
    let tris: Vec<_> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
    let mut out = Vec::with_capacity((cam.width * cam.height) as usize);
    for y in 0..cam.height {
        for x in 0..cam.width {
            // z component 1, so the ray parameter is the depth.
            let dir = [(x as f64 + 0.5 - c[0]) / cam.focal, (y as f64 + 0.5 - c[1]) / cam.focal, 1.0];
            let best = tris.iter().filter_map(|t| ray_triangle(dir, *t)).fold(f64::INFINITY, f64::min);
            out.push(best);
        }
    }
    out
}

/// Distance from a pixel centre to the nearest projected triangle edge.
pub fn distance_to_edges(mesh: &Mesh, cam: &SimplePinhole, x: u32, y: u32) -> f64 {
    let pc = [x as f64 + 0.5, y as f64 + 0.5];
    let seg = |a: [f64; 2], b: [f64; 2]| {
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((pc[0] - a[0]) * dx + (pc[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        ((a[0] + t * dx - pc[0]).powi(2) + (a[1] + t * dy - pc[1]).powi(2)).sqrt()
    };
    let mut best = f64::INFINITY;
    for f in 0..mesh.faces.len() {
        let t = mesh.triangle(f).map(|p| cam.to_pixel(p));
        for e in 0..3 {
            best = best.min(seg(t[e], t[(e + 1) % 3]));
        }
    }
    best
}

/// Closed, randomly perturbed UV sphere of low resolution centred at `c`.
pub fn lumpy_sphere(rng: &mut impl Rng, c: [f64; 3], radius: f64) -> Mesh {
    let (rings, segs) = (rng.gen_range(3..7), rng.gen_range(4..10));
    let mut vertices = vec![[c[0], c[1] - radius, c[2]]];
    for i in 1..rings {
        let phi = std::f64::consts::PI * i as f64 / rings as f64;
        for k in 0..segs {
            let th = 2.0 * std::f64::consts::PI * k as f64 / segs as f64;
            let r = radius * rng.gen_range(0.7..1.2);
            vertices.push([c[0] + r * phi.sin() * th.cos(), c[1] - r * phi.cos(), c[2] + r * phi.sin() * th.sin()]);
        }
    }
    vertices.push([c[0], c[1] + radius, c[2]]);
    let top = (vertices.len() - 1) as u32;
    let ring = |i: u32, k: u32| 1 + i * segs as u32 + k % segs as u32;
    let mut faces = Vec::new();
    for k in 0..segs as u32 {
        faces.push([0, ring(0, k + 1), ring(0, k)]);
        for i in 0..rings as u32 - 2 {
            faces.push([ring(i, k), ring(i, k + 1), ring(i + 1, k + 1)]);
            faces.push([ring(i, k), ring(i + 1, k + 1), ring(i + 1, k)]);
        }
        faces.push([top, ring(rings as u32 - 2, k), ring(rings as u32 - 2, k + 1)]);
    }
    Mesh::new(vertices, faces)
}

/// Independent random triangles in a box in front of the camera; they
/// interpenetrate freely.
pub fn triangle_soup(rng: &mut impl Rng, count: usize) -> Mesh {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for i in 0..count as u32 {
        let c = [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(2.0..4.0)];
        for _ in 0..3 {
            vertices.push([
                c[0] + rng.gen_range(-0.4..0.4),
                c[1] + rng.gen_range(-0.4..0.4),
                c[2] + rng.gen_range(-0.5..0.5),
            ]);
        }
        faces.push([3 * i, 3 * i + 1, 3 * i + 2]);
    }
    Mesh::new(vertices, faces)
}

/// Plain softmax attention with explicit loops.
pub fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> =
                k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (w, vj) in e.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += w / s * x;
                }
            }
            out
        })
        .collect()
}

/// Row-major rows times a d×d matrix given as rows.
pub fn project_rows(x: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter().map(|r| (0..w[0].len()).map(|c| r.iter().zip(w).map(|(a, wr)| a * wr[c]).sum()).collect()).collect()
}

/// Mean SSIM by evaluating each 11×11 Gaussian window directly.
pub fn brute_ssim(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (6.5025, 58.5225);
    let mut total = 0.0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let mut wsum = [0.0; 5];
            for i in 0..11 {
                for j in 0..11 {
                    let wt = g[i] * g[j] / (gs * gs);
                    let (p, q) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                    wsum[0] += wt * p;
                    wsum[1] += wt * q;
                    wsum[2] += wt * p * p;
                    wsum[3] += wt * q * q;
                    wsum[4] += wt * p * q;
                }
            }
            let (mx, my) = (wsum[0], wsum[1]);
            let (vx, vy, cov) = (wsum[2] - mx * mx, wsum[3] - my * my, wsum[4] - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / ((w - 10) * (h - 10)) as f64
}

//! Synthetic stand-ins for licensed body-model assets.
//!
//! Every array value is rounded to `f32` precision and every weight is a
//! dyadic fraction, so the models survive the container format bit-exactly.
//! No transcendental functions are evaluated, which keeps the bytes identical
//! across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BodyModel, BodyModelParts};

const RING: usize = 8;
const H: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// Octagon directions in the (x, z) plane, ordered by angle from +x toward +z.
const OCTAGON: [(f64, f64); RING] =
    [(1.0, 0.0), (H, H), (0.0, 1.0), (-H, H), (-1.0, 0.0), (-H, -H), (0.0, -1.0), (H, -H)];

/// (height, half-width, half-depth) of each ring, feet to head.
const RINGS: [(f64, f64, f64); 8] = [
    (0.00, 0.16, 0.10),
    (0.45, 0.17, 0.10),
    (0.85, 0.19, 0.12),
    (1.05, 0.15, 0.11),
    (1.25, 0.18, 0.12),
    (1.42, 0.21, 0.11),
    (1.52, 0.06, 0.06),
    (1.72, 0.08, 0.09),
];

/// Per-ring skinning weights over (pelvis, spine, head, knee).
const RING_WEIGHTS: [[f64; 4]; 8] = [
    [0.0, 0.0, 0.0, 1.0],
    [0.25, 0.0, 0.0, 0.75],
    [0.75, 0.0, 0.0, 0.25],
    [0.5, 0.5, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.75, 0.25, 0.0],
    [0.0, 0.25, 0.75, 0.0],
    [0.0, 0.0, 1.0, 0.0],
];

/// Ring each joint's regressor row averages.
const JOINT_RINGS: [usize; 4] = [2, 4, 6, 1];

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Closed faces for a stack of `rings` rings with `n` vertices each.
/// Side quads are split into two outward-facing triangles; caps are fans.
fn ring_stack_faces(rings: usize, n: usize) -> Vec<[u32; 3]> {
    let idx = |r: usize, k: usize| (r * n + k % n) as u32;
    let mut faces = Vec::with_capacity(2 * n * (rings - 1) + 2 * (n - 2));
    for r in 0..rings - 1 {
        for k in 0..n {
            let (a, b, c, d) = (idx(r, k), idx(r, k + 1), idx(r + 1, k + 1), idx(r + 1, k));
            faces.push([a, c, b]);
            faces.push([a, d, c]);
        }
    }
    for k in 1..n - 1 {
        faces.push([idx(0, 0), idx(0, k), idx(0, k + 1)]);
    }
    let top = rings - 1;
    for k in 1..n - 1 {
        faces.push([idx(top, 0), idx(top, k + 1), idx(top, k)]);
    }
    faces
}

/// Deterministic low-poly body: 8 octagonal rings (V = 64), four joints
/// (pelvis root, spine, head, knee) and four shape directions
/// (girth, height, belly, shoulders).
pub fn make_test_model(seed: u64) -> BodyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |scale: f64| rng.gen_range(-8i32..=8) as f64 / 8.0 * scale;

    let nv = RINGS.len() * RING;
    let mut template = Vec::with_capacity(nv);
    for &(y, rx, rz) in &RINGS {
        let y = y + jitter(1.0 / 256.0);
        let rx = rx + jitter(1.0 / 256.0);
        let rz = rz + jitter(1.0 / 512.0);
        for &(cx, cz) in &OCTAGON {
            template.push([f32_round(rx * cx), f32_round(y), f32_round(rz * cz)]);
        }
    }

    const B: usize = 4;
    let mut shape_dirs = vec![0.0; nv * 3 * B];
    for (r, &(_, rx, rz)) in RINGS.iter().enumerate() {
        let torso = (2..=5).contains(&r);
        for (k, &(cx, cz)) in OCTAGON.iter().enumerate() {
            let v = r * RING + k;
            let y = template[v][1];
            let mut set = |c: usize, b: usize, x: f64| shape_dirs[(v * 3 + c) * B + b] = f32_round(x);
            let girth = if torso { 0.125 } else { 0.0625 };
            set(0, 0, girth * rx * cx);
            set(2, 0, girth * rz * cz);
            set(1, 1, 0.03 * y / 1.72);
            if r == 2 || r == 3 {
                set(2, 2, 0.03 * cz.max(0.0) + 0.005 * cz);
                set(0, 2, 0.01 * cx);
            }
            if r == 5 {
                set(0, 3, 0.02 * cx);
            }
            if r == 2 {
                set(0, 3, -0.01 * cx);
            }
        }
    }
    for d in shape_dirs.iter_mut() {
        if *d != 0.0 {
            *d = f32_round(*d + jitter(1.0 / 4096.0));
        }
    }

    let nj = JOINT_RINGS.len();
    let np = 9 * (nj - 1);
    let pose_dirs: Vec<f64> = (0..nv * 3 * np).map(|_| rng.gen_range(-64i32..=64) as f64 / 8192.0).collect();

    let mut joint_regressor = vec![0.0; nj * nv];
    for (j, &r) in JOINT_RINGS.iter().enumerate() {
        for k in 0..RING {
            joint_regressor[j * nv + r * RING + k] = 1.0 / RING as f64;
        }
    }

    let mut skin_weights = Vec::with_capacity(nv * nj);
    for w in &RING_WEIGHTS {
        for _ in 0..RING {
            skin_weights.extend_from_slice(w);
        }
    }

    BodyModel::new(BodyModelParts {
        template_vertices: template,
        faces: ring_stack_faces(RINGS.len(), RING),
        shape_dirs,
        num_betas: B,
        pose_dirs,
        joint_regressor,
        skin_weights,
        parents: vec![None, Some(0), Some(1), Some(0)],
    })
    .expect("test model satisfies the model invariants")
}

/// (height, half-width) of each rectangular ring of the block body.
const BLOCK_RINGS: [(f64, f64); 10] = [
    (0.00, 0.15),
    (0.80, 0.15),
    (0.82, 0.18),
    (0.95, 0.18),
    (0.97, 0.14),
    (1.13, 0.14),
    (1.14, 0.17),
    (1.30, 0.17),
    (1.32, 0.06),
    (1.70, 0.06),
];
const BLOCK_DEPTH: f64 = 0.10;

/// Body built from rectangular cross-sections of fixed depth, with five
/// shape directions that each move one measurable quantity:
/// leg width, hip width, waist width, chest width and overall height.
///
/// Only x-extents and the crown height change, so volume, slice perimeters
/// and vertical extent are all exactly affine in β for |β_k| ≤ 1 (the chest,
/// waist and hip slices at 0.72 / 0.62 / 0.52 of the height stay inside their
/// constant-width bands). This makes it the calibration body for
/// attribute-map tests where the linear map must be exact.
pub fn make_block_model() -> BodyModel {
    const N: usize = 4;
    const B: usize = 5;
    let corners = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    let nv = BLOCK_RINGS.len() * N;
    let mut template = Vec::with_capacity(nv);
    let mut shape_dirs = vec![0.0; nv * 3 * B];
    for (r, &(y, w)) in BLOCK_RINGS.iter().enumerate() {
        for (k, &(sx, sz)) in corners.iter().enumerate() {
            let v = r * N + k;
            template.push([f32_round(sx * w), f32_round(y), f32_round(sz * BLOCK_DEPTH)]);
            let width_dir = match r {
                0 | 1 => Some(0),
                2 | 3 => Some(1),
                4 | 5 => Some(2),
                6 | 7 => Some(3),
                _ => None,
            };
            if let Some(b) = width_dir {
                shape_dirs[v * 3 * B + b] = f32_round(sx * 0.02);
            }
            if r == BLOCK_RINGS.len() - 1 {
                shape_dirs[(v * 3 + 1) * B + 4] = f32_round(0.1);
            }
        }
    }

    let nj = 2;
    let mut joint_regressor = vec![0.0; nj * nv];
    for k in 0..N {
        joint_regressor[2 * N + k] = 0.25;
        joint_regressor[nv + 6 * N + k] = 0.25;
    }
    let mut skin_weights = Vec::with_capacity(nv * nj);
    for r in 0..BLOCK_RINGS.len() {
        let w: [f64; 2] = match r {
            0..=3 => [1.0, 0.0],
            4 | 5 => [0.5, 0.5],
            _ => [0.0, 1.0],
        };
        for _ in 0..N {
            skin_weights.extend_from_slice(&w);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x0b10c);
    let pose_dirs = (0..nv * 3 * 9).map(|_| rng.gen_range(-16i32..=16) as f64 / 8192.0).collect();

    BodyModel::new(BodyModelParts {
        template_vertices: template,
        faces: ring_stack_faces(BLOCK_RINGS.len(), N),
        shape_dirs,
        num_betas: B,
        pose_dirs,
        joint_regressor,
        skin_weights,
        parents: vec![None, Some(0)],
    })
    .expect("block model satisfies the model invariants")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(make_test_model(0), make_test_model(0));
        assert_ne!(make_test_model(0).template(), make_test_model(1).template());
    }

    #[test]
    fn dims() {
        let m = make_test_model(7);
        assert_eq!(m.num_vertices(), 64);
        assert_eq!(m.num_joints(), 4);
        assert_eq!(m.num_betas(), 4);
        assert_eq!(m.num_faces(), 124);
        let b = make_block_model();
        assert_eq!(b.num_vertices(), 40);
        assert_eq!(b.num_betas(), 5);
    }

    #[test]
    fn skin_rows_sum_to_one_exactly() {
        for seed in 0..5 {
            let m = make_test_model(seed);
            for row in m.parts().skin_weights.chunks_exact(m.num_joints()) {
                assert_eq!(row.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn every_edge_is_shared_by_two_faces_in_opposite_directions() {
        for m in [make_test_model(0), make_block_model()] {
            let mut edges = std::collections::HashMap::new();
            for f in m.faces() {
                for e in 0..3 {
                    *edges.entry((f[e], f[(e + 1) % 3])).or_insert(0) += 1;
                }
            }
            for (&(a, b), &n) in &edges {
                assert_eq!(n, 1);
                assert_eq!(edges.get(&(b, a)), Some(&1), "edge {a}-{b} is not closed");
            }
        }
    }
}

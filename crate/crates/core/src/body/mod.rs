//! SMPL-compatible parametric body model.
//!
//! A [`BodyModel`] turns low-dimensional shape coefficients and per-joint
//! axis-angle rotations into a fixed-topology triangle mesh:
//!
//! 1. shape blendshapes are added to the rest template,
//! 2. joints are regressed from the shaped rest mesh,
//! 3. pose blendshapes (linear in `R(θ_j) - I` for non-root joints) are added,
//! 4. linear blend skinning applies the forward-kinematic joint transforms.
//!
//! All geometry is in meters with +y up.

mod container;
mod fixtures;

pub use container::{load_model, read_model, save_model, write_model, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use fixtures::{make_block_model, make_test_model};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::exec::Exec;

/// Tolerance on the row sums of the skinning weights and joint regressor.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Below this angle the axis-angle conversion switches to its Taylor series.
const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum BodyModelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model container: {0}")]
    Malformed(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invariant violated at row {row}: {what}")]
    Invariant { what: String, row: usize },
    #[error("non-finite parameter: {0}")]
    NonFinite(String),
}

pub type Result<T, E = BodyModelError> = std::result::Result<T, E>;

/// Triangle mesh in meters. Faces index into `vertices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[u32; 3]>) -> Self {
        Self { vertices, faces }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Uniformly scales every vertex about the origin.
    pub fn scaled(&self, s: f64) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| [v[0] * s, v[1] * s, v[2] * s]).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn triangle(&self, f: usize) -> [[f64; 3]; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }
}

/// Shape coefficients (β), one per shape blendshape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeParams(pub Vec<f64>);

impl ShapeParams {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn unit(n: usize, k: usize) -> Self {
        let mut b = vec![0.0; n];
        b[k] = 1.0;
        Self(b)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Per-joint axis-angle rotations (θ) in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseParams(pub Vec<[f64; 3]>);

impl PoseParams {
    pub fn zeros(joints: usize) -> Self {
        Self(vec![[0.0; 3]; joints])
    }

    /// Builds a pose from a flat `3 * J` vector, as stored by SMPL fitters.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(BodyModelError::Dimension(format!("flat pose length {} is not a multiple of 3", flat.len())));
        }
        Ok(Self(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Raw arrays of a body model, in the row-major layouts used by SMPL files.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModelParts {
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    /// `V x 3 x B`, index `(v * 3 + c) * B + k`.
    pub shape_dirs: Vec<f64>,
    pub num_betas: usize,
    /// `V x 3 x 9(J-1)`, index `(v * 3 + c) * P + p`.
    pub pose_dirs: Vec<f64>,
    /// `J x V`, index `j * V + v`.
    pub joint_regressor: Vec<f64>,
    /// `V x J`, index `v * J + j`.
    pub skin_weights: Vec<f64>,
    pub parents: Vec<Option<usize>>,
}

/// Immutable, validated body model.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    parts: BodyModelParts,
    root: usize,
    /// Joints ordered so every parent precedes its children.
    order: Vec<usize>,
    /// Non-root joints in index order; position `i` owns pose-dir columns `9i..9i+9`.
    pose_joints: Vec<usize>,
}

impl BodyModel {
    /// Validates `parts` against every model invariant.
    pub fn new(parts: BodyModelParts) -> Result<Self> {
        let v = parts.template_vertices.len();
        let j = parts.parents.len();
        let b = parts.num_betas;
        if v == 0 || j == 0 {
            return Err(BodyModelError::Dimension("model needs at least one vertex and one joint".into()));
        }
        let expect = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(BodyModelError::Dimension(format!("{name} has {got} entries, expected {want}")))
            }
        };
        expect("shape_dirs", parts.shape_dirs.len(), v * 3 * b)?;
        expect("pose_dirs", parts.pose_dirs.len(), v * 3 * 9 * (j - 1))?;
        expect("joint_regressor", parts.joint_regressor.len(), j * v)?;
        expect("skin_weights", parts.skin_weights.len(), v * j)?;

        for (row, vert) in parts.template_vertices.iter().enumerate() {
            if vert.iter().any(|x| !x.is_finite()) {
                return Err(BodyModelError::Invariant { what: "non-finite template vertex".into(), row });
            }
        }
        for (row, f) in parts.faces.iter().enumerate() {
            if f.iter().any(|&i| i as usize >= v) {
                return Err(BodyModelError::Invariant { what: format!("face index out of range (V = {v})"), row });
            }
        }
        for (name, arr) in [("shape_dirs", &parts.shape_dirs), ("pose_dirs", &parts.pose_dirs)] {
            if let Some(i) = arr.iter().position(|x| !x.is_finite()) {
                return Err(BodyModelError::Invariant { what: format!("non-finite {name} entry"), row: i });
            }
        }
        for (row, w) in parts.skin_weights.chunks_exact(j).enumerate() {
            if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(BodyModelError::Invariant { what: "negative skinning weight".into(), row });
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(BodyModelError::Invariant { what: format!("skinning weights sum to {s}"), row });
            }
        }
        for (row, r) in parts.joint_regressor.chunks_exact(v).enumerate() {
            let s: f64 = r.iter().sum();
            if !s.is_finite() || (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(BodyModelError::Invariant { what: format!("joint regressor row sums to {s}"), row });
            }
        }

        let (root, order) = kinematic_order(&parts.parents)?;
        let pose_joints = (0..j).filter(|&i| i != root).collect();
        Ok(Self { parts, root, order, pose_joints })
    }

    pub fn parts(&self) -> &BodyModelParts {
        &self.parts
    }

    pub fn num_vertices(&self) -> usize {
        self.parts.template_vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.parts.faces.len()
    }

    pub fn num_joints(&self) -> usize {
        self.parts.parents.len()
    }

    pub fn num_betas(&self) -> usize {
        self.parts.num_betas
    }

    pub fn num_pose_features(&self) -> usize {
        9 * (self.num_joints() - 1)
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn template(&self) -> &[[f64; 3]] {
        &self.parts.template_vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.parts.faces
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parts.parents
    }

    pub fn template_mesh(&self) -> Mesh {
        Mesh::new(self.parts.template_vertices.clone(), self.parts.faces.clone())
    }

    fn check_betas(&self, beta: &ShapeParams) -> Result<()> {
        if beta.len() != self.num_betas() {
            return Err(BodyModelError::Dimension(format!(
                "beta has {} entries, model has {} shape blendshapes",
                beta.len(),
                self.num_betas()
            )));
        }
        Ok(())
    }

    fn check_pose(&self, theta: &PoseParams) -> Result<()> {
        if theta.len() != self.num_joints() {
            return Err(BodyModelError::Dimension(format!(
                "theta has {} joints, model has {}",
                theta.len(),
                self.num_joints()
            )));
        }
        Ok(())
    }

    /// Template plus shape blendshapes. Affine in β.
    pub fn shaped_template(&self, beta: &ShapeParams) -> Result<Mesh> {
        self.check_betas(beta)?;
        let b = self.num_betas();
        let dirs = &self.parts.shape_dirs;
        let vertices = self
            .parts
            .template_vertices
            .iter()
            .enumerate()
            .map(|(v, t)| {
                let mut out = *t;
                for (c, o) in out.iter_mut().enumerate() {
                    let row = &dirs[(v * 3 + c) * b..(v * 3 + c + 1) * b];
                    *o += row.iter().zip(&beta.0).map(|(d, x)| d * x).sum::<f64>();
                }
                out
            })
            .collect();
        Ok(Mesh::new(vertices, self.parts.faces.clone()))
    }

    /// `joint_regressor · vertices`.
    pub fn regress_joints(&self, vertices: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        let v = self.num_vertices();
        if vertices.len() != v {
            return Err(BodyModelError::Dimension(format!("got {} vertices, model has {v}", vertices.len())));
        }
        Ok(self
            .parts
            .joint_regressor
            .chunks_exact(v)
            .map(|row| {
                let mut j = [0.0; 3];
                for (w, p) in row.iter().zip(vertices) {
                    if *w != 0.0 {
                        j[0] += w * p[0];
                        j[1] += w * p[1];
                        j[2] += w * p[2];
                    }
                }
                j
            })
            .collect())
    }

    /// Pose-corrective offsets, linear in `vec(R(θ_j) - I)` over non-root joints.
    pub fn pose_blend_offsets(&self, theta: &PoseParams) -> Result<Vec<[f64; 3]>> {
        self.check_pose(theta)?;
        let features = self.pose_features(theta);
        Ok(self.apply_pose_dirs(&features))
    }

    /// Concatenated row-major `R(θ_j) - I` for every non-root joint.
    pub fn pose_features(&self, theta: &PoseParams) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.num_pose_features());
        for &j in &self.pose_joints {
            let r = axis_angle_to_matrix(theta.0[j]);
            for row in 0..3 {
                for col in 0..3 {
                    let id = if row == col { 1.0 } else { 0.0 };
                    f.push(r[(row, col)] - id);
                }
            }
        }
        f
    }

    fn apply_pose_dirs(&self, features: &[f64]) -> Vec<[f64; 3]> {
        let p = features.len();
        let dirs = &self.parts.pose_dirs;
        (0..self.num_vertices())
            .map(|v| {
                let mut o = [0.0; 3];
                if features.iter().all(|&x| x == 0.0) {
                    return o;
                }
                for (c, oc) in o.iter_mut().enumerate() {
                    let row = &dirs[(v * 3 + c) * p..(v * 3 + c + 1) * p];
                    *oc = row.iter().zip(features).map(|(d, x)| d * x).sum();
                }
                o
            })
            .collect()
    }

    /// Full forward pass: shape, pose correctives, forward kinematics and LBS.
    pub fn skin(&self, beta: &ShapeParams, theta: &PoseParams) -> Result<Mesh> {
        self.skin_with(beta, theta, Exec::default())
    }

    pub fn skin_with(&self, beta: &ShapeParams, theta: &PoseParams, exec: Exec) -> Result<Mesh> {
        Ok(self.posed(beta, theta, exec)?.mesh)
    }

    /// Like [`BodyModel::skin`] but also returns the posed joint positions.
    pub fn posed(&self, beta: &ShapeParams, theta: &PoseParams, exec: Exec) -> Result<Posed> {
        self.check_betas(beta)?;
        self.check_pose(theta)?;
        if let Some(k) = beta.0.iter().position(|x| !x.is_finite()) {
            return Err(BodyModelError::NonFinite(format!("beta[{k}]")));
        }
        if let Some(k) = theta.0.iter().position(|r| r.iter().any(|x| !x.is_finite())) {
            return Err(BodyModelError::NonFinite(format!("theta[{k}]")));
        }

        let shaped = self.shaped_template(beta)?;
        let rest_joints = self.regress_joints(&shaped.vertices)?;
        let offsets = self.pose_blend_offsets(theta)?;

        let nj = self.num_joints();
        let rotations: Vec<Matrix3<f64>> = theta.0.iter().map(|r| axis_angle_to_matrix(*r)).collect();
        let mut global_r = vec![Matrix3::identity(); nj];
        let mut global_t = vec![Vector3::zeros(); nj];
        for &j in &self.order {
            let jp = Vector3::from(rest_joints[j]);
            match self.parts.parents[j] {
                None => {
                    global_r[j] = rotations[j];
                    global_t[j] = jp;
                }
                Some(p) => {
                    let local = jp - Vector3::from(rest_joints[p]);
                    global_r[j] = global_r[p] * rotations[j];
                    global_t[j] = global_r[p] * local + global_t[p];
                }
            }
        }
        let posed_joints: Vec<[f64; 3]> = global_t.iter().map(|t| [t.x, t.y, t.z]).collect();
        // Remove the rest-pose joint location so transforms act on rest-space vertices.
        let skin_t: Vec<Vector3<f64>> =
            (0..nj).map(|j| global_t[j] - global_r[j] * Vector3::from(rest_joints[j])).collect();

        let weights = &self.parts.skin_weights;
        let mut vertices = vec![[0.0; 3]; self.num_vertices()];
        exec.for_each_chunk_mut(&mut vertices, 256, |ci, chunk| {
            for (k, out) in chunk.iter_mut().enumerate() {
                let v = ci * 256 + k;
                let s = shaped.vertices[v];
                let o = offsets[v];
                let p = Vector3::new(s[0] + o[0], s[1] + o[1], s[2] + o[2]);
                let mut acc = Vector3::zeros();
                for (j, &w) in weights[v * nj..(v + 1) * nj].iter().enumerate() {
                    if w != 0.0 {
                        acc += w * (global_r[j] * p + skin_t[j]);
                    }
                }
                *out = [acc.x, acc.y, acc.z];
            }
        });
        Ok(Posed { mesh: Mesh::new(vertices, self.parts.faces.clone()), joints: posed_joints })
    }
}

/// Posed mesh together with its posed joint locations.
#[derive(Debug, Clone, PartialEq)]
pub struct Posed {
    pub mesh: Mesh,
    pub joints: Vec<[f64; 3]>,
}

fn kinematic_order(parents: &[Option<usize>]) -> Result<(usize, Vec<usize>)> {
    let n = parents.len();
    let roots: Vec<usize> = (0..n).filter(|&j| parents[j].is_none()).collect();
    if roots.len() != 1 {
        return Err(BodyModelError::Invariant {
            what: format!("kinematic tree must have exactly one root, found {}", roots.len()),
            row: roots.get(1).copied().unwrap_or(0),
        });
    }
    let mut children = vec![Vec::new(); n];
    for (j, p) in parents.iter().enumerate() {
        if let Some(p) = *p {
            if p >= n {
                return Err(BodyModelError::Invariant { what: format!("parent index {p} out of range"), row: j });
            }
            children[p].push(j);
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![roots[0]];
    while let Some(j) = stack.pop() {
        order.push(j);
        stack.extend(children[j].iter().rev());
    }
    if order.len() != n {
        let unreached = (0..n).find(|j| !order.contains(j)).unwrap_or(0);
        return Err(BodyModelError::Invariant { what: "kinematic tree contains a cycle".into(), row: unreached });
    }
    Ok((roots[0], order))
}

/// Rodrigues' formula, with a series expansion near zero angle.
pub fn axis_angle_to_matrix(r: [f64; 3]) -> Matrix3<f64> {
    let theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = Matrix3::new(0.0, -r[2], r[1], r[2], 0.0, -r[0], -r[1], r[0], 0.0);
    Matrix3::identity() + k * a + (k * k) * b
}

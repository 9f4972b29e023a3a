//! Parametric body: linear blend skinning over a 24-joint tree with 10
//! shape blendshapes, plus the procedural desk-scale template generator.
//!
//! The skinning path is built from primitive tape ops, so poses and shape
//! coefficients are first-class differentiable inputs.

mod generator;

pub use generator::generate_template;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Part};

pub const JOINT_COUNT: usize = 24;
pub const THETA_LEN: usize = 72;
pub const BETA_LEN: usize = 10;

/// SMPL-convention joint names, index order matching the kinematic tree.
pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

/// Parent index per joint, -1 for the pelvis root.
pub const JOINT_PARENTS: [i32; JOINT_COUNT] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

/// 24 axis-angle joint rotations, radians, flattened to 72 floats.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseParams {
    pub theta: Vec<f64>,
}

impl PoseParams {
    pub fn zero() -> Self {
        PoseParams {
            theta: vec![0.0; THETA_LEN],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != THETA_LEN {
            return Err(Error::Schema(format!(
                "theta must have {} entries, got {}",
                THETA_LEN,
                self.theta.len()
            )));
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pose parameter".into()));
        }
        for j in 0..JOINT_COUNT {
            let w = &self.theta[3 * j..3 * j + 3];
            let mag = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
            if mag >= std::f64::consts::PI {
                log::warn!(
                    "pose joint {} ({}) has axis-angle magnitude {:.3} >= pi",
                    j,
                    JOINT_NAMES[j],
                    mag
                );
            }
        }
        Ok(())
    }
}

/// 10 shape coefficients.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapeParams {
    pub beta: Vec<f64>,
}

impl ShapeParams {
    pub fn zero() -> Self {
        ShapeParams {
            beta: vec![0.0; BETA_LEN],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.len() != BETA_LEN {
            return Err(Error::Schema(format!(
                "beta must have {} entries, got {}",
                BETA_LEN,
                self.beta.len()
            )));
        }
        if self.beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite shape parameter".into()));
        }
        if self.beta.iter().any(|v| v.abs() > 5.0) {
            return Err(Error::Invariant("|beta| must be <= 5".into()));
        }
        Ok(())
    }
}

/// Rest-pose template plus the kinematic tree, sparse skinning weights and
/// shape blendshapes.
#[derive(Clone, Debug)]
pub struct BodyModel {
    pub template: Mesh,
    /// Parent per joint, root = -1; parents always precede children.
    pub joint_parents: Vec<i32>,
    /// Rest-pose joint positions, world frame.
    pub joint_rest: Vec<[f64; 3]>,
    /// Per-vertex sparse weights as (joint, weight); at most 4 entries,
    /// nonnegative, summing to 1.
    pub skin_weights: Vec<Vec<(usize, f64)>>,
    /// 10 displacement fields, each flat V*3.
    pub blendshapes: Vec<Vec<f64>>,
}

/// Displacement bound (meters per unit beta) each blendshape must respect.
pub const BLENDSHAPE_BOUND: f64 = 0.1;

impl BodyModel {
    pub fn validate(&self) -> Result<()> {
        self.template.validate()?;
        self.template.validate_part_coverage()?;
        if self.joint_parents.len() != JOINT_COUNT || self.joint_rest.len() != JOINT_COUNT {
            return Err(Error::Schema(format!(
                "model must have exactly {} joints",
                JOINT_COUNT
            )));
        }
        if self.joint_parents[0] != -1 {
            return Err(Error::Invariant("joint 0 must be the root (parent -1)".into()));
        }
        for (j, &p) in self.joint_parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::Invariant(format!(
                    "joint {} has parent {}; parents must precede children",
                    j, p
                )));
            }
        }
        let v = self.template.vertex_count();
        if self.skin_weights.len() != v {
            return Err(Error::Schema(format!(
                "skin_weights has {} rows for {} vertices",
                self.skin_weights.len(),
                v
            )));
        }
        for (i, row) in self.skin_weights.iter().enumerate() {
            if row.is_empty() || row.len() > 4 {
                return Err(Error::Invariant(format!(
                    "vertex {} has {} skinning weights; expected 1..=4",
                    i,
                    row.len()
                )));
            }
            let mut sum = 0.0;
            for &(j, w) in row {
                if j >= JOINT_COUNT {
                    return Err(Error::Invariant(format!(
                        "vertex {} weight references joint {}",
                        i, j
                    )));
                }
                if w < 0.0 {
                    return Err(Error::Invariant(format!(
                        "vertex {} has negative skin weight {}",
                        i, w
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Invariant(format!(
                    "vertex {} skin weights sum to {} (must be 1)",
                    i, sum
                )));
            }
        }
        if self.blendshapes.len() != BETA_LEN {
            return Err(Error::Schema(format!(
                "model must have {} blendshapes, got {}",
                BETA_LEN,
                self.blendshapes.len()
            )));
        }
        for (m, s) in self.blendshapes.iter().enumerate() {
            if s.len() != v * 3 {
                return Err(Error::Schema(format!(
                    "blendshape {} has {} values for {} vertices",
                    m,
                    s.len(),
                    v
                )));
            }
            if s.iter().any(|d| d.abs() > BLENDSHAPE_BOUND) {
                return Err(Error::Invariant(format!(
                    "blendshape {} exceeds the {} m displacement bound",
                    m, BLENDSHAPE_BOUND
                )));
            }
        }
        Ok(())
    }

    /// Dense V x 24 weight matrix.
    fn dense_weights(&self) -> Vec<f64> {
        let v = self.template.vertex_count();
        let mut w = vec![0.0; v * JOINT_COUNT];
        for (i, row) in self.skin_weights.iter().enumerate() {
            for &(j, wt) in row {
                w[i * JOINT_COUNT + j] += wt;
            }
        }
        w
    }
}

/// Axis-angle to rotation matrix (row-major 3x3). Uses a second-order
/// Taylor expansion below 1e-8 magnitude.
pub fn rodrigues(w: [f64; 3]) -> [f64; 9] {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let theta = theta2.sqrt();
    let k = [
        0.0, -w[2], w[1], //
        w[2], 0.0, -w[0], //
        -w[1], w[0], 0.0,
    ];
    let mut k2 = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for p in 0..3 {
                s += k[3 * i + p] * k[3 * p + j];
            }
            k2[3 * i + j] = s;
        }
    }
    let (a, b) = if theta < 1e-8 {
        // sin(t)/t ~ 1, (1-cos t)/t^2 ~ 1/2
        (1.0, 0.5)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let mut r = [0.0; 9];
    for i in 0..9 {
        r[i] = a * k[i] + b * k2[i];
    }
    r[0] += 1.0;
    r[4] += 1.0;
    r[8] += 1.0;
    r
}

const SKEW_BASIS_X: [f64; 9] = [0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0];
const SKEW_BASIS_Y: [f64; 9] = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0];
const SKEW_BASIS_Z: [f64; 9] = [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];

fn skew_from_vec(tape: &mut Tape, w: TensorId) -> Result<TensorId> {
    let bx = tape.constant(vec![3, 3], SKEW_BASIS_X.to_vec())?;
    let by = tape.constant(vec![3, 3], SKEW_BASIS_Y.to_vec())?;
    let bz = tape.constant(vec![3, 3], SKEW_BASIS_Z.to_vec())?;
    let wx = tape.narrow(w, 0, 0, 1)?;
    let wy = tape.narrow(w, 0, 1, 1)?;
    let wz = tape.narrow(w, 0, 2, 1)?;
    let tx = tape.mul(wx, bx)?;
    let ty = tape.mul(wy, by)?;
    let tz = tape.mul(wz, bz)?;
    let s = tape.add(tx, ty)?;
    tape.add(s, tz)
}

/// Differentiable Rodrigues map of a length-3 axis-angle tensor. The branch
/// is picked from the current value; both branches are smooth inside their
/// region and agree to ~1e-16 at the 1e-8 switch point.
pub fn rodrigues_tape(tape: &mut Tape, w: TensorId) -> Result<TensorId> {
    let wd = tape.data(w);
    let theta2_val = wd[0] * wd[0] + wd[1] * wd[1] + wd[2] * wd[2];
    let eye = tape.constant(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?;
    if theta2_val.sqrt() < 1e-8 {
        // R ~ I + K + K^2/2
        let k = skew_from_vec(tape, w)?;
        let k2 = tape.matmul(k, k)?;
        let half_k2 = tape.scale(k2, 0.5);
        let s = tape.add(eye, k)?;
        return tape.add(s, half_k2);
    }
    let w2 = tape.mul(w, w)?;
    let theta2 = tape.sum(w2, None)?;
    let theta = tape.sqrt(theta2);
    let axis = tape.div(w, theta)?;
    let k = skew_from_vec(tape, axis)?;
    let k2 = tape.matmul(k, k)?;
    let sin_t = tape.sin(theta);
    let cos_t = tape.cos(theta);
    let one_minus_cos = tape.affine(cos_t, -1.0, 1.0);
    let term1 = tape.mul(sin_t, k)?;
    let term2 = tape.mul(one_minus_cos, k2)?;
    let s = tape.add(eye, term1)?;
    tape.add(s, term2)
}

/// Embeds a 3x3 rotation into a homogeneous 4x4 with zero translation.
fn embed_rotation(tape: &mut Tape, r: TensorId) -> Result<TensorId> {
    let zeros = tape.constant(vec![3, 1], vec![0.0; 3])?;
    let top = tape.concat(&[r, zeros], 1)?;
    let bottom = tape.constant(vec![1, 4], vec![0.0, 0.0, 0.0, 1.0])?;
    tape.concat(&[top, bottom], 0)
}

fn translation_matrix(t: [f64; 3]) -> Vec<f64> {
    vec![
        1.0, 0.0, 0.0, t[0], //
        0.0, 1.0, 0.0, t[1], //
        0.0, 0.0, 1.0, t[2], //
        0.0, 0.0, 0.0, 1.0,
    ]
}

/// World transform per joint: `G_k = G_parent * T(j_k - j_parent) * R_k`,
/// with the root translated to its rest position.
pub fn forward_kinematics(
    tape: &mut Tape,
    model: &BodyModel,
    theta: TensorId,
) -> Result<Vec<TensorId>> {
    if tape.shape(theta) != [THETA_LEN] {
        return Err(Error::Dimension(format!(
            "theta tensor must have shape [{}], got {:?}",
            THETA_LEN,
            tape.shape(theta)
        )));
    }
    let mut transforms: Vec<TensorId> = Vec::with_capacity(JOINT_COUNT);
    for j in 0..JOINT_COUNT {
        let w = tape.narrow(theta, 0, 3 * j, 3)?;
        let r = rodrigues_tape(tape, w)?;
        let r4 = embed_rotation(tape, r)?;
        let offset = if model.joint_parents[j] < 0 {
            model.joint_rest[j]
        } else {
            let p = model.joint_parents[j] as usize;
            [
                model.joint_rest[j][0] - model.joint_rest[p][0],
                model.joint_rest[j][1] - model.joint_rest[p][1],
                model.joint_rest[j][2] - model.joint_rest[p][2],
            ]
        };
        let t = tape.constant(vec![4, 4], translation_matrix(offset))?;
        let local = tape.matmul(t, r4)?;
        let g = if model.joint_parents[j] < 0 {
            local
        } else {
            let parent = transforms[model.joint_parents[j] as usize];
            tape.matmul(parent, local)?
        };
        transforms.push(g);
    }
    Ok(transforms)
}

/// Rest-pose joint positions accumulated with the same additions the
/// kinematic chain performs, so the rest transforms cancel bit-exactly in
/// `G_k * T(-j_k)` when all rotations are identity.
fn rest_accumulated(model: &BodyModel) -> Vec<[f64; 3]> {
    let mut acc = vec![[0.0f64; 3]; JOINT_COUNT];
    for j in 0..JOINT_COUNT {
        if model.joint_parents[j] < 0 {
            acc[j] = model.joint_rest[j];
        } else {
            let p = model.joint_parents[j] as usize;
            for a in 0..3 {
                let offset = model.joint_rest[j][a] - model.joint_rest[p][a];
                acc[j][a] = offset + acc[p][a];
            }
        }
    }
    acc
}

/// Joint world positions for given transforms (read back as values).
pub fn joint_positions(tape: &Tape, transforms: &[TensorId]) -> Vec<[f64; 3]> {
    transforms
        .iter()
        .map(|&g| {
            let d = tape.data(g);
            [d[3], d[7], d[11]]
        })
        .collect()
}

/// Linear blend skinning: poses the shaped template
/// `t_i + sum_m beta_m S_m,i` with the blended joint transforms
/// `sum_k w_ik G_k Gbar_k^{-1}`. Returns the posed V x 3 vertex tensor;
/// faces, UVs and labels are shared with the template unchanged.
pub fn skin(
    tape: &mut Tape,
    model: &BodyModel,
    theta: TensorId,
    beta: TensorId,
) -> Result<TensorId> {
    if tape.shape(beta) != [BETA_LEN] {
        return Err(Error::Dimension(format!(
            "beta tensor must have shape [{}], got {:?}",
            BETA_LEN,
            tape.shape(beta)
        )));
    }
    let v = model.template.vertex_count();

    // shaped rest vertices
    let mut shaped = tape.constant(vec![v, 3], model.template.vertices.clone())?;
    for m in 0..BETA_LEN {
        let bm = tape.narrow(beta, 0, m, 1)?;
        let sm = tape.constant(vec![v, 3], model.blendshapes[m].clone())?;
        let d = tape.mul(bm, sm)?;
        shaped = tape.add(shaped, d)?;
    }

    // per-joint skinning transform A_k = G_k * T(-j_k), flattened and stacked
    let transforms = forward_kinematics(tape, model, theta)?;
    let rest = rest_accumulated(model);
    let mut rows: Vec<TensorId> = Vec::with_capacity(JOINT_COUNT);
    for (j, &g) in transforms.iter().enumerate() {
        let jr = rest[j];
        let ginv = tape.constant(
            vec![4, 4],
            translation_matrix([-jr[0], -jr[1], -jr[2]]),
        )?;
        let a = tape.matmul(g, ginv)?;
        rows.push(tape.reshape(a, vec![1, 16])?);
    }
    let stacked = tape.concat(&rows, 0)?;
    let weights = tape.constant(vec![v, JOINT_COUNT], model.dense_weights())?;
    let blended = tape.matmul(weights, stacked)?;

    // apply the blended affine row-wise: out_r = sum_c M[:,4r+c]*shaped[:,c] + M[:,4r+3]
    let mut cols = Vec::with_capacity(3);
    let shaped_cols = [
        tape.narrow(shaped, 1, 0, 1)?,
        tape.narrow(shaped, 1, 1, 1)?,
        tape.narrow(shaped, 1, 2, 1)?,
    ];
    for r in 0..3 {
        let mut acc = tape.narrow(blended, 1, 4 * r + 3, 1)?;
        for c in 0..3 {
            let m = tape.narrow(blended, 1, 4 * r + c, 1)?;
            let prod = tape.mul(m, shaped_cols[c])?;
            acc = tape.add(acc, prod)?;
        }
        cols.push(acc);
    }
    tape.concat(&cols, 1)
}

/// Convenience: plain skinning with value inputs, producing a full mesh.
pub fn skin_mesh(model: &BodyModel, pose: &PoseParams, shape: &ShapeParams) -> Result<Mesh> {
    pose.validate()?;
    shape.validate()?;
    let mut tape = Tape::new();
    let theta = tape.constant(vec![THETA_LEN], pose.theta.clone())?;
    let beta = tape.constant(vec![BETA_LEN], shape.beta.clone())?;
    let verts = skin(&mut tape, model, theta, beta)?;
    Ok(Mesh {
        vertices: tape.data(verts).to_vec(),
        faces: model.template.faces.clone(),
        uvs: model.template.uvs.clone(),
        part_labels: model.template.part_labels.clone(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    vertices: Vec<f64>,
    faces: Vec<[usize; 3]>,
    uvs: Vec<[f64; 2]>,
    part_labels: Vec<usize>,
    joint_parents: Vec<i32>,
    joint_rest: Vec<[f64; 3]>,
    skin_weights: Vec<Vec<(usize, f64)>>,
    blendshapes: Vec<Vec<f64>>,
}

pub fn save_model(model: &BodyModel, path: &std::path::Path) -> Result<()> {
    let file = ModelFile {
        vertices: model.template.vertices.clone(),
        faces: model.template.faces.clone(),
        uvs: model.template.uvs.clone(),
        part_labels: model.template.part_labels.iter().map(|p| p.index()).collect(),
        joint_parents: model.joint_parents.clone(),
        joint_rest: model.joint_rest.clone(),
        skin_weights: model.skin_weights.clone(),
        blendshapes: model.blendshapes.clone(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<BodyModel> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("model file {}: {}", path.display(), e)))?;
    let part_labels = file
        .part_labels
        .iter()
        .map(|&i| Part::from_index(i))
        .collect::<Result<Vec<_>>>()?;
    let model = BodyModel {
        template: Mesh {
            vertices: file.vertices,
            faces: file.faces,
            uvs: file.uvs,
            part_labels,
        },
        joint_parents: file.joint_parents,
        joint_rest: file.joint_rest,
        skin_weights: file.skin_weights,
        blendshapes: file.blendshapes,
    };
    model.validate()?;
    Ok(model)
}

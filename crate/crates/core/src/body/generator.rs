//! Procedural capsule-limb humanoid: ~1.7 m tall, 24 joints in SMPL order,
//! one UV chart per capsule, labels matching the offset-bound table, and 10
//! hand-designed shape modes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BodyModel, BETA_LEN, JOINT_PARENTS};
use crate::mesh::{Mesh, Part};

const JOINT_REST: [[f64; 3]; 24] = [
    [0.0, 0.95, 0.0],   // pelvis
    [0.09, 0.91, 0.0],  // left_hip
    [-0.09, 0.91, 0.0], // right_hip
    [0.0, 1.05, 0.0],   // spine1
    [0.09, 0.52, 0.0],  // left_knee
    [-0.09, 0.52, 0.0], // right_knee
    [0.0, 1.15, 0.0],   // spine2
    [0.09, 0.12, 0.0],  // left_ankle
    [-0.09, 0.12, 0.0], // right_ankle
    [0.0, 1.25, 0.0],   // spine3
    [0.09, 0.04, 0.10], // left_foot
    [-0.09, 0.04, 0.10],// right_foot
    [0.0, 1.42, 0.0],   // neck
    [0.06, 1.38, 0.0],  // left_collar
    [-0.06, 1.38, 0.0], // right_collar
    [0.0, 1.52, 0.0],   // head
    [0.17, 1.40, 0.0],  // left_shoulder
    [-0.17, 1.40, 0.0], // right_shoulder
    [0.44, 1.40, 0.0],  // left_elbow
    [-0.44, 1.40, 0.0], // right_elbow
    [0.68, 1.40, 0.0],  // left_wrist
    [-0.68, 1.40, 0.0], // right_wrist
    [0.76, 1.40, 0.0],  // left_hand
    [-0.76, 1.40, 0.0], // right_hand
];

enum Weights {
    /// Bone from joint `j0` (t=0) to `j1` (t=1) with a 50/50 crease blend
    /// over the last 30% of the bone.
    TwoJoint(usize, usize),
    /// Blend across the spine joints by vertex height.
    SpineChain,
}

struct CapsuleSpec {
    p0: [f64; 3],
    p1: [f64; 3],
    radius: f64,
    segs: usize,
    rings: usize,
    part: Part,
    weights: Weights,
    chart: usize,
}

struct Builder {
    vertices: Vec<f64>,
    faces: Vec<[usize; 3]>,
    uvs: Vec<[f64; 2]>,
    labels: Vec<Part>,
    skin: Vec<Vec<(usize, f64)>>,
}

const SPINE_STATIONS: [(usize, f64); 5] = [(0, 0.95), (3, 1.05), (6, 1.15), (9, 1.25), (12, 1.42)];

/// Weights are quantized to multiples of 1/1024 so two-entry rows sum to
/// exactly 1.0 in f64, which keeps rest-pose skinning bit-exact.
fn quantized_pair(j0: usize, j1: usize, w1: f64) -> Vec<(usize, f64)> {
    let q = (w1 * 1024.0).round() / 1024.0;
    if q <= 0.0 {
        vec![(j0, 1.0)]
    } else if q >= 1.0 {
        vec![(j1, 1.0)]
    } else {
        vec![(j0, 1.0 - q), (j1, q)]
    }
}

fn spine_weights(y: f64) -> Vec<(usize, f64)> {
    if y <= SPINE_STATIONS[0].1 {
        return vec![(SPINE_STATIONS[0].0, 1.0)];
    }
    if y >= SPINE_STATIONS[4].1 {
        return vec![(SPINE_STATIONS[4].0, 1.0)];
    }
    for w in SPINE_STATIONS.windows(2) {
        let ((ja, ya), (jb, yb)) = (w[0], w[1]);
        if y >= ya && y <= yb {
            return quantized_pair(ja, jb, (y - ya) / (yb - ya));
        }
    }
    unreachable!("station scan covers the range");
}

fn bone_weights(t: f64, j0: usize, j1: usize) -> Vec<(usize, f64)> {
    quantized_pair(j0, j1, 0.5 * ((t - 0.7) / 0.3).clamp(0.0, 1.0))
}

#[inline]
fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Chart cell rectangle in a 4x4 atlas grid with a small inset.
fn chart_rect(cell: usize) -> ([f64; 2], [f64; 2]) {
    let (cx, cy) = (cell % 4, cell / 4);
    let m = 0.012;
    (
        [cx as f64 * 0.25 + m, cy as f64 * 0.25 + m],
        [(cx + 1) as f64 * 0.25 - m, (cy + 1) as f64 * 0.25 - m],
    )
}

impl Builder {
    fn add_capsule(&mut self, spec: &CapsuleSpec) {
        let axis = normalize([
            spec.p1[0] - spec.p0[0],
            spec.p1[1] - spec.p0[1],
            spec.p1[2] - spec.p0[2],
        ]);
        let reference = if axis[1].abs() < 0.99 {
            [0.0, 1.0, 0.0]
        } else {
            [1.0, 0.0, 0.0]
        };
        let u = normalize(cross(reference, axis));
        let v = cross(axis, u);
        let (lo, hi) = chart_rect(spec.chart);
        let base = self.vertices.len() / 3;
        let cols = spec.segs + 1;

        let push_vertex = |pos: [f64; 3], uv: [f64; 2], t: f64, builder: &mut Builder| {
            builder.vertices.extend_from_slice(&pos);
            builder.uvs.push(uv);
            let label = classify(spec.part, pos);
            builder.labels.push(label);
            let w = match spec.weights {
                Weights::TwoJoint(j0, j1) => bone_weights(t, j0, j1),
                Weights::SpineChain => spine_weights(pos[1]),
            };
            builder.skin.push(w);
        };

        // tube rings with a duplicated seam column for clean UVs
        for k in 0..spec.rings {
            let t = k as f64 / (spec.rings - 1) as f64;
            let center = [
                spec.p0[0] + t * (spec.p1[0] - spec.p0[0]),
                spec.p0[1] + t * (spec.p1[1] - spec.p0[1]),
                spec.p0[2] + t * (spec.p1[2] - spec.p0[2]),
            ];
            let vfrac = 0.1 + 0.8 * t;
            for s in 0..cols {
                let ang = 2.0 * std::f64::consts::PI * s as f64 / spec.segs as f64;
                let (ca, sa) = (ang.cos(), ang.sin());
                let pos = [
                    center[0] + spec.radius * (ca * u[0] + sa * v[0]),
                    center[1] + spec.radius * (ca * u[1] + sa * v[1]),
                    center[2] + spec.radius * (ca * u[2] + sa * v[2]),
                ];
                let uv = [
                    lo[0] + (s as f64 / spec.segs as f64) * (hi[0] - lo[0]),
                    lo[1] + vfrac * (hi[1] - lo[1]),
                ];
                push_vertex(pos, uv, t, self);
            }
        }
        // apex vertices extending the capsule by its radius
        let apex0 = [
            spec.p0[0] - spec.radius * axis[0],
            spec.p0[1] - spec.radius * axis[1],
            spec.p0[2] - spec.radius * axis[2],
        ];
        let apex1 = [
            spec.p1[0] + spec.radius * axis[0],
            spec.p1[1] + spec.radius * axis[1],
            spec.p1[2] + spec.radius * axis[2],
        ];
        let mid_u = (lo[0] + hi[0]) / 2.0;
        push_vertex(apex0, [mid_u, lo[1] + 0.02 * (hi[1] - lo[1])], 0.0, self);
        push_vertex(apex1, [mid_u, lo[1] + 0.98 * (hi[1] - lo[1])], 1.0, self);
        let a0 = base + spec.rings * cols;
        let a1 = a0 + 1;

        for k in 0..spec.rings - 1 {
            for s in 0..spec.segs {
                let a = base + k * cols + s;
                let b = a + 1;
                let c = a + cols;
                let d = c + 1;
                self.faces.push([a, b, d]);
                self.faces.push([a, d, c]);
            }
        }
        for s in 0..spec.segs {
            let r0a = base + s;
            let r0b = base + s + 1;
            self.faces.push([r0b, r0a, a0]);
            let rna = base + (spec.rings - 1) * cols + s;
            let rnb = rna + 1;
            self.faces.push([rna, rnb, a1]);
        }
    }
}

/// Head capsules get a frontal face band; foot capsules get sole labels.
fn classify(default: Part, pos: [f64; 3]) -> Part {
    match default {
        Part::Head if pos[2] > 0.035 => Part::Face,
        Part::Feet if pos[1] < 0.012 => Part::Footprints,
        p => p,
    }
}

fn blendshapes(vertices: &[f64], labels: &[Part], amps: &[f64; BETA_LEN]) -> Vec<Vec<f64>> {
    let v = vertices.len() / 3;
    let mut shapes = vec![vec![0.0; v * 3]; BETA_LEN];
    let arm_parts = [Part::Arms, Part::Forearms, Part::Hands];
    let leg_parts = [Part::Thighs, Part::Calves, Part::Feet, Part::Footprints];
    for i in 0..v {
        let (x, y, z) = (vertices[3 * i], vertices[3 * i + 1], vertices[3 * i + 2]);
        let part = labels[i];
        let sgn = if x >= 0.0 { 1.0 } else { -1.0 };
        let mut put = |m: usize, d: [f64; 3]| {
            shapes[m][3 * i] = amps[m] * d[0];
            shapes[m][3 * i + 1] = amps[m] * d[1];
            shapes[m][3 * i + 2] = amps[m] * d[2];
        };
        // 0: global height scale about the pelvis line
        put(0, [0.0, 0.06 * (y - 0.95), 0.0]);
        // 1: torso girth
        if part == Part::Torso {
            put(1, [0.35 * x, 0.0, 0.35 * z]);
        }
        // 2: arm length
        if arm_parts.contains(&part) {
            put(2, [sgn * 0.08 * ((x.abs() - 0.17) / 0.61).clamp(0.0, 1.0), 0.0, 0.0]);
        }
        // 3: leg length
        if leg_parts.contains(&part) {
            put(3, [0.0, -0.07 * ((0.91 - y) / 0.91).clamp(0.0, 1.0), 0.0]);
        }
        // 4: head size about the head center
        if part == Part::Head || part == Part::Face {
            put(4, [0.45 * x, 0.45 * (y - 1.565), 0.45 * z]);
        }
        // 5: belly bulge
        if part == Part::Torso && z > 0.0 {
            let bump = (z / 0.14).clamp(0.0, 1.0) * (1.0 - ((y - 1.05).abs() / 0.15)).clamp(0.0, 1.0);
            put(5, [0.0, 0.0, 0.05 * bump]);
        }
        // 6: shoulder width
        if arm_parts.contains(&part) {
            put(6, [sgn * 0.05, 0.0, 0.0]);
        }
        // 7: hip width
        if leg_parts.contains(&part) {
            put(7, [sgn * 0.04, 0.0, 0.0]);
        }
        // 8: limb thickness, radial from the bone axis
        if part == Part::Arms || part == Part::Forearms {
            put(8, [0.0, 0.35 * (y - 1.40), 0.35 * z]);
        } else if part == Part::Thighs || part == Part::Calves {
            put(8, [0.3 * (x - sgn * 0.09), 0.0, 0.3 * z]);
        }
        // 9: chest depth
        if part == Part::Torso && y >= 1.15 {
            put(9, [0.0, 0.0, 0.3 * z * ((y - 1.15) / 0.27).clamp(0.0, 1.0)]);
        }
    }
    shapes
}

/// Deterministic per-seed desk-scale humanoid. The seed jitters capsule
/// radii (±4%) and blendshape amplitudes (±10%).
pub fn generate_template(seed: u64) -> BodyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = &JOINT_REST;
    let mut rad = |base: f64| base * rng.gen_range(0.96..1.04);

    let torso_r = rad(0.13);
    let head_r = rad(0.075);
    let uarm_r = [rad(0.045), rad(0.045)];
    let farm_r = [rad(0.04), rad(0.04)];
    let hand_r = [rad(0.033), rad(0.033)];
    let thigh_r = [rad(0.07), rad(0.07)];
    let calf_r = [rad(0.05), rad(0.05)];
    let foot_r = [rad(0.04), rad(0.04)];

    let mut specs: Vec<CapsuleSpec> = Vec::new();
    specs.push(CapsuleSpec {
        p0: [0.0, 0.88, 0.0],
        p1: [0.0, 1.41, 0.0],
        radius: torso_r,
        segs: 12,
        rings: 7,
        part: Part::Torso,
        weights: Weights::SpineChain,
        chart: 0,
    });
    // apex1 extends by the radius, so the crown lands at y = 1.70 exactly;
    // with soles at y = 0 the rest height is radius-jitter independent
    specs.push(CapsuleSpec {
        p0: [0.0, 1.50, 0.0],
        p1: [0.0, 1.70 - head_r, 0.0],
        radius: head_r,
        segs: 10,
        rings: 5,
        part: Part::Head,
        weights: Weights::TwoJoint(12, 15),
        chart: 1,
    });
    for side in 0..2 {
        let s = if side == 0 { 1.0 } else { -1.0 };
        let (hip, knee, ankle, foot) = if side == 0 { (1, 4, 7, 10) } else { (2, 5, 8, 11) };
        let (shoulder, elbow, wrist, hand) =
            if side == 0 { (16, 18, 20, 22) } else { (17, 19, 21, 23) };
        specs.push(CapsuleSpec {
            p0: [s * 0.17, 1.40, 0.0],
            p1: [s * 0.44, 1.40, 0.0],
            radius: uarm_r[side],
            segs: 8,
            rings: 4,
            part: Part::Arms,
            weights: Weights::TwoJoint(shoulder, elbow),
            chart: 2 + side,
        });
        specs.push(CapsuleSpec {
            p0: [s * 0.44, 1.40, 0.0],
            p1: [s * 0.68, 1.40, 0.0],
            radius: farm_r[side],
            segs: 8,
            rings: 4,
            part: Part::Forearms,
            weights: Weights::TwoJoint(elbow, wrist),
            chart: 4 + side,
        });
        specs.push(CapsuleSpec {
            p0: [s * 0.68, 1.40, 0.0],
            p1: [s * 0.78, 1.40, 0.0],
            radius: hand_r[side],
            segs: 6,
            rings: 3,
            part: Part::Hands,
            weights: Weights::TwoJoint(wrist, hand),
            chart: 6 + side,
        });
        specs.push(CapsuleSpec {
            p0: [j[hip][0], 0.91, 0.0],
            p1: [j[knee][0], 0.52, 0.0],
            radius: thigh_r[side],
            segs: 9,
            rings: 6,
            part: Part::Thighs,
            weights: Weights::TwoJoint(hip, knee),
            chart: 8 + side,
        });
        specs.push(CapsuleSpec {
            p0: [j[knee][0], 0.52, 0.0],
            p1: [j[ankle][0], 0.12, 0.0],
            radius: calf_r[side],
            segs: 8,
            rings: 4,
            part: Part::Calves,
            weights: Weights::TwoJoint(knee, ankle),
            chart: 10 + side,
        });
        specs.push(CapsuleSpec {
            p0: [j[ankle][0], foot_r[side], -0.03],
            p1: [j[ankle][0], foot_r[side], 0.12],
            radius: foot_r[side],
            segs: 6,
            rings: 4,
            part: Part::Feet,
            weights: Weights::TwoJoint(ankle, foot),
            chart: 12 + side,
        });
    }

    let mut b = Builder {
        vertices: Vec::new(),
        faces: Vec::new(),
        uvs: Vec::new(),
        labels: Vec::new(),
        skin: Vec::new(),
    };
    for spec in &specs {
        b.add_capsule(spec);
    }

    let mut amps = [0.0; BETA_LEN];
    for a in &mut amps {
        *a = rng.gen_range(0.9..1.1);
    }
    let blendshapes = blendshapes(&b.vertices, &b.labels, &amps);

    let model = BodyModel {
        template: Mesh {
            vertices: b.vertices,
            faces: b.faces,
            uvs: b.uvs,
            part_labels: b.labels,
        },
        joint_parents: JOINT_PARENTS.to_vec(),
        joint_rest: JOINT_REST.to_vec(),
        skin_weights: b.skin,
        blendshapes,
    };
    model.validate().expect("generated template must satisfy model invariants");
    model
}

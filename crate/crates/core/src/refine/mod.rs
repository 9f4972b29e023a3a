//! Graph-convolutional mesh refinement: stacked blocks of graph conv layers
//! predict per-vertex offsets from vertex normals, clamped per body part,
//! plus the combined mesh-fitting loss.


use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, GradSink, Tape, Tensor, TensorId, ValueCtx};
use crate::error::{Error, Result};
use crate::mesh::{self, Adjacency, MeshTopology, Part, PART_COUNT};
use crate::params::{BoundParams, ParamSet};
use crate::render::{silhouette_loss, soft_silhouette, Camera};

/// Network plan: `blocks` refinement stages, each with `layers` graph
/// convolutions of feature width `width`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    pub blocks: usize,
    pub layers: usize,
    pub width: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            blocks: 3,
            layers: 6,
            width: 128,
        }
    }
}

/// Per-part offset bounds in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClampTable {
    bounds: [f64; PART_COUNT],
}

impl ClampTable {
    /// The reference thresholds: face 0.0, footprints 0.0, hands 0.0,
    /// head 0.04, torso 0.06, arms 0.02, forearms 0.04, thighs 0.04,
    /// calves 0.03, feet 0.02.
    pub fn defaults() -> Self {
        let mut bounds = [0.0; PART_COUNT];
        bounds[Part::Face.index()] = 0.0;
        bounds[Part::Footprints.index()] = 0.0;
        bounds[Part::Hands.index()] = 0.0;
        bounds[Part::Head.index()] = 0.04;
        bounds[Part::Torso.index()] = 0.06;
        bounds[Part::Arms.index()] = 0.02;
        bounds[Part::Forearms.index()] = 0.04;
        bounds[Part::Thighs.index()] = 0.04;
        bounds[Part::Calves.index()] = 0.03;
        bounds[Part::Feet.index()] = 0.02;
        ClampTable { bounds }
    }

    /// Removes the bounds entirely (the clamping-ablation variant).
    pub fn unclamped() -> Self {
        ClampTable {
            bounds: [f64::INFINITY; PART_COUNT],
        }
    }

    pub fn everywhere(k: f64) -> Self {
        ClampTable {
            bounds: [k; PART_COUNT],
        }
    }

    pub fn bound(&self, part: Part) -> f64 {
        self.bounds[part.index()]
    }
}

struct NeighborSumOp {
    features: TensorId,
    adjacency: Rc<Adjacency>,
}

impl CustomOp for NeighborSumOp {
    fn backward(&self, ctx: &ValueCtx<'_>, _out: TensorId, gout: &[f64], sink: &mut GradSink<'_>) {
        let d = ctx.shape(self.features)[1];
        if let Some(df) = sink.buf(self.features) {
            // the neighbor relation is symmetric, so the adjoint is the
            // same aggregation applied to the upstream gradient
            for (i, nbrs) in self.adjacency.neighbors.iter().enumerate() {
                for &j in nbrs {
                    for c in 0..d {
                        df[i * d + c] += gout[j * d + c];
                    }
                }
            }
        }
    }
}

/// Sums neighbor feature rows: `out_i = sum_{j in N(i)} f_j`.
pub fn neighbor_sum(tape: &mut Tape, features: TensorId, adjacency: &Rc<Adjacency>) -> TensorId {
    let shape = tape.shape(features).to_vec();
    let (v, d) = (shape[0], shape[1]);
    let data = tape.data(features);
    let mut out = vec![0.0; v * d];
    for (i, nbrs) in adjacency.neighbors.iter().enumerate() {
        for &j in nbrs {
            for c in 0..d {
                out[i * d + c] += data[j * d + c];
            }
        }
    }
    let tensor = Tensor::new(shape, out).expect("shape consistent");
    tape.push_custom(
        &[features],
        tensor,
        Box::new(NeighborSumOp {
            features,
            adjacency: Rc::clone(adjacency),
        }),
    )
}

/// One graph convolution: `f'_i = ReLU(W0 f_i + sum_{j in N(i)} W1 f_j)`,
/// sum aggregation over mesh edges.
pub fn graph_conv(
    tape: &mut Tape,
    features: TensorId,
    adjacency: &Rc<Adjacency>,
    w0: TensorId,
    w1: TensorId,
) -> Result<TensorId> {
    let f_shape = tape.shape(features);
    if f_shape.len() != 2 || tape.shape(w0)[0] != f_shape[1] || tape.shape(w1)[0] != f_shape[1] {
        return Err(Error::Dimension(format!(
            "graph_conv features {:?} vs weights {:?}/{:?}",
            f_shape,
            tape.shape(w0),
            tape.shape(w1)
        )));
    }
    if adjacency.neighbors.len() != f_shape[0] {
        return Err(Error::Dimension(format!(
            "graph_conv adjacency covers {} vertices, features {}",
            adjacency.neighbors.len(),
            f_shape[0]
        )));
    }
    let own = tape.matmul(features, w0)?;
    let agg = neighbor_sum(tape, features, adjacency);
    let nbr = tape.matmul(agg, w1)?;
    let s = tape.add(own, nbr)?;
    Ok(tape.relu(s))
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Fresh refiner weights: per block, `layers` graph-conv pairs (W0, W1) and
/// one offset head W mapping [f'; f] to 3 components. Names follow
/// `gm.b{b}.l{l}.W0|W1` and `gm.b{b}.W`, 1-indexed.
pub fn init_refiner_params(cfg: &RefinerConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for b in 1..=cfg.blocks {
        for l in 1..=cfg.layers {
            let d_in = if l == 1 { 3 } else { cfg.width };
            let w0 = uniform_init(&mut rng, d_in, cfg.width);
            let w1 = uniform_init(&mut rng, d_in, cfg.width);
            set.insert(&format!("gm.b{}.l{}.W0", b, l), vec![d_in, cfg.width], w0)
                .unwrap();
            set.insert(&format!("gm.b{}.l{}.W1", b, l), vec![d_in, cfg.width], w1)
                .unwrap();
        }
        let head = uniform_init(&mut rng, cfg.width + 3, 3);
        set.insert(&format!("gm.b{}.W", b), vec![cfg.width + 3, 3], head)
            .unwrap();
    }
    set
}

/// One refinement block: vertex normals as node features, `layers` graph
/// convolutions, then `u_i = tanh(W [f'_i ; f_i])`. Offsets are bounded by
/// tanh to (-1, 1) per component before any clamping.
pub fn refine_block(
    tape: &mut Tape,
    verts: TensorId,
    topo: &MeshTopology,
    bound: &BoundParams,
    block: usize,
    cfg: &RefinerConfig,
) -> Result<TensorId> {
    let normals = mesh::vertex_normals(tape, verts, &topo.faces);
    let mut features = normals;
    for l in 1..=cfg.layers {
        let w0 = bound.id(&format!("gm.b{}.l{}.W0", block, l));
        let w1 = bound.id(&format!("gm.b{}.l{}.W1", block, l));
        features = graph_conv(tape, features, &topo.adjacency, w0, w1)?;
    }
    let joint = tape.concat(&[features, normals], 1)?;
    let head = bound.id(&format!("gm.b{}.W", block));
    let pre = tape.matmul(joint, head)?;
    Ok(tape.tanh(pre))
}

fn bounds_for(topo: &MeshTopology, table: &ClampTable) -> (Vec<f64>, Vec<f64>) {
    let mut lo = Vec::with_capacity(topo.vertex_count() * 3);
    let mut hi = Vec::with_capacity(topo.vertex_count() * 3);
    for &part in &topo.part_labels {
        // shrink finite bounds by a picometer: reconstructing the offset as
        // (P + d) - P costs up to a ulp, and the bound contract is exact
        let k = table.bound(part);
        let k = if k.is_finite() { (k - 1e-12).max(0.0) } else { k };
        for _ in 0..3 {
            lo.push(-k);
            hi.push(k);
        }
    }
    (lo, hi)
}

/// Per-component clamp of offsets to the part bounds:
/// `min(max(u, -K), K)` with K looked up from each vertex's label.
pub fn clamp_offsets(
    tape: &mut Tape,
    offsets: TensorId,
    topo: &MeshTopology,
    table: &ClampTable,
) -> Result<TensorId> {
    let (lo, hi) = bounds_for(topo, table);
    tape.clamp_elems(offsets, &lo, &hi)
}

/// Applies all blocks sequentially: `v <- v + clamp(u_b)`, re-clamping the
/// cumulative displacement from the input mesh after every block so the
/// total offset never exceeds the table.
pub fn refine_mesh(
    tape: &mut Tape,
    base_verts: TensorId,
    topo: &MeshTopology,
    bound: &BoundParams,
    cfg: &RefinerConfig,
    table: &ClampTable,
) -> Result<TensorId> {
    let mut verts = base_verts;
    for b in 1..=cfg.blocks {
        let u = refine_block(tape, verts, topo, bound, b, cfg)?;
        let uc = clamp_offsets(tape, u, topo, table)?;
        let moved = tape.add(verts, uc)?;
        let disp = tape.sub(moved, base_verts)?;
        let disp_c = clamp_offsets(tape, disp, topo, table)?;
        verts = tape.add(base_verts, disp_c)?;
    }
    Ok(verts)
}

/// Combined mesh loss: `lambda_gl * L_gl + lambda_gn * L_gn + L_s`, the
/// silhouette term averaged over the batch of views.
#[allow(clippy::too_many_arguments)]
pub fn mesh_loss(
    tape: &mut Tape,
    verts: TensorId,
    topo: &MeshTopology,
    views: &[(TensorId, &Camera)],
    lambda_gl: f64,
    lambda_gn: f64,
    sigma: f64,
) -> Result<TensorId> {
    if views.is_empty() {
        return Err(Error::Data("mesh_loss needs at least one view".into()));
    }
    let lap = mesh::laplacian_loss(tape, verts, &topo.adjacency);
    let nc = mesh::normal_consistency_loss(tape, verts, &topo.faces, &topo.adjacency);
    let mut sil_sum: Option<TensorId> = None;
    for &(target, camera) in views {
        let rendered = soft_silhouette(tape, verts, &topo.faces, camera, sigma);
        let l = silhouette_loss(tape, rendered, target)?;
        sil_sum = Some(match sil_sum {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let sil = tape.scale(sil_sum.unwrap(), 1.0 / views.len() as f64);
    let wl = tape.scale(lap, lambda_gl);
    let wn = tape.scale(nc, lambda_gn);
    let reg = tape.add(wl, wn)?;
    tape.add(reg, sil)
}

//! Triangle meshes: topology, adjacency, differentiable vertex normals and
//! the two geometric regularizers, plus OBJ round-tripping.

use std::fmt;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, GradSink, Tape, Tensor, TensorId, ValueCtx};
use crate::error::{Error, Result};

/// The ten body parts of the per-part offset bound table.
#[derive(Clone, Copy, PartialEq, Eq, Debug, PartialOrd, Ord)]
pub enum Part {
    Face,
    Footprints,
    Hands,
    Head,
    Torso,
    Arms,
    Forearms,
    Thighs,
    Calves,
    Feet,
}

pub const PART_COUNT: usize = 10;

pub const ALL_PARTS: [Part; PART_COUNT] = [
    Part::Face,
    Part::Footprints,
    Part::Hands,
    Part::Head,
    Part::Torso,
    Part::Arms,
    Part::Forearms,
    Part::Thighs,
    Part::Calves,
    Part::Feet,
];

pub const PART_NAMES: [&str; PART_COUNT] = [
    "face",
    "footprints",
    "hands",
    "head",
    "torso",
    "arms",
    "forearms",
    "thighs",
    "calves",
    "feet",
];

impl Part {
    pub fn index(self) -> usize {
        ALL_PARTS.iter().position(|&p| p == self).unwrap()
    }

    pub fn from_index(i: usize) -> Result<Part> {
        ALL_PARTS
            .get(i)
            .copied()
            .ok_or_else(|| Error::Schema(format!("part label {} out of range 0..{}", i, PART_COUNT)))
    }

    pub fn name(self) -> &'static str {
        PART_NAMES[self.index()]
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Triangle mesh with per-vertex UVs and body-part labels.
///
/// `vertices` is a flat `V*3` row-major array in meters. Faces are
/// counter-clockwise when viewed from outside.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub vertices: Vec<f64>,
    pub faces: Vec<[usize; 3]>,
    pub uvs: Vec<[f64; 2]>,
    pub part_labels: Vec<Part>,
}

impl Mesh {
    pub fn new(
        vertices: Vec<f64>,
        faces: Vec<[usize; 3]>,
        uvs: Vec<[f64; 2]>,
        part_labels: Vec<Part>,
    ) -> Result<Mesh> {
        let mesh = Mesh {
            vertices,
            faces,
            uvs,
            part_labels,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len() / 3
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        [
            self.vertices[3 * i],
            self.vertices[3 * i + 1],
            self.vertices[3 * i + 2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() % 3 != 0 {
            return Err(Error::MeshStructure(
                "vertex array length is not a multiple of 3".into(),
            ));
        }
        let v = self.vertex_count();
        if self.uvs.len() != v || self.part_labels.len() != v {
            return Err(Error::MeshStructure(format!(
                "uvs ({}) and labels ({}) must match vertex count ({})",
                self.uvs.len(),
                self.part_labels.len(),
                v
            )));
        }
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= v) {
                return Err(Error::MeshStructure(format!(
                    "face {} references vertex out of range: {:?}",
                    fi, f
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::MeshStructure(format!(
                    "face {} is degenerate: {:?}",
                    fi, f
                )));
            }
        }
        Ok(())
    }

    /// Template-level check: every part of the bound table must appear.
    pub fn validate_part_coverage(&self) -> Result<()> {
        for part in ALL_PARTS {
            if !self.part_labels.contains(&part) {
                return Err(Error::MeshStructure(format!(
                    "template has no vertices labeled '{}'",
                    part
                )));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in 0..self.vertex_count() {
            for a in 0..3 {
                let v = self.vertices[3 * i + a];
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        (lo, hi)
    }
}

/// Neighborhood structure derived from a mesh. Neighbor lists are sorted and
/// duplicate-free; `edge_face_pairs` lists the two faces across each
/// interior edge.
#[derive(Clone, Debug)]
pub struct Adjacency {
    pub neighbors: Vec<Vec<usize>>,
    pub incident_faces: Vec<Vec<usize>>,
    pub edge_face_pairs: Vec<(usize, usize)>,
}

/// Shareable topology bundle: everything about a mesh except the vertex
/// positions. Skinning and refinement move vertices but never touch this.
#[derive(Clone, Debug)]
pub struct MeshTopology {
    pub faces: Rc<Vec<[usize; 3]>>,
    pub adjacency: Rc<Adjacency>,
    pub uvs: Vec<[f64; 2]>,
    pub part_labels: Vec<Part>,
}

impl MeshTopology {
    pub fn from_mesh(mesh: &Mesh) -> Result<MeshTopology> {
        let adjacency = build_adjacency(mesh)?;
        Ok(MeshTopology {
            faces: Rc::new(mesh.faces.clone()),
            adjacency: Rc::new(adjacency),
            uvs: mesh.uvs.clone(),
            part_labels: mesh.part_labels.clone(),
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.part_labels.len()
    }

    /// Reassembles a full mesh around the given vertex positions.
    pub fn with_vertices(&self, vertices: Vec<f64>) -> Mesh {
        Mesh {
            vertices,
            faces: self.faces.as_ref().clone(),
            uvs: self.uvs.clone(),
            part_labels: self.part_labels.clone(),
        }
    }
}

/// Builds vertex adjacency and the interior-edge face pairs.
///
/// Fails if any edge is shared by more than two faces (non-manifold
/// template). Boundary edges (one face) are allowed.
pub fn build_adjacency(mesh: &Mesh) -> Result<Adjacency> {
    let v = mesh.vertex_count();
    let mut neighbors = vec![Vec::new(); v];
    let mut incident_faces = vec![Vec::new(); v];
    // edge key -> list of face indices
    let mut edges: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
        std::collections::BTreeMap::new();

    for (fi, f) in mesh.faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            edges.entry(key).or_default().push(fi);
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for &vi in f {
            incident_faces[vi].push(fi);
        }
    }

    let mut edge_face_pairs = Vec::new();
    for ((a, b), faces) in &edges {
        if faces.len() > 2 {
            return Err(Error::MeshStructure(format!(
                "edge ({}, {}) shared by {} faces; template must be edge-manifold",
                a,
                b,
                faces.len()
            )));
        }
        if faces.len() == 2 {
            edge_face_pairs.push((faces[0], faces[1]));
        }
    }

    for list in &mut neighbors {
        list.sort_unstable();
        list.dedup();
    }
    Ok(Adjacency {
        neighbors,
        incident_faces,
        edge_face_pairs,
    })
}

#[inline]
fn sub3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

const NORMAL_EPS: f64 = 1e-12;

/// Unnormalized face cross product `(b-a) x (c-a)`; its magnitude is twice
/// the face area.
pub fn face_cross(verts: &[f64], f: &[usize; 3]) -> [f64; 3] {
    let a = &verts[3 * f[0]..3 * f[0] + 3];
    let b = &verts[3 * f[1]..3 * f[1] + 3];
    let c = &verts[3 * f[2]..3 * f[2] + 3];
    cross3(sub3(b, a), sub3(c, a))
}

/// Area-weighted per-vertex unit normals, computed as the normalized sum of
/// incident-face cross products. Vertices whose incident faces are all
/// degenerate get a zero normal.
pub fn vertex_normals_raw(verts: &[f64], faces: &[[usize; 3]]) -> Vec<f64> {
    let v = verts.len() / 3;
    let mut acc = vec![0.0; v * 3];
    for f in faces {
        let n = face_cross(verts, f);
        for &vi in f {
            acc[3 * vi] += n[0];
            acc[3 * vi + 1] += n[1];
            acc[3 * vi + 2] += n[2];
        }
    }
    let mut degenerate = 0usize;
    for i in 0..v {
        let n = [acc[3 * i], acc[3 * i + 1], acc[3 * i + 2]];
        let len = norm3(n);
        if len < NORMAL_EPS {
            degenerate += 1;
            acc[3 * i] = 0.0;
            acc[3 * i + 1] = 0.0;
            acc[3 * i + 2] = 0.0;
        } else {
            acc[3 * i] /= len;
            acc[3 * i + 1] /= len;
            acc[3 * i + 2] /= len;
        }
    }
    if degenerate > 0 {
        log::warn!(
            "vertex_normals: {} vertices with degenerate incident faces got zero normals",
            degenerate
        );
    }
    acc
}

struct VertexNormalsOp {
    verts: TensorId,
    faces: Rc<Vec<[usize; 3]>>,
    /// Length of each accumulated (unnormalized) normal, zero if degenerate.
    norms: Vec<f64>,
}

impl CustomOp for VertexNormalsOp {
    fn backward(&self, ctx: &ValueCtx<'_>, out: TensorId, gout: &[f64], sink: &mut GradSink<'_>) {
        let unit = ctx.data(out);
        let verts = ctx.data(self.verts);
        let v = verts.len() / 3;
        // adjoint of each vertex's unnormalized normal: (I - y y^T)/|n| * g
        let mut acc_adj = vec![0.0; v * 3];
        for i in 0..v {
            let len = self.norms[i];
            if len < NORMAL_EPS {
                continue;
            }
            let y = [unit[3 * i], unit[3 * i + 1], unit[3 * i + 2]];
            let g = [gout[3 * i], gout[3 * i + 1], gout[3 * i + 2]];
            let yg = dot3(y, g);
            for a in 0..3 {
                acc_adj[3 * i + a] = (g[a] - y[a] * yg) / len;
            }
        }
        let Some(dv) = sink.buf(self.verts) else {
            return;
        };
        for f in self.faces.iter() {
            // every incident vertex's accumulator receives this face's cross
            // product, so the face's adjoint is the sum of theirs
            let mut w = [0.0; 3];
            for &vi in f {
                w[0] += acc_adj[3 * vi];
                w[1] += acc_adj[3 * vi + 1];
                w[2] += acc_adj[3 * vi + 2];
            }
            if w == [0.0; 3] {
                continue;
            }
            let a = &verts[3 * f[0]..3 * f[0] + 3];
            let b = &verts[3 * f[1]..3 * f[1] + 3];
            let c = &verts[3 * f[2]..3 * f[2] + 3];
            let e1 = sub3(b, a);
            let e2 = sub3(c, a);
            // n = e1 x e2: dL/de1 = e2 x w, dL/de2 = w x e1
            let d1 = cross3(e2, w);
            let d2 = cross3(w, e1);
            for k in 0..3 {
                dv[3 * f[1] + k] += d1[k];
                dv[3 * f[2] + k] += d2[k];
                dv[3 * f[0] + k] -= d1[k] + d2[k];
            }
        }
    }
}

/// Differentiable area-weighted vertex normals of a vertex tensor.
pub fn vertex_normals(tape: &mut Tape, verts: TensorId, faces: &Rc<Vec<[usize; 3]>>) -> TensorId {
    let data = tape.data(verts);
    let v = data.len() / 3;
    let mut acc = vec![0.0; v * 3];
    for f in faces.iter() {
        let n = face_cross(data, f);
        for &vi in f {
            acc[3 * vi] += n[0];
            acc[3 * vi + 1] += n[1];
            acc[3 * vi + 2] += n[2];
        }
    }
    let mut norms = vec![0.0; v];
    let mut out = vec![0.0; v * 3];
    for i in 0..v {
        let n = [acc[3 * i], acc[3 * i + 1], acc[3 * i + 2]];
        let len = norm3(n);
        norms[i] = len;
        if len >= NORMAL_EPS {
            out[3 * i] = n[0] / len;
            out[3 * i + 1] = n[1] / len;
            out[3 * i + 2] = n[2] / len;
        }
    }
    let tensor = Tensor::new(vec![v, 3], out).expect("shape consistent");
    tape.push_custom(
        &[verts],
        tensor,
        Box::new(VertexNormalsOp {
            verts,
            faces: Rc::clone(faces),
            norms,
        }),
    )
}

struct LaplacianLossOp {
    verts: TensorId,
    adjacency: Rc<Adjacency>,
    active: usize,
}

impl CustomOp for LaplacianLossOp {
    fn backward(&self, ctx: &ValueCtx<'_>, _out: TensorId, gout: &[f64], sink: &mut GradSink<'_>) {
        let verts = ctx.data(self.verts);
        let v = verts.len() / 3;
        let g = gout[0];
        let Some(dv) = sink.buf(self.verts) else {
            return;
        };
        let scale = 2.0 * g / self.active as f64;
        for i in 0..v {
            let nbrs = &self.adjacency.neighbors[i];
            if nbrs.is_empty() {
                continue;
            }
            let inv = 1.0 / nbrs.len() as f64;
            let mut d = [
                verts[3 * i],
                verts[3 * i + 1],
                verts[3 * i + 2],
            ];
            for &j in nbrs {
                d[0] -= verts[3 * j] * inv;
                d[1] -= verts[3 * j + 1] * inv;
                d[2] -= verts[3 * j + 2] * inv;
            }
            for a in 0..3 {
                dv[3 * i + a] += scale * d[a];
                for &j in nbrs {
                    dv[3 * j + a] -= scale * d[a] * inv;
                }
            }
        }
    }
}

/// Uniform-Laplacian regularizer: mean over vertices of the squared distance
/// to the centroid of their neighbors. Isolated vertices are excluded.
pub fn laplacian_loss(tape: &mut Tape, verts: TensorId, adjacency: &Rc<Adjacency>) -> TensorId {
    let data = tape.data(verts);
    let v = data.len() / 3;
    let mut total = 0.0;
    let mut active = 0usize;
    for i in 0..v {
        let nbrs = &adjacency.neighbors[i];
        if nbrs.is_empty() {
            continue;
        }
        active += 1;
        let inv = 1.0 / nbrs.len() as f64;
        let mut d = [data[3 * i], data[3 * i + 1], data[3 * i + 2]];
        for &j in nbrs {
            d[0] -= data[3 * j] * inv;
            d[1] -= data[3 * j + 1] * inv;
            d[2] -= data[3 * j + 2] * inv;
        }
        total += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    }
    if active < v {
        log::warn!(
            "laplacian_loss: {} isolated vertices excluded from the mean",
            v - active
        );
    }
    let value = if active == 0 { 0.0 } else { total / active as f64 };
    let tensor = Tensor::scalar(value);
    tape.push_custom(
        &[verts],
        tensor,
        Box::new(LaplacianLossOp {
            verts,
            adjacency: Rc::clone(adjacency),
            active: active.max(1),
        }),
    )
}

struct NormalConsistencyOp {
    verts: TensorId,
    faces: Rc<Vec<[usize; 3]>>,
    pairs: Vec<(usize, usize)>,
}

impl CustomOp for NormalConsistencyOp {
    fn backward(&self, ctx: &ValueCtx<'_>, _out: TensorId, gout: &[f64], sink: &mut GradSink<'_>) {
        let verts = ctx.data(self.verts);
        if self.pairs.is_empty() {
            return;
        }
        let g = gout[0];
        let scale = -g / self.pairs.len() as f64; // d(1 - cos)/dcos = -1
        // accumulate adjoints per face cross product
        let nf = self.faces.len();
        let mut cross = vec![[0.0f64; 3]; nf];
        let mut len = vec![0.0f64; nf];
        for (fi, f) in self.faces.iter().enumerate() {
            cross[fi] = face_cross(verts, f);
            len[fi] = norm3(cross[fi]);
        }
        let mut adj = vec![[0.0f64; 3]; nf];
        for &(fa, fb) in &self.pairs {
            let (la, lb) = (len[fa], len[fb]);
            if la < NORMAL_EPS || lb < NORMAL_EPS {
                continue;
            }
            let na = [cross[fa][0] / la, cross[fa][1] / la, cross[fa][2] / la];
            let nb = [cross[fb][0] / lb, cross[fb][1] / lb, cross[fb][2] / lb];
            let cos = dot3(na, nb);
            // d cos / d cross_a = (nb - cos*na)/la, symmetric for b
            for k in 0..3 {
                adj[fa][k] += scale * (nb[k] - cos * na[k]) / la;
                adj[fb][k] += scale * (na[k] - cos * nb[k]) / lb;
            }
        }
        let Some(dv) = sink.buf(self.verts) else {
            return;
        };
        for (fi, f) in self.faces.iter().enumerate() {
            let w = adj[fi];
            if w == [0.0; 3] {
                continue;
            }
            let a = &verts[3 * f[0]..3 * f[0] + 3];
            let b = &verts[3 * f[1]..3 * f[1] + 3];
            let c = &verts[3 * f[2]..3 * f[2] + 3];
            let e1 = sub3(b, a);
            let e2 = sub3(c, a);
            let d1 = cross3(e2, w);
            let d2 = cross3(w, e1);
            for k in 0..3 {
                dv[3 * f[1] + k] += d1[k];
                dv[3 * f[2] + k] += d2[k];
                dv[3 * f[0] + k] -= d1[k] + d2[k];
            }
        }
    }
}

/// Normal-consistency regularizer: mean over edge-adjacent face pairs of
/// `1 - cos(n_a, n_b)`. Pairs with a degenerate face are skipped.
pub fn normal_consistency_loss(
    tape: &mut Tape,
    verts: TensorId,
    faces: &Rc<Vec<[usize; 3]>>,
    adjacency: &Adjacency,
) -> TensorId {
    let data = tape.data(verts);
    let mut total = 0.0;
    let mut skipped = 0usize;
    let mut used_pairs = Vec::with_capacity(adjacency.edge_face_pairs.len());
    for &(fa, fb) in &adjacency.edge_face_pairs {
        let ca = face_cross(data, &faces[fa]);
        let cb = face_cross(data, &faces[fb]);
        let (la, lb) = (norm3(ca), norm3(cb));
        if la < NORMAL_EPS || lb < NORMAL_EPS {
            skipped += 1;
            continue;
        }
        let cos = dot3(ca, cb) / (la * lb);
        total += 1.0 - cos;
        used_pairs.push((fa, fb));
    }
    if skipped > 0 {
        log::warn!(
            "normal_consistency_loss: {} face pairs skipped for degenerate normals",
            skipped
        );
    }
    let value = if used_pairs.is_empty() {
        0.0
    } else {
        total / used_pairs.len() as f64
    };
    let tensor = Tensor::scalar(value);
    tape.push_custom(
        &[verts],
        tensor,
        Box::new(NormalConsistencyOp {
            verts,
            faces: Rc::clone(faces),
            pairs: used_pairs,
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct LabelSidecar {
    part_labels: Vec<usize>,
    parts: Vec<String>,
}

/// Sidecar path for a mesh file: same stem with extension `labels.json`.
pub fn labels_path(obj_path: &Path) -> std::path::PathBuf {
    obj_path.with_extension("labels.json")
}

pub fn save_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = String::new();
    for i in 0..mesh.vertex_count() {
        let v = mesh.vertex(i);
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for uv in &mesh.uvs {
        out.push_str(&format!("vt {} {}\n", uv[0], uv[1]));
    }
    for f in &mesh.faces {
        out.push_str(&format!(
            "f {}/{} {}/{} {}/{}\n",
            f[0] + 1,
            f[0] + 1,
            f[1] + 1,
            f[1] + 1,
            f[2] + 1,
            f[2] + 1
        ));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;

    let sidecar = LabelSidecar {
        part_labels: mesh.part_labels.iter().map(|p| p.index()).collect(),
        parts: PART_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(labels_path(path), json)?;
    Ok(())
}

pub fn load_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path)?;
    let pathstr = path.display().to_string();
    let mut vertices: Vec<f64> = Vec::new();
    let mut vts: Vec<[f64; 2]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    // vt index assigned to each vertex, checked for consistency
    let mut vt_of_vertex: Vec<Option<usize>> = Vec::new();

    let parse_err = |line: usize, msg: String| Error::Parse {
        path: pathstr.clone(),
        line,
        msg,
    };

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(line_no, format!("bad vertex: {}", e)))?;
                if coords.len() != 3 {
                    return Err(parse_err(line_no, "vertex needs 3 coordinates".into()));
                }
                vertices.extend_from_slice(&coords);
                vt_of_vertex.push(None);
            }
            Some("vt") => {
                let coords: Vec<f64> = parts
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(line_no, format!("bad texcoord: {}", e)))?;
                if coords.len() < 2 {
                    return Err(parse_err(line_no, "texcoord needs 2 coordinates".into()));
                }
                vts.push([coords[0], coords[1]]);
            }
            Some("f") => {
                let refs: Vec<&str> = parts.collect();
                if refs.len() != 3 {
                    return Err(parse_err(
                        line_no,
                        format!("face has {} vertices; only triangles are supported", refs.len()),
                    ));
                }
                let mut idx = [0usize; 3];
                for (k, r) in refs.iter().enumerate() {
                    let mut it = r.split('/');
                    let vi: usize = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(line_no, format!("bad face reference '{}'", r)))?;
                    let ti: usize = it
                        .next()
                        .filter(|s| !s.is_empty())
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| {
                            parse_err(line_no, format!("face reference '{}' missing vt index", r))
                        })?;
                    if vi == 0 || vi > vt_of_vertex.len() || ti == 0 || ti > vts.len() {
                        return Err(parse_err(line_no, format!("face index out of range: '{}'", r)));
                    }
                    let (vi, ti) = (vi - 1, ti - 1);
                    match vt_of_vertex[vi] {
                        None => vt_of_vertex[vi] = Some(ti),
                        Some(prev) if prev != ti => {
                            return Err(parse_err(
                                line_no,
                                format!(
                                    "vertex {} referenced with conflicting texcoords {} and {}",
                                    vi + 1,
                                    prev + 1,
                                    ti + 1
                                ),
                            ))
                        }
                        _ => {}
                    }
                    idx[k] = vi;
                }
                faces.push(idx);
            }
            _ => {}
        }
    }

    let v = vt_of_vertex.len();
    let mut uvs = vec![[0.0f64; 2]; v];
    for (i, slot) in vt_of_vertex.iter().enumerate() {
        match slot {
            Some(t) => uvs[i] = vts[*t],
            None => {
                // vertex never referenced by a face; keep zero uv
            }
        }
    }

    let sidecar_path = labels_path(path);
    let sidecar: LabelSidecar = serde_json::from_str(
        &std::fs::read_to_string(&sidecar_path)
            .map_err(|e| Error::Data(format!("missing labels sidecar {}: {}", sidecar_path.display(), e)))?,
    )?;
    if sidecar.parts != PART_NAMES {
        return Err(Error::Schema(format!(
            "labels sidecar parts list {:?} does not match the canonical order",
            sidecar.parts
        )));
    }
    if sidecar.part_labels.len() != v {
        return Err(Error::Schema(format!(
            "labels sidecar has {} entries for {} vertices",
            sidecar.part_labels.len(),
            v
        )));
    }
    let part_labels = sidecar
        .part_labels
        .iter()
        .map(|&i| Part::from_index(i))
        .collect::<Result<Vec<_>>>()?;

    Mesh::new(vertices, faces, uvs, part_labels)
}

#[cfg(test)]
mod tests;

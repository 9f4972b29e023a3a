use super::*;
use crate::autodiff::finite_diff_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn plain_mesh(vertices: Vec<f64>, faces: Vec<[usize; 3]>) -> Mesh {
    let v = vertices.len() / 3;
    Mesh::new(vertices, faces, vec![[0.0, 0.0]; v], vec![Part::Torso; v]).unwrap()
}

fn tetrahedron() -> Mesh {
    plain_mesh(
        vec![
            0.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0,
        ],
        vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
    )
}

/// Icosahedron subdivided once: 42 vertices, 12 of valence 5, 30 of valence 6.
fn icosphere1() -> Mesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let base: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let mut verts: Vec<[f64; 3]> = base
        .iter()
        .map(|v| {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        })
        .collect();
    let mut midpoint = std::collections::BTreeMap::new();
    let mut out_faces = Vec::new();
    for f in &faces {
        let mut mids = [0usize; 3];
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            mids[k] = *midpoint.entry(key).or_insert_with(|| {
                let m = [
                    (verts[a][0] + verts[b][0]) / 2.0,
                    (verts[a][1] + verts[b][1]) / 2.0,
                    (verts[a][2] + verts[b][2]) / 2.0,
                ];
                let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                verts.push([m[0] / n, m[1] / n, m[2] / n]);
                verts.len() - 1
            });
        }
        out_faces.push([f[0], mids[0], mids[2]]);
        out_faces.push([f[1], mids[1], mids[0]]);
        out_faces.push([f[2], mids[2], mids[1]]);
        out_faces.push([mids[0], mids[1], mids[2]]);
    }
    plain_mesh(verts.into_iter().flatten().collect(), out_faces)
}

#[test]
fn tetrahedron_adjacency() {
    let mesh = tetrahedron();
    let adj = build_adjacency(&mesh).unwrap();
    for nbrs in &adj.neighbors {
        assert_eq!(nbrs.len(), 3);
    }
    // closed tetrahedron: every edge interior
    assert_eq!(adj.edge_face_pairs.len(), 6);
}

#[test]
fn single_triangle_adjacency() {
    let mesh = plain_mesh(
        vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        vec![[0, 1, 2]],
    );
    let adj = build_adjacency(&mesh).unwrap();
    for nbrs in &adj.neighbors {
        assert_eq!(nbrs.len(), 2);
    }
    assert!(adj.edge_face_pairs.is_empty());
}

#[test]
fn icosphere_neighbor_census() {
    let mesh = icosphere1();
    assert_eq!(mesh.vertex_count(), 42);
    let adj = build_adjacency(&mesh).unwrap();
    let mut five = 0;
    let mut six = 0;
    for nbrs in &adj.neighbors {
        match nbrs.len() {
            5 => five += 1,
            6 => six += 1,
            d => panic!("unexpected valence {}", d),
        }
    }
    assert_eq!((five, six), (12, 30));
}

#[test]
fn non_manifold_edge_rejected() {
    // three faces share edge (0,1)
    let mesh = plain_mesh(
        vec![
            0.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0, //
            0.0, -1.0, 0.0,
        ],
        vec![[0, 1, 2], [0, 1, 3], [0, 1, 4]],
    );
    assert!(build_adjacency(&mesh).is_err());
}

#[test]
fn flat_quad_normals_point_up() {
    let mesh = plain_mesh(
        vec![
            0.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, //
            1.0, 1.0, 0.0, //
            0.0, 1.0, 0.0,
        ],
        vec![[0, 1, 2], [0, 2, 3]],
    );
    let normals = vertex_normals_raw(&mesh.vertices, &mesh.faces);
    for i in 0..4 {
        assert!((normals[3 * i] - 0.0).abs() < 1e-12);
        assert!((normals[3 * i + 1] - 0.0).abs() < 1e-12);
        assert!((normals[3 * i + 2] - 1.0).abs() < 1e-12);
    }
}

/// Unit cube triangulated so the corner at the origin touches exactly one
/// triangle of each of its three faces, all with equal areas.
fn corner_cube() -> Mesh {
    let verts = vec![
        0.0, 0.0, 0.0, // 0 corner under test
        1.0, 0.0, 0.0, // 1
        1.0, 1.0, 0.0, // 2
        0.0, 1.0, 0.0, // 3
        0.0, 0.0, 1.0, // 4
        1.0, 0.0, 1.0, // 5
        1.0, 1.0, 1.0, // 6
        0.0, 1.0, 1.0, // 7
    ];
    // diagonals chosen so vertex 0 appears once per incident cube face
    let faces = vec![
        // bottom (z=0), outward -z
        [0, 3, 1],
        [1, 3, 2],
        // front (y=0), outward -y
        [0, 1, 4],
        [1, 5, 4],
        // left (x=0), outward -x
        [0, 4, 3],
        [3, 4, 7],
        // top (z=1), outward +z
        [4, 5, 6],
        [4, 6, 7],
        // back (y=1), outward +y
        [2, 3, 7],
        [2, 7, 6],
        // right (x=1), outward +x
        [1, 2, 6],
        [1, 6, 5],
    ];
    plain_mesh(verts, faces)
}

#[test]
fn cube_corner_normal() {
    let mesh = corner_cube();
    let normals = vertex_normals_raw(&mesh.vertices, &mesh.faces);
    let expect = -1.0 / 3.0f64.sqrt();
    for a in 0..3 {
        assert!(
            (normals[a] - expect).abs() < 1e-12,
            "axis {}: {} vs {}",
            a,
            normals[a],
            expect
        );
    }
}

#[test]
fn normals_scale_invariant_and_unit_length() {
    let mesh = icosphere1();
    let n1 = vertex_normals_raw(&mesh.vertices, &mesh.faces);
    let scaled: Vec<f64> = mesh.vertices.iter().map(|v| v * 2.0).collect();
    let n2 = vertex_normals_raw(&scaled, &mesh.faces);
    for (a, b) in n1.iter().zip(&n2) {
        assert!((a - b).abs() < 1e-12);
    }
    for i in 0..mesh.vertex_count() {
        let len =
            (n1[3 * i].powi(2) + n1[3 * i + 1].powi(2) + n1[3 * i + 2].powi(2)).sqrt();
        assert!((len - 1.0).abs() < 1e-9);
    }
}

#[test]
fn laplacian_equilateral_triangle() {
    let h = 3.0f64.sqrt() / 2.0;
    let mesh = plain_mesh(
        vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.5, h, 0.0],
        vec![[0, 1, 2]],
    );
    let adj = Rc::new(build_adjacency(&mesh).unwrap());
    let mut tape = Tape::new();
    let v = tape
        .constant(vec![3, 3], mesh.vertices.clone())
        .unwrap();
    let loss = laplacian_loss(&mut tape, v, &adj);
    assert!((tape.data(loss)[0] - 0.75).abs() < 1e-12);
}

#[test]
fn laplacian_translation_invariance_and_quadratic_scaling() {
    let mesh = icosphere1();
    let adj = Rc::new(build_adjacency(&mesh).unwrap());
    let eval = |verts: Vec<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(vec![verts.len() / 3, 3], verts).unwrap();
        let loss = laplacian_loss(&mut tape, v, &adj);
        tape.data(loss)[0]
    };
    let base = eval(mesh.vertices.clone());
    let translated: Vec<f64> = mesh
        .vertices
        .chunks(3)
        .flat_map(|v| [v[0] + 2.5, v[1] - 1.0, v[2] + 0.3])
        .collect();
    assert!((eval(translated) - base).abs() < 1e-12);
    let s = 1.9;
    let scaled: Vec<f64> = mesh.vertices.iter().map(|v| v * s).collect();
    assert!((eval(scaled) - s * s * base).abs() < 1e-9 * base.max(1.0));
    assert!(base >= 0.0);
}

#[test]
fn laplacian_interior_lattice_vertex_is_zero() {
    // regular hexagonal fan: the center vertex is its neighbors' centroid,
    // so its contribution to the loss is zero
    let mut verts = vec![0.0, 0.0, 0.0];
    for k in 0..6 {
        let a = std::f64::consts::PI / 3.0 * k as f64;
        verts.extend_from_slice(&[a.cos(), a.sin(), 0.0]);
    }
    let faces: Vec<[usize; 3]> = (0..6).map(|k| [0, 1 + k, 1 + (k + 1) % 6]).collect();
    let mesh = plain_mesh(verts, faces);
    let adj = build_adjacency(&mesh).unwrap();
    let nbrs = &adj.neighbors[0];
    let inv = 1.0 / nbrs.len() as f64;
    let mut centroid = [0.0; 3];
    for &j in nbrs {
        for a in 0..3 {
            centroid[a] += mesh.vertices[3 * j + a] * inv;
        }
    }
    for c in centroid {
        assert!(c.abs() < 1e-12);
    }
}

#[test]
fn normal_consistency_flat_plane_is_zero() {
    let mesh = plain_mesh(
        vec![
            0.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, //
            1.0, 1.0, 0.0, //
            0.0, 1.0, 0.0,
        ],
        vec![[0, 1, 2], [0, 2, 3]],
    );
    let adj = build_adjacency(&mesh).unwrap();
    let faces = Rc::new(mesh.faces.clone());
    let mut tape = Tape::new();
    let v = tape.constant(vec![4, 3], mesh.vertices.clone()).unwrap();
    let loss = normal_consistency_loss(&mut tape, v, &faces, &adj);
    assert!(tape.data(loss)[0].abs() < 1e-12);
}

#[test]
fn normal_consistency_right_angle_fold() {
    // two triangles sharing edge (0,1), folded 90 degrees
    let mesh = plain_mesh(
        vec![
            0.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, //
            0.5, 1.0, 0.0, //
            0.5, 0.0, 1.0,
        ],
        vec![[0, 1, 2], [0, 3, 1]],
    );
    let adj = build_adjacency(&mesh).unwrap();
    let faces = Rc::new(mesh.faces.clone());
    let mut tape = Tape::new();
    let v = tape.constant(vec![4, 3], mesh.vertices.clone()).unwrap();
    let loss = normal_consistency_loss(&mut tape, v, &faces, &adj);
    assert!((tape.data(loss)[0] - 1.0).abs() < 1e-12);
}

#[test]
fn normal_consistency_cube_matches_enumeration() {
    let mesh = corner_cube();
    let adj = build_adjacency(&mesh).unwrap();
    // independent enumeration over shared edges
    let normal = |f: &[usize; 3]| {
        let c = face_cross(&mesh.vertices, f);
        let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        [c[0] / n, c[1] / n, c[2] / n]
    };
    let mut total = 0.0;
    for &(fa, fb) in &adj.edge_face_pairs {
        let na = normal(&mesh.faces[fa]);
        let nb = normal(&mesh.faces[fb]);
        total += 1.0 - (na[0] * nb[0] + na[1] * nb[1] + na[2] * nb[2]);
    }
    let expect = total / adj.edge_face_pairs.len() as f64;

    let faces = Rc::new(mesh.faces.clone());
    let mut tape = Tape::new();
    let v = tape.constant(vec![8, 3], mesh.vertices.clone()).unwrap();
    let loss = normal_consistency_loss(&mut tape, v, &faces, &adj);
    assert!((tape.data(loss)[0] - expect).abs() < 1e-12);
    assert!(expect > 0.0 && expect < 2.0);
}

#[test]
fn regularizers_pass_finite_difference_check() {
    let mesh = tetrahedron();
    let adj = Rc::new(build_adjacency(&mesh).unwrap());
    let faces = Rc::new(mesh.faces.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let jittered: Vec<f64> = mesh
        .vertices
        .iter()
        .map(|v| v + rng.gen_range(-0.05..0.05))
        .collect();

    let run = |verts: &[f64], grad: bool| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let v = tape.param(vec![4, 3], verts.to_vec()).unwrap();
        let lap = laplacian_loss(&mut tape, v, &adj);
        let nc = normal_consistency_loss(&mut tape, v, &faces, &adj);
        let nrm = vertex_normals(&mut tape, v, &faces);
        let nsum = tape.sum(nrm, None).unwrap();
        let t1 = tape.add(lap, nc).unwrap();
        let loss = tape.add(t1, nsum).unwrap();
        if grad {
            tape.backward(loss).unwrap();
            (tape.data(loss)[0], Some(tape.grad(v).unwrap().to_vec()))
        } else {
            (tape.data(loss)[0], None)
        }
    };
    let (_, grad) = run(&jittered, true);
    let err = finite_diff_check(
        |v| run(v, false).0,
        &jittered,
        grad.as_ref().unwrap(),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {}", err);
}

#[test]
fn obj_round_trip_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tet.obj");
    let mut mesh = tetrahedron();
    mesh.uvs = vec![[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8]];
    mesh.part_labels = vec![Part::Face, Part::Torso, Part::Hands, Part::Feet];
    save_obj(&mesh, &path).unwrap();
    let loaded = load_obj(&path).unwrap();
    assert_eq!(loaded.vertices, mesh.vertices);
    assert_eq!(loaded.faces, mesh.faces);
    assert_eq!(loaded.uvs, mesh.uvs);
    assert_eq!(loaded.part_labels, mesh.part_labels);
    // canonical formatting: a second save produces identical bytes
    let first = std::fs::read(&path).unwrap();
    save_obj(&loaded, &path).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
}

#[test]
fn obj_quad_face_errors_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("quad.obj");
    std::fs::write(
        &path,
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 3/1 4/1\n",
    )
    .unwrap();
    let err = load_obj(&path).unwrap_err();
    match err {
        Error::Parse { line, .. } => assert_eq!(line, 6),
        other => panic!("expected parse error, got {:?}", other),
    }
}

#[test]
fn obj_missing_vt_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("novt.obj");
    std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
    assert!(load_obj(&path).is_err());
}

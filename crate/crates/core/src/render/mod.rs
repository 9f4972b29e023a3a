//! Differentiable renderers: a probabilistic silhouette rasterizer whose
//! gradients flow to vertex positions, a z-buffer color renderer whose
//! gradients flow to texels, the UV-space visibility map, and the
//! silhouette loss.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, GradSink, Tape, Tensor, TensorId, ValueCtx};
use crate::error::{Error, Result};

/// Triangles closer than this (meters, camera z) are dropped from
/// rasterization.
pub const NEAR_PLANE: f64 = 0.01;

/// Soft contributions below sigmoid(-D2_CUTOFF) are culled.
const D2_CUTOFF: f64 = 28.0;

const AREA_EPS: f64 = 1e-12;

/// Pinhole camera: intrinsics in pixels plus a rigid world-to-camera
/// transform `x_cam = R x_world + t`. Camera looks along +z.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    #[serde(rename = "t")]
    pub translation: [f64; 3],
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Schema(format!(
                "camera focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        let r = &self.rotation;
        // check R R^T = I
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += r[3 * i + k] * r[3 * j + k];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (s - expect).abs() > 1e-6 {
                    return Err(Error::Schema(format!(
                        "camera rotation is not orthonormal (RR^T[{}][{}] = {})",
                        i, j, s
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + t[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + t[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + t[2],
        ]
    }

    /// Camera center in world coordinates, -R^T t.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            -(r[0] * t[0] + r[3] * t[1] + r[6] * t[2]),
            -(r[1] * t[0] + r[4] * t[1] + r[7] * t[2]),
            -(r[2] * t[0] + r[5] * t[1] + r[8] * t[2]),
        ]
    }

    /// A camera on a ring of the given radius, at `height_y`, looking at
    /// `look_at`, parameterized by angle around the world y axis.
    pub fn on_ring(
        angle: f64,
        radius: f64,
        height_y: f64,
        look_at: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let pos = [
            look_at[0] + radius * angle.sin(),
            height_y,
            look_at[2] + radius * angle.cos(),
        ];
        // camera z axis points from pos toward look_at
        let mut z = [
            look_at[0] - pos[0],
            look_at[1] - pos[1],
            look_at[2] - pos[2],
        ];
        let zn = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
        z = [z[0] / zn, z[1] / zn, z[2] / zn];
        // camera y runs along world -y so the top of the frame is up
        let up = [0.0, -1.0, 0.0];
        // x = up x z, then re-orthogonalize y = z x x
        let mut x = [
            up[1] * z[2] - up[2] * z[1],
            up[2] * z[0] - up[0] * z[2],
            up[0] * z[1] - up[1] * z[0],
        ];
        let xn = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        x = [x[0] / xn, x[1] / xn, x[2] / xn];
        let y = [
            z[1] * x[2] - z[2] * x[1],
            z[2] * x[0] - z[0] * x[2],
            z[0] * x[1] - z[1] * x[0],
        ];
        let rotation = [x[0], x[1], x[2], y[0], y[1], y[2], z[0], z[1], z[2]];
        let translation = [
            -(x[0] * pos[0] + x[1] * pos[1] + x[2] * pos[2]),
            -(y[0] * pos[0] + y[1] * pos[1] + y[2] * pos[2]),
            -(z[0] * pos[0] + z[1] * pos[1] + z[2] * pos[2]),
        ];
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        }
    }
}

/// Pinhole projection of `points` (flat N*3 world coordinates) to pixel
/// coordinates plus camera-space depths. `valid[i]` is false where the
/// point is at or behind the near plane.
pub fn project(camera: &Camera, points: &[f64]) -> (Vec<[f64; 2]>, Vec<f64>, Vec<bool>) {
    let n = points.len() / 3;
    let mut pixels = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for i in 0..n {
        let p = camera.to_camera([points[3 * i], points[3 * i + 1], points[3 * i + 2]]);
        let z = p[2];
        pixels.push([
            camera.fx * p[0] / z + camera.cx,
            camera.fy * p[1] / z + camera.cy,
        ]);
        depths.push(z);
        valid.push(z > NEAR_PLANE);
    }
    (pixels, depths, valid)
}

#[inline]
fn cross2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
fn sub2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Squared distance from p to segment [e0, e1] with the clamped foot
/// parameter; gradients are `2(t-1) r` for e0 and `-2 t r` for e1 where
/// `r = (p - e0) - t (e1 - e0)`.
#[inline]
fn point_segment_sq(p: [f64; 2], e0: [f64; 2], e1: [f64; 2]) -> (f64, f64, [f64; 2]) {
    let w = sub2(e1, e0);
    let q = sub2(p, e0);
    let ww = w[0] * w[0] + w[1] * w[1];
    let t = if ww > 0.0 {
        ((q[0] * w[0] + q[1] * w[1]) / ww).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let r = [q[0] - t * w[0], q[1] - t * w[1]];
    (r[0] * r[0] + r[1] * r[1], t, r)
}

/// Exact squared distance from a point to a triangle boundary plus the
/// inside flag. Degenerate (collinear) triangles count as outside.
fn point_triangle(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> (f64, usize, bool) {
    let (d0, _, _) = point_segment_sq(p, a, b);
    let (d1, _, _) = point_segment_sq(p, b, c);
    let (d2, _, _) = point_segment_sq(p, c, a);
    let mut best = d0;
    let mut edge = 0usize;
    if d1 < best {
        best = d1;
        edge = 1;
    }
    if d2 < best {
        best = d2;
        edge = 2;
    }
    let area2 = cross2(sub2(b, a), sub2(c, a));
    let inside = if area2.abs() <= AREA_EPS {
        false
    } else {
        let c0 = cross2(sub2(b, a), sub2(p, a));
        let c1 = cross2(sub2(c, b), sub2(p, b));
        let c2 = cross2(sub2(a, c), sub2(p, c));
        if area2 > 0.0 {
            c0 >= 0.0 && c1 >= 0.0 && c2 >= 0.0
        } else {
            c0 <= 0.0 && c1 <= 0.0 && c2 <= 0.0
        }
    };
    (best, edge, inside)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Projects to coordinates normalized by max(W, H); returns per-vertex
/// normalized positions, camera-space coordinates, and the kept face list.
fn project_normalized(
    camera: &Camera,
    verts: &[f64],
    faces: &[[usize; 3]],
) -> (Vec<[f64; 2]>, Vec<[f64; 3]>, Vec<usize>) {
    let n = verts.len() / 3;
    let s = camera.width.max(camera.height) as f64;
    let mut norm = Vec::with_capacity(n);
    let mut cam = Vec::with_capacity(n);
    for i in 0..n {
        let p = camera.to_camera([verts[3 * i], verts[3 * i + 1], verts[3 * i + 2]]);
        norm.push([
            (camera.fx * p[0] / p[2] + camera.cx) / s,
            (camera.fy * p[1] / p[2] + camera.cy) / s,
        ]);
        cam.push(p);
    }
    let mut kept = Vec::with_capacity(faces.len());
    let mut dropped = 0usize;
    for (fi, f) in faces.iter().enumerate() {
        if f.iter().all(|&v| cam[v][2] > NEAR_PLANE) {
            kept.push(fi);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!(
            "soft rasterizer dropped {} triangles behind the near plane",
            dropped
        );
    }
    (norm, cam, kept)
}

struct SoftSilhouetteOp {
    verts: TensorId,
    faces: Rc<Vec<[usize; 3]>>,
    camera: Camera,
    sigma: f64,
    /// (pixel, kept-face index, sigmoid value) sorted by pixel, face order
    /// preserved within a pixel.
    entries: Vec<(u32, u32, f64)>,
    offsets: Vec<u32>,
    kept: Vec<usize>,
}

fn soft_forward(
    verts: &[f64],
    faces: &[[usize; 3]],
    camera: &Camera,
    sigma: f64,
) -> (Vec<f64>, Vec<(u32, u32, f64)>, Vec<u32>, Vec<usize>) {
    let (w, h) = (camera.width, camera.height);
    let s = w.max(h) as f64;
    let (norm, _cam, kept) = project_normalized(camera, verts, faces);
    let margin = (D2_CUTOFF * sigma).sqrt();

    let mut entries: Vec<(u32, u32, f64)> = Vec::new();
    for (ki, &fi) in kept.iter().enumerate() {
        let f = &faces[fi];
        let (a, b, c) = (norm[f[0]], norm[f[1]], norm[f[2]]);
        let xmin = a[0].min(b[0]).min(c[0]) - margin;
        let xmax = a[0].max(b[0]).max(c[0]) + margin;
        let ymin = a[1].min(b[1]).min(c[1]) - margin;
        let ymax = a[1].max(b[1]).max(c[1]) + margin;
        let px0 = ((xmin * s - 0.5).ceil().max(0.0)) as usize;
        let px1 = ((xmax * s - 0.5).floor().min(w as f64 - 1.0)) as isize;
        let py0 = ((ymin * s - 0.5).ceil().max(0.0)) as usize;
        let py1 = ((ymax * s - 0.5).floor().min(h as f64 - 1.0)) as isize;
        if px1 < px0 as isize || py1 < py0 as isize {
            continue;
        }
        for py in py0..=py1 as usize {
            for px in px0..=px1 as usize {
                let p = [(px as f64 + 0.5) / s, (py as f64 + 0.5) / s];
                let (d2, _, inside) = point_triangle(p, a, b, c);
                let x = d2 / sigma;
                if !inside && x >= D2_CUTOFF {
                    continue;
                }
                let dval = sigmoid(if inside { x } else { -x });
                entries.push(((py * w + px) as u32, ki as u32, dval));
            }
        }
    }
    entries.sort_by_key(|e| e.0);

    let mut offsets = vec![0u32; w * h + 1];
    for e in &entries {
        offsets[e.0 as usize + 1] += 1;
    }
    for i in 0..w * h {
        offsets[i + 1] += offsets[i];
    }
    let mut image = vec![0.0; w * h];
    for pix in 0..w * h {
        let lo = offsets[pix] as usize;
        let hi = offsets[pix + 1] as usize;
        if lo == hi {
            continue;
        }
        let mut prod = 1.0;
        for e in &entries[lo..hi] {
            prod *= 1.0 - e.2;
        }
        image[pix] = 1.0 - prod;
    }
    (image, entries, offsets, kept)
}

impl CustomOp for SoftSilhouetteOp {
    fn backward(&self, ctx: &ValueCtx<'_>, _out: TensorId, gout: &[f64], sink: &mut GradSink<'_>) {
        let verts = ctx.data(self.verts);
        let camera = &self.camera;
        let (w, h) = (camera.width, camera.height);
        let s = w.max(h) as f64;
        let (norm, cam, _) = project_normalized(camera, verts, &self.faces);

        // 2D gradients on normalized vertex positions
        let mut g2d = vec![[0.0f64; 2]; norm.len()];
        let mut prefix: Vec<f64> = Vec::new();
        for pix in 0..w * h {
            let g = gout[pix];
            if g == 0.0 {
                continue;
            }
            let lo = self.offsets[pix] as usize;
            let hi = self.offsets[pix + 1] as usize;
            if lo == hi {
                continue;
            }
            let group = &self.entries[lo..hi];
            // prefix[i] = prod of (1-D) before i; suffix accumulated on the fly
            prefix.clear();
            let mut acc = 1.0;
            for e in group {
                prefix.push(acc);
                acc *= 1.0 - e.2;
            }
            let p = [
                ((pix % w) as f64 + 0.5) / s,
                ((pix / w) as f64 + 0.5) / s,
            ];
            let mut suffix = 1.0;
            for (i, e) in group.iter().enumerate().rev() {
                let dval = e.2;
                let d_out_d_dval = prefix[i] * suffix;
                suffix *= 1.0 - dval;
                let f = &self.faces[self.kept[e.1 as usize]];
                let (a, b, c) = (norm[f[0]], norm[f[1]], norm[f[2]]);
                let (_, edge, inside) = point_triangle(p, a, b, c);
                let delta = if inside { 1.0 } else { -1.0 };
                // dD/d(d2) = sigmoid' * delta / sigma
                let coef = g * d_out_d_dval * dval * (1.0 - dval) * delta / self.sigma;
                if coef == 0.0 {
                    continue;
                }
                let (v0, v1) = match edge {
                    0 => (f[0], f[1]),
                    1 => (f[1], f[2]),
                    _ => (f[2], f[0]),
                };
                let (_, t, r) = point_segment_sq(p, norm[v0], norm[v1]);
                // d(d2)/de0 = 2(t-1) r, d(d2)/de1 = -2 t r
                let c0 = coef * 2.0 * (t - 1.0);
                let c1 = coef * -2.0 * t;
                g2d[v0][0] += c0 * r[0];
                g2d[v0][1] += c0 * r[1];
                g2d[v1][0] += c1 * r[0];
                g2d[v1][1] += c1 * r[1];
            }
        }

        let Some(dv) = sink.buf(self.verts) else {
            return;
        };
        let r = &camera.rotation;
        for (i, g) in g2d.iter().enumerate() {
            if g[0] == 0.0 && g[1] == 0.0 {
                continue;
            }
            let [x, y, z] = cam[i];
            // chain through u = (fx x/z + cx)/s, v = (fy y/z + cy)/s
            let gx = g[0] * camera.fx / (z * s);
            let gy = g[1] * camera.fy / (z * s);
            let gz = -(g[0] * camera.fx * x + g[1] * camera.fy * y) / (z * z * s);
            // world gradient = R^T * camera-space gradient
            dv[3 * i] += r[0] * gx + r[3] * gy + r[6] * gz;
            dv[3 * i + 1] += r[1] * gx + r[4] * gy + r[7] * gz;
            dv[3 * i + 2] += r[2] * gx + r[5] * gy + r[8] * gz;
        }
    }
}

/// Probabilistic silhouette render: every triangle contributes
/// `sigmoid(delta * d^2 / sigma)` per pixel (`delta` +1 inside, -1 outside,
/// distances in coordinates normalized by max(W, H)), fused per pixel as
/// `1 - prod(1 - D_j)`. Differentiable w.r.t. the vertex tensor.
pub fn soft_silhouette(
    tape: &mut Tape,
    verts: TensorId,
    faces: &Rc<Vec<[usize; 3]>>,
    camera: &Camera,
    sigma: f64,
) -> TensorId {
    assert!(sigma > 0.0, "sigma must be positive");
    let (image, entries, offsets, kept) =
        soft_forward(tape.data(verts), faces, camera, sigma);
    let (w, h) = (camera.width, camera.height);
    let tensor = Tensor::new(vec![1, h, w], image).expect("image shape");
    tape.push_custom(
        &[verts],
        tensor,
        Box::new(SoftSilhouetteOp {
            verts,
            faces: Rc::clone(faces),
            camera: camera.clone(),
            sigma,
            entries,
            offsets,
            kept,
        }),
    )
}

/// Precomputed hard-rasterization of one mesh from one camera: for every
/// covered pixel, the nearest face's bilinear texel taps. Rebuilding is only
/// needed when geometry or camera change; texture edits reuse the cache.
#[derive(Clone, Debug)]
pub struct RasterCache {
    pub width: usize,
    pub height: usize,
    pub tex_size: usize,
    pub samples: Vec<PixelSample>,
    pub coverage: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct PixelSample {
    pub pixel: u32,
    pub texels: [u32; 4],
    pub weights: [f64; 4],
}

/// Bilinear taps for uv in [0,1]^2 with texel centers at (i + 0.5) / T and
/// clamp-to-edge behavior.
fn bilinear_taps(u: f64, v: f64, t: usize) -> ([u32; 4], [f64; 4]) {
    let tx = u * t as f64 - 0.5;
    let ty = v * t as f64 - 0.5;
    let x0 = tx.floor();
    let y0 = ty.floor();
    let fx = tx - x0;
    let fy = ty - y0;
    let clampi = |x: f64| -> u32 { (x.max(0.0).min(t as f64 - 1.0)) as u32 };
    let (x0c, x1c) = (clampi(x0), clampi(x0 + 1.0));
    let (y0c, y1c) = (clampi(y0), clampi(y0 + 1.0));
    let t = t as u32;
    (
        [
            y0c * t + x0c,
            y0c * t + x1c,
            y1c * t + x0c,
            y1c * t + x1c,
        ],
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    )
}

/// Rasterizes the mesh with a z-buffer at pixel centers and
/// perspective-correct UV interpolation. Ties go to the lower face index.
pub fn build_raster_cache(
    verts: &[f64],
    faces: &[[usize; 3]],
    uvs: &[[f64; 2]],
    camera: &Camera,
    tex_size: usize,
) -> RasterCache {
    let (w, h) = (camera.width, camera.height);
    let (pixels, depths, valid) = project(camera, verts);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut uv_at = vec![[0.0f64; 2]; w * h];
    let mut covered = vec![false; w * h];
    let mut dropped = 0usize;

    for f in faces {
        if !(valid[f[0]] && valid[f[1]] && valid[f[2]]) {
            dropped += 1;
            continue;
        }
        let (a, b, c) = (pixels[f[0]], pixels[f[1]], pixels[f[2]]);
        let area2 = cross2(sub2(b, a), sub2(c, a));
        if area2.abs() <= AREA_EPS {
            continue;
        }
        let xmin = a[0].min(b[0]).min(c[0]);
        let xmax = a[0].max(b[0]).max(c[0]);
        let ymin = a[1].min(b[1]).min(c[1]);
        let ymax = a[1].max(b[1]).max(c[1]);
        let px0 = ((xmin - 0.5).ceil().max(0.0)) as usize;
        let px1 = ((xmax - 0.5).floor().min(w as f64 - 1.0)) as isize;
        let py0 = ((ymin - 0.5).ceil().max(0.0)) as usize;
        let py1 = ((ymax - 0.5).floor().min(h as f64 - 1.0)) as isize;
        if px1 < px0 as isize || py1 < py0 as isize {
            continue;
        }
        let (za, zb, zc) = (depths[f[0]], depths[f[1]], depths[f[2]]);
        for py in py0..=py1 as usize {
            for px in px0..=px1 as usize {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let l0 = cross2(sub2(b, p), sub2(c, p)) / area2;
                let l1 = cross2(sub2(c, p), sub2(a, p)) / area2;
                let l2 = cross2(sub2(a, p), sub2(b, p)) / area2;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let inv_z = l0 / za + l1 / zb + l2 / zc;
                let z = 1.0 / inv_z;
                let idx = py * w + px;
                if z < depth[idx] {
                    depth[idx] = z;
                    covered[idx] = true;
                    let (ua, ub, uc) = (uvs[f[0]], uvs[f[1]], uvs[f[2]]);
                    uv_at[idx] = [
                        (l0 * ua[0] / za + l1 * ub[0] / zb + l2 * uc[0] / zc) / inv_z,
                        (l0 * ua[1] / za + l1 * ub[1] / zb + l2 * uc[1] / zc) / inv_z,
                    ];
                }
            }
        }
    }
    if dropped > 0 {
        log::warn!("hard rasterizer dropped {} triangles behind the near plane", dropped);
    }

    let mut samples = Vec::new();
    let mut coverage = vec![0.0; w * h];
    for idx in 0..w * h {
        if !covered[idx] {
            continue;
        }
        coverage[idx] = 1.0;
        let (texels, weights) = bilinear_taps(uv_at[idx][0], uv_at[idx][1], tex_size);
        samples.push(PixelSample {
            pixel: idx as u32,
            texels,
            weights,
        });
    }
    RasterCache {
        width: w,
        height: h,
        tex_size,
        samples,
        coverage,
    }
}

struct HardRenderOp {
    texture: TensorId,
    cache: Rc<RasterCache>,
}

impl CustomOp for HardRenderOp {
    fn backward(&self, _ctx: &ValueCtx<'_>, _out: TensorId, gout: &[f64], sink: &mut GradSink<'_>) {
        let plane_tex = self.cache.tex_size * self.cache.tex_size;
        let plane_img = self.cache.width * self.cache.height;
        let Some(dt) = sink.buf(self.texture) else {
            return;
        };
        for s in &self.cache.samples {
            for ch in 0..3 {
                let g = gout[ch * plane_img + s.pixel as usize];
                if g == 0.0 {
                    continue;
                }
                for k in 0..4 {
                    dt[ch * plane_tex + s.texels[k] as usize] += g * s.weights[k];
                }
            }
        }
    }
}

/// Textured render through a precomputed raster cache. The output is a
/// 3xHxW image; gradients flow to texels only. Uncovered pixels are 0.
pub fn hard_render_cached(tape: &mut Tape, texture: TensorId, cache: &Rc<RasterCache>) -> TensorId {
    let ts = tape.shape(texture);
    assert_eq!(
        ts,
        &[3, cache.tex_size, cache.tex_size],
        "texture shape mismatch with raster cache"
    );
    let tex = tape.data(texture);
    let plane_tex = cache.tex_size * cache.tex_size;
    let plane_img = cache.width * cache.height;
    let mut image = vec![0.0; 3 * plane_img];
    for s in &cache.samples {
        for ch in 0..3 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += tex[ch * plane_tex + s.texels[k] as usize] * s.weights[k];
            }
            image[ch * plane_img + s.pixel as usize] = acc;
        }
    }
    let tensor = Tensor::new(vec![3, cache.height, cache.width], image).expect("image shape");
    tape.push_custom(
        &[texture],
        tensor,
        Box::new(HardRenderOp {
            texture,
            cache: Rc::clone(cache),
        }),
    )
}

/// One-shot textured render; see [`hard_render_cached`]. Returns the color
/// image and the coverage mask (1 where a face was rasterized).
pub fn hard_render(
    tape: &mut Tape,
    verts: &[f64],
    faces: &[[usize; 3]],
    uvs: &[[f64; 2]],
    texture: TensorId,
    camera: &Camera,
) -> (TensorId, Vec<f64>) {
    let tex_size = tape.shape(texture)[1];
    let cache = Rc::new(build_raster_cache(verts, faces, uvs, camera, tex_size));
    let coverage = cache.coverage.clone();
    let image = hard_render_cached(tape, texture, &cache);
    (image, coverage)
}

/// Binary UV-space visibility: texels of faces whose geometric normal faces
/// the camera (`n . (c - centroid) > 0`), rasterized into a TxT atlas.
pub fn visibility_map(
    verts: &[f64],
    faces: &[[usize; 3]],
    uvs: &[[f64; 2]],
    camera: &Camera,
    tex_size: usize,
) -> Vec<f64> {
    let center = camera.center();
    let mut atlas = vec![0.0; tex_size * tex_size];
    for f in faces {
        let n = crate::mesh::face_cross(verts, f);
        let centroid = [
            (verts[3 * f[0]] + verts[3 * f[1]] + verts[3 * f[2]]) / 3.0,
            (verts[3 * f[0] + 1] + verts[3 * f[1] + 1] + verts[3 * f[2] + 1]) / 3.0,
            (verts[3 * f[0] + 2] + verts[3 * f[1] + 2] + verts[3 * f[2] + 2]) / 3.0,
        ];
        let view = [
            center[0] - centroid[0],
            center[1] - centroid[1],
            center[2] - centroid[2],
        ];
        if n[0] * view[0] + n[1] * view[1] + n[2] * view[2] <= 0.0 {
            continue;
        }
        rasterize_uv_triangle(&mut atlas, tex_size, uvs[f[0]], uvs[f[1]], uvs[f[2]]);
    }
    atlas
}

fn rasterize_uv_triangle(atlas: &mut [f64], t: usize, a: [f64; 2], b: [f64; 2], c: [f64; 2]) {
    let area2 = cross2(sub2(b, a), sub2(c, a));
    if area2.abs() <= AREA_EPS {
        return;
    }
    let ts = t as f64;
    let xmin = a[0].min(b[0]).min(c[0]);
    let xmax = a[0].max(b[0]).max(c[0]);
    let ymin = a[1].min(b[1]).min(c[1]);
    let ymax = a[1].max(b[1]).max(c[1]);
    let cx0 = ((xmin * ts - 0.5).ceil().max(0.0)) as usize;
    let cx1 = ((xmax * ts - 0.5).floor().min(ts - 1.0)) as isize;
    let cy0 = ((ymin * ts - 0.5).ceil().max(0.0)) as usize;
    let cy1 = ((ymax * ts - 0.5).floor().min(ts - 1.0)) as isize;
    if cx1 < cx0 as isize || cy1 < cy0 as isize {
        return;
    }
    for row in cy0..=cy1 as usize {
        for col in cx0..=cx1 as usize {
            let p = [(col as f64 + 0.5) / ts, (row as f64 + 0.5) / ts];
            let l0 = cross2(sub2(b, p), sub2(c, p)) / area2;
            let l1 = cross2(sub2(c, p), sub2(a, p)) / area2;
            let l2 = cross2(sub2(a, p), sub2(b, p)) / area2;
            if l0 >= 0.0 && l1 >= 0.0 && l2 >= 0.0 {
                atlas[row * t + col] = 1.0;
            }
        }
    }
}

/// Soft-IoU silhouette loss:
/// `1 - |pred * target|_1 / |(pred + target) - pred * target|_1`.
/// Returns 0 with a warning when both images are identically zero.
pub fn silhouette_loss(tape: &mut Tape, pred: TensorId, target: TensorId) -> Result<TensorId> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Dimension(format!(
            "silhouette_loss shapes differ: {:?} vs {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let inter = tape.mul(pred, target)?;
    let num = tape.l1_norm(inter)?;
    let sum = tape.add(pred, target)?;
    let union = tape.sub(sum, inter)?;
    let den = tape.l1_norm(union)?;
    if tape.data(den)[0] == 0.0 {
        log::warn!("silhouette_loss: both masks empty; returning 0");
        return Ok(tape.scalar(0.0));
    }
    let ratio = tape.div(num, den)?;
    Ok(tape.affine(ratio, -1.0, 1.0))
}

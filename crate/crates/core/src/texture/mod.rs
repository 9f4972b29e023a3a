//! Two-stage texture pipeline: a coarse texture generator conditioned on
//! the visibility map, an adversarial refinement generator, face/image
//! discriminators, and the photometric/adversarial/regularization losses.

#[cfg(test)]
mod tests;


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, GradSink, Padding, Tape, Tensor, TensorId, ValueCtx};
use crate::error::{Error, Result};
use crate::mesh::Part;
use crate::params::{BoundParams, ParamSet};
use crate::render::{project, Camera};

/// Architecture plan for the texture generators and discriminators.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureStackConfig {
    /// Texture atlas side T (atlas tensors are 3 x T x T).
    pub atlas: usize,
    /// Encoder channel widths of the three stride-2 generator levels.
    pub gen_channels: [usize; 3],
    /// Channel widths of the three stride-2 discriminator levels.
    pub disc_channels: [usize; 3],
    /// Face-discriminator input resolution S.
    pub face_crop_size: usize,
}

impl Default for TextureStackConfig {
    fn default() -> Self {
        TextureStackConfig {
            atlas: 128,
            gen_channels: [16, 32, 64],
            disc_channels: [16, 32, 64],
            face_crop_size: 32,
        }
    }
}

impl TextureStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.atlas % 8 != 0 || self.atlas < 8 {
            return Err(Error::Config(format!(
                "atlas size {} must be a positive multiple of 8 (three stride-2 levels)",
                self.atlas
            )));
        }
        if self.face_crop_size % 8 != 0 || self.face_crop_size < 8 {
            return Err(Error::Config(format!(
                "face crop size {} must be a positive multiple of 8",
                self.face_crop_size
            )));
        }
        Ok(())
    }
}

fn conv_init(rng: &mut ChaCha8Rng, co: usize, ci: usize, k: usize) -> Vec<f64> {
    let bound = 1.0 / ((ci * k * k) as f64).sqrt();
    (0..co * ci * k * k).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Encoder-decoder generator weights under `prefix` (e.g. "gtn"):
/// three stride-2 conv layers, then three upsample+conv layers with skip
/// connections, sigmoid output. Biases start at zero.
pub fn init_generator_params(
    prefix: &str,
    in_channels: usize,
    cfg: &TextureStackConfig,
    seed: u64,
) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c1, c2, c3] = cfg.gen_channels;
    let mut set = ParamSet::new();
    let mut conv = |set: &mut ParamSet, name: String, co: usize, ci: usize| {
        set.insert(&format!("{}.k", name), vec![co, ci, 3, 3], conv_init(&mut rng, co, ci, 3))
            .unwrap();
        set.insert(&format!("{}.b", name), vec![co], vec![0.0; co]).unwrap();
    };
    conv(&mut set, format!("{}.enc1", prefix), c1, in_channels);
    conv(&mut set, format!("{}.enc2", prefix), c2, c1);
    conv(&mut set, format!("{}.enc3", prefix), c3, c2);
    conv(&mut set, format!("{}.dec1", prefix), c2, c3 + c2);
    conv(&mut set, format!("{}.dec2", prefix), c1, c2 + c1);
    conv(&mut set, format!("{}.dec3", prefix), 3, c1 + in_channels);
    set
}

/// Strided-conv discriminator weights under `prefix` (e.g. "d2"): three
/// stride-2 conv layers, global mean pooling, affine head, sigmoid.
pub fn init_discriminator_params(prefix: &str, cfg: &TextureStackConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c1, c2, c3] = cfg.disc_channels;
    let mut set = ParamSet::new();
    let mut conv = |set: &mut ParamSet, name: String, co: usize, ci: usize| {
        set.insert(&format!("{}.k", name), vec![co, ci, 3, 3], conv_init(&mut rng, co, ci, 3))
            .unwrap();
        set.insert(&format!("{}.b", name), vec![co], vec![0.0; co]).unwrap();
    };
    conv(&mut set, format!("{}.conv1", prefix), c1, 3);
    conv(&mut set, format!("{}.conv2", prefix), c2, c1);
    conv(&mut set, format!("{}.conv3", prefix), c3, c2);
    let bound = 1.0 / (c3 as f64).sqrt();
    set.insert(
        &format!("{}.head.w", prefix),
        vec![c3, 1],
        (0..c3).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .unwrap();
    set.insert(&format!("{}.head.b", prefix), vec![1], vec![0.0]).unwrap();
    set
}

fn conv_block(
    tape: &mut Tape,
    bound: &BoundParams,
    name: &str,
    x: TensorId,
    stride: usize,
) -> Result<TensorId> {
    let k = bound.id(&format!("{}.k", name));
    let b = bound.id(&format!("{}.b", name));
    let y = tape.conv2d(x, k, stride, Padding::Same)?;
    tape.bias_add(y, b)
}

/// U-shaped generator forward pass: input `[C_in, T, T]` to a texture atlas
/// `[3, T, T]` in (0, 1).
pub fn generator_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    input: TensorId,
) -> Result<TensorId> {
    let pre1 = conv_block(tape, bound, &format!("{}.enc1", prefix), input, 2)?;
    let e1 = tape.relu(pre1);
    let pre2 = conv_block(tape, bound, &format!("{}.enc2", prefix), e1, 2)?;
    let e2 = tape.relu(pre2);
    let pre3 = conv_block(tape, bound, &format!("{}.enc3", prefix), e2, 2)?;
    let e3 = tape.relu(pre3);

    let u1 = tape.upsample_nearest2(e3)?;
    let s1 = tape.concat(&[u1, e2], 0)?;
    let pre4 = conv_block(tape, bound, &format!("{}.dec1", prefix), s1, 1)?;
    let d1 = tape.relu(pre4);

    let u2 = tape.upsample_nearest2(d1)?;
    let s2 = tape.concat(&[u2, e1], 0)?;
    let pre5 = conv_block(tape, bound, &format!("{}.dec2", prefix), s2, 1)?;
    let d2 = tape.relu(pre5);

    let u3 = tape.upsample_nearest2(d2)?;
    let s3 = tape.concat(&[u3, input], 0)?;
    let pre6 = conv_block(tape, bound, &format!("{}.dec3", prefix), s3, 1)?;
    Ok(tape.sigmoid(pre6))
}

/// Coarse texture from the visibility map (1 input channel, prefix "gtn").
pub fn coarse_texture(tape: &mut Tape, bound: &BoundParams, x_v: TensorId) -> Result<TensorId> {
    generator_forward(tape, bound, "gtn", x_v)
}

/// Refined texture conditioned on the visibility map and the coarse
/// texture (4 input channels, prefix "grn").
pub fn refined_texture(
    tape: &mut Tape,
    bound: &BoundParams,
    x_v: TensorId,
    x_p: TensorId,
) -> Result<TensorId> {
    let joint = tape.concat(&[x_v, x_p], 0)?;
    generator_forward(tape, bound, "grn", joint)
}

/// Discriminator forward pass to a scalar probability in (0, 1).
pub fn discriminator_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    image: TensorId,
) -> Result<TensorId> {
    let pre1 = conv_block(tape, bound, &format!("{}.conv1", prefix), image, 2)?;
    let c1 = tape.relu(pre1);
    let pre2 = conv_block(tape, bound, &format!("{}.conv2", prefix), c1, 2)?;
    let c2 = tape.relu(pre2);
    let pre3 = conv_block(tape, bound, &format!("{}.conv3", prefix), c2, 2)?;
    let c3 = tape.relu(pre3);
    let pooled = tape.mean(c3, Some(&[1, 2]))?;
    let c = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, vec![1, c])?;
    let w = bound.id(&format!("{}.head.w", prefix));
    let b = bound.id(&format!("{}.head.b", prefix));
    let logit = tape.matmul(row, w)?;
    let biased = tape.add(logit, b)?;
    let p = tape.sigmoid(biased);
    tape.reshape(p, vec![1])
}

/// Expands a single-channel mask over `channels` as a constant tensor.
fn expand_mask(tape: &mut Tape, mask: &[f64], channels: usize, h: usize, w: usize) -> TensorId {
    let mut data = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        data.extend_from_slice(mask);
    }
    tape.leaf(Tensor::new(vec![channels, h, w], data).expect("mask shape"))
}

/// Photometric texture loss `|(rendered - real) * B|_1 / |B|_1`, the
/// denominator counting mask pixels times channels. Empty masks yield 0
/// with a warning.
pub fn texture_loss(
    tape: &mut Tape,
    rendered: TensorId,
    real: TensorId,
    mask: &[f64],
) -> Result<TensorId> {
    let shape = tape.shape(rendered).to_vec();
    if shape != tape.shape(real) {
        return Err(Error::Dimension(format!(
            "texture_loss shapes differ: {:?} vs {:?}",
            shape,
            tape.shape(real)
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if mask.len() != h * w {
        return Err(Error::Dimension(format!(
            "mask has {} entries for a {}x{} image",
            mask.len(),
            h,
            w
        )));
    }
    let mask_count: f64 = mask.iter().sum();
    if mask_count == 0.0 {
        log::warn!("texture_loss: empty body mask; returning 0");
        return Ok(tape.scalar(0.0));
    }
    let bm = expand_mask(tape, mask, c, h, w);
    let diff = tape.sub(rendered, real)?;
    let masked = tape.mul(diff, bm)?;
    let num = tape.l1_norm(masked)?;
    Ok(tape.scale(num, 1.0 / (mask_count * c as f64)))
}

/// Adversarial losses for one (real, fake) pair of discriminator outputs:
/// `L_D = -[ln D(real) + ln(1 - D(fake))]`, and the generator loss either
/// non-saturating `-ln D(fake)` (default) or the literal minimax
/// `+ln(1 - D(fake))`. Log arguments are clamped at 1e-8.
pub fn gan_losses(
    tape: &mut Tape,
    d_real: TensorId,
    d_fake: TensorId,
    saturating: bool,
) -> Result<(TensorId, TensorId)> {
    let one = tape.scalar(1.0);
    let ln_real = tape.ln(d_real);
    let one_minus_fake = tape.sub(one, d_fake)?;
    let ln_omf = tape.ln(one_minus_fake);
    let sum = tape.add(ln_real, ln_omf)?;
    let l_d = tape.scale(sum, -1.0);
    let l_g = if saturating {
        tape.ln(one_minus_fake)
    } else {
        let lf = tape.ln(d_fake);
        tape.scale(lf, -1.0)
    };
    Ok((l_d, l_g))
}

/// Pose-misalignment regularizer:
/// `a1 |(I - I_RN) * B|_1 / |B|_1  +  a2 |(I_TN - I_RN) * C|_1 / |C|_1`.
/// An empty mismatch mask C drops the second term.
#[allow(clippy::too_many_arguments)]
pub fn regularization_loss(
    tape: &mut Tape,
    real: TensorId,
    rendered_rn: TensorId,
    rendered_tn: TensorId,
    mask_b: &[f64],
    mask_c: &[f64],
    alpha1: f64,
    alpha2: f64,
) -> Result<TensorId> {
    let t1 = texture_loss(tape, rendered_rn, real, mask_b)?;
    let term1 = tape.scale(t1, alpha1);
    let c_count: f64 = mask_c.iter().sum();
    if c_count == 0.0 {
        return Ok(term1);
    }
    let t2 = texture_loss(tape, rendered_rn, rendered_tn, mask_c)?;
    let term2 = tape.scale(t2, alpha2);
    tape.add(term1, term2)
}

/// Image-space masks for the texture losses.
#[derive(Clone, Debug)]
pub struct RegionMasks {
    /// B: union of the predicted and real body regions.
    pub body: Vec<f64>,
    /// C: silhouette disagreement minus the face region.
    pub mismatch: Vec<f64>,
    pub face_region: Vec<f64>,
}

fn binarize(values: &[f64], threshold: f64) -> Vec<f64> {
    values.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect()
}

/// Two passes of 8-neighborhood dilation (Chebyshev radius 2).
fn dilate2(mask: &mut [f64], w: usize, h: usize) {
    for _ in 0..2 {
        let src = mask.to_vec();
        for y in 0..h {
            for x in 0..w {
                if src[y * w + x] >= 1.0 {
                    continue;
                }
                let mut hit = false;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                            hit |= src[ny as usize * w + nx as usize] >= 1.0;
                        }
                    }
                }
                if hit {
                    mask[y * w + x] = 1.0;
                }
            }
        }
    }
}

/// Monotone-chain convex hull; returns vertices in counter-clockwise order.
fn convex_hull(points: &mut Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();
    if points.len() <= 2 {
        return points.clone();
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::new();
    for &p in points.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in points.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn fill_convex(hull: &[[f64; 2]], w: usize, h: usize) -> Vec<f64> {
    let mut mask = vec![0.0; w * h];
    if hull.is_empty() {
        return mask;
    }
    if hull.len() <= 2 {
        // degenerate hull: mark the pixels containing the points
        for p in hull {
            let (x, y) = (p[0].floor() as i64, p[1].floor() as i64);
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                mask[y as usize * w + x as usize] = 1.0;
            }
        }
        return mask;
    }
    for py in 0..h {
        for px in 0..w {
            let p = [px as f64 + 0.5, py as f64 + 0.5];
            let mut inside = true;
            for i in 0..hull.len() {
                let a = hull[i];
                let b = hull[(i + 1) % hull.len()];
                let cr = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
                if cr < 0.0 {
                    inside = false;
                    break;
                }
            }
            if inside {
                mask[py * w + px] = 1.0;
            }
        }
    }
    mask
}

/// Face region in image space: the filled convex hull of projected
/// face-labeled vertices, dilated by 2 pixels. Empty (with a warning) when
/// no face vertex is visible.
pub fn face_region_mask(
    verts: &[f64],
    labels: &[Part],
    camera: &Camera,
) -> Vec<f64> {
    let (pixels, _, valid) = project(camera, verts);
    let mut pts: Vec<[f64; 2]> = labels
        .iter()
        .enumerate()
        .filter(|(i, &p)| p == Part::Face && valid[*i])
        .map(|(i, _)| pixels[i])
        .collect();
    let (w, h) = (camera.width, camera.height);
    if pts.is_empty() {
        log::warn!("face_region_mask: no visible face vertices; empty mask");
        return vec![0.0; w * h];
    }
    let hull = convex_hull(&mut pts);
    let mut mask = fill_convex(&hull, w, h);
    dilate2(&mut mask, w, h);
    mask
}

/// Builds the loss masks from a predicted and a real silhouette:
/// `B = bin(pred) | bin(real)`, and
/// `C = (bin(pred) ^ bin(real)) & !face_region`.
pub fn region_masks(
    pred_sil: &[f64],
    real_sil: &[f64],
    verts: &[f64],
    labels: &[Part],
    camera: &Camera,
    threshold: f64,
) -> Result<RegionMasks> {
    if pred_sil.len() != real_sil.len() {
        return Err(Error::Dimension(format!(
            "silhouette sizes differ: {} vs {}",
            pred_sil.len(),
            real_sil.len()
        )));
    }
    let pred = binarize(pred_sil, threshold);
    let real = binarize(real_sil, threshold);
    let face_region = face_region_mask(verts, labels, camera);
    let mut body = vec![0.0; pred.len()];
    let mut mismatch = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        body[i] = if pred[i] + real[i] > 0.0 { 1.0 } else { 0.0 };
        let xor = (pred[i] - real[i]).abs();
        mismatch[i] = if xor > 0.0 && face_region[i] == 0.0 { 1.0 } else { 0.0 };
    }
    Ok(RegionMasks {
        body,
        mismatch,
        face_region,
    })
}

struct BilinearCropOp {
    image: TensorId,
    /// per output pixel: 4 source indices (plane-local) and weights
    taps: Vec<([u32; 4], [f64; 4])>,
    out_size: usize,
}

impl CustomOp for BilinearCropOp {
    fn backward(&self, ctx: &ValueCtx<'_>, _out: TensorId, gout: &[f64], sink: &mut GradSink<'_>) {
        let shape = ctx.shape(self.image);
        let plane = shape[1] * shape[2];
        let channels = shape[0];
        let out_plane = self.out_size * self.out_size;
        if let Some(di) = sink.buf(self.image) {
            for (o, (idx, w)) in self.taps.iter().enumerate() {
                for ch in 0..channels {
                    let g = gout[ch * out_plane + o];
                    if g == 0.0 {
                        continue;
                    }
                    for k in 0..4 {
                        di[ch * plane + idx[k] as usize] += g * w[k];
                    }
                }
            }
        }
    }
}

/// Bilinear resample of a pixel-space rectangle `(x0, y0, side)` of the
/// image into an `out_size` square; differentiable w.r.t. image pixels.
pub fn crop_resize_bilinear(
    tape: &mut Tape,
    image: TensorId,
    x0: f64,
    y0: f64,
    side_x: f64,
    side_y: f64,
    out_size: usize,
) -> Result<TensorId> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "crop expects [C,H,W] image, got {:?}",
            shape
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut taps = Vec::with_capacity(out_size * out_size);
    for oy in 0..out_size {
        for ox in 0..out_size {
            let sx = x0 + (ox as f64 + 0.5) * side_x / out_size as f64;
            let sy = y0 + (oy as f64 + 0.5) * side_y / out_size as f64;
            // pixel centers at integer+0.5; clamp to edge
            let fx = (sx - 0.5).clamp(0.0, w as f64 - 1.0);
            let fy = (sy - 0.5).clamp(0.0, h as f64 - 1.0);
            let x0i = fx.floor() as usize;
            let y0i = fy.floor() as usize;
            let x1i = (x0i + 1).min(w - 1);
            let y1i = (y0i + 1).min(h - 1);
            let (ax, ay) = (fx - x0i as f64, fy - y0i as f64);
            taps.push((
                [
                    (y0i * w + x0i) as u32,
                    (y0i * w + x1i) as u32,
                    (y1i * w + x0i) as u32,
                    (y1i * w + x1i) as u32,
                ],
                [
                    (1.0 - ax) * (1.0 - ay),
                    ax * (1.0 - ay),
                    (1.0 - ax) * ay,
                    ax * ay,
                ],
            ));
        }
    }
    let data = tape.data(image);
    let plane = h * w;
    let out_plane = out_size * out_size;
    let mut out = vec![0.0; c * out_plane];
    for (o, (idx, wt)) in taps.iter().enumerate() {
        for ch in 0..c {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += data[ch * plane + idx[k] as usize] * wt[k];
            }
            out[ch * out_plane + o] = acc;
        }
    }
    let tensor = Tensor::new(vec![c, out_size, out_size], out)?;
    Ok(tape.push_custom(
        &[image],
        tensor,
        Box::new(BilinearCropOp {
            image,
            taps,
            out_size,
        }),
    ))
}

/// Whole-image bilinear resize to a square.
pub fn resize_bilinear(tape: &mut Tape, image: TensorId, out_size: usize) -> Result<TensorId> {
    let shape = tape.shape(image).to_vec();
    crop_resize_bilinear(
        tape,
        image,
        0.0,
        0.0,
        shape[2] as f64,
        shape[1] as f64,
        out_size,
    )
}

/// Square crop box around the projected face vertices with a 10% margin,
/// as (x0, y0, side). Fails when the face is entirely out of frame.
pub fn face_box(verts: &[f64], labels: &[Part], camera: &Camera) -> Result<(f64, f64, f64)> {
    let (pixels, _, valid) = project(camera, verts);
    let mut any_in_frame = false;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for (i, &part) in labels.iter().enumerate() {
        if part != Part::Face || !valid[i] {
            continue;
        }
        let p = pixels[i];
        lo[0] = lo[0].min(p[0]);
        lo[1] = lo[1].min(p[1]);
        hi[0] = hi[0].max(p[0]);
        hi[1] = hi[1].max(p[1]);
        if p[0] >= 0.0 && p[0] <= camera.width as f64 && p[1] >= 0.0 && p[1] <= camera.height as f64
        {
            any_in_frame = true;
        }
    }
    if !any_in_frame {
        return Err(Error::FaceOutOfFrame);
    }
    let side = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0) * 1.1;
    let cx = (lo[0] + hi[0]) / 2.0;
    let cy = (lo[1] + hi[1]) / 2.0;
    Ok((cx - side / 2.0, cy - side / 2.0, side))
}

/// Differentiable S x S crop of the face region of an image.
pub fn face_crop(
    tape: &mut Tape,
    image: TensorId,
    verts: &[f64],
    labels: &[Part],
    camera: &Camera,
    out_size: usize,
) -> Result<TensorId> {
    let (x0, y0, side) = face_box(verts, labels, camera)?;
    crop_resize_bilinear(tape, image, x0, y0, side, side, out_size)
}

/// Loads a raw visibility map as a constant 1 x T x T network input.
pub fn visibility_input(tape: &mut Tape, x_v: &[f64], atlas: usize) -> Result<TensorId> {
    tape.constant(vec![1, atlas, atlas], x_v.to_vec())
}

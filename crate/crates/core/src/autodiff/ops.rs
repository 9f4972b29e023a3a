//! Forward implementations and backward rules for the primitive tape ops.

use super::{
    BinaryKind, GradSink, Op, Padding, Record, ReduceKind, Tape, TensorId, UnaryKind, ValueCtx,
};
use crate::error::{Error, Result};

#[inline]
pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log arguments are clamped here so adversarial losses stay finite.
pub const LN_CLAMP: f64 = 1e-8;

impl Tape {
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul expects 2-d operands, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                sa, sb
            )));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![m, n], out, tracked, Op::MatMul { a, b, m, k, n }))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Relu)
    }
    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Tanh)
    }
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Sigmoid)
    }
    pub fn abs(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Abs)
    }
    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Sqrt)
    }
    pub fn sin(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Sin)
    }
    pub fn cos(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Cos)
    }
    /// Natural log of max(x, 1e-8).
    pub fn ln(&mut self, x: TensorId) -> TensorId {
        self.unary(x, UnaryKind::Ln)
    }

    pub fn unary(&mut self, x: TensorId, kind: UnaryKind) -> TensorId {
        let data: Vec<f64> = self.data(x)
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Sigmoid => stable_sigmoid(v),
                UnaryKind::Abs => v.abs(),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Sin => v.sin(),
                UnaryKind::Cos => v.cos(),
                UnaryKind::Ln => v.max(LN_CLAMP).ln(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(shape, data, tracked, Op::Unary { x, kind })
    }

    /// y = a*x + b, elementwise with constant coefficients.
    pub fn affine(&mut self, x: TensorId, a: f64, b: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| a * v + b).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(shape, data, tracked, Op::Affine { x, a })
    }

    pub fn scale(&mut self, x: TensorId, a: f64) -> TensorId {
        self.affine(x, a, 0.0)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinaryKind::Add)
    }
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinaryKind::Sub)
    }
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinaryKind::Mul)
    }
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinaryKind::Div)
    }

    /// Elementwise binary op; operands must have equal shapes or one side
    /// may be a single-element scalar that broadcasts.
    pub fn binary(&mut self, a: TensorId, b: TensorId, kind: BinaryKind) -> Result<TensorId> {
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        let shape = if self.shape(a) == self.shape(b) {
            self.shape(a).to_vec()
        } else if na == 1 {
            self.shape(b).to_vec()
        } else if nb == 1 {
            self.shape(a).to_vec()
        } else {
            return Err(Error::Dimension(format!(
                "binary op {:?} on incompatible shapes {:?} and {:?}",
                kind,
                self.shape(a),
                self.shape(b)
            )));
        };
        let numel = shape.iter().product::<usize>();
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            let va = da[if na == 1 { 0 } else { i }];
            let vb = db[if nb == 1 { 0 } else { i }];
            out.push(match kind {
                BinaryKind::Add => va + vb,
                BinaryKind::Sub => va - vb,
                BinaryKind::Mul => va * vb,
                BinaryKind::Div => va / vb,
            });
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(shape, out, tracked, Op::Binary { a, b, kind }))
    }

    pub fn sum(&mut self, x: TensorId, axes: Option<&[usize]>) -> Result<TensorId> {
        self.reduce(x, ReduceKind::Sum, axes)
    }
    pub fn mean(&mut self, x: TensorId, axes: Option<&[usize]>) -> Result<TensorId> {
        self.reduce(x, ReduceKind::Mean, axes)
    }
    pub fn l1_norm(&mut self, x: TensorId) -> Result<TensorId> {
        self.reduce(x, ReduceKind::L1Norm, None)
    }

    pub fn reduce(
        &mut self,
        x: TensorId,
        kind: ReduceKind,
        axes: Option<&[usize]>,
    ) -> Result<TensorId> {
        let in_shape = self.shape(x).to_vec();
        if let Some(axes) = axes {
            for &ax in axes {
                if ax >= in_shape.len() {
                    return Err(Error::Dimension(format!(
                        "reduce axis {} out of range for shape {:?}",
                        ax, in_shape
                    )));
                }
            }
        }
        let numel = self.value(x).numel();
        if numel == 0 {
            return match kind {
                ReduceKind::Mean => Err(Error::Numeric("mean of empty tensor".into())),
                _ => Ok(self.scalar(0.0)),
            };
        }
        let plan = ReducePlan::new(&in_shape, axes);
        let mut out = vec![0.0; plan.out_numel];
        let data = self.data(x);
        for (i, &v) in data.iter().enumerate() {
            let o = plan.out_index(i);
            out[o] += match kind {
                ReduceKind::L1Norm => v.abs(),
                _ => v,
            };
        }
        if kind == ReduceKind::Mean {
            let count = (numel / plan.out_numel) as f64;
            for v in &mut out {
                *v /= count;
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(
            plan.out_shape.clone(),
            out,
            tracked,
            Op::Reduce {
                x,
                kind,
                axes: axes.map(|a| a.to_vec()),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat axis {} out of range for shape {:?}",
                axis, first
            )));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::Dimension(format!(
                    "concat shapes differ off-axis: {:?} vs {:?}",
                    first, s
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_numel];
        let mut offset = 0usize;
        for &p in parts {
            let len = self.shape(p)[axis];
            let data = self.data(p);
            for o in 0..outer {
                let src = &data[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            out_shape,
            out,
            tracked,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn narrow(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "narrow [{}, {}) on axis {} of shape {:?}",
                start,
                start + len,
                axis,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        let data = self.data(x);
        for o in 0..outer {
            let src_start = (o * shape[axis] + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&data[src_start..src_start + len * inner]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(out_shape, out, tracked, Op::Narrow { x, axis, start }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let data = self.data(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(shape, data, tracked, Op::Reshape { x }))
    }

    /// Cross-correlation of `x: [C_in, H, W]` with `kernel:
    /// [C_out, C_in, k, k]` (k odd), zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: Padding,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects input [C,H,W] and kernel [Co,Ci,k,k], got {:?} and {:?}",
                xs, ks
            )));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, ci2, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if ci != ci2 {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {} vs kernel {}",
                ci, ci2
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be square with odd size, got {}x{}",
                kh, kw
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => (kh - 1) / 2,
        };
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Dimension(format!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let out = conv2d_raw(
            self.data(x),
            self.data(kernel),
            ci,
            h,
            w,
            co,
            kh,
            stride,
            pad,
        );
        let tracked = self.tracked(x) || self.tracked(kernel);
        Ok(self.push(
            vec![co, ho, wo],
            out,
            tracked,
            Op::Conv2d {
                x,
                kernel,
                stride,
                pad,
            },
        ))
    }

    /// Adds a per-channel bias to `x: [C, H, W]`.
    pub fn bias_add(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 || bs != vec![xs[0]] {
            return Err(Error::Dimension(format!(
                "bias_add expects [C,H,W] and [C], got {:?} and {:?}",
                xs, bs
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let plane = h * w;
        let bd = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for ch in 0..c {
            for v in &mut out[ch * plane..(ch + 1) * plane] {
                *v += bd[ch];
            }
        }
        let tracked = self.tracked(x) || self.tracked(b);
        Ok(self.push(xs, out, tracked, Op::BiasAdd { x, b }))
    }

    /// Nearest-neighbor 2x upsampling of `x: [C, H, W]`.
    pub fn upsample_nearest2(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!(
                "upsample expects [C,H,W], got {:?}",
                xs
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        let data = self.data(x);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = data[(ch * h + i) * w + j];
                    for a in 0..2 {
                        for b in 0..2 {
                            out[(ch * 2 * h + 2 * i + a) * 2 * w + 2 * j + b] = v;
                        }
                    }
                }
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(vec![c, 2 * h, 2 * w], out, tracked, Op::Upsample2 { x }))
    }

    /// Per-element clamp to constant bounds. The backward rule passes the
    /// gradient only strictly inside the bounds.
    pub fn clamp_elems(&mut self, x: TensorId, lo: &[f64], hi: &[f64]) -> Result<TensorId> {
        let n = self.value(x).numel();
        if lo.len() != n || hi.len() != n {
            return Err(Error::Dimension(format!(
                "clamp bounds length {}/{} vs tensor {}",
                lo.len(),
                hi.len(),
                n
            )));
        }
        let data: Vec<f64> = self.data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v.max(lo[i]).min(hi[i]))
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(
            shape,
            data,
            tracked,
            Op::ClampElems {
                x,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            },
        ))
    }
}

struct ReducePlan {
    in_shape: Vec<usize>,
    keep: Vec<bool>,
    out_shape: Vec<usize>,
    out_numel: usize,
}

impl ReducePlan {
    fn new(in_shape: &[usize], axes: Option<&[usize]>) -> Self {
        let keep: Vec<bool> = match axes {
            None => vec![false; in_shape.len()],
            Some(axes) => (0..in_shape.len()).map(|i| !axes.contains(&i)).collect(),
        };
        let mut out_shape: Vec<usize> = in_shape
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&d, _)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_numel = out_shape.iter().product();
        ReducePlan {
            in_shape: in_shape.to_vec(),
            keep,
            out_shape,
            out_numel,
        }
    }

    /// Maps a flat input index to the flat index of the reduced output.
    fn out_index(&self, mut flat: usize) -> usize {
        let mut coords = vec![0usize; self.in_shape.len()];
        for d in (0..self.in_shape.len()).rev() {
            coords[d] = flat % self.in_shape[d];
            flat /= self.in_shape[d];
        }
        let mut out = 0usize;
        for d in 0..self.in_shape.len() {
            if self.keep[d] {
                out = out * self.in_shape[d] + coords[d];
            }
        }
        out
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a^T * g: accumulates into `db` of shape k x n.
fn matmul_at_g(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

/// g * b^T: accumulates into `da` of shape m x k.
fn matmul_g_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let drow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            drow[p] += s;
        }
    }
}

/// Output-column range [lo, hi) whose input column `ox * stride + off`
/// stays inside [0, w).
#[inline]
fn conv_ox_range(off: isize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let hi_in = w as isize - 1 - off;
    if hi_in < 0 {
        return (0, 0);
    }
    let hi = (hi_in as usize / stride + 1).min(wo);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw(
    x: &[f64],
    kernel: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    // row-sliced loops: the innermost stride-1 update is a contiguous axpy
    for oc in 0..co {
        let oplane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
        for c in 0..ci {
            let kbase = ((oc * ci) + c) * k * k;
            let xplane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                let krow = &kernel[kbase + ky * k..kbase + (ky + 1) * k];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xplane[iy as usize * w..iy as usize * w + w];
                    let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                    for (kx, &kv) in krow.iter().enumerate() {
                        if kv == 0.0 {
                            continue;
                        }
                        let off = kx as isize - pad as isize;
                        let (lo, hi) = conv_ox_range(off, stride, w, wo);
                        if stride == 1 {
                            let xs = &xrow[(lo as isize + off) as usize..];
                            for (o, xv) in orow[lo..hi].iter_mut().zip(xs) {
                                *o += kv * xv;
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += kv * xrow[(ox * stride) as usize.wrapping_add_signed(off)];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn backward_record(
    rec: &Record,
    ctx: &ValueCtx<'_>,
    gout: &[f64],
    sink: &mut GradSink<'_>,
) {
    match &rec.op {
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (ctx.data(*a), ctx.data(*b));
            if let Some(da) = sink.buf(*a) {
                matmul_g_bt(gout, bv, *m, *k, *n, da);
            }
            if let Some(db) = sink.buf(*b) {
                matmul_at_g(av, gout, *m, *k, *n, db);
            }
        }
        Op::Unary { x, kind } => {
            let xv = ctx.data(*x);
            let yv = ctx.data(rec.out);
            if let Some(dx) = sink.buf(*x) {
                for i in 0..xv.len() {
                    let d = match kind {
                        UnaryKind::Relu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Tanh => 1.0 - yv[i] * yv[i],
                        UnaryKind::Sigmoid => yv[i] * (1.0 - yv[i]),
                        UnaryKind::Abs => {
                            if xv[i] > 0.0 {
                                1.0
                            } else if xv[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Sqrt => 0.5 / yv[i],
                        UnaryKind::Sin => xv[i].cos(),
                        UnaryKind::Cos => -xv[i].sin(),
                        UnaryKind::Ln => {
                            if xv[i] > LN_CLAMP {
                                1.0 / xv[i]
                            } else {
                                0.0
                            }
                        }
                    };
                    dx[i] += gout[i] * d;
                }
            }
        }
        Op::Affine { x, a } => {
            sink.add_scaled(*x, gout, *a);
        }
        Op::Binary { a, b, kind } => {
            let (av, bv) = (ctx.data(*a), ctx.data(*b));
            let (na, nb) = (av.len(), bv.len());
            let n = gout.len();
            if let Some(da) = sink.buf(*a) {
                for i in 0..n {
                    let g = gout[i];
                    let contrib = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g,
                        BinaryKind::Mul => g * bv[if nb == 1 { 0 } else { i }],
                        BinaryKind::Div => g / bv[if nb == 1 { 0 } else { i }],
                    };
                    da[if na == 1 { 0 } else { i }] += contrib;
                }
            }
            if let Some(db) = sink.buf(*b) {
                for i in 0..n {
                    let g = gout[i];
                    let ia = if na == 1 { 0 } else { i };
                    let ib = if nb == 1 { 0 } else { i };
                    let contrib = match kind {
                        BinaryKind::Add => g,
                        BinaryKind::Sub => -g,
                        BinaryKind::Mul => g * av[ia],
                        BinaryKind::Div => -g * av[ia] / (bv[ib] * bv[ib]),
                    };
                    db[ib] += contrib;
                }
            }
        }
        Op::Reduce { x, kind, axes } => {
            let xv = ctx.data(*x);
            let shape = ctx.shape(*x).to_vec();
            let plan = ReducePlan::new(&shape, axes.as_deref());
            let count = (xv.len() / plan.out_numel) as f64;
            if let Some(dx) = sink.buf(*x) {
                for i in 0..xv.len() {
                    let g = gout[plan.out_index(i)];
                    dx[i] += match kind {
                        ReduceKind::Sum => g,
                        ReduceKind::Mean => g / count,
                        ReduceKind::L1Norm => {
                            if xv[i] > 0.0 {
                                g
                            } else if xv[i] < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        }
                    };
                }
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = ctx.shape(rec.out);
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let axis_total = out_shape[*axis];
            let mut offset = 0usize;
            for &p in parts {
                let len = ctx.shape(p)[*axis];
                if let Some(dp) = sink.buf(p) {
                    for o in 0..outer {
                        let src_start = (o * axis_total + offset) * inner;
                        let dst = &mut dp[o * len * inner..(o + 1) * len * inner];
                        for (d, g) in dst.iter_mut().zip(&gout[src_start..src_start + len * inner])
                        {
                            *d += g;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = ctx.shape(*x);
            let out_shape = ctx.shape(rec.out);
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[*axis + 1..].iter().product();
            let len = out_shape[*axis];
            if let Some(dx) = sink.buf(*x) {
                for o in 0..outer {
                    let dst_start = (o * in_shape[*axis] + start) * inner;
                    let src = &gout[o * len * inner..(o + 1) * len * inner];
                    for (d, g) in dx[dst_start..dst_start + len * inner].iter_mut().zip(src) {
                        *d += g;
                    }
                }
            }
        }
        Op::Reshape { x } => {
            sink.add_scaled(*x, gout, 1.0);
        }
        Op::Conv2d {
            x,
            kernel,
            stride,
            pad,
        } => {
            let xs = ctx.shape(*x);
            let ks = ctx.shape(*kernel);
            let (ci, h, w) = (xs[0], xs[1], xs[2]);
            let (co, k) = (ks[0], ks[2]);
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (w + 2 * pad - k) / stride + 1;
            let xv = ctx.data(*x);
            let kv = ctx.data(*kernel);
            let want_dx = sink.buf(*x).is_some();
            let want_dk = sink.buf(*kernel).is_some();
            // Two sequential passes keep the borrow on the sink short.
            if want_dk {
                let dk = sink.buf(*kernel).unwrap();
                for oc in 0..co {
                    for c in 0..ci {
                        let kbase = ((oc * ci) + c) * k * k;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = gout[(oc * ho + oy) * wo + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                let iy0 = (oy * stride) as isize - *pad as isize;
                                let ix0 = (ox * stride) as isize - *pad as isize;
                                for dy in 0..k {
                                    let iy = iy0 + dy as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..k {
                                        let ix = ix0 + dx as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        dk[kbase + dy * k + dx] +=
                                            g * xv[(c * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if want_dx {
                let dxb = sink.buf(*x).unwrap();
                for oc in 0..co {
                    for c in 0..ci {
                        let kbase = ((oc * ci) + c) * k * k;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = gout[(oc * ho + oy) * wo + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                let iy0 = (oy * stride) as isize - *pad as isize;
                                let ix0 = (ox * stride) as isize - *pad as isize;
                                for dy in 0..k {
                                    let iy = iy0 + dy as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..k {
                                        let ix = ix0 + dx as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        dxb[(c * h + iy as usize) * w + ix as usize] +=
                                            g * kv[kbase + dy * k + dx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::BiasAdd { x, b } => {
            sink.add_scaled(*x, gout, 1.0);
            let xs = ctx.shape(*x);
            let (c, plane) = (xs[0], xs[1] * xs[2]);
            if let Some(db) = sink.buf(*b) {
                for ch in 0..c {
                    let mut s = 0.0;
                    for g in &gout[ch * plane..(ch + 1) * plane] {
                        s += g;
                    }
                    db[ch] += s;
                }
            }
        }
        Op::Upsample2 { x } => {
            let xs = ctx.shape(*x);
            let (c, h, w) = (xs[0], xs[1], xs[2]);
            if let Some(dx) = sink.buf(*x) {
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let mut s = 0.0;
                            for a in 0..2 {
                                for b in 0..2 {
                                    s += gout[(ch * 2 * h + 2 * i + a) * 2 * w + 2 * j + b];
                                }
                            }
                            dx[(ch * h + i) * w + j] += s;
                        }
                    }
                }
            }
        }
        Op::ClampElems { x, lo, hi } => {
            let xv = ctx.data(*x);
            if let Some(dx) = sink.buf(*x) {
                for i in 0..xv.len() {
                    if xv[i] > lo[i] && xv[i] < hi[i] {
                        dx[i] += gout[i];
                    }
                }
            }
        }
        Op::Custom { op } => {
            op.backward(ctx, rec.out, gout, sink);
        }
    }
}

//! Forward and adjoint kernels over raw tensors.
//!
//! Nothing here records onto a tape; [`crate::autograd`] wraps these into
//! differentiable operations. All loops run in a fixed order so identical
//! inputs give bitwise identical outputs.

use std::ops::Range;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{split_axis, strides, Tensor};

/// Stride, padding and channel grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
            groups: 1,
        }
    }

    pub const fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// "Same" padding for an odd square kernel.
    pub const fn same(kernel: usize) -> Self {
        Self::new(1, kernel / 2)
    }
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self::new(1, 0)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cg_in: usize,
    cg_out: usize,
}

impl ConvDims {
    fn col_rows(&self) -> usize {
        self.cg_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_dims(input: &[usize], weight: &[usize], geom: ConvGeom) -> Result<ConvDims> {
    if input.len() != 4 {
        return Err(shape_err!("conv2d input must be B×C×H×W, got {:?}", input));
    }
    if weight.len() != 4 {
        return Err(shape_err!("conv2d weight must be C_out×C_in/g×kH×kW, got {:?}", weight));
    }
    let g = geom.groups;
    if g == 0 {
        return Err(shape_err!("conv2d groups must be positive"));
    }
    if geom.stride.0 == 0 || geom.stride.1 == 0 {
        return Err(shape_err!("conv2d stride must be positive"));
    }
    let (batch, c_in, h, w) = (input[0], input[1], input[2], input[3]);
    let (c_out, cg_in, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    if c_in % g != 0 {
        return Err(shape_err!("conv2d C_in = {} not divisible by groups = {}", c_in, g));
    }
    if c_out % g != 0 {
        return Err(shape_err!("conv2d C_out = {} not divisible by groups = {}", c_out, g));
    }
    if cg_in != c_in / g {
        return Err(shape_err!(
            "conv2d weight dim 1 = {} but C_in/groups = {}",
            cg_in,
            c_in / g
        ));
    }
    let ph = h + 2 * geom.padding.0;
    let pw = w + 2 * geom.padding.1;
    if kh > ph {
        return Err(shape_err!("conv2d kernel height {} exceeds padded height {}", kh, ph));
    }
    if kw > pw {
        return Err(shape_err!("conv2d kernel width {} exceeds padded width {}", kw, pw));
    }
    Ok(ConvDims {
        batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh: (ph - kh) / geom.stride.0 + 1,
        ow: (pw - kw) / geom.stride.1 + 1,
        cg_in,
        cg_out: c_out / g,
    })
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies in `0..w`.
fn valid_cols(kj: usize, stride: usize, pad: usize, w: usize, ow: usize) -> Range<usize> {
    let lo = if pad > kj { (pad - kj).div_ceil(stride) } else { 0 };
    let hi = if w + pad > kj { ((w + pad - kj - 1) / stride + 1).min(ow) } else { 0 };
    lo.min(hi)..hi
}

/// Unfolds one channel group of one image into a (Cg·kH·kW) × (oH·oW) matrix.
fn im2col<S: Scalar>(image: &[S], c0: usize, d: &ConvDims, geom: ConvGeom, col: &mut [S]) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let n = d.col_cols();
    for c in 0..d.cg_in {
        let plane = &image[(c0 + c) * d.h * d.w..(c0 + c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut col[row * n..(row + 1) * n];
                let cols = valid_cols(kj, sw, pw, d.w, d.ow);
                for oy in 0..d.oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let out_row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy as usize >= d.h || cols.is_empty() {
                        out_row.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    out_row[..cols.start].fill(S::zero());
                    out_row[cols.end..].fill(S::zero());
                    let first = cols.start * sw + kj - pw;
                    if sw == 1 {
                        out_row[cols.clone()].copy_from_slice(&src[first..first + cols.len()]);
                    } else {
                        for (k, v) in out_row[cols.clone()].iter_mut().enumerate() {
                            *v = src[first + k * sw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<S: Scalar>(col: &[S], c0: usize, d: &ConvDims, geom: ConvGeom, image: &mut [S]) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let n = d.col_cols();
    for c in 0..d.cg_in {
        let plane = &mut image[(c0 + c) * d.h * d.w..(c0 + c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &col[row * n..(row + 1) * n];
                let cols = valid_cols(kj, sw, pw, d.w, d.ow);
                if cols.is_empty() {
                    continue;
                }
                let first = cols.start * sw + kj - pw;
                for oy in 0..d.oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let g = &src[oy * d.ow + cols.start..oy * d.ow + cols.end];
                    if sw == 1 {
                        for (o, &v) in dst[first..first + g.len()].iter_mut().zip(g) {
                            *o = *o + v;
                        }
                    } else {
                        for (k, &v) in g.iter().enumerate() {
                            dst[first + k * sw] = dst[first + k * sw] + v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over a B×C×H×W batch.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeom,
) -> Result<Tensor<S>> {
    let d = conv_dims(input.shape(), weight.shape(), geom)?;
    if let Some(b) = bias {
        if b.shape() != [d.c_out] {
            return Err(shape_err!("conv2d bias shape {:?}, expected [{}]", b.shape(), d.c_out));
        }
    }
    let rows = d.col_rows();
    let n = d.col_cols();
    let mut out = vec![S::zero(); d.batch * d.c_out * n];
    let mut col = vec![S::zero(); rows * n];
    let x = input.data();
    let w = weight.data();
    for b in 0..d.batch {
        let image = &x[b * d.c_in * d.h * d.w..(b + 1) * d.c_in * d.h * d.w];
        for g in 0..geom.groups {
            im2col(image, g * d.cg_in, &d, geom, &mut col);
            for co in g * d.cg_out..(g + 1) * d.cg_out {
                let dst = &mut out[(b * d.c_out + co) * n..(b * d.c_out + co + 1) * n];
                if let Some(bias) = bias {
                    dst.fill(bias.data()[co]);
                }
                let wrow = &w[co * rows..(co + 1) * rows];
                for (r, &wv) in wrow.iter().enumerate() {
                    let src = &col[r * n..(r + 1) * n];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o = *o + wv * s;
                    }
                }
            }
        }
    }
    Tensor::new([d.batch, d.c_out, d.oh, d.ow], out)
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut lanes = [S::zero(); 8];
    let split = a.len().min(b.len()) / 8 * 8;
    for (ca, cb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for l in 0..8 {
            lanes[l] = lanes[l] + ca[l] * cb[l];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in a[split..].iter().zip(&b[split..]) {
        tail = tail + x * y;
    }
    let pairs = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub struct Conv2dGrads<S> {
    pub input: Option<Vec<S>>,
    pub weight: Option<Vec<S>>,
    pub bias: Option<Vec<S>>,
}

pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &[S],
    geom: ConvGeom,
    need: (bool, bool, bool),
) -> Result<Conv2dGrads<S>> {
    let d = conv_dims(input.shape(), weight.shape(), geom)?;
    let rows = d.col_rows();
    let n = d.col_cols();
    let x = input.data();
    let w = weight.data();
    let mut gx = need.0.then(|| vec![S::zero(); x.len()]);
    let mut gw = need.1.then(|| vec![S::zero(); w.len()]);
    let mut gb = need.2.then(|| vec![S::zero(); d.c_out]);
    let mut col = vec![S::zero(); rows * n];
    let mut dcol = vec![S::zero(); rows * n];
    for b in 0..d.batch {
        let img = b * d.c_in * d.h * d.w..(b + 1) * d.c_in * d.h * d.w;
        for g in 0..geom.groups {
            if gw.is_some() {
                im2col(&x[img.clone()], g * d.cg_in, &d, geom, &mut col);
            }
            if gx.is_some() {
                dcol.fill(S::zero());
            }
            for co in g * d.cg_out..(g + 1) * d.cg_out {
                let go = &grad_out[(b * d.c_out + co) * n..(b * d.c_out + co + 1) * n];
                if let Some(gb) = gb.as_mut() {
                    gb[co] = gb[co] + go.iter().fold(S::zero(), |acc, &v| acc + v);
                }
                if let Some(gw) = gw.as_mut() {
                    let gwrow = &mut gw[co * rows..(co + 1) * rows];
                    for (r, acc) in gwrow.iter_mut().enumerate() {
                        let src = &col[r * n..(r + 1) * n];
                        *acc = *acc + dot(src, go);
                    }
                }
                if gx.is_some() {
                    let wrow = &w[co * rows..(co + 1) * rows];
                    for (r, &wv) in wrow.iter().enumerate() {
                        let dst = &mut dcol[r * n..(r + 1) * n];
                        for (o, &g) in dst.iter_mut().zip(go) {
                            *o = *o + wv * g;
                        }
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                col2im(&dcol, g * d.cg_in, &d, geom, &mut gx[img.clone()]);
            }
        }
    }
    Ok(Conv2dGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// `input` B×D, `weight` K×D, `bias` K → B×K.
pub fn linear<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    if input.ndim() != 2 || weight.ndim() != 2 {
        return Err(shape_err!(
            "linear expects B×D input and K×D weight, got {:?} and {:?}",
            input.shape(),
            weight.shape()
        ));
    }
    let (b, d) = (input.dim(0), input.dim(1));
    let k = weight.dim(0);
    if weight.dim(1) != d {
        return Err(shape_err!(
            "linear input width D = {} but weight expects {}",
            d,
            weight.dim(1)
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [k] {
            return Err(shape_err!("linear bias shape {:?}, expected [{}]", bias.shape(), k));
        }
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(b * k);
    for row in x.chunks_exact(d) {
        for j in 0..k {
            // Same accumulation order as `conv2d` with a 1×1 kernel.
            let mut acc = bias.map_or(S::zero(), |bb| bb.data()[j]);
            for (&wv, &xv) in w[j * d..(j + 1) * d].iter().zip(row) {
                acc = acc + wv * xv;
            }
            out.push(acc);
        }
    }
    Tensor::new([b, k], out)
}

/// `a` M×K times `b` K×N.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0) {
        return Err(shape_err!(
            "matmul expects M×K and K×N, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    Tensor::new([m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// Transpose of a row-major M×N buffer.
pub(crate) fn transpose_raw<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Checks that `from` broadcasts to `to` (same rank, each dim equal or 1).
pub fn check_expand(from: &[usize], to: &[usize]) -> Result<()> {
    if from.len() != to.len() {
        return Err(shape_err!("expand: rank of {:?} differs from {:?}", from, to));
    }
    for (axis, (&f, &t)) in from.iter().zip(to).enumerate() {
        if f != t && f != 1 {
            return Err(shape_err!(
                "expand: dim {} has size {} which cannot broadcast to {}",
                axis,
                f,
                t
            ));
        }
    }
    Ok(())
}

/// Source offset for every destination element of a broadcast.
fn expand_offsets(from: &[usize], to: &[usize]) -> Vec<usize> {
    let src_strides = strides(from);
    let eff: Vec<usize> = from
        .iter()
        .zip(&src_strides)
        .map(|(&f, &s)| if f == 1 { 0 } else { s })
        .collect();
    let n: usize = to.iter().product();
    let mut idx = vec![0usize; to.len()];
    let mut offsets = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for axis in (0..to.len()).rev() {
            idx[axis] += 1;
            off += eff[axis];
            if idx[axis] < to[axis] {
                break;
            }
            off -= eff[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    offsets
}

pub fn expand<S: Scalar>(input: &Tensor<S>, to: &[usize]) -> Result<Tensor<S>> {
    check_expand(input.shape(), to)?;
    let src = input.data();
    let data = expand_offsets(input.shape(), to)
        .into_iter()
        .map(|o| src[o])
        .collect();
    Tensor::new(to.to_vec(), data)
}

/// Adjoint of [`expand`]: sums the broadcast axes back down.
pub fn expand_backward<S: Scalar>(grad: &[S], from: &[usize], to: &[usize]) -> Vec<S> {
    let mut out = vec![S::zero(); from.iter().product()];
    for (o, &g) in expand_offsets(from, to).into_iter().zip(grad) {
        out[o] = out[o] + g;
    }
    out
}

/// Slice `[start, start+len)` along `axis`.
pub fn narrow<S: Scalar>(input: &Tensor<S>, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
    if axis >= input.ndim() {
        return Err(shape_err!("narrow: axis {} out of range for {:?}", axis, input.shape()));
    }
    if start + len > input.dim(axis) {
        return Err(shape_err!(
            "narrow: range {}..{} exceeds dim {} of size {}",
            start,
            start + len,
            axis,
            input.dim(axis)
        ));
    }
    let (outer, n, inner) = split_axis(input.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner;
        data.extend_from_slice(&input.data()[base + start * inner..base + (start + len) * inner]);
    }
    let mut shape = input.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, data)
}

pub fn concat<S: Scalar>(inputs: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    let Some(first) = inputs.first() else {
        return Err(shape_err!("concat of zero tensors"));
    };
    if axis >= first.ndim() {
        return Err(shape_err!("concat: axis {} out of range for {:?}", axis, first.shape()));
    }
    let mut total = 0;
    for t in inputs {
        if t.ndim() != first.ndim()
            || t.shape()[..axis] != first.shape()[..axis]
            || t.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(shape_err!(
                "concat along axis {}: {:?} incompatible with {:?}",
                axis,
                t.shape(),
                first.shape()
            ));
        }
        total += t.dim(axis);
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let n = t.dim(axis);
            data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, data)
}

/// Moves the channels in `fw` one step forward in time and those in `bw` one
/// step backward, zero-filling the vacated frame. Other channels become zero.
///
/// `x` is B×T×C×H×W.
pub fn temporal_shift<S: Scalar>(
    x: &[S],
    shape: &[usize],
    fw: Range<usize>,
    bw: Range<usize>,
) -> Vec<S> {
    let (b, t, c, plane) = (shape[0], shape[1], shape[2], shape[3] * shape[4]);
    let mut out = vec![S::zero(); x.len()];
    let at = |bi: usize, ti: usize, ci: usize| ((bi * t + ti) * c + ci) * plane;
    for bi in 0..b {
        for ti in 0..t {
            for ci in fw.clone() {
                if ti >= 1 {
                    let (d, s) = (at(bi, ti, ci), at(bi, ti - 1, ci));
                    out[d..d + plane].copy_from_slice(&x[s..s + plane]);
                }
            }
            for ci in bw.clone() {
                if ti + 1 < t {
                    let (d, s) = (at(bi, ti, ci), at(bi, ti + 1, ci));
                    out[d..d + plane].copy_from_slice(&x[s..s + plane]);
                }
            }
        }
    }
    out
}

/// Softmax over consecutive rows of length `row`, max-subtracted.
pub fn softmax_rows<S: Scalar>(x: &[S], row: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for r in x.chunks_exact(row) {
        let m = r.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let start = out.len();
        let mut z = S::zero();
        for &v in r {
            let e = (v - m).exp();
            z = z + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / z;
        }
    }
    out
}

pub fn log_softmax_rows<S: Scalar>(x: &[S], row: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for r in x.chunks_exact(row) {
        let m = r.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let z = r.iter().fold(S::zero(), |a, &v| a + (v - m).exp());
        let lse = m + z.ln();
        out.extend(r.iter().map(|&v| v - lse));
    }
    out
}

//! Forward and backward kernels on raw `(N, C, H, W)` buffers.
//!
//! Everything here is pure and single-threaded; the autograd layer wires these
//! into graph nodes.

use super::{gemm, Scalar, Tensor};
use crate::error::{LightError, Result};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<F: Scalar>(x: &[F], c: usize, h: usize, w: usize, g: ConvGeom, col: &mut [F]) {
    let (oh, ow) = g.out_size(h, w);
    let k = g.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { F::zero() } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<F: Scalar>(col: &[F], c: usize, h: usize, w: usize, g: ConvGeom, x: &mut [F]) {
    let (oh, ow) = g.out_size(h, w);
    let k = g.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes<F: Scalar>(x: &Tensor<F>, weight: &Tensor<F>, g: ConvGeom) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[1] != c || ws[2] != g.kernel || ws[3] != g.kernel {
        return Err(LightError::shape(format!(
            "conv weight {:?} does not fit input with {} channels and kernel {}",
            ws, c, g.kernel
        )));
    }
    if h + 2 * g.pad < g.kernel || w + 2 * g.pad < g.kernel {
        return Err(LightError::shape(format!("conv input {}x{} smaller than kernel {}", h, w, g.kernel)));
    }
    Ok((n, c, h, w, ws[0]))
}

/// 2-D convolution (cross-correlation) with optional bias.
pub fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    g: ConvGeom,
) -> Result<Tensor<F>> {
    let (n, c, h, w, co) = check_conv_shapes(x, weight, g)?;
    let (oh, ow) = g.out_size(h, w);
    let p = oh * ow;
    let kk = c * g.kernel * g.kernel;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); kk * p] };
    for ni in 0..n {
        let xs = x.sample(ni);
        let cols: &[F] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, c, h, w, g, &mut col);
            &col
        };
        let dst = &mut out.data_mut()[ni * co * p..(ni + 1) * co * p];
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v = bv);
            }
            gemm(false, false, co, p, kk, F::one(), weight.data(), cols, F::one(), dst);
        } else {
            gemm(false, false, co, p, kk, F::one(), weight.data(), cols, F::zero(), dst);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight and bias.
pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    g: ConvGeom,
    need_input: bool,
) -> (Option<Tensor<F>>, Tensor<F>, Tensor<F>) {
    let (n, c, h, w) = x.dims4().expect("conv input is rank 4");
    let co = weight.shape()[0];
    let (oh, ow) = g.out_size(h, w);
    let p = oh * ow;
    let kk = c * g.kernel * g.kernel;
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[co]);
    let mut gx = if need_input { Some(Tensor::zeros(x.shape())) } else { None };
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); kk * p] };
    let mut dcol = vec![F::zero(); kk * p];
    for ni in 0..n {
        let gy = grad_out.sample(ni);
        for (oc, chunk) in gy.chunks(p).enumerate() {
            gb.data_mut()[oc] += chunk.iter().copied().sum::<F>();
        }
        let xs = x.sample(ni);
        let cols: &[F] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, c, h, w, g, &mut col);
            &col
        };
        // dW += dY * col^T
        gemm(false, true, co, kk, p, F::one(), gy, cols, F::one(), gw.data_mut());
        if let Some(gx) = gx.as_mut() {
            let per = c * h * w;
            let dst = &mut gx.data_mut()[ni * per..(ni + 1) * per];
            if g.is_pointwise() {
                gemm(true, false, kk, p, co, F::one(), weight.data(), gy, F::zero(), dst);
            } else {
                gemm(true, false, kk, p, co, F::one(), weight.data(), gy, F::zero(), &mut dcol);
                col2im(&dcol, c, h, w, g, dst);
            }
        }
    }
    (gx, gw, gb)
}

/// Source index pair and interpolation weight for one output coordinate of an
/// align-corners=false bilinear resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Bilinear resize with the align-corners=false (half-pixel) convention.
pub fn bilinear_resize_forward<F: Scalar>(x: &Tensor<F>, oh: usize, ow: usize) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(LightError::shape(format!("cannot resize {}x{} to {}x{}", h, w, oh, ow)));
    }
    if oh == h && ow == w {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let fy = F::of(a.frac);
            let gy = F::one() - fy;
            for (ox, b) in tx.iter().enumerate() {
                let fx = F::of(b.frac);
                let gx = F::one() - fx;
                let top = gx * s[a.lo * w + b.lo] + fx * s[a.lo * w + b.hi];
                let bot = gx * s[a.hi * w + b.lo] + fx * s[a.hi * w + b.hi];
                d[oy * ow + ox] = gy * top + fy * bot;
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize_backward<F: Scalar>(grad_out: &Tensor<F>, in_shape: &[usize]) -> Tensor<F> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    if oh == h && ow == w {
        return grad_out.clone();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut gx = Tensor::zeros(in_shape);
    let src = grad_out.data();
    let dst = gx.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut dst[plane * h * w..(plane + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let fy = F::of(a.frac);
            let gy = F::one() - fy;
            for (ox, b) in tx.iter().enumerate() {
                let fx = F::of(b.frac);
                let gxw = F::one() - fx;
                let v = s[oy * ow + ox];
                d[a.lo * w + b.lo] += gy * gxw * v;
                d[a.lo * w + b.hi] += gy * fx * v;
                d[a.hi * w + b.lo] += fy * gxw * v;
                d[a.hi * w + b.hi] += fy * fx * v;
            }
        }
    }
    gx
}

/// Nearest-neighbour resize: output pixel `o` reads input `floor(o * in / out)`.
pub fn nearest_resize_forward<F: Scalar>(x: &Tensor<F>, oh: usize, ow: usize) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for oy in 0..oh {
            let iy = oy * h / oh;
            for ox in 0..ow {
                let ix = ox * w / ow;
                dst[(plane * oh + oy) * ow + ox] = src[(plane * h + iy) * w + ix];
            }
        }
    }
    Ok(out)
}

pub fn nearest_resize_backward<F: Scalar>(grad_out: &Tensor<F>, in_shape: &[usize]) -> Tensor<F> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let mut gx = Tensor::zeros(in_shape);
    let src = grad_out.data();
    let dst = gx.data_mut();
    for plane in 0..n * c {
        for oy in 0..oh {
            let iy = oy * h / oh;
            for ox in 0..ow {
                let ix = ox * w / ow;
                dst[(plane * h + iy) * w + ix] += src[(plane * oh + oy) * ow + ox];
            }
        }
    }
    gx
}

/// Half-open index range `[floor(i*len/bins), ceil((i+1)*len/bins))` of adaptive pooling cell `i`.
pub fn adaptive_range(i: usize, bins: usize, len: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

pub fn adaptive_avg_pool_forward<F: Scalar>(x: &Tensor<F>, bins: usize) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    if bins == 0 || bins > h || bins > w {
        return Err(LightError::config(
            "bin_sizes",
            format!("pooling grid {} does not fit a {}x{} map", bins, h, w),
        ));
    }
    let mut out = Tensor::zeros(&[n, c, bins, bins]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        for by in 0..bins {
            let (y0, y1) = adaptive_range(by, bins, h);
            for bx in 0..bins {
                let (x0, x1) = adaptive_range(bx, bins, w);
                let mut acc = F::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += s[y * w + xx];
                    }
                }
                dst[(plane * bins + by) * bins + bx] = acc / F::of(((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Ok(out)
}

pub fn adaptive_avg_pool_backward<F: Scalar>(grad_out: &Tensor<F>, in_shape: &[usize]) -> Tensor<F> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let bins = grad_out.shape()[2];
    let mut gx = Tensor::zeros(in_shape);
    let src = grad_out.data();
    let dst = gx.data_mut();
    for plane in 0..n * c {
        for by in 0..bins {
            let (y0, y1) = adaptive_range(by, bins, h);
            for bx in 0..bins {
                let (x0, x1) = adaptive_range(bx, bins, w);
                let v = src[(plane * bins + by) * bins + bx] / F::of(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dst[(plane * h + y) * w + xx] += v;
                    }
                }
            }
        }
    }
    gx
}

/// Corner indices and weights of a bilinear sample on an `h×w` plane, using the
/// RoIAlign boundary rules (zero outside `[-1, size]`, clamp to the edge otherwise).
pub fn bilinear_sample_taps(y: f64, x: f64, h: usize, w: usize) -> Option<[(usize, f64); 4]> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1);
    let (mut ly, mut lx) = (y - y0 as f64, x - x0 as f64);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ])
}

/// How many bilinear samples RoIAlign takes along each axis of a bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SamplingRatio {
    Fixed(usize),
    /// `ceil(bin extent)` samples, as in the reference detection libraries.
    Adaptive,
}

/// One region to pool: image index in the batch, box in the level's own pixel
/// units (already multiplied by the level's spatial scale).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiRef {
    pub batch: usize,
    pub level: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Sample positions (in feature-pixel index space) and weight of one pooled bin.
fn roi_bin_samples(roi: &RoiRef, out: usize, sampling: SamplingRatio, by: usize, bx: usize) -> (Vec<(f64, f64)>, f64) {
    // Half-pixel alignment: continuous coordinate c maps to index c - 0.5.
    let (sx, sy) = (roi.x1 - 0.5, roi.y1 - 0.5);
    let bin_w = (roi.x2 - roi.x1) / out as f64;
    let bin_h = (roi.y2 - roi.y1) / out as f64;
    let (gh, gw) = match sampling {
        SamplingRatio::Fixed(s) => (s.max(1), s.max(1)),
        SamplingRatio::Adaptive => (bin_h.ceil().max(1.0) as usize, bin_w.ceil().max(1.0) as usize),
    };
    let mut pts = Vec::with_capacity(gh * gw);
    for iy in 0..gh {
        let y = sy + by as f64 * bin_h + (iy as f64 + 0.5) * bin_h / gh as f64;
        for ix in 0..gw {
            let x = sx + bx as f64 * bin_w + (ix as f64 + 0.5) * bin_w / gw as f64;
            pts.push((y, x));
        }
    }
    (pts, 1.0 / (gh * gw) as f64)
}

pub fn check_roi(roi: &RoiRef) -> Result<()> {
    let ok = roi.x2 > roi.x1 && roi.y2 > roi.y1 && [roi.x1, roi.y1, roi.x2, roi.y2].iter().all(|v| v.is_finite());
    if ok {
        Ok(())
    } else {
        Err(LightError::shape(format!(
            "degenerate RoI box [{}, {}, {}, {}]",
            roi.x1, roi.y1, roi.x2, roi.y2
        )))
    }
}

/// RoIAlign over a set of pyramid levels; returns `(R, C, out, out)`.
pub fn roi_align_forward<F: Scalar>(
    levels: &[&Tensor<F>],
    rois: &[RoiRef],
    out: usize,
    sampling: SamplingRatio,
) -> Result<Tensor<F>> {
    let c = levels.first().map(|t| t.shape()[1]).unwrap_or(0);
    let mut res = Tensor::zeros(&[rois.len(), c, out, out]);
    for (r, roi) in rois.iter().enumerate() {
        check_roi(roi)?;
        let feat = levels.get(roi.level).ok_or_else(|| {
            LightError::shape(format!("RoI level {} out of range ({} levels)", roi.level, levels.len()))
        })?;
        let (n, fc, h, w) = feat.dims4()?;
        if roi.batch >= n || fc != c {
            return Err(LightError::shape(format!("RoI {} does not fit feature level {:?}", r, feat.shape())));
        }
        for by in 0..out {
            for bx in 0..out {
                let (pts, wt) = roi_bin_samples(roi, out, sampling, by, bx);
                let taps: Vec<_> = pts.iter().filter_map(|&(y, x)| bilinear_sample_taps(y, x, h, w)).collect();
                for ch in 0..c {
                    let plane = &feat.data()[((roi.batch * c + ch) * h) * w..((roi.batch * c + ch + 1) * h) * w];
                    let mut acc = 0.0f64;
                    for t in &taps {
                        for &(idx, tw) in t {
                            acc += tw * plane[idx].as_f64();
                        }
                    }
                    let o = ((r * c + ch) * out + by) * out + bx;
                    res.data_mut()[o] = F::of(acc * wt);
                }
            }
        }
    }
    Ok(res)
}

pub fn roi_align_backward<F: Scalar>(
    level_shapes: &[Vec<usize>],
    rois: &[RoiRef],
    out: usize,
    sampling: SamplingRatio,
    grad_out: &Tensor<F>,
) -> Vec<Tensor<F>> {
    let mut grads: Vec<Tensor<F>> = level_shapes.iter().map(|s| Tensor::zeros(s)).collect();
    let c = grad_out.shape()[1];
    for (r, roi) in rois.iter().enumerate() {
        let shape = &level_shapes[roi.level];
        let (h, w) = (shape[2], shape[3]);
        let g = &mut grads[roi.level];
        for by in 0..out {
            for bx in 0..out {
                let (pts, wt) = roi_bin_samples(roi, out, sampling, by, bx);
                let taps: Vec<_> = pts.iter().filter_map(|&(y, x)| bilinear_sample_taps(y, x, h, w)).collect();
                for ch in 0..c {
                    let go = grad_out.data()[((r * c + ch) * out + by) * out + bx].as_f64() * wt;
                    let base = (roi.batch * c + ch) * h * w;
                    for t in &taps {
                        for &(idx, tw) in t {
                            g.data_mut()[base + idx] += F::of(go * tw);
                        }
                    }
                }
            }
        }
    }
    grads
}

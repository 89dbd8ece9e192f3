use super::{Graph, Var};
use crate::error::{LightError, Result};
use crate::nn::ParamId;
use crate::tensor::kernels::{self, ConvGeom, RoiRef, SamplingRatio};
use crate::tensor::{gemm, Scalar, Tensor};

/// Batch statistics observed by a training-mode batch norm, to be folded into
/// the running estimates after the optimizer step.
#[derive(Clone, Debug)]
pub struct BnStatUpdate<F> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<F>,
    /// Unbiased (n-1) variance.
    pub var: Vec<F>,
    pub momentum: F,
}

fn same_shape<F: Scalar>(op: &str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(LightError::shape(format!("{}: shapes {:?} and {:?} differ", op, a.shape(), b.shape())))
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Scalar> Graph<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_op(v, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_op(v, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.scale(-F::one()))]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push_op(v, &[a, b], |g, p, _| {
            vec![Some(g.zip_map(p[1], |g, y| g * y)), Some(g.zip_map(p[0], |g, x| g * x))]
        }))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).scale(s);
        self.push_op(v, &[a], move |g, _, _| vec![Some(g.scale(s))])
    }

    /// Sum of equally shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| LightError::shape("add_n of nothing"))?;
        let mut acc = self.value(*first).clone();
        for x in &xs[1..] {
            same_shape("add_n", &acc, self.value(*x))?;
            acc.add_assign(self.value(*x));
        }
        let k = xs.len();
        Ok(self.push_op(acc, xs, move |g, _, _| (0..k).map(|_| Some(g.clone())).collect()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(F::zero()));
        self.push_op(v, &[a], |g, _, y| vec![Some(g.zip_map(y, |g, y| if y > F::zero() { g } else { F::zero() }))])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push_op(v, &[a], |g, _, y| vec![Some(g.zip_map(y, |g, y| g * y * (F::one() - y)))])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(v, &[a], |g, p, _| vec![Some(Tensor::full(p[0].shape(), g.data()[0]))])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let orig = self.value(a).shape().to_vec();
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(v, &[a], move |g, _, _| vec![Some(g.clone().reshape(&orig).expect("same length"))]))
    }

    /// 2-D convolution of an `(N, C, H, W)` map with an `(O, C, k, k)` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let need_x = self.requires_grad(x);
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.push_op(out, &parents, move |g, p, _| {
            let (gx, gw, gb) = kernels::conv2d_backward(p[0], p[1], g, geom, need_x);
            let mut r = vec![gx, Some(gw)];
            if has_bias {
                r.push(Some(gb));
            }
            r
        }))
    }

    /// Fully connected layer: `x (N, in)`, `w (out, in)`, `b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).len() != ws[0] {
            return Err(LightError::shape(format!("linear: input {:?} vs weight {:?}", xs, ws)));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, dout]);
        for row in out.data_mut().chunks_mut(dout) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(false, true, n, dout, din, F::one(), self.value(x).data(), self.value(w).data(), F::one(), out.data_mut());
        Ok(self.push_op(out, &[x, w, b], move |g, p, _| {
            let mut gx = Tensor::zeros(&[n, din]);
            gemm(false, false, n, din, dout, F::one(), g.data(), p[1].data(), F::zero(), gx.data_mut());
            let mut gw = Tensor::zeros(&[dout, din]);
            gemm(true, false, dout, din, n, F::one(), g.data(), p[0].data(), F::zero(), gw.data_mut());
            let mut gb = Tensor::zeros(&[dout]);
            for row in g.data().chunks(dout) {
                for (a, &v) in gb.data_mut().iter_mut().zip(row) {
                    *a += v;
                }
            }
            vec![Some(gx), Some(gw), Some(gb)]
        }))
    }

    /// Batch norm with batch statistics; records a running-stat update.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
        momentum: F,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let m = n * h * w;
        if m < 2 {
            return Err(LightError::shape("batch norm needs more than one value per channel in training"));
        }
        let hw = h * w;
        let xv = self.value(x);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ci in 0..c {
            let mut s = F::zero();
            for ni in 0..n {
                s += xv.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().copied().sum::<F>();
            }
            let mu = s / F::of(m as f64);
            let mut ss = F::zero();
            for ni in 0..n {
                for &v in &xv.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                    ss += (v - mu) * (v - mu);
                }
            }
            mean[ci] = mu;
            var[ci] = ss / F::of(m as f64);
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros(xv.shape());
        for ni in 0..n {
            for ci in 0..c {
                let (a, b) = (gv[ci] * inv_std[ci], bv[ci] - gv[ci] * inv_std[ci] * mean[ci]);
                let range = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                for (o, &v) in out.data_mut()[range.clone()].iter_mut().zip(&xv.data()[range]) {
                    *o = a * v + b;
                }
            }
        }
        let unbiased = var.iter().map(|&v| v * F::of(m as f64 / (m - 1) as f64)).collect();
        self.record_bn_update(BnStatUpdate { running_mean, running_var, mean: mean.clone(), var: unbiased, momentum });
        Ok(self.push_op(out, &[x, gamma, beta], move |g, p, _| {
            let (xv, gv) = (p[0], p[1].data());
            let mut gx = Tensor::zeros(xv.shape());
            let mut ggamma = Tensor::zeros(&[c]);
            let mut gbeta = Tensor::zeros(&[c]);
            for ci in 0..c {
                let mut sdy = F::zero();
                let mut sdyx = F::zero();
                for ni in 0..n {
                    let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                    for (&dy, &v) in g.data()[r.clone()].iter().zip(&xv.data()[r]) {
                        sdy += dy;
                        sdyx += dy * (v - mean[ci]) * inv_std[ci];
                    }
                }
                ggamma.data_mut()[ci] = sdyx;
                gbeta.data_mut()[ci] = sdy;
                let k = gv[ci] * inv_std[ci] / F::of(m as f64);
                let mf = F::of(m as f64);
                for ni in 0..n {
                    let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                    for ((o, &dy), &v) in gx.data_mut()[r.clone()].iter_mut().zip(&g.data()[r.clone()]).zip(&xv.data()[r]) {
                        let xhat = (v - mean[ci]) * inv_std[ci];
                        *o = k * (mf * dy - sdy - xhat * sdyx);
                    }
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        }))
    }

    /// Batch norm with fixed statistics: a per-channel affine map.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &Tensor<F>, var: &Tensor<F>, eps: F) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv_std: Vec<F> = var.data().iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mean = mean.data().to_vec();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros(self.value(x).shape());
        for ni in 0..n {
            for ci in 0..c {
                let (a, b) = (gv[ci] * inv_std[ci], bv[ci] - gv[ci] * inv_std[ci] * mean[ci]);
                let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                for (o, &v) in out.data_mut()[r.clone()].iter_mut().zip(&self.value(x).data()[r]) {
                    *o = a * v + b;
                }
            }
        }
        Ok(self.push_op(out, &[x, gamma, beta], move |g, p, _| {
            let (xv, gv) = (p[0], p[1].data());
            let mut gx = Tensor::zeros(xv.shape());
            let mut ggamma = Tensor::zeros(&[c]);
            let mut gbeta = Tensor::zeros(&[c]);
            for ni in 0..n {
                for ci in 0..c {
                    let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                    let a = gv[ci] * inv_std[ci];
                    for ((o, &dy), &v) in gx.data_mut()[r.clone()].iter_mut().zip(&g.data()[r.clone()]).zip(&xv.data()[r]) {
                        *o = a * dy;
                        ggamma.data_mut()[ci] += dy * (v - mean[ci]) * inv_std[ci];
                        gbeta.data_mut()[ci] += dy;
                    }
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        }))
    }

    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let in_shape = self.value(x).shape().to_vec();
        let out = kernels::bilinear_resize_forward(self.value(x), oh, ow)?;
        Ok(self.push_op(out, &[x], move |g, _, _| vec![Some(kernels::bilinear_resize_backward(g, &in_shape))]))
    }

    pub fn nearest_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let in_shape = self.value(x).shape().to_vec();
        let out = kernels::nearest_resize_forward(self.value(x), oh, ow)?;
        Ok(self.push_op(out, &[x], move |g, _, _| vec![Some(kernels::nearest_resize_backward(g, &in_shape))]))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, bins: usize) -> Result<Var> {
        let in_shape = self.value(x).shape().to_vec();
        let out = kernels::adaptive_avg_pool_forward(self.value(x), bins)?;
        Ok(self.push_op(out, &[x], move |g, _, _| vec![Some(kernels::adaptive_avg_pool_backward(g, &in_shape))]))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| LightError::shape("concat of nothing"))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut chans = Vec::with_capacity(xs.len());
        for x in xs {
            let (n2, c, h2, w2) = self.value(*x).dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(LightError::shape(format!("concat: {:?} vs {:?}", self.value(*x).shape(), self.value(*first).shape())));
            }
            chans.push(c);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        for ni in 0..n {
            let mut off = 0;
            for (x, &c) in xs.iter().zip(&chans) {
                let src = self.value(*x).sample(ni);
                out.data_mut()[(ni * total + off) * hw..(ni * total + off + c) * hw].copy_from_slice(src);
                off += c;
            }
        }
        Ok(self.push_op(out, xs, move |g, _, _| {
            let mut off = 0;
            chans
                .iter()
                .map(|&c| {
                    let mut gx = Tensor::zeros(&[n, c, h, w]);
                    for ni in 0..n {
                        gx.data_mut()[ni * c * hw..(ni + 1) * c * hw]
                            .copy_from_slice(&g.data()[(ni * total + off) * hw..(ni * total + off + c) * hw]);
                    }
                    off += c;
                    Some(gx)
                })
                .collect()
        }))
    }

    /// Transposed convolution whose stride equals its kernel size `s`, so the
    /// output taps never overlap: `x (N, C, H, W)`, `w (C, O, s, s)`, `b (O)`
    /// give `(N, O, sH, sW)`.
    pub fn conv_transpose_nonoverlap(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[0] != c || ws[2] != ws[3] || self.value(b).len() != ws[1] {
            return Err(LightError::shape(format!(
                "transposed conv: input {:?}, weight {:?}",
                self.value(x).shape(),
                ws
            )));
        }
        let (o, s) = (ws[1], ws[2]);
        let (oh, ow) = (h * s, wd * s);
        let hw = h * wd;
        let rows = o * s * s;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        let mut cols = vec![F::zero(); rows * hw];
        for ni in 0..n {
            // (O·s·s, HW) = Wᵀ (O·s·s, C) × X (C, HW)
            gemm(true, false, rows, hw, c, F::one(), self.value(w).data(), self.value(x).sample(ni), F::zero(), &mut cols);
            let dst = &mut out.data_mut()[ni * o * oh * ow..(ni + 1) * o * oh * ow];
            let bias = self.value(b).data();
            for oc in 0..o {
                for i in 0..s {
                    for j in 0..s {
                        let src = &cols[((oc * s + i) * s + j) * hw..][..hw];
                        for y in 0..h {
                            for xx in 0..wd {
                                dst[(oc * oh + y * s + i) * ow + xx * s + j] = src[y * wd + xx] + bias[oc];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push_op(out, &[x, w, b], move |g, p, _| {
            let mut gcols = vec![F::zero(); rows * hw];
            let mut gx = Tensor::zeros(&[n, c, h, wd]);
            let mut gw = Tensor::zeros(&[c, o, s, s]);
            let mut gb = Tensor::zeros(&[o]);
            for ni in 0..n {
                let src = &g.data()[ni * o * oh * ow..(ni + 1) * o * oh * ow];
                for oc in 0..o {
                    for i in 0..s {
                        for j in 0..s {
                            let dst = &mut gcols[((oc * s + i) * s + j) * hw..][..hw];
                            for y in 0..h {
                                for xx in 0..wd {
                                    let v = src[(oc * oh + y * s + i) * ow + xx * s + j];
                                    dst[y * wd + xx] = v;
                                    gb.data_mut()[oc] += v;
                                }
                            }
                        }
                    }
                }
                let xs = p[0].sample(ni);
                // dW (C, O·s·s) += X (C, HW) × Gᵀ (HW, O·s·s)
                gemm(false, true, c, rows, hw, F::one(), xs, &gcols, F::one(), gw.data_mut());
                // dX (C, HW) = W (C, O·s·s) × G (O·s·s, HW)
                let gxs = &mut gx.data_mut()[ni * c * hw..(ni + 1) * c * hw];
                gemm(false, false, c, hw, rows, F::one(), p[1].data(), &gcols, F::zero(), gxs);
            }
            vec![Some(gx), Some(gw), Some(gb)]
        }))
    }

    /// RoIAlign over pyramid levels; output `(R, C, out, out)`.
    pub fn roi_align(&mut self, levels: &[Var], rois: &[RoiRef], out: usize, sampling: SamplingRatio) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = levels.iter().map(|v| self.value(*v)).collect();
        let y = kernels::roi_align_forward(&vals, rois, out, sampling)?;
        let shapes: Vec<Vec<usize>> = vals.iter().map(|t| t.shape().to_vec()).collect();
        let rois = rois.to_vec();
        Ok(self.push_op(y, levels, move |g, _, _| {
            kernels::roi_align_backward(&shapes, &rois, out, sampling, g).into_iter().map(Some).collect()
        }))
    }

    /// `Σ_i gate_i ⊙ feature_i` over `(gate, feature)` pairs of identical shape.
    pub fn gated_sum(&mut self, pairs: &[(Var, Var)]) -> Result<Var> {
        let (m0, _) = *pairs.first().ok_or_else(|| LightError::shape("gated sum over no sources"))?;
        let shape = self.value(m0).shape().to_vec();
        let mut acc = Tensor::zeros(&shape);
        for (i, (m, f)) in pairs.iter().enumerate() {
            let (mv, fv) = (self.value(*m), self.value(*f));
            if mv.shape() != shape.as_slice() || fv.shape() != shape.as_slice() {
                return Err(LightError::shape(format!(
                    "source {}: gate {:?} / feature {:?} do not match {:?}",
                    i,
                    mv.shape(),
                    fv.shape(),
                    shape
                )));
            }
            for ((a, &mm), &ff) in acc.data_mut().iter_mut().zip(mv.data()).zip(fv.data()) {
                *a += mm * ff;
            }
        }
        let parents: Vec<Var> = pairs.iter().flat_map(|&(m, f)| [m, f]).collect();
        Ok(self.push_op(acc, &parents, |g, p, _| {
            p.chunks(2)
                .flat_map(|mf| [Some(g.zip_map(mf[1], |g, f| g * f)), Some(g.zip_map(mf[0], |g, m| g * m))])
                .collect()
        }))
    }

    /// `(1 + m) ⊙ target + (1 − m) ⊙ agg`.
    pub fn gated_fusion(&mut self, target: Var, gate: Var, agg: Var) -> Result<Var> {
        same_shape("gated fusion (gate)", self.value(target), self.value(gate))?;
        same_shape("gated fusion (aggregate)", self.value(target), self.value(agg))?;
        let (t, m, a) = (self.value(target), self.value(gate), self.value(agg));
        let data = t
            .data()
            .iter()
            .zip(m.data())
            .zip(a.data())
            .map(|((&t, &m), &a)| (F::one() + m) * t + (F::one() - m) * a)
            .collect();
        let out = Tensor::from_vec(t.shape(), data)?;
        Ok(self.push_op(out, &[target, gate, agg], |g, p, _| {
            let (t, m, a) = (p[0], p[1], p[2]);
            vec![
                Some(g.zip_map(m, |g, m| g * (F::one() + m))),
                Some(Tensor::from_fn(g.shape(), |i| g.data()[i] * (t.data()[i] - a.data()[i]))),
                Some(g.zip_map(m, |g, m| g * (F::one() - m))),
            ]
        }))
    }

    /// `Σ w · BCE(sigmoid(logit), target)` as a scalar, computed stably from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<F>, weights: &Tensor<F>) -> Result<Var> {
        same_shape("bce targets", self.value(logits), targets)?;
        same_shape("bce weights", self.value(logits), weights)?;
        let mut s = F::zero();
        for ((&x, &t), &w) in self.value(logits).data().iter().zip(targets.data()).zip(weights.data()) {
            if w != F::zero() {
                s += w * bce_logit(x, t);
            }
        }
        let (t, w) = (targets.clone(), weights.clone());
        Ok(self.push_op(Tensor::scalar(s), &[logits], move |g, p, _| {
            let go = g.data()[0];
            vec![Some(Tensor::from_fn(p[0].shape(), |i| {
                go * w.data()[i] * (sigmoid(p[0].data()[i]) - t.data()[i])
            }))]
        }))
    }

    /// `Σ w · smoothL1_β(pred − target)` as a scalar.
    pub fn smooth_l1(&mut self, pred: Var, targets: &Tensor<F>, weights: &Tensor<F>, beta: F) -> Result<Var> {
        same_shape("smooth-l1 targets", self.value(pred), targets)?;
        same_shape("smooth-l1 weights", self.value(pred), weights)?;
        let mut s = F::zero();
        for ((&p, &t), &w) in self.value(pred).data().iter().zip(targets.data()).zip(weights.data()) {
            if w != F::zero() {
                s += w * smooth_l1_value(p - t, beta);
            }
        }
        let (t, w) = (targets.clone(), weights.clone());
        Ok(self.push_op(Tensor::scalar(s), &[pred], move |g, p, _| {
            let go = g.data()[0];
            vec![Some(Tensor::from_fn(p[0].shape(), |i| {
                go * w.data()[i] * smooth_l1_slope(p[0].data()[i] - t.data()[i], beta)
            }))]
        }))
    }
}

/// Binary cross-entropy of `sigmoid(x)` against `t`, from the logit.
#[inline]
pub fn bce_logit<F: Scalar>(x: F, t: F) -> F {
    x.max(F::zero()) - x * t + (F::one() + (-x.abs()).exp()).ln()
}

#[inline]
pub fn smooth_l1_value<F: Scalar>(e: F, beta: F) -> F {
    let a = e.abs();
    if a < beta {
        F::of(0.5) * e * e / beta
    } else {
        a - F::of(0.5) * beta
    }
}

#[inline]
pub fn smooth_l1_slope<F: Scalar>(e: F, beta: F) -> F {
    if e.abs() < beta {
        e / beta
    } else if e > F::zero() {
        F::one()
    } else {
        -F::one()
    }
}

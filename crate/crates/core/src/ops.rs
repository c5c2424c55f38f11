//! Differentiable tensor primitives on `(batch, channels, height, width)`
//! feature maps, plus a fused spatial self-attention kernel.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, D};
use num_traits::Float;

use crate::error::{FuseError, Result};

pub fn dims4(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    x.dims4()
        .map_err(|_| FuseError::shape(format!("expected a 4-d feature map, got {:?}", x.dims())))
}

/// Layer normalization across channels, independently at every pixel.
pub fn layer_norm_channels(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    let mean = x.mean_keepdim(1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed
        .broadcast_mul(&weight.reshape((1, c, 1, 1))?)?
        .broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

/// Pointwise convolution. `weight` is `(out, in)`.
pub fn conv1x1(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, c, h, w) = dims4(x)?;
    let (out, inp) = weight.dims2()?;
    if inp != c {
        return Err(FuseError::shape(format!(
            "pointwise conv expects {inp} input channels, got {c}"
        )));
    }
    let y = weight.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
    let y = match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, out, 1))?)?,
        None => y,
    };
    Ok(y.reshape((b, out, h, w))?)
}

/// Dense 3x3 convolution with zero "same" padding. `weight` is `(out, in, 3, 3)`.
pub fn conv3x3(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = x.conv2d(weight, 1, 1, 1, 1)?;
    Ok(match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, bias.elem_count(), 1, 1))?)?,
        None => y,
    })
}

/// Depthwise 3x3 convolution with zero "same" padding. `weight` is `(C, 9)`
/// in row-major kernel order.
pub fn depthwise3x3(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (_, c, _, _) = dims4(x)?;
    if weight.dims2()? != (c, 9) {
        return Err(FuseError::shape(format!(
            "depthwise weight must be ({c}, 9), got {:?}",
            weight.dims()
        )));
    }
    let y = x.contiguous()?.apply_op2(&weight.contiguous()?, Depthwise3x3)?;
    Ok(match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, c, 1, 1))?)?,
        None => y,
    })
}

struct Depthwise3x3;

/// Calls `f(tap, dy, dx, rows, cols)` with the output rows and columns for
/// which the tap's input pixel lies inside the image.
#[inline]
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, isize, isize, std::ops::Range<usize>, std::ops::Range<usize>)) {
    for tap in 0..9 {
        let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
        let rows = (if dy < 0 { 1 } else { 0 }).min(h)..(if dy > 0 { h.saturating_sub(1) } else { h });
        let cols = (if dx < 0 { 1 } else { 0 }).min(w)..(if dx > 0 { w.saturating_sub(1) } else { w });
        f(tap, dy, dx, rows, cols);
    }
}

fn depthwise_forward<T: Float + AddAssign>(x: &[T], k: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut y = vec![T::zero(); b * c * hw];
    for plane in 0..b * c {
        let ch = plane % c;
        let xp = &x[plane * hw..(plane + 1) * hw];
        let yp = &mut y[plane * hw..(plane + 1) * hw];
        for_each_tap(h, w, |tap, dy, dx, rows, cols| {
            let kv = k[ch * 9 + tap];
            for i in rows {
                let src = ((i as isize + dy) as usize) * w;
                let (lo, hi) = (cols.start, cols.end);
                let yrow = &mut yp[i * w + lo..i * w + hi];
                let xrow = &xp[(src as isize + lo as isize + dx) as usize..(src as isize + hi as isize + dx) as usize];
                for (o, &v) in yrow.iter_mut().zip(xrow) {
                    *o += kv * v;
                }
            }
        });
    }
    y
}

fn depthwise_backward<T: Float + AddAssign>(
    x: &[T],
    k: &[T],
    g: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let mut gx = vec![T::zero(); b * c * hw];
    let mut gk = vec![T::zero(); c * 9];
    for plane in 0..b * c {
        let ch = plane % c;
        let xp = &x[plane * hw..(plane + 1) * hw];
        let gp = &g[plane * hw..(plane + 1) * hw];
        let gxp = &mut gx[plane * hw..(plane + 1) * hw];
        for_each_tap(h, w, |tap, dy, dx, rows, cols| {
            let kv = k[ch * 9 + tap];
            let mut acc = T::zero();
            for i in rows {
                let src = ((i as isize + dy) as usize) * w;
                let (lo, hi) = (cols.start, cols.end);
                let grow = &gp[i * w + lo..i * w + hi];
                let s0 = (src as isize + lo as isize + dx) as usize;
                let s1 = (src as isize + hi as isize + dx) as usize;
                for (&gv, &xv) in grow.iter().zip(&xp[s0..s1]) {
                    acc += gv * xv;
                }
                for (o, &gv) in gxp[s0..s1].iter_mut().zip(grow) {
                    *o += kv * gv;
                }
            }
            gk[ch * 9 + tap] += acc;
        });
    }
    (gx, gk)
}

impl CustomOp2 for Depthwise3x3 {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(depthwise_forward(
                contiguous_slice::<f32>(s1, l1)?,
                contiguous_slice::<f32>(s2, l2)?,
                b,
                c,
                h,
                w,
            )),
            CpuStorage::F64(_) => CpuStorage::F64(depthwise_forward(
                contiguous_slice::<f64>(s1, l1)?,
                contiguous_slice::<f64>(s2, l2)?,
                b,
                c,
                h,
                w,
            )),
            _ => candle_core::bail!("depthwise conv supports f32 and f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, k: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let dev = x.device();
        let flat = |t: &Tensor| t.detach().flatten_all();
        let (gx, gk) = match x.dtype() {
            DType::F32 => {
                let (gx, gk) = depthwise_backward(
                    &flat(x)?.to_vec1::<f32>()?,
                    &flat(k)?.to_vec1::<f32>()?,
                    &flat(grad)?.to_vec1::<f32>()?,
                    b,
                    c,
                    h,
                    w,
                );
                (Tensor::from_vec(gx, (b, c, h, w), dev)?, Tensor::from_vec(gk, (c, 9), dev)?)
            }
            DType::F64 => {
                let (gx, gk) = depthwise_backward(
                    &flat(x)?.to_vec1::<f64>()?,
                    &flat(k)?.to_vec1::<f64>()?,
                    &flat(grad)?.to_vec1::<f64>()?,
                    b,
                    c,
                    h,
                    w,
                );
                (Tensor::from_vec(gx, (b, c, h, w), dev)?, Tensor::from_vec(gk, (c, 9), dev)?)
            }
            dt => candle_core::bail!("depthwise conv: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gk)))
    }
}

/// Reflect-pads height and width by one pixel (edge pixel not repeated).
pub fn reflect_pad1(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = dims4(x)?;
    if h < 2 || w < 2 {
        return Err(FuseError::shape(format!(
            "reflect padding needs at least 2x2 input, got {h}x{w}"
        )));
    }
    let x = Tensor::cat(&[x.narrow(2, 1, 1)?, x.clone(), x.narrow(2, h - 2, 1)?], 2)?;
    Ok(Tensor::cat(
        &[x.narrow(3, 1, 1)?, x.clone(), x.narrow(3, w - 2, 1)?],
        3,
    )?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Logistic function written through tanh so both tails stay finite under
/// differentiation.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Normalizes along the last axis: `x / sqrt(sum(x^2) + 1e-12)`.
pub fn l2_normalize_last(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Softmax attention over spatial positions.
///
/// `q`, `k`, `v` are `(groups, head_dim, tokens)` with tokens laid out
/// contiguously, which is the layout a `(B, C, H*W)` feature map already
/// has. The `tokens x tokens` score matrix is never materialized: rows are
/// formed one at a time and recomputed during the backward pass.
pub fn spatial_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    let (g, d, n) = q.dims3()?;
    for t in [k, v] {
        if t.dims3()? != (g, d, n) {
            return Err(FuseError::shape(format!(
                "attention operands disagree: {:?} vs {:?}",
                q.dims(),
                t.dims()
            )));
        }
    }
    let op = SpatialAttention { scale };
    Ok(q.contiguous()?
        .apply_op3(&k.contiguous()?, &v.contiguous()?, op)?)
}

struct SpatialAttention {
    scale: f64,
}

fn contiguous_slice<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom op requires contiguous operands"),
    }
}

fn attention_forward<T: Float + AddAssign>(q: &[T], k: &[T], v: &[T], g: usize, d: usize, n: usize, scale: T) -> Vec<T> {
    let mut out = vec![T::zero(); g * d * n];
    let mut s = vec![T::zero(); n];
    for grp in 0..g {
        let base = grp * d * n;
        let (q, k, v) = (&q[base..base + d * n], &k[base..base + d * n], &v[base..base + d * n]);
        let o = &mut out[base..base + d * n];
        for i in 0..n {
            softmax_row(q, k, d, n, i, scale, &mut s);
            for dd in 0..d {
                o[dd * n + i] = dot(&s, &v[dd * n..(dd + 1) * n]);
            }
        }
    }
    out
}

#[inline]
fn dot<T: Float + AddAssign>(a: &[T], b: &[T]) -> T {
    // four partial sums so the loop vectorizes without reassociation
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
fn axpy<T: Float + AddAssign>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Writes the normalized attention row `i` into `p`.
fn softmax_row<T: Float + AddAssign>(q: &[T], k: &[T], d: usize, n: usize, i: usize, scale: T, p: &mut [T]) {
    p.iter_mut().for_each(|x| *x = T::zero());
    for dd in 0..d {
        let qi = q[dd * n + i] * scale;
        axpy(qi, &k[dd * n..(dd + 1) * n], p);
    }
    let m = p.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in p.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    let inv = sum.recip();
    p.iter_mut().for_each(|x| *x = *x * inv);
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Float + AddAssign>(
    q: &[T],
    k: &[T],
    v: &[T],
    o: &[T],
    go: &[T],
    g: usize,
    d: usize,
    n: usize,
    scale: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let len = g * d * n;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]);
    let mut p = vec![T::zero(); n];
    let mut ds = vec![T::zero(); n];
    for grp in 0..g {
        let r = grp * d * n..(grp + 1) * d * n;
        let (q, k, v, o, go) = (&q[r.clone()], &k[r.clone()], &v[r.clone()], &o[r.clone()], &go[r.clone()]);
        let dq = &mut dq[r.clone()];
        let dk = &mut dk[r.clone()];
        let dv = &mut dv[r];
        for i in 0..n {
            softmax_row(q, k, d, n, i, scale, &mut p);
            let mut delta = T::zero();
            for dd in 0..d {
                delta += go[dd * n + i] * o[dd * n + i];
            }
            ds.iter_mut().for_each(|x| *x = T::zero());
            for dd in 0..d {
                let gi = go[dd * n + i];
                axpy(gi, &v[dd * n..(dd + 1) * n], &mut ds);
                axpy(gi, &p, &mut dv[dd * n..(dd + 1) * n]);
            }
            for (x, &pj) in ds.iter_mut().zip(&p) {
                *x = pj * (*x - delta) * scale;
            }
            for dd in 0..d {
                dq[dd * n + i] = dot(&ds, &k[dd * n..(dd + 1) * n]);
                axpy(q[dd * n + i], &ds, &mut dk[dd * n..(dd + 1) * n]);
            }
        }
    }
    (dq, dk, dv)
}

impl CustomOp3 for SpatialAttention {
    fn name(&self) -> &'static str {
        "spatial-attention"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (g, d, n) = l1.shape().dims3()?;
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(attention_forward(
                contiguous_slice::<f32>(s1, l1)?,
                contiguous_slice::<f32>(s2, l2)?,
                contiguous_slice::<f32>(s3, l3)?,
                g,
                d,
                n,
                self.scale as f32,
            )),
            CpuStorage::F64(_) => CpuStorage::F64(attention_forward(
                contiguous_slice::<f64>(s1, l1)?,
                contiguous_slice::<f64>(s2, l2)?,
                contiguous_slice::<f64>(s3, l3)?,
                g,
                d,
                n,
                self.scale,
            )),
            _ => candle_core::bail!("spatial attention supports f32 and f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (g, d, n) = q.dims3()?;
        let dev = q.device();
        let flat = |t: &Tensor| t.detach().flatten_all();
        let (dq, dk, dv) = match q.dtype() {
            DType::F32 => {
                let (a, b, c) = attention_backward(
                    &flat(q)?.to_vec1::<f32>()?,
                    &flat(k)?.to_vec1::<f32>()?,
                    &flat(v)?.to_vec1::<f32>()?,
                    &flat(res)?.to_vec1::<f32>()?,
                    &flat(grad_res)?.to_vec1::<f32>()?,
                    g,
                    d,
                    n,
                    self.scale as f32,
                );
                (
                    Tensor::from_vec(a, (g, d, n), dev)?,
                    Tensor::from_vec(b, (g, d, n), dev)?,
                    Tensor::from_vec(c, (g, d, n), dev)?,
                )
            }
            DType::F64 => {
                let (a, b, c) = attention_backward(
                    &flat(q)?.to_vec1::<f64>()?,
                    &flat(k)?.to_vec1::<f64>()?,
                    &flat(v)?.to_vec1::<f64>()?,
                    &flat(res)?.to_vec1::<f64>()?,
                    &flat(grad_res)?.to_vec1::<f64>()?,
                    g,
                    d,
                    n,
                    self.scale,
                );
                (
                    Tensor::from_vec(a, (g, d, n), dev)?,
                    Tensor::from_vec(b, (g, d, n), dev)?,
                    Tensor::from_vec(c, (g, d, n), dev)?,
                )
            }
            dt => candle_core::bail!("spatial attention: unsupported dtype {dt:?}"),
        };
        Ok((Some(dq), Some(dk), Some(dv)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    /// Attention through ordinary differentiable tensor ops.
    fn attention_composed(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Tensor {
        let scores = (q.transpose(1, 2).unwrap().matmul(k).unwrap() * scale).unwrap();
        let p = softmax_last(&scores).unwrap();
        v.matmul(&p.transpose(1, 2).unwrap()).unwrap()
    }

    #[test]
    fn fused_attention_matches_composed_forward_and_backward() {
        let shape = [3, 4, 10];
        let q = Var::from_tensor(&rand_t(&shape, 1)).unwrap();
        let k = Var::from_tensor(&rand_t(&shape, 2)).unwrap();
        let v = Var::from_tensor(&rand_t(&shape, 3)).unwrap();
        let w = rand_t(&shape, 4);
        let fused = spatial_attention(&q, &k, &v, 0.5).unwrap();
        let composed = attention_composed(&q, &k, &v, 0.5);
        let diff = (&fused - &composed).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);

        let g1 = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (composed * &w).unwrap().sum_all().unwrap().backward().unwrap();
        for var in [&q, &k, &v] {
            let a = g1.get(var).unwrap();
            let b = g2.get(var).unwrap();
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-12, "grad diff {d}");
        }
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let x = rand_t(&[2, 3, 5, 6], 9);
        let w = rand_t(&[3, 9], 10);
        let ours = depthwise3x3(&x, &w, None).unwrap();
        let reference = x.conv2d(&w.reshape((3, 1, 3, 3)).unwrap(), 1, 1, 1, 3).unwrap();
        let d = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn depthwise_gradients_match_grouped_conv() {
        let w = Var::from_tensor(&rand_t(&[3, 9], 14)).unwrap();
        for shape in [[2, 3, 5, 1], [1, 3, 4, 7]] {
            let xv = Var::from_tensor(&rand_t(&shape, 16)).unwrap();
            let up = rand_t(&shape, 17);
            let ours = (depthwise3x3(xv.as_tensor(), w.as_tensor(), None).unwrap() * &up).unwrap().sum_all().unwrap();
            let g1 = ours.backward().unwrap();
            let reference = (xv
                .as_tensor()
                .conv2d(&w.as_tensor().reshape((3, 1, 3, 3)).unwrap(), 1, 1, 1, 3)
                .unwrap()
                * &up)
                .unwrap()
                .sum_all()
                .unwrap();
            let g2 = reference.backward().unwrap();
            for var in [&xv, &w] {
                let a = g1.get(var.as_tensor()).unwrap();
                let b = g2.get(var.as_tensor()).unwrap();
                let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(d < 1e-12, "{shape:?}: {d}");
            }
        }
    }

    #[test]
    fn conv1x1_matches_dense_conv() {
        let x = rand_t(&[2, 3, 4, 4], 11);
        let w = rand_t(&[5, 3], 12);
        let ours = conv1x1(&x, &w, None).unwrap();
        let reference = x.conv2d(&w.reshape((5, 3, 1, 1)).unwrap(), 0, 1, 1, 1).unwrap();
        let d = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn reflect_pad_mirrors_without_repeating_edge() {
        let x = Tensor::arange(0f64, 6.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 3)).unwrap();
        let p = reflect_pad1(&x).unwrap();
        let rows: Vec<Vec<f64>> = p.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(rows[1], vec![1.0, 0.0, 1.0, 2.0, 1.0]);
        assert_eq!(rows[0], rows[2]);
        assert_eq!(rows[3], rows[1]);
    }

    #[test]
    fn sigmoid_is_finite_in_both_tails() {
        let x = Var::from_tensor(&Tensor::new(&[-1e4f32, 0.0, 1e4], &Device::Cpu).unwrap()).unwrap();
        let y = sigmoid(&x).unwrap();
        let vals = y.to_vec1::<f32>().unwrap();
        assert_eq!(vals, vec![0.0, 0.5, 1.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gv = g.get(&x).unwrap().to_vec1::<f32>().unwrap();
        assert!(gv.iter().all(|v| v.is_finite()));
        assert!((gv[1] - 0.25).abs() < 1e-6);
    }
}

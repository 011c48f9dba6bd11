//! Pure array functions shared by the model, the sampler and the tests.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_axis<S: Scalar>(t: &Tensor<S>, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::arg(format!(
            "axis {axis} out of range for rank-{} tensor",
            t.rank()
        )));
    }
    Ok(())
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<S: Scalar>(t: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    check_axis(t, axis)?;
    let (outer, len, inner) = t.axis_split(axis);
    let mut out = t.clone();
    let src = t.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            let mut m = S::neg_infinity();
            for i in 0..len {
                m = m.max(src[base + i * inner]);
            }
            let mut z = S::zero();
            for i in 0..len {
                let e = (src[base + i * inner] - m).exp();
                dst[base + i * inner] = e;
                z += e;
            }
            for i in 0..len {
                dst[base + i * inner] /= z;
            }
        }
    }
    Ok(out)
}

/// Scales every slice along `axis` to unit Euclidean norm. Slices whose
/// norm is below `eps` are returned unchanged.
pub fn l2_normalize<S: Scalar>(t: &Tensor<S>, axis: usize, eps: S) -> Result<Tensor<S>> {
    check_axis(t, axis)?;
    let (outer, len, inner) = t.axis_split(axis);
    let mut out = t.clone();
    let dst = out.data_mut();
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            let mut ss = S::zero();
            for i in 0..len {
                let v = dst[base + i * inner];
                ss += v * v;
            }
            let norm = ss.sqrt();
            if norm < eps {
                continue;
            }
            for i in 0..len {
                dst[base + i * inner] /= norm;
            }
        }
    }
    Ok(out)
}

/// Align-corners source coordinate and lerp weight for output index `i`.
#[inline]
pub(crate) fn align_corners_coord(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    if dst == 1 || src == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
    let lo = (pos.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resize of a `[B, K, H, W]` map to `[B, K, h, w]` using the
/// align-corners convention.
pub fn bilinear_resize<S: Scalar>(map: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    if map.rank() != 4 {
        return Err(Error::arg(format!(
            "bilinear_resize expects [B,K,H,W], got {:?}",
            map.shape()
        )));
    }
    let (b, k, sh, sw) = (map.shape()[0], map.shape()[1], map.shape()[2], map.shape()[3]);
    if h == 0 || w == 0 || sh == 0 || sw == 0 {
        return Err(Error::arg("bilinear_resize extents must be >= 1"));
    }
    if h == sh && w == sw {
        return Ok(map.clone());
    }
    let ys: Vec<_> = (0..h).map(|y| align_corners_coord(y, sh, h)).collect();
    let xs: Vec<_> = (0..w).map(|x| align_corners_coord(x, sw, w)).collect();
    let src = map.data();
    let mut out = Vec::with_capacity(b * k * h * w);
    for plane in 0..b * k {
        let p = &src[plane * sh * sw..(plane + 1) * sh * sw];
        for &(y0, y1, fy) in &ys {
            let fy = S::lit(fy);
            for &(x0, x1, fx) in &xs {
                let fx = S::lit(fx);
                let top = p[y0 * sw + x0] + fx * (p[y0 * sw + x1] - p[y0 * sw + x0]);
                let bot = p[y1 * sw + x0] + fx * (p[y1 * sw + x1] - p[y1 * sw + x0]);
                out.push(top + fy * (bot - top));
            }
        }
    }
    Tensor::new(vec![b, k, h, w], out)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<S, F>(f: F, x: &Tensor<S>, eps: S) -> Result<Tensor<S>>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> S,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    let two = S::lit(2.0);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while differencing element {i}"
            )));
        }
        grad.data_mut()[i] = (fp - fm) / (two * eps);
    }
    Ok(grad)
}

/// `[m, k] x [k, n]` matrix product.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::arg(format!(
            "matmul shape mismatch {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![S::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

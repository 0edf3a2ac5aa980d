//! Pointwise and per-position kernels: GELU, channel layer norm and
//! per-channel scaling.

use crate::error::{invalid, shape_err};
use crate::tensor::{Real, Tensor};
use crate::Result;

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn erf(x: Real) -> Real {
    libm::erf(x as f64) as Real
}

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu_scalar(x: Real) -> Real {
    0.5 * x * (1.0 + erf(x * INV_SQRT2 as Real))
}

/// Derivative of [`gelu_scalar`].
#[inline]
pub fn gelu_grad_scalar(x: Real) -> Real {
    let cdf = 0.5 * (1.0 + erf(x * INV_SQRT2 as Real));
    let pdf = INV_SQRT_2PI as Real * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_backward(x: &Tensor, dout: &Tensor) -> Result<Tensor> {
    if x.shape() != dout.shape() {
        return Err(shape_err!("gelu gradient shape {:?} vs input {:?}", dout.shape(), x.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&v, &g)| g * gelu_grad_scalar(v))
        .collect();
    Tensor::new(x.shape(), data)
}

/// Saved state of a layer norm forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Tensor,
    /// `1 / sqrt(var + eps)` for every (sample, position).
    pub rstd: Vec<Real>,
}

fn nc_p(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 3 {
        return Err(shape_err!("expected (N, C, spatial..), got {:?}", x.shape()));
    }
    if x.numel() == 0 {
        return Err(shape_err!("empty tensor {:?}", x.shape()));
    }
    let n = x.shape()[0];
    let c = x.shape()[1];
    Ok((n, c, x.shape()[2..].iter().product()))
}

fn check_channel_vec(v: &Tensor, c: usize, what: &str) -> Result<()> {
    if v.shape() != [c] {
        return Err(shape_err!("{what} shape {:?}, expected [{c}]", v.shape()));
    }
    Ok(())
}

/// Layer norm over the channel axis at every spatial position, followed by a
/// per-channel affine map.
///
/// Each position is shifted by its first channel before the moments are
/// taken, so channel-constant inputs normalize to exactly zero.
pub fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor, eps: Real) -> Result<(Tensor, NormCache)> {
    let (n, c, p) = nc_p(x)?;
    check_channel_vec(scale, c, "layer norm scale")?;
    check_channel_vec(shift, c, "layer norm shift")?;
    if !(eps > 0.0) {
        return Err(invalid!("layer norm eps must be positive, got {eps}"));
    }
    let inv_c = 1.0 / c as Real;
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut rstd = vec![0.0; n * p];
    let mut mean = vec![0.0; p];
    let mut var = vec![0.0; p];
    for s in 0..n {
        let xs = &x.data()[s * c * p..(s + 1) * c * p];
        let first = &xs[..p];
        mean.iter_mut().for_each(|v| *v = 0.0);
        var.iter_mut().for_each(|v| *v = 0.0);
        for ch in xs.chunks(p) {
            for ((m, &v), &f) in mean.iter_mut().zip(ch).zip(first) {
                *m += v - f;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        for ch in xs.chunks(p) {
            for (((q, &v), &f), &m) in var.iter_mut().zip(ch).zip(first).zip(&mean) {
                let d = v - f - m;
                *q += d * d;
            }
        }
        let rs = &mut rstd[s * p..(s + 1) * p];
        for (r, &q) in rs.iter_mut().zip(&var) {
            *r = 1.0 / (q * inv_c + eps).sqrt();
        }
        let hs = &mut xhat.data_mut()[s * c * p..(s + 1) * c * p];
        for (hc, xc) in hs.chunks_mut(p).zip(xs.chunks(p)) {
            for ((((h, &v), &f), &m), &r) in hc.iter_mut().zip(xc).zip(first).zip(&mean).zip(rs.iter()) {
                *h = (v - f - m) * r;
            }
        }
        let ys = &mut y.data_mut()[s * c * p..(s + 1) * c * p];
        for (ch, (yc, hc)) in ys.chunks_mut(p).zip(hs.chunks(p)).enumerate() {
            let (g, b) = (scale.data()[ch], shift.data()[ch]);
            for (o, &h) in yc.iter_mut().zip(hc) {
                *o = h * g + b;
            }
        }
    }
    Ok((y, NormCache { xhat, rstd }))
}

/// Gradients of [`layer_norm`] with respect to input, scale and shift.
pub fn layer_norm_backward(
    cache: &NormCache,
    scale: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, p) = nc_p(&cache.xhat)?;
    if dout.shape() != cache.xhat.shape() {
        return Err(shape_err!("layer norm gradient shape {:?} vs {:?}", dout.shape(), cache.xhat.shape()));
    }
    let inv_c = 1.0 / c as Real;
    let mut dx = Tensor::zeros(dout.shape());
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    let mut m1 = vec![0.0; p];
    let mut m2 = vec![0.0; p];
    for s in 0..n {
        let range = s * c * p..(s + 1) * c * p;
        let hs = &cache.xhat.data()[range.clone()];
        let ds = &dout.data()[range.clone()];
        m1.iter_mut().for_each(|v| *v = 0.0);
        m2.iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..c {
            let g = scale.data()[ch];
            let hc = &hs[ch * p..(ch + 1) * p];
            let dc = &ds[ch * p..(ch + 1) * p];
            let mut a = 0.0;
            let mut b = 0.0;
            for i in 0..p {
                let dh = dc[i] * g;
                m1[i] += dh;
                m2[i] += dh * hc[i];
                a += dc[i] * hc[i];
                b += dc[i];
            }
            dscale[ch] += a;
            dshift[ch] += b;
        }
        let rs = &cache.rstd[s * p..(s + 1) * p];
        let dxs = &mut dx.data_mut()[range];
        for ch in 0..c {
            let g = scale.data()[ch];
            let hc = &hs[ch * p..(ch + 1) * p];
            let dc = &ds[ch * p..(ch + 1) * p];
            let oc = &mut dxs[ch * p..(ch + 1) * p];
            for i in 0..p {
                oc[i] = rs[i] * (dc[i] * g - inv_c * m1[i] - hc[i] * inv_c * m2[i]);
            }
        }
    }
    Ok((dx, Tensor::new(&[c], dscale)?, Tensor::new(&[c], dshift)?))
}

/// `y[n, c, ..] = gamma[c] * x[n, c, ..]`.
pub fn scale_channels(x: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    let (_, c, p) = nc_p(x)?;
    check_channel_vec(gamma, c, "channel scale")?;
    let mut y = x.clone();
    for (i, chunk) in y.data_mut().chunks_mut(p.max(1)).enumerate() {
        let g = gamma.data()[i % c];
        chunk.iter_mut().for_each(|v| *v *= g);
    }
    Ok(y)
}

pub fn scale_channels_backward(x: &Tensor, gamma: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, c, p) = nc_p(x)?;
    if dout.shape() != x.shape() {
        return Err(shape_err!("channel scale gradient shape {:?} vs {:?}", dout.shape(), x.shape()));
    }
    let dx = scale_channels(dout, gamma)?;
    let mut dg = vec![0.0; c];
    for (i, (xc, dc)) in x.data().chunks(p.max(1)).zip(dout.data().chunks(p.max(1))).enumerate() {
        dg[i % c] += xc.iter().zip(dc).map(|(a, b)| a * b).sum::<Real>();
    }
    Ok((dx, Tensor::new(&[c], dg)?))
}

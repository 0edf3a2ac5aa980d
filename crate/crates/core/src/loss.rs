//! Weighted soft-Dice plus cross-entropy segmentation loss.

use crate::error::{invalid, shape_err};
use crate::tensor::{LabelMap, Real, Tensor};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub dice_weight: Real,
    pub ce_weight: Real,
    /// Smoothing term added to numerator and denominator of every class Dice.
    pub eps: Real,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_weight: 0.6,
            ce_weight: 0.4,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: Real,
    /// `1 - mean soft Dice` over all classes.
    pub dice: Real,
    /// Mean cross-entropy per voxel.
    pub ce: Real,
}

fn check(logits: &Tensor, labels: &LabelMap) -> Result<(usize, usize, usize)> {
    if logits.rank() < 3 {
        return Err(shape_err!("logits must be (N, K, spatial..), got {:?}", logits.shape()));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut expect = vec![n];
    expect.extend_from_slice(&logits.shape()[2..]);
    if labels.shape() != expect.as_slice() {
        return Err(shape_err!("labels {:?} do not match logits {:?}", labels.shape(), logits.shape()));
    }
    if let Some(m) = labels.max_label() {
        if m as usize >= k {
            return Err(invalid!("label {m} out of range for {k} classes"));
        }
    }
    Ok((n, k, logits.shape()[2..].iter().product()))
}

/// Softmax over the class axis.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() < 2 {
        return Err(shape_err!("softmax needs a class axis, got {:?}", logits.shape()));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let p: usize = logits.shape()[2..].iter().product();
    let mut out = Tensor::zeros(logits.shape());
    let mut mx = vec![0.0; p];
    let mut den = vec![0.0; p];
    for s in 0..n {
        let z = &logits.data()[s * k * p..(s + 1) * k * p];
        let o = &mut out.data_mut()[s * k * p..(s + 1) * k * p];
        mx.iter_mut().for_each(|v| *v = Real::NEG_INFINITY);
        for zc in z.chunks(p) {
            for (m, &v) in mx.iter_mut().zip(zc) {
                *m = m.max(v);
            }
        }
        den.iter_mut().for_each(|v| *v = 0.0);
        for (oc, zc) in o.chunks_mut(p).zip(z.chunks(p)) {
            for (((e, &v), &m), d) in oc.iter_mut().zip(zc).zip(&mx).zip(den.iter_mut()) {
                *e = (v - m).exp();
                *d += *e;
            }
        }
        for oc in o.chunks_mut(p) {
            for (e, &d) in oc.iter_mut().zip(&den) {
                *e /= d;
            }
        }
    }
    Ok(out)
}

/// Per-class sums `(sum p*g, sum p, sum g)` over the whole batch.
fn class_sums(probs: &Tensor, labels: &LabelMap, n: usize, k: usize, p: usize) -> Vec<[Real; 3]> {
    let mut sums = vec![[0.0; 3]; k];
    for s in 0..n {
        let lab = &labels.data()[s * p..(s + 1) * p];
        for (c, sc) in sums.iter_mut().enumerate() {
            let pc = &probs.data()[(s * k + c) * p..(s * k + c + 1) * p];
            for (&v, &l) in pc.iter().zip(lab) {
                sc[1] += v;
                if l as usize == c {
                    sc[0] += v;
                    sc[2] += 1.0;
                }
            }
        }
    }
    sums
}

/// Loss value and the class probabilities it was computed from.
pub fn dice_ce(logits: &Tensor, labels: &LabelMap, cfg: &LossConfig) -> Result<(LossValue, Tensor)> {
    let (n, k, p) = check(logits, labels)?;
    let probs = softmax_channels(logits)?;
    let sums = class_sums(&probs, labels, n, k, p);
    let dice_mean = sums
        .iter()
        .map(|[i, ps, gs]| (2.0 * i + cfg.eps) / (ps + gs + cfg.eps))
        .sum::<Real>()
        / k as Real;
    let mut ce = 0.0;
    for s in 0..n {
        for (v, &l) in labels.data()[s * p..(s + 1) * p].iter().enumerate() {
            let pr = probs.data()[(s * k + l as usize) * p + v];
            ce -= pr.max(Real::MIN_POSITIVE).ln();
        }
    }
    ce /= (n * p) as Real;
    let dice = 1.0 - dice_mean;
    let total = cfg.dice_weight * dice + cfg.ce_weight * ce;
    Ok((LossValue { total, dice, ce }, probs))
}

/// Gradient of the total loss with respect to the logits, scaled by `upstream`.
pub fn dice_ce_backward(probs: &Tensor, labels: &LabelMap, cfg: &LossConfig, upstream: Real) -> Result<Tensor> {
    let (n, k, p) = check(probs, labels)?;
    let sums = class_sums(probs, labels, n, k, p);
    // dL_dice / dp_c(v) = -(2 g_c(v) - d_c) / (K (P_c + G_c + eps))
    let coef: Vec<(Real, Real)> = sums
        .iter()
        .map(|[i, ps, gs]| {
            let den = ps + gs + cfg.eps;
            let d = (2.0 * i + cfg.eps) / den;
            (d, 1.0 / (k as Real * den))
        })
        .collect();
    let wd = cfg.dice_weight * upstream;
    let wc = cfg.ce_weight * upstream / (n * p) as Real;
    let mut dz = Tensor::zeros(probs.shape());
    let mut dp = vec![0.0; k];
    for s in 0..n {
        let lab = &labels.data()[s * p..(s + 1) * p];
        let pr = &probs.data()[s * k * p..(s + 1) * k * p];
        let out = &mut dz.data_mut()[s * k * p..(s + 1) * k * p];
        for (v, &l) in lab.iter().enumerate() {
            let mut dot = 0.0;
            for c in 0..k {
                let g = if l as usize == c { 1.0 } else { 0.0 };
                let (d, inv) = coef[c];
                dp[c] = -(2.0 * g - d) * inv;
                dot += pr[c * p + v] * dp[c];
            }
            for c in 0..k {
                let pc = pr[c * p + v];
                let g = if l as usize == c { 1.0 } else { 0.0 };
                out[c * p + v] = wd * pc * (dp[c] - dot) + wc * (pc - g);
            }
        }
    }
    Ok(dz)
}

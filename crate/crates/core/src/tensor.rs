//! N-dimensional strided array of reals and the elementwise/reduction
//! primitives the rest of the crate builds on.
//!
//! Layout is row-major with channels before spatial axes: `(N, C, H, W)` for
//! images and `(N, C, H, W, D)` for volumes. Every operation allocates a fresh
//! output; tensors are never mutated in place by the public operators.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};

/// Scalar type used for activations, weights and gradients.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Scalar type used for activations, weights and gradients.
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    strides: Vec<usize>,
    data: Vec<Real>,
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1usize;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements but buffer has {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self::full(&[], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> Real) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            increment(&mut idx, shape);
        }
        t
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: Real, hi: Real, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            *v = rng.random_range(lo..hi);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Element at a multi-index. Panics when out of bounds.
    pub fn at(&self, idx: &[usize]) -> Real {
        assert!(
            idx.len() == self.shape.len() && idx.iter().zip(&self.shape).all(|(i, d)| i < d),
            "index {idx:?} out of bounds for shape {:?}",
            self.shape
        );
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: Real) {
        assert!(
            idx.len() == self.shape.len() && idx.iter().zip(&self.shape).all(|(i, d)| i < d),
            "index {idx:?} out of bounds for shape {:?}",
            self.shape
        );
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<Real> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            strides: self.strides.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: Real) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    /// Inner product over all elements of two equally shaped tensors.
    pub fn dot(&self, other: &Tensor) -> Result<Real> {
        if self.shape != other.shape {
            return Err(shape_err!("dot of {:?} and {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<Real> {
        if self.shape != other.shape {
            return Err(shape_err!("compare {:?} with {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Pads every axis with `value`. `pads[i] = (lo, hi)` for axis `i`.
    pub fn pad_constant(&self, pads: &[(isize, isize)], value: Real) -> Result<Tensor> {
        if pads.len() != self.rank() {
            return Err(invalid!(
                "pad list has {} entries for a rank-{} tensor",
                pads.len(),
                self.rank()
            ));
        }
        if pads.iter().any(|&(lo, hi)| lo < 0 || hi < 0) {
            return Err(invalid!("negative padding {:?}", pads));
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(pads)
            .map(|(&d, &(lo, hi))| d + lo as usize + hi as usize)
            .collect();
        let mut out = Tensor::full(&out_shape, value);
        if self.numel() == 0 {
            return Ok(out);
        }
        let mut idx = vec![0usize; self.rank()];
        let mut dst = vec![0usize; self.rank()];
        for &v in &self.data {
            for ((d, i), &(lo, _)) in dst.iter_mut().zip(&idx).zip(pads) {
                *d = i + lo as usize;
            }
            let o = out.offset(&dst);
            out.data[o] = v;
            increment(&mut idx, &self.shape);
        }
        Ok(out)
    }

    /// Sub-block starting at `start` with extents `extent` per axis.
    pub fn crop(&self, start: &[usize], extent: &[usize]) -> Result<Tensor> {
        if start.len() != self.rank() || extent.len() != self.rank() {
            return Err(invalid!("crop spec rank does not match tensor rank {}", self.rank()));
        }
        for ((&s, &e), &d) in start.iter().zip(extent).zip(&self.shape) {
            if s + e > d {
                return Err(invalid!("crop [{s}, {}) exceeds extent {d}", s + e));
            }
        }
        let mut src = vec![0usize; self.rank()];
        Ok(Tensor::from_fn(extent, |idx| {
            for ((o, &i), &s) in src.iter_mut().zip(idx).zip(start) {
                *o = i + s;
            }
            self.data[self.offset(&src)]
        }))
    }
}

/// Advance a row-major multi-index by one.
pub(crate) fn increment(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..idx.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: Real, b: Real) -> Real {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

/// `b` broadcasts onto `a` when ranks agree and each of its axes either
/// matches or is a singleton.
pub fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| x == y || y == 1)
}

/// Elementwise `op(a, b)`, broadcasting singleton axes of `b`.
pub fn elementwise(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        return Tensor::new(&a.shape, data);
    }
    if !broadcastable(&a.shape, &b.shape) {
        return Err(shape_err!(
            "cannot broadcast {:?} onto {:?}",
            b.shape,
            a.shape
        ));
    }
    let bstrides: Vec<usize> = b
        .shape
        .iter()
        .zip(&b.strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut out = Vec::with_capacity(a.numel());
    let mut idx = vec![0usize; a.rank()];
    for &x in &a.data {
        let bo: usize = idx.iter().zip(&bstrides).map(|(i, s)| i * s).sum();
        out.push(op.apply(x, b.data[bo]));
        increment(&mut idx, &a.shape);
    }
    Tensor::new(&a.shape, out)
}

/// Sum `t` down to `target` shape (the adjoint of broadcasting).
pub fn reduce_to_shape(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    if t.shape == target {
        return Ok(t.clone());
    }
    if !broadcastable(&t.shape, target) {
        return Err(shape_err!("cannot reduce {:?} to {:?}", t.shape, target));
    }
    let mut out = Tensor::zeros(target);
    let ostrides: Vec<usize> = target
        .iter()
        .zip(&out.strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut idx = vec![0usize; t.rank()];
    for &v in &t.data {
        let o: usize = idx.iter().zip(&ostrides).map(|(i, s)| i * s).sum();
        out.data[o] += v;
        increment(&mut idx, &t.shape);
    }
    Ok(out)
}

/// Mean and population variance over `axes`, keeping reduced axes as
/// singletons.
pub fn reduce_moments(t: &Tensor, axes: &[usize]) -> Result<(Tensor, Tensor)> {
    if axes.is_empty() {
        return Err(invalid!("empty reduction axis set"));
    }
    if let Some(&ax) = axes.iter().find(|&&ax| ax >= t.rank()) {
        return Err(invalid!("axis {ax} out of range for rank {}", t.rank()));
    }
    let out_shape: Vec<usize> = t
        .shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let count: usize = axes.iter().map(|&ax| t.shape[ax]).product();
    let n = count.max(1) as Real;
    // Shift each group by its first element so constant groups give exactly
    // zero variance and an exact mean.
    let gstrides = group_strides(&t.shape, &out_shape);
    let groups: usize = out_shape.iter().product();
    let mut shift = vec![Real::NAN; groups];
    let mut sum = vec![0.0; groups];
    let mut idx = vec![0usize; t.rank()];
    let mut gidx = Vec::with_capacity(t.numel());
    for &v in &t.data {
        let g: usize = idx.iter().zip(&gstrides).map(|(i, s)| i * s).sum();
        if shift[g].is_nan() {
            shift[g] = v;
        }
        sum[g] += v - shift[g];
        gidx.push(g);
        increment(&mut idx, &t.shape);
    }
    let mean_d: Vec<Real> = sum.iter().map(|s| s / n).collect();
    let mut sq = vec![0.0; groups];
    for (&v, &g) in t.data.iter().zip(&gidx) {
        let d = v - shift[g] - mean_d[g];
        sq[g] += d * d;
    }
    let mean = mean_d
        .iter()
        .zip(&shift)
        .map(|(m, s)| if s.is_nan() { 0.0 } else { s + m })
        .collect();
    let var = sq.iter().map(|v| v / n).collect();
    let mean = Tensor::new(&out_shape, mean)?;
    let var = Tensor::new(&out_shape, var)?;
    Ok((mean, var))
}

/// Row-major strides into the reduced shape, zero on reduced axes.
fn group_strides(shape: &[usize], reduced: &[usize]) -> Vec<usize> {
    let rs = row_major_strides(reduced);
    shape
        .iter()
        .zip(reduced)
        .zip(rs)
        .map(|((&d, &r), s)| if r == 1 && d != 1 { 0 } else { s })
        .collect()
}

/// Channel count plus spatial extents of a 2D image or 3D volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape2D3D {
    pub channels: usize,
    pub dims: Vec<usize>,
}

impl Shape2D3D {
    pub fn new(channels: usize, dims: &[usize]) -> Result<Self> {
        if !(dims.len() == 2 || dims.len() == 3) {
            return Err(invalid!("spatial rank must be 2 or 3, got {}", dims.len()));
        }
        if channels == 0 {
            return Err(invalid!("channel count must be positive"));
        }
        Ok(Self {
            channels,
            dims: dims.to_vec(),
        })
    }

    pub fn of(t: &Tensor) -> Result<Self> {
        if !(t.rank() == 4 || t.rank() == 5) {
            return Err(shape_err!("expected (N, C, spatial..) tensor, got {:?}", t.shape()));
        }
        Self::new(t.shape()[1], &t.shape()[2..])
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Integer class map with shape `(N, spatial..)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: &[usize], data: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err!("label shape {:?} holds {} elements but buffer has {}", shape, shape.iter().product::<usize>(), data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn max_label(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    /// Concatenate along the batch axis.
    pub fn stack(maps: &[&LabelMap]) -> Result<LabelMap> {
        let first = maps.first().ok_or_else(|| invalid!("stack of zero label maps"))?;
        let inner = &first.shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for m in maps {
            if &m.shape[1..] != inner {
                return Err(shape_err!("cannot stack label maps {:?} and {:?}", first.shape, m.shape));
            }
            n += m.shape[0];
            data.extend_from_slice(&m.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(inner);
        LabelMap::new(&shape, data)
    }
}

/// Concatenate tensors along the batch axis.
pub fn stack_batch(ts: &[&Tensor]) -> Result<Tensor> {
    let first = ts.first().ok_or_else(|| invalid!("stack of zero tensors"))?;
    let inner = &first.shape[1..];
    let mut data = Vec::new();
    let mut n = 0;
    for t in ts {
        if &t.shape[1..] != inner {
            return Err(shape_err!("cannot stack {:?} and {:?}", first.shape, t.shape));
        }
        n += t.shape[0];
        data.extend_from_slice(&t.data);
    }
    let mut shape = vec![n];
    shape.extend_from_slice(inner);
    Tensor::new(&shape, data)
}

/// Split an `(N, C, spatial..)` shape into batch, channels and three spatial
/// extents. Rank-2 images get a leading unit axis so the innermost loop always
/// runs over the longest contiguous axis.
pub(crate) fn nc_spatial3(shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, [1, *h, *w])),
        [n, c, h, w, d] => Ok((*n, *c, [*h, *w, *d])),
        _ => Err(shape_err!("expected (N, C, H, W[, D]) tensor, got {:?}", shape)),
    }
}

/// Inverse of [`nc_spatial3`] for a given spatial rank.
pub(crate) fn shape_from3(n: usize, c: usize, sp: [usize; 3], rank: usize) -> Vec<usize> {
    let mut s = vec![n, c];
    s.extend_from_slice(&sp[3 - rank..]);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn pad_centers_original() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let p = x.pad_constant(&[(0, 0), (0, 0), (1, 1), (1, 1)], 0.0).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let want = [0., 0., 0., 0.,
                    0., 1., 2., 0.,
                    0., 3., 4., 0.,
                    0., 0., 0., 0.];
        assert_eq!(p.data(), &want);
    }

    #[test]
    fn pad_zero_is_identity_and_low_side() {
        let x = t(&[1, 1, 1, 3], &[5., 6., 7.]);
        assert_eq!(x.pad_constant(&[(0, 0); 4], 9.0).unwrap(), x);
        let p = x.pad_constant(&[(0, 0), (0, 0), (0, 0), (2, 0)], -1.0).unwrap();
        assert_eq!(p.data(), &[-1., -1., 5., 6., 7.]);
    }

    #[test]
    fn pad_rejects_negative_and_wrong_rank() {
        let x = t(&[2], &[1., 2.]);
        assert!(x.pad_constant(&[(-1, 0)], 0.0).is_err());
        assert!(x.pad_constant(&[(0, 0), (0, 0)], 0.0).is_err());
    }

    #[test]
    fn zero_extent_tensors_propagate() {
        let x = Tensor::zeros(&[0, 3]);
        let p = x.pad_constant(&[(1, 0), (0, 1)], 2.0).unwrap();
        assert_eq!(p.shape(), &[1, 4]);
        assert!(p.data().iter().all(|&v| v == 2.0));
        let y = elementwise(&x, &Tensor::zeros(&[0, 3]), BinaryOp::Add).unwrap();
        assert_eq!(y.numel(), 0);
    }

    #[test]
    fn elementwise_examples() {
        let a = t(&[3], &[1., 2., 3.]);
        let b = t(&[3], &[4., 5., 6.]);
        assert_eq!(elementwise(&a, &b, BinaryOp::Mul).unwrap().data(), &[4., 10., 18.]);
        assert_eq!(elementwise(&a, &Tensor::zeros(&[3]), BinaryOp::Add).unwrap(), a);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let ones = Tensor::full(&[1, 3, 1, 1], 1.0);
        assert_eq!(elementwise(&x, &ones, BinaryOp::Mul).unwrap(), x);
        assert!(elementwise(&x, &Tensor::zeros(&[1, 2, 1, 1]), BinaryOp::Add).is_err());
    }

    #[test]
    fn broadcast_matches_explicit_expansion() {
        let x = Tensor::from_fn(&[2, 3, 2], |i| (i[0] * 100 + i[1] * 10 + i[2]) as Real);
        let b = t(&[1, 3, 1], &[1., 2., 3.]);
        let y = elementwise(&x, &b, BinaryOp::Sub).unwrap();
        let want = Tensor::from_fn(&[2, 3, 2], |i| x.at(i) - (i[1] + 1) as Real);
        assert_eq!(y, want);
        let r = reduce_to_shape(&x, &[1, 3, 1]).unwrap();
        assert_eq!(r.data(), &[(0. + 1. + 100. + 101.), (10. + 11. + 110. + 111.), (20. + 21. + 120. + 121.)]);
    }

    #[test]
    fn moments_examples() {
        let x = t(&[4], &[1., 2., 3., 4.]);
        let (m, v) = reduce_moments(&x, &[0]).unwrap();
        assert_eq!(m.data(), &[2.5]);
        assert_eq!(v.data(), &[1.25]);

        let c = Tensor::full(&[3, 5], 0.3);
        let (_, v) = reduce_moments(&c, &[0, 1]).unwrap();
        assert_eq!(v.data(), &[0.0]);

        assert!(reduce_moments(&x, &[]).is_err());
    }

    #[test]
    fn moments_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform(&[2, 8], -3.0, 3.0, &mut rng);
        let (m, v) = reduce_moments(&x, &[1]).unwrap();
        assert_eq!(m.shape(), &[2, 1]);
        for r in 0..2 {
            let row: Vec<Real> = (0..8).map(|j| x.at(&[r, j])).collect();
            let mut s = 0.0;
            for &e in &row {
                s += e;
            }
            let mean = s / 8.0;
            let mut ss = 0.0;
            for &e in &row {
                ss += (e - mean) * (e - mean);
            }
            assert!((m.at(&[r, 0]) - mean).abs() < 1e-12);
            assert!((v.at(&[r, 0]) - ss / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_inverts_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 2, 3, 4], -1.0, 1.0, &mut rng);
        let p = x.pad_constant(&[(0, 0), (1, 2), (0, 3), (2, 2)], 7.0).unwrap();
        assert_eq!(p.crop(&[0, 1, 0, 2], &[1, 2, 3, 4]).unwrap(), x);
    }

    #[test]
    fn shape_new_checks_rank() {
        assert!(Shape2D3D::new(3, &[4, 4]).is_ok());
        assert!(Shape2D3D::new(3, &[4]).is_err());
        assert!(Shape2D3D::new(0, &[4, 4]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pad_crop_round_trip(h in 0usize..5, w in 1usize..5, lo in 0isize..3, hi in 0isize..3, seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::uniform(&[1, 1, h.max(1), w], -5.0, 5.0, &mut rng);
                let p = x.pad_constant(&[(0, 0), (0, 0), (lo, hi), (hi, lo)], 1.5).unwrap();
                let c = p.crop(&[0, 0, lo as usize, hi as usize], x.shape()).unwrap();
                prop_assert_eq!(c, x);
            }

            #[test]
            fn add_commutes_exactly(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = Tensor::uniform(&[3, 4], -1e3, 1e3, &mut rng);
                let b = Tensor::uniform(&[3, 4], -1e-3, 1e-3, &mut rng);
                prop_assert_eq!(elementwise(&a, &b, BinaryOp::Add).unwrap(), elementwise(&b, &a, BinaryOp::Add).unwrap());
            }

            #[test]
            fn variance_non_negative(seed in 0u64..1000, scale in 1e-6f64..1e6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::uniform(&[2, 5, 3], -1.0, 1.0, &mut rng).scale(scale as Real);
                let (_, v) = reduce_moments(&x, &[1, 2]).unwrap();
                prop_assert!(v.data().iter().all(|&e| e >= 0.0));
            }
        }
    }
}

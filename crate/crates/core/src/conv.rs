//! Dense, depthwise, dilated and transposed convolutions for spatial rank 2
//! and 3, with their backward rules.
//!
//! Convolution here is cross-correlation (no kernel flip). Internally every
//! spatial tensor is handled as three axes; images get a leading unit axis so
//! that the innermost loops run over the contiguous width axis.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{nc_spatial3, shape_from3, Real, Tensor};

/// Geometry of one convolution layer. Per-axis vectors have one entry per
/// spatial axis in `H, W[, D]` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub rank: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<usize>,
    pub dilation: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<(usize, usize)>,
    /// 1 for dense, `in_channels` for depthwise.
    pub groups: usize,
    pub bias: bool,
}

/// Output extent of a convolution along one axis.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    dilation: usize,
    stride: usize,
    pad: (usize, usize),
) -> Option<usize> {
    let span = (kernel - 1) * dilation + 1;
    let padded = input + pad.0 + pad.1;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// "Same" padding for a stride-1 convolution; the extra element goes on the
/// high side.
pub fn same_padding(kernel: usize, dilation: usize) -> (usize, usize) {
    let total = (kernel - 1) * dilation;
    (total / 2, total - total / 2)
}

impl ConvSpec {
    /// Dense cubic-kernel convolution with stride 1, same padding and bias.
    pub fn dense(rank: usize, in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            rank,
            in_channels,
            out_channels,
            kernel: vec![k; rank],
            dilation: vec![1; rank],
            stride: vec![1; rank],
            padding: vec![same_padding(k, 1); rank],
            groups: 1,
            bias: true,
        }
    }

    pub fn depthwise(rank: usize, channels: usize, k: usize) -> Self {
        Self {
            groups: channels,
            ..Self::dense(rank, channels, channels, k)
        }
    }

    /// Strided resampling conv with kernel == stride and no padding: the
    /// geometry of patch merging and of transpose-conv upsampling.
    pub fn patch(rank: usize, in_channels: usize, out_channels: usize, factor: &[usize]) -> Self {
        Self {
            rank,
            in_channels,
            out_channels,
            kernel: factor.to_vec(),
            dilation: vec![1; rank],
            stride: factor.to_vec(),
            padding: vec![(0, 0); rank],
            groups: 1,
            bias: true,
        }
    }

    /// Sets a uniform dilation and recomputes same padding.
    pub fn with_dilation(mut self, d: usize) -> Self {
        self.dilation = vec![d; self.rank];
        self.same()
    }

    pub fn with_stride(mut self, stride: &[usize]) -> Self {
        self.stride = stride.to_vec();
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_kernel(mut self, kernel: &[usize]) -> Self {
        self.kernel = kernel.to_vec();
        self.same()
    }

    /// Recomputes same padding from kernel and dilation.
    pub fn same(mut self) -> Self {
        self.padding = self
            .kernel
            .iter()
            .zip(&self.dilation)
            .map(|(&k, &d)| same_padding(k, d))
            .collect();
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups != 1
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let per_group_in = self.in_channels / self.groups.max(1);
        let mut s = vec![self.out_channels, per_group_in];
        s.extend_from_slice(&self.kernel);
        s
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rank == 2 || self.rank == 3) {
            return Err(invalid!("convolution rank must be 2 or 3, got {}", self.rank));
        }
        for (name, v) in [
            ("kernel", &self.kernel),
            ("dilation", &self.dilation),
            ("stride", &self.stride),
        ] {
            if v.len() != self.rank {
                return Err(invalid!("{name} has {} entries for rank {}", v.len(), self.rank));
            }
            if v.contains(&0) {
                return Err(invalid!("{name} entries must be positive: {v:?}"));
            }
        }
        if self.padding.len() != self.rank {
            return Err(invalid!("padding has {} entries for rank {}", self.padding.len(), self.rank));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid!("channel counts must be positive"));
        }
        if self.groups != 1
            && !(self.groups == self.in_channels && self.in_channels == self.out_channels)
        {
            return Err(invalid!(
                "only dense (groups=1) or depthwise (groups=in=out) convolutions are supported, got groups={} in={} out={}",
                self.groups,
                self.in_channels,
                self.out_channels
            ));
        }
        Ok(())
    }

    pub(crate) fn canon(&self) -> Geometry {
        let lead = 3 - self.rank;
        let mut g = Geometry {
            kernel: [1; 3],
            dilation: [1; 3],
            stride: [1; 3],
            pad: [(0, 0); 3],
        };
        for i in 0..self.rank {
            g.kernel[lead + i] = self.kernel[i];
            g.dilation[lead + i] = self.dilation[i];
            g.stride[lead + i] = self.stride[i];
            g.pad[lead + i] = self.padding[i];
        }
        g
    }

    /// Output spatial extents for an input with the given spatial extents.
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != self.rank {
            return Err(shape_err!("rank-{} conv on input dims {:?}", self.rank, input));
        }
        input
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                conv_output_extent(n, self.kernel[i], self.dilation[i], self.stride[i], self.padding[i])
                    .ok_or_else(|| {
                        shape_err!(
                            "kernel span {} exceeds padded extent {} on axis {i}",
                            (self.kernel[i] - 1) * self.dilation[i] + 1,
                            n + self.padding[i].0 + self.padding[i].1
                        )
                    })
            })
            .collect()
    }

    /// Spatial extents produced by the transpose of this convolution applied
    /// to a tensor with `input` extents.
    pub fn transpose_output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != self.rank {
            return Err(shape_err!("rank-{} transpose conv on input dims {:?}", self.rank, input));
        }
        input
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let span = (self.kernel[i] - 1) * self.dilation[i] + 1;
                let full = n.saturating_sub(1) * self.stride[i] + span;
                let (lo, hi) = self.padding[i];
                if n == 0 {
                    return Ok(0);
                }
                full.checked_sub(lo + hi)
                    .filter(|&v| v > 0)
                    .ok_or_else(|| shape_err!("transpose conv padding exceeds output on axis {i}"))
            })
            .collect()
    }
}

/// Canonical three-axis geometry; unused leading axes are unit.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [(usize, usize); 3],
}

impl Geometry {
    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn tap_offsets(&self, t: usize) -> [usize; 3] {
        let k2 = self.kernel[2];
        let k1 = self.kernel[1];
        [t / (k1 * k2), (t / k2) % k1, t % k2]
    }
}

/// Output indices `o` in `[lo, hi)` for which `o*stride - pad + off` lands in
/// `[0, input)`.
#[inline]
pub(crate) fn valid_range(out: usize, input: usize, stride: usize, pad: usize, off: usize) -> (usize, usize) {
    let (s, p, e, n) = (stride as isize, pad as isize, off as isize, input as isize);
    // o*s >= p - e
    let lo = if p > e { (p - e + s - 1) / s } else { 0 };
    // o*s <= n - 1 + p - e
    let top = n - 1 + p - e;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top / s + 1).min(out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    a_t: bool,
    b: &[Real],
    b_t: bool,
    c: &mut [Real],
    beta: Real,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe in-bounds row-major views.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Unfold one sample `x` (`cin` channels, extents `isp`) into a
/// `(cin * taps) x prod(osp)` column matrix.
pub(crate) fn im2col(x: &[Real], cin: usize, isp: [usize; 3], osp: [usize; 3], g: &Geometry, col: &mut [Real]) {
    let taps = g.taps();
    let p = osp[0] * osp[1] * osp[2];
    let ivol = isp[0] * isp[1] * isp[2];
    col[..cin * taps * p].iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..cin {
        let xc = &x[ci * ivol..(ci + 1) * ivol];
        for t in 0..taps {
            let k = g.tap_offsets(t);
            let off = [k[0] * g.dilation[0], k[1] * g.dilation[1], k[2] * g.dilation[2]];
            let row = &mut col[(ci * taps + t) * p..(ci * taps + t + 1) * p];
            let r0 = valid_range(osp[0], isp[0], g.stride[0], g.pad[0].0, off[0]);
            let r1 = valid_range(osp[1], isp[1], g.stride[1], g.pad[1].0, off[1]);
            let r2 = valid_range(osp[2], isp[2], g.stride[2], g.pad[2].0, off[2]);
            if r2.0 >= r2.1 {
                continue;
            }
            for o0 in r0.0..r0.1 {
                let i0 = o0 * g.stride[0] + off[0] - g.pad[0].0;
                for o1 in r1.0..r1.1 {
                    let i1 = o1 * g.stride[1] + off[1] - g.pad[1].0;
                    let src = &xc[(i0 * isp[1] + i1) * isp[2]..];
                    let dst = &mut row[(o0 * osp[1] + o1) * osp[2]..];
                    let base = r2.0 * g.stride[2] + off[2] - g.pad[2].0;
                    if g.stride[2] == 1 {
                        dst[r2.0..r2.1].copy_from_slice(&src[base..base + (r2.1 - r2.0)]);
                    } else {
                        for (j, o2) in (r2.0..r2.1).enumerate() {
                            dst[o2] = src[base + j * g.stride[2]];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into `dx`.
pub(crate) fn col2im(col: &[Real], cin: usize, isp: [usize; 3], osp: [usize; 3], g: &Geometry, dx: &mut [Real]) {
    let taps = g.taps();
    let p = osp[0] * osp[1] * osp[2];
    let ivol = isp[0] * isp[1] * isp[2];
    for ci in 0..cin {
        let xc = &mut dx[ci * ivol..(ci + 1) * ivol];
        for t in 0..taps {
            let k = g.tap_offsets(t);
            let off = [k[0] * g.dilation[0], k[1] * g.dilation[1], k[2] * g.dilation[2]];
            let row = &col[(ci * taps + t) * p..(ci * taps + t + 1) * p];
            let r0 = valid_range(osp[0], isp[0], g.stride[0], g.pad[0].0, off[0]);
            let r1 = valid_range(osp[1], isp[1], g.stride[1], g.pad[1].0, off[1]);
            let r2 = valid_range(osp[2], isp[2], g.stride[2], g.pad[2].0, off[2]);
            if r2.0 >= r2.1 {
                continue;
            }
            for o0 in r0.0..r0.1 {
                let i0 = o0 * g.stride[0] + off[0] - g.pad[0].0;
                for o1 in r1.0..r1.1 {
                    let i1 = o1 * g.stride[1] + off[1] - g.pad[1].0;
                    let dst = &mut xc[(i0 * isp[1] + i1) * isp[2]..];
                    let src = &row[(o0 * osp[1] + o1) * osp[2]..];
                    let base = r2.0 * g.stride[2] + off[2] - g.pad[2].0;
                    for (j, o2) in (r2.0..r2.1).enumerate() {
                        dst[base + j * g.stride[2]] += src[o2];
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &Geometry) -> bool {
    g.kernel == [1; 3] && g.stride == [1; 3] && g.pad == [(0, 0); 3]
}

fn check_weight(w: &Tensor, spec: &ConvSpec) -> Result<()> {
    if w.shape() != spec.weight_shape().as_slice() {
        return Err(shape_err!(
            "weight shape {:?} does not match spec {:?}",
            w.shape(),
            spec.weight_shape()
        ));
    }
    Ok(())
}

fn check_bias(b: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [channels] {
            return Err(shape_err!("bias shape {:?}, expected [{channels}]", b.shape()));
        }
    }
    Ok(())
}

fn check_input(x: &Tensor, channels: usize, spec: &ConvSpec) -> Result<(usize, [usize; 3])> {
    spec.validate()?;
    if x.rank() != spec.rank + 2 {
        return Err(shape_err!("rank-{} conv on tensor of shape {:?}", spec.rank, x.shape()));
    }
    let (n, c, sp) = nc_spatial3(x.shape())?;
    if c != channels {
        return Err(shape_err!("input has {c} channels, conv expects {channels}"));
    }
    Ok((n, sp))
}

fn dims3(spec: &ConvSpec, dims: &[usize]) -> [usize; 3] {
    let mut out = [1; 3];
    out[3 - spec.rank..].copy_from_slice(dims);
    out
}

/// Forward convolution (dense or depthwise per `spec.groups`).
pub fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let (n, isp) = check_input(x, spec.in_channels, spec)?;
    check_weight(w, spec)?;
    check_bias(b, spec.out_channels)?;
    let osp = dims3(spec, &spec.output_dims(&x.shape()[2..])?);
    let g = spec.canon();
    let cout = spec.out_channels;
    let mut out = Tensor::zeros(&shape_from3(n, cout, osp, spec.rank));
    if spec.groups == 1 {
        dense_forward(x.data(), w.data(), n, spec.in_channels, cout, isp, osp, &g, out.data_mut());
    } else {
        depthwise_forward(x.data(), w.data(), n, cout, isp, osp, &g, out.data_mut());
    }
    if let Some(b) = b {
        add_channel_bias(out.data_mut(), b.data(), n, cout);
    }
    Ok(out)
}

fn add_channel_bias(out: &mut [Real], b: &[Real], n: usize, c: usize) {
    if out.is_empty() {
        return;
    }
    let vol = out.len() / (n * c);
    for (i, chunk) in out.chunks_mut(vol).enumerate() {
        let bv = b[i % c];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
}

fn channel_sums(dout: &[Real], n: usize, c: usize) -> Vec<Real> {
    let mut db = vec![0.0; c];
    if dout.is_empty() {
        return db;
    }
    let vol = dout.len() / (n * c);
    for (i, chunk) in dout.chunks(vol).enumerate() {
        db[i % c] += chunk.iter().sum::<Real>();
    }
    db
}

#[allow(clippy::too_many_arguments)]
fn dense_forward(
    x: &[Real],
    w: &[Real],
    n: usize,
    cin: usize,
    cout: usize,
    isp: [usize; 3],
    osp: [usize; 3],
    g: &Geometry,
    out: &mut [Real],
) {
    let ivol = isp.iter().product::<usize>();
    let p = osp.iter().product::<usize>();
    let kdim = cin * g.taps();
    let pointwise = is_pointwise(g);
    let mut col = if pointwise { Vec::new() } else { vec![0.0; kdim * p] };
    for s in 0..n {
        let xs = &x[s * cin * ivol..(s + 1) * cin * ivol];
        let os = &mut out[s * cout * p..(s + 1) * cout * p];
        if pointwise {
            gemm(cout, kdim, p, w, false, xs, false, os, 0.0);
        } else {
            im2col(xs, cin, isp, osp, g, &mut col);
            gemm(cout, kdim, p, w, false, &col, false, os, 0.0);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_forward(
    x: &[Real],
    w: &[Real],
    n: usize,
    c: usize,
    isp: [usize; 3],
    osp: [usize; 3],
    g: &Geometry,
    out: &mut [Real],
) {
    let ivol = isp.iter().product::<usize>();
    let ovol = osp.iter().product::<usize>();
    let taps = g.taps();
    for s in 0..n {
        for ch in 0..c {
            let xc = &x[(s * c + ch) * ivol..(s * c + ch + 1) * ivol];
            let oc = &mut out[(s * c + ch) * ovol..(s * c + ch + 1) * ovol];
            let wc = &w[ch * taps..(ch + 1) * taps];
            for (t, &wt) in wc.iter().enumerate() {
                for_each_row(g, t, isp, osp, |src, dst, len, s2| {
                    let (src, dst) = (&xc[src..], &mut oc[dst..dst + len]);
                    if s2 == 1 {
                        for (o, &v) in dst.iter_mut().zip(&src[..len]) {
                            *o += wt * v;
                        }
                    } else {
                        for (j, o) in dst.iter_mut().enumerate() {
                            *o += wt * src[j * s2];
                        }
                    }
                });
            }
        }
    }
}

/// Visit every contiguous output row touched by tap `t`, passing the input
/// start offset, output start offset, row length and innermost input stride.
#[inline]
fn for_each_row(g: &Geometry, t: usize, isp: [usize; 3], osp: [usize; 3], mut f: impl FnMut(usize, usize, usize, usize)) {
    let k = g.tap_offsets(t);
    let off = [k[0] * g.dilation[0], k[1] * g.dilation[1], k[2] * g.dilation[2]];
    let r0 = valid_range(osp[0], isp[0], g.stride[0], g.pad[0].0, off[0]);
    let r1 = valid_range(osp[1], isp[1], g.stride[1], g.pad[1].0, off[1]);
    let r2 = valid_range(osp[2], isp[2], g.stride[2], g.pad[2].0, off[2]);
    if r2.0 >= r2.1 {
        return;
    }
    let len = r2.1 - r2.0;
    let base2 = r2.0 * g.stride[2] + off[2] - g.pad[2].0;
    for o0 in r0.0..r0.1 {
        let i0 = o0 * g.stride[0] + off[0] - g.pad[0].0;
        for o1 in r1.0..r1.1 {
            let i1 = o1 * g.stride[1] + off[1] - g.pad[1].0;
            f((i0 * isp[1] + i1) * isp[2] + base2, (o0 * osp[1] + o1) * osp[2] + r2.0, len, g.stride[2]);
        }
    }
}

/// Gradients of a convolution. Entries are `None` when not requested.
#[derive(Debug, Default)]
pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

/// Backward rule of [`conv_forward`].
pub fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    spec: &ConvSpec,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads> {
    let (n, isp) = check_input(x, spec.in_channels, spec)?;
    check_weight(w, spec)?;
    let osp = dims3(spec, &spec.output_dims(&x.shape()[2..])?);
    let cout = spec.out_channels;
    if dout.shape() != shape_from3(n, cout, osp, spec.rank).as_slice() {
        return Err(shape_err!("upstream gradient shape {:?} does not match conv output", dout.shape()));
    }
    let g = spec.canon();
    let mut grads = ConvGrads::default();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let ivol = isp.iter().product::<usize>();
    let p = osp.iter().product::<usize>();
    if spec.groups == 1 {
        let cin = spec.in_channels;
        let kdim = cin * g.taps();
        let pointwise = is_pointwise(&g);
        let mut col = vec![0.0; if pointwise { 0 } else { kdim * p }];
        let mut dcol = vec![0.0; if pointwise || !need_dx { 0 } else { kdim * p }];
        for s in 0..n {
            let xs = &x.data()[s * cin * ivol..(s + 1) * cin * ivol];
            let ds = &dout.data()[s * cout * p..(s + 1) * cout * p];
            if let Some(dw) = dw.as_mut() {
                let cols: &[Real] = if pointwise {
                    xs
                } else {
                    im2col(xs, cin, isp, osp, &g, &mut col);
                    &col
                };
                gemm(cout, p, kdim, ds, false, cols, true, dw.data_mut(), 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx.data_mut()[s * cin * ivol..(s + 1) * cin * ivol];
                if pointwise {
                    gemm(kdim, cout, p, w.data(), true, ds, false, dxs, 1.0);
                } else {
                    gemm(kdim, cout, p, w.data(), true, ds, false, &mut dcol, 0.0);
                    col2im(&dcol, cin, isp, osp, &g, dxs);
                }
            }
        }
    } else {
        let c = cout;
        let taps = g.taps();
        for s in 0..n {
            for ch in 0..c {
                let base_i = (s * c + ch) * ivol;
                let base_o = (s * c + ch) * p;
                let dc = &dout.data()[base_o..base_o + p];
                for t in 0..taps {
                    if let Some(dw) = dw.as_mut() {
                        let xc = &x.data()[base_i..base_i + ivol];
                        let mut acc = 0.0;
                        for_each_row(&g, t, isp, osp, |src, dst, len, s2| {
                            let d = &dc[dst..dst + len];
                            if s2 == 1 {
                                acc += d.iter().zip(&xc[src..src + len]).map(|(a, b)| a * b).sum::<Real>();
                            } else {
                                acc += d.iter().enumerate().map(|(j, a)| a * xc[src + j * s2]).sum::<Real>();
                            }
                        });
                        dw.data_mut()[ch * taps + t] += acc;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wt = w.data()[ch * taps + t];
                        let xc = &mut dx.data_mut()[base_i..base_i + ivol];
                        for_each_row(&g, t, isp, osp, |src, dst, len, s2| {
                            let d = &dc[dst..dst + len];
                            if s2 == 1 {
                                for (o, &v) in xc[src..src + len].iter_mut().zip(d) {
                                    *o += wt * v;
                                }
                            } else {
                                for (j, &v) in d.iter().enumerate() {
                                    xc[src + j * s2] += wt * v;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    grads.dx = dx;
    grads.dw = dw;
    if spec.bias {
        grads.db = Some(Tensor::new(&[cout], channel_sums(dout.data(), n, cout))?);
    }
    Ok(grads)
}

/// Transpose convolution: the adjoint of [`conv_forward`] with the same
/// `spec`. Maps `spec.out_channels` channels to `spec.in_channels`; the bias,
/// when given, has `spec.in_channels` entries.
///
/// Strided convolutions map several input extents to the same output extent;
/// `out_dims` selects one, defaulting to the smallest.
pub fn conv_transpose_forward(
    y: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: &ConvSpec,
    out_dims: Option<&[usize]>,
) -> Result<Tensor> {
    let (n, ysp) = check_input(y, spec.out_channels, spec)?;
    if spec.groups != 1 {
        return Err(invalid!("transpose convolution supports groups=1 only"));
    }
    check_weight(w, spec)?;
    check_bias(b, spec.in_channels)?;
    let odims = match out_dims {
        Some(d) => {
            if spec.output_dims(d)? != y.shape()[2..] {
                return Err(shape_err!("transpose conv target {:?} does not convolve back to {:?}", d, &y.shape()[2..]));
            }
            d.to_vec()
        }
        None => spec.transpose_output_dims(&y.shape()[2..])?,
    };
    let osp = dims3(spec, &odims);
    let g = spec.canon();
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let kdim = cin * g.taps();
    let p = ysp.iter().product::<usize>();
    let ovol = osp.iter().product::<usize>();
    let mut out = Tensor::zeros(&shape_from3(n, cin, osp, spec.rank));
    let mut col = vec![0.0; kdim * p];
    for s in 0..n {
        let ys = &y.data()[s * cout * p..(s + 1) * cout * p];
        gemm(kdim, cout, p, w.data(), true, ys, false, &mut col, 0.0);
        col2im(&col, cin, osp, ysp, &g, &mut out.data_mut()[s * cin * ovol..(s + 1) * cin * ovol]);
    }
    if let Some(b) = b {
        add_channel_bias(out.data_mut(), b.data(), n, cin);
    }
    Ok(out)
}

/// Backward rule of [`conv_transpose_forward`].
pub fn conv_transpose_backward(
    y: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    spec: &ConvSpec,
    need_dy: bool,
    need_dw: bool,
) -> Result<ConvGrads> {
    let (n, ysp) = check_input(y, spec.out_channels, spec)?;
    check_weight(w, spec)?;
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    if dout.rank() != y.rank()
        || dout.shape()[..2] != [n, cin]
        || spec.output_dims(&dout.shape()[2..])? != y.shape()[2..]
    {
        return Err(shape_err!("upstream gradient shape {:?} does not match transpose conv output", dout.shape()));
    }
    let osp = dims3(spec, &dout.shape()[2..]);
    let g = spec.canon();
    let kdim = cin * g.taps();
    let p = ysp.iter().product::<usize>();
    let ovol = osp.iter().product::<usize>();
    let mut dy = need_dy.then(|| Tensor::zeros(y.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut col = vec![0.0; kdim * p];
    for s in 0..n {
        im2col(&dout.data()[s * cin * ovol..(s + 1) * cin * ovol], cin, osp, ysp, &g, &mut col);
        if let Some(dy) = dy.as_mut() {
            gemm(cout, kdim, p, w.data(), false, &col, false, &mut dy.data_mut()[s * cout * p..(s + 1) * cout * p], 0.0);
        }
        if let Some(dw) = dw.as_mut() {
            let ys = &y.data()[s * cout * p..(s + 1) * cout * p];
            gemm(cout, p, kdim, ys, false, &col, true, dw.data_mut(), 1.0);
        }
    }
    Ok(ConvGrads {
        dx: dy,
        dw,
        db: spec
            .bias
            .then(|| Tensor::new(&[cin], channel_sums(dout.data(), n, cin)))
            .transpose()?,
    })
}

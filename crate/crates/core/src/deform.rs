//! Deformable convolution: offset fields, multilinear grid sampling and the
//! deformable depthwise (rank 2) and dense (rank 3) convolutions.
//!
//! Each output position `p` and kernel tap `t` sample the input at the nominal
//! tap location plus a learned displacement `Δ[p, t]`. Off-grid positions are
//! interpolated from the `2^r` surrounding voxels; neighbours outside the grid
//! read as zero. One displacement field is shared by all feature channels.
//!
//! Offset channels are laid out tap-major: channel `t * r + a` holds the
//! displacement of tap `t` along spatial axis `a` (`H, W[, D]` order).

use crate::conv::{conv_forward, gemm, ConvSpec, Geometry};
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{nc_spatial3, shape_from3, Real, Tensor};

/// Per-(position, tap, axis) sampling displacements in voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    tensor: Tensor,
    rank: usize,
    taps: usize,
}

impl OffsetField {
    pub fn new(tensor: Tensor, rank: usize, taps: usize) -> Result<Self> {
        if tensor.rank() != rank + 2 {
            return Err(shape_err!("offset field of rank {} for spatial rank {rank}", tensor.rank()));
        }
        if tensor.shape()[1] != rank * taps {
            return Err(shape_err!(
                "offset field has {} channels, expected {rank} x {taps} = {}",
                tensor.shape()[1],
                rank * taps
            ));
        }
        Ok(Self { tensor, rank, taps })
    }

    pub fn zeros(batch: usize, rank: usize, taps: usize, dims: &[usize]) -> Self {
        let mut shape = vec![batch, rank * taps];
        shape.extend_from_slice(dims);
        Self {
            tensor: Tensor::zeros(&shape),
            rank,
            taps,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn taps(&self) -> usize {
        self.taps
    }
}

/// A deformable layer: the main convolution plus the geometry of the offset
/// network that drives it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeformSpec {
    pub base: ConvSpec,
    pub offset_kernel: Vec<usize>,
    pub offset_dilation: Vec<usize>,
}

impl DeformSpec {
    /// The offset network follows the kernel size and dilation of `base`.
    pub fn new(base: ConvSpec) -> Self {
        Self {
            offset_kernel: base.kernel.clone(),
            offset_dilation: base.dilation.clone(),
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.offset_kernel != self.base.kernel || self.offset_dilation != self.base.dilation {
            return Err(invalid!(
                "offset network kernel {:?}/dilation {:?} must follow the main kernel {:?}/dilation {:?}",
                self.offset_kernel,
                self.offset_dilation,
                self.base.kernel,
                self.base.dilation
            ));
        }
        Ok(())
    }

    pub fn offset_channels(&self) -> usize {
        self.base.rank * self.base.taps()
    }

    /// Dense convolution producing the offset field from the layer input.
    pub fn offset_spec(&self) -> ConvSpec {
        ConvSpec {
            rank: self.base.rank,
            in_channels: self.base.in_channels,
            out_channels: self.offset_channels(),
            kernel: self.offset_kernel.clone(),
            dilation: self.offset_dilation.clone(),
            stride: self.base.stride.clone(),
            padding: self.base.padding.clone(),
            groups: 1,
            bias: true,
        }
    }
}

/// Offset network forward pass: a dense, biased convolution with `r * taps`
/// output channels.
pub fn offset_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: &DeformSpec) -> Result<OffsetField> {
    spec.validate()?;
    let out = conv_forward(x, w, Some(b), &spec.offset_spec())?;
    OffsetField::new(out, spec.base.rank, spec.base.taps())
}

/// Interpolation stencil at one fractional position: up to eight in-bounds
/// neighbours with weights and per-axis weight derivatives.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub n: usize,
    pub idx: [usize; 8],
    pub w: [Real; 8],
    pub dw: [[Real; 8]; 3],
}

impl Default for Stencil {
    fn default() -> Self {
        Self {
            n: 0,
            idx: [0; 8],
            w: [0.0; 8],
            dw: [[0.0; 8]; 3],
        }
    }
}

/// Build the stencil for canonical three-axis position `pos`. Axes below
/// `first_active` are fixed integer coordinates (the unit axis of images).
pub(crate) fn stencil(pos: [Real; 3], sp: [usize; 3], first_active: usize) -> Stencil {
    // per axis: two candidate (index, weight, d weight/d pos)
    let mut cand = [[(0isize, 0.0 as Real, 0.0 as Real); 2]; 3];
    let mut count = [1usize; 3];
    for a in 0..3 {
        if a < first_active {
            cand[a][0] = (pos[a] as isize, 1.0, 0.0);
        } else {
            let f = pos[a].floor();
            let fr = pos[a] - f;
            let lo = f as isize;
            cand[a][0] = (lo, 1.0 - fr, -1.0);
            cand[a][1] = (lo + 1, fr, 1.0);
            count[a] = 2;
        }
    }
    let mut st = Stencil::default();
    for i0 in 0..count[0] {
        let (p0, w0, g0) = cand[0][i0];
        if p0 < 0 || p0 >= sp[0] as isize {
            continue;
        }
        for i1 in 0..count[1] {
            let (p1, w1, g1) = cand[1][i1];
            if p1 < 0 || p1 >= sp[1] as isize {
                continue;
            }
            for i2 in 0..count[2] {
                let (p2, w2, g2) = cand[2][i2];
                if p2 < 0 || p2 >= sp[2] as isize {
                    continue;
                }
                let k = st.n;
                st.idx[k] = ((p0 as usize) * sp[1] + p1 as usize) * sp[2] + p2 as usize;
                st.w[k] = w0 * w1 * w2;
                st.dw[0][k] = g0 * w1 * w2;
                st.dw[1][k] = w0 * g1 * w2;
                st.dw[2][k] = w0 * w1 * g2;
                st.n += 1;
            }
        }
    }
    st
}

impl Stencil {
    #[inline]
    pub fn sample(&self, x: &[Real]) -> Real {
        let mut v = 0.0;
        for k in 0..self.n {
            v += self.w[k] * x[self.idx[k]];
        }
        v
    }

    #[inline]
    pub fn grad(&self, x: &[Real], axis: usize) -> Real {
        let mut v = 0.0;
        for k in 0..self.n {
            v += self.dw[axis][k] * x[self.idx[k]];
        }
        v
    }
}

/// Multilinear interpolation of every channel of `x` (`(N, C, spatial..)`) at
/// fractional positions `points` (one coordinate per spatial axis, in voxel
/// units). Returns `(N, C, points)`.
pub fn grid_sample_linear<P: AsRef<[Real]>>(x: &Tensor, points: &[P]) -> Result<Tensor> {
    let (n, c, sp) = nc_spatial3(x.shape())?;
    let rank = x.rank() - 2;
    let lead = 3 - rank;
    let vol: usize = sp.iter().product();
    let mut stencils = Vec::with_capacity(points.len());
    for p in points {
        let p = p.as_ref();
        if p.len() != rank {
            return Err(shape_err!("point {:?} has {} coordinates for rank {rank}", p, p.len()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("non-finite sampling coordinate {p:?}")));
        }
        let mut pos = [0.0; 3];
        pos[lead..].copy_from_slice(p);
        stencils.push(stencil(pos, sp, lead));
    }
    let np = points.len();
    let mut out = Tensor::zeros(&[n, c, np]);
    for (nc, chunk) in out.data_mut().chunks_mut(np.max(1)).enumerate().take(n * c) {
        let xs = &x.data()[nc * vol..(nc + 1) * vol];
        for (o, st) in chunk.iter_mut().zip(&stencils) {
            *o = st.sample(xs);
        }
    }
    Ok(out)
}

struct Layout {
    n: usize,
    rank: usize,
    isp: [usize; 3],
    osp: [usize; 3],
    g: Geometry,
    taps: usize,
    p: usize,
    ivol: usize,
}

fn check(x: &Tensor, w: &Tensor, offsets: &Tensor, spec: &ConvSpec) -> Result<Layout> {
    spec.validate()?;
    if x.rank() != spec.rank + 2 {
        return Err(shape_err!("rank-{} deformable conv on {:?}", spec.rank, x.shape()));
    }
    let (n, c, isp) = nc_spatial3(x.shape())?;
    if c != spec.in_channels {
        return Err(shape_err!("input has {c} channels, layer expects {}", spec.in_channels));
    }
    if w.shape() != spec.weight_shape().as_slice() {
        return Err(shape_err!("weight shape {:?}, expected {:?}", w.shape(), spec.weight_shape()));
    }
    let odims = spec.output_dims(&x.shape()[2..])?;
    let taps = spec.taps();
    let want: Vec<usize> = [n, spec.rank * taps].into_iter().chain(odims.iter().copied()).collect();
    if offsets.shape() != want.as_slice() {
        return Err(shape_err!("offset field shape {:?}, expected {:?}", offsets.shape(), want));
    }
    let mut osp = [1; 3];
    osp[3 - spec.rank..].copy_from_slice(&odims);
    Ok(Layout {
        n,
        rank: spec.rank,
        isp,
        osp,
        g: spec.canon(),
        taps,
        p: osp.iter().product(),
        ivol: isp.iter().product(),
    })
}

/// Stencils of tap `t` for every output position of sample `s`.
fn tap_stencils(l: &Layout, offsets: &[Real], s: usize, t: usize, out: &mut Vec<Stencil>) {
    out.clear();
    let lead = 3 - l.rank;
    let k = l.g.tap_offsets(t);
    let off_base = s * l.rank * l.taps * l.p;
    for o0 in 0..l.osp[0] {
        for o1 in 0..l.osp[1] {
            for o2 in 0..l.osp[2] {
                let o = [o0, o1, o2];
                let pi = (o0 * l.osp[1] + o1) * l.osp[2] + o2;
                let mut pos = [0.0; 3];
                for a in 0..3 {
                    pos[a] = (o[a] * l.g.stride[a] + k[a] * l.g.dilation[a]) as Real - l.g.pad[a].0 as Real;
                }
                for a in 0..l.rank {
                    pos[lead + a] += offsets[off_base + (t * l.rank + a) * l.p + pi];
                }
                out.push(stencil(pos, l.isp, lead));
            }
        }
    }
}

/// Deformable convolution forward for either grouping (dense or depthwise)
/// and either spatial rank.
pub fn deform_conv_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    offsets: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let l = check(x, w, offsets, spec)?;
    if offsets.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("non-finite offset field".into()));
    }
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let mut out = Tensor::zeros(&shape_from3(l.n, cout, l.osp, l.rank));
    let mut st = Vec::with_capacity(l.p);
    if spec.groups == 1 {
        let kdim = cin * l.taps;
        let mut col = vec![0.0; kdim * l.p];
        for s in 0..l.n {
            fill_columns(&l, x.data(), offsets.data(), s, cin, &mut st, &mut col);
            let os = &mut out.data_mut()[s * cout * l.p..(s + 1) * cout * l.p];
            gemm(cout, kdim, l.p, w.data(), false, &col, false, os, 0.0);
        }
    } else {
        for s in 0..l.n {
            for t in 0..l.taps {
                tap_stencils(&l, offsets.data(), s, t, &mut st);
                for c in 0..cout {
                    let wt = w.data()[c * l.taps + t];
                    let xc = &x.data()[(s * cin + c) * l.ivol..(s * cin + c + 1) * l.ivol];
                    let oc = &mut out.data_mut()[(s * cout + c) * l.p..(s * cout + c + 1) * l.p];
                    for (o, stn) in oc.iter_mut().zip(&st) {
                        *o += wt * stn.sample(xc);
                    }
                }
            }
        }
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(shape_err!("bias shape {:?}, expected [{cout}]", b.shape()));
        }
        for (i, chunk) in out.data_mut().chunks_mut(l.p.max(1)).enumerate().take(l.n * cout) {
            let bv = b.data()[i % cout];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

fn fill_columns(l: &Layout, x: &[Real], offsets: &[Real], s: usize, cin: usize, st: &mut Vec<Stencil>, col: &mut [Real]) {
    for t in 0..l.taps {
        tap_stencils(l, offsets, s, t, st);
        for ci in 0..cin {
            let xc = &x[(s * cin + ci) * l.ivol..(s * cin + ci + 1) * l.ivol];
            let row = &mut col[(ci * l.taps + t) * l.p..(ci * l.taps + t + 1) * l.p];
            for (o, stn) in row.iter_mut().zip(st.iter()) {
                *o = stn.sample(xc);
            }
        }
    }
}

/// Gradients of a deformable convolution.
#[derive(Debug, Default)]
pub struct DeformGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
    pub doffsets: Option<Tensor>,
}

/// Backward rule of [`deform_conv_forward`]. Derivatives with respect to the
/// offsets are one-sided at integer sampling coordinates.
pub fn deform_conv_backward(
    x: &Tensor,
    w: &Tensor,
    offsets: &Tensor,
    dout: &Tensor,
    spec: &ConvSpec,
    need: [bool; 3],
) -> Result<DeformGrads> {
    let [need_dx, need_dw, need_doff] = need;
    let l = check(x, w, offsets, spec)?;
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    if dout.shape() != shape_from3(l.n, cout, l.osp, l.rank).as_slice() {
        return Err(shape_err!("upstream gradient shape {:?} does not match output", dout.shape()));
    }
    let lead = 3 - l.rank;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut doff = need_doff.then(|| Tensor::zeros(offsets.shape()));
    let mut st = Vec::with_capacity(l.p);
    let off_stride = l.rank * l.taps * l.p;

    if spec.groups == 1 {
        let kdim = cin * l.taps;
        let mut col = vec![0.0; kdim * l.p];
        let mut dcol = vec![0.0; kdim * l.p];
        for s in 0..l.n {
            let ds = &dout.data()[s * cout * l.p..(s + 1) * cout * l.p];
            if let Some(dw) = dw.as_mut() {
                fill_columns(&l, x.data(), offsets.data(), s, cin, &mut st, &mut col);
                gemm(cout, l.p, kdim, ds, false, &col, true, dw.data_mut(), 1.0);
            }
            if !(need_dx || need_doff) {
                continue;
            }
            gemm(kdim, cout, l.p, w.data(), true, ds, false, &mut dcol, 0.0);
            for t in 0..l.taps {
                tap_stencils(&l, offsets.data(), s, t, &mut st);
                for ci in 0..cin {
                    let xo = (s * cin + ci) * l.ivol;
                    let row = &dcol[(ci * l.taps + t) * l.p..(ci * l.taps + t + 1) * l.p];
                    let xc = &x.data()[xo..xo + l.ivol];
                    let mut dxc = dx.as_mut().map(|d| &mut d.data_mut()[xo..xo + l.ivol]);
                    let mut od = doff.as_mut().map(|d| &mut d.data_mut()[s * off_stride + t * l.rank * l.p..]);
                    for (pi, (&g, stn)) in row.iter().zip(&st).enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        if let Some(dxc) = dxc.as_mut() {
                            for k in 0..stn.n {
                                dxc[stn.idx[k]] += g * stn.w[k];
                            }
                        }
                        if let Some(od) = od.as_mut() {
                            let mut ga = [0.0; 3];
                            for k in 0..stn.n {
                                let xv = xc[stn.idx[k]];
                                ga[0] += stn.dw[0][k] * xv;
                                ga[1] += stn.dw[1][k] * xv;
                                ga[2] += stn.dw[2][k] * xv;
                            }
                            for a in 0..l.rank {
                                od[a * l.p + pi] += g * ga[lead + a];
                            }
                        }
                    }
                }
            }
        }
    } else {
        for s in 0..l.n {
            for t in 0..l.taps {
                tap_stencils(&l, offsets.data(), s, t, &mut st);
                for c in 0..cout {
                    let wt = w.data()[c * l.taps + t];
                    let xo = (s * cin + c) * l.ivol;
                    let dc = &dout.data()[(s * cout + c) * l.p..(s * cout + c + 1) * l.p];
                    let xc = &x.data()[xo..xo + l.ivol];
                    if let Some(dw) = dw.as_mut() {
                        let acc: Real = dc.iter().zip(&st).map(|(&g, stn)| g * stn.sample(xc)).sum();
                        dw.data_mut()[c * l.taps + t] += acc;
                    }
                    if let Some(doff) = doff.as_mut() {
                        let od = &mut doff.data_mut()[s * off_stride..(s + 1) * off_stride];
                        for a in 0..l.rank {
                            let dst = &mut od[(t * l.rank + a) * l.p..(t * l.rank + a + 1) * l.p];
                            for ((d, &g), stn) in dst.iter_mut().zip(dc).zip(&st) {
                                *d += g * wt * stn.grad(xc, lead + a);
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let xg = &mut dx.data_mut()[xo..xo + l.ivol];
                        for (&g, stn) in dc.iter().zip(&st) {
                            let gw = g * wt;
                            for k in 0..stn.n {
                                xg[stn.idx[k]] += gw * stn.w[k];
                            }
                        }
                    }
                }
            }
        }
    }
    let db = if spec.bias {
        let mut db = vec![0.0; cout];
        for (i, chunk) in dout.data().chunks(l.p.max(1)).enumerate().take(l.n * cout) {
            db[i % cout] += chunk.iter().sum::<Real>();
        }
        Some(Tensor::new(&[cout], db)?)
    } else {
        None
    };
    Ok(DeformGrads { dx, dw, db, doffsets: doff })
}

/// Deformable depthwise convolution on images (the 2D DDW / DDW-D layers).
pub fn deform_conv_depthwise2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    offsets: &OffsetField,
    spec: &DeformSpec,
) -> Result<Tensor> {
    spec.validate()?;
    if spec.base.rank != 2 || !spec.base.is_depthwise() {
        return Err(invalid!("deform_conv_depthwise2d needs a rank-2 depthwise spec"));
    }
    deform_conv_forward(x, w, b, offsets.tensor(), &spec.base)
}

/// Dense deformable convolution on volumes (the single 3D deformable layer).
pub fn deform_conv_dense3d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    offsets: &OffsetField,
    spec: &DeformSpec,
) -> Result<Tensor> {
    spec.validate()?;
    if spec.base.rank != 3 || spec.base.groups != 1 {
        return Err(invalid!("deform_conv_dense3d needs a rank-3 dense spec"));
    }
    deform_conv_forward(x, w, b, offsets.tensor(), &spec.base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn pixel(x: &Tensor, c: usize, y: isize, xx: isize) -> Real {
        let (h, w) = (x.shape()[2] as isize, x.shape()[3] as isize);
        if y < 0 || xx < 0 || y >= h || xx >= w {
            0.0
        } else {
            x.at(&[0, c, y as usize, xx as usize])
        }
    }

    /// Direct four-neighbour weighted sum.
    fn bilinear_oracle(x: &Tensor, c: usize, py: Real, px: Real) -> Real {
        let (y0, x0) = (py.floor(), px.floor());
        let (fy, fx) = (py - y0, px - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        (1.0 - fy) * (1.0 - fx) * pixel(x, c, y0, x0)
            + (1.0 - fy) * fx * pixel(x, c, y0, x0 + 1)
            + fy * (1.0 - fx) * pixel(x, c, y0 + 1, x0)
            + fy * fx * pixel(x, c, y0 + 1, x0 + 1)
    }

    #[test]
    fn integer_points_are_exact() {
        let x = Tensor::uniform(&[1, 2, 4, 5], -1.0, 1.0, &mut rng(0));
        let s = grid_sample_linear(&x, &[[1.0, 2.0]]).unwrap();
        assert_eq!(s.at(&[0, 0, 0]), x.at(&[0, 0, 1, 2]));
        assert_eq!(s.at(&[0, 1, 0]), x.at(&[0, 1, 1, 2]));
    }

    #[test]
    fn midpoint_is_average() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![2.0, 6.0]).unwrap();
        let s = grid_sample_linear(&x, &[[0.0, 0.5]]).unwrap();
        assert_eq!(s.data(), &[4.0]);
    }

    #[test]
    fn nan_coordinate_is_error() {
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(grid_sample_linear(&x, &[[Real::NAN, 0.0]]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn random_points_match_four_neighbour_oracle() {
        let mut r = rng(1);
        let x = Tensor::uniform(&[1, 2, 7, 9], -1.0, 1.0, &mut r);
        let pts: Vec<[Real; 2]> = (0..1000).map(|_| [r.random_range(-1.5..8.0), r.random_range(-1.5..10.0)]).collect();
        let s = grid_sample_linear(&x, &pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            for c in 0..2 {
                assert!((s.at(&[0, c, i]) - bilinear_oracle(&x, c, p[0], p[1])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn weights_sum_to_one_in_bounds() {
        let mut r = rng(2);
        for _ in 0..200 {
            let pos = [r.random_range(0.0..3.0), r.random_range(0.0..4.0), r.random_range(0.0..2.0)];
            let st = stencil(pos, [4, 5, 3], 0);
            assert_eq!(st.n, 8);
            let total: Real = st.w[..8].iter().sum();
            assert!((total - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn piecewise_linear_within_cell() {
        let mut r = rng(3);
        let x = Tensor::uniform(&[1, 1, 5, 5, 5], -1.0, 1.0, &mut r);
        for _ in 0..100 {
            let base = [r.random_range(0..4) as Real, r.random_range(0..4) as Real, r.random_range(0..4) as Real];
            let p1: Vec<Real> = base.iter().map(|b| b + r.random_range(0.0..1.0)).collect();
            let p2: Vec<Real> = base.iter().map(|b| b + r.random_range(0.0..1.0)).collect();
            let a: Real = r.random_range(0.0..1.0);
            // restricted to a segment inside one cell, trilinear is linear along axis-aligned
            // moves; test along a single axis to stay within the multilinear regime
            let mut q1 = p1.clone();
            let mut q2 = p1.clone();
            q1[1] = p1[1];
            q2[1] = p2[1];
            let mid: Vec<Real> = q1.iter().zip(&q2).map(|(u, v)| a * u + (1.0 - a) * v).collect();
            let s = grid_sample_linear(&x, &[q1, q2, mid]).unwrap();
            let want = a * s.data()[0] + (1.0 - a) * s.data()[1];
            assert!((s.data()[2] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn offset_conv_zero_weights_give_zero_field() {
        let spec = DeformSpec::new(ConvSpec::depthwise(2, 4, 5));
        let os = spec.offset_spec();
        let x = Tensor::uniform(&[1, 4, 6, 6], -1.0, 1.0, &mut rng(4));
        let f = offset_conv(&x, &Tensor::zeros(&os.weight_shape()), &Tensor::zeros(&[os.out_channels]), &spec).unwrap();
        assert_eq!(f.tensor().shape(), &[1, 50, 6, 6]);
        assert!(f.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn offset_conv_parameter_counts() {
        let k5 = DeformSpec::new(ConvSpec::depthwise(2, 32, 5)).offset_spec();
        assert_eq!(k5.param_count(), 40_050);
        let k7 = DeformSpec::new(ConvSpec::depthwise(2, 32, 7).with_dilation(3)).offset_spec();
        assert_eq!(k7.param_count(), 153_762);
    }

    #[test]
    fn zero_offsets_match_rigid_conv() {
        let mut r = rng(5);
        for (spec, shape) in [
            (ConvSpec::depthwise(2, 3, 5), vec![2, 3, 7, 8]),
            (ConvSpec::depthwise(2, 3, 7).with_dilation(3), vec![1, 3, 9, 9]),
            (ConvSpec::dense(3, 2, 3, 3), vec![1, 2, 4, 5, 3]),
            (ConvSpec::dense(3, 3, 2, 1), vec![2, 3, 3, 3, 2]),
        ] {
            let x = Tensor::uniform(&shape, -1.0, 1.0, &mut r);
            let w = Tensor::uniform(&spec.weight_shape(), -1.0, 1.0, &mut r);
            let b = Tensor::uniform(&[spec.out_channels], -1.0, 1.0, &mut r);
            let od = spec.output_dims(&shape[2..]).unwrap();
            let off = OffsetField::zeros(shape[0], spec.rank, spec.taps(), &od);
            let got = deform_conv_forward(&x, &w, Some(&b), off.tensor(), &spec).unwrap();
            let want = conv_forward(&x, &w, Some(&b), &spec).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn constant_integer_offset_is_shift() {
        let mut r = rng(6);
        let spec = ConvSpec::depthwise(2, 2, 3);
        let x = Tensor::uniform(&[1, 2, 10, 10], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&spec.weight_shape(), -1.0, 1.0, &mut r);
        let mut off = Tensor::zeros(&[1, 18, 10, 10]);
        for t in 0..9 {
            for y in 0..10 {
                for xx in 0..10 {
                    off.set(&[0, t * 2, y, xx], 1.0);
                }
            }
        }
        let got = deform_conv_forward(&x, &w, None, &off, &spec).unwrap();
        // sampling at +1 row equals convolving the input shifted up by one row
        let shifted = Tensor::from_fn(x.shape(), |i| if i[2] + 1 < 10 { x.at(&[i[0], i[1], i[2] + 1, i[3]]) } else { 0.0 });
        let want = conv_forward(&shifted, &w, None, &spec).unwrap();
        for c in 0..2 {
            for y in 1..8 {
                for xx in 1..9 {
                    assert!((got.at(&[0, c, y, xx]) - want.at(&[0, c, y, xx])).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn fractional_offsets_match_naive_loop() {
        let mut r = rng(7);
        let spec = ConvSpec::depthwise(2, 2, 3).with_dilation(2);
        let x = Tensor::uniform(&[1, 2, 6, 7], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&spec.weight_shape(), -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[2], -1.0, 1.0, &mut r);
        let off = Tensor::uniform(&[1, 18, 6, 7], -2.0, 2.0, &mut r);
        let got = deform_conv_forward(&x, &w, Some(&b), &off, &spec).unwrap();
        for c in 0..2 {
            for y in 0..6 {
                for xx in 0..7 {
                    let mut acc = b.at(&[c]);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let t = ky * 3 + kx;
                            let py = (y + 2 * ky) as Real - 2.0 + off.at(&[0, 2 * t, y, xx]);
                            let px = (xx + 2 * kx) as Real - 2.0 + off.at(&[0, 2 * t + 1, y, xx]);
                            acc += w.at(&[c, 0, ky, kx]) * bilinear_oracle(&x, c, py, px);
                        }
                    }
                    assert!((got.at(&[0, c, y, xx]) - acc).abs() <= 1e-12);
                }
            }
        }
    }

    /// Trilinear sample of one channel of a single-sample volume, zero padded.
    fn trilinear_oracle(x: &Tensor, c: usize, p: [Real; 3]) -> Real {
        let dims = [x.shape()[2], x.shape()[3], x.shape()[4]];
        let f: Vec<Real> = p.iter().map(|v| v.floor()).collect();
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut wgt = 1.0;
            let mut idx = [0isize; 3];
            for a in 0..3 {
                let hi = (corner >> (2 - a)) & 1 == 1;
                let fr = p[a] - f[a];
                idx[a] = f[a] as isize + hi as isize;
                wgt *= if hi { fr } else { 1.0 - fr };
            }
            if idx.iter().zip(&dims).all(|(&i, &d)| i >= 0 && i < d as isize) {
                acc += wgt * x.at(&[0, c, idx[0] as usize, idx[1] as usize, idx[2] as usize]);
            }
        }
        acc
    }

    #[test]
    fn dense3d_matches_naive_loop() {
        let mut r = rng(8);
        let spec = DeformSpec::new(ConvSpec::dense(3, 2, 3, 3));
        let x = Tensor::uniform(&[1, 2, 4, 3, 5], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&spec.base.weight_shape(), -1.0, 1.0, &mut r);
        let off = OffsetField::new(Tensor::uniform(&[1, 81, 4, 3, 5], -1.5, 1.5, &mut r), 3, 27).unwrap();
        let got = deform_conv_dense3d(&x, &w, None, &off, &spec).unwrap();
        for co in 0..3 {
            for o0 in 0..4 {
                for o1 in 0..3 {
                    for o2 in 0..5 {
                        let mut acc = 0.0;
                        for t in 0..27 {
                            let k = [t / 9, (t / 3) % 3, t % 3];
                            let o = [o0, o1, o2];
                            let mut p = [0.0; 3];
                            for a in 0..3 {
                                p[a] = (o[a] + k[a]) as Real - 1.0 + off.tensor().at(&[0, 3 * t + a, o0, o1, o2]);
                            }
                            for ci in 0..2 {
                                acc += w.at(&[co, ci, k[0], k[1], k[2]]) * trilinear_oracle(&x, ci, p);
                            }
                        }
                        assert!((got.at(&[0, co, o0, o1, o2]) - acc).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pointwise_3d_with_zero_offsets_mixes_channels() {
        let mut r = rng(9);
        let spec = DeformSpec::new(ConvSpec::dense(3, 2, 2, 1).with_bias(false));
        let x = Tensor::uniform(&[1, 2, 2, 3, 2], -1.0, 1.0, &mut r);
        let w = Tensor::new(&[2, 2, 1, 1, 1], vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        let off = OffsetField::zeros(1, 3, 1, &[2, 3, 2]);
        let y = deform_conv_dense3d(&x, &w, None, &off, &spec).unwrap();
        let c0 = x.crop(&[0, 1, 0, 0, 0], &[1, 1, 2, 3, 2]).unwrap();
        let c1 = x.crop(&[0, 0, 0, 0, 0], &[1, 1, 2, 3, 2]).unwrap().scale(2.0);
        assert_eq!(y.crop(&[0, 0, 0, 0, 0], &[1, 1, 2, 3, 2]).unwrap(), c0);
        assert_eq!(y.crop(&[0, 1, 0, 0, 0], &[1, 1, 2, 3, 2]).unwrap(), c1);
    }

    #[test]
    fn shape_mismatch_errors() {
        let spec = DeformSpec::new(ConvSpec::depthwise(2, 2, 3));
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let w = Tensor::zeros(&spec.base.weight_shape());
        let bad = OffsetField::zeros(1, 2, 9, &[4, 5]);
        assert!(deform_conv_depthwise2d(&x, &w, None, &bad, &spec).is_err());
        assert!(OffsetField::new(Tensor::zeros(&[1, 17, 5, 5]), 2, 9).is_err());
        let dense3 = DeformSpec::new(ConvSpec::dense(3, 2, 2, 3));
        assert!(deform_conv_dense3d(&x, &w, None, &OffsetField::zeros(1, 2, 9, &[5, 5]), &dense3).is_err());
        let mut mismatched = DeformSpec::new(ConvSpec::depthwise(2, 2, 3));
        mismatched.offset_kernel = vec![5, 5];
        assert!(mismatched.validate().is_err());
    }
}

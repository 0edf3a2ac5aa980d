//! Gradient checks for every differentiable operator and layer, on small
//! random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::conv::ConvSpec;
use crate::gradcheck::{gradcheck, gradcheck_layer, GradCheckConfig, GradReport};
use crate::lka::{DlkaBlock2d, DlkaBlock3d, LkaAttention, LkaSpec};
use crate::loss::LossConfig;
use crate::nn::{ConvTranspose, ParamStore, PatchEmbed, PatchExpand, Session};
use crate::tensor::{LabelMap, Tensor};
use crate::Result;

/// One named check, runnable for any seed.
pub struct GradCase {
    pub name: &'static str,
    run: fn(u64, &GradCheckConfig) -> Result<GradReport>,
}

impl GradCase {
    pub fn run(&self, seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
        (self.run)(seed, cfg)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(17))
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Sampling offsets at least 0.05 away from integers, so no central
/// difference straddles a kink of the linear interpolation.
fn rand_offsets(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, -1.6, 1.6, r);
    for v in t.data_mut() {
        if (*v - v.round()).abs() < 0.05 {
            *v += 0.25;
        }
    }
    t
}

/// Replace freshly initialized parameters by random ones. Offset networks
/// get tiny weights and a 0.25 bias, keeping sampling points off the
/// integer grid.
fn randomize(st: &mut ParamStore, r: &mut ChaCha8Rng) {
    for (name, t) in st.iter_mut() {
        let shape = t.shape().to_vec();
        *t = if name.contains(".offset.w") {
            Tensor::uniform(&shape, -0.003, 0.003, r)
        } else if name.contains(".offset.b") {
            Tensor::full(&shape, 0.25)
        } else {
            Tensor::uniform(&shape, -0.5, 0.5, r)
        };
    }
}

fn named(inputs: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn conv_case(name: &str, spec: ConvSpec, x_shape: &[usize], seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut r = rng(seed);
    let ins = named(vec![
        ("x", rand_t(x_shape, &mut r)),
        ("w", rand_t(&spec.weight_shape(), &mut r)),
        ("b", rand_t(&[spec.out_channels], &mut r)),
    ]);
    gradcheck(name, &ins, &[], &|g: &mut Graph, v: &[Var]| g.conv(v[0], v[1], Some(v[2]), &spec), seed, cfg)
}

fn layer_case<L>(
    name: &str,
    layer: L,
    init: impl Fn(&L, &mut ParamStore, &mut ChaCha8Rng) -> Result<()>,
    forward: impl Fn(&L, &mut Session, Var) -> Result<Var>,
    x_shape: &[usize],
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradReport> {
    let mut r = rng(seed);
    let mut st = ParamStore::new();
    init(&layer, &mut st, &mut r)?;
    randomize(&mut st, &mut r);
    let x = rand_t(x_shape, &mut r);
    gradcheck_layer(name, &st, &x, &|s, v| forward(&layer, s, v), seed, cfg)
}

fn arith(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut r = rng(seed);
    let ins = named(vec![
        ("a", rand_t(&[2, 3, 4], &mut r)),
        ("b", rand_t(&[2, 3, 4], &mut r)),
        ("row", rand_t(&[1, 3, 1], &mut r)),
    ]);
    let op = |g: &mut Graph, v: &[Var]| {
        let m = g.mul(v[0], v[1])?;
        let m = g.mul(m, v[2])?;
        let s = g.sub(m, v[2])?;
        let a = g.add(s, v[0])?;
        Ok(g.scale(a, 1.5))
    };
    gradcheck("add_sub_mul", &ins, &[], &op, seed, cfg)
}

fn sum_op(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut r = rng(seed);
    let ins = named(vec![("x", rand_t(&[3, 4], &mut r))]);
    gradcheck("sum", &ins, &[], &|g: &mut Graph, v: &[Var]| Ok(g.sum(v[0])), seed, cfg)
}

fn gelu(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut r = rng(seed);
    let ins = named(vec![("x", rand_t(&[2, 3, 5], &mut r).scale(3.0))]);
    gradcheck("gelu", &ins, &[], &|g: &mut Graph, v: &[Var]| Ok(g.gelu(v[0])), seed, cfg)
}

fn layer_norm(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut r = rng(seed);
    let ins = named(vec![
        ("x", rand_t(&[2, 5, 3, 2], &mut r).scale(2.0)),
        ("scale", rand_t(&[5], &mut r)),
        ("shift", rand_t(&[5], &mut r)),
    ]);
    let op = |g: &mut Graph, v: &[Var]| g.layer_norm(v[0], v[1], v[2], 1e-6);
    gradcheck("layer_norm", &ins, &[], &op, seed, cfg)
}

fn scale_channels(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut r = rng(seed);
    let ins = named(vec![("x", rand_t(&[2, 3, 4], &mut r)), ("gamma", rand_t(&[3], &mut r))]);
    let op = |g: &mut Graph, v: &[Var]| g.scale_channels(v[0], v[1]);
    gradcheck("scale_channels", &ins, &[], &op, seed, cfg)
}

fn conv2d(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    conv_case("conv2d", ConvSpec::dense(2, 2, 3, 3), &[2, 2, 5, 4], seed, cfg)
}

fn conv2d_strided(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let spec = ConvSpec::dense(2, 2, 3, 3).with_stride(&[2, 2]);
    conv_case("conv2d_strided", spec, &[1, 2, 7, 6], seed, cfg)
}

fn conv3d(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let spec = ConvSpec::dense(3, 2, 2, 3).with_dilation(2).with_stride(&[2, 1, 2]);
    conv_case("conv3d", spec, &[1, 2, 5, 4, 6], seed, cfg)
}

fn conv_pointwise(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    conv_case("conv_pointwise", ConvSpec::dense(3, 3, 2, 1), &[2, 3, 2, 3, 2], seed, cfg)
}

fn dwconv2d(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let spec = ConvSpec::depthwise(2, 3, 3).with_dilation(2);
    conv_case("dwconv2d_dilated", spec, &[2, 3, 6, 5], seed, cfg)
}

fn dwconv3d(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    conv_case("dwconv3d", ConvSpec::depthwise(3, 2, 3), &[1, 2, 4, 3, 4], seed, cfg)
}

fn transpose(name: &'static str, spec: ConvSpec, y_shape: &[usize], seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let up = ConvTranspose::new("up", spec);
    layer_case(name, up, |l, st, r| l.init(st, r), |l, s, v| l.forward(s, v, None), y_shape, seed, cfg)
}

fn conv_transpose2d(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    transpose("conv_transpose2d", ConvSpec::patch(2, 2, 3, &[2, 2]), &[1, 3, 3, 2], seed, cfg)
}

fn conv_transpose3d(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    transpose("conv_transpose3d", ConvSpec::patch(3, 2, 3, &[2, 2, 1]), &[1, 3, 2, 3, 2], seed, cfg)
}

fn deform_dw2d(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut r = rng(seed);
    let spec = ConvSpec::depthwise(2, 2, 3).with_dilation(2);
    let ins = named(vec![
        ("x", rand_t(&[1, 2, 5, 6], &mut r)),
        ("w", rand_t(&spec.weight_shape(), &mut r)),
        ("b", rand_t(&[2], &mut r)),
        ("offsets", rand_offsets(&[1, 18, 5, 6], &mut r)),
    ]);
    let op = |g: &mut Graph, v: &[Var]| g.deform_conv(v[0], v[1], Some(v[2]), v[3], &spec);
    gradcheck("deform_dw2d", &ins, &[], &op, seed, cfg)
}

fn deform_dense3d(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut r = rng(seed);
    let spec = ConvSpec::dense(3, 2, 2, 3);
    let ins = named(vec![
        ("x", rand_t(&[1, 2, 3, 4, 3], &mut r)),
        ("w", rand_t(&spec.weight_shape(), &mut r)),
        ("b", rand_t(&[2], &mut r)),
        ("offsets", rand_offsets(&[1, 81, 3, 4, 3], &mut r)),
    ]);
    let op = |g: &mut Graph, v: &[Var]| g.deform_conv(v[0], v[1], Some(v[2]), v[3], &spec);
    gradcheck("deform_dense3d", &ins, &[], &op, seed, cfg)
}

fn patch_embed(rank: usize, seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let shape: Vec<usize> = if rank == 2 { vec![1, 1, 8, 8] } else { vec![1, 1, 8, 8, 4] };
    let name = if rank == 2 { "patch_embed2d" } else { "patch_embed3d" };
    layer_case(name, PatchEmbed::new("stem", rank, 1, 2), |l, st, r| l.init(st, r), |l, s, v| l.forward(s, v), &shape, seed, cfg)
}

fn patch_expand(rank: usize, seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let shape: Vec<usize> = if rank == 2 { vec![1, 4, 2, 3] } else { vec![1, 4, 2, 2, 1] };
    let name = if rank == 2 { "patch_expand2d" } else { "patch_expand3d" };
    layer_case(name, PatchExpand::new("up", rank, 4), |l, st, r| l.init(st, r), |l, s, v| l.forward(s, v), &shape, seed, cfg)
}

fn attention(rank: usize, seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let (spec, shape, name) = if rank == 2 {
        (LkaSpec::new(2, 2, 5, 2), vec![1, 2, 5, 6], "lka_attention2d")
    } else {
        (LkaSpec::new(3, 2, 3, 1), vec![1, 2, 3, 4, 3], "lka_attention3d")
    };
    let a = LkaAttention::new("attn", spec);
    layer_case(name, a, |l, st, r| l.init(st, r), |l, s, v| l.forward(s, v), &shape, seed, cfg)
}

fn block2d(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let b = DlkaBlock2d::new("b", LkaSpec::new(2, 4, 5, 2), 2);
    layer_case("dlka_block2d", b, |l, st, r| l.init(st, r), |l, s, v| l.forward(s, v), &[1, 4, 5, 5], seed, cfg)
}

fn block3d(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let b = DlkaBlock3d::new("b", LkaSpec::new(3, 4, 3, 1));
    layer_case("dlka_block3d", b, |l, st, r| l.init(st, r), |l, s, v| l.forward(s, v), &[1, 4, 3, 3, 4], seed, cfg)
}

fn dice_ce(seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut r = rng(seed);
    let labels = LabelMap::new(&[2, 3, 4], (0..24).map(|_| r.random_range(0..3u8)).collect())?;
    let ins = named(vec![("logits", rand_t(&[2, 3, 3, 4], &mut r).scale(2.0))]);
    let lc = LossConfig::default();
    let op = move |g: &mut Graph, v: &[Var]| Ok(g.dice_ce(v[0], &labels, &lc)?.0);
    gradcheck("dice_ce", &ins, &[], &op, seed, cfg)
}

/// Every check, cheapest first.
pub fn standard_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "add_sub_mul", run: arith },
        GradCase { name: "sum", run: sum_op },
        GradCase { name: "gelu", run: gelu },
        GradCase { name: "layer_norm", run: layer_norm },
        GradCase { name: "scale_channels", run: scale_channels },
        GradCase { name: "conv2d", run: conv2d },
        GradCase { name: "conv2d_strided", run: conv2d_strided },
        GradCase { name: "conv3d", run: conv3d },
        GradCase { name: "conv_pointwise", run: conv_pointwise },
        GradCase { name: "dwconv2d_dilated", run: dwconv2d },
        GradCase { name: "dwconv3d", run: dwconv3d },
        GradCase { name: "conv_transpose2d", run: conv_transpose2d },
        GradCase { name: "conv_transpose3d", run: conv_transpose3d },
        GradCase { name: "deform_dw2d", run: deform_dw2d },
        GradCase { name: "deform_dense3d", run: deform_dense3d },
        GradCase { name: "patch_embed2d", run: |s, c| patch_embed(2, s, c) },
        GradCase { name: "patch_embed3d", run: |s, c| patch_embed(3, s, c) },
        GradCase { name: "patch_expand2d", run: |s, c| patch_expand(2, s, c) },
        GradCase { name: "patch_expand3d", run: |s, c| patch_expand(3, s, c) },
        GradCase { name: "dice_ce", run: dice_ce },
        GradCase { name: "lka_attention2d", run: |s, c| attention(2, s, c) },
        GradCase { name: "lka_attention3d", run: |s, c| attention(3, s, c) },
        GradCase { name: "dlka_block2d", run: block2d },
        GradCase { name: "dlka_block3d", run: block3d },
    ]
}

/// Run the cases whose name contains `filter` (all when empty).
pub fn run_suite(filter: &str, seeds: &[u64], cfg: &GradCheckConfig) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for case in standard_cases().iter().filter(|c| c.name.contains(filter)) {
        for &seed in seeds {
            out.push(case.run(seed, cfg)?);
        }
    }
    Ok(out)
}

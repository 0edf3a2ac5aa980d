//! Large-kernel attention built from a depthwise convolution, a dilated
//! depthwise convolution and a pointwise convolution, with optional
//! deformable sampling, plus the 2D and 3D transformer-style blocks around
//! it.

use rand::Rng;

use crate::autograd::Var;
use crate::conv::ConvSpec;
use crate::error::invalid;
use crate::nn::{ChannelScale, Conv, LayerNorm, ParamStore, Sampler, Session};
use crate::Result;

/// Kernel geometry of one attention module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LkaSpec {
    pub rank: usize,
    pub channels: usize,
    /// Large kernel size being approximated.
    pub kernel: usize,
    /// Dilation of the second depthwise convolution.
    pub dilation: usize,
    pub deformable: bool,
    /// Kernel of the dense convolution that follows the depthwise pair in
    /// volumes.
    pub volume_kernel: usize,
}

impl LkaSpec {
    pub fn new(rank: usize, channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            rank,
            channels,
            kernel,
            dilation,
            deformable: true,
            volume_kernel: 3,
        }
    }

    pub fn rigid(mut self) -> Self {
        self.deformable = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank != 2 && self.rank != 3 {
            return Err(invalid!("attention rank must be 2 or 3, got {}", self.rank));
        }
        if self.channels == 0 || self.kernel == 0 || self.dilation == 0 {
            return Err(invalid!(
                "channels, kernel and dilation must be positive (got {}, {}, {})",
                self.channels,
                self.kernel,
                self.dilation
            ));
        }
        if self.dilation > self.kernel {
            return Err(invalid!("dilation {} exceeds kernel {}", self.dilation, self.kernel));
        }
        if self.volume_kernel.is_multiple_of(2) {
            return Err(invalid!("volume kernel must be odd, got {}", self.volume_kernel));
        }
        Ok(())
    }

    /// Kernel of the plain depthwise convolution, `2d - 1`.
    pub fn dw_kernel(&self) -> usize {
        2 * self.dilation - 1
    }

    /// Kernel of the dilated depthwise convolution, `ceil(K / d)`.
    pub fn dwd_kernel(&self) -> usize {
        self.kernel.div_ceil(self.dilation)
    }

    pub fn dw_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.rank, self.channels, self.dw_kernel())
    }

    pub fn dwd_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.rank, self.channels, self.dwd_kernel()).with_dilation(self.dilation)
    }

    /// Per-axis support of the depthwise pair in taps.
    pub fn support(&self) -> usize {
        receptive_support(self.kernel, self.dilation)
    }
}

/// Per-axis extent covered by a `(2d-1)` depthwise convolution followed by a
/// `ceil(K/d)` depthwise convolution with dilation `d`.
pub fn receptive_support(kernel: usize, dilation: usize) -> usize {
    (2 * dilation - 1) + dilation * (kernel.div_ceil(dilation) - 1)
}

/// Extent of `blocks` stacked operators that each cover `support` taps.
pub fn stacked_support(support: usize, blocks: usize) -> usize {
    if blocks == 0 {
        1
    } else {
        blocks * (support - 1) + 1
    }
}

/// `F' = act(proj_in F)`, `A = conv(dwd(dw F'))`, output
/// `proj_out(A * F') + F`. Volumes insert a dense `volume_kernel` convolution
/// (deformable when the module is) between the dilated depthwise
/// convolution and the pointwise one; images make both depthwise
/// convolutions deformable instead.
#[derive(Clone, Debug)]
pub struct LkaAttention {
    pub spec: LkaSpec,
    pub proj_in: Conv,
    pub dw: Sampler,
    pub dwd: Sampler,
    pub volume: Option<Sampler>,
    pub conv: Conv,
    pub proj_out: Conv,
}

impl LkaAttention {
    pub fn new(name: &str, spec: LkaSpec) -> Self {
        let (r, c) = (spec.rank, spec.channels);
        let deform_dw = spec.deformable && r == 2;
        let volume = (r == 3).then(|| {
            Sampler::new(
                &format!("{name}.volume"),
                ConvSpec::dense(3, c, c, spec.volume_kernel),
                spec.deformable,
            )
        });
        Self {
            proj_in: Conv::new(format!("{name}.proj_in"), ConvSpec::dense(r, c, c, 1)),
            dw: Sampler::new(&format!("{name}.dw"), spec.dw_spec(), deform_dw),
            dwd: Sampler::new(&format!("{name}.dwd"), spec.dwd_spec(), deform_dw),
            volume,
            conv: Conv::new(format!("{name}.conv"), ConvSpec::dense(r, c, c, 1)),
            proj_out: Conv::new(format!("{name}.proj_out"), ConvSpec::dense(r, c, c, 1).with_bias(false)),
            spec,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.spec.validate()?;
        self.proj_in.init(store, rng)?;
        self.dw.init(store, rng)?;
        self.dwd.init(store, rng)?;
        if let Some(v) = &self.volume {
            v.init(store, rng)?;
        }
        self.conv.init(store, rng)?;
        self.proj_out.init(store, rng)
    }

    /// Attention map `A` for an already projected input `F'`.
    pub fn attention(&self, s: &mut Session, fp: Var) -> Result<Var> {
        let a = self.dw.forward(s, fp)?;
        let a = self.dwd.forward(s, a)?;
        let a = match &self.volume {
            Some(v) => v.forward(s, a)?,
            None => a,
        };
        self.conv.forward(s, a)
    }

    pub fn forward(&self, s: &mut Session, f: Var) -> Result<Var> {
        let fp = self.proj_in.forward(s, f)?;
        let fp = s.act(fp);
        let a = self.attention(s, fp)?;
        let gated = s.graph.mul(a, fp)?;
        let out = self.proj_out.forward(s, gated)?;
        s.graph.add(out, f)
    }

    /// Parameters of the two depthwise convolutions and the pointwise
    /// convolution producing `A`, biases included, offset networks excluded.
    pub fn decomposition_params(&self) -> usize {
        self.dw.core_param_count() + self.dwd.core_param_count() + self.conv.param_count()
    }

    /// Parameters of every offset network in the module.
    pub fn offset_params(&self) -> usize {
        self.dw.offset_param_count()
            + self.dwd.offset_param_count()
            + self.volume.as_ref().map_or(0, |v| v.offset_param_count())
    }
}

/// Image block: `x1 = x + gamma * attn(LN x)`,
/// `out = x1 + fc2(act(dw3x3(fc1(LN x1))))`.
///
/// The attention carries its own residual, so the branch is scaled by a
/// per-channel `gamma` that starts at zero; `fc2` also starts at zero, which
/// makes a fresh block the identity.
#[derive(Clone, Debug)]
pub struct DlkaBlock2d {
    pub norm1: LayerNorm,
    pub attn: LkaAttention,
    pub gamma: ChannelScale,
    pub norm2: LayerNorm,
    pub fc1: Conv,
    pub dw: Conv,
    pub fc2: Conv,
}

impl DlkaBlock2d {
    pub fn new(name: &str, spec: LkaSpec, mlp_ratio: usize) -> Self {
        let c = spec.channels;
        let h = c * mlp_ratio.max(1);
        Self {
            norm1: LayerNorm::new(format!("{name}.norm1"), c),
            attn: LkaAttention::new(&format!("{name}.attn"), spec),
            gamma: ChannelScale {
                name: format!("{name}.gamma"),
                channels: c,
            },
            norm2: LayerNorm::new(format!("{name}.norm2"), c),
            fc1: Conv::new(format!("{name}.mlp.fc1"), ConvSpec::dense(2, c, h, 1)),
            dw: Conv::new(format!("{name}.mlp.dw"), ConvSpec::depthwise(2, h, 3)),
            fc2: Conv::new(format!("{name}.mlp.fc2"), ConvSpec::dense(2, h, c, 1)).zero_init(),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        if self.attn.spec.rank != 2 {
            return Err(invalid!("image block needs a rank-2 attention spec"));
        }
        self.norm1.init(store)?;
        self.attn.init(store, rng)?;
        self.gamma.init(store)?;
        self.norm2.init(store)?;
        self.fc1.init(store, rng)?;
        self.dw.init(store, rng)?;
        self.fc2.init(store, rng)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let n = self.norm1.forward(s, x)?;
        let a = self.attn.forward(s, n)?;
        let a = self.gamma.forward(s, a)?;
        let x1 = s.graph.add(x, a)?;
        let n = self.norm2.forward(s, x1)?;
        let h = self.fc1.forward(s, n)?;
        let h = self.dw.forward(s, h)?;
        let h = s.act(h);
        let h = self.fc2.forward(s, h)?;
        s.graph.add(x1, h)
    }
}

/// Volume block: `x1 = x + gamma * attn(LN x)`,
/// `out = x1 + conv1(act(conv3(x1)))` with a zero-initialized `conv1`.
#[derive(Clone, Debug)]
pub struct DlkaBlock3d {
    pub norm: LayerNorm,
    pub attn: LkaAttention,
    pub gamma: ChannelScale,
    pub conv3: Conv,
    pub conv1: Conv,
}

impl DlkaBlock3d {
    pub fn new(name: &str, spec: LkaSpec) -> Self {
        let c = spec.channels;
        Self {
            norm: LayerNorm::new(format!("{name}.norm"), c),
            attn: LkaAttention::new(&format!("{name}.attn"), spec),
            gamma: ChannelScale {
                name: format!("{name}.gamma"),
                channels: c,
            },
            conv3: Conv::new(format!("{name}.ffn.conv3"), ConvSpec::dense(3, c, c, 3)),
            conv1: Conv::new(format!("{name}.ffn.conv1"), ConvSpec::dense(3, c, c, 1)).zero_init(),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        if self.attn.spec.rank != 3 {
            return Err(invalid!("volume block needs a rank-3 attention spec"));
        }
        self.norm.init(store)?;
        self.attn.init(store, rng)?;
        self.gamma.init(store)?;
        self.conv3.init(store, rng)?;
        self.conv1.init(store, rng)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let n = self.norm.forward(s, x)?;
        let a = self.attn.forward(s, n)?;
        let a = self.gamma.forward(s, a)?;
        let x1 = s.graph.add(x, a)?;
        let h = self.conv3.forward(s, x1)?;
        let h = s.act(h);
        let h = self.conv1.forward(s, h)?;
        s.graph.add(x1, h)
    }
}

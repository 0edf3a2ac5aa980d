//! Encoder-decoder segmentation networks built from D-LKA blocks.
//!
//! Volumes: patch embedding, `encoder_stages` stages of D-LKA blocks joined
//! by strided downsampling, a bottleneck, and a mirrored decoder that
//! upsamples with transpose convolutions and adds skip features.
//!
//! Images: patch embedding, a plain residual convolutional encoder, and a
//! decoder of D-LKA stages each followed by a patch expansion.
//!
//! Skip level 0 is the raw input at full resolution; level `i > 0` is the
//! output of encoder stage `i - 1`. With `skip_count = k` only levels
//! `0..k` are fused, so skips disappear from the coarsest level first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::conv::ConvSpec;
use crate::error::{invalid, shape_err};
use crate::lka::{receptive_support, stacked_support, DlkaBlock2d, DlkaBlock3d, LkaSpec};
use crate::nn::{Conv, ConvTranspose, LayerNorm, ParamStore, PatchEmbed, PatchExpand, Session};
use crate::{Result, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub rank: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels after the patch embedding; doubled by every downsampling.
    pub base_channels: usize,
    pub encoder_stages: usize,
    /// Blocks per encoder stage (residual conv blocks for images).
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Volumes only.
    pub bottleneck_blocks: usize,
    pub skip_count: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub deformable: bool,
    /// Hidden width multiplier of the image block MLP.
    pub mlp_ratio: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::volume()
    }
}

impl NetConfig {
    pub fn volume() -> Self {
        Self {
            rank: 3,
            in_channels: 1,
            num_classes: 3,
            base_channels: 16,
            encoder_stages: 3,
            encoder_blocks: 3,
            decoder_blocks: 3,
            bottleneck_blocks: 2,
            skip_count: 4,
            kernel: 21,
            dilation: 3,
            deformable: true,
            mlp_ratio: 4,
        }
    }

    pub fn image() -> Self {
        Self {
            rank: 2,
            encoder_stages: 4,
            encoder_blocks: 1,
            decoder_blocks: 2,
            bottleneck_blocks: 0,
            ..Self::volume()
        }
    }

    /// Defaults for the given rank.
    pub fn for_rank(rank: usize) -> Self {
        if rank == 2 {
            Self::image()
        } else {
            Self::volume()
        }
    }

    /// Number of places a skip connection can enter the decoder.
    pub fn skip_levels(&self) -> usize {
        if self.rank == 2 {
            self.encoder_stages
        } else {
            self.encoder_stages + 1
        }
    }

    pub fn lka(&self, channels: usize) -> LkaSpec {
        LkaSpec {
            deformable: self.deformable,
            ..LkaSpec::new(self.rank, channels, self.kernel, self.dilation)
        }
    }

    /// Channels at encoder level `i` (0 = right after the patch embedding).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// The same network with rigid attention.
    pub fn rigid(&self) -> Self {
        Self {
            deformable: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank != 2 && self.rank != 3 {
            return Err(invalid!("rank must be 2 or 3, got {}", self.rank));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(invalid!("need at least one input channel and two classes"));
        }
        if self.encoder_stages == 0 || self.encoder_stages > 6 {
            return Err(invalid!("encoder_stages must be in 1..=6, got {}", self.encoder_stages));
        }
        if self.rank == 2 && self.encoder_stages < 2 {
            return Err(invalid!("image networks need at least 2 encoder stages"));
        }
        if self.base_channels < 4 || !self.base_channels.is_multiple_of(4) {
            return Err(invalid!("base_channels must be a positive multiple of 4, got {}", self.base_channels));
        }
        if self.skip_count > self.skip_levels() {
            return Err(invalid!("skip_count {} exceeds {} skip levels", self.skip_count, self.skip_levels()));
        }
        if self.mlp_ratio == 0 {
            return Err(invalid!("mlp_ratio must be positive"));
        }
        self.lka(self.base_channels).validate()
    }

    /// Required divisor of each spatial extent.
    pub fn divisor(&self) -> Vec<usize> {
        let downs = 1usize << (self.encoder_stages - usize::from(self.rank == 2));
        if self.rank == 2 {
            vec![4 * downs; 2]
        } else {
            vec![4 * downs, 4 * downs, 2 * downs]
        }
    }

    pub fn check_input_dims(&self, dims: &[usize]) -> Result<()> {
        let div = self.divisor();
        if dims.len() != self.rank || dims.iter().zip(&div).any(|(&d, &k)| d == 0 || d % k != 0) {
            return Err(shape_err!("spatial extents {dims:?} must be positive multiples of {div:?}"));
        }
        Ok(())
    }
}

/// `x + conv2(act(LN(conv1 x)))`, `conv2` zero-initialized.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv,
    pub norm: LayerNorm,
    pub conv2: Conv,
}

impl ConvBlock {
    pub fn new(name: &str, rank: usize, channels: usize) -> Self {
        Self {
            conv1: Conv::new(format!("{name}.conv1"), ConvSpec::dense(rank, channels, channels, 3)),
            norm: LayerNorm::new(format!("{name}.norm"), channels),
            conv2: Conv::new(format!("{name}.conv2"), ConvSpec::dense(rank, channels, channels, 3)).zero_init(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv1.init(store, rng)?;
        self.norm.init(store)?;
        self.conv2.init(store, rng)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.norm.forward(s, h)?;
        let h = s.act(h);
        let h = self.conv2.forward(s, h)?;
        s.graph.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Conv(ConvBlock),
    Image(DlkaBlock2d),
    Volume(DlkaBlock3d),
}

impl Block {
    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        match self {
            Block::Conv(b) => b.init(store, rng),
            Block::Image(b) => b.init(store, rng),
            Block::Volume(b) => b.init(store, rng),
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            Block::Conv(b) => b.forward(s, x),
            Block::Image(b) => b.forward(s, x),
            Block::Volume(b) => b.forward(s, x),
        }
    }

    pub fn attention(&self) -> Option<&crate::lka::LkaAttention> {
        match self {
            Block::Conv(_) => None,
            Block::Image(b) => Some(&b.attn),
            Block::Volume(b) => Some(&b.attn),
        }
    }
}

/// A run of blocks at one resolution.
#[derive(Clone, Debug)]
pub struct Stage {
    pub name: String,
    /// Downsampling factor relative to the input, per axis.
    pub factor: Vec<usize>,
    pub channels: usize,
    pub blocks: Vec<Block>,
}

impl Stage {
    fn forward(&self, s: &mut Session, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(s, x)?;
        }
        Ok(x)
    }

    fn is_attention(&self) -> bool {
        self.blocks.iter().any(|b| b.attention().is_some())
    }
}

/// Per-stage analytic receptive field of the attention blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSupport {
    pub stage: String,
    pub factor: Vec<usize>,
    pub blocks: usize,
    /// Taps per axis covered by one block's depthwise pair.
    pub block_support: usize,
    /// Taps per axis covered by all blocks of the stage.
    pub stacked_support: usize,
    /// `stacked_support` in input pixels per axis.
    pub input_extent: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Upsample {
    Transpose(ConvTranspose),
    Expand(PatchExpand),
}

impl Upsample {
    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        match self {
            Upsample::Transpose(t) => t.init(store, rng),
            Upsample::Expand(e) => e.init(store, rng),
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            Upsample::Transpose(t) => t.forward(s, x, None),
            Upsample::Expand(e) => e.forward(s, x),
        }
    }
}

/// One decoder level: optional blocks before the upsampling (images) or
/// after the skip fusion (volumes).
#[derive(Clone, Debug)]
struct DecoderLevel {
    pre: Option<Stage>,
    up: Upsample,
    /// Skip level fused right after `up`.
    skip_level: Option<usize>,
    post: Option<Stage>,
}

#[derive(Clone, Debug)]
pub struct Net {
    pub cfg: NetConfig,
    pub stem: PatchEmbed,
    pub encoder: Vec<Stage>,
    downsample: Vec<Conv>,
    pub bottleneck: Option<Stage>,
    decoder: Vec<DecoderLevel>,
    /// Extra upsampling back to full resolution after the decoder levels.
    tail: Vec<Upsample>,
    /// Fusion conv per kept skip level, indexed by level.
    skips: Vec<Option<Conv>>,
    head: Vec<Conv>,
}

impl Net {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.rank == 3 {
            Ok(Self::volume(cfg))
        } else {
            Ok(Self::image(cfg))
        }
    }

    fn volume(cfg: &NetConfig) -> Self {
        let r = 3;
        let c0 = cfg.base_channels;
        let stem = PatchEmbed::new("stem", r, cfg.in_channels, c0);
        let stem_factor = stem.factor();
        let scaled = |level: usize| stem_factor.iter().map(|f| f << level).collect::<Vec<_>>();
        let dlka_stage = |name: String, level: usize, n: usize| Stage {
            blocks: (0..n)
                .map(|j| Block::Volume(DlkaBlock3d::new(&format!("{name}.block{j}"), cfg.lka(cfg.channels(level)))))
                .collect(),
            name,
            factor: scaled(level),
            channels: cfg.channels(level),
        };
        let e = cfg.encoder_stages;
        let encoder: Vec<Stage> = (0..e).map(|i| dlka_stage(format!("enc{i}"), i, cfg.encoder_blocks)).collect();
        let downsample = (0..e)
            .map(|i| Conv::new(format!("down{i}"), ConvSpec::patch(r, cfg.channels(i), cfg.channels(i + 1), &[2; 3])))
            .collect();
        let bottleneck = Some(dlka_stage("bottleneck".into(), e, cfg.bottleneck_blocks));
        let decoder = (0..e)
            .rev()
            .map(|i| DecoderLevel {
                pre: None,
                up: Upsample::Transpose(ConvTranspose::new(
                    format!("dec{i}.up"),
                    ConvSpec::patch(r, cfg.channels(i), cfg.channels(i + 1), &[2; 3]),
                )),
                skip_level: Some(i + 1),
                post: Some(dlka_stage(format!("dec{i}"), i, cfg.decoder_blocks)),
            })
            .collect();
        let ch = c0 / 4;
        let tail = vec![Upsample::Transpose(ConvTranspose::new(
            "final.up",
            ConvSpec::patch(r, ch, c0, &stem_factor),
        ))];
        let skip_channels: Vec<(usize, usize)> = (0..=e)
            .map(|l| if l == 0 { (cfg.in_channels, ch) } else { (cfg.channels(l - 1), cfg.channels(l - 1)) })
            .collect();
        let head = vec![
            Conv::new("head.conv3", ConvSpec::dense(r, ch, ch, 3)),
            Conv::new("head.conv1", ConvSpec::dense(r, ch, cfg.num_classes, 1)),
        ];
        Self {
            cfg: cfg.clone(),
            stem,
            encoder,
            downsample,
            bottleneck,
            decoder,
            tail,
            skips: Self::skip_convs(cfg, r, &skip_channels),
            head,
        }
    }

    fn image(cfg: &NetConfig) -> Self {
        let r = 2;
        let c0 = cfg.base_channels;
        let stem = PatchEmbed::new("stem", r, cfg.in_channels, c0);
        let stem_factor = stem.factor();
        let scaled = |level: usize| stem_factor.iter().map(|f| f << level).collect::<Vec<_>>();
        let e = cfg.encoder_stages;
        let encoder: Vec<Stage> = (0..e)
            .map(|i| {
                let name = format!("enc{i}");
                Stage {
                    blocks: (0..cfg.encoder_blocks)
                        .map(|j| Block::Conv(ConvBlock::new(&format!("{name}.block{j}"), r, cfg.channels(i))))
                        .collect(),
                    name,
                    factor: scaled(i),
                    channels: cfg.channels(i),
                }
            })
            .collect();
        let downsample = (0..e - 1)
            .map(|i| Conv::new(format!("down{i}"), ConvSpec::patch(r, cfg.channels(i), cfg.channels(i + 1), &[2; 2])))
            .collect();
        let decoder = (0..e)
            .rev()
            .map(|i| {
                let name = format!("dec{i}");
                DecoderLevel {
                    pre: Some(Stage {
                        blocks: (0..cfg.decoder_blocks)
                            .map(|j| {
                                Block::Image(DlkaBlock2d::new(
                                    &format!("{name}.block{j}"),
                                    cfg.lka(cfg.channels(i)),
                                    cfg.mlp_ratio,
                                ))
                            })
                            .collect(),
                        name: name.clone(),
                        factor: scaled(i),
                        channels: cfg.channels(i),
                    }),
                    up: Upsample::Expand(PatchExpand::new(&format!("{name}.expand"), r, cfg.channels(i))),
                    // The input skip enters after the tail instead.
                    skip_level: (i > 0).then_some(i),
                    post: None,
                }
            })
            .collect();
        let tail = vec![Upsample::Expand(PatchExpand::new("final.expand", r, c0 / 2))];
        let ch = c0 / 4;
        let skip_channels: Vec<(usize, usize)> = (0..e)
            .map(|l| if l == 0 { (cfg.in_channels, ch) } else { (cfg.channels(l - 1), cfg.channels(l - 1)) })
            .collect();
        let head = vec![Conv::new("head.conv1", ConvSpec::dense(r, ch, cfg.num_classes, 1))];
        Self {
            cfg: cfg.clone(),
            stem,
            encoder,
            downsample,
            bottleneck: None,
            decoder,
            tail,
            skips: Self::skip_convs(cfg, r, &skip_channels),
            head,
        }
    }

    fn skip_convs(cfg: &NetConfig, rank: usize, channels: &[(usize, usize)]) -> Vec<Option<Conv>> {
        channels
            .iter()
            .enumerate()
            .map(|(l, &(cin, cout))| {
                (l < cfg.skip_count).then(|| {
                    let k = if l == 0 { 3 } else { 1 };
                    Conv::new(format!("skip{l}"), ConvSpec::dense(rank, cin, cout, k))
                })
            })
            .collect()
    }

    /// Deterministic parameters for `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        let rng = &mut rng;
        self.stem.init(&mut st, rng)?;
        for (i, stage) in self.encoder.iter().enumerate() {
            for b in &stage.blocks {
                b.init(&mut st, rng)?;
            }
            if let Some(d) = self.downsample.get(i) {
                d.init(&mut st, rng)?;
            }
        }
        if let Some(b) = &self.bottleneck {
            for blk in &b.blocks {
                blk.init(&mut st, rng)?;
            }
        }
        for lvl in &self.decoder {
            for stage in [&lvl.pre, &lvl.post].into_iter().flatten() {
                for b in &stage.blocks {
                    b.init(&mut st, rng)?;
                }
            }
            lvl.up.init(&mut st, rng)?;
        }
        for t in &self.tail {
            t.init(&mut st, rng)?;
        }
        for c in self.skips.iter().flatten() {
            c.init(&mut st, rng)?;
        }
        for c in &self.head {
            c.init(&mut st, rng)?;
        }
        Ok(st)
    }

    /// Logits at the input resolution.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.value(x).shape().to_vec();
        if shape.len() != self.cfg.rank + 2 || shape[1] != self.cfg.in_channels {
            return Err(shape_err!(
                "expected input (N, {}, {} spatial axes), got {shape:?}",
                self.cfg.in_channels,
                self.cfg.rank
            ));
        }
        self.cfg.check_input_dims(&shape[2..])?;

        let mut features = vec![x];
        let mut h = self.stem.forward(s, x)?;
        for (i, stage) in self.encoder.iter().enumerate() {
            h = stage.forward(s, h)?;
            features.push(h);
            if let Some(d) = self.downsample.get(i) {
                h = d.forward(s, h)?;
            }
        }
        if let Some(b) = &self.bottleneck {
            h = b.forward(s, h)?;
        }
        for lvl in &self.decoder {
            if let Some(p) = &lvl.pre {
                h = p.forward(s, h)?;
            }
            h = lvl.up.forward(s, h)?;
            if let Some(l) = lvl.skip_level {
                h = self.fuse(s, h, &features, l)?;
            }
            if let Some(p) = &lvl.post {
                h = p.forward(s, h)?;
            }
        }
        for t in &self.tail {
            h = t.forward(s, h)?;
        }
        h = self.fuse(s, h, &features, 0)?;
        let (last, rest) = self.head.split_last().expect("head is never empty");
        for c in rest {
            h = c.forward(s, h)?;
            h = s.act(h);
        }
        last.forward(s, h)
    }

    fn fuse(&self, s: &mut Session, h: Var, features: &[Var], level: usize) -> Result<Var> {
        match self.skips.get(level).and_then(Option::as_ref) {
            Some(conv) => {
                let f = conv.forward(s, features[level])?;
                s.graph.add(h, f)
            }
            None => Ok(h),
        }
    }

    /// Inference on a batch.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut s = Session::inference(store);
        let v = s.input(x.clone());
        let y = self.forward(&mut s, v)?;
        Ok(s.value(y).clone())
    }

    /// Every stage containing attention blocks, encoder to decoder.
    pub fn attention_stages(&self) -> Vec<&Stage> {
        let dec = self.decoder.iter().flat_map(|l| [&l.pre, &l.post]).flatten();
        self.encoder
            .iter()
            .chain(self.bottleneck.iter())
            .chain(dec)
            .filter(|s| s.is_attention())
            .collect()
    }

    pub fn receptive_field_report(&self) -> Vec<StageSupport> {
        self.attention_stages()
            .into_iter()
            .map(|st| {
                let block = receptive_support(self.cfg.kernel, self.cfg.dilation);
                let stacked = stacked_support(block, st.blocks.len());
                StageSupport {
                    stage: st.name.clone(),
                    factor: st.factor.clone(),
                    blocks: st.blocks.len(),
                    block_support: block,
                    stacked_support: stacked,
                    input_extent: st.factor.iter().map(|f| f * stacked).collect(),
                }
            })
            .collect()
    }

    /// Names of the skip fusion convolutions in use.
    pub fn skip_names(&self) -> Vec<String> {
        self.skips.iter().flatten().map(|c| c.name.clone()).collect()
    }
}

/// Build and initialize a network in one step.
pub fn net_init(cfg: &NetConfig, seed: u64) -> Result<(Net, ParamStore)> {
    let net = Net::new(cfg)?;
    let st = net.init(seed)?;
    Ok((net, st))
}

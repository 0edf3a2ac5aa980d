//! Flat `key = value` run configuration with `[section]` headers and `#`
//! comments.
//!
//! A key inside `[lka]` named `K` is addressed as `lka.K`; the same dotted
//! name may also be written outside any section. Settings not mentioned take
//! the defaults of the configured rank.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::loss::LossConfig;
use crate::net::NetConfig;
use crate::tensor::Real;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn for_rank(rank: usize) -> Self {
        if rank == 2 {
            Self {
                epochs: 40,
                batch_size: 4,
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
                loss: LossConfig::default(),
            }
        } else {
            Self {
                epochs: 60,
                batch_size: 2,
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 3e-5,
                loss: LossConfig::default(),
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("train.momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        let (a, b) = (self.loss.dice_weight, self.loss.ce_weight);
        if !(a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0 && a + b > 0.0) {
            return bad(format!("loss weights must be non-negative and not both zero, got {a} and {b}"));
        }
        Ok(())
    }
}

/// Synthetic dataset size and sample extents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataConfig {
    pub samples: usize,
    pub dims: Vec<usize>,
}

impl DataConfig {
    pub fn for_rank(rank: usize) -> Self {
        if rank == 2 {
            Self {
                samples: 128,
                dims: vec![64, 64],
            }
        } else {
            Self {
                samples: 64,
                dims: vec![32, 32, 16],
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_rank(3)
    }
}

const KEYS: &[&str] = &[
    "net.rank",
    "net.in_channels",
    "net.num_classes",
    "net.base_channels",
    "net.encoder_stages",
    "net.encoder_blocks",
    "net.decoder_blocks",
    "net.bottleneck_blocks",
    "net.skip_count",
    "net.mlp_ratio",
    "lka.K",
    "lka.d",
    "lka.deformable",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.dice_weight",
    "train.ce_weight",
    "data.samples",
    "data.dims",
];

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}` as {}", std::any::type_name::<T>())))
}

impl RunConfig {
    pub fn for_rank(rank: usize) -> Self {
        Self {
            net: NetConfig::for_rank(rank),
            train: TrainConfig::for_rank(rank),
            data: DataConfig::for_rank(rank),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = no + 1;
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {lineno}: unterminated section header")))?
                    .trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(Error::Config(format!("line {lineno}: bad section name `{name}`")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected key = value, got `{line}`")))?;
            let k = k.trim();
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("line {lineno}: unknown key `{key}`")));
            }
            if entries.insert(key.clone(), (lineno, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {lineno}: duplicate key `{key}`")));
            }
        }

        let rank = match entries.get("net.rank") {
            Some((_, v)) => parse_value::<usize>("net.rank", v)?,
            None => 3,
        };
        if rank != 2 && rank != 3 {
            return Err(Error::Config(format!("`net.rank` must be 2 or 3, got {rank}")));
        }
        let mut cfg = Self::for_rank(rank);
        for (key, (_, v)) in &entries {
            let k = key.as_str();
            let n = &mut cfg.net;
            let t = &mut cfg.train;
            match k {
                "net.rank" => {}
                "net.in_channels" => n.in_channels = parse_value(k, v)?,
                "net.num_classes" => n.num_classes = parse_value(k, v)?,
                "net.base_channels" => n.base_channels = parse_value(k, v)?,
                "net.encoder_stages" => n.encoder_stages = parse_value(k, v)?,
                "net.encoder_blocks" => n.encoder_blocks = parse_value(k, v)?,
                "net.decoder_blocks" => n.decoder_blocks = parse_value(k, v)?,
                "net.bottleneck_blocks" => n.bottleneck_blocks = parse_value(k, v)?,
                "net.skip_count" => n.skip_count = parse_value(k, v)?,
                "net.mlp_ratio" => n.mlp_ratio = parse_value(k, v)?,
                "lka.K" => n.kernel = parse_value(k, v)?,
                "lka.d" => n.dilation = parse_value(k, v)?,
                "lka.deformable" => n.deformable = parse_value(k, v)?,
                "train.epochs" => t.epochs = parse_value(k, v)?,
                "train.batch_size" => t.batch_size = parse_value(k, v)?,
                "train.lr" => t.lr = parse_value(k, v)?,
                "train.momentum" => t.momentum = parse_value(k, v)?,
                "train.weight_decay" => t.weight_decay = parse_value(k, v)?,
                "train.dice_weight" => t.loss.dice_weight = parse_value(k, v)?,
                "train.ce_weight" => t.loss.ce_weight = parse_value(k, v)?,
                "data.samples" => cfg.data.samples = parse_value(k, v)?,
                "data.dims" => {
                    cfg.data.dims = v
                        .split(',')
                        .map(|p| parse_value(k, p.trim()))
                        .collect::<Result<Vec<usize>>>()?
                }
                _ => unreachable!("key list and match arms disagree on `{k}`"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("lka.K", self.net.kernel), ("lka.d", self.net.dilation)] {
            if v == 0 {
                return Err(Error::Config(format!("`{key}` must be at least 1")));
            }
        }
        self.net
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        self.net
            .check_input_dims(&self.data.dims)
            .map_err(|e| Error::Config(format!("data.dims: {e}")))
    }

    /// Canonical text form; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let n = &self.net;
        let t = &self.train;
        let mut s = String::new();
        let dims: Vec<String> = self.data.dims.iter().map(|d| d.to_string()).collect();
        // Writing to a String cannot fail.
        let _ = write!(
            s,
            "[net]\nrank = {}\nin_channels = {}\nnum_classes = {}\nbase_channels = {}\n\
             encoder_stages = {}\nencoder_blocks = {}\ndecoder_blocks = {}\nbottleneck_blocks = {}\n\
             skip_count = {}\nmlp_ratio = {}\n\n[lka]\nK = {}\nd = {}\ndeformable = {}\n\n\
             [train]\nepochs = {}\nbatch_size = {}\nlr = {:?}\nmomentum = {:?}\nweight_decay = {:?}\n\
             dice_weight = {:?}\nce_weight = {:?}\n\n[data]\nsamples = {}\ndims = {}\n",
            n.rank,
            n.in_channels,
            n.num_classes,
            n.base_channels,
            n.encoder_stages,
            n.encoder_blocks,
            n.decoder_blocks,
            n.bottleneck_blocks,
            n.skip_count,
            n.mlp_ratio,
            n.kernel,
            n.dilation,
            n.deformable,
            t.epochs,
            t.batch_size,
            t.lr,
            t.momentum,
            t.weight_decay,
            t.loss.dice_weight,
            t.loss.ce_weight,
            self.data.samples,
            dims.join(", "),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.net.rank, c.net.kernel, c.net.dilation, c.net.deformable), (3, 21, 3, true));
        let c = RunConfig::parse("# only a comment\n\n").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn dotted_and_sectioned_keys() {
        let c = RunConfig::parse("lka.K=13\n").unwrap();
        assert_eq!(c.net.lka(8).dwd_kernel(), 5);
        let c = RunConfig::parse("[lka]\nK = 13 # inline\n[train]\nlr=0.5\n").unwrap();
        assert_eq!((c.net.kernel, c.train.lr), (13, 0.5));
    }

    #[test]
    fn rank_switches_defaults() {
        let c = RunConfig::parse("[net]\nrank = 2\n").unwrap();
        assert_eq!(c, RunConfig::for_rank(2));
        assert_eq!(c.train.batch_size, 4);
    }

    #[test]
    fn errors() {
        for bad in [
            "lka.d=0",
            "lka.K=abc",
            "lka.deformable=maybe",
            "[lka]\nk=3",
            "nonsense=1",
            "[net\nrank=3",
            "just words",
            "lka.K=7\nlka.K=9",
            "net.rank=4",
            "data.dims=30,32,16",
            "train.momentum=1.0",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        let e = RunConfig::parse("[lka]\nwidth = 3").unwrap_err().to_string();
        assert!(e.contains("lka.width"), "{e}");
    }

    #[test]
    fn text_round_trip() {
        for rank in [2, 3] {
            let mut c = RunConfig::for_rank(rank);
            c.train.lr = 0.1 + 0.2;
            c.net.skip_count = 2;
            let back = RunConfig::parse(&c.to_text()).unwrap();
            assert_eq!(back, c);
        }
    }
}

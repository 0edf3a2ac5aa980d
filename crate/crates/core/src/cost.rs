//! Closed-form parameter and FLOP counts for standard, decomposed and
//! deformable decomposed convolutions, and the dilation that minimizes the
//! decomposed parameter count.

use std::fmt;

use crate::error::invalid;
use crate::Result;

/// Whether the three depthwise/pointwise biases are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasMode {
    /// Count `C * 3` bias terms.
    Eq3,
    /// Weights only.
    Table,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostQuery {
    pub rank: usize,
    pub channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub spatial: Vec<usize>,
    pub bias_mode: BiasMode,
    /// Kernel sizes of the offset networks of the two depthwise layers.
    pub deform_kernels: (usize, usize),
}

impl CostQuery {
    /// Query at unit spatial extent, counting biases, with offset kernels
    /// matching the depthwise kernels.
    pub fn new(rank: usize, channels: usize, kernel: usize, dilation: usize) -> Self {
        let dw = 2 * dilation.max(1) - 1;
        let dwd = kernel.div_ceil(dilation.max(1));
        Self {
            rank,
            channels,
            kernel,
            dilation,
            spatial: vec![1; rank],
            bias_mode: BiasMode::Eq3,
            deform_kernels: (dw, dwd),
        }
    }

    pub fn with_spatial(mut self, spatial: &[usize]) -> Self {
        self.spatial = spatial.to_vec();
        self
    }

    pub fn with_bias_mode(mut self, mode: BiasMode) -> Self {
        self.bias_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank != 2 && self.rank != 3 {
            return Err(invalid!("rank must be 2 or 3, got {}", self.rank));
        }
        if self.kernel == 0 || self.dilation == 0 {
            return Err(invalid!("kernel and dilation must be at least 1"));
        }
        if self.spatial.len() != self.rank {
            return Err(invalid!("{} spatial extents for rank {}", self.spatial.len(), self.rank));
        }
        Ok(())
    }

    fn volume(&self) -> u64 {
        self.spatial.iter().map(|&v| v as u64).product()
    }
}

fn pow(v: usize, r: usize) -> u64 {
    (v as u64).pow(r as u32)
}

/// `C (ceil(K/d)^r + (2d-1)^r [+ 3] + C)`.
pub fn params_decomposed(q: &CostQuery) -> u64 {
    let c = q.channels as u64;
    let d = q.dilation.max(1);
    let kernel_terms = pow(q.kernel.div_ceil(d), q.rank) + pow(2 * d - 1, q.rank);
    let bias = match q.bias_mode {
        BiasMode::Eq3 => 3,
        BiasMode::Table => 0,
    };
    c * (kernel_terms + bias + c)
}

/// Dense `K^r` convolution from `C` to `C` channels without bias.
pub fn params_standard(channels: usize, kernel: usize, rank: usize) -> u64 {
    let c = channels as u64;
    c * c * pow(kernel, rank)
}

/// Dense biased convolution with kernel `k` predicting `r * k^r` offset
/// channels from `C_in` inputs.
pub fn params_offset_net(in_channels: usize, k: usize, rank: usize) -> u64 {
    let taps = pow(k, rank);
    let out = rank as u64 * taps;
    in_channels as u64 * out * taps + out
}

/// Decomposed parameter count times spatial volume.
pub fn flops(q: &CostQuery) -> u64 {
    params_decomposed(q) * q.volume()
}

/// Stationary point `d*` of the smooth relaxation
/// `(K/d)^2 + (2d-1)^2`, i.e. the root of `8d - 4 - 2K^2/d^3`, and the
/// integer dilation near it with the fewest decomposed parameters.
pub fn optimal_dilation(kernel: usize) -> Result<(f64, usize)> {
    if kernel < 2 {
        return Err(invalid!("optimal dilation needs K >= 2, got {kernel}"));
    }
    let k = kernel as f64;
    let g = |d: f64| 8.0 * d - 4.0 - 2.0 * k * k / (d * d * d);
    let (mut lo, mut hi) = (1.0, k);
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let d_star = 0.5 * (lo + hi);
    let p = |d: usize| params_decomposed(&CostQuery::new(2, 1, kernel, d).with_bias_mode(BiasMode::Table));
    let (fl, cl) = (d_star.floor() as usize, d_star.ceil() as usize);
    let d_int = if p(cl) < p(fl) { cl } else { fl };
    Ok((d_star, d_int))
}

/// Per-layer parameter breakdown of one deformable decomposed convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub query: CostQuery,
    pub params_std: u64,
    pub params_decomposed: u64,
    /// Offset networks of the two depthwise layers.
    pub params_offsets: [u64; 2],
    pub params_deform_total: u64,
    pub flops: u64,
    /// `(layer, parameters)` rows.
    pub rows: Vec<(String, u64)>,
}

pub fn cost_report(q: &CostQuery) -> Result<CostReport> {
    q.validate()?;
    let c = q.channels as u64;
    let d = q.dilation;
    let b = if q.bias_mode == BiasMode::Eq3 { c } else { 0 };
    let decomposed = params_decomposed(q);
    let offsets = [
        params_offset_net(q.channels, q.deform_kernels.0, q.rank),
        params_offset_net(q.channels, q.deform_kernels.1, q.rank),
    ];
    let rows = vec![
        (format!("dw {}^{}", 2 * d - 1, q.rank), c * pow(2 * d - 1, q.rank) + b),
        (
            format!("dw-d {}^{} dilation {}", q.kernel.div_ceil(d), q.rank, d),
            c * pow(q.kernel.div_ceil(d), q.rank) + b,
        ),
        ("pointwise".to_string(), c * c + b),
        (format!("offsets dw {}^{}", q.deform_kernels.0, q.rank), offsets[0]),
        (format!("offsets dw-d {}^{}", q.deform_kernels.1, q.rank), offsets[1]),
    ];
    Ok(CostReport {
        query: q.clone(),
        params_std: params_standard(q.channels, q.kernel, q.rank),
        params_decomposed: decomposed,
        params_offsets: offsets,
        params_deform_total: decomposed + offsets[0] + offsets[1],
        flops: flops(q),
        rows,
    })
}

/// One row of the comparison table, always in [`BiasMode::Table`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub channels: usize,
    pub std_conv: u64,
    pub decomposed: u64,
    pub deform_total: u64,
    pub offset_dw: u64,
    pub offset_dwd: u64,
}

impl CostRow {
    pub fn cells(&self) -> [u64; 5] {
        [self.std_conv, self.decomposed, self.deform_total, self.offset_dw, self.offset_dwd]
    }
}

pub fn cost_table(
    channels: &[usize],
    kernel: usize,
    dilation: usize,
    deform_kernels: (usize, usize),
    rank: usize,
) -> Result<Vec<CostRow>> {
    channels
        .iter()
        .map(|&c| {
            let mut q = CostQuery::new(rank, c, kernel, dilation).with_bias_mode(BiasMode::Table);
            q.deform_kernels = deform_kernels;
            let r = cost_report(&q)?;
            Ok(CostRow {
                channels: c,
                std_conv: r.params_std,
                decomposed: r.params_decomposed,
                deform_total: r.params_deform_total,
                offset_dw: r.params_offsets[0],
                offset_dwd: r.params_offsets[1],
            })
        })
        .collect()
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = &self.query;
        writeln!(
            f,
            "rank {} C {} K {} d {} spatial {:?} bias {:?}",
            q.rank, q.channels, q.kernel, q.dilation, q.spatial, q.bias_mode
        )?;
        for (name, n) in &self.rows {
            writeln!(f, "  {name:<28} {n:>14}")?;
        }
        writeln!(f, "  {:<28} {:>14}", "standard conv", self.params_std)?;
        writeln!(f, "  {:<28} {:>14}", "decomposed", self.params_decomposed)?;
        writeln!(f, "  {:<28} {:>14}", "deformable total", self.params_deform_total)?;
        write!(f, "  {:<28} {:>14}", "flops", self.flops)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decomposed_examples() {
        let q = CostQuery::new(2, 32, 21, 3);
        assert_eq!(params_decomposed(&q), 3_488);
        assert_eq!(params_decomposed(&q.clone().with_bias_mode(BiasMode::Table)), 3_392);
        let q = CostQuery::new(2, 512, 21, 3).with_bias_mode(BiasMode::Table);
        assert_eq!(params_decomposed(&q), 300_032);
    }

    #[test]
    fn standard_and_offset_examples() {
        assert_eq!(params_standard(32, 21, 2), 451_584);
        assert_eq!(params_standard(256, 21, 2), 28_901_376);
        assert_eq!(params_standard(1, 1, 2), 1);
        assert_eq!(params_offset_net(32, 5, 2), 40_050);
        assert_eq!(params_offset_net(64, 7, 2), 307_426);
        assert_eq!(params_offset_net(32, 1, 2), 66);
    }

    #[test]
    fn flops_examples() {
        let q = CostQuery::new(2, 32, 21, 3).with_bias_mode(BiasMode::Table).with_spatial(&[8, 8]);
        assert_eq!(flops(&q), 217_088);
        let q1 = CostQuery::new(2, 32, 21, 3);
        assert_eq!(flops(&q1), params_decomposed(&q1));
        let q3 = CostQuery::new(3, 16, 7, 2).with_spatial(&[2, 2, 2]);
        assert_eq!(flops(&q3), params_decomposed(&q3) * 8);
    }

    #[test]
    fn optimal_dilation_examples() {
        let (ds, di) = optimal_dilation(21).unwrap();
        assert!((ds - 3.37).abs() < 0.01, "{ds}");
        assert_eq!(di, 3);
        let (ds, di) = optimal_dilation(2).unwrap();
        assert!(ds > 1.0 && ds < 2.0);
        // P(2,1) = 4 + 1 = 5, P(2,2) = 1 + 9 = 10.
        assert_eq!(di, 1);
        assert!(optimal_dilation(1).is_err());
    }
}

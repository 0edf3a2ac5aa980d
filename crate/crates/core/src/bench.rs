//! Inference timing of a network with deformable attention on and off.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::invalid;
use crate::metrics::percentile;
use crate::net::{net_init, NetConfig};
use crate::tensor::{Real, Tensor};
use crate::Result;

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
    /// Concurrent inference workers; repetitions are shared among them.
    pub threads: usize,
    pub dims: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub deformable: bool,
    pub batch: usize,
    pub params: usize,
    pub repetitions: usize,
    pub mean_ms: Real,
    pub median_ms: Real,
    pub p95_ms: Real,
    /// `mean_ms / batch`.
    pub per_image_ms: Real,
}

pub const BENCH_HEADER: &str = "deformable,batch,params,repetitions,mean_ms,median_ms,p95_ms,per_image_ms";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4}",
            self.deformable,
            self.batch,
            self.params,
            self.repetitions,
            self.mean_ms,
            self.median_ms,
            self.p95_ms,
            self.per_image_ms
        )
    }
}

/// Time `repetitions` forward passes per batch size after `warmup`
/// untimed ones, for the deformable and the rigid variant of `net`.
/// No rows are produced when `repetitions` is zero.
pub fn bench(net: &NetConfig, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    net.check_input_dims(&cfg.dims)?;
    if cfg.batch_sizes.contains(&0) {
        return Err(invalid!("batch sizes must be positive"));
    }
    let mut rows = Vec::new();
    if cfg.repetitions == 0 {
        return Ok(rows);
    }
    let threads = cfg.threads.max(1);
    for deformable in [true, false] {
        let ncfg = NetConfig {
            deformable,
            ..net.clone()
        };
        let (model, params) = net_init(&ncfg, cfg.seed)?;
        for &b in &cfg.batch_sizes {
            let mut shape = vec![b, ncfg.in_channels];
            shape.extend_from_slice(&cfg.dims);
            let x = Tensor::uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
            for _ in 0..cfg.warmup {
                model.predict(&params, &x)?;
            }
            let mut times: Vec<Real> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..threads)
                    .map(|w| {
                        let reps = cfg.repetitions / threads + usize::from(w < cfg.repetitions % threads);
                        let (model, params, x) = (&model, &params, &x);
                        s.spawn(move || -> Result<Vec<Real>> {
                            (0..reps)
                                .map(|_| {
                                    let t = Instant::now();
                                    model.predict(params, x)?;
                                    Ok(t.elapsed().as_secs_f64() as Real * 1e3)
                                })
                                .collect()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("bench worker panicked"))
                    .collect::<Result<Vec<Vec<Real>>>>()
            })?
            .into_iter()
            .flatten()
            .collect();
            let mean = times.iter().sum::<Real>() / times.len() as Real;
            let median = percentile(&mut times, 50.0).unwrap_or(Real::NAN);
            let p95 = percentile(&mut times, 95.0).unwrap_or(Real::NAN);
            rows.push(BenchRow {
                deformable,
                batch: b,
                params: params.num_elements(),
                repetitions: times.len(),
                mean_ms: mean,
                median_ms: median,
                p95_ms: p95,
                per_image_ms: mean / b as Real,
            });
        }
    }
    Ok(rows)
}

//! Synthetic segmentation data: random ellipsoids and boxes, one or two per
//! foreground class, on a noisy background.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape_err};
use crate::tensor::{LabelMap, Real, Tensor};
use crate::Result;

/// Standard deviation of the additive intensity noise.
pub const NOISE_SIGMA: Real = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 1, spatial..)`.
    pub image: Tensor,
    /// `(1, spatial..)`.
    pub labels: LabelMap,
    /// Generator seed and sample index this sample came from.
    pub seed: u64,
    pub index: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Split batched images `(N, 1, spatial..)` and labels `(N, spatial..)`
    /// into samples. Provenance is set to seed 0 and the batch index.
    pub fn from_batch(images: &Tensor, labels: &LabelMap, num_classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() < 3 || shape[1] != 1 || labels.shape()[0] != shape[0] || labels.shape()[1..] != shape[2..] {
            return Err(shape_err!("images {:?} and labels {:?} do not pair up", shape, labels.shape()));
        }
        if labels.max_label().is_some_and(|m| m as usize >= num_classes) {
            return Err(invalid!("labels exceed {num_classes} classes"));
        }
        let vol: usize = shape[2..].iter().product();
        let mut one = shape.to_vec();
        one[0] = 1;
        let samples = (0..shape[0])
            .map(|i| {
                let image = Tensor::new(&one, images.data()[i * vol..(i + 1) * vol].to_vec())?;
                let lab = LabelMap::new(&one[1..], labels.data()[i * vol..(i + 1) * vol].to_vec())?;
                Ok(Sample {
                    image,
                    labels: lab,
                    seed: 0,
                    index: i as u64,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples, num_classes })
    }

    /// Seed-stable shuffle into training (first 80 %) and held-out indices.
    pub fn split(&self, seed: u64) -> Split {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        idx.shuffle(&mut rng);
        let n = self.len();
        let held = if n >= 2 { (n / 5).max(1) } else { 0 };
        let val = idx.split_off(n - held);
        Split { train: idx, val }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Mean intensity of `class`; background is 0 and the last class is 1.
pub fn class_mean(class: usize, num_classes: usize) -> Real {
    class as Real / (num_classes - 1) as Real
}

/// `n` samples with the given spatial extents. Sample `i` only depends on
/// `(seed, i)`.
pub fn synth_generate(rank: usize, n: usize, dims: &[usize], num_classes: usize, seed: u64) -> Result<Dataset> {
    if rank != 2 && rank != 3 {
        return Err(invalid!("rank must be 2 or 3, got {rank}"));
    }
    if dims.len() != rank || dims.iter().any(|&d| d < 4) {
        return Err(invalid!("need {rank} spatial extents of at least 4, got {dims:?}"));
    }
    if !(2..=255).contains(&num_classes) {
        return Err(invalid!("num_classes must be in 2..=255, got {num_classes}"));
    }
    let samples = (0..n as u64).map(|i| sample(dims, num_classes, seed, i)).collect();
    Ok(Dataset { samples, num_classes })
}

fn sample(dims: &[usize], num_classes: usize, seed: u64, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let vol: usize = dims.iter().product();
    let mut labels = vec![0u8; vol];
    for class in 1..num_classes {
        let shapes = rng.random_range(1..=2);
        for _ in 0..shapes {
            paint(&mut labels, dims, class as u8, &mut rng);
        }
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let data: Vec<Real> = labels
        .iter()
        .map(|&c| class_mean(c as usize, num_classes) + noise.sample(&mut rng))
        .collect();
    let mut shape = vec![1, 1];
    shape.extend_from_slice(dims);
    let image = Tensor::new(&shape, data).expect("shape matches buffer");
    let labels = LabelMap::new(&shape[1..], labels).expect("shape matches buffer");
    Sample {
        image,
        labels,
        seed,
        index,
    }
}

/// Paint one ellipsoid or box with random centre and semi-axes between 12 %
/// and 28 % of each extent.
fn paint(labels: &mut [u8], dims: &[usize], class: u8, rng: &mut ChaCha8Rng) {
    let r = dims.len();
    let ellipsoid = rng.random_bool(0.5);
    let mut centre = [0.0; 3];
    let mut semi = [1.0; 3];
    for a in 0..r {
        let n = dims[a] as Real;
        semi[a] = (n * rng.random_range(0.12..0.28)).max(1.0);
        centre[a] = rng.random_range(semi[a]..(n - semi[a]).max(semi[a] + 1.0));
    }
    let mut idx = [0usize; 3];
    for v in labels.iter_mut() {
        let mut inside = true;
        let mut q = 0.0;
        for a in 0..r {
            let t = (idx[a] as Real + 0.5 - centre[a]) / semi[a];
            q += t * t;
            inside &= t.abs() <= 1.0;
        }
        if (ellipsoid && q <= 1.0) || (!ellipsoid && inside) {
            *v = class;
        }
        for a in (0..r).rev() {
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

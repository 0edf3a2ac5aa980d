//! Training and evaluation loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::invalid;
use crate::metrics::{dice_metric, hd95_metric};
use crate::net::Net;
use crate::nn::{ParamStore, Session};
use crate::optim::OptimState;
use crate::synth::{Dataset, Split};
use crate::tensor::{stack_batch, LabelMap, Real, Tensor};
use crate::{Error, Result};

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Run configuration in the text format of [`RunConfig::to_text`].
    pub config: String,
    pub params: ParamStore,
    pub optim: OptimState,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: u64,
}

/// Held-out metrics. Per-class values average over samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Dice of classes `1..num_classes`.
    pub dice: Vec<Real>,
    pub dice_mean: Real,
    /// Mean over the (sample, class) pairs where both masks are non-empty;
    /// `None` if there are none.
    pub hd95_mean: Option<Real>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based index of the epoch just finished.
    pub epoch: u64,
    pub loss: Real,
    pub eval: Evaluation,
}

/// `epoch,loss,dice_mean,dice_c1..,hd95_mean`.
pub fn csv_header(num_classes: usize) -> String {
    let mut h = String::from("epoch,loss,dice_mean");
    for c in 1..num_classes {
        h.push_str(&format!(",dice_c{c}"));
    }
    h.push_str(",hd95_mean");
    h
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{:.6},{:.6}", self.epoch, self.loss, self.eval.dice_mean);
        for d in &self.eval.dice {
            r.push_str(&format!(",{d:.6}"));
        }
        match self.eval.hd95_mean {
            Some(h) => r.push_str(&format!(",{h:.6}")),
            None => r.push_str(",nan"),
        }
        r
    }
}

/// Per-voxel argmax over the class axis of `(N, K, spatial..)` logits.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    if logits.rank() < 3 {
        return Err(invalid!("logits must be (N, K, spatial..), got {:?}", logits.shape()));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let p: usize = logits.shape()[2..].iter().product();
    let d = logits.data();
    let mut out = vec![0u8; n * p];
    for s in 0..n {
        for i in 0..p {
            let mut best = 0;
            for c in 1..k {
                if d[(s * k + c) * p + i] > d[(s * k + best) * p + i] {
                    best = c;
                }
            }
            out[s * p + i] = best as u8;
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&logits.shape()[2..]);
    LabelMap::new(&shape, out)
}

/// Dice and HD95 of predicted against reference labels, both `(N, spatial..)`.
pub fn score(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<Evaluation> {
    if pred.shape() != truth.shape() {
        return Err(invalid!("prediction {:?} and reference {:?} differ in shape", pred.shape(), truth.shape()));
    }
    let n = pred.shape()[0];
    let dims = &pred.shape()[1..];
    let p: usize = dims.iter().product();
    let spacing = vec![1.0; dims.len()];
    let mut dice = vec![0.0; num_classes.saturating_sub(1)];
    let (mut hd_sum, mut hd_n) = (0.0, 0usize);
    for s in 0..n {
        let ps = &pred.data()[s * p..(s + 1) * p];
        let ts = &truth.data()[s * p..(s + 1) * p];
        for c in 1..num_classes {
            dice[c - 1] += dice_metric(ps, ts, c as u8)? / n.max(1) as Real;
            let pm: Vec<bool> = ps.iter().map(|&v| v as usize == c).collect();
            let tm: Vec<bool> = ts.iter().map(|&v| v as usize == c).collect();
            if let Some(h) = hd95_metric(&pm, &tm, dims, &spacing)? {
                hd_sum += h;
                hd_n += 1;
            }
        }
    }
    let dice_mean = if dice.is_empty() { 1.0 } else { dice.iter().sum::<Real>() / dice.len() as Real };
    Ok(Evaluation {
        dice,
        dice_mean,
        hd95_mean: (hd_n > 0).then(|| hd_sum / hd_n as Real),
    })
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Net,
    pub params: ParamStore,
    pub optim: OptimState,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = Net::new(&cfg.net)?;
        let params = net.init(seed)?;
        let t = &cfg.train;
        let optim = OptimState::new(t.lr, t.momentum, t.weight_decay);
        Ok(Self {
            cfg,
            net,
            params,
            optim,
            seed,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig::parse(&ck.config)?;
        let net = Net::new(&cfg.net)?;
        let fresh = net.init(ck.seed)?;
        let names: Vec<&str> = fresh.names().collect();
        let saved: Vec<&str> = ck.params.names().collect();
        if names != saved {
            return Err(Error::Format("checkpoint parameters do not match its configuration".into()));
        }
        for (name, t) in fresh.iter() {
            if ck.params.get(name)?.shape() != t.shape() {
                return Err(Error::Format(format!("checkpoint parameter {name} has the wrong shape")));
            }
        }
        Ok(Self {
            cfg,
            net,
            params: ck.params.clone(),
            optim: ck.optim.clone(),
            seed: ck.seed,
            epoch: ck.epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.to_text(),
            params: self.params.clone(),
            optim: self.optim.clone(),
            seed: self.seed,
            epoch: self.epoch,
        }
    }

    /// Loss of the current parameters on the given samples, without
    /// updating anything.
    pub fn loss_on(&self, data: &Dataset, idx: &[usize]) -> Result<Real> {
        let (x, y) = batch(data, idx)?;
        let mut s = Session::inference(&self.params);
        let v = s.input(x);
        let logits = self.net.forward(&mut s, v)?;
        let (_, lv) = s.graph.dice_ce(logits, &y, &self.cfg.train.loss)?;
        Ok(lv.total)
    }

    /// One SGD step on the given samples; returns the loss before the step.
    pub fn step(&mut self, data: &Dataset, idx: &[usize]) -> Result<Real> {
        let (x, y) = batch(data, idx)?;
        let mut s = Session::train(&self.params);
        let v = s.input(x);
        let logits = self.net.forward(&mut s, v).map_err(|e| diverged(e, self.epoch + 1))?;
        let (loss, lv) = s.graph.dice_ce(logits, &y, &self.cfg.train.loss)?;
        if !lv.total.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss {} in epoch {} (dice term {}, cross-entropy {})",
                lv.total,
                self.epoch + 1,
                lv.dice,
                lv.ce
            )));
        }
        let grads = s.graph.backward(loss)?;
        let grads = s.param_grads(&grads);
        drop(s);
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient for {name} in epoch {}", self.epoch + 1)));
        }
        self.optim.step(&mut self.params, &grads)?;
        if let Some((name, _)) = self.params.iter().find(|(_, p)| !p.all_finite()) {
            return Err(Error::Divergence(format!("parameter {name} overflowed in epoch {}", self.epoch + 1)));
        }
        Ok(lv.total)
    }

    /// One pass over `train` in an order fixed by `(seed, epoch)`. Returns
    /// the sample-weighted mean loss.
    pub fn train_epoch(&mut self, data: &Dataset, train: &[usize]) -> Result<Real> {
        if train.is_empty() {
            return Err(invalid!("no training samples"));
        }
        let mut order = train.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.train.batch_size) {
            total += self.step(data, chunk)? * chunk.len() as Real;
        }
        self.epoch += 1;
        Ok(total / order.len() as Real)
    }

    pub fn predict(&self, images: &Tensor) -> Result<LabelMap> {
        argmax_labels(&self.net.predict(&self.params, images)?)
    }

    pub fn evaluate(&self, data: &Dataset, idx: &[usize]) -> Result<Evaluation> {
        evaluate(&self.net, &self.params, data, idx, self.cfg.train.batch_size)
    }

    /// Train one epoch, then score the held-out split.
    pub fn run_epoch(&mut self, data: &Dataset, split: &Split) -> Result<EpochLog> {
        let loss = self.train_epoch(data, &split.train)?;
        let eval = self.evaluate(data, &split.val).map_err(|e| diverged(e, self.epoch))?;
        Ok(EpochLog {
            epoch: self.epoch,
            loss,
            eval,
        })
    }
}

/// Non-finite activations while training mean the run has diverged.
fn diverged(e: Error, epoch: u64) -> Error {
    match e {
        Error::NonFinite(m) => Error::Divergence(format!("{m} in epoch {epoch}")),
        e => e,
    }
}

/// Score `net` on the samples `idx`, running inference `batch_size` samples
/// at a time.
pub fn evaluate(net: &Net, params: &ParamStore, data: &Dataset, idx: &[usize], batch_size: usize) -> Result<Evaluation> {
    let k = net.cfg.num_classes;
    if idx.is_empty() {
        return Ok(Evaluation {
            dice: vec![Real::NAN; k - 1],
            dice_mean: Real::NAN,
            hd95_mean: None,
        });
    }
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = batch(data, chunk)?;
        preds.push(argmax_labels(&net.predict(params, &x)?)?);
        truths.push(y);
    }
    let pred = LabelMap::stack(&preds.iter().collect::<Vec<_>>())?;
    let truth = LabelMap::stack(&truths.iter().collect::<Vec<_>>())?;
    score(&pred, &truth, k)
}

/// Stack the samples `idx` into a batch.
pub fn batch(data: &Dataset, idx: &[usize]) -> Result<(Tensor, LabelMap)> {
    let mut xs = Vec::with_capacity(idx.len());
    let mut ys = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = data
            .samples
            .get(i)
            .ok_or_else(|| invalid!("sample index {i} out of range for {} samples", data.len()))?;
        xs.push(&s.image);
        ys.push(&s.labels);
    }
    Ok((stack_batch(&xs)?, LabelMap::stack(&ys)?))
}

/// Train a fresh network for `epochs` epochs on the 80 % split of `data`,
/// scoring the rest after every epoch.
pub fn train_loop(cfg: &RunConfig, data: &Dataset, epochs: usize, seed: u64) -> Result<(Checkpoint, Vec<EpochLog>)> {
    if data.is_empty() {
        return Err(invalid!("empty dataset"));
    }
    let mut tr = Trainer::new(cfg.clone(), seed)?;
    let split = data.split(seed);
    let mut logs = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        logs.push(tr.run_epoch(data, &split)?);
    }
    Ok((tr.checkpoint(), logs))
}

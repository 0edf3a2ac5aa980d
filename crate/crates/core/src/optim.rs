//! Stochastic gradient descent with classical momentum and L2 weight decay.

use indexmap::IndexMap;

use crate::error::{invalid, shape_err};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::Result;

/// Momentum buffers plus hyperparameters. Buffers are created on first use,
/// so a fresh state behaves like all-zero buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    buffers: IndexMap<String, Tensor>,
}

impl OptimState {
    pub fn new(lr: Real, momentum: Real, weight_decay: Real) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            buffers: IndexMap::new(),
        }
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    /// Install a buffer, e.g. when restoring a checkpoint.
    pub fn set_buffer(&mut self, name: &str, t: Tensor) {
        self.buffers.insert(name.to_string(), t);
    }

    /// `v <- mu v + (g + wd p)`, `p <- p - lr v` for every parameter with a
    /// gradient. Parameters without one are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(shape_err!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape()));
            }
        }
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let v = self
                .buffers
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            if v.shape() != g.shape() {
                return Err(invalid!("momentum buffer for {name} has shape {:?}", v.shape()));
            }
            let (mu, wd, lr) = (self.momentum, self.weight_decay, self.lr);
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + (gv + wd * *pv);
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: Real) -> (ParamStore, IndexMap<String, Tensor>) {
        let mut st = ParamStore::new();
        st.insert(name, Tensor::full(&[1], v)).unwrap();
        (st, IndexMap::new())
    }

    #[test]
    fn hand_arithmetic() {
        let (mut st, mut g) = one("p", 1.0);
        g.insert("p".into(), Tensor::full(&[1], 1.0));
        let mut opt = OptimState::new(0.1, 0.9, 0.0);
        opt.step(&mut st, &g).unwrap();
        assert_eq!(opt.buffer("p").unwrap().data(), &[1.0]);
        assert!((st.get("p").unwrap().data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_buffer() {
        let (mut st, mut g) = one("p", 2.0);
        let mut opt = OptimState::new(0.1, 0.9, 0.0);
        opt.set_buffer("p", Tensor::full(&[1], 1.0));
        g.insert("p".into(), Tensor::zeros(&[1]));
        opt.step(&mut st, &g).unwrap();
        assert!((opt.buffer("p").unwrap().data()[0] - 0.9).abs() < 1e-15);
        // The decayed buffer still moves the parameter.
        assert!((st.get("p").unwrap().data()[0] - (2.0 - 0.09)).abs() < 1e-15);

        let (mut st, mut g) = one("q", 2.0);
        let mut fresh = OptimState::new(0.1, 0.9, 0.0);
        g.insert("q".into(), Tensor::zeros(&[1]));
        fresh.step(&mut st, &g).unwrap();
        assert_eq!(st.get("q").unwrap().data(), &[2.0]);
    }

    #[test]
    fn weight_decay_enters_gradient() {
        let (mut st, mut g) = one("p", 2.0);
        g.insert("p".into(), Tensor::zeros(&[1]));
        let mut opt = OptimState::new(0.5, 0.0, 0.1);
        opt.step(&mut st, &g).unwrap();
        assert!((st.get("p").unwrap().data()[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_leaves_params_untouched() {
        let (mut st, mut g) = one("p", 1.0);
        st.insert("q", Tensor::full(&[1], 1.0)).unwrap();
        g.insert("q".into(), Tensor::full(&[1], 1.0));
        g.insert("p".into(), Tensor::zeros(&[2]));
        let mut opt = OptimState::new(0.1, 0.9, 0.0);
        assert!(opt.step(&mut st, &g).is_err());
        assert_eq!(st.get("q").unwrap().data(), &[1.0]);
    }
}

//! Adam and the plateau learning-rate schedule.

use pmt_tensor::{ParamId, ParamStore, Real, Tensor};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias-corrected moments, one pair per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub step: u64,
    pub m: Vec<Option<Tensor<F>>>,
    pub v: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros = |p: &pmt_tensor::Param<F>| p.trainable.then(|| Tensor::zeros(p.value.shape()));
        Adam {
            step: 0,
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    /// One update. Parameters without a gradient keep their value and
    /// moments.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Vec<F>)], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (F::lit(BETA1), F::lit(BETA2));
        let (ob1, ob2) = (F::lit(1.0 - BETA1), F::lit(1.0 - BETA2));
        let (ic1, ic2) = (F::lit(1.0 / c1), F::lit(1.0 / c2));
        let (lr, eps) = (F::lit(lr), F::lit(EPSILON));
        for (id, g) in grads {
            let i = id.index();
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                return Err(Error::Numeric(format!("gradient for non-trainable {}", store.get(*id).name)));
            };
            let p = store.value_mut(*id).data_mut();
            if g.len() != p.len() {
                return Err(Error::Numeric(format!("gradient size {} for {} values", g.len(), p.len())));
            }
            for (((w, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                let mh = *mi * ic1;
                let vh = *vi * ic2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Halve the learning rate once the monitored loss has gone `patience`
/// epochs without a strict decrease.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub best: f64,
    pub counter: usize,
    pub patience: usize,
    pub factor: f64,
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Plateau {
            best: f64::INFINITY,
            counter: 0,
            patience,
            factor: 0.5,
        }
    }

    /// Record an epoch's loss and return the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.counter = 0;
            return lr;
        }
        self.counter += 1;
        if self.counter >= self.patience {
            self.counter = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_halves_once() {
        let mut p = Plateau::new(10);
        let mut lr = 1e-4;
        let mut halvings = 0;
        for _ in 0..11 {
            let next = p.observe(2.0, lr);
            if next < lr {
                halvings += 1;
            }
            lr = next;
        }
        assert_eq!(halvings, 1);
        assert_eq!(lr, 5e-5);
    }

    #[test]
    fn decreasing_loss_never_halves() {
        let mut p = Plateau::new(2);
        let lr = (0..20).fold(1.0, |lr, i| p.observe(10.0 - i as f64, lr));
        assert_eq!(lr, 1.0);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", "g", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store);
        adam.update(&mut store, &[(id, vec![0.5, -3.0])], 0.01).unwrap();
        // Bias correction makes the first step ±lr (up to epsilon).
        let v = store.value(id).data();
        assert!((v[0] - 0.99).abs() < 1e-9);
        assert!((v[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn matches_reference_over_steps() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", "g", Tensor::new(&[1], vec![0.3]).unwrap());
        let mut adam = Adam::new(&store);
        let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = 2.0 * w - 0.1 * t as f64;
            adam.update(&mut store, &[(id, vec![g])], 0.05).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((store.value(id).data()[0] - w).abs() < 1e-12);
        }
    }
}

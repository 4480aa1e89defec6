use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::model::ParamStore;

/// SGD with momentum and coupled weight decay:
/// `v = m * v + (g + wd * p); p -= lr * v`.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![None; params.trainable().count()],
        }
    }

    /// Parameters without a gradient (heads off the current graph) are left
    /// untouched, weight decay included.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (p, v) in params.trainable().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let mut g = g.clone();
            if self.weight_decay > 0.0 {
                g = (g + (p.var.as_tensor() * self.weight_decay)?)?;
            }
            let nv = match v.take() {
                Some(prev) => ((prev * self.momentum)? + g)?,
                None => g,
            };
            p.var.set(&(p.var.as_tensor() - (&nv * lr)?)?)?;
            *v = Some(nv.detach());
        }
        Ok(())
    }
}

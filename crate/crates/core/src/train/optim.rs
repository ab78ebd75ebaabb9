use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, ParamId, ParamStore};

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Matrix, Matrix)>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable param in `grads`. Frozen params are
    /// skipped. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if g.shape() != store.value(*id).shape() {
                return Err(Error::dim("adamw_step", g.shape(), store.value(*id).shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(*id))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads {
            let param = store.get_mut(*id);
            if !param.trainable {
                continue;
            }
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| {
                let (r, c) = g.shape();
                (Matrix::zeros(r, c), Matrix::zeros(r, c))
            });
            let theta = param.value.as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for (i, &gi) in g.as_slice().iter().enumerate() {
                theta[i] -= lr * self.weight_decay * theta[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

use super::{ParamId, ParamStore};

/// AdamW with decoupled weight decay.
///
/// `param <- param - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * param)`
#[derive(Debug, Clone)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros = |_: (ParamId, &super::Param)| Vec::new();
        Self {
            betas,
            eps,
            weight_decay,
            step: 0,
            first: store.iter().map(zeros).collect(),
            second: store.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update using each parameter's accumulated gradient.
    ///
    /// `lr_for` gives the learning rate for a parameter (for per-module
    /// scaling); frozen parameters and parameters without gradients are
    /// skipped.
    pub fn step(&mut self, store: &mut ParamStore, lr_for: impl Fn(&str) -> f64) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        for (id, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let lr = lr_for(&p.name);
            let Some(grad) = p.tensor.grad.as_ref() else {
                continue;
            };
            let grad = grad.clone();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            if m.is_empty() {
                m.resize(grad.len(), 0.0);
                v.resize(grad.len(), 0.0);
            }
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup` epochs, then cosine decay
/// to 0 at `total` epochs. `epoch` may be fractional.
pub fn warmup_cosine_lr(peak: f64, epoch: f64, warmup: f64, total: f64) -> f64 {
    if epoch < warmup {
        peak * epoch / warmup
    } else if epoch >= total {
        0.0
    } else {
        let progress = (epoch - warmup) / (total - warmup);
        0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

use super::{NnError, ParameterSet, Scalar, Tensor};

/// Adam hyperparameters plus the decoupled L2 coefficient.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay λ, applied as `p ← p·(1 − lr·λ)` before the
    /// Adam delta.
    pub weight_decay: f64,
    /// Global-norm gradient clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

/// Adam optimizer carrying per-parameter first/second moment accumulators.
///
/// Accumulators are indexed by parameter position, so the optimizer must be
/// fed the same [`ParameterSet`] it was created from.
pub struct Adam<F> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new<G: Scalar>(cfg: AdamConfig, params: &ParameterSet<G>) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.entry(i).value.shape()))
            .collect();
        let v = (0..params.len())
            .map(|i| Tensor::zeros(params.entry(i).value.shape()))
            .collect();
        Adam {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment accumulators in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Tensor<F>], &[Tensor<F>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds an optimizer mid-run, e.g. when resuming from a checkpoint.
    pub fn from_state(
        cfg: AdamConfig,
        step: u64,
        m: Vec<Tensor<F>>,
        v: Vec<Tensor<F>>,
    ) -> Self {
        Adam { cfg, step, m, v }
    }

    /// One update: decoupled decay, optional global-norm clip, Adam delta
    /// with bias correction, then gradient clearing.
    pub fn step(&mut self, params: &mut ParameterSet<F>) -> Result<(), NnError> {
        for i in 0..params.len() {
            let e = params.entry(i);
            match &e.grad {
                None => return Err(NnError::MissingGrad(e.name.clone())),
                Some(g) => {
                    if g.shape() != e.value.shape() {
                        return Err(NnError::ShapeMismatch {
                            op: "optimizer_step",
                            expected: format!("{:?}", e.value.shape()),
                            got: format!("{:?}", g.shape()),
                        });
                    }
                }
            }
        }

        let clip_scale = match self.cfg.clip_norm {
            Some(limit) => {
                let mut sq = 0.0f64;
                for i in 0..params.len() {
                    for &g in params.entry(i).grad.as_ref().unwrap().data() {
                        let g = g.as_f64();
                        sq += g * g;
                    }
                }
                let norm = sq.sqrt();
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step += 1;
        let t = self.step as i32;
        let lr = self.cfg.lr;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let decay = F::from_f64(1.0 - lr * self.cfg.weight_decay);
        let clip = F::from_f64(clip_scale);
        let fb1 = F::from_f64(b1);
        let fb2 = F::from_f64(b2);
        let one_m_b1 = F::from_f64(1.0 - b1);
        let one_m_b2 = F::from_f64(1.0 - b2);
        let f_lr = F::from_f64(lr);
        let f_eps = F::from_f64(self.cfg.eps);
        let f_bias1 = F::from_f64(bias1);
        let f_bias2 = F::from_f64(bias2);

        for i in 0..params.len() {
            let e = params.entry_mut(i);
            let grad = e.grad.take().unwrap();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, p) in e.value.data_mut().iter_mut().enumerate() {
                let g = grad.data()[j] * clip;
                *p = *p * decay;
                m[j] = fb1 * m[j] + one_m_b1 * g;
                v[j] = fb2 * v[j] + one_m_b2 * g * g;
                let m_hat = m[j] / f_bias1;
                let v_hat = v[j] / f_bias2;
                *p = *p - f_lr * m_hat / (v_hat.sqrt() + f_eps);
            }
        }
        Ok(())
    }
}

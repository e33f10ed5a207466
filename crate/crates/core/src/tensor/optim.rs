use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Hyper-parameters of AdamW. `lr` is the base rate; per-parameter rates may
/// override it at step time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment accumulators, one pair per parameter, and the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            state: OptimizerState::zeros_like(params),
        }
    }

    /// One update of every parameter at the base learning rate.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let lrs = vec![self.config.lr; params.len()];
        self.step_with_rates(params, grads, &lrs)
    }

    /// One update with an explicit learning rate per parameter.
    ///
    /// The decay `p -= lr * wd * p` is applied to the parameter directly and
    /// never enters the moment estimates.
    pub fn step_with_rates(&mut self, params: &mut [Tensor], grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        let st = &mut self.state;
        if params.len() != grads.len()
            || params.len() != lrs.len()
            || params.len() != st.first_moment.len()
        {
            return Err(shape_err(
                "adamw",
                format!(
                    "{} params, {} grads, {} rates, {} moment buffers",
                    params.len(),
                    grads.len(),
                    lrs.len(),
                    st.first_moment.len()
                ),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err("adamw", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
            g.check_finite("adamw gradient")?;
        }
        for (i, p) in params.iter().enumerate() {
            if st.first_moment[i].shape() != p.shape() {
                return Err(shape_err("adamw", "moment buffer shape differs from parameter"));
            }
        }

        st.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(st.step as i32);
        let bc2 = 1.0 - beta2.powi(st.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = lrs[i];
            let m = st.first_moment[i].data_mut();
            let v = st.second_moment[i].data_mut();
            for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *pv -= lr * weight_decay * *pv;
                m[k] = beta1 * m[k] + (1.0 - beta1) * gv;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gv * gv;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !p.is_finite() {
                return Err(Error::NonFinite("adamw update"));
            }
        }
        Ok(())
    }
}

//! Bias-corrected Adam with classic L2 weight decay applied as an additive
//! `g + lambda * theta` term before the moment updates. Embedding tables
//! and layer-norm parameters are excluded from decay (their `decay` flag is
//! false in the parameter store).

use indexmap::IndexMap;

use crate::model::ParameterStore;
use crate::tensor::Tensor;

use super::TrainConfig;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParameterStore) -> OptimizerState {
        let zeros = |p: &ParameterStore| {
            p.iter()
                .map(|(name, param)| (name.clone(), Tensor::zeros(param.tensor.shape().to_vec())))
                .collect()
        };
        OptimizerState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }
}

/// One optimizer step over every parameter. Parameters without an entry in
/// `grads` are treated as having zero gradient (weight decay still applies
/// where enabled).
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &IndexMap<String, Tensor>,
    state: &mut OptimizerState,
    config: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    for (name, param) in params.iter_mut() {
        let m = state.m.get_mut(name).expect("optimizer state matches parameters");
        let v = state.v.get_mut(name).expect("optimizer state matches parameters");
        let grad = grads.get(name);
        let lambda = if param.decay { config.weight_decay } else { 0.0 };
        for i in 0..param.tensor.numel() {
            let theta = param.tensor.data()[i];
            let g = grad.map_or(0.0, |g| g.data()[i]) + lambda * theta;
            let mi = config.beta1 * m.data()[i] + (1.0 - config.beta1) * g;
            let vi = config.beta2 * v.data()[i] + (1.0 - config.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            param.tensor.data_mut()[i] = theta - config.lr * m_hat / (v_hat.sqrt() + config.eps_adam);
        }
    }
}

use super::tensor::{Tensor, TensorError};

/// Adam optimizer state: first/second moment per parameter plus a shared
/// step counter. Weight decay is decoupled, applied as p -= lr * wd * p
/// before the Adam delta.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(param_lens: &[usize], weight_decay: f64) -> Self {
        AdamState {
            m: param_lens.iter().map(|&l| vec![0.0; l]).collect(),
            v: param_lens.iter().map(|&l| vec![0.0; l]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over all parameters.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TensorError> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(TensorError::Invalid(format!(
            "adam_step: {} params, {} grads, state tracks {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if lr <= 0.0 {
        return Err(TensorError::Invalid(format!(
            "adam_step: learning rate must be positive, got {lr}"
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.len() != state.m[i].len() {
            return Err(TensorError::Invalid(format!(
                "adam_step: parameter {i} has {} values but state tracks {}",
                p.len(),
                state.m[i].len()
            )));
        }
        if grads[i].len() != p.len() {
            return Err(TensorError::Invalid(format!(
                "adam_step: gradient {i} has {} values for a parameter of {}",
                grads[i].len(),
                p.len()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let decay = 1.0 - lr * state.weight_decay;

    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let vals = p.values_mut();
        for j in 0..vals.len() {
            vals[j] *= decay;
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            vals[j] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

fn check_shapes(op: &'static str, params: &[&mut Tensor], grads: &[&Tensor]) -> Result<(), TensorError> {
    if params.len() != grads.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// `p <- p - lr * g` for every parameter.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<(), TensorError> {
    check_shapes("sgd_step", params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(x, d)| *x -= lr * d);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(shapes: &[&[usize]], config: AdamWConfig) -> Self {
        Self {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &[&Tensor], config: AdamWConfig) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(&shapes, config)
    }
}

/// One AdamW step:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)`.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamWState,
    lr: f64,
) -> Result<(), TensorError> {
    check_shapes("adamw_step", params, grads)?;
    if state.m.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adamw_step",
            left: vec![state.m.len()],
            right: vec![params.len()],
        });
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.shape() != m.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                left: m.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * pd[i]);
        }
    }
    Ok(())
}

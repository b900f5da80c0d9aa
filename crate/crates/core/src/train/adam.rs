use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Bias-corrected Adam state, one [`Moments`] per parameter in the
/// model's canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor4>) -> Self {
        AdamState {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            step: 0,
            moments: params
                .into_iter()
                .map(|p| Moments {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect(),
        }
    }
}

/// One Adam update of every named parameter from its gradient buffer.
///
/// All gradients are checked before anything is modified: a non-finite
/// value aborts the step and names the parameter. Parameters without a
/// gradient buffer are skipped.
pub fn adam_step(params: &mut [(String, &mut Tensor4)], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.moments.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} parameters, got {}",
            state.moments.len(),
            params.len()
        )));
    }
    for ((name, p), mom) in params.iter().zip(&state.moments) {
        if mom.m.len() != p.numel() {
            return Err(Error::shape("adam_step", mom.m.len(), format!("{name}: {}", p.numel())));
        }
        if let Some(g) = p.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((_, p), mom) in params.iter_mut().zip(&mut state.moments) {
        let (data, grad) = p.data_and_grad_mut();
        let Some(grad) = grad else { continue };
        for (((w, &g), m), v) in data.iter_mut().zip(grad).zip(&mut mom.m).zip(&mut mom.v) {
            let g = g as f64;
            let m1 = b1 * *m as f64 + (1.0 - b1) * g;
            let v1 = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = m1 as f32;
            *v = v1 as f32;
            let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

use super::tensor::Param;
use crate::error::{Error, Result};

/// Adam moment estimates for an ordered list of trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }
}

/// One bias-corrected Adam update of every trainable parameter.
///
/// Moments are allocated on the first call; later calls must pass parameters
/// of the same shapes in the same order.
pub fn adam_step(params: &mut [&mut Param], state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid("lr", format!("{lr} is not a valid learning rate")));
    }
    let sizes: Vec<usize> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.value.len())
        .collect();
    if state.m.is_empty() {
        state.m = sizes.iter().map(|&n| vec![0.0; n]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != sizes.len()
        || state.m.iter().zip(&sizes).any(|(m, &n)| m.len() != n)
    {
        return Err(Error::shape(
            "adam parameters",
            state.m.iter().map(Vec::len).collect::<Vec<_>>(),
            sizes,
        ));
    }

    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for ((p, m), v) in params
        .iter_mut()
        .filter(|p| p.trainable)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let Param { value, grad, .. } = &mut **p;
        for (((w, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

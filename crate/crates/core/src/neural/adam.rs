use ndarray::Zip;

use super::{Mlp, MlpGradients, NeuralError, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected ADAM moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: MlpGradients,
    pub second_moment: MlpGradients,
    pub step: u64,
}

impl AdamState {
    pub fn new(weights: &Mlp, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: MlpGradients::zeros_like(weights),
            second_moment: MlpGradients::zeros_like(weights),
            step: 0,
        }
    }

    /// One ADAM update of `weights` with `grads`.
    pub fn step(&mut self, weights: &mut Mlp, grads: &MlpGradients) -> Result<(), NeuralError> {
        if !weights.same_shape(grads) || !weights.same_shape(&self.first_moment) {
            return Err(NeuralError::ShapeMismatch);
        }
        if !grads.all_finite() {
            return Err(NeuralError::NonFiniteGradient);
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let update = |w: &mut f64, &g: &f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((wl, gl), ml), vl) in weights
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first_moment.layers)
            .zip(&mut self.second_moment.layers)
        {
            Zip::from(&mut wl.weight)
                .and(&gl.weight)
                .and(&mut ml.weight)
                .and(&mut vl.weight)
                .for_each(update);
            Zip::from(&mut wl.bias)
                .and(&gl.bias)
                .and(&mut ml.bias)
                .and(&mut vl.bias)
                .for_each(update);
        }
        Ok(())
    }
}

/// Soft target update `w_T ← τ·w + (1 − τ)·w_T`.
pub fn polyak_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), NeuralError> {
    if !target.same_shape(online) {
        return Err(NeuralError::ShapeMismatch);
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(NeuralError::InvalidSpec(format!("Polyak factor {tau} outside (0, 1]")));
    }
    for (t, o) in target.layers_mut().iter_mut().zip(online.layers()) {
        Zip::from(&mut t.weight)
            .and(&o.weight)
            .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
        Zip::from(&mut t.bias)
            .and(&o.bias)
            .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
    }
    Ok(())
}

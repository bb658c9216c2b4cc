//! Adam optimizer over named tensors.

use std::collections::BTreeMap;

use crate::{Real, TensorData};

/// Adam with the usual defaults (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
/// Moment buffers are keyed by parameter name, so the same optimizer instance
/// can drive any collection of tensors as long as names are stable.
pub struct Adam<T: Real> {
    pub lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: i32,
    state: BTreeMap<String, (TensorData<T>, TensorData<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_eps(lr, 1e-8)
    }

    /// Adam with a custom ε. A large ε (relative to typical gradient
    /// magnitudes) turns the normalized step lr·m̂/(√v̂+ε) back into a
    /// magnitude-sensitive one, which the collision resolver relies on so
    /// that a vanishing loss weight produces vanishing updates.
    pub fn with_eps(lr: f64, eps: f64) -> Self {
        Self {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(eps),
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter. Call once per optimization step,
    /// before the per-tensor `update` calls, so bias correction stays in sync
    /// across all parameters.
    pub fn next_step(&mut self) {
        self.t += 1;
    }

    pub fn step_count(&self) -> i32 {
        self.t
    }

    pub fn update(&mut self, name: &str, param: &mut TensorData<T>, grad: &TensorData<T>) {
        assert!(self.t > 0, "call next_step() before update()");
        assert_eq!(
            param.shape(),
            grad.shape(),
            "{name}: param/grad shape mismatch"
        );
        let (m, v) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| {
                (
                    TensorData::zeros(param.shape().to_vec()),
                    TensorData::zeros(param.shape().to_vec()),
                )
            });
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1, self.beta2);
        let (lr, eps) = (self.lr, self.eps);
        let pd = param.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let g = grad.data()[i];
            md[i] = b1 * md[i] + (one - b1) * g;
            vd[i] = b2 * vd[i] + (one - b2) * g * g;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

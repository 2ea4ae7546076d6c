use ndarray::Array1;

use super::{DiffTensor, ParamId, ParamStore};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel batch normalization state.
///
/// `gamma` and `beta` are learnable tensors held in a [`ParamStore`]; the
/// running statistics are updated in training mode and used in inference.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormState {
    /// Registers `gamma = 1`, `beta = 0` for `channels` channels.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.insert(
            format!("{name}.gamma"),
            DiffTensor::new(ndarray::ArrayD::ones(ndarray::IxDyn(&[channels])), true).expect("rank 1"),
        );
        let beta = store.insert(
            format!("{name}.beta"),
            DiffTensor::new(ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels])), true).expect("rank 1"),
        );
        Self {
            gamma,
            beta,
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub(crate) fn update_running(&mut self, mean: &Array1<f64>, var_biased: &Array1<f64>, count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        self.running_mean.zip_mut_with(mean, |r, &b| *r = (1.0 - m) * *r + m * b);
        self.running_var
            .zip_mut_with(var_biased, |r, &b| *r = (1.0 - m) * *r + m * b * unbias);
    }
}

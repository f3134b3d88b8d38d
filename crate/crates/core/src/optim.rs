//! Plain stochastic gradient descent.
//!
//! No momentum, no weight decay: the learning schedules in this crate only
//! vary the rate per parameter group (classifier vs geometric predictor).

use crate::layers::LayerParams;

/// Apply `w -= lr * grad_w` to one layer and clear its gradients.
pub fn sgd_step(params: &mut LayerParams, lr: f64) {
    params.weights.add_scaled(&params.grad_weights, -lr);
    params.bias.add_scaled(&params.grad_bias, -lr);
    params.zero_grads();
}

/// Step every layer in a group with a shared rate.
pub fn sgd_step_group(group: &mut [LayerParams], lr: f64) {
    for p in group.iter_mut() {
        sgd_step(p, lr);
    }
}

//! SGD with classical momentum and global-norm gradient clipping.

use ndarray::ArrayD;

use super::params::ParamSet;

/// Momentum buffers, one per parameter, in parameter order.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64) -> Self {
        let velocity = params
            .entries()
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        SgdMomentum {
            lr,
            momentum,
            velocity,
        }
    }

    /// v = momentum * v + g; p -= lr * v. `grads` must be in parameter order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[ArrayD<f64>]) {
        assert_eq!(grads.len(), self.velocity.len());
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            let v = &mut self.velocity[i];
            *v *= self.momentum;
            *v += &grads[i];
            entry.value.scaled_add(-self.lr, v);
        }
    }

    pub fn velocity(&self) -> &[ArrayD<f64>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut Vec<ArrayD<f64>> {
        &mut self.velocity
    }
}

/// Scale all gradients down so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [ArrayD<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= k;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamKind;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn momentum_update_matches_hand_computation() {
        let mut set = ParamSet::new();
        set.add("p", ParamKind::Weight, ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut opt = SgdMomentum::new(&set, 0.1, 0.9);
        let g = vec![ArrayD::from_elem(IxDyn(&[1]), 2.0)];

        // step 1: v = 2, p = 1 - 0.1*2 = 0.8
        opt.step(&mut set, &g);
        assert!((set.entries()[0].value[[0]] - 0.8).abs() < 1e-15);
        // step 2: v = 0.9*2 + 2 = 3.8, p = 0.8 - 0.38 = 0.42
        opt.step(&mut set, &g);
        assert!((set.entries()[0].value[[0]] - 0.42).abs() < 1e-15);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut g = vec![ArrayD::from_elem(IxDyn(&[2]), 3.0)]; // norm = sqrt(18) ~ 4.24
        let norm = clip_global_norm(&mut g, 10.0);
        assert!((norm - 18f64.sqrt()).abs() < 1e-12);
        assert_eq!(g[0][[0]], 3.0); // untouched below the threshold

        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 18f64.sqrt()).abs() < 1e-12);
        let new_sq: f64 = g[0].iter().map(|v| v * v).sum();
        assert!((new_sq.sqrt() - 1.0).abs() < 1e-12);
    }
}

//! Parameter initialization.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{ParamKind, ParamSet};

/// He-normal tensor: std = sqrt(2 / fan_in).
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let mut out = ArrayD::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * std;
    }
    out
}

/// Normal tensor with an explicit standard deviation.
pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * std;
    }
    out
}

/// Convolution weight (OIHW) with He fan-in, plus a zero bias.
pub fn conv_init<R: Rng>(
    rng: &mut R,
    set: &mut ParamSet,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) -> (super::params::ParamId, super::params::ParamId) {
    let w = he_normal(rng, &[cout, cin, k, k], cin * k * k);
    let b = ArrayD::zeros(IxDyn(&[cout]));
    let wid = set.add(format!("{name}.w"), ParamKind::Weight, w);
    let bid = set.add(format!("{name}.b"), ParamKind::Bias, b);
    (wid, bid)
}

/// Fully connected weight (in, out) with He fan-in, plus a zero bias.
pub fn linear_init<R: Rng>(
    rng: &mut R,
    set: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> (super::params::ParamId, super::params::ParamId) {
    let w = he_normal(rng, &[fan_in, fan_out], fan_in);
    let b = ArrayD::zeros(IxDyn(&[fan_out]));
    let wid = set.add(format!("{name}.w"), ParamKind::Weight, w);
    let bid = set.add(format!("{name}.b"), ParamKind::Bias, b);
    (wid, bid)
}

//! Layer-level helpers composed from tape operations.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::kernels::ConvGeom;
use crate::params::{Bindings, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax over the H×W plane of each sample of a B×1×H×W map.
pub fn softmax_spatial<S: Scalar>(tape: &Tape<S>, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 4 || shape[1] != 1 {
        return Err(shape_err!("softmax_spatial expects B×1×H×W, got {:?}", shape));
    }
    tape.softmax(x, shape[2] * shape[3])
}

/// N×C×H×W → N×C.
pub fn avg_pool_spatial<S: Scalar>(tape: &Tape<S>, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 4 {
        return Err(shape_err!("avg_pool_spatial expects N×C×H×W, got {:?}", shape));
    }
    if shape[2] * shape[3] == 0 {
        return Err(shape_err!("avg_pool_spatial over an empty plane {:?}", shape));
    }
    let flat = tape.reshape(x, &[shape[0], shape[1], shape[2] * shape[3]])?;
    tape.mean_axis(flat, 2)
}

/// Mean over the leading (time) axis.
pub fn avg_pool_temporal<S: Scalar>(tape: &Tape<S>, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.first().copied().unwrap_or(0) == 0 {
        return Err(shape_err!("avg_pool_temporal over an empty time axis {:?}", shape));
    }
    tape.mean_axis(x, 0)
}

/// Convolution with `{prefix}.weight` and `{prefix}.bias`.
pub fn conv<S: Scalar>(
    tape: &Tape<S>,
    params: &Bindings,
    prefix: &str,
    x: Var,
    geom: ConvGeom,
) -> Result<Var> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    tape.conv2d(x, w, Some(b), geom)
}

pub fn init_conv<S: Scalar>(
    store: &mut ParamStore<S>,
    init: &Init,
    prefix: &str,
    init_key: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) {
    store.insert(format!("{prefix}.weight"), init.conv(init_key, c_out, c_in, k));
    store.insert(format!("{prefix}.bias"), Tensor::zeros([c_out]));
}

/// Per-channel learnable scale and shift on an N×C×H×W map; stands in for
/// batch normalization without running statistics.
pub fn affine_norm<S: Scalar>(tape: &Tape<S>, params: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    let c = shape[1];
    let scale = tape.reshape(params.get(&format!("{prefix}.scale"))?, &[1, c, 1, 1])?;
    let shift = tape.reshape(params.get(&format!("{prefix}.shift"))?, &[1, c, 1, 1])?;
    let scaled = tape.mul(x, tape.expand(scale, &shape)?)?;
    tape.add(scaled, tape.expand(shift, &shape)?)
}

pub fn init_affine_norm<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.scale"), Tensor::ones([c]));
    store.insert(format!("{prefix}.shift"), Tensor::zeros([c]));
}

/// Inverted dropout: kept units are scaled by 1/(1-p).
pub fn dropout<S: Scalar, R: Rng + ?Sized>(tape: &Tape<S>, x: Var, p: f64, rng: &mut R) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = S::lit(1.0 / (1.0 - p));
    let mask = Tensor::from_fn(tape.shape(x), |_| {
        if rng.random::<f64>() < p {
            S::zero()
        } else {
            keep
        }
    });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Names of parameters excluded from weight decay: biases and norm affine terms.
pub fn is_no_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".scale") || name.ends_with(".shift")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spatial_softmax_of_constant_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([2, 1, 3, 4], 0.7));
        let a = tape.value(softmax_spatial(&tape, x).unwrap());
        assert!(a.data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn pools_of_constant_are_constant() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([3, 2, 4, 4], 1.25));
        assert!(tape
            .value(avg_pool_spatial(&tape, x).unwrap())
            .data()
            .iter()
            .all(|&v| v == 1.25));
        assert!(tape
            .value(avg_pool_temporal(&tape, x).unwrap())
            .data()
            .iter()
            .all(|&v| v == 1.25));
    }

    #[test]
    fn temporal_mean_of_two_frames() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([2, 1], vec![1.0, 3.0]).unwrap());
        assert_eq!(tape.value(avg_pool_temporal(&tape, x).unwrap()).data(), &[2.0]);
    }

    #[test]
    fn temporal_mean_ignores_frame_order() {
        let tape = Tape::<f64>::new();
        let frames = Tensor::new([3, 2], vec![0.5, 2.0, 8.0, -1.0, 0.5, 2.0]).unwrap();
        let perm = Tensor::new([3, 2], vec![0.5, 2.0, 0.5, 2.0, 8.0, -1.0]).unwrap();
        let a = avg_pool_temporal(&tape, tape.constant(frames)).unwrap();
        let b = avg_pool_temporal(&tape, tape.constant(perm)).unwrap();
        assert!(tape.value(a).max_abs_diff(&tape.value(b)) < 1e-15);
    }

    #[test]
    fn empty_axis_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([0, 3]));
        assert!(avg_pool_temporal(&tape, x).is_err());
    }
}

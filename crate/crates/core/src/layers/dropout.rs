use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, shape_err, Result};
use crate::layers::Mode;
use crate::tensor::{Real, Tensor};

/// Per-element multipliers applied by a train-mode dropout pass: `0` for
/// dropped elements, `1 / (1 - ratio)` for survivors.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<F> {
    pub scale: Vec<F>,
}

/// Inverted dropout. Inference, and a ratio of zero, are the identity and
/// return no mask.
pub fn dropout<F: Real>(
    x: &Tensor<F>,
    ratio: f64,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor<F>, Option<DropoutMask<F>>)> {
    if !(0.0..1.0).contains(&ratio) {
        return arg_err(format!("dropout ratio {ratio} outside [0, 1)"));
    }
    if mode == Mode::Infer || ratio == 0.0 {
        return Ok((x.clone(), None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = F::lit(1.0 / (1.0 - ratio));
    let scale: Vec<F> = (0..x.shape().len())
        .map(|_| {
            if rng.random::<f64>() < ratio {
                F::zero()
            } else {
                keep
            }
        })
        .collect();
    let data = x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
    Ok((Tensor::from_vec(x.shape(), data)?, Some(DropoutMask { scale })))
}

pub fn dropout_backward<F: Real>(
    mask: Option<&DropoutMask<F>>,
    grad_out: &Tensor<F>,
) -> Result<Tensor<F>> {
    let Some(mask) = mask else {
        return Ok(grad_out.clone());
    };
    if mask.scale.len() != grad_out.shape().len() {
        return shape_err("dropout mask does not match the gradient");
    }
    let data = grad_out
        .data()
        .iter()
        .zip(&mask.scale)
        .map(|(&g, &s)| g * s)
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}

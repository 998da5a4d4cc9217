use crate::error::{arg_err, shape_err, Result};
use crate::layers::Mode;
use crate::tensor::{Real, Tensor};

/// Per-channel batch normalization state.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<F = f32> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub eps: F,
    /// Weight kept by the running statistics on each update.
    pub momentum: F,
}

/// What the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<F> {
    pub mode: Mode,
    pub x_hat: Vec<F>,
    pub inv_std: Vec<F>,
    /// Batch mean and unbiased variance (train mode only).
    pub batch_mean: Vec<F>,
    pub batch_var: Vec<F>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<F> {
    pub grad_x: Tensor<F>,
    pub grad_gamma: Vec<F>,
    pub grad_beta: Vec<F>,
}

impl<F: Real> BatchNormParams<F> {
    /// Unit scale, zero shift, standard-normal running statistics,
    /// momentum 0.9 and epsilon 1e-5.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![F::one(); channels],
            beta: vec![F::zero(); channels],
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            eps: F::lit(1e-5),
            momentum: F::lit(0.9),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return shape_err("batch-norm parameter lengths differ");
        }
        if c != channels {
            return shape_err(format!("batch norm over {c} channels applied to {channels}"));
        }
        if !(self.eps >= F::zero()) || self.running_var.iter().any(|&v| v < F::zero()) {
            return arg_err("batch-norm variance and epsilon must be non-negative");
        }
        Ok(())
    }

    /// Folds a train-mode batch's statistics into the running estimates.
    pub fn update_running(&mut self, cache: &BatchNormCache<F>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        let keep = F::one() - m;
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + keep * cache.batch_mean[c];
            self.running_var[c] = m * self.running_var[c] + keep * cache.batch_var[c];
        }
    }
}

/// Normalizes without touching `p`; the cache carries the batch statistics
/// for a later [`BatchNormParams::update_running`].
pub fn batchnorm_apply<F: Real>(
    x: &Tensor<F>,
    p: &BatchNormParams<F>,
    mode: Mode,
) -> Result<(Tensor<F>, BatchNormCache<F>)> {
    let s = x.shape();
    p.validate(s.c)?;
    let plane = s.plane();
    let count = s.n * plane;
    let mut mean = p.running_mean.clone();
    let mut var_biased = p.running_var.clone();
    let mut var_unbiased = p.running_var.clone();
    if mode == Mode::Train {
        if count == 0 {
            return shape_err("batch norm over an empty batch");
        }
        let cnt = F::from_usize(count).unwrap();
        for c in 0..s.c {
            let mut sum = F::zero();
            for n in 0..s.n {
                let off = (n * s.c + c) * plane;
                sum += x.data()[off..off + plane].iter().copied().sum();
            }
            let mu = sum / cnt;
            let mut sq = F::zero();
            for n in 0..s.n {
                let off = (n * s.c + c) * plane;
                sq += x.data()[off..off + plane].iter().map(|&v| (v - mu) * (v - mu)).sum();
            }
            mean[c] = mu;
            var_biased[c] = sq / cnt;
            var_unbiased[c] = if count > 1 {
                sq / F::from_usize(count - 1).unwrap()
            } else {
                F::zero()
            };
        }
    }
    let inv_std: Vec<F> = var_biased
        .iter()
        .map(|&v| F::one() / (v + p.eps).sqrt())
        .collect();
    let mut y = Tensor::zeros(s);
    let mut x_hat = vec![F::zero(); s.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let (g, b, mu, is) = (p.gamma[c], p.beta[c], mean[c], inv_std[c]);
            for i in off..off + plane {
                let xh = (x.data()[i] - mu) * is;
                x_hat[i] = xh;
                y.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            mode,
            x_hat,
            inv_std,
            batch_mean: mean,
            batch_var: var_unbiased,
        },
    ))
}

/// Batch normalization; in train mode the running statistics of `p` are
/// updated with its momentum.
pub fn batchnorm_forward<F: Real>(
    x: &Tensor<F>,
    p: &mut BatchNormParams<F>,
    mode: Mode,
) -> Result<(Tensor<F>, BatchNormCache<F>)> {
    let (y, cache) = batchnorm_apply(x, p, mode)?;
    p.update_running(&cache);
    Ok((y, cache))
}

pub fn batchnorm_backward<F: Real>(
    p: &BatchNormParams<F>,
    cache: &BatchNormCache<F>,
    grad_out: &Tensor<F>,
) -> Result<BatchNormGrads<F>> {
    let s = grad_out.shape();
    if cache.x_hat.len() != s.len() || p.channels() != s.c {
        return shape_err("batch-norm gradient shape mismatch");
    }
    let plane = s.plane();
    let m = F::from_usize(s.n * plane).unwrap();
    let dy = grad_out.data();
    let mut grad_gamma = vec![F::zero(); s.c];
    let mut grad_beta = vec![F::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            for i in off..off + plane {
                grad_beta[c] += dy[i];
                grad_gamma[c] += dy[i] * cache.x_hat[i];
            }
        }
    }
    let mut grad_x = Tensor::zeros(s);
    let gx = grad_x.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let scale = p.gamma[c] * cache.inv_std[c];
            match cache.mode {
                Mode::Infer => {
                    for i in off..off + plane {
                        gx[i] = dy[i] * scale;
                    }
                }
                Mode::Train => {
                    let k = scale / m;
                    for i in off..off + plane {
                        gx[i] = k * (m * dy[i] - grad_beta[c] - cache.x_hat[i] * grad_gamma[c]);
                    }
                }
            }
        }
    }
    Ok(BatchNormGrads {
        grad_x,
        grad_gamma,
        grad_beta,
    })
}

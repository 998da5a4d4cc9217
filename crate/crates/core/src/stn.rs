//! Spatial transformer: a small localization network predicts an affine
//! transform per image, and a differentiable bilinear sampler applies it.
//!
//! Coordinates are normalized so that the centers of the first and last
//! pixel along each axis sit at -1 and +1.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::layers::conv::conv2d_backward_impl;
use crate::layers::{
    avgpool_forward, conv2d_forward, dense_backward, dense_forward, dropout,
    dropout_backward, relu_backward, tanh_backward, ConvParams, DenseParams, DropoutMask, Mode,
};
use crate::tensor::{relu, Matrix, Real, Shape, Tensor, Window};

/// A 2x3 affine map `[[a, b, tx], [c, d, ty]]` from normalized output
/// coordinates to normalized input coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams<F = f32> {
    pub theta: [F; 6],
}

impl<F: Real> AffineParams<F> {
    pub fn identity() -> Self {
        let (o, z) = (F::one(), F::zero());
        AffineParams {
            theta: [o, z, z, z, o, z],
        }
    }

    pub fn apply(&self, x: F, y: F) -> (F, F) {
        let t = &self.theta;
        (t[0] * x + t[1] * y + t[2], t[3] * x + t[4] * y + t[5])
    }
}

impl<F: Real> Default for AffineParams<F> {
    fn default() -> Self {
        Self::identity()
    }
}

/// Sampling positions, in normalized input coordinates, for every pixel of
/// an `h x w` output. Coordinates are kept in f64 whatever the image type, so
/// that the identity transform lands exactly on pixel centres.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub coords: Vec<(f64, f64)>,
}

fn normalized<F: Real>(i: usize, len: usize) -> F {
    if len <= 1 {
        F::zero()
    } else {
        F::lit(-1.0 + 2.0 * i as f64 / (len - 1) as f64)
    }
}

pub fn affine_grid<F: Real>(theta: &AffineParams<F>, h: usize, w: usize) -> Grid {
    let t: Vec<f64> = theta.theta.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let mut coords = Vec::with_capacity(h * w);
    for i in 0..h {
        let yn: f64 = normalized(i, h);
        for j in 0..w {
            let xn: f64 = normalized(j, w);
            coords.push((t[0] * xn + t[1] * yn + t[2], t[3] * xn + t[4] * yn + t[5]));
        }
    }
    Grid { h, w, coords }
}

/// Gradient of a scalar with respect to theta, given its gradient with
/// respect to every grid coordinate.
pub fn affine_grid_backward<F: Real>(grad_grid: &[(F, F)], h: usize, w: usize) -> [F; 6] {
    let mut g = [F::zero(); 6];
    for i in 0..h {
        let yn: F = normalized(i, h);
        for j in 0..w {
            let xn: F = normalized(j, w);
            let (gx, gy) = grad_grid[i * w + j];
            g[0] += gx * xn;
            g[1] += gx * yn;
            g[2] += gx;
            g[3] += gy * xn;
            g[4] += gy * yn;
            g[5] += gy;
        }
    }
    g
}

fn to_pixel(v: f64, len: usize) -> f64 {
    (v + 1.0) * ((len as f64 - 1.0) / 2.0)
}

struct Taps<F> {
    x0: isize,
    y0: isize,
    wx: F,
    wy: F,
}

fn taps<F: Real>(coord: (f64, f64), h: usize, w: usize) -> Taps<F> {
    let px = to_pixel(coord.0, w);
    let py = to_pixel(coord.1, h);
    let fx = px.floor();
    let fy = py.floor();
    // clamp far-away coordinates; they only ever read the zero border
    let idx = |v: f64| v.clamp(-4.0e9, 4.0e9) as isize;
    Taps {
        x0: idx(fx),
        y0: idx(fy),
        wx: F::lit(px - fx),
        wy: F::lit(py - fy),
    }
}

#[inline]
fn fetch<F: Real>(plane: &[F], h: usize, w: usize, y: isize, x: isize) -> F {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        F::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Bilinear sampling with a zero border; one grid per batch item.
pub fn bilinear_sample<F: Real>(input: &Tensor<F>, grids: &[Grid]) -> Result<Tensor<F>> {
    let s = input.shape();
    let (gh, gw) = check_grids(s, grids)?;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, gh, gw));
    for (n, grid) in grids.iter().enumerate() {
        for (p, &coord) in grid.coords.iter().enumerate() {
            let t = taps(coord, s.h, s.w);
            let (one, wx, wy) = (F::one(), t.wx, t.wy);
            for c in 0..s.c {
                let plane = &input.data()[(n * s.c + c) * s.plane()..(n * s.c + c + 1) * s.plane()];
                let v = (one - wy) * ((one - wx) * fetch(plane, s.h, s.w, t.y0, t.x0)
                    + wx * fetch(plane, s.h, s.w, t.y0, t.x0 + 1))
                    + wy * ((one - wx) * fetch(plane, s.h, s.w, t.y0 + 1, t.x0)
                        + wx * fetch(plane, s.h, s.w, t.y0 + 1, t.x0 + 1));
                out.data_mut()[(n * s.c + c) * gh * gw + p] = v;
            }
        }
    }
    Ok(out)
}

fn check_grids(s: Shape, grids: &[Grid]) -> Result<(usize, usize)> {
    if grids.len() != s.n {
        return shape_err(format!("{} grids for a batch of {}", grids.len(), s.n));
    }
    let (gh, gw) = grids.first().map_or((0, 0), |g| (g.h, g.w));
    for g in grids {
        if g.h != gh || g.w != gw || g.coords.len() != gh * gw {
            return shape_err("sampling grids differ in size");
        }
        if g.coords.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return shape_err("sampling grid has non-finite coordinates");
        }
    }
    Ok((gh, gw))
}

/// Gradients of [`bilinear_sample`] with respect to the input image and to
/// every grid coordinate.
pub fn bilinear_sample_backward<F: Real>(
    input: &Tensor<F>,
    grids: &[Grid],
    grad_out: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<Vec<(F, F)>>)> {
    let s = input.shape();
    let (gh, gw) = check_grids(s, grids)?;
    if grad_out.shape() != Shape::new(s.n, s.c, gh, gw) {
        return shape_err("sampler gradient shape mismatch");
    }
    let sx = F::lit((s.w as f64 - 1.0) / 2.0);
    let sy = F::lit((s.h as f64 - 1.0) / 2.0);
    let mut grad_in = Tensor::zeros(s);
    let mut grad_grid = Vec::with_capacity(s.n);
    for (n, grid) in grids.iter().enumerate() {
        let mut gg = vec![(F::zero(), F::zero()); gh * gw];
        for (p, &coord) in grid.coords.iter().enumerate() {
            let t = taps(coord, s.h, s.w);
            let (one, wx, wy) = (F::one(), t.wx, t.wy);
            let corners = [
                (t.y0, t.x0, (one - wy) * (one - wx)),
                (t.y0, t.x0 + 1, (one - wy) * wx),
                (t.y0 + 1, t.x0, wy * (one - wx)),
                (t.y0 + 1, t.x0 + 1, wy * wx),
            ];
            let (mut dpx, mut dpy) = (F::zero(), F::zero());
            for c in 0..s.c {
                let base = (n * s.c + c) * s.plane();
                let g = grad_out.data()[(n * s.c + c) * gh * gw + p];
                let plane = &input.data()[base..base + s.plane()];
                let v00 = fetch(plane, s.h, s.w, t.y0, t.x0);
                let v01 = fetch(plane, s.h, s.w, t.y0, t.x0 + 1);
                let v10 = fetch(plane, s.h, s.w, t.y0 + 1, t.x0);
                let v11 = fetch(plane, s.h, s.w, t.y0 + 1, t.x0 + 1);
                dpx += g * ((one - wy) * (v01 - v00) + wy * (v11 - v10));
                dpy += g * ((one - wx) * (v10 - v00) + wx * (v11 - v01));
                for &(y, x, wgt) in &corners {
                    if y >= 0 && x >= 0 && (y as usize) < s.h && (x as usize) < s.w {
                        grad_in.data_mut()[base + y as usize * s.w + x as usize] += g * wgt;
                    }
                }
            }
            gg[p] = (dpx * sx, dpy * sy);
        }
        grad_grid.push(gg);
    }
    Ok((grad_in, grad_grid))
}

/// Warps each batch item with its own affine transform, keeping the size.
pub fn spatial_transform<F: Real>(input: &Tensor<F>, thetas: &[AffineParams<F>]) -> Result<Tensor<F>> {
    let s = input.shape();
    let grids: Vec<_> = thetas.iter().map(|t| affine_grid(t, s.h, s.w)).collect();
    bilinear_sample(input, &grids)
}

/// Gradient of [`spatial_transform`] with respect to the input and each theta.
pub fn spatial_transform_backward<F: Real>(
    input: &Tensor<F>,
    thetas: &[AffineParams<F>],
    grad_out: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<[F; 6]>)> {
    let s = input.shape();
    let grids: Vec<_> = thetas.iter().map(|t| affine_grid(t, s.h, s.w)).collect();
    let (gi, gg) = bilinear_sample_backward(input, &grids, grad_out)?;
    let gt = gg.iter().map(|g| affine_grid_backward(g, s.h, s.w)).collect();
    Ok((gi, gt))
}

/// Localization network: average pooling, two parallel strided 5x5
/// convolution branches whose flattened outputs are concatenated, dropout,
/// a tanh dense layer to 32 and a dense layer to the 6 affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LocNet<F = f32> {
    pub pool: Window,
    pub branch_a: ConvParams<F>,
    pub branch_b: ConvParams<F>,
    pub dropout: f64,
    pub fc1: DenseParams<F>,
    pub fc2: DenseParams<F>,
    /// Bound on the deviation of each parameter from the identity.
    pub scale: F,
    input: (usize, usize, usize),
}

/// Forward-pass intermediates needed by [`LocNet::backward`].
#[derive(Clone, Debug)]
pub struct LocNetCache<F> {
    pooled: Tensor<F>,
    act_a: Tensor<F>,
    act_b: Tensor<F>,
    mask: Option<DropoutMask<F>>,
    features: Matrix<F>,
    hidden: Matrix<F>,
    squashed: Matrix<F>,
}

/// Parameter gradients of the localization network.
#[derive(Clone, Debug)]
pub struct LocNetGrads<F> {
    pub branch_a_w: Tensor<F>,
    pub branch_a_b: Vec<F>,
    pub branch_b_w: Tensor<F>,
    pub branch_b_b: Vec<F>,
    pub fc1_w: Matrix<F>,
    pub fc1_b: Vec<F>,
    pub fc2_w: Matrix<F>,
    pub fc2_b: Vec<F>,
}

pub const LOCNET_HIDDEN: usize = 32;
pub const LOCNET_CHANNELS: usize = 32;
pub const LOCNET_SCALE: f64 = 0.25;

pub(crate) fn he_uniform<F: Real, R: Rng>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..shape.len())
        .map(|_| F::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

impl<F: Real> LocNet<F> {
    /// Random convolution and hidden weights; the output layer starts at
    /// zero so the initial transform is the identity.
    pub fn new<R: Rng>(input: (usize, usize, usize), dropout: f64, rng: &mut R) -> Result<Self> {
        let (c, h, w) = input;
        let pool = Window::new((3, 3), (2, 2), (1, 1));
        let (ph, pw) = pool.output_size(h, w)?;
        let conv = |stride: usize, rng: &mut R| {
            ConvParams::new(
                he_uniform(Shape::new(LOCNET_CHANNELS, c, 5, 5), c * 25, rng),
                Some(vec![F::zero(); LOCNET_CHANNELS]),
                (stride, stride),
                (0, 0),
            )
        };
        let branch_a = conv(3, rng)?;
        let branch_b = conv(5, rng)?;
        let pooled = Shape::new(1, c, ph, pw);
        let flat = branch_a.output_shape(pooled)?.sample_len() + branch_b.output_shape(pooled)?.sample_len();
        let w1 = he_uniform(Shape::new(1, 1, LOCNET_HIDDEN, flat), flat, rng);
        let fc1 = DenseParams::new(
            Matrix::from_vec(LOCNET_HIDDEN, flat, w1.into_vec())?,
            vec![F::zero(); LOCNET_HIDDEN],
        )?;
        Ok(LocNet {
            pool,
            branch_a,
            branch_b,
            dropout,
            fc1,
            fc2: DenseParams::zeros(LOCNET_HIDDEN, 6),
            scale: F::lit(LOCNET_SCALE),
            input,
        })
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.input
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if (s.c, s.h, s.w) != self.input {
            return shape_err(format!(
                "localization network expects {}x{}x{} images, got {}",
                self.input.0, self.input.1, self.input.2, s
            ));
        }
        Ok(())
    }

    /// Predicts one transform per batch item.
    pub fn forward_cached(
        &self,
        image: &Tensor<F>,
        mode: Mode,
        seed: u64,
    ) -> Result<(Vec<AffineParams<F>>, LocNetCache<F>)> {
        self.check_input(image.shape())?;
        let n = image.shape().n;
        let pooled = avgpool_forward(image, &self.pool)?;
        let act_a = relu(&conv2d_forward(&pooled, &self.branch_a)?);
        let act_b = relu(&conv2d_forward(&pooled, &self.branch_b)?);
        let (la, lb) = (act_a.shape().sample_len(), act_b.shape().sample_len());
        let mut flat = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            flat.extend_from_slice(act_a.sample(i));
            flat.extend_from_slice(act_b.sample(i));
        }
        let flat = Tensor::from_vec(Shape::new(n, 1, 1, la + lb), flat)?;
        let (dropped, mask) = dropout(&flat, self.dropout, mode, seed)?;
        let features = Matrix::from_vec(n, la + lb, dropped.into_vec())?;
        let mut hidden = dense_forward(&features, &self.fc1)?;
        hidden.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let mut squashed = dense_forward(&hidden, &self.fc2)?;
        squashed.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let identity = AffineParams::<F>::identity().theta;
        let thetas = (0..n)
            .map(|i| {
                let mut theta = identity;
                for (t, &s) in theta.iter_mut().zip(squashed.row(i)) {
                    *t += self.scale * s;
                }
                AffineParams { theta }
            })
            .collect();
        Ok((
            thetas,
            LocNetCache {
                pooled,
                act_a,
                act_b,
                mask,
                features,
                hidden,
                squashed,
            },
        ))
    }

    /// Parameter gradients given the gradient with respect to each theta.
    pub fn backward(&self, cache: &LocNetCache<F>, grad_theta: &[[F; 6]]) -> Result<LocNetGrads<F>> {
        let n = cache.squashed.rows();
        if grad_theta.len() != n {
            return shape_err("theta gradient count does not match the batch");
        }
        let mut g_squashed = Matrix::zeros(n, 6);
        for (i, g) in grad_theta.iter().enumerate() {
            for (k, &gv) in g.iter().enumerate() {
                g_squashed.set(i, k, gv * self.scale);
            }
        }
        let g_z = Matrix::from_vec(n, 6, tanh_backward(cache.squashed.data(), g_squashed.data()))?;
        let g2 = dense_backward(&cache.hidden, &self.fc2, &g_z)?;
        let g_pre1 = Matrix::from_vec(
            n,
            LOCNET_HIDDEN,
            tanh_backward(cache.hidden.data(), g2.grad_x.data()),
        )?;
        let g1 = dense_backward(&cache.features, &self.fc1, &g_pre1)?;
        let flat_len = cache.features.cols();
        let g_flat = Tensor::from_vec(Shape::new(n, 1, 1, flat_len), g1.grad_x.into_vec())?;
        let g_flat = dropout_backward(cache.mask.as_ref(), &g_flat)?;
        let (sa, sb) = (cache.act_a.shape(), cache.act_b.shape());
        let (la, lb) = (sa.sample_len(), sb.sample_len());
        let mut ga = Vec::with_capacity(n * la);
        let mut gb = Vec::with_capacity(n * lb);
        for i in 0..n {
            let row = g_flat.sample(i);
            ga.extend_from_slice(&row[..la]);
            gb.extend_from_slice(&row[la..]);
        }
        let ga = relu_backward(&cache.act_a, &Tensor::from_vec(sa, ga)?)?;
        let gb = relu_backward(&cache.act_b, &Tensor::from_vec(sb, gb)?)?;
        let ca = conv2d_backward_impl(&cache.pooled, &self.branch_a, &ga, false)?;
        let cb = conv2d_backward_impl(&cache.pooled, &self.branch_b, &gb, false)?;
        Ok(LocNetGrads {
            branch_a_w: ca.grad_w,
            branch_a_b: ca.grad_b.unwrap_or_default(),
            branch_b_w: cb.grad_w,
            branch_b_b: cb.grad_b.unwrap_or_default(),
            fc1_w: g1.grad_w,
            fc1_b: g1.grad_b,
            fc2_w: g2.grad_w,
            fc2_b: g2.grad_b,
        })
    }

    pub fn param_count(&self) -> usize {
        self.branch_a.weight.shape().len()
            + self.branch_a.bias.as_ref().map_or(0, Vec::len)
            + self.branch_b.weight.shape().len()
            + self.branch_b.bias.as_ref().map_or(0, Vec::len)
            + self.fc1.weight.data().len()
            + self.fc1.bias.len()
            + self.fc2.weight.data().len()
            + self.fc2.bias.len()
    }
}

/// Inference-mode transform prediction.
pub fn locnet_forward<F: Real>(image: &Tensor<F>, net: &LocNet<F>) -> Result<Vec<AffineParams<F>>> {
    Ok(net.forward_cached(image, Mode::Infer, 0)?.0)
}

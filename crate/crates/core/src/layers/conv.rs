use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{col2im_sample, gemm, im2col_sample, MatRef, Real, Shape, Tensor, Window};

/// Weights and geometry of a 2-D convolution (cross-correlation).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<F = f32> {
    /// `(C_out, C_in, kh, kw)`.
    pub weight: Tensor<F>,
    /// One value per output channel, if the layer has a bias.
    pub bias: Option<Vec<F>>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads<F> {
    pub grad_x: Tensor<F>,
    pub grad_w: Tensor<F>,
    pub grad_b: Option<Vec<F>>,
}

impl<F: Real> ConvParams<F> {
    pub fn new(
        weight: Tensor<F>,
        bias: Option<Vec<F>>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let s = weight.shape();
        if s.n == 0 || s.c == 0 {
            return arg_err("convolution needs at least one input and output channel");
        }
        if let Some(b) = &bias {
            if b.len() != s.n {
                return shape_err(format!("{} bias values for {} output channels", b.len(), s.n));
            }
        }
        let p = ConvParams {
            weight,
            bias,
            stride,
            pad,
        };
        p.window().validate()?;
        Ok(p)
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn window(&self) -> Window {
        let s = self.weight.shape();
        Window::new((s.h, s.w), self.stride, self.pad)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.c_in() {
            return shape_err(format!(
                "convolution expects {} input channels, got {}",
                self.c_in(),
                input.c
            ));
        }
        let (ho, wo) = self.window().output_size(input.h, input.w)?;
        Ok(Shape::new(input.n, self.c_out(), ho, wo))
    }

    /// A pointwise convolution reads its input directly as the patch matrix.
    fn is_pointwise(&self) -> bool {
        let w = self.window();
        w.kernel == (1, 1) && w.stride == (1, 1) && w.pad == (0, 0)
    }
}

/// Convolution forward pass via im2col lowering.
pub fn conv2d_forward<F: Real>(x: &Tensor<F>, p: &ConvParams<F>) -> Result<Tensor<F>> {
    let xs = x.shape();
    let os = p.output_shape(xs)?;
    let win = p.window();
    let k = p.c_in() * win.kernel.0 * win.kernel.1;
    let cols = os.h * os.w;
    let wmat = MatRef::new(p.weight.data(), p.c_out(), k);
    let mut out = Tensor::zeros(os);
    let mut buf = if p.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); k * cols]
    };
    for n in 0..xs.n {
        let patches = if p.is_pointwise() {
            x.sample(n)
        } else {
            im2col_sample(x.sample(n), (xs.c, xs.h, xs.w), &win, (os.h, os.w), &mut buf);
            &buf
        };
        let y = out.sample_mut(n);
        gemm(wmat, MatRef::new(patches, k, cols), F::zero(), y);
        if let Some(bias) = &p.bias {
            for (co, &b) in bias.iter().enumerate() {
                for v in &mut y[co * cols..(co + 1) * cols] {
                    *v += b;
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of [`conv2d_forward`].
pub fn conv2d_backward<F: Real>(
    x: &Tensor<F>,
    p: &ConvParams<F>,
    grad_out: &Tensor<F>,
) -> Result<ConvGrads<F>> {
    conv2d_backward_impl(x, p, grad_out, true)
}

/// As [`conv2d_backward`]; with `need_grad_x == false` the input gradient is
/// left as zeros (used for the first layer of a network).
pub(crate) fn conv2d_backward_impl<F: Real>(
    x: &Tensor<F>,
    p: &ConvParams<F>,
    grad_out: &Tensor<F>,
    need_grad_x: bool,
) -> Result<ConvGrads<F>> {
    let xs = x.shape();
    let os = p.output_shape(xs)?;
    if grad_out.shape() != os {
        return shape_err(format!(
            "convolution output gradient is {}, expected {}",
            grad_out.shape(),
            os
        ));
    }
    let win = p.window();
    let k = p.c_in() * win.kernel.0 * win.kernel.1;
    let cols = os.h * os.w;
    let wmat = MatRef::new(p.weight.data(), p.c_out(), k);
    let mut grad_w = Tensor::zeros(p.weight.shape());
    let mut grad_b = p.bias.as_ref().map(|b| vec![F::zero(); b.len()]);
    let mut grad_x = Tensor::zeros(xs);
    let pointwise = p.is_pointwise();
    let mut buf = if pointwise {
        Vec::new()
    } else {
        vec![F::zero(); k * cols]
    };
    let mut dcols = vec![F::zero(); k * cols];
    for n in 0..xs.n {
        let dy = MatRef::new(grad_out.sample(n), p.c_out(), cols);
        let patches = if pointwise {
            x.sample(n)
        } else {
            im2col_sample(x.sample(n), (xs.c, xs.h, xs.w), &win, (os.h, os.w), &mut buf);
            &buf
        };
        gemm(dy, MatRef::new(patches, k, cols).t(), F::one(), grad_w.data_mut());
        if let Some(gb) = grad_b.as_mut() {
            for (co, g) in gb.iter_mut().enumerate() {
                *g += dy.data[co * cols..(co + 1) * cols].iter().copied().sum();
            }
        }
        if need_grad_x {
            if pointwise {
                gemm(wmat.t(), dy, F::zero(), grad_x.sample_mut(n));
            } else {
                gemm(wmat.t(), dy, F::zero(), &mut dcols);
                col2im_sample(&dcols, (xs.c, xs.h, xs.w), &win, (os.h, os.w), grad_x.sample_mut(n));
            }
        }
    }
    Ok(ConvGrads {
        grad_x,
        grad_w,
        grad_b,
    })
}

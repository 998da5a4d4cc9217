use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Real, Shape, Tensor, Window};

/// Max pooling geometry. When `channel_out` is smaller than the input
/// channel count, each output channel is also the maximum over a group of
/// `C_in / channel_out` consecutive input channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolParams {
    pub window: Window,
    pub channel_out: usize,
}

impl PoolParams {
    pub fn new(window: Window, channel_out: usize) -> Self {
        PoolParams {
            window,
            channel_out,
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        check_window(&self.window)?;
        if self.channel_out == 0 || input.c % self.channel_out != 0 {
            return arg_err(format!(
                "pooling to {} channels does not divide {} input channels",
                self.channel_out, input.c
            ));
        }
        let (ho, wo) = self.window.output_size(input.h, input.w)?;
        Ok(Shape::new(input.n, self.channel_out, ho, wo))
    }
}

fn check_window(win: &Window) -> Result<()> {
    win.validate()?;
    if win.pad.0 >= win.kernel.0 || win.pad.1 >= win.kernel.1 {
        return arg_err("pooling padding must be smaller than the kernel");
    }
    Ok(())
}

/// Clipped input range covered by output position `o` along one axis.
fn span(o: usize, k: usize, s: usize, p: usize, len: usize) -> (usize, usize) {
    let start = (o * s) as isize - p as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + k as isize).min(len as isize)).max(0) as usize;
    (lo, hi)
}

/// Max pooling. Returns the pooled tensor and, for every output element, the
/// flat index of the input element that produced it.
pub fn maxpool_forward<F: Real>(x: &Tensor<F>, p: &PoolParams) -> Result<(Tensor<F>, Vec<usize>)> {
    let xs = x.shape();
    let os = p.output_shape(xs)?;
    let group = xs.c / p.channel_out;
    let (kh, kw) = p.window.kernel;
    let (sh, sw) = p.window.stride;
    let (ph, pw) = p.window.pad;
    let mut out = Tensor::zeros(os);
    let mut argmax = vec![0usize; os.len()];
    let data = x.data();
    let out_data = out.data_mut();
    let mut o = 0;
    for n in 0..os.n {
        for oc in 0..os.c {
            for oy in 0..os.h {
                let (y0, y1) = span(oy, kh, sh, ph, xs.h);
                for ox in 0..os.w {
                    let (x0, x1) = span(ox, kw, sw, pw, xs.w);
                    let first = ((n * xs.c + oc * group) * xs.h + y0) * xs.w + x0;
                    let mut best = data[first];
                    let mut best_i = first;
                    for c in oc * group..(oc + 1) * group {
                        let base = (n * xs.c + c) * xs.h;
                        for iy in y0..y1 {
                            let row = (base + iy) * xs.w;
                            for (j, &v) in data[row + x0..row + x1].iter().enumerate() {
                                if v > best {
                                    best = v;
                                    best_i = row + x0 + j;
                                }
                            }
                        }
                    }
                    out_data[o] = best;
                    argmax[o] = best_i;
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to the input element recorded in `argmax`.
pub fn maxpool_backward<F: Real>(
    input_shape: Shape,
    argmax: &[usize],
    grad_out: &Tensor<F>,
) -> Result<Tensor<F>> {
    if argmax.len() != grad_out.shape().len() {
        return shape_err("max-pool gradient does not match the recorded argmax");
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(gx)
}

/// Per-channel average pooling; padded positions are excluded from the mean.
pub fn avgpool_forward<F: Real>(x: &Tensor<F>, win: &Window) -> Result<Tensor<F>> {
    check_window(win)?;
    let xs = x.shape();
    let (ho, wo) = win.output_size(xs.h, xs.w)?;
    let os = Shape::new(xs.n, xs.c, ho, wo);
    let mut out = Tensor::zeros(os);
    let data = x.data();
    let mut o = 0;
    for plane in 0..xs.n * xs.c {
        let base = plane * xs.h * xs.w;
        for oy in 0..ho {
            let (y0, y1) = span(oy, win.kernel.0, win.stride.0, win.pad.0, xs.h);
            for ox in 0..wo {
                let (x0, x1) = span(ox, win.kernel.1, win.stride.1, win.pad.1, xs.w);
                let mut acc = F::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += data[base + iy * xs.w + ix];
                    }
                }
                let count = F::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                out.data_mut()[o] = acc / count;
                o += 1;
            }
        }
    }
    Ok(out)
}

pub fn avgpool_backward<F: Real>(
    input_shape: Shape,
    win: &Window,
    grad_out: &Tensor<F>,
) -> Result<Tensor<F>> {
    check_window(win)?;
    let xs = input_shape;
    let (ho, wo) = win.output_size(xs.h, xs.w)?;
    if grad_out.shape() != Shape::new(xs.n, xs.c, ho, wo) {
        return shape_err("average-pool gradient shape mismatch");
    }
    let mut gx = Tensor::zeros(xs);
    let g = grad_out.data();
    let d = gx.data_mut();
    let mut o = 0;
    for plane in 0..xs.n * xs.c {
        let base = plane * xs.h * xs.w;
        for oy in 0..ho {
            let (y0, y1) = span(oy, win.kernel.0, win.stride.0, win.pad.0, xs.h);
            for ox in 0..wo {
                let (x0, x1) = span(ox, win.kernel.1, win.stride.1, win.pad.1, xs.w);
                let share = g[o] / F::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        d[base + iy * xs.w + ix] += share;
                    }
                }
                o += 1;
            }
        }
    }
    Ok(gx)
}

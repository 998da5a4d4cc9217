use crate::error::{shape_err, Result};
use crate::tensor::{Matrix, Real, Shape, Tensor};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Real>(m: &Matrix<F>) -> Matrix<F> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<F: Real>(m: &Matrix<F>) -> Matrix<F> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Stacks the channels of `a` then `b`.
pub fn concat_channels<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return shape_err(format!("cannot concatenate {sa} and {sb} along channels"));
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor::from_vec(out_shape, data)
}

/// Inverse of [`concat_channels`]: the first `c_first` channels, then the rest.
pub fn split_channels<F: Real>(t: &Tensor<F>, c_first: usize) -> Result<(Tensor<F>, Tensor<F>)> {
    let s = t.shape();
    if c_first > s.c {
        return shape_err(format!("cannot split {c_first} channels off {s}"));
    }
    let head = c_first * s.plane();
    let mut a = Vec::with_capacity(s.n * head);
    let mut b = Vec::with_capacity(s.len() - s.n * head);
    for n in 0..s.n {
        let sample = t.sample(n);
        a.extend_from_slice(&sample[..head]);
        b.extend_from_slice(&sample[head..]);
    }
    Ok((
        Tensor::from_vec(s.with_c(c_first), a)?,
        Tensor::from_vec(s.with_c(s.c - c_first), b)?,
    ))
}

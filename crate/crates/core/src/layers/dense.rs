use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Matrix, Real};

/// Fully connected layer: `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<F = f32> {
    /// `out_features x in_features`.
    pub weight: Matrix<F>,
    pub bias: Vec<F>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads<F> {
    pub grad_x: Matrix<F>,
    pub grad_w: Matrix<F>,
    pub grad_b: Vec<F>,
}

impl<F: Real> DenseParams<F> {
    pub fn new(weight: Matrix<F>, bias: Vec<F>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return shape_err(format!(
                "{} bias values for {} outputs",
                bias.len(),
                weight.rows()
            ));
        }
        Ok(DenseParams { weight, bias })
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        DenseParams {
            weight: Matrix::zeros(out_features, in_features),
            bias: vec![F::zero(); out_features],
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }
}

/// Applies the layer to every row of `x` (`batch x in_features`).
pub fn dense_forward<F: Real>(x: &Matrix<F>, p: &DenseParams<F>) -> Result<Matrix<F>> {
    if x.cols() != p.in_features() {
        return shape_err(format!(
            "dense layer expects {} features, got {}",
            p.in_features(),
            x.cols()
        ));
    }
    let mut y = Matrix::zeros(x.rows(), p.out_features());
    for r in 0..x.rows() {
        y.row_mut(r).copy_from_slice(&p.bias);
    }
    gemm(x.view(), p.weight.view().t(), F::one(), y.data_mut());
    Ok(y)
}

pub fn dense_backward<F: Real>(
    x: &Matrix<F>,
    p: &DenseParams<F>,
    grad_out: &Matrix<F>,
) -> Result<DenseGrads<F>> {
    if x.cols() != p.in_features()
        || grad_out.cols() != p.out_features()
        || grad_out.rows() != x.rows()
    {
        return shape_err("dense gradient shape mismatch");
    }
    let mut grad_x = Matrix::zeros(x.rows(), x.cols());
    gemm(grad_out.view(), p.weight.view(), F::zero(), grad_x.data_mut());
    let mut grad_w = Matrix::zeros(p.out_features(), p.in_features());
    gemm(grad_out.view().t(), x.view(), F::zero(), grad_w.data_mut());
    let mut grad_b = vec![F::zero(); p.out_features()];
    for r in 0..grad_out.rows() {
        for (g, &d) in grad_b.iter_mut().zip(grad_out.row(r)) {
            *g += d;
        }
    }
    Ok(DenseGrads {
        grad_x,
        grad_w,
        grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{dot, numeric_grad, rand_vec, rel_err};

    #[test]
    fn examples() {
        let x = Matrix::from_rows(&[vec![2.0f32, 3.0]]).unwrap();
        let p = DenseParams::new(Matrix::identity(2), vec![0.0; 2]).unwrap();
        assert_eq!(dense_forward(&x, &p).unwrap(), x);
        let p = DenseParams::new(Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), vec![1.0]).unwrap();
        assert_eq!(dense_forward(&x, &p).unwrap().data(), &[6.0]);
        assert!(DenseParams::new(Matrix::<f32>::zeros(2, 2), vec![0.0]).is_err());
        assert!(dense_forward(&Matrix::zeros(1, 3), &p).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (b, i, o) = (3, 5, 4);
        let x = Matrix::from_vec(b, i, rand_vec::<f64>(b * i, 41)).unwrap();
        let p = DenseParams::new(
            Matrix::from_vec(o, i, rand_vec(o * i, 42)).unwrap(),
            rand_vec(o, 43),
        )
        .unwrap();
        let r = rand_vec::<f64>(b * o, 44);
        let go = Matrix::from_vec(b, o, r.clone()).unwrap();
        let g = dense_backward(&x, &p, &go).unwrap();
        let num_x = numeric_grad(
            |v| dot(dense_forward(&Matrix::from_vec(b, i, v.to_vec()).unwrap(), &p).unwrap().data(), &r),
            x.data(),
            1e-3,
        );
        assert!(rel_err(g.grad_x.data(), &num_x) < 1e-4);
        let num_w = numeric_grad(
            |v| {
                let q = DenseParams::new(Matrix::from_vec(o, i, v.to_vec()).unwrap(), p.bias.clone()).unwrap();
                dot(dense_forward(&x, &q).unwrap().data(), &r)
            },
            p.weight.data(),
            1e-3,
        );
        assert!(rel_err(g.grad_w.data(), &num_w) < 1e-4);
        let num_b = numeric_grad(
            |v| {
                let q = DenseParams::new(p.weight.clone(), v.to_vec()).unwrap();
                dot(dense_forward(&x, &q).unwrap().data(), &r)
            },
            &p.bias,
            1e-3,
        );
        assert!(rel_err(&g.grad_b, &num_b) < 1e-4);
    }
}

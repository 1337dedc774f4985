//! Elementwise activations, pooling, affine layers and softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::ReLU => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the output `y` (for ReLU, `y > 0`
    /// exactly when the input was positive).
    #[inline]
    pub fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::ReLU => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }

    pub fn forward<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| self.apply(v))
    }

    pub fn forward_inplace<T: Scalar>(self, x: &mut Tensor<T>) {
        for v in x.data_mut() {
            *v = self.apply(*v);
        }
    }

    pub fn backward<T: Scalar>(self, y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        grad_out.expect_shape(y.shape())?;
        let data = y
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&yv, &g)| g * self.derivative_from_output(yv))
            .collect();
        Tensor::from_vec(y.shape(), data)
    }
}

/// Logistic function, evaluated without overflow for large `|v|`.
#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Mean over the time axis: `[B, C, T] -> [B, C, 1]`.
pub fn adaptive_avg_pool1<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, t) = x.dims3()?;
    let data = x
        .data()
        .chunks(t)
        .map(|row| T::lit(row.iter().map(|v| v.as_f64()).sum::<f64>() / t as f64))
        .collect();
    Tensor::from_vec(&[b, c, 1], data)
}

/// Spreads `grad [B, C, 1]` uniformly over `time` steps.
pub fn adaptive_avg_pool1_backward<T: Scalar>(grad: &Tensor<T>, time: usize) -> Result<Tensor<T>> {
    let (b, c, one) = grad.dims3()?;
    if one != 1 || time == 0 {
        return Err(Error::shape("pool gradient must be [B, C, 1] with time >= 1"));
    }
    let inv = T::lit(1.0 / time as f64);
    let mut data = Vec::with_capacity(b * c * time);
    for &g in grad.data() {
        data.extend(std::iter::repeat(g * inv).take(time));
    }
    Tensor::from_vec(&[b, c, time], data)
}

/// `y = x w^T + b` for `x [B, F_in]`, `w [F_out, F_in]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, fin) = x.dims2()?;
    let (fout, wfin) = w.dims2()?;
    if fin != wfin {
        return Err(Error::shape(format!(
            "linear input has {fin} features, weight expects {wfin}"
        )));
    }
    b.expect_shape(&[fout])?;
    let mut out = Vec::with_capacity(batch * fout);
    for _ in 0..batch {
        out.extend_from_slice(b.data());
    }
    T::gemm(batch, fin, fout, T::one(), x.data(), (fin as isize, 1), w.data(), (1, fin as isize), T::one(), &mut out, (fout as isize, 1));
    Tensor::from_vec(&[batch, fout], out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (batch, fin) = x.dims2()?;
    let (fout, _) = w.dims2()?;
    grad_out.expect_shape(&[batch, fout])?;
    let mut gw = vec![T::zero(); fout * fin];
    T::gemm(fout, batch, fin, T::one(), grad_out.data(), (1, fout as isize), x.data(), (fin as isize, 1), T::zero(), &mut gw, (fin as isize, 1));
    let mut gx = vec![T::zero(); batch * fin];
    T::gemm(batch, fout, fin, T::one(), grad_out.data(), (fout as isize, 1), w.data(), (fin as isize, 1), T::zero(), &mut gx, (fin as isize, 1));
    let gb = (0..fout)
        .map(|j| (0..batch).fold(T::zero(), |a, i| a + grad_out.data()[i * fout + j]))
        .collect();
    Ok(LinearGrads {
        input: Tensor::from_vec(&[batch, fin], gx)?,
        weight: Tensor::from_vec(&[fout, fin], gw)?,
        bias: Tensor::from_vec(&[fout], gb)?,
    })
}

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy over rows of `logits [B, n]` and its gradient.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (batch, n) = logits.dims2()?;
    if targets.len() != batch {
        return Err(Error::shape(format!(
            "{} targets for a batch of {batch}",
            targets.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(batch * n);
    let inv_b = 1.0 / batch as f64;
    for (row, &y) in logits.data().chunks(n).zip(targets) {
        if y >= n {
            return Err(Error::Validation(format!("target {y} outside {n} classes")));
        }
        let p = softmax(row);
        loss -= p[y].as_f64().max(f64::MIN_POSITIVE).ln();
        for (j, &pj) in p.iter().enumerate() {
            let t = if j == y { 1.0 } else { 0.0 };
            grad.push(T::lit((pj.as_f64() - t) * inv_b));
        }
    }
    Ok((loss * inv_b, Tensor::from_vec(&[batch, n], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_ignores_a_common_shift(
            logits in prop::collection::vec(-30.0f64..30.0, 1..8),
            shift in -50.0f64..50.0,
        ) {
            let moved: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let (p, q) = (softmax(&logits), softmax(&moved));
            prop_assert_eq!(argmax(&p), argmax(&q));
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::ReLU.apply(-3.2f64), 0.0);
        assert_eq!(Activation::ReLU.apply(3.2f64), 3.2);
        assert!(Activation::Sigmoid.apply(-800.0f64) >= 0.0);
        assert!(Activation::Sigmoid.apply(800.0f64) <= 1.0);
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let h = 1e-5;
        for kind in [Activation::ReLU, Activation::Sigmoid, Activation::Tanh] {
            for &x in &[-1.0f64, 0.3, 2.0] {
                let num = (kind.apply(x + h) - kind.apply(x - h)) / (2.0 * h);
                let ana = kind.derivative_from_output(kind.apply(x));
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-12);
                assert!(rel < 1e-6 || (num == 0.0 && ana == 0.0), "{kind:?} at {x}: {rel}");
            }
        }
    }

    #[test]
    fn pool_mean_and_backward() {
        let x = Tensor::from_vec(&[1, 2, 3], vec![1.0f64, 2.0, 3.0, 5.0, 5.0, 5.0]).unwrap();
        let p = adaptive_avg_pool1(&x).unwrap();
        assert_eq!(p.data(), &[2.0, 5.0]);
        let g = adaptive_avg_pool1_backward(&Tensor::full(&[1, 1, 1], 1.0f64), 4).unwrap();
        assert_eq!(g.data(), &[0.25; 4]);
    }

    #[test]
    fn linear_examples() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[3.0, 0.0]);
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[2]);
        assert_eq!(linear_forward(&x, &eye, &zero).unwrap(), x);
    }

    #[test]
    fn linear_gradcheck() {
        let x = Tensor::from_vec(&[2, 3], vec![0.3f64, -0.2, 0.9, 1.1, 0.4, -0.7]).unwrap();
        let w = Tensor::from_vec(&[2, 3], vec![0.5, -0.1, 0.2, 0.8, 0.3, -0.6]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.1, -0.3]).unwrap();
        let proj = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 0.7]).unwrap();
        let g = linear_backward(&x, &w, &proj).unwrap();
        let f = |x: &Tensor<f64>, w: &Tensor<f64>| linear_forward(x, w, &b).unwrap().dot(&proj).unwrap();
        let h = 1e-5;
        for i in 0..6 {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (f(&x, &p) - f(&x, &m)) / (2.0 * h);
            assert!((num - g.weight.data()[i]).abs() / num.abs().max(1e-12) < 1e-6);
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (f(&p, &w) - f(&m, &w)) / (2.0 * h);
            assert!((num - g.input.data()[i]).abs() / num.abs().max(1e-12) < 1e-6);
        }
        assert_eq!(g.bias.data(), &[1.5, -1.3]);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0f64, 0.0, 0.0]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = softmax(&[2.0f64, 1.0, 0.0]);
        let b = softmax(&[12.0f64, 11.0, 10.0]);
        assert!(a[0] > a[1] && a[1] > a[2]);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-7);
        }
        // direct evaluation
        let z = 1.0 + (-1.0f64).exp() + (-2.0f64).exp();
        assert!((a[0] - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let logits = Tensor::from_vec(&[1, 3], vec![0.0f64, 0.0, 0.0]).unwrap();
        let (loss, g) = cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
        assert!((g.data()[1] + 2.0 / 3.0).abs() < 1e-12);
    }
}

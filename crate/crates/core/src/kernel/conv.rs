//! 1-D convolution and transposed convolution.
//!
//! Both lower to `im2col` + GEMM per batch item. Batch items are mapped in
//! parallel, and every cross-item reduction (weight and bias gradients) is
//! summed in item order afterwards, so results do not depend on the number
//! of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Stride, padding and output padding of a (transposed) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            output_padding: 0,
        }
    }

    pub const fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    fn is_pointwise(&self, kernel: usize) -> bool {
        kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `floor((len + 2P - K) / S) + 1`.
pub fn conv_output_len(len: usize, kernel: usize, geom: ConvGeometry) -> Result<usize> {
    if geom.stride == 0 {
        return Err(Error::shape("stride must be >= 1"));
    }
    let padded = len + 2 * geom.padding;
    if padded < kernel {
        return Err(Error::shape(format!(
            "input length {len} with padding {} shorter than kernel {kernel}",
            geom.padding
        )));
    }
    Ok((padded - kernel) / geom.stride + 1)
}

/// `(len - 1) * S - 2P + K + output_padding`.
pub fn conv_transpose_output_len(len: usize, kernel: usize, geom: ConvGeometry) -> Result<usize> {
    if geom.stride == 0 {
        return Err(Error::shape("stride must be >= 1"));
    }
    let full = (len - 1) * geom.stride + kernel + geom.output_padding;
    if full <= 2 * geom.padding {
        return Err(Error::shape(format!(
            "transposed conv output length non-positive for input length {len}"
        )));
    }
    Ok(full - 2 * geom.padding)
}

/// Valid column range `t` such that `0 <= t*S + k - P < signal_len`.
#[inline]
fn valid_cols(k: usize, geom: ConvGeometry, signal_len: usize, n_cols: usize) -> (usize, usize) {
    let (s, p) = (geom.stride, geom.padding);
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    // t*S + k - P <= signal_len - 1
    let hi = if signal_len + p < k + 1 {
        0
    } else {
        ((signal_len - 1 + p - k) / s + 1).min(n_cols)
    };
    (lo.min(hi), hi)
}

/// `cols[(c*K + k), t] = signal[c, t*S + k - P]`, zero outside the signal.
fn im2col<T: Scalar>(
    signal: &[T],
    channels: usize,
    signal_len: usize,
    kernel: usize,
    geom: ConvGeometry,
    n_cols: usize,
    cols: &mut [T],
) {
    debug_assert_eq!(cols.len(), channels * kernel * n_cols);
    for c in 0..channels {
        let src = &signal[c * signal_len..(c + 1) * signal_len];
        for k in 0..kernel {
            let row = &mut cols[(c * kernel + k) * n_cols..(c * kernel + k + 1) * n_cols];
            let (lo, hi) = valid_cols(k, geom, signal_len, n_cols);
            row[..lo].fill(T::zero());
            row[hi..].fill(T::zero());
            if geom.stride == 1 {
                let start = lo + k - geom.padding;
                row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
            } else if hi > lo {
                let start = lo * geom.stride + k - geom.padding;
                let taps = src[start..].iter().step_by(geom.stride);
                for (dst, &v) in row[lo..hi].iter_mut().zip(taps) {
                    *dst = v;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the signal.
fn col2im_add<T: Scalar>(
    cols: &[T],
    channels: usize,
    signal_len: usize,
    kernel: usize,
    geom: ConvGeometry,
    n_cols: usize,
    signal: &mut [T],
) {
    for c in 0..channels {
        let dst = &mut signal[c * signal_len..(c + 1) * signal_len];
        for k in 0..kernel {
            let row = &cols[(c * kernel + k) * n_cols..(c * kernel + k + 1) * n_cols];
            let (lo, hi) = valid_cols(k, geom, signal_len, n_cols);
            for (t, &v) in row.iter().enumerate().take(hi).skip(lo) {
                dst[t * geom.stride + k - geom.padding] += v;
            }
        }
    }
}

fn check_conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    in_axis: usize,
    out_axis: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (batch, cin, len) = x.dims3()?;
    let ws = w.dims3()?;
    let (wcin, cout, k) = (
        [ws.0, ws.1, ws.2][in_axis],
        [ws.0, ws.1, ws.2][out_axis],
        ws.2,
    );
    if wcin != cin {
        return Err(Error::shape(format!(
            "input has {cin} channels, weight expects {wcin}"
        )));
    }
    if let Some(b) = b {
        b.expect_shape(&[cout])?;
    }
    Ok((batch, cin, len, cout, k))
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>, len: usize) {
    match bias {
        Some(b) => {
            for (row, &bv) in out.chunks_mut(len).zip(b.data()) {
                row.fill(bv);
            }
        }
        None => out.fill(T::zero()),
    }
}

fn sum_rows<T: Scalar>(g: &[T], len: usize) -> Vec<T> {
    g.chunks(len)
        .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
        .collect()
}

fn reduce_in_order<T: Scalar>(parts: Vec<Vec<T>>) -> Vec<T> {
    let mut iter = parts.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for p in iter {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// Gradients of a (transposed) convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Cross-correlation of `x [B, Cin, L]` with `w [Cout, Cin, K]`.
pub fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let (batch, cin, len, cout, k) = check_conv_shapes(x, w, b, 1, 0)?;
    let lout = conv_output_len(len, k, geom)?;
    let ck = cin * k;
    let mut out = Tensor::zeros(&[batch, cout, lout]);
    out.data_mut()
        .par_chunks_mut(cout * lout)
        .enumerate()
        .for_each_init(Vec::new, |cols, (bi, dst)| {
            add_bias(dst, b, lout);
            let xi = x.item(bi);
            if geom.is_pointwise(k) {
                T::gemm(cout, ck, lout, T::one(), w.data(), (ck as isize, 1), xi, (lout as isize, 1), T::one(), dst, (lout as isize, 1));
            } else {
                cols.resize(ck * lout, T::zero());
                im2col(xi, cin, len, k, geom, lout, cols);
                T::gemm(cout, ck, lout, T::one(), w.data(), (ck as isize, 1), cols, (lout as isize, 1), T::one(), dst, (lout as isize, 1));
            }
        });
    Ok(out)
}

/// Exact gradients of [`conv1d_forward`].
pub fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (batch, cin, len, cout, k) = check_conv_shapes(x, w, None, 1, 0)?;
    let lout = conv_output_len(len, k, geom)?;
    grad_out.expect_shape(&[batch, cout, lout])?;
    let ck = cin * k;
    let parts: Vec<_> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let xi = x.item(bi);
            let gi = grad_out.item(bi);
            let owned_cols;
            let cols: &[T] = if geom.is_pointwise(k) {
                xi
            } else {
                let mut c = vec![T::zero(); ck * lout];
                im2col(xi, cin, len, k, geom, lout, &mut c);
                owned_cols = c;
                &owned_cols
            };
            let mut gw = vec![T::zero(); cout * ck];
            T::gemm(cout, lout, ck, T::one(), gi, (lout as isize, 1), cols, (1, lout as isize), T::zero(), &mut gw, (ck as isize, 1));
            let gb = sum_rows(gi, lout);
            let gx = need_input_grad.then(|| {
                let mut gcols = vec![T::zero(); ck * lout];
                T::gemm(ck, cout, lout, T::one(), w.data(), (1, ck as isize), gi, (lout as isize, 1), T::zero(), &mut gcols, (lout as isize, 1));
                if geom.is_pointwise(k) {
                    gcols
                } else {
                    let mut gx = vec![T::zero(); cin * len];
                    col2im_add(&gcols, cin, len, k, geom, lout, &mut gx);
                    gx
                }
            });
            (gw, gb, gx)
        })
        .collect();
    let mut gws = Vec::with_capacity(batch);
    let mut gbs = Vec::with_capacity(batch);
    let mut gxs = Vec::with_capacity(batch);
    for (gw, gb, gx) in parts {
        gws.push(gw);
        gbs.push(gb);
        gxs.push(gx);
    }
    let input = if need_input_grad {
        let data: Vec<T> = gxs.into_iter().flatten().flatten().collect();
        Some(Tensor::from_vec(&[batch, cin, len], data)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input,
        weight: Tensor::from_vec(&[cout, cin, k], reduce_in_order(gws))?,
        bias: Tensor::from_vec(&[cout], reduce_in_order(gbs))?,
    })
}

/// Transposed convolution of `x [B, Cin, L]` with `w [Cin, Cout, K]`.
pub fn conv_transpose1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let (batch, cin, len, cout, k) = check_conv_shapes(x, w, b, 0, 1)?;
    let lout = conv_transpose_output_len(len, k, geom)?;
    let ck = cout * k;
    let mut out = Tensor::zeros(&[batch, cout, lout]);
    out.data_mut()
        .par_chunks_mut(cout * lout)
        .enumerate()
        .for_each(|(bi, dst)| {
            add_bias(dst, b, lout);
            let mut cols = vec![T::zero(); ck * len];
            T::gemm(ck, cin, len, T::one(), w.data(), (1, ck as isize), x.item(bi), (len as isize, 1), T::zero(), &mut cols, (len as isize, 1));
            col2im_add(&cols, cout, lout, k, geom, len, dst);
        });
    Ok(out)
}

/// Exact gradients of [`conv_transpose1d_forward`].
pub fn conv_transpose1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (batch, cin, len, cout, k) = check_conv_shapes(x, w, None, 0, 1)?;
    let lout = conv_transpose_output_len(len, k, geom)?;
    grad_out.expect_shape(&[batch, cout, lout])?;
    let ck = cout * k;
    let parts: Vec<_> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let gi = grad_out.item(bi);
            let mut gcols = vec![T::zero(); ck * len];
            im2col(gi, cout, lout, k, geom, len, &mut gcols);
            let mut gw = vec![T::zero(); cin * ck];
            T::gemm(cin, len, ck, T::one(), x.item(bi), (len as isize, 1), &gcols, (1, len as isize), T::zero(), &mut gw, (ck as isize, 1));
            let gb = sum_rows(gi, lout);
            let gx = need_input_grad.then(|| {
                let mut gx = vec![T::zero(); cin * len];
                T::gemm(cin, ck, len, T::one(), w.data(), (ck as isize, 1), &gcols, (len as isize, 1), T::zero(), &mut gx, (len as isize, 1));
                gx
            });
            (gw, gb, gx)
        })
        .collect();
    let mut gws = Vec::with_capacity(batch);
    let mut gbs = Vec::with_capacity(batch);
    let mut gxs = Vec::with_capacity(batch);
    for (gw, gb, gx) in parts {
        gws.push(gw);
        gbs.push(gb);
        gxs.push(gx);
    }
    let input = if need_input_grad {
        let data: Vec<T> = gxs.into_iter().flatten().flatten().collect();
        Some(Tensor::from_vec(&[batch, cin, len], data)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input,
        weight: Tensor::from_vec(&[cin, cout, k], reduce_in_order(gws))?,
        bias: Tensor::from_vec(&[cout], reduce_in_order(gbs))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        t(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct sliding-window evaluation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> Tensor<f64> {
        let (bn, cin, l) = x.dims3().unwrap();
        let (cout, _, k) = w.dims3().unwrap();
        let lout = (l + 2 * p - k) / s + 1;
        let mut out = vec![0.0; bn * cout * lout];
        for bi in 0..bn {
            for co in 0..cout {
                for to in 0..lout {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for kk in 0..k {
                            let idx = (to * s + kk) as isize - p as isize;
                            if idx >= 0 && (idx as usize) < l {
                                acc += w.data()[(co * cin + ci) * k + kk]
                                    * x.data()[(bi * cin + ci) * l + idx as usize];
                            }
                        }
                    }
                    out[(bi * cout + co) * lout + to] = acc;
                }
            }
        }
        t(&[bn, cout, lout], out)
    }

    #[test]
    fn output_length_chain_of_encoder() {
        let g = ConvGeometry::new(2, 4);
        let mut l = 48_000;
        let mut chain = vec![l];
        for _ in 0..4 {
            l = conv_output_len(l, 9, g).unwrap();
            chain.push(l);
        }
        assert_eq!(chain, vec![48_000, 24_000, 12_000, 6_000, 3_000]);
        let gt = g.with_output_padding(1);
        assert_eq!(conv_transpose_output_len(3000, 9, gt).unwrap(), 6000);
    }

    #[test]
    fn identity_kernel() {
        let x = t(&[1, 1, 4], vec![1.0, -2.0, 3.0, 0.5]);
        let w = t(&[1, 1, 1], vec![1.0]);
        let y = conv1d_forward(&x, &w, None, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(y, x);
        let yt = conv_transpose1d_forward(&x, &w, None, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(yt, x);
    }

    #[test]
    fn difference_kernel_example() {
        let x = t(&[1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = t(&[1, 1, 3], vec![1.0, 0.0, -1.0]);
        let y = conv1d_forward(&x, &w, None, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(y.data(), &[-2.0, -2.0, -2.0]);
    }

    #[test]
    fn matches_naive_on_random_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(s, p, k, l) in &[(1, 0, 3, 7), (2, 1, 3, 7), (2, 4, 9, 20), (3, 2, 5, 11), (1, 2, 1, 6)] {
            let x = random(&[2, 3, l], &mut rng);
            let w = random(&[4, 3, k], &mut rng);
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bt = t(&[4], b.clone());
            let got = conv1d_forward(&x, &w, Some(&bt), ConvGeometry::new(s, p)).unwrap();
            let want = naive_conv(&x, &w, &b, s, p);
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 8]);
        let w = Tensor::<f32>::zeros(&[4, 3, 3]);
        assert!(matches!(
            conv1d_forward(&x, &w, None, ConvGeometry::new(1, 0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 2, 7], &mut rng);
        let w = random(&[3, 2, 3], &mut rng);
        let g = Tensor::zeros(&[2, 3, 4]);
        let grads = conv1d_backward(&x, &w, &g, ConvGeometry::new(2, 1), true).unwrap();
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
        assert!(grads.input.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_sums_time_axis() {
        let x = Tensor::<f64>::full(&[1, 1, 4], 0.3);
        let w = Tensor::<f64>::full(&[2, 1, 1], 0.5);
        let g = Tensor::<f64>::full(&[1, 2, 4], 1.0);
        let grads = conv1d_backward(&x, &w, &g, ConvGeometry::new(1, 0), false).unwrap();
        assert_eq!(grads.bias.data(), &[4.0, 4.0]);
        assert!(grads.input.is_none());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let geom = ConvGeometry::new(2, 1);
        let x = random(&[2, 2, 7], &mut rng);
        let w = random(&[3, 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let proj = random(&[2, 3, 4], &mut rng);
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            conv1d_forward(x, w, Some(b), geom).unwrap().dot(&proj).unwrap()
        };
        let grads = conv1d_backward(&x, &w, &proj, geom, true).unwrap();
        let h = 1e-5;
        let check = |analytic: &Tensor<f64>, which: usize| {
            for i in 0..analytic.len() {
                let (mut xp, mut wp, mut bp) = (x.clone(), w.clone(), b.clone());
                let (mut xm, mut wm, mut bm) = (x.clone(), w.clone(), b.clone());
                match which {
                    0 => {
                        xp.data_mut()[i] += h;
                        xm.data_mut()[i] -= h;
                    }
                    1 => {
                        wp.data_mut()[i] += h;
                        wm.data_mut()[i] -= h;
                    }
                    _ => {
                        bp.data_mut()[i] += h;
                        bm.data_mut()[i] -= h;
                    }
                }
                let num = (f(&xp, &wp, &bp) - f(&xm, &wm, &bm)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-10);
                assert!(rel < 1e-4, "tensor {which} index {i}: {a} vs {num}");
            }
        };
        check(grads.input.as_ref().unwrap(), 0);
        check(&grads.weight, 1);
        check(&grads.bias, 2);
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(s, p, k, l, op) in &[(2, 4, 9, 32, 1), (2, 1, 3, 8, 1), (1, 0, 3, 9, 0), (3, 1, 4, 13, 2)] {
            let geom = ConvGeometry::new(s, p);
            let x = random(&[2, 3, l], &mut rng);
            let w = random(&[5, 3, k], &mut rng);
            let y_shape = conv1d_forward(&x, &w, None, geom).unwrap();
            let y = random(y_shape.shape(), &mut rng);
            // the same weight memory read as [Cin_T = 5, Cout_T = 3, K]
            let lhs = y_shape.dot(&y).unwrap();
            let xt = conv_transpose1d_forward(&y, &w, None, geom.with_output_padding(op)).unwrap();
            if xt.shape() == x.shape() {
                let rhs = x.dot(&xt).unwrap();
                assert!((lhs - rhs).abs() < 1e-8, "{lhs} vs {rhs}");
            } else {
                panic!("output padding {op} does not invert length for l={l}");
            }
        }
    }
}

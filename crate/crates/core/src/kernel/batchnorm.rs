use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Variance floor added inside the square root.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistic update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel affine parameters and running statistics of a batch norm.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams<'a, T> {
    pub gain: &'a Tensor<T>,
    pub shift: &'a Tensor<T>,
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
}

/// What the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// Gradients of a batch norm.
#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, p: &BatchNormParams<'_, T>) -> Result<(usize, usize, usize)> {
    let (b, c, l) = x.dims3()?;
    for t in [p.gain, p.shift, p.running_mean, p.running_var] {
        if t.shape() != [c] {
            return Err(Error::shape(format!(
                "batch norm parameters have shape {:?}, input has {c} channels",
                t.shape()
            )));
        }
    }
    Ok((b, c, l))
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<'_, T>,
    mean: &[f64],
    inv_std: &[f64],
) -> (Tensor<T>, Tensor<T>) {
    let (b, c, l) = x.dims3().expect("checked");
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * l;
            let (m, s) = (T::lit(mean[ci]), T::lit(inv_std[ci]));
            let (g, sh) = (p.gain.data()[ci], p.shift.data()[ci]);
            let src = &x.data()[off..off + l];
            for ((xh, yv), &v) in xhat.data_mut()[off..off + l]
                .iter_mut()
                .zip(&mut y.data_mut()[off..off + l])
                .zip(src)
            {
                *xh = (v - m) * s;
                *yv = *xh * g + sh;
            }
        }
    }
    (y, xhat)
}

/// Training-mode batch norm: normalizes each channel over `(batch, time)`
/// and returns the batch mean and unbiased batch variance for the caller to
/// fold into the running statistics.
pub fn batchnorm1d_train<T: Scalar>(
    x: &Tensor<T>,
    p: BatchNormParams<'_, T>,
) -> Result<(Tensor<T>, BatchNormCache<T>, RunningUpdate)> {
    let (b, c, l) = check(x, &p)?;
    let n = b * l;
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batch*time = {n}, need at least 2 values per channel"
        )));
    }
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            let off = (bi * c + ci) * l;
            s += x.data()[off..off + l].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / n as f64;
        let mut ss = 0.0;
        for bi in 0..b {
            let off = (bi * c + ci) * l;
            ss += x.data()[off..off + l]
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = ss / n as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (y, xhat) = normalize(x, &p, &mean, &inv_std);
    let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
    Ok((
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: true,
        },
        RunningUpdate {
            mean,
            var: unbiased,
        },
    ))
}

/// Batch statistics to blend into the running mean/variance.
#[derive(Clone, Debug)]
pub struct RunningUpdate {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningUpdate {
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply<T: Scalar>(&self, running_mean: &mut Tensor<T>, running_var: &mut Tensor<T>) {
        let m = BN_MOMENTUM;
        for (r, &b) in running_mean.data_mut().iter_mut().zip(&self.mean) {
            *r = T::lit((1.0 - m) * r.as_f64() + m * b);
        }
        for (r, &b) in running_var.data_mut().iter_mut().zip(&self.var) {
            *r = T::lit((1.0 - m) * r.as_f64() + m * b);
        }
    }
}

pub(crate) fn running_inv_std<T: Scalar>(p: &BatchNormParams<'_, T>) -> Vec<f64> {
    p.running_var
        .data()
        .iter()
        .map(|v| 1.0 / (v.as_f64() + BN_EPS).sqrt())
        .collect()
}

/// [`batchnorm1d_eval`] without a backward cache, overwriting `x`.
/// Produces bit-identical outputs.
pub fn batchnorm1d_eval_inplace<T: Scalar>(x: &mut Tensor<T>, p: BatchNormParams<'_, T>) -> Result<()> {
    check(x, &p)?;
    let inv_std = running_inv_std(&p);
    let (_, c, l) = x.dims3()?;
    for (row_idx, row) in x.data_mut().chunks_mut(l).enumerate() {
        let ci = row_idx % c;
        let (m, s) = (T::lit(p.running_mean.data()[ci].as_f64()), T::lit(inv_std[ci]));
        let (g, sh) = (p.gain.data()[ci], p.shift.data()[ci]);
        for v in row {
            *v = (*v - m) * s * g + sh;
        }
    }
    Ok(())
}

/// Evaluation-mode batch norm using the running statistics only.
pub fn batchnorm1d_eval<T: Scalar>(
    x: &Tensor<T>,
    p: BatchNormParams<'_, T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    check(x, &p)?;
    let mean: Vec<f64> = p.running_mean.data().iter().map(|v| v.as_f64()).collect();
    let inv_std = running_inv_std(&p);
    let (y, xhat) = normalize(x, &p, &mean, &inv_std);
    Ok((
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: false,
        },
    ))
}

pub fn batchnorm1d_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gain: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    grad_out.expect_shape(cache.xhat.shape())?;
    let (b, c, l) = grad_out.dims3()?;
    let n = (b * l) as f64;
    let mut gx = Tensor::zeros(grad_out.shape());
    let mut ggain = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    for ci in 0..c {
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for bi in 0..b {
            let off = (bi * c + ci) * l;
            for (&g, &xh) in grad_out.data()[off..off + l]
                .iter()
                .zip(&cache.xhat.data()[off..off + l])
            {
                sum_g += g.as_f64();
                sum_gx += g.as_f64() * xh.as_f64();
            }
        }
        ggain[ci] = T::lit(sum_gx);
        gshift[ci] = T::lit(sum_g);
        let gamma = gain.data()[ci].as_f64();
        let inv_std = cache.inv_std[ci];
        for bi in 0..b {
            let off = (bi * c + ci) * l;
            let dst = &mut gx.data_mut()[off..off + l];
            let go = &grad_out.data()[off..off + l];
            let xh = &cache.xhat.data()[off..off + l];
            if cache.batch_stats {
                let scale = gamma * inv_std / n;
                for ((d, &g), &x) in dst.iter_mut().zip(go).zip(xh) {
                    *d = T::lit(scale * (n * g.as_f64() - sum_g - x.as_f64() * sum_gx));
                }
            } else {
                let scale = T::lit(gamma * inv_std);
                for (d, &g) in dst.iter_mut().zip(go) {
                    *d = g * scale;
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: gx,
        gain: Tensor::from_vec(&[c], ggain)?,
        shift: Tensor::from_vec(&[c], gshift)?,
    })
}

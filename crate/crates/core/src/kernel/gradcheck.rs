//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;

use super::network::{fill_uniform, Mode, Sequential};
use super::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Checks at most this many randomly chosen entries per tensor.
    pub max_entries: Option<usize>,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// An analytic gradient below `floor` whose difference quotient stays
    /// under this bound counts as an exact zero. Structural zeros (a bias
    /// ahead of a training-mode batch norm) come back from central
    /// differences as roundoff near 1e-9, which no relative test can pass.
    pub zero_tol: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: None,
            floor: 1e-8,
            zero_tol: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.max_rel_error.is_finite() && t.max_abs_error.is_finite())
    }
}

fn entries(len: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match opts.max_entries {
        Some(m) if m < len => {
            let mut v = index::sample(rng, len, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

fn compare(name: &str, analytic: &[f64], numeric: &[(usize, f64)], opts: &GradCheckOptions) -> TensorCheck {
    let (mut rel, mut abs) = (0.0f64, 0.0f64);
    for &(i, n) in numeric {
        let a = analytic[i];
        let d = (a - n).abs();
        abs = abs.max(d);
        if a.abs() <= opts.floor && n.abs() <= opts.zero_tol {
            continue;
        }
        let denom = a.abs().max(n.abs()).max(opts.floor);
        rel = rel.max(d / denom);
    }
    TensorCheck {
        name: name.to_owned(),
        checked: numeric.len(),
        max_rel_error: rel,
        max_abs_error: abs,
    }
}

/// Compares the analytic gradient of a scalar `objective` with central
/// differences, for every trainable tensor of `store` and for the input.
///
/// `gradient` must zero and fill the trainable gradient slots of the store
/// it is given and return the gradient with respect to the input.
pub fn grad_check<F, G>(
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    objective: F,
    gradient: G,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &Tensor<f64>) -> Result<f64>,
    G: Fn(&mut ParamStore<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_5eed);
    let h = opts.step;
    let mut analytic_store = store.clone();
    let grad_input = gradient(&mut analytic_store, input)?;
    let mut tensors = Vec::new();

    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.is_trainable())
        .map(|(n, _)| n.to_owned())
        .collect();
    for name in names {
        let analytic: Vec<f64> = analytic_store
            .param(&name)?
            .grad
            .as_ref()
            .expect("trainable")
            .data()
            .to_vec();
        let mut probe = store.clone();
        let mut numeric = Vec::new();
        for i in entries(analytic.len(), &opts, &mut rng) {
            let orig = probe.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + h;
            let fp = objective(&probe, input)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - h;
            let fm = objective(&probe, input)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            numeric.push((i, (fp - fm) / (2.0 * h)));
        }
        tensors.push(compare(&name, &analytic, &numeric, &opts));
    }

    let mut x = input.clone();
    let mut numeric = Vec::new();
    for i in entries(x.len(), &opts, &mut rng) {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let fp = objective(store, &x)?;
        x.data_mut()[i] = orig - h;
        let fm = objective(store, &x)?;
        x.data_mut()[i] = orig;
        numeric.push((i, (fp - fm) / (2.0 * h)));
    }
    tensors.push(compare("input", grad_input.data(), &numeric, &opts));
    Ok(GradCheckReport { tensors })
}

/// Checks a layer sequence through the objective `<net(x), r>` with a
/// fixed random projection `r`.
pub fn grad_check_sequential(
    net: &Sequential,
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    mode: Mode,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let out = net.infer(store, input.clone());
    let out_shape = match mode {
        Mode::Eval => out?.shape().to_vec(),
        Mode::Train => net.forward(store, input.clone(), mode)?.0.shape().to_vec(),
    };
    let mut proj = Tensor::zeros(&out_shape);
    fill_uniform(&mut proj, 1.0, &mut ChaCha8Rng::seed_from_u64(opts.seed));
    let objective = |s: &ParamStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        net.forward(s, x.clone(), mode)?.0.dot(&proj)
    };
    let gradient = |s: &mut ParamStore<f64>, x: &Tensor<f64>| -> Result<Tensor<f64>> {
        s.zero_grads();
        let (_, tape) = net.forward(s, x.clone(), mode)?;
        Ok(net.backward(s, &tape, proj.clone(), true)?.expect("input grad requested"))
    };
    grad_check(store, input, objective, gradient, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{network::LayerSpec, Activation};

    #[test]
    fn zero_rule_only_forgives_roundoff() {
        let opts = GradCheckOptions::default();
        let noise = compare("b", &[0.0, 1.0], &[(0, 2e-9), (1, 1.0)], &opts);
        assert_eq!(noise.max_rel_error, 0.0);
        assert_eq!(noise.max_abs_error, 2e-9);
        // A dropped gradient is still caught.
        let missing = compare("b", &[0.0], &[(0, 1e-3)], &opts);
        assert_eq!(missing.max_rel_error, 1.0);
    }

    fn linear_net() -> Sequential {
        Sequential::new(
            "lin",
            vec![LayerSpec::Linear {
                in_features: 4,
                out_features: 3,
            }],
        )
    }

    #[test]
    fn single_linear_layer() {
        let net = linear_net();
        let mut store: ParamStore<f64> = net.init_params(4);
        fill_uniform(store.get_mut("lin.1.bias").unwrap(), 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let mut x = Tensor::zeros(&[2, 4]);
        fill_uniform(&mut x, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let r = grad_check_sequential(&net, &store, &x, Mode::Eval, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error() < 1e-6, "{r:?}");
        assert_eq!(r.tensors.len(), 3);
    }

    #[test]
    fn degenerate_zero_case_is_finite() {
        let net = Sequential::new(
            "z",
            vec![
                LayerSpec::Conv1d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Activation(Activation::ReLU),
                LayerSpec::AdaptiveAvgPool1,
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 2,
                    out_features: 2,
                },
            ],
        );
        let mut store: ParamStore<f64> = net.init_params(0);
        let names: Vec<String> = store.names().map(str::to_owned).collect();
        for n in names {
            store.get_mut(&n).unwrap().fill(0.0);
        }
        let x = Tensor::zeros(&[1, 1, 8]);
        let r = grad_check_sequential(&net, &store, &x, Mode::Eval, GradCheckOptions::default()).unwrap();
        assert!(r.is_finite());
    }
}

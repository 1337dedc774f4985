//! Finite-difference gradient checks over every layer kind, the composed
//! encoder, the classification head and both losses (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autoencoder::{encoder_spec, init_autoencoder, smoothed_l1};
use crate::error::Result;
use crate::heads::{head_backward, head_forward, init_head, HeadSpec, Level};
use crate::kernel::ops::{cross_entropy, linear_backward, linear_forward};
use crate::kernel::{
    grad_check, grad_check_sequential, Activation, GradCheckOptions, GradCheckReport, LayerSpec, Mode, ParamKind,
    ParamStore, Sequential, Tensor,
};

/// Tolerance on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct NamedCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub report: GradCheckReport,
}

impl NamedCheck {
    pub fn passed(&self) -> bool {
        self.report.is_finite() && self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn perturb_store(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (name, p) in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        if name.ends_with("running_var") || name.ends_with("gain") {
            p.value = random(&shape, 0.5, 1.5, rng);
        } else if p.kind == ParamKind::Buffer || name.ends_with("shift") || name.ends_with("bias") {
            p.value = random(&shape, -0.3, 0.3, rng);
        }
    }
}

fn layer(name: &str, spec: LayerSpec) -> Sequential {
    Sequential::new(name, vec![spec])
}

fn check_net(name: &str, net: &Sequential, input: &[usize], mode: Mode, seed: u64, opts: GradCheckOptions) -> Result<NamedCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store: ParamStore<f64> = net.init_params(seed);
    perturb_store(&mut store, &mut rng);
    let x = random(input, -1.0, 1.0, &mut rng);
    let report = grad_check_sequential(net, &store, &x, mode, opts)?;
    Ok(NamedCheck {
        name: name.to_owned(),
        max_rel_error: report.max_rel_error(),
        report,
    })
}

/// Runs every check with the given seed.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<NamedCheck>> {
    let full = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let sampled = GradCheckOptions {
        max_entries: Some(24),
        ..full
    };
    let conv = LayerSpec::Conv1d {
        in_channels: 3,
        out_channels: 4,
        kernel: 5,
        stride: 2,
        padding: 2,
    };
    let convt = LayerSpec::ConvTranspose1d {
        in_channels: 4,
        out_channels: 3,
        kernel: 5,
        stride: 2,
        padding: 2,
        output_padding: 1,
    };
    let mut out = vec![
        check_net("conv1d", &layer("c", conv), &[2, 3, 16], Mode::Train, seed, full)?,
        check_net("conv_transpose1d", &layer("t", convt), &[2, 4, 8], Mode::Train, seed, full)?,
        check_net("batchnorm1d_train", &layer("b", LayerSpec::BatchNorm1d { features: 3 }), &[4, 3, 6], Mode::Train, seed, full)?,
        check_net("batchnorm1d_eval", &layer("b", LayerSpec::BatchNorm1d { features: 3 }), &[4, 3, 6], Mode::Eval, seed, full)?,
    ];
    for (name, act) in [("relu", Activation::ReLU), ("sigmoid", Activation::Sigmoid), ("tanh", Activation::Tanh)] {
        out.push(check_net(name, &layer("a", LayerSpec::Activation(act)), &[2, 3, 7], Mode::Train, seed, full)?);
    }
    let pool = Sequential::new(
        "p",
        vec![
            LayerSpec::AdaptiveAvgPool1,
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: 4,
                out_features: 3,
            },
        ],
    );
    out.push(check_net("pool_flatten_linear", &pool, &[2, 4, 5], Mode::Train, seed, full)?);
    out.push(check_net("encoder_64", &encoder_spec(), &[2, 1, 64], Mode::Train, seed, sampled)?);
    out.push(check_net("encoder_64_eval", &encoder_spec(), &[2, 1, 64], Mode::Eval, seed, sampled)?);
    out.push(smoothed_l1_check(seed, full)?);
    out.push(cross_entropy_check(seed, full)?);
    for attention in [true, false] {
        out.push(head_check(seed, attention, sampled)?);
    }
    Ok(out)
}

fn smoothed_l1_check(seed: u64, opts: GradCheckOptions) -> Result<NamedCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A wide breakpoint so both branches are exercised with room for the step.
    let beta = 0.25;
    let target = random(&[2, 1, 32], -1.0, 1.0, &mut rng);
    let x_hat = random(&[2, 1, 32], -1.0, 1.0, &mut rng);
    let store = ParamStore::<f64>::new();
    let report = grad_check(
        &store,
        &x_hat,
        |_, xh| Ok(smoothed_l1(&target, xh, beta)?.0),
        |_, xh| Ok(smoothed_l1(&target, xh, beta)?.1),
        opts,
    )?;
    Ok(NamedCheck {
        name: "smoothed_l1".into(),
        max_rel_error: report.max_rel_error(),
        report,
    })
}

fn cross_entropy_check(seed: u64, opts: GradCheckOptions) -> Result<NamedCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    store.insert("w", random(&[3, 5], -1.0, 1.0, &mut rng), ParamKind::Weight, true);
    store.insert("b", random(&[3], -0.5, 0.5, &mut rng), ParamKind::Weight, true);
    let x = random(&[4, 5], -1.0, 1.0, &mut rng);
    let targets = [0usize, 2, 1, 2];
    let report = grad_check(
        &store,
        &x,
        |s, x| Ok(cross_entropy(&linear_forward(x, s.get("w")?, s.get("b")?)?, &targets)?.0),
        |s, x| {
            let logits = linear_forward(x, s.get("w")?, s.get("b")?)?;
            let (_, g) = cross_entropy(&logits, &targets)?;
            let grads = linear_backward(x, s.get("w")?, &g)?;
            s.zero_grads();
            s.accumulate_grad("w", &grads.weight)?;
            s.accumulate_grad("b", &grads.bias)?;
            Ok(grads.input)
        },
        opts,
    )?;
    Ok(NamedCheck {
        name: "linear_cross_entropy".into(),
        max_rel_error: report.max_rel_error(),
        report,
    })
}

fn head_check(seed: u64, attention: bool, opts: GradCheckOptions) -> Result<NamedCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = init_autoencoder::<f64>(seed).subset("enc.");
    perturb_store(&mut enc, &mut rng);
    let spec = HeadSpec::new(Level::Admr, attention);
    let head = init_head(spec, &enc, seed)?;
    let x = random(&[2, 128, 16], 0.0, 1.0, &mut rng);
    let targets = [1usize, 4];
    let report = grad_check(
        &head,
        &x,
        |s, x| {
            let (logits, _) = head_forward(spec, s, &enc, x.clone(), false)?;
            Ok(cross_entropy(&logits, &targets)?.0)
        },
        |s, x| {
            s.zero_grads();
            let (logits, tape) = head_forward(spec, s, &enc, x.clone(), true)?;
            let (_, g) = cross_entropy(&logits, &targets)?;
            let tape = tape.expect("recorded");
            Ok(head_backward(spec, s, &enc, &tape, &g, true)?.expect("input gradient"))
        },
        opts,
    )?;
    Ok(NamedCheck {
        name: if attention { "head_attention" } else { "head_no_attention" }.into(),
        max_rel_error: report.max_rel_error(),
        report,
    })
}

//! Finite-difference verification of every differentiable op and of the
//! full network, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{gradcheck, BnMode, ConvSpec, GradcheckOptions, GradcheckReport, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::loss::{loss_and_grad, LossKind, NUM_CLASSES};
use crate::net::{lateral_merge, Network, NetworkSpec};
use crate::tensor::{Dims, Tensor4};

pub const OPS: [&str; 12] = [
    "conv2d",
    "dilated_conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "batchnorm2d",
    "relu_add",
    "add",
    "dropout",
    "softmax",
    "loss",
    "lateral_merge",
    "network",
];

/// Relative-error tolerance for each op.
pub fn tolerance(op: &str) -> f64 {
    match op {
        "maxpool2d" | "softmax" | "loss" | "network" => 1e-4,
        "batchnorm2d" | "lateral_merge" => 1e-5,
        _ => 1e-6,
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub instances: usize,
    pub seed: u64,
    /// Scale the analytic gradient of this op by 1.5 to check that the
    /// suite notices.
    pub inject_fault: Option<String>,
    /// Parameters sampled per end-to-end network check.
    pub network_checks: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            instances: 5,
            seed: 0,
            inject_fault: None,
            network_checks: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub tol: f64,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub ops: Vec<OpReport>,
    pub pass: bool,
}

fn random(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn positive(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_| rng.random_range(0.5..1.5))
}

fn check_instance(op: &str, rng: &mut ChaCha8Rng, opts: &GradcheckOptions, net_checks: usize) -> Result<GradcheckReport> {
    let head = |dims: Dims, rng: &mut ChaCha8Rng| random(dims, rng);
    match op {
        "conv2d" | "dilated_conv2d" => {
            let (k, r) = if op == "conv2d" {
                (rng.random_range(1..=2) * 2 + 1, 1)
            } else {
                (3, rng.random_range(2..=4))
            };
            let spec = ConvSpec::same(rng.random_range(1..=3), rng.random_range(1..=3), k, r, rng.random_bool(0.5));
            let dims = [rng.random_range(1..=2), spec.in_channels, 6, 5];
            let x = random(dims, rng);
            let w = random(spec.weight_dims(), rng);
            let h = head([dims[0], spec.out_channels, 6, 5], rng);
            let mut inputs = vec![x, w];
            if spec.has_bias {
                inputs.push(random(spec.bias_dims(), rng));
            }
            gradcheck(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v.get(2).copied(), spec)?;
                    t.weighted_sum(y, &h)
                },
                &inputs,
                opts,
            )
        }
        "conv_transpose2d" => {
            let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
            let x = random([n, ci, 3, 4], rng);
            let w = random([ci, co, 2, 2], rng);
            let b = random([1, co, 1, 1], rng);
            let h = head([n, co, 6, 8], rng);
            gradcheck(
                |t, v| {
                    let y = t.conv_transpose2d(v[0], v[1], Some(v[2]))?;
                    t.weighted_sum(y, &h)
                },
                &[x, w, b],
                opts,
            )
        }
        "maxpool2d" => {
            let dims = [rng.random_range(1..=2), rng.random_range(1..=3), 4, 6];
            let x = random(dims, rng);
            let h = head([dims[0], dims[1], 2, 3], rng);
            gradcheck(
                |t, v| {
                    let y = t.maxpool2d(v[0])?;
                    t.weighted_sum(y, &h)
                },
                &[x],
                opts,
            )
        }
        "batchnorm2d" => {
            let c = rng.random_range(1..=3);
            let dims = [rng.random_range(2..=3), c, 3, 4];
            let x = random(dims, rng);
            let gamma = positive([1, c, 1, 1], rng);
            let beta = random([1, c, 1, 1], rng);
            let h = head(dims, rng);
            gradcheck(
                |t, v| {
                    let (y, _) = t.batchnorm2d(v[0], v[1], v[2], BnMode::Train)?;
                    t.weighted_sum(y, &h)
                },
                &[x, gamma, beta],
                opts,
            )
        }
        "relu_add" | "add" => {
            let dims = [rng.random_range(1..=2), rng.random_range(1..=3), 4, 4];
            let (a, b, h) = (random(dims, rng), random(dims, rng), head(dims, rng));
            let relu = op == "relu_add";
            gradcheck(
                |t, v| {
                    let mut y = t.add(v[0], v[1])?;
                    if relu {
                        y = t.relu(y)?;
                    }
                    t.weighted_sum(y, &h)
                },
                &[a, b],
                opts,
            )
        }
        "dropout" => {
            let dims = [2, rng.random_range(1..=3), 4, 4];
            let x = random(dims, rng);
            let h = head(dims, rng);
            let rate = [0.3, 0.5][rng.random_range(0..2)];
            let mask_seed = rng.random::<u64>();
            gradcheck(
                |t, v| {
                    // same seed on every evaluation, so the mask is fixed
                    let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
                    let y = t.dropout(v[0], rate, Mode::Train, &mut r)?;
                    t.weighted_sum(y, &h)
                },
                &[x],
                opts,
            )
        }
        "softmax" => {
            let dims = [rng.random_range(1..=2), NUM_CLASSES, 3, 3];
            let x = random(dims, rng);
            let h = head(dims, rng);
            gradcheck(
                |t, v| {
                    let y = t.softmax_channel(v[0])?;
                    t.weighted_sum(y, &h)
                },
                &[x],
                opts,
            )
        }
        "loss" => {
            let dims = [rng.random_range(1..=2), NUM_CLASSES, 4, 4];
            let logits = random(dims, rng);
            let classes: Vec<u8> = (0..dims[0] * 16).map(|_| rng.random_range(0..NUM_CLASSES as u8)).collect();
            let kind = [LossKind::Combined, LossKind::CeOnly, LossKind::DiceOnly][rng.random_range(0..3)];
            gradcheck(|t, v| loss_head(t, v[0], &classes, kind), &[logits], opts)
        }
        "lateral_merge" => {
            let c = rng.random_range(1..=3);
            let spec = ConvSpec::same(c, c, 3, 4, true);
            let dims = [rng.random_range(1..=2), c, 10, 10];
            let inputs = [
                random(dims, rng),
                random(dims, rng),
                random(spec.weight_dims(), rng),
                random(spec.bias_dims(), rng),
            ];
            let h = head(dims, rng);
            gradcheck(
                |t, v| {
                    let y = lateral_merge(t, v[0], v[1], v[2], Some(v[3]), spec)?;
                    t.weighted_sum(y, &h)
                },
                &inputs,
                opts,
            )
        }
        "network" => network_check(rng, opts, net_checks),
        other => Err(Error::InvalidArgument(format!("unknown op {other:?}"))),
    }
}

/// Softmax followed by the training loss, as a scalar on the tape.
fn loss_head(t: &mut Tape<f64>, logits: Var, classes: &[u8], kind: LossKind) -> Result<Var> {
    let probs = t.softmax_channel(logits)?;
    let (_, objective, grad) = loss_and_grad(t.value(probs), classes, kind)?;
    t.scalar_head(probs, objective, grad)
}

/// Train-mode network with the combined loss on a small batch. Dropout uses
/// the same mask on every evaluation.
fn network_check(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, checks: usize) -> Result<GradcheckReport> {
    let spec = NetworkSpec::default();
    let net = Network::<f64>::build(spec.clone(), rng)?;
    let x = random([2, spec.in_channels, 16, 16], rng);
    let classes: Vec<u8> = (0..2 * 256).map(|_| rng.random_range(0..NUM_CLASSES as u8)).collect();
    let mask_seed = rng.random::<u64>();
    let n = net.params().len();
    let mut inputs: Vec<Tensor4<f64>> = net.params().iter().map(|p| p.tensor.clone()).collect();
    inputs.push(x);
    let opts = GradcheckOptions {
        max_checks: Some(checks),
        seed: mask_seed,
        skip_kinks: true,
        ..opts.clone()
    };
    gradcheck(
        |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
            let out = net.forward(t, &v[..n], v[n], Mode::Train, &mut r)?;
            let (_, objective, grad) = loss_and_grad(t.value(out.probs), &classes, LossKind::Combined)?;
            t.scalar_head(out.probs, objective, grad)
        },
        &inputs,
        &opts,
    )
}

/// Check a single op over `opts.instances` random instances.
pub fn check_op(op: &str, opts: &SuiteOptions) -> Result<OpReport> {
    let idx = OPS
        .iter()
        .position(|&o| o == op)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown op {op:?}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(idx as u64);
    let tol = tolerance(op);
    let gc = GradcheckOptions {
        tol,
        analytic_scale: if opts.inject_fault.as_deref() == Some(op) { 1.5 } else { 1.0 },
        ..GradcheckOptions::default()
    };
    let mut report = OpReport {
        op: op.to_owned(),
        tol,
        instances: 0,
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        pass: true,
    };
    for _ in 0..opts.instances {
        let r = check_instance(op, &mut rng, &gc, opts.network_checks)?;
        report.instances += 1;
        report.checked += r.checked;
        report.skipped += r.skipped;
        report.max_rel_err = report.max_rel_err.max(r.max_rel_err);
        report.pass &= r.pass;
    }
    Ok(report)
}

pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    if let Some(op) = &opts.inject_fault {
        if !OPS.contains(&op.as_str()) {
            return Err(Error::InvalidArgument(format!("unknown op {op:?}")));
        }
    }
    let ops = OPS.iter().map(|op| check_op(op, opts)).collect::<Result<Vec<_>>>()?;
    let pass = ops.iter().all(|r| r.pass);
    Ok(SuiteReport { ops, pass })
}

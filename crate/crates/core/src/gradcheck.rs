//! Finite-difference verification of analytic gradients.
//!
//! Everything runs in f64. The scalar being differentiated is `Σ r⊙y` for
//! a fixed random projection `r` of the output, so every output element
//! contributes. Perturbations that flip a ReLU sign or move a max position
//! are detected through the graph's kink signature and skipped.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Module, StateKind};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct CheckConfig {
    pub step: f64,
    /// At most this many elements are probed per tensor.
    pub max_elements: usize,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, max_elements: 24, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckOutcome {
    /// Largest `|analytic − numeric| / (|numeric| + 1e-8)` seen.
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Name of the tensor holding the worst element.
    pub worst: String,
}

impl CheckOutcome {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }

    fn record(&mut self, name: &str, analytic: f64, numeric: f64) {
        let e = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
        self.checked += 1;
        if e > self.max_rel_error || !e.is_finite() {
            self.max_rel_error = if e.is_finite() { e } else { f64::INFINITY };
            self.worst = name.to_string();
        }
    }
}

/// Parameterless stand-in for checking plain functions.
impl Module<f64> for () {
    fn for_each(&self, _: &str, _: &mut dyn FnMut(&str, StateKind, &Tensor<f64>)) {}
    fn for_each_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, StateKind, &mut Tensor<f64>)) {}
}

type Forward<'f, M> = dyn Fn(&M, &Graph<'_, f64>, &[Var<f64>]) -> Result<Var<f64>> + 'f;

/// Compares analytic and central-difference gradients for every input and
/// every learnable tensor of `module`.
pub fn check<M: Module<f64>>(
    module: &mut M,
    inputs: &[Tensor<f64>],
    training: bool,
    cfg: &CheckConfig,
    forward: &Forward<'_, M>,
) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let g = Graph::with_mode(true, training).track_kinks();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.leaf(&t.clone().with_requires_grad())).collect();
    let y = forward(module, &g, &vars)?;
    let base_kinks = g.kink_signature();
    let proj: Vec<f64> = (0..y.value().numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let input_grads: Vec<Vec<f64>> = {
        let grads = g.backward_with(&y, proj.clone())?;
        let mut out: Vec<Vec<f64>> =
            vars.iter().zip(inputs).map(|(v, t)| grads.get(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec)).collect();
        module.for_each("", &mut |_, kind, t| {
            if kind == StateKind::Param {
                out.push(grads.param(t).map_or(vec![0.0; t.numel()], <[f64]>::to_vec));
            }
        });
        out
    };

    let eval = |m: &M, xs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let g = Graph::with_mode(false, training).track_kinks();
        let vars: Vec<Var<f64>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let y = forward(m, &g, &vars)?;
        let loss = y.data().iter().zip(&proj).map(|(a, b)| a * b).sum();
        Ok((loss, g.kink_signature()))
    };

    let mut outcome = CheckOutcome::default();
    let h = cfg.step;
    let mut xs = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate().take(inputs.len()) {
        for i in probe(xs[k].numel(), cfg.max_elements, &mut rng) {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let (up, ku) = eval(module, &xs)?;
            xs[k].data_mut()[i] = orig - h;
            let (down, kd) = eval(module, &xs)?;
            xs[k].data_mut()[i] = orig;
            if ku != base_kinks || kd != base_kinks {
                outcome.skipped += 1;
                continue;
            }
            outcome.record(&format!("input{k}"), analytic[i], (up - down) / (2.0 * h));
        }
    }

    let mut names = Vec::new();
    module.for_each("", &mut |name, kind, _| {
        if kind == StateKind::Param {
            names.push(name.to_string());
        }
    });
    for (p, name) in names.iter().enumerate() {
        let analytic = &input_grads[inputs.len() + p];
        for i in probe(analytic.len(), cfg.max_elements, &mut rng) {
            let orig = nudge(module, name, i, None);
            nudge(module, name, i, Some(orig + h));
            let (up, ku) = eval(module, &xs)?;
            nudge(module, name, i, Some(orig - h));
            let (down, kd) = eval(module, &xs)?;
            nudge(module, name, i, Some(orig));
            if ku != base_kinks || kd != base_kinks {
                outcome.skipped += 1;
                continue;
            }
            outcome.record(name, analytic[i], (up - down) / (2.0 * h));
        }
    }
    Ok(outcome)
}

fn probe(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Reads element `i` of the named parameter and optionally overwrites it.
fn nudge<M: Module<f64>>(module: &mut M, name: &str, i: usize, value: Option<f64>) -> f64 {
    let mut old = f64::NAN;
    module.for_each_mut("", &mut |n, _, t| {
        if n == name {
            old = t.data()[i];
            if let Some(v) = value {
                t.data_mut()[i] = v;
            }
        }
    });
    old
}

/// Summary of repeated checks of one registered operation.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: String,
    pub trials: usize,
    pub passed: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl OpReport {
    pub fn ok(&self) -> bool {
        self.passed == self.trials
    }
}

/// Runs `trials` independent random small instances of `op`.
pub fn run_op(op: &str, trials: usize, tolerance: f64, seed: u64) -> Result<OpReport> {
    if !OPS.contains(&op) {
        return Err(Error::Config(format!("unknown op {op:?}; registered: {}", OPS.join(", "))));
    }
    let mut report =
        OpReport { op: op.to_string(), trials, passed: 0, max_rel_error: 0.0, checked: 0, skipped: 0 };
    for t in 0..trials {
        let trial_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let cfg = CheckConfig { seed: trial_seed, ..CheckConfig::default() };
        let out = cases::run(op, &mut rng, &cfg)?;
        report.max_rel_error = report.max_rel_error.max(out.max_rel_error);
        report.checked += out.checked;
        report.skipped += out.skipped;
        if out.passed(tolerance) {
            report.passed += 1;
        }
    }
    Ok(report)
}

/// Names accepted by [`run_op`].
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "matmul",
    "reshape",
    "permute",
    "sum",
    "mean",
    "max",
    "softmax",
    "conv3d",
    "batchnorm",
    "batchnorm_eval",
    "linear",
    "global_avg_pool",
    "spatial_temporal",
    "attend_spatial",
    "attend_temporal",
    "dep_mhsa",
    "mhsa3d",
    "mhsa2p1d",
    "vanilla_channel",
    "vanilla_2p1d",
    "bce_loss",
];

mod cases {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::{check, CheckConfig, CheckOutcome};
    use crate::attention::{attend, ChannelGate, DepMhsa, FactoredGate, FactoredMhsa, TokenAxis, Variant};
    use crate::error::Result;
    use crate::nn::{BatchNorm3d, Conv3d, ConvGeometry, Linear, SpatialTemporal};
    use crate::tensor::{Elementwise, Reduce, Tensor};

    fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::randn(dims, 0.0, 1.0, rng).expect("valid dims")
    }

    fn dims(rank: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..rank).map(|_| rng.random_range(1..=4)).collect()
    }

    /// Perturbs BN-style statistics away from degenerate values.
    fn randomize_affine(bn: &mut BatchNorm3d<f64>, rng: &mut ChaCha8Rng) {
        for v in bn.gamma.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in bn.beta.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in bn.running_mean.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in bn.running_var.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
    }

    pub(super) fn run(op: &str, rng: &mut ChaCha8Rng, cfg: &CheckConfig) -> Result<CheckOutcome> {
        match op {
            "add" | "sub" | "mul" => {
                let a = dims(3, rng);
                // Broadcast the second operand along a random subset of axes.
                let b: Vec<usize> = a.iter().map(|&d| if rng.random_bool(0.3) { 1 } else { d }).collect();
                let kind = match op {
                    "add" => Elementwise::Add,
                    "sub" => Elementwise::Sub,
                    _ => Elementwise::Mul,
                };
                let xs = [randn(&a, rng), randn(&b, rng)];
                check(&mut (), &xs, true, cfg, &|_, g, v| g.elementwise(kind, &v[0], Some(&v[1])))
            }
            "relu" | "sigmoid" => {
                let kind = if op == "relu" { Elementwise::Relu } else { Elementwise::Sigmoid };
                let xs = [randn(&dims(3, rng), rng)];
                check(&mut (), &xs, true, cfg, &|_, g, v| g.elementwise(kind, &v[0], None))
            }
            "matmul" => {
                let (b, m, k, n) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
                let xs = [randn(&[b, m, k], rng), randn(&[k, n], rng)];
                check(&mut (), &xs, true, cfg, &|_, g, v| g.matmul(&v[0], &v[1]))
            }
            "reshape" => {
                let d = dims(3, rng);
                let xs = [randn(&d, rng)];
                let flat = [d[0] * d[1], d[2]];
                check(&mut (), &xs, true, cfg, &move |_, g, v| g.reshape(&v[0], &flat))
            }
            "permute" => {
                let xs = [randn(&dims(4, rng), rng)];
                check(&mut (), &xs, true, cfg, &|_, g, v| g.permute(&v[0], &[2, 0, 3, 1]))
            }
            "sum" | "mean" | "max" => {
                let kind = match op {
                    "sum" => Reduce::Sum,
                    "mean" => Reduce::Mean,
                    _ => Reduce::Max,
                };
                let xs = [randn(&dims(3, rng), rng)];
                let axes: Vec<isize> = if rng.random_bool(0.5) { vec![1] } else { vec![0, 2] };
                let keep = rng.random_bool(0.5);
                check(&mut (), &xs, true, cfg, &move |_, g, v| g.reduce(kind, &v[0], &axes, keep))
            }
            "softmax" => {
                let xs = [randn(&dims(3, rng), rng)];
                let axis = rng.random_range(-3i64..3) as isize;
                check(&mut (), &xs, true, cfg, &move |_, g, v| g.softmax(&v[0], axis))
            }
            "conv3d" => {
                let (c, o) = (rng.random_range(1..4), rng.random_range(1..4));
                let kernel = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
                let stride = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3)];
                let padding = kernel.map(|k| (k - 1) / 2);
                let geom = ConvGeometry { kernel, stride, padding };
                let ext = [rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5)];
                let ext = [0, 1, 2].map(|a| ext[a].max(kernel[a]));
                let mut conv = Conv3d::<f64>::new(c, o, geom, rng.random_bool(0.5), rng)?;
                let xs = [randn(&[rng.random_range(1..3), c, ext[0], ext[1], ext[2]], rng)];
                check(&mut conv, &xs, true, cfg, &|m, g, v| m.forward(g, &v[0]))
            }
            "batchnorm" | "batchnorm_eval" => {
                let c = rng.random_range(1..4);
                let mut bn = BatchNorm3d::<f64>::new(c);
                randomize_affine(&mut bn, rng);
                let d = [rng.random_range(1..3), c, rng.random_range(1..3), rng.random_range(2..4), rng.random_range(1..4)];
                let xs = [randn(&d, rng)];
                check(&mut bn, &xs, op == "batchnorm", cfg, &|m, g, v| m.forward(g, &v[0]))
            }
            "linear" => {
                let (n, f, o) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..4));
                let mut lin = Linear::<f64>::new(f, o, rng)?;
                let xs = [randn(&[n, f], rng)];
                check(&mut lin, &xs, true, cfg, &|m, g, v| m.forward(g, &v[0]))
            }
            "global_avg_pool" => {
                let xs = [randn(&dims(5, rng), rng)];
                check(&mut (), &xs, true, cfg, &|_, g, v| crate::nn::global_avg_pool(g, &v[0]))
            }
            "spatial_temporal" => {
                let (c, o, mid) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
                let stride = [rng.random_range(1..3), rng.random_range(1..3), 1];
                let mut block = SpatialTemporal::<f64>::new(c, o, mid, 3, 3, stride, rng)?;
                let xs = [randn(&[2, c, 3, 4, 3], rng)];
                check(&mut block, &xs, true, cfg, &|m, g, v| m.forward(g, &v[0]))
            }
            "attend_spatial" | "attend_temporal" => {
                let heads = rng.random_range(1..3);
                let d = [rng.random_range(1..3), heads * rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
                let axis = if op == "attend_spatial" { TokenAxis::Spatial } else { TokenAxis::Temporal };
                let xs = [randn(&d, rng), randn(&d, rng), randn(&d, rng)];
                check(&mut (), &xs, true, cfg, &move |_, g, v| attend(g, &v[0], &v[1], &v[2], heads, axis))
            }
            "dep_mhsa" | "mhsa3d" => {
                let heads = rng.random_range(1..3);
                let c = heads * rng.random_range(1..3);
                let ext = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
                let mut m = if op == "dep_mhsa" {
                    let variant = Variant::ALL[rng.random_range(0..4)];
                    DepMhsa::<f64>::variant(c, ext, heads, variant, rng)?
                } else {
                    DepMhsa::<f64>::mhsa3d(c, ext, heads, rng)?
                };
                let xs = [randn(&[rng.random_range(1..3), c, ext[0], ext[1], ext[2]], rng)];
                check(&mut m, &xs, true, cfg, &|m, g, v| m.forward(g, &v[0]))
            }
            "mhsa2p1d" => {
                let heads = rng.random_range(1..3);
                let c = heads * rng.random_range(1..3);
                let mut m = FactoredMhsa::<f64>::new(c, heads, rng)?;
                let xs = [randn(&[rng.random_range(1..3), c, rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)], rng)];
                check(&mut m, &xs, true, cfg, &|m, g, v| m.forward(g, &v[0]))
            }
            "vanilla_channel" => {
                let c = rng.random_range(1..4);
                let mut m = ChannelGate::<f64>::new(c, rng)?;
                let xs = [randn(&[rng.random_range(1..3), c, rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)], rng)];
                check(&mut m, &xs, true, cfg, &|m, g, v| m.forward(g, &v[0]))
            }
            "vanilla_2p1d" => {
                let c = rng.random_range(1..4);
                let mut m = FactoredGate::<f64>::new(c, rng)?;
                let xs = [randn(&[rng.random_range(1..3), c, rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)], rng)];
                check(&mut m, &xs, true, cfg, &|m, g, v| m.forward(g, &v[0]))
            }
            "bce_loss" => {
                let n = rng.random_range(1..6);
                let labels: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
                let xs = [randn(&[n, 1], rng).map(|z| 3.0 * z)];
                check(&mut (), &xs, true, cfg, &move |_, g, v| crate::train::bce_loss(g, &v[0], &labels))
            }
            other => unreachable!("op {other} is registered but has no case"),
        }
    }
}

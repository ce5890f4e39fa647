//! Shared fixtures for the integration tests and the acceptance target.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dvse_core::featkit::{Normalizer, FRAME_FEATURES};
use dvse_core::geom::AngleRanges;
use dvse_core::models::{dvse_forward, infer_with_pose, CoreKind, DvseModel, DvseNets, ModelConfig};
use dvse_core::simkit::{generate_records, DatasetConfig, ManeuverConfig, NoisePolicy, PosePolicy};
use dvse_core::nncore::gradcheck::{check_params, weighted_sum, GradCheckReport};
use dvse_core::nncore::{gru_cell, lstm_cell, Graph, GruLayer, LstmLayer, ParameterStore, TemporalBlock, Tensor, Var};
use dvse_core::trainer::{compute_loss, loss_match};
use dvse_core::Result;

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_CASES: u64 = 20;
pub const LINEAR_TOL: f64 = 1e-6;
pub const NONLINEAR_TOL: f64 = 1e-4;
/// Coordinates probed per tensor in the whole-network checks.
const NET_PROBES: usize = 4;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `±[0.1, 1]`, away from the ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in &mut t.data {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn store(items: Vec<(&str, Tensor)>) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (k, t) in items {
        s.insert(k, t).unwrap();
    }
    s
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// coordinate carries gradient.
fn reduce(g: &mut Graph<'_>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = uniform(&mut rng, &shape, -1.0, 1.0);
    weighted_sum(g, out, &w)
}

/// Replaces every parameter with uniform values so zero-initialized heads
/// and biases are exercised too.
fn randomize(store: &mut ParameterStore, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in store.iter_mut() {
        for v in &mut t.data {
            *v = rng.random_range(-scale..scale);
        }
    }
}

type Case = fn(u64) -> Result<GradCheckReport>;

/// `(name, linear, case)` for every differentiable op and network.
pub fn gradcheck_ops() -> Vec<(&'static str, bool, Case)> {
    vec![
        ("matmul", true, case_matmul as Case),
        ("add_bias", true, case_add_bias),
        ("add", true, case_add),
        ("sub", true, case_sub),
        ("scale", true, case_scale),
        ("affine", true, case_affine),
        ("one_minus", true, case_one_minus),
        ("concat", true, case_concat),
        ("slice_last", true, case_slice_last),
        ("reshape", true, case_reshape),
        ("select_step", true, case_select_step),
        ("stack_steps", true, case_stack_steps),
        ("cumsum_last", true, case_cumsum),
        ("sum", true, case_sum),
        ("mean", true, case_mean),
        ("fc", true, case_fc),
        ("conv1d_causal", true, case_conv),
        ("mul", false, case_mul),
        ("relu", false, case_relu),
        ("tanh", false, case_tanh),
        ("sigmoid", false, case_sigmoid),
        ("smooth_l1", false, case_smooth_l1),
        ("forward_projection", false, case_projection),
        ("gru_cell", false, case_gru),
        ("lstm_cell", false, case_lstm),
        ("temporal_block", false, case_block),
        ("compute_loss", false, case_compute_loss),
        ("loss_match", false, case_loss_match),
        ("noise_net_gru", false, |s| case_noise_net(s, CoreKind::Gru)),
        ("noise_net_lstm", false, |s| case_noise_net(s, CoreKind::Lstm)),
        ("noise_net_tcn", false, |s| case_noise_net(s, CoreKind::Tcn)),
        ("mtn", false, case_mtn),
        ("dvse_forward", false, case_composite),
    ]
}

/// Largest share of probed coordinates allowed to land on a kink.
pub const MAX_KINK_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct OpSummary {
    pub worst: f64,
    pub checked: usize,
    pub kinks: usize,
}

impl OpSummary {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst <= tol && self.checked > 0 && (self.kinks as f64) <= MAX_KINK_FRACTION * (self.checked + self.kinks) as f64
    }
}

/// Worst relative error of one op over all seeded cases.
pub fn gradcheck_op(case: Case) -> Result<OpSummary> {
    let mut sum = OpSummary {
        worst: 0.0,
        checked: 0,
        kinks: 0,
    };
    for seed in 0..GRADCHECK_CASES {
        let r = case(seed)?;
        sum.worst = sum.worst.max(r.max_rel_error);
        sum.checked += r.checked;
        sum.kinks += r.kinks;
    }
    Ok(sum)
}

fn dims(seed: u64) -> (ChaCha8Rng, usize, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, c) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
    (rng, a, b, c)
}

fn unary(seed: u64, relu_safe: bool, op: fn(&mut Graph<'_>, Var) -> Var) -> Result<GradCheckReport> {
    let (mut rng, n, t, d) = dims(seed);
    let x = if relu_safe { off_zero(&mut rng, &[n, t, d]) } else { uniform(&mut rng, &[n, t, d], -2.0, 2.0) };
    let s = store(vec![("x", x)]);
    check_params(
        &s,
        |g| {
            let x = g.param("x")?;
            let y = op(g, x);
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn binary(seed: u64, op: fn(&mut Graph<'_>, Var, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let (mut rng, n, t, d) = dims(seed);
    let s = store(vec![
        ("a", uniform(&mut rng, &[n, t, d], -1.0, 1.0)),
        ("b", uniform(&mut rng, &[n, t, d], -1.0, 1.0)),
    ]);
    check_params(
        &s,
        |g| {
            let a = g.param("a")?;
            let b = g.param("b")?;
            let y = op(g, a, b)?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_matmul(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, m, k, n) = dims(seed);
    let s = store(vec![("a", uniform(&mut rng, &[m, k], -1.0, 1.0)), ("b", uniform(&mut rng, &[k, n], -1.0, 1.0))]);
    check_params(
        &s,
        |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            let y = g.matmul(a, b)?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_add_bias(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, n, t, d) = dims(seed);
    let s = store(vec![("x", uniform(&mut rng, &[n, t, d], -1.0, 1.0)), ("b", uniform(&mut rng, &[d], -1.0, 1.0))]);
    check_params(
        &s,
        |g| {
            let (x, b) = (g.param("x")?, g.param("b")?);
            let y = g.add_bias(x, b)?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_add(seed: u64) -> Result<GradCheckReport> {
    binary(seed, |g, a, b| g.add(a, b))
}

fn case_sub(seed: u64) -> Result<GradCheckReport> {
    binary(seed, |g, a, b| g.sub(a, b))
}

fn case_mul(seed: u64) -> Result<GradCheckReport> {
    binary(seed, |g, a, b| g.mul(a, b))
}

fn case_scale(seed: u64) -> Result<GradCheckReport> {
    unary(seed, false, |g, x| g.scale(x, -1.7))
}

fn case_affine(seed: u64) -> Result<GradCheckReport> {
    unary(seed, false, |g, x| g.affine(x, 0.3, 2.0))
}

fn case_one_minus(seed: u64) -> Result<GradCheckReport> {
    unary(seed, false, |g, x| g.one_minus(x))
}

fn case_relu(seed: u64) -> Result<GradCheckReport> {
    unary(seed, true, |g, x| g.relu(x))
}

fn case_tanh(seed: u64) -> Result<GradCheckReport> {
    unary(seed, false, |g, x| g.tanh(x))
}

fn case_sigmoid(seed: u64) -> Result<GradCheckReport> {
    unary(seed, false, |g, x| g.sigmoid(x))
}

fn case_cumsum(seed: u64) -> Result<GradCheckReport> {
    unary(seed, false, |g, x| g.cumsum_last(x))
}

fn case_sum(seed: u64) -> Result<GradCheckReport> {
    unary(seed, false, |g, x| {
        let s = g.sum(x);
        g.scale(s, 0.7)
    })
}

fn case_mean(seed: u64) -> Result<GradCheckReport> {
    unary(seed, false, |g, x| g.mean(x))
}

fn case_concat(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, n, t, d) = dims(seed);
    let d2 = rng.random_range(1..=3);
    let s = store(vec![("a", uniform(&mut rng, &[n, t, d], -1.0, 1.0)), ("b", uniform(&mut rng, &[n, t, d2], -1.0, 1.0))]);
    check_params(
        &s,
        |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            let y = g.concat(&[a, b, a])?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_slice_last(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, n, t, d) = dims(seed);
    let d = d + 1;
    let start = rng.random_range(0..d);
    let len = rng.random_range(1..=d - start);
    let s = store(vec![("x", uniform(&mut rng, &[n, t, d], -1.0, 1.0))]);
    check_params(
        &s,
        |g| {
            let x = g.param("x")?;
            let y = g.slice_last(x, start, len)?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_reshape(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, n, t, d) = dims(seed);
    let s = store(vec![("x", uniform(&mut rng, &[n, t, d], -1.0, 1.0))]);
    check_params(
        &s,
        |g| {
            let x = g.param("x")?;
            let y = g.reshape(x, &[n * t, d])?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_select_step(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, n, t, d) = dims(seed);
    let step = rng.random_range(0..t);
    let s = store(vec![("x", uniform(&mut rng, &[n, t, d], -1.0, 1.0))]);
    check_params(
        &s,
        |g| {
            let x = g.param("x")?;
            let y = g.select_step(x, step)?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_stack_steps(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, n, t, d) = dims(seed);
    let s = store(vec![("a", uniform(&mut rng, &[n, d], -1.0, 1.0)), ("b", uniform(&mut rng, &[n, d], -1.0, 1.0))]);
    check_params(
        &s,
        |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            let steps: Vec<Var> = (0..t + 1).map(|k| if k % 2 == 0 { a } else { b }).collect();
            let y = g.stack_steps(&steps)?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_fc(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, n, din, dout) = dims(seed);
    let s = store(vec![
        ("x", uniform(&mut rng, &[n, din], -1.0, 1.0)),
        ("w", uniform(&mut rng, &[din, dout], -1.0, 1.0)),
        ("b", uniform(&mut rng, &[dout], -1.0, 1.0)),
    ]);
    check_params(
        &s,
        |g| {
            let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
            let y = dvse_core::nncore::fc(g, x, w, b)?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_conv(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, n, cin, cout) = dims(seed);
    let t = rng.random_range(2..=8);
    let k = rng.random_range(1..=3);
    let dil = rng.random_range(1..=3);
    let s = store(vec![
        ("x", uniform(&mut rng, &[n, t, cin], -1.0, 1.0)),
        ("w", uniform(&mut rng, &[k, cin, cout], -1.0, 1.0)),
        ("b", uniform(&mut rng, &[cout], -1.0, 1.0)),
    ]);
    check_params(
        &s,
        |g| {
            let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
            let y = g.conv1d_causal(x, w, b, dil)?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_smooth_l1(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, n, t, _) = dims(seed);
    let x = uniform(&mut rng, &[n, t], -2.0, 2.0);
    let mut y = uniform(&mut rng, &[n, t], -2.0, 2.0);
    // keep residuals clear of the branch point at |r| = 1
    for (yv, xv) in y.data.iter_mut().zip(&x.data) {
        if ((xv - *yv).abs() - 1.0).abs() < 1e-2 {
            *yv += 0.05;
        }
    }
    let s = store(vec![("x", x), ("y", y)]);
    check_params(
        &s,
        |g| {
            let (x, y) = (g.param("x")?, g.param("y")?);
            g.smooth_l1(x, y)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_projection(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, n, t, _) = dims(seed);
    let m = n * t;
    let s = store(vec![
        ("theta", uniform(&mut rng, &[m, 3], -3.1, 3.1)),
        ("v", uniform(&mut rng, &[m, 3], -10.0, 10.0)),
    ]);
    check_params(
        &s,
        |g| {
            let (th, v) = (g.param("theta")?, g.param("v")?);
            let y = g.forward_projection(th, v)?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_gru(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, n, din, dh) = dims(seed);
    let mut s = ParameterStore::new();
    let layer = GruLayer::new(&mut s, "gru", din, dh, &mut rng)?;
    randomize(&mut s, &mut rng, 0.8);
    s.insert("x", uniform(&mut rng, &[n, din], -1.0, 1.0))?;
    s.insert("h", uniform(&mut rng, &[n, dh], -1.0, 1.0))?;
    check_params(
        &s,
        |g| {
            let p = layer.bind(g)?;
            let (x, h) = (g.param("x")?, g.param("h")?);
            let y = gru_cell(g, x, h, &p)?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_lstm(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, n, din, dh) = dims(seed);
    let mut s = ParameterStore::new();
    let layer = LstmLayer::new(&mut s, "lstm", din, dh, &mut rng)?;
    randomize(&mut s, &mut rng, 0.8);
    s.insert("x", uniform(&mut rng, &[n, din], -1.0, 1.0))?;
    s.insert("h", uniform(&mut rng, &[n, dh], -1.0, 1.0))?;
    s.insert("c", uniform(&mut rng, &[n, dh], -1.0, 1.0))?;
    check_params(
        &s,
        |g| {
            let p = layer.bind(g)?;
            let (x, h, c) = (g.param("x")?, g.param("h")?, g.param("c")?);
            let (h2, c2) = lstm_cell(g, x, h, c, &p)?;
            let both = g.concat(&[h2, c2])?;
            reduce(g, both, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_block(seed: u64) -> Result<GradCheckReport> {
    let (mut rng, n, cin, cout) = dims(seed);
    let t = rng.random_range(3..=8);
    let index = rng.random_range(1..=2);
    let layers = rng.random_range(1..=3);
    let mut s = ParameterStore::new();
    let block = TemporalBlock::new(&mut s, "blk", index, layers, 2, cin, cout, &mut rng)?;
    randomize(&mut s, &mut rng, 0.8);
    s.insert("x", uniform(&mut rng, &[n, t, cin], -1.0, 1.0))?;
    check_params(
        &s,
        |g| {
            let x = g.param("x")?;
            let y = block.forward(g, x)?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn loss_inputs(seed: u64) -> (ParameterStore, f64) {
    let (mut rng, n, t, _) = dims(seed);
    let t = t + 1;
    let s = store(vec![
        ("x", uniform(&mut rng, &[n, t], -1.5, 1.5)),
        ("y", uniform(&mut rng, &[n, t], -1.5, 1.5)),
    ]);
    (s, rng.random_range(0.0..=1.0))
}

fn case_compute_loss(seed: u64) -> Result<GradCheckReport> {
    let (s, lambda) = loss_inputs(seed);
    check_params(
        &s,
        |g| {
            let (x, y) = (g.param("x")?, g.param("y")?);
            compute_loss(g, x, y, lambda)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn case_loss_match(seed: u64) -> Result<GradCheckReport> {
    let (s, lambda) = loss_inputs(seed);
    check_params(
        &s,
        |g| {
            let (x, y) = (g.param("x")?, g.param("y")?);
            Ok(loss_match(g, x, y, lambda)?.0)
        },
        GRADCHECK_EPS,
        usize::MAX,
        seed,
    )
}

fn net_store(cfg: &ModelConfig, seed: u64) -> (DvseNets, ParameterStore, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nets, mut s) = DvseNets::init(cfg, &mut rng).unwrap();
    randomize(&mut s, &mut rng, 0.3);
    (nets, s, rng)
}

fn case_noise_net(seed: u64, core: CoreKind) -> Result<GradCheckReport> {
    let mut cfg = ModelConfig::default();
    cfg.noise_net.core = core;
    cfg.use_mtn = false;
    let (nets, mut s, mut rng) = net_store(&cfg, seed);
    s.insert("features", uniform(&mut rng, &[2, 3, 36], -1.5, 1.5))?;
    let v_ref = [rng.random_range(0.0..30.0), rng.random_range(0.0..30.0)];
    let net = nets.noise.unwrap();
    check_params(
        &s,
        |g| {
            let f = g.param("features")?;
            let y = net.forward(g, f, &v_ref)?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        NET_PROBES,
        seed,
    )
}

fn case_mtn(seed: u64) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        use_noise_net: false,
        ..ModelConfig::default()
    };
    let (nets, s, mut rng) = net_store(&cfg, seed);
    let preint = uniform(&mut rng, &[2, 10, 3], -12.0, 12.0);
    let net = nets.mtn.unwrap();
    check_params(
        &s,
        |g| {
            let y = net.forward(g, &preint)?;
            reduce(g, y, seed)
        },
        GRADCHECK_EPS,
        NET_PROBES,
        seed,
    )
}

/// One window through both networks and the combined loss.
fn case_composite(seed: u64) -> Result<GradCheckReport> {
    let cfg = ModelConfig::default();
    let (nets, s, mut rng) = net_store(&cfg, seed);
    let features = uniform(&mut rng, &[1, 10, 36], -1.5, 1.5);
    let preint = uniform(&mut rng, &[1, 10, 3], -12.0, 12.0);
    let target = uniform(&mut rng, &[1, 10], -1.0, 1.0);
    let v_ref = [rng.random_range(0.0..30.0)];
    check_params(
        &s,
        |g| {
            let out = dvse_forward(g, &nets, &features, &preint, &v_ref, None)?;
            let y = g.constant(target.clone());
            compute_loss(g, out.dv_hat, y, 0.7)
        },
        GRADCHECK_EPS,
        NET_PROBES,
        seed,
    )
}

pub fn small_model() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.noise_net.embed_dim = 8;
    cfg.noise_net.core_hidden = vec![8, 12];
    cfg.noise_net.regression_hidden = 8;
    cfg.mtn.channels = 8;
    cfg.mtn.head_hidden = 8;
    cfg
}

/// Model with every weight drawn uniformly from `±scale`, heads included.
pub fn randomized_model(cfg: ModelConfig, seed: u64, scale: f64) -> DvseModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DvseModel::init(cfg, Normalizer::identity(FRAME_FEATURES), &mut rng).unwrap();
    randomize(&mut m.params, &mut rng, scale);
    m
}

pub fn corpus_config(n_traj: usize, duration_s: usize, seed: u64, noisy: bool, delay_fraction: f64) -> DatasetConfig {
    DatasetConfig {
        n_traj,
        duration_s,
        seed,
        pose_policy: PosePolicy::Random { ranges: AngleRanges::FULL },
        noise_policy: if noisy { NoisePolicy::default_noise() } else { NoisePolicy::Zero },
        delay_fraction,
        gnss_sigma: if noisy { 0.1 } else { 0.0 },
        maneuver: ManeuverConfig::default(),
        pose_change: false,
    }
}

/// Largest `|v̂ - v|` over the first 60 s of clean trajectories when the
/// true pose replaces the MTN and the noise head is zero.
pub fn oracle_max_error(n_traj: usize, seed: u64) -> f64 {
    let recs = generate_records(&corpus_config(n_traj, 60, seed, false, 0.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DvseModel::init(ModelConfig::default(), Normalizer::identity(FRAME_FEATURES), &mut rng).unwrap();
    let mut worst = 0.0f64;
    for rec in &recs {
        let v = infer_with_pose(&model, &rec.imu, rec.truth_speed[0], Some(&rec.truth_pose)).unwrap();
        assert_eq!(v.len(), 60);
        for (k, est) in v.iter().enumerate() {
            worst = worst.max((est - rec.truth_speed[k + 1]).abs());
        }
    }
    worst
}

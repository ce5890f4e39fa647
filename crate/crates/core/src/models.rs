//! The noise-compensation network, the motion-transformation network, and
//! their composition into per-second forward-velocity increments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::featkit::{per_second, Normalizer, FRAME_FEATURES, SENSOR_FEATURES};
use crate::geom::{EulerAngles, GRAVITY};
use crate::nncore::{receptive_field, Graph, GruLayer, Linear, LstmLayer, ParameterStore, Tcn, Tensor, Var};
use crate::simkit::ImuStream;
use crate::{Error, Result};

/// Reference speed is divided by this before entering the noise net, m/s.
pub const V_REF_SCALE: f64 = 30.0;
/// Pre-integrations and gravity are divided by this before entering the MTN.
pub const PREINT_SCALE: f64 = GRAVITY;
/// Seconds per model window.
pub const WINDOW_S: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreKind {
    Gru,
    Lstm,
    Tcn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseNetConfig {
    /// Embedding width per sensor.
    pub embed_dim: usize,
    pub core: CoreKind,
    /// Widths of the two stacked core layers.
    pub core_hidden: Vec<usize>,
    pub regression_hidden: usize,
}

impl Default for NoiseNetConfig {
    fn default() -> Self {
        NoiseNetConfig {
            embed_dim: 32,
            core: CoreKind::Gru,
            core_hidden: vec![32, 64],
            regression_hidden: 32,
        }
    }
}

impl NoiseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.core_hidden.len() != 2 {
            return Err(Error::invalid(format!(
                "noise_net.core_hidden must list 2 layer widths, got {}",
                self.core_hidden.len()
            )));
        }
        if self.embed_dim == 0 || self.regression_hidden == 0 || self.core_hidden.contains(&0) {
            return Err(Error::invalid("noise_net layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtnConfig {
    pub blocks: usize,
    pub layers_per_block: usize,
    pub kernel: usize,
    pub channels: usize,
    pub head_hidden: usize,
}

impl Default for MtnConfig {
    fn default() -> Self {
        MtnConfig {
            blocks: 2,
            layers_per_block: 3,
            kernel: 2,
            channels: 32,
            head_hidden: 32,
        }
    }
}

impl MtnConfig {
    pub fn receptive_field(&self) -> usize {
        receptive_field(self.blocks, self.layers_per_block, self.kernel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.layers_per_block == 0 || self.kernel == 0 || self.channels == 0 || self.head_hidden == 0 {
            return Err(Error::invalid("mtn sizes must be positive"));
        }
        if self.receptive_field() < WINDOW_S {
            return Err(Error::invalid(format!(
                "mtn receptive field {} is shorter than the {WINDOW_S} s window",
                self.receptive_field()
            )));
        }
        Ok(())
    }
}

/// Architecture plus ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub noise_net: NoiseNetConfig,
    pub mtn: MtnConfig,
    /// When false the noise term is identically zero.
    pub use_noise_net: bool,
    /// When false the rotation is the identity.
    pub use_mtn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            noise_net: NoiseNetConfig::default(),
            mtn: MtnConfig::default(),
            use_noise_net: true,
            use_mtn: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise_net.validate()?;
        self.mtn.validate()
    }
}

#[derive(Debug, Clone)]
enum Core {
    Gru(GruLayer, GruLayer),
    Lstm(LstmLayer, LstmLayer),
    Tcn(Tcn),
}

/// Layer layout of the noise-compensation network.
#[derive(Debug, Clone)]
pub struct NoiseNet {
    acc_embed: Linear,
    gyro_embed: Linear,
    core: Core,
    head1: Linear,
    head2: Linear,
}

// Temporal-core variant of the noise net: two blocks with these many
// convolutions each.
const NOISE_TCN_LAYERS: usize = 2;
const NOISE_TCN_KERNEL: usize = 2;

impl NoiseNet {
    fn layout(cfg: &NoiseNetConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let (h0, h1) = (cfg.core_hidden[0], cfg.core_hidden[1]);
        let core = match cfg.core {
            CoreKind::Gru => Core::Gru(GruLayer::describe("noise.core0", 2 * e, h0), GruLayer::describe("noise.core1", h0, h1)),
            CoreKind::Lstm => Core::Lstm(LstmLayer::describe("noise.core0", 2 * e, h0), LstmLayer::describe("noise.core1", h0, h1)),
            CoreKind::Tcn => Core::Tcn(Tcn::describe("noise.core", 2 * e, &cfg.core_hidden, NOISE_TCN_LAYERS, NOISE_TCN_KERNEL)?),
        };
        Ok(NoiseNet {
            acc_embed: Linear::describe("noise.acc_embed", SENSOR_FEATURES, e),
            gyro_embed: Linear::describe("noise.gyro_embed", SENSOR_FEATURES, e),
            core,
            head1: Linear::describe("noise.head1", h1 + 1, cfg.regression_hidden),
            head2: Linear::describe("noise.head2", cfg.regression_hidden, 1),
        })
    }

    fn init<R: Rng + ?Sized>(cfg: &NoiseNetConfig, store: &mut ParameterStore, rng: &mut R) -> Result<Self> {
        let net = Self::layout(cfg)?;
        let e = cfg.embed_dim;
        let (h0, h1) = (cfg.core_hidden[0], cfg.core_hidden[1]);
        Linear::new(store, "noise.acc_embed", SENSOR_FEATURES, e, rng)?;
        Linear::new(store, "noise.gyro_embed", SENSOR_FEATURES, e, rng)?;
        match cfg.core {
            CoreKind::Gru => {
                GruLayer::new(store, "noise.core0", 2 * e, h0, rng)?;
                GruLayer::new(store, "noise.core1", h0, h1, rng)?;
            }
            CoreKind::Lstm => {
                LstmLayer::new(store, "noise.core0", 2 * e, h0, rng)?;
                LstmLayer::new(store, "noise.core1", h0, h1, rng)?;
            }
            CoreKind::Tcn => {
                Tcn::new(store, "noise.core", 2 * e, &cfg.core_hidden, NOISE_TCN_LAYERS, NOISE_TCN_KERNEL, rng)?;
            }
        }
        Linear::new(store, "noise.head1", h1 + 1, cfg.regression_hidden, rng)?;
        Linear::zeros(store, "noise.head2", cfg.regression_hidden, 1)?;
        Ok(net)
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = self.acc_embed.param_shapes();
        v.extend(self.gyro_embed.param_shapes());
        match &self.core {
            Core::Gru(a, b) => {
                v.extend(a.param_shapes());
                v.extend(b.param_shapes());
            }
            Core::Lstm(a, b) => {
                v.extend(a.param_shapes());
                v.extend(b.param_shapes());
            }
            Core::Tcn(t) => v.extend(t.param_shapes()),
        }
        v.extend(self.head1.param_shapes());
        v.extend(self.head2.param_shapes());
        v
    }

    /// `features: [n,T,36]` (normalized), `v_ref` in m/s → disturbance `[n,T]`.
    pub fn forward(&self, g: &mut Graph<'_>, features: Var, v_ref: &[f64]) -> Result<Var> {
        let s = g.shape(features).to_vec();
        if s.len() != 3 || s[2] != FRAME_FEATURES || s[0] != v_ref.len() {
            return Err(Error::shape("noise_net", &s, &[v_ref.len(), 0, FRAME_FEATURES]));
        }
        let (n, steps) = (s[0], s[1]);
        let acc = g.slice_last(features, 0, SENSOR_FEATURES)?;
        let gyro = g.slice_last(features, SENSOR_FEATURES, SENSOR_FEATURES)?;
        let acc = self.acc_embed.forward(g, acc)?;
        let acc = g.relu(acc);
        let gyro = self.gyro_embed.forward(g, gyro)?;
        let gyro = g.relu(gyro);
        let emb = g.concat(&[acc, gyro])?;
        let core = match &self.core {
            Core::Gru(a, b) => {
                let h = a.forward_seq(g, emb)?;
                b.forward_seq(g, h)?
            }
            Core::Lstm(a, b) => {
                let h = a.forward_seq(g, emb)?;
                b.forward_seq(g, h)?
            }
            Core::Tcn(t) => t.forward(g, emb)?,
        };
        let vr: Vec<f64> = v_ref.iter().flat_map(|v| std::iter::repeat_n(v / V_REF_SCALE, steps)).collect();
        let vr = g.constant(Tensor::new(vec![n, steps, 1], vr)?);
        let h = g.concat(&[core, vr])?;
        let h = self.head1.forward(g, h)?;
        let h = g.relu(h);
        let out = self.head2.forward(g, h)?;
        g.reshape(out, &[n, steps])
    }
}

/// Layer layout of the motion-transformation network.
#[derive(Debug, Clone)]
pub struct Mtn {
    tcn: Tcn,
    head1: Linear,
    head2: Linear,
}

const MTN_INPUT: usize = 6;

impl Mtn {
    fn layout(cfg: &MtnConfig) -> Result<Self> {
        cfg.validate()?;
        let channels = vec![cfg.channels; cfg.blocks];
        Ok(Mtn {
            tcn: Tcn::describe("mtn.tcn", MTN_INPUT, &channels, cfg.layers_per_block, cfg.kernel)?,
            head1: Linear::describe("mtn.head1", cfg.channels, cfg.head_hidden),
            head2: Linear::describe("mtn.head2", cfg.head_hidden, 3),
        })
    }

    fn init<R: Rng + ?Sized>(cfg: &MtnConfig, store: &mut ParameterStore, rng: &mut R) -> Result<Self> {
        let net = Self::layout(cfg)?;
        let channels = vec![cfg.channels; cfg.blocks];
        Tcn::new(store, "mtn.tcn", MTN_INPUT, &channels, cfg.layers_per_block, cfg.kernel, rng)?;
        Linear::new(store, "mtn.head1", cfg.channels, cfg.head_hidden, rng)?;
        Linear::zeros(store, "mtn.head2", cfg.head_hidden, 3)?;
        Ok(net)
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = self.tcn.param_shapes();
        v.extend(self.head1.param_shapes());
        v.extend(self.head2.param_shapes());
        v
    }

    /// Pre-integrations `[n,T,3]` in m/s → Euler angles `[n,T,3]`, each in `(-π, π)`.
    pub fn forward(&self, g: &mut Graph<'_>, preint: &Tensor) -> Result<Var> {
        let x = g.constant(mtn_input(preint)?);
        let h = self.tcn.forward(g, x)?;
        let h = self.head1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.head2.forward(g, h)?;
        let h = g.tanh(h);
        Ok(g.scale(h, std::f64::consts::PI))
    }
}

/// `[I / g, g_ref / g]` per step.
fn mtn_input(preint: &Tensor) -> Result<Tensor> {
    let s = &preint.shape;
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("mtn", s, &[0, 0, 3]));
    }
    let mut data = Vec::with_capacity(preint.numel() * 2);
    for row in preint.data.chunks_exact(3) {
        data.extend(row.iter().map(|v| v / PREINT_SCALE));
        data.extend_from_slice(&[0.0, 0.0, GRAVITY / PREINT_SCALE]);
    }
    Tensor::new(vec![s[0], s[1], MTN_INPUT], data)
}

/// Both networks; a disabled one owns no parameters.
#[derive(Debug, Clone)]
pub struct DvseNets {
    pub noise: Option<NoiseNet>,
    pub mtn: Option<Mtn>,
}

impl DvseNets {
    /// Layout only, for binding an existing parameter store.
    pub fn layout(cfg: &ModelConfig) -> Result<Self> {
        Ok(DvseNets {
            noise: if cfg.use_noise_net { Some(NoiseNet::layout(&cfg.noise_net)?) } else { None },
            mtn: if cfg.use_mtn { Some(Mtn::layout(&cfg.mtn)?) } else { None },
        })
    }

    /// Fresh parameters: Glorot-uniform weights, zero biases, zero output heads.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(Self, ParameterStore)> {
        let mut store = ParameterStore::new();
        let noise = if cfg.use_noise_net { Some(NoiseNet::init(&cfg.noise_net, &mut store, rng)?) } else { None };
        let mtn = if cfg.use_mtn { Some(Mtn::init(&cfg.mtn, &mut store, rng)?) } else { None };
        Ok((DvseNets { noise, mtn }, store))
    }

    /// Expected parameter names and shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        if let Some(n) = &self.noise {
            v.extend(n.param_shapes());
        }
        if let Some(m) = &self.mtn {
            v.extend(m.param_shapes());
        }
        v
    }

    /// Checks that `store` holds exactly the expected tensors.
    pub fn check_store(&self, store: &ParameterStore) -> Result<()> {
        let expected = self.param_shapes();
        for (name, shape) in &expected {
            let t = store
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if &t.shape != shape || t.numel() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
        }
        if let Some(extra) = store.names().find(|n| !expected.iter().any(|(e, _)| e == *n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub trajectory: usize,
    pub start_s: f64,
}

/// A batch of equal-length windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `[n,T,36]`, normalized.
    pub features: Tensor,
    /// `[n,T,3]`, m/s.
    pub preint: Tensor,
    /// `[n]`, m/s.
    pub v_ref: Vec<f64>,
    /// `[n,T]`, m/s.
    pub dv_target: Tensor,
    pub meta: Vec<WindowMeta>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.v_ref.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v_ref.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.preint.shape[1]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let fs = &self.features.shape;
        if fs.len() != 3 || fs[0] != n || fs[2] != FRAME_FEATURES {
            return Err(Error::shape("window batch features", fs, &[n, 0, FRAME_FEATURES]));
        }
        let t = fs[1];
        if self.preint.shape != [n, t, 3] {
            return Err(Error::shape("window batch preint", &self.preint.shape, &[n, t, 3]));
        }
        if self.dv_target.shape != [n, t] {
            return Err(Error::shape("window batch targets", &self.dv_target.shape, &[n, t]));
        }
        let finite = |d: &[f64]| d.iter().all(|v| v.is_finite());
        if !(finite(&self.features.data) && finite(&self.preint.data) && finite(&self.dv_target.data) && finite(&self.v_ref)) {
            return Err(Error::invalid("window batch contains non-finite values"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DvseOutput {
    /// `[n,T]` velocity increments.
    pub dv_hat: Var,
    /// `[n,T]` speeds `v_ref + Σ Δv`.
    pub v_hat: Var,
    /// `[n,T,3]` when the MTN or an injected pose provides it.
    pub theta: Option<Var>,
    /// `[n,T]` when the noise net is enabled.
    pub noise: Option<Var>,
}

/// Composite forward pass: `Δv_t = (R(θ_t) I_t)·[0,1,0] + N_t`.
///
/// `theta_override` (`[n,T,3]`) replaces the MTN output, e.g. with a known pose.
pub fn dvse_forward(
    g: &mut Graph<'_>,
    nets: &DvseNets,
    features: &Tensor,
    preint: &Tensor,
    v_ref: &[f64],
    theta_override: Option<&Tensor>,
) -> Result<DvseOutput> {
    let ps = &preint.shape;
    if ps.len() != 3 || ps[2] != 3 || ps[0] != v_ref.len() {
        return Err(Error::shape("dvse_forward", ps, &[v_ref.len(), 0, 3]));
    }
    let (n, steps) = (ps[0], ps[1]);
    let theta = match (theta_override, &nets.mtn) {
        (Some(t), _) => {
            if t.shape != *ps {
                return Err(Error::shape("dvse_forward theta", &t.shape, ps));
            }
            Some(g.constant(t.clone()))
        }
        (None, Some(m)) => Some(m.forward(g, preint)?),
        (None, None) => None,
    };
    let i_flat = g.constant(Tensor::new(vec![n * steps, 3], preint.data.clone())?);
    let proj = match theta {
        Some(th) => {
            let th = g.reshape(th, &[n * steps, 3])?;
            g.forward_projection(th, i_flat)?
        }
        None => g.slice_last(i_flat, 1, 1)?,
    };
    let mut dv = g.reshape(proj, &[n, steps])?;
    let noise = match &nets.noise {
        Some(net) => {
            let f = g.constant(features.clone());
            let nz = net.forward(g, f, v_ref)?;
            dv = g.add(dv, nz)?;
            Some(nz)
        }
        None => None,
    };
    let cum = g.cumsum_last(dv);
    let base: Vec<f64> = v_ref.iter().flat_map(|v| std::iter::repeat_n(*v, steps)).collect();
    let base = g.constant(Tensor::new(vec![n, steps], base)?);
    let v_hat = g.add(cum, base)?;
    Ok(DvseOutput {
        dv_hat: dv,
        v_hat,
        theta,
        noise,
    })
}

/// A model ready for inference: configuration, layout, weights and feature
/// statistics.
#[derive(Debug, Clone)]
pub struct DvseModel {
    pub config: ModelConfig,
    pub nets: DvseNets,
    pub params: ParameterStore,
    pub normalizer: Normalizer,
}

impl DvseModel {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, normalizer: Normalizer, rng: &mut R) -> Result<Self> {
        let (_, params) = DvseNets::init(&config, rng)?;
        Self::from_parts(config, params, normalizer)
    }

    /// Assembles a model from stored weights, validating every tensor.
    pub fn from_parts(config: ModelConfig, params: ParameterStore, normalizer: Normalizer) -> Result<Self> {
        config.validate()?;
        let nets = DvseNets::layout(&config)?;
        nets.check_store(&params)?;
        if normalizer.dims() != FRAME_FEATURES {
            return Err(Error::Checkpoint(format!(
                "normalizer has {} dims, expected {FRAME_FEATURES}",
                normalizer.dims()
            )));
        }
        Ok(DvseModel {
            config,
            nets,
            params,
            normalizer,
        })
    }

    /// Per-second speeds for a single window of whole seconds, starting from `v_ref`.
    pub fn predict_window(&self, imu: &ImuStream, v_ref: f64, theta: Option<&Tensor>) -> Result<Vec<f64>> {
        let (frames, preints) = per_second(imu)?;
        let steps = frames.len();
        if steps == 0 {
            return Err(Error::invalid("window holds no whole second of IMU data"));
        }
        let mut feats = Vec::with_capacity(steps * FRAME_FEATURES);
        for f in &frames {
            feats.extend(self.normalizer.apply(f));
        }
        let features = Tensor::new(vec![1, steps, FRAME_FEATURES], feats)?;
        let preint = Tensor::new(
            vec![1, steps, 3],
            preints.iter().flat_map(|p| p.i.to_array()).collect(),
        )?;
        let mut g = Graph::inference(&self.params);
        let out = dvse_forward(&mut g, &self.nets, &features, &preint, &[v_ref], theta)?;
        Ok(g.value(out.v_hat).data.clone())
    }
}

/// Per-second speed over a stream: 10 s windows with 10 s stride, each
/// seeded with the previous window's last estimate; a trailing partial
/// window runs with fewer steps. `v[k]` estimates the speed at second `k+1`.
pub fn infer_autoregressive(model: &DvseModel, imu: &ImuStream, v0: f64) -> Result<Vec<f64>> {
    infer_with_pose(model, imu, v0, None)
}

/// As [`infer_autoregressive`], optionally with per-second Euler angles
/// (one per whole second) replacing the MTN output.
pub fn infer_with_pose(model: &DvseModel, imu: &ImuStream, v0: f64, pose: Option<&[EulerAngles]>) -> Result<Vec<f64>> {
    if !(v0.is_finite() && v0 >= 0.0) {
        return Err(Error::invalid(format!("v0 must be a finite speed >= 0, got {v0}")));
    }
    let total = imu.seconds();
    if total < WINDOW_S {
        return Err(Error::invalid(format!(
            "IMU stream covers {total} s, inference needs at least {WINDOW_S} s"
        )));
    }
    if let Some(p) = pose {
        if p.len() < total {
            return Err(Error::invalid(format!("pose has {} seconds, stream has {total}", p.len())));
        }
    }
    let mut out = Vec::with_capacity(total);
    let mut v_ref = v0;
    let mut start = 0;
    while start < total {
        let len = WINDOW_S.min(total - start);
        let window = imu.slice_seconds(start, len);
        let theta = pose
            .map(|p| Tensor::new(vec![1, len, 3], p[start..start + len].iter().flat_map(|v| v.to_array()).collect()))
            .transpose()?;
        let v = model.predict_window(&window, v_ref, theta.as_ref())?;
        out.extend(v.iter().map(|s| s.max(0.0)));
        v_ref = *out.last().unwrap();
        start += len;
    }
    Ok(out)
}

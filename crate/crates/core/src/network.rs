//! The stacked MIM network: one ST-LSTM layer at the bottom, `L - 1` MIM
//! blocks above it, and a 1x1 output projection.
//!
//! State routing per timestamp `t`:
//!
//! * `H` runs diagonally: layer `l` receives `H_t^{l-1}` and `H_{t-1}^{l-1}`.
//!   The previous hidden of the layer below is simply that layer's stored
//!   hidden state before it is overwritten, and is zero at `t = 1`.
//! * `C`, `N` and `S` run horizontally, each layer keeping its own.
//! * `M` zigzags: upward through the layers within a timestamp, then from the
//!   top layer at `t - 1` into the bottom layer at `t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{
    mim_block_forward, param_specs, st_lstm_forward, init_tensor, CellDiagnostics, CellDims, CellKind,
    CellVars, MimBlockInputs,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Linear decay of the probability of feeding ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingSchedule {
    pub start: f32,
    pub end: f32,
    pub decay_steps: u64,
}

impl Default for SamplingSchedule {
    fn default() -> Self {
        SamplingSchedule {
            start: 1.0,
            end: 0.0,
            decay_steps: 50_000,
        }
    }
}

impl SamplingSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("start", self.start), ("end", self.end)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("sampling probability {name}={p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Ground-truth probability at `step`.
    pub fn probability(&self, step: u64) -> f32 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        (self.start as f64 + (self.end as f64 - self.start as f64) * frac) as f32
    }
}

/// Draws `len` independent mask entries, each `true` (feed ground truth)
/// with probability `p`.
pub fn sampling_mask_with_probability<R: Rng + ?Sized>(p: f32, len: usize, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("sampling probability {p} outside [0, 1]")));
    }
    Ok((0..len).map(|_| rng.gen::<f32>() < p).collect())
}

/// Scheduled-sampling mask for training step `step_index`.
pub fn scheduled_sampling_mask<R: Rng + ?Sized>(
    step_index: u64,
    schedule: &SamplingSchedule,
    len: usize,
    rng: &mut R,
) -> Result<Vec<bool>> {
    schedule.validate()?;
    sampling_mask_with_probability(schedule.probability(step_index), len, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Total layers, the bottom one being the ST-LSTM.
    pub layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub frame_channels: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub layer_norm: bool,
    /// Space-to-depth factor applied to frames before the first layer.
    pub patch: usize,
    pub mim_n: bool,
    pub mim_s: bool,
    pub schedule: SamplingSchedule,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            layers: 4,
            channels: 64,
            kernel: 5,
            frame_channels: 1,
            frame_height: 64,
            frame_width: 64,
            input_len: 10,
            horizon: 10,
            layer_norm: true,
            patch: 1,
            mim_n: true,
            mim_s: true,
            schedule: SamplingSchedule::default(),
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad value for `{key}`: `{value}`")))
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.layers < 2 {
            return bad(format!("layers must be at least 2 (got {})", self.layers));
        }
        if self.input_len < 1 || self.horizon < 1 {
            return bad("input_len and horizon must be at least 1".into());
        }
        if self.channels == 0 || self.frame_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd (got {})", self.kernel));
        }
        if self.patch == 0 || !self.frame_height.is_multiple_of(self.patch) || !self.frame_width.is_multiple_of(self.patch) {
            return bad(format!(
                "patch {} must divide the {}x{} frame",
                self.patch, self.frame_height, self.frame_width
            ));
        }
        if self.frame_height == 0 || self.frame_width == 0 {
            return bad("frame extents must be positive".into());
        }
        self.schedule.validate()
    }

    /// Shape of one frame after space-to-depth: `[C * p^2, H / p, W / p]`.
    pub fn internal_frame(&self) -> [usize; 3] {
        [
            self.frame_channels * self.patch * self.patch,
            self.frame_height / self.patch,
            self.frame_width / self.patch,
        ]
    }

    pub fn sequence_len(&self) -> usize {
        self.input_len + self.horizon
    }

    /// Cell kind of 1-based layer `layer`.
    pub fn layer_kind(&self, layer: usize) -> CellKind {
        if layer == 1 {
            CellKind::StLstm
        } else {
            CellKind::Mim {
                mim_n: self.mim_n,
                mim_s: self.mim_s,
            }
        }
    }

    pub fn layer_dims(&self, layer: usize) -> CellDims {
        CellDims {
            input_channels: if layer == 1 {
                self.internal_frame()[0]
            } else {
                self.channels
            },
            hidden: self.channels,
            kernel: self.kernel,
            layer_norm: self.layer_norm,
        }
    }

    /// Closed-form number of scalar parameters. With `C` hidden channels,
    /// `X` input channels after patching, kernel area `A = k^2` and `G = 2`
    /// per gate with layer norm (bias and gain) or `1` without:
    ///
    /// ```text
    /// ST-LSTM   7·C·X·A + 9·C²·A + 2·C² + 7·G·C
    /// MIM       14·C²·A + 2·C² + 6·G·C
    ///   + MIM-N  8·C²·A + 4·G·C
    ///   + MIM-S  9·C²·A + 4·G·C
    /// output    X·C
    /// ```
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let x = self.internal_frame()[0];
        let a = self.kernel * self.kernel;
        let gate = if self.layer_norm { 2 } else { 1 } * c;
        let st = 7 * c * x * a + 9 * c * c * a + 2 * c * c + 7 * gate;
        let mut mim = 14 * c * c * a + 2 * c * c + 6 * gate;
        if self.mim_n {
            mim += 8 * c * c * a + 4 * gate;
        }
        if self.mim_s {
            mim += 9 * c * c * a + 4 * gate;
        }
        st + (self.layers - 1) * mim + x * c
    }

    /// `key=value` pairs, one per field.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("channels", self.channels.to_string()),
            ("kernel", self.kernel.to_string()),
            ("frame_channels", self.frame_channels.to_string()),
            ("frame_height", self.frame_height.to_string()),
            ("frame_width", self.frame_width.to_string()),
            ("input_len", self.input_len.to_string()),
            ("horizon", self.horizon.to_string()),
            ("layer_norm", self.layer_norm.to_string()),
            ("patch", self.patch.to_string()),
            ("mim_n", self.mim_n.to_string()),
            ("mim_s", self.mim_s.to_string()),
            ("ss_start", self.schedule.start.to_string()),
            ("ss_end", self.schedule.end.to_string()),
            ("ss_decay_steps", self.schedule.decay_steps.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field by key. Returns `Ok(false)` if `key` is not a network
    /// key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "layers" => self.layers = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "frame_channels" => self.frame_channels = parse(key, value)?,
            "frame_height" => self.frame_height = parse(key, value)?,
            "frame_width" => self.frame_width = parse(key, value)?,
            "input_len" => self.input_len = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "layer_norm" => self.layer_norm = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "mim_n" => self.mim_n = parse(key, value)?,
            "mim_s" => self.mim_s = parse(key, value)?,
            "ss_start" => self.schedule.start = parse(key, value)?,
            "ss_end" => self.schedule.end = parse(key, value)?,
            "ss_decay_steps" => self.schedule.decay_steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value, got `{line}`")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::invalid(format!("unknown network key `{}`", k.trim())));
            }
        }
        Ok(cfg)
    }

    /// Fails unless `other` describes the same architecture and frame
    /// geometry (seed and sampling schedule may differ).
    pub fn ensure_compatible(&self, other: &NetworkConfig) -> Result<()> {
        let arch = |c: &NetworkConfig| {
            c.entries()
                .into_iter()
                .filter(|(k, _)| !matches!(*k, "seed" | "ss_start" | "ss_end" | "ss_decay_steps"))
                .collect::<Vec<_>>()
        };
        for ((k, a), (_, b)) in arch(self).into_iter().zip(arch(other)) {
            if a != b {
                return Err(Error::ConfigMismatch(format!("{k}: checkpoint has {a}, requested {b}")));
            }
        }
        Ok(())
    }
}

fn layer_key(layer: usize, symbol: &str) -> String {
    format!("l{layer}.{symbol}")
}

pub const OUTPUT_KEY: &str = "out.w";

/// Network configuration plus all of its learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamStore,
}

impl Network {
    /// Seeded random initialization.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for layer in 1..=config.layers {
            for spec in param_specs(config.layer_kind(layer), config.layer_dims(layer)) {
                let t = init_tensor(&spec, &mut rng);
                params.insert(layer_key(layer, &spec.name), t);
            }
        }
        let x = config.internal_frame()[0];
        let bound = (1.0 / config.channels as f32).sqrt();
        params.insert(
            OUTPUT_KEY,
            Tensor::rand_uniform(&[x, config.channels, 1, 1], -bound, bound, &mut rng),
        );
        Ok(Network { config, params })
    }

    /// Every parameter zero.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        let mut net = Network::new(config)?;
        for (_, t) in net.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(net)
    }

    /// Checks that `params` holds exactly the tensors `config` calls for.
    pub fn from_parts(config: NetworkConfig, params: ParamStore) -> Result<Self> {
        let reference = Network::new(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::ConfigMismatch(format!("parameter `{name}` missing")))?;
            if got.shape() != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Network { config, params })
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> BoundNetwork {
        let mut all = Vec::with_capacity(self.params.len());
        let mut layers = Vec::with_capacity(self.config.layers);
        for layer in 1..=self.config.layers {
            let prefix = format!("l{layer}.");
            let vars = self
                .params
                .iter()
                .filter_map(|(name, t)| name.strip_prefix(&prefix).map(|s| (name, s, t)))
                .map(|(name, symbol, t)| {
                    let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                    all.push((name.to_owned(), v));
                    (symbol.to_owned(), v)
                })
                .collect();
            layers.push(CellVars::new(vars, self.config.layer_norm));
        }
        let out = self.params.get(OUTPUT_KEY).expect("output projection exists").clone();
        let output = if trainable { g.param(out) } else { g.constant(out) };
        all.push((OUTPUT_KEY.to_owned(), output));
        BoundNetwork {
            kinds: (1..=self.config.layers).map(|l| self.config.layer_kind(l)).collect(),
            layers,
            output,
            all,
            channels: self.config.channels,
            frame: self.config.internal_frame(),
        }
    }

    /// Binds every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundNetwork {
        self.bind_with(g, true)
    }

    /// Binds parameters as constants (no gradient bookkeeping).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundNetwork {
        self.bind_with(g, false)
    }
}

/// A [`Network`]'s parameters inside one [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub kinds: Vec<CellKind>,
    pub layers: Vec<CellVars>,
    pub output: Var,
    all: Vec<(String, Var)>,
    channels: usize,
    frame: [usize; 3],
}

impl BoundNetwork {
    /// Accumulated gradients keyed like [`Network::params`]; parameters
    /// without a gradient get zeros.
    pub fn gradients(&self, g: &Graph) -> ParamStore {
        self.all
            .iter()
            .map(|(name, v)| {
                let grad = g
                    .grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(*v).shape()));
                (name.clone(), grad)
            })
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.all.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    /// `H_{t-1}^l`; doubles as the diagonal input of layer `l + 1`.
    pub h: Var,
    pub c: Var,
    pub n: Option<Var>,
    pub s: Option<Var>,
}

/// Recurrent carries of every layer plus the zigzag memory register.
#[derive(Clone, Debug)]
pub struct NetworkState {
    pub layers: Vec<LayerState>,
    /// `M_{t-1}^L`, fed to the bottom layer at the next step.
    pub m: Var,
    pub batch: usize,
}

/// All-zero state for a batch of `batch` sequences.
pub fn init_state(g: &mut Graph, config: &NetworkConfig, batch: usize) -> NetworkState {
    let [_, h, w] = config.internal_frame();
    let shape = [batch, config.channels, h, w];
    let mut zero = || g.constant(Tensor::zeros(&shape));
    let layers = (1..=config.layers)
        .map(|l| {
            let (n, s) = match config.layer_kind(l) {
                CellKind::StLstm => (None, None),
                CellKind::Mim { mim_n, mim_s } => (mim_n.then(&mut zero), mim_s.then(&mut zero)),
            };
            LayerState {
                h: zero(),
                c: zero(),
                n,
                s,
            }
        })
        .collect();
    NetworkState {
        layers,
        m: zero(),
        batch,
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub prediction: Var,
    pub state: NetworkState,
    /// Per-layer diagnostics, bottom first, when recording.
    pub diagnostics: Option<Vec<CellDiagnostics>>,
}

/// Advances the network one timestamp on `frame` (`[N, C*p², H/p, W/p]`).
pub fn step(g: &mut Graph, net: &BoundNetwork, frame: Var, state: &NetworkState, record: bool) -> Result<StepOutput> {
    let expected = [state.batch, net.frame[0], net.frame[1], net.frame[2]];
    if g.value(frame).shape() != expected {
        return Err(Error::shape(
            "step",
            format!("frame {:?}, network expects {expected:?}", g.value(frame).shape()),
        ));
    }
    if state.layers.len() != net.layers.len() {
        return Err(Error::ConfigMismatch(format!(
            "state has {} layers, network {}",
            state.layers.len(),
            net.layers.len()
        )));
    }
    let state_shape = [state.batch, net.channels, net.frame[1], net.frame[2]];
    if g.value(state.m).shape() != state_shape {
        return Err(Error::ConfigMismatch(format!(
            "state memory {:?}, network expects {state_shape:?}",
            g.value(state.m).shape()
        )));
    }

    let mut next = Vec::with_capacity(state.layers.len());
    let mut diags = record.then(Vec::new);
    let mut m = state.m;
    let mut below: Option<Var> = None;

    for (idx, (vars, &kind)) in net.layers.iter().zip(&net.kinds).enumerate() {
        let prev = state.layers[idx];
        let (h, c, n, s, diag) = match kind {
            CellKind::StLstm => {
                let out = st_lstm_forward(g, vars, frame, prev.h, prev.c, m, record)?;
                m = out.m;
                (out.h, out.c, None, None, out.diagnostics)
            }
            CellKind::Mim { .. } => {
                let h_below_t = below.expect("a MIM layer always has a layer below");
                let inputs = MimBlockInputs {
                    h_below_t,
                    h_below_tminus1: state.layers[idx - 1].h,
                    h_prev: prev.h,
                    c_prev: prev.c,
                    m_in: m,
                    n_prev: prev.n,
                    s_prev: prev.s,
                };
                let out = mim_block_forward(g, vars, kind, inputs, record)?;
                m = out.m;
                (out.h, out.c, out.n, out.s, out.diagnostics)
            }
        };
        if let (Some(all), Some(d)) = (diags.as_mut(), diag) {
            all.push(d);
        }
        next.push(LayerState { h, c, n, s });
        below = Some(h);
    }

    let top = below.expect("at least two layers");
    let prediction = g.conv2d(top, net.output, None)?;
    Ok(StepOutput {
        prediction,
        state: NetworkState {
            layers: next,
            m,
            batch: state.batch,
        },
        diagnostics: diags,
    })
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// One prediction per consumed input: `predictions[i]` forecasts frame
    /// `i + 1`.
    pub predictions: Vec<Var>,
    pub horizon: usize,
    /// Per-step, per-layer diagnostics when recording.
    pub diagnostics: Vec<Vec<CellDiagnostics>>,
    pub state: NetworkState,
}

impl Rollout {
    /// Predictions of the `horizon` frames after the input phase.
    pub fn horizon_predictions(&self) -> &[Var] {
        &self.predictions[self.predictions.len() - self.horizon..]
    }
}

/// Unrolls the network over `input_len + horizon - 1` steps.
///
/// `frames` holds ground truth for at least the input phase
/// (`input_len` frames), optionally the full `input_len + horizon`.
/// `mask[i]` chooses the input at step `i`: ground truth `frames[i]` when
/// `true`, the previous prediction when `false`. Step 0 always consumes
/// `frames[0]`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    g: &mut Graph,
    net: &BoundNetwork,
    frames: &[Var],
    input_len: usize,
    horizon: usize,
    mask: &[bool],
    state: NetworkState,
    record: bool,
) -> Result<Rollout> {
    if input_len == 0 || horizon == 0 {
        return Err(Error::invalid("input_len and horizon must be positive"));
    }
    let steps = input_len + horizon - 1;
    if frames.len() < input_len {
        return Err(Error::invalid(format!(
            "rollout needs {input_len} input frames, got {}",
            frames.len()
        )));
    }
    if mask.len() != steps {
        return Err(Error::invalid(format!(
            "sampling mask has {} entries, expected {steps}",
            mask.len()
        )));
    }
    let mut state = state;
    let mut predictions = Vec::with_capacity(steps);
    let mut diagnostics = Vec::new();
    for (i, &truth) in mask.iter().enumerate() {
        let input = if i == 0 {
            frames[0]
        } else if truth {
            *frames.get(i).ok_or_else(|| {
                Error::invalid(format!("mask feeds ground truth at step {i} but only {} frames given", frames.len()))
            })?
        } else {
            predictions[i - 1]
        };
        let out = step(g, net, input, &state, record)?;
        predictions.push(out.prediction);
        if let Some(d) = out.diagnostics {
            diagnostics.push(d);
        }
        state = out.state;
    }
    Ok(Rollout {
        predictions,
        horizon,
        diagnostics,
        state,
    })
}

/// The evaluation mask: ground truth through the input phase, predictions
/// afterwards.
pub fn evaluation_mask(input_len: usize, horizon: usize) -> Vec<bool> {
    (0..input_len + horizon - 1).map(|i| i < input_len).collect()
}

/// Splits `[B, T, C, H, W]` into `T` frames of `[B, C*p², H/p, W/p]`.
pub fn sequence_frames(batch: &Tensor, patch: usize) -> Result<Vec<Tensor>> {
    let &[b, t, c, h, w] = batch.shape() else {
        return Err(Error::shape("sequence_frames", format!("expected [B, T, C, H, W], got {:?}", batch.shape())));
    };
    let frame = c * h * w;
    (0..t)
        .map(|ti| {
            let mut data = Vec::with_capacity(b * frame);
            for bi in 0..b {
                data.extend_from_slice(&batch.data()[(bi * t + ti) * frame..][..frame]);
            }
            Tensor::new(vec![b, c, h, w], data)?.space_to_depth(patch)
        })
        .collect()
}

/// Stacks `T` frames of `[B, C*p², H/p, W/p]` back into `[B, T, C, H, W]`.
pub fn stack_frames(frames: &[Tensor], patch: usize) -> Result<Tensor> {
    let unpacked = frames
        .iter()
        .map(|f| f.depth_to_space(patch))
        .collect::<Result<Vec<_>>>()?;
    let first = unpacked
        .first()
        .ok_or_else(|| Error::invalid("no frames to stack"))?;
    let &[b, c, h, w] = first.shape() else { unreachable!("depth_to_space returns rank 4") };
    let t = unpacked.len();
    let frame = c * h * w;
    let mut data = vec![0.0f32; b * t * frame];
    for (ti, f) in unpacked.iter().enumerate() {
        for bi in 0..b {
            data[(bi * t + ti) * frame..][..frame].copy_from_slice(&f.data()[bi * frame..][..frame]);
        }
    }
    Tensor::new(vec![b, t, c, h, w], data)
}

/// Teacher-free forecast of `horizon` frames from the first `input_len`
/// frames of each sequence in `batch` (`[B, T >= input_len, C, H, W]`).
/// Returns `[B, horizon, C, H, W]`.
pub fn predict(network: &Network, batch: &Tensor) -> Result<Tensor> {
    Ok(predict_with_diagnostics(network, batch, false)?.0)
}

/// Like [`predict`], also returning per-step, per-layer diagnostics.
pub fn predict_with_diagnostics(
    network: &Network,
    batch: &Tensor,
    record: bool,
) -> Result<(Tensor, Vec<Vec<CellDiagnostics>>)> {
    let cfg = &network.config;
    check_batch(cfg, batch, cfg.input_len)?;
    let frames = sequence_frames(batch, cfg.patch)?;
    let mut g = Graph::new();
    let net = network.bind_frozen(&mut g);
    let inputs: Vec<Var> = frames[..cfg.input_len].iter().map(|f| g.constant(f.clone())).collect();
    let state = init_state(&mut g, cfg, batch.shape()[0]);
    let mask = evaluation_mask(cfg.input_len, cfg.horizon);
    let out = rollout(&mut g, &net, &inputs, cfg.input_len, cfg.horizon, &mask, state, record)?;
    let preds: Vec<Tensor> = out
        .horizon_predictions()
        .iter()
        .map(|&v| g.value(v).clone())
        .collect();
    Ok((stack_frames(&preds, cfg.patch)?, out.diagnostics))
}

/// Frames `start..start + len` of every sequence in `[B, T, C, H, W]`.
pub fn frame_range(batch: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    match *batch.shape() {
        [_, t, ..] if start + len <= t => batch.narrow(1, start, len),
        ref s => Err(Error::shape(
            "frame_range",
            format!("frames {start}..{} of {s:?}", start + len),
        )),
    }
}

/// The copy-last-frame forecast: frame `input_len - 1` of every sequence
/// repeated `horizon` times.
pub fn copy_last_frame(batch: &Tensor, input_len: usize, horizon: usize) -> Result<Tensor> {
    if input_len == 0 {
        return Err(Error::invalid("copy_last_frame needs at least one input frame"));
    }
    let last = frame_range(batch, input_len - 1, 1)?;
    Tensor::concat(&vec![&last; horizon], 1)
}

fn check_batch(cfg: &NetworkConfig, batch: &Tensor, min_len: usize) -> Result<()> {
    match *batch.shape() {
        [b, t, c, h, w]
            if b > 0 && t >= min_len && c == cfg.frame_channels && h == cfg.frame_height && w == cfg.frame_width =>
        {
            Ok(())
        }
        ref s => Err(Error::shape(
            "batch",
            format!(
                "expected [B, >={min_len}, {}, {}, {}], got {s:?}",
                cfg.frame_channels, cfg.frame_height, cfg.frame_width
            ),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    /// Also supervise the predictions made during the input phase.
    pub supervise_input_phase: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f32,
    pub sampling_probability: f32,
    pub grad_norm: f32,
}

/// One optimizer step on `batch` (`[B, T_in + T_out, C, H, W]`).
///
/// The loss is the squared error summed over each supervised frame,
/// averaged over frames and sequences. Input-phase steps use ground truth;
/// each output-phase input is ground truth with the schedule's probability
/// for `step_index`, otherwise the previous prediction.
pub fn train_step<R: Rng + ?Sized>(
    network: &mut Network,
    adam: &mut AdamState,
    batch: &Tensor,
    step_index: u64,
    options: &TrainOptions,
    rng: &mut R,
) -> Result<StepReport> {
    let cfg = network.config.clone();
    check_batch(&cfg, batch, cfg.sequence_len())?;
    let b = batch.shape()[0];
    let frames = sequence_frames(batch, cfg.patch)?;

    let p = cfg.schedule.probability(step_index);
    let mut mask = vec![true; cfg.input_len];
    mask.extend(scheduled_sampling_mask(step_index, &cfg.schedule, cfg.horizon - 1, rng)?);

    let mut g = Graph::new();
    let net = network.bind(&mut g);
    let frame_vars: Vec<Var> = frames[..cfg.sequence_len()]
        .iter()
        .map(|f| g.constant(f.clone()))
        .collect();
    let state = init_state(&mut g, &cfg, b);
    let out = rollout(&mut g, &net, &frame_vars, cfg.input_len, cfg.horizon, &mask, state, false)?;

    let first = if options.supervise_input_phase { 0 } else { cfg.input_len - 1 };
    let mut terms = Vec::new();
    for (i, &pred) in out.predictions.iter().enumerate().skip(first) {
        let err = g.sub(pred, frame_vars[i + 1])?;
        let sq = g.mul(err, err)?;
        terms.push(g.sum(sq));
    }
    let total = g.add_all(&terms)?;
    let loss = g.scale(total, 1.0 / (terms.len() * b) as f32);
    let loss_value = g.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            symbol: format!("loss at step {step_index}"),
        });
    }
    g.backward(loss)?;
    let mut grads = net.gradients(&g);
    drop(g);
    let grad_norm = match options.clip_norm {
        Some(max) => clip_global_norm(&mut grads, max),
        None => clip_global_norm(&mut grads, f32::INFINITY),
    };
    adam_step(&mut network.params, &grads, adam)?;
    Ok(StepReport {
        loss: loss_value,
        sampling_probability: p,
        grad_norm,
    })
}

/// Offsets the network seed for the per-step sampling stream.
const SAMPLING_SALT: u64 = 0x5eed_0f_5a_3b1e;

/// The RNG that draws the sampling mask of training step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SAMPLING_SALT);
    rng.set_stream(step);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub options: TrainOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            shuffle_seed: 0,
            options: TrainOptions::default(),
        }
    }
}

/// Stateful training loop. Batch order and sampling masks depend only on
/// the seeds and the step counter, so a run resumed from a checkpoint
/// retraces an uninterrupted one exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub network: Network,
    pub adam: AdamState,
    /// Steps taken so far.
    pub step: u64,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(network: Network, config: TrainConfig) -> Self {
        let adam = AdamState::new(config.options.adam, &network.params);
        Trainer {
            network,
            adam,
            step: 0,
            config,
        }
    }

    /// Continues from saved state; a missing optimizer state starts fresh.
    pub fn resume(network: Network, adam: Option<AdamState>, step: u64, config: TrainConfig) -> Self {
        let adam = adam.unwrap_or_else(|| AdamState::new(config.options.adam, &network.params));
        Trainer {
            network,
            adam,
            step,
            config,
        }
    }

    /// Sequence indices of the next batch.
    pub fn next_batch(&self, dataset_len: usize) -> Result<Vec<usize>> {
        crate::data::batch_for_step(dataset_len, self.config.batch_size, self.config.shuffle_seed, self.step)
    }

    /// Draws the next batch from `dataset` and takes one step.
    pub fn step_on(&mut self, dataset: &crate::data::SequenceDataset) -> Result<StepReport> {
        let batch = dataset.gather(&self.next_batch(dataset.len())?)?;
        self.train_batch(&batch)
    }

    /// One step on an explicit batch.
    pub fn train_batch(&mut self, batch: &Tensor) -> Result<StepReport> {
        let mut rng = step_rng(self.network.config.seed, self.step);
        let report = train_step(
            &mut self.network,
            &mut self.adam,
            batch,
            self.step,
            &self.config.options,
            &mut rng,
        )?;
        self.step += 1;
        Ok(report)
    }
}

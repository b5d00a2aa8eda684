//! Recurrent building blocks: the spatiotemporal LSTM used as the bottom
//! layer, the non-stationary module (MIM-N), the stationary module (MIM-S)
//! and the MIM block that cascades the two in place of a forget gate.
//!
//! Every `W_ab * X` term is a same-padded convolution. Kernels that read the
//! same input are concatenated along the output axis and applied as one
//! convolution, which is numerically the sum of the individual terms.
//!
//! Gate pre-activations are normalized per gate (one layer-norm statistic
//! per sample and gate tensor) when layer norm is enabled; the gate bias
//! `b_*` then acts as the normalization bias and `ln_*` as its gain.
//! Without layer norm the bias is added directly.
//!
//! # Equations
//!
//! ST-LSTM (bottom layer, input `X`):
//!
//! ```text
//! g  = tanh(W_xg*X + W_hg*H + b_g)      g' = tanh(W_xg'*X + W_mg*M + b_g')
//! i  = σ(W_xi*X + W_hi*H + b_i)         i' = σ(W_xi'*X + W_mi*M + b_i')
//! f  = σ(W_xf*X + W_hf*H + b_f)         f' = σ(W_xf'*X + W_mf*M + b_f')
//! C_t = f ⊙ C + i ⊙ g                   M_t = f' ⊙ M + i' ⊙ g'
//! o  = σ(W_xo*X + W_ho*H + W_co*C_t + W_mo*M_t + b_o)
//! H_t = o ⊙ tanh(W_1x1 * [C_t, M_t])
//! ```
//!
//! The MIM block takes `X = H_t^{l-1}`, drops `f` and replaces `f ⊙ C` by
//! `T = MIM-S(MIM-N(H_t^{l-1}, H_{t-1}^{l-1}, N), C, S)`. MIM-N drives all
//! its gates with `H_t^{l-1} - H_{t-1}^{l-1}` and recurs on `N`; MIM-S
//! drives its gates with `D` and `C_{t-1}` and recurs on `S`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Which recurrent cell a layer runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    StLstm,
    /// A MIM block. Disabling a module gives the ablation variants: without
    /// MIM-N the raw hidden difference feeds MIM-S; without MIM-S the output
    /// of MIM-N replaces the virtual forget term directly.
    Mim { mim_n: bool, mim_s: bool },
}

impl CellKind {
    pub const MIM: CellKind = CellKind::Mim {
        mim_n: true,
        mim_s: true,
    };
}

/// Channel and kernel geometry of one cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellDims {
    pub input_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub layer_norm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(1 / fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct SpecBuilder {
    dims: CellDims,
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn kernel(&mut self, name: &str, c_in: usize, k: usize) {
        let c_out = self.dims.hidden;
        self.specs.push(ParamSpec {
            name: name.to_owned(),
            shape: vec![c_out, c_in, k, k],
            init: Init::Uniform { fan_in: c_in * k * k },
        });
    }

    fn gate(&mut self, prefix: &str, gate: &str) {
        let c = self.dims.hidden;
        self.specs.push(ParamSpec {
            name: format!("{prefix}b_{gate}"),
            shape: vec![c],
            init: Init::Zeros,
        });
        if self.dims.layer_norm {
            self.specs.push(ParamSpec {
                name: format!("{prefix}ln_{gate}"),
                shape: vec![c],
                init: Init::Ones,
            });
        }
    }
}

const ST_LSTM_X: [&str; 7] = ["w_xg", "w_xi", "w_xf", "w_xo", "w_xg_m", "w_xi_m", "w_xf_m"];
const ST_LSTM_H: [&str; 4] = ["w_hg", "w_hi", "w_hf", "w_ho"];
const MIM_X: [&str; 6] = ["w_xg", "w_xi", "w_xo", "w_xg_m", "w_xi_m", "w_xf_m"];
const MIM_H: [&str; 3] = ["w_hg", "w_hi", "w_ho"];
const M_BRANCH: [&str; 3] = ["w_mg", "w_mi", "w_mf"];
const MIM_N_X: [&str; 4] = ["n.w_xg", "n.w_xi", "n.w_xf", "n.w_xo"];
const MIM_N_N: [&str; 3] = ["n.w_ng", "n.w_ni", "n.w_nf"];
const MIM_S_D: [&str; 4] = ["s.w_dg", "s.w_di", "s.w_df", "s.w_do"];
const MIM_S_C: [&str; 4] = ["s.w_cg", "s.w_ci", "s.w_cf", "s.w_co"];

/// Every learnable tensor of a cell, in initialization order.
pub fn param_specs(kind: CellKind, dims: CellDims) -> Vec<ParamSpec> {
    let (c, k) = (dims.hidden, dims.kernel);
    let mut b = SpecBuilder {
        dims,
        specs: Vec::new(),
    };
    match kind {
        CellKind::StLstm => {
            for name in ST_LSTM_X {
                b.kernel(name, dims.input_channels, k);
            }
            for name in ST_LSTM_H.iter().chain(&M_BRANCH) {
                b.kernel(name, c, k);
            }
            for gate in ["g", "i", "f", "o", "g_m", "i_m", "f_m"] {
                b.gate("", gate);
            }
        }
        CellKind::Mim { mim_n, mim_s } => {
            for name in MIM_X {
                b.kernel(name, dims.input_channels, k);
            }
            for name in MIM_H.iter().chain(&M_BRANCH) {
                b.kernel(name, c, k);
            }
            for gate in ["g", "i", "o", "g_m", "i_m", "f_m"] {
                b.gate("", gate);
            }
            if mim_n {
                for name in MIM_N_X {
                    b.kernel(name, dims.input_channels, k);
                }
                for name in MIM_N_N.iter().chain(&["n.w_no"]) {
                    b.kernel(name, c, k);
                }
                for gate in ["g", "i", "f", "o"] {
                    b.gate("n.", gate);
                }
            }
            if mim_s {
                for name in MIM_S_D.iter().chain(&MIM_S_C).chain(&["s.w_so"]) {
                    b.kernel(name, c, k);
                }
                for gate in ["g", "i", "f", "o"] {
                    b.gate("s.", gate);
                }
            }
        }
    }
    b.kernel("w_co", c, k);
    b.kernel("w_mo", c, k);
    b.kernel("w_fuse", 2 * c, 1);
    b.specs
}

/// Materializes a tensor for `spec`.
pub fn init_tensor<R: Rng + ?Sized>(spec: &ParamSpec, rng: &mut R) -> Tensor {
    match spec.init {
        Init::Uniform { fan_in } => {
            let bound = (1.0 / fan_in as f32).sqrt();
            Tensor::rand_uniform(&spec.shape, -bound, bound, rng)
        }
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::ones(&spec.shape),
    }
}

/// The learnable tensors of one cell, keyed by symbol name
/// (`w_xg`, `b_i`, `n.w_ng`, `s.w_so`, `w_fuse`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams {
    pub kind: CellKind,
    pub dims: CellDims,
    pub tensors: ParamStore,
}

impl CellParams {
    /// Randomly initialized weights, zero biases and unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(kind: CellKind, dims: CellDims, rng: &mut R) -> Self {
        let tensors = param_specs(kind, dims)
            .into_iter()
            .map(|s| {
                let t = init_tensor(&s, rng);
                (s.name, t)
            })
            .collect();
        CellParams { kind, dims, tensors }
    }

    /// Every tensor zero, including layer-norm gains.
    pub fn zeros(kind: CellKind, dims: CellDims) -> Self {
        let tensors = param_specs(kind, dims)
            .into_iter()
            .map(|s| (s.name, Tensor::zeros(&s.shape)))
            .collect();
        CellParams { kind, dims, tensors }
    }

    pub fn bind(&self, g: &mut Graph) -> CellVars {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.to_owned(), g.param(t.clone())))
            .collect();
        CellVars {
            vars,
            layer_norm: self.dims.layer_norm,
            eps: LAYER_NORM_EPS,
        }
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Cell parameters bound into a [`Graph`].
#[derive(Clone, Debug)]
pub struct CellVars {
    vars: BTreeMap<String, Var>,
    layer_norm: bool,
    eps: f32,
}

impl CellVars {
    pub fn new(vars: BTreeMap<String, Var>, layer_norm: bool) -> Self {
        CellVars {
            vars,
            layer_norm,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("cell parameter `{name}` is missing")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn layer_norm(&self) -> bool {
        self.layer_norm
    }

    /// Applies the kernels in `names` (all reading `input`) as one stacked
    /// convolution; the output holds their results in order along channels.
    fn stacked_conv(&self, g: &mut Graph, input: Var, names: &[&str]) -> Result<Var> {
        let kernels = names.iter().map(|n| self.get(n)).collect::<Result<Vec<_>>>()?;
        let weight = if kernels.len() == 1 {
            kernels[0]
        } else {
            g.concat(&kernels, 0)?
        };
        g.conv2d(input, weight, None)
    }

    /// Adds the gate bias (and applies per-gate layer norm) to a stacked
    /// pre-activation, then splits it into one tensor per gate.
    fn gates(&self, g: &mut Graph, pre: Var, prefix: &str, gates: &[&str]) -> Result<Vec<Var>> {
        let channels = g.value(pre).shape()[1] / gates.len();
        let biases = gates
            .iter()
            .map(|gate| self.get(&format!("{prefix}b_{gate}")))
            .collect::<Result<Vec<_>>>()?;
        let bias = if biases.len() == 1 { biases[0] } else { g.concat(&biases, 0)? };
        let out = if self.layer_norm {
            let gains = gates
                .iter()
                .map(|gate| self.get(&format!("{prefix}ln_{gate}")))
                .collect::<Result<Vec<_>>>()?;
            let gain = if gains.len() == 1 { gains[0] } else { g.concat(&gains, 0)? };
            g.layer_norm(pre, gain, bias, gates.len(), self.eps)?
        } else {
            g.add_channel_bias(pre, bias)?
        };
        if gates.len() == 1 {
            Ok(vec![out])
        } else {
            g.split(out, 1, channels, gates.len())
        }
    }
}

/// Gate activations captured during a forward pass, for diagnostics only.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellDiagnostics {
    /// Post-activation gate tensors keyed by symbol (`f`, `i`, `n.f`, ...).
    pub gates: BTreeMap<String, Tensor>,
    /// The term replacing `f ⊙ C_{t-1}` in a MIM block, with `C_{t-1}`.
    pub virtual_forget: Option<VirtualForget>,
    /// The hidden difference `H_t^{l-1} - H_{t-1}^{l-1}` seen by MIM-N.
    pub difference: Option<Tensor>,
}

/// `T_t` and the `C_{t-1}` it replaces the forgetting of.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualForget {
    pub t: Tensor,
    pub c_prev: Tensor,
}

/// Denominators smaller than this are excluded from `|T / C|` statistics.
pub const RATIO_GUARD: f32 = 1e-6;

impl VirtualForget {
    /// Elementwise `T / C_{t-1}`, `None` where `|C_{t-1}| < RATIO_GUARD`.
    pub fn ratios(&self) -> impl Iterator<Item = Option<f32>> + '_ {
        self.t
            .data()
            .iter()
            .zip(self.c_prev.data())
            .map(|(&t, &c)| (c.abs() >= RATIO_GUARD).then(|| t / c))
    }
}

impl CellDiagnostics {
    fn record(&mut self, g: &Graph, name: &str, v: Var) {
        self.gates.insert(name.to_owned(), g.value(v).clone());
    }

    fn absorb(&mut self, prefix: &str, other: CellDiagnostics) {
        for (k, v) in other.gates {
            self.gates.insert(format!("{prefix}{k}"), v);
        }
        if self.difference.is_none() {
            self.difference = other.difference;
        }
    }
}

fn check_same(g: &Graph, op: &'static str, vars: &[(&str, Var)]) -> Result<()> {
    let (first_name, first) = vars[0];
    let shape = g.value(first).shape();
    if shape.len() != 4 {
        return Err(Error::shape(op, format!("{first_name} must be [N, C, H, W], got {shape:?}")));
    }
    for &(name, v) in &vars[1..] {
        if g.value(v).shape() != shape {
            return Err(Error::shape(
                op,
                format!("{name} {:?} vs {first_name} {shape:?}", g.value(v).shape()),
            ));
        }
    }
    Ok(())
}

fn check_spatial(g: &Graph, op: &'static str, a: (&str, Var), b: (&str, Var)) -> Result<()> {
    let (sa, sb) = (g.value(a.1).shape(), g.value(b.1).shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::shape(op, format!("{} {sa:?} vs {} {sb:?}", a.0, b.0)));
    }
    Ok(())
}

fn ensure_finite(g: &Graph, v: Var, symbol: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            symbol: symbol.to_owned(),
        })
    }
}

fn channels(g: &Graph, v: Var) -> usize {
    g.value(v).shape()[1]
}

/// `o ⊙ tanh(W_1x1 * [C, M])` with `o = σ(base + W_co*C + W_mo*M + b_o)`.
fn output_gate_and_hidden(
    g: &mut Graph,
    p: &CellVars,
    base: Var,
    c: Var,
    m: Var,
    diag: &mut Option<CellDiagnostics>,
) -> Result<Var> {
    let cm = g.concat_channels(c, m)?;
    let w_cm = {
        let (w_co, w_mo) = (p.get("w_co")?, p.get("w_mo")?);
        g.concat(&[w_co, w_mo], 1)?
    };
    let oc = g.conv2d(cm, w_cm, None)?;
    let pre_o = g.add(base, oc)?;
    let o_pre = p.gates(g, pre_o, "", &["o"])?[0];
    let o = g.sigmoid(o_pre);
    let fused = g.conv2d(cm, p.get("w_fuse")?, None)?;
    let fused = g.tanh(fused);
    let h = g.mul(o, fused)?;
    if let Some(d) = diag {
        d.record(g, "o", o);
    }
    Ok(h)
}

/// `M_t = f' ⊙ M + i' ⊙ g'` from the stacked input-side pre-activation.
fn memory_branch(
    g: &mut Graph,
    p: &CellVars,
    x_part: Var,
    m_in: Var,
    diag: &mut Option<CellDiagnostics>,
) -> Result<Var> {
    let mc = p.stacked_conv(g, m_in, &M_BRANCH)?;
    let pre = g.add(x_part, mc)?;
    let gates = p.gates(g, pre, "", &["g_m", "i_m", "f_m"])?;
    let gm = g.tanh(gates[0]);
    let im = g.sigmoid(gates[1]);
    let fm = g.sigmoid(gates[2]);
    let keep = g.mul(fm, m_in)?;
    let write = g.mul(im, gm)?;
    let m = g.add(keep, write)?;
    if let Some(d) = diag {
        d.record(g, "g_m", gm);
        d.record(g, "i_m", im);
        d.record(g, "f_m", fm);
    }
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct StLstmOutput {
    pub h: Var,
    pub c: Var,
    pub m: Var,
    pub diagnostics: Option<CellDiagnostics>,
}

/// One step of the spatiotemporal LSTM bottom layer.
pub fn st_lstm_forward(
    g: &mut Graph,
    p: &CellVars,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    m_in: Var,
    record: bool,
) -> Result<StLstmOutput> {
    const OP: &str = "st_lstm_forward";
    check_same(g, OP, &[("h_prev", h_prev), ("c_prev", c_prev), ("m_in", m_in)])?;
    check_spatial(g, OP, ("x", x), ("h_prev", h_prev))?;
    let c_hidden = channels(g, h_prev);
    let mut diag = record.then(CellDiagnostics::default);

    let xc = p.stacked_conv(g, x, &ST_LSTM_X)?;
    let hc = p.stacked_conv(g, h_prev, &ST_LSTM_H)?;
    let x_gif = g.narrow(xc, 1, 0, 3 * c_hidden)?;
    let x_o = g.narrow(xc, 1, 3 * c_hidden, c_hidden)?;
    let x_m = g.narrow(xc, 1, 4 * c_hidden, 3 * c_hidden)?;
    let h_gif = g.narrow(hc, 1, 0, 3 * c_hidden)?;
    let h_o = g.narrow(hc, 1, 3 * c_hidden, c_hidden)?;

    let pre = g.add(x_gif, h_gif)?;
    let gates = p.gates(g, pre, "", &["g", "i", "f"])?;
    let gt = g.tanh(gates[0]);
    let it = g.sigmoid(gates[1]);
    let ft = g.sigmoid(gates[2]);
    let keep = g.mul(ft, c_prev)?;
    let write = g.mul(it, gt)?;
    let c = g.add(keep, write)?;
    ensure_finite(g, c, "C")?;

    let m = memory_branch(g, p, x_m, m_in, &mut diag)?;
    ensure_finite(g, m, "M")?;

    let base = g.add(x_o, h_o)?;
    let h = output_gate_and_hidden(g, p, base, c, m, &mut diag)?;
    ensure_finite(g, h, "H")?;

    if let Some(d) = diag.as_mut() {
        d.record(g, "g", gt);
        d.record(g, "i", it);
        d.record(g, "f", ft);
    }
    Ok(StLstmOutput {
        h,
        c,
        m,
        diagnostics: diag,
    })
}

#[derive(Clone, Debug)]
pub struct MimNOutput {
    pub d: Var,
    pub n: Var,
    pub diagnostics: Option<CellDiagnostics>,
}

/// The non-stationary module. `p` holds the block's parameters; this
/// function reads the `n.`-prefixed ones.
pub fn mim_n_forward(
    g: &mut Graph,
    p: &CellVars,
    h_below_t: Var,
    h_below_tminus1: Var,
    n_prev: Var,
    record: bool,
) -> Result<MimNOutput> {
    const OP: &str = "mim_n_forward";
    check_same(g, OP, &[("h_below_t", h_below_t), ("h_below_tminus1", h_below_tminus1)])?;
    check_spatial(g, OP, ("h_below_t", h_below_t), ("n_prev", n_prev))?;
    let c_hidden = channels(g, n_prev);
    let mut diag = record.then(CellDiagnostics::default);

    let diff = g.sub(h_below_t, h_below_tminus1)?;
    let dc = p.stacked_conv(g, diff, &MIM_N_X)?;
    let nc = p.stacked_conv(g, n_prev, &MIM_N_N)?;
    let d_gif = g.narrow(dc, 1, 0, 3 * c_hidden)?;
    let d_o = g.narrow(dc, 1, 3 * c_hidden, c_hidden)?;

    let pre = g.add(d_gif, nc)?;
    let gates = p.gates(g, pre, "n.", &["g", "i", "f"])?;
    let gt = g.tanh(gates[0]);
    let it = g.sigmoid(gates[1]);
    let ft = g.sigmoid(gates[2]);
    let keep = g.mul(ft, n_prev)?;
    let write = g.mul(it, gt)?;
    let n = g.add(keep, write)?;
    ensure_finite(g, n, "N")?;

    let no = g.conv2d(n, p.get("n.w_no")?, None)?;
    let pre_o = g.add(d_o, no)?;
    let o_pre = p.gates(g, pre_o, "n.", &["o"])?[0];
    let ot = g.sigmoid(o_pre);
    let tn = g.tanh(n);
    let d = g.mul(ot, tn)?;
    ensure_finite(g, d, "D")?;

    if let Some(dg) = diag.as_mut() {
        dg.record(g, "g", gt);
        dg.record(g, "i", it);
        dg.record(g, "f", ft);
        dg.record(g, "o", ot);
        dg.difference = Some(g.value(diff).clone());
    }
    Ok(MimNOutput {
        d,
        n,
        diagnostics: diag,
    })
}

#[derive(Clone, Debug)]
pub struct MimSOutput {
    pub t: Var,
    pub s: Var,
    pub diagnostics: Option<CellDiagnostics>,
}

/// The stationary module; reads the `s.`-prefixed parameters of `p`.
pub fn mim_s_forward(
    g: &mut Graph,
    p: &CellVars,
    d: Var,
    c_prev: Var,
    s_prev: Var,
    record: bool,
) -> Result<MimSOutput> {
    const OP: &str = "mim_s_forward";
    check_same(g, OP, &[("d", d), ("c_prev", c_prev), ("s_prev", s_prev)])?;
    let c_hidden = channels(g, s_prev);
    let mut diag = record.then(CellDiagnostics::default);

    let dc = p.stacked_conv(g, d, &MIM_S_D)?;
    let cc = p.stacked_conv(g, c_prev, &MIM_S_C)?;
    let pre_all = g.add(dc, cc)?;
    let pre = g.narrow(pre_all, 1, 0, 3 * c_hidden)?;
    let base_o = g.narrow(pre_all, 1, 3 * c_hidden, c_hidden)?;

    let gates = p.gates(g, pre, "s.", &["g", "i", "f"])?;
    let gt = g.tanh(gates[0]);
    let it = g.sigmoid(gates[1]);
    let ft = g.sigmoid(gates[2]);
    let keep = g.mul(ft, s_prev)?;
    let write = g.mul(it, gt)?;
    let s = g.add(keep, write)?;
    ensure_finite(g, s, "S")?;

    let so = g.conv2d(s, p.get("s.w_so")?, None)?;
    let pre_o = g.add(base_o, so)?;
    let o_pre = p.gates(g, pre_o, "s.", &["o"])?[0];
    let ot = g.sigmoid(o_pre);
    let ts = g.tanh(s);
    let t = g.mul(ot, ts)?;
    ensure_finite(g, t, "T")?;

    if let Some(dg) = diag.as_mut() {
        dg.record(g, "g", gt);
        dg.record(g, "i", it);
        dg.record(g, "f", ft);
        dg.record(g, "o", ot);
    }
    Ok(MimSOutput {
        t,
        s,
        diagnostics: diag,
    })
}

/// Inputs of one MIM block step. `n_prev` / `s_prev` are required exactly
/// when the corresponding module is enabled.
#[derive(Clone, Copy, Debug)]
pub struct MimBlockInputs {
    pub h_below_t: Var,
    pub h_below_tminus1: Var,
    pub h_prev: Var,
    pub c_prev: Var,
    pub m_in: Var,
    pub n_prev: Option<Var>,
    pub s_prev: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct MimBlockOutput {
    pub h: Var,
    pub c: Var,
    pub m: Var,
    pub n: Option<Var>,
    pub s: Option<Var>,
    /// The MIM-N output, or the raw difference when MIM-N is disabled.
    pub d: Var,
    pub t: Var,
    pub diagnostics: Option<CellDiagnostics>,
}

/// One step of a MIM block of the given variant.
pub fn mim_block_forward(
    g: &mut Graph,
    p: &CellVars,
    kind: CellKind,
    inputs: MimBlockInputs,
    record: bool,
) -> Result<MimBlockOutput> {
    const OP: &str = "mim_block_forward";
    let CellKind::Mim { mim_n, mim_s } = kind else {
        return Err(Error::invalid("mim_block_forward needs a MIM cell kind"));
    };
    let MimBlockInputs {
        h_below_t,
        h_below_tminus1,
        h_prev,
        c_prev,
        m_in,
        n_prev,
        s_prev,
    } = inputs;
    check_same(
        g,
        OP,
        &[
            ("h_below_t", h_below_t),
            ("h_below_tminus1", h_below_tminus1),
            ("h_prev", h_prev),
            ("c_prev", c_prev),
            ("m_in", m_in),
        ],
    )?;
    let required = |v: Option<Var>, name: &str, on: bool| -> Result<Option<Var>> {
        match (v, on) {
            (Some(v), true) => {
                check_same(g, OP, &[("h_prev", h_prev), (name, v)])?;
                Ok(Some(v))
            }
            (None, false) => Ok(None),
            (Some(_), false) => Err(Error::invalid(format!("{name} given but its module is disabled"))),
            (None, true) => Err(Error::invalid(format!("{name} is required"))),
        }
    };
    let n_prev = required(n_prev, "n_prev", mim_n)?;
    let s_prev = required(s_prev, "s_prev", mim_s)?;

    let c_hidden = channels(g, h_prev);
    let mut diag = record.then(CellDiagnostics::default);

    let xc = p.stacked_conv(g, h_below_t, &MIM_X)?;
    let hc = p.stacked_conv(g, h_prev, &MIM_H)?;
    let x_gi = g.narrow(xc, 1, 0, 2 * c_hidden)?;
    let x_o = g.narrow(xc, 1, 2 * c_hidden, c_hidden)?;
    let x_m = g.narrow(xc, 1, 3 * c_hidden, 3 * c_hidden)?;
    let h_gi = g.narrow(hc, 1, 0, 2 * c_hidden)?;
    let h_o = g.narrow(hc, 1, 2 * c_hidden, c_hidden)?;

    let pre = g.add(x_gi, h_gi)?;
    let gates = p.gates(g, pre, "", &["g", "i"])?;
    let gt = g.tanh(gates[0]);
    let it = g.sigmoid(gates[1]);

    let (d, n) = match n_prev {
        Some(n_prev) => {
            let out = mim_n_forward(g, p, h_below_t, h_below_tminus1, n_prev, record)?;
            if let (Some(dg), Some(sub)) = (diag.as_mut(), out.diagnostics) {
                dg.absorb("n.", sub);
            }
            (out.d, Some(out.n))
        }
        None => {
            let diff = g.sub(h_below_t, h_below_tminus1)?;
            if let Some(dg) = diag.as_mut() {
                dg.difference = Some(g.value(diff).clone());
            }
            (diff, None)
        }
    };
    ensure_finite(g, d, "D")?;

    let (t, s) = match s_prev {
        Some(s_prev) => {
            let out = mim_s_forward(g, p, d, c_prev, s_prev, record)?;
            if let (Some(dg), Some(sub)) = (diag.as_mut(), out.diagnostics) {
                dg.absorb("s.", sub);
            }
            (out.t, Some(out.s))
        }
        None => (d, None),
    };
    ensure_finite(g, t, "T")?;

    let write = g.mul(it, gt)?;
    let c = g.add(t, write)?;
    ensure_finite(g, c, "C")?;

    let m = memory_branch(g, p, x_m, m_in, &mut diag)?;
    ensure_finite(g, m, "M")?;

    let base = g.add(x_o, h_o)?;
    let h = output_gate_and_hidden(g, p, base, c, m, &mut diag)?;
    ensure_finite(g, h, "H")?;

    if let Some(dg) = diag.as_mut() {
        dg.record(g, "g", gt);
        dg.record(g, "i", it);
        dg.virtual_forget = Some(VirtualForget {
            t: g.value(t).clone(),
            c_prev: g.value(c_prev).clone(),
        });
    }
    Ok(MimBlockOutput {
        h,
        c,
        m,
        n,
        s,
        d,
        t,
        diagnostics: diag,
    })
}

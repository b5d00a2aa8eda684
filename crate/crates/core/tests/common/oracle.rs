//! Unoptimized f64 transcriptions of the cell equations, one sample at a
//! time, written without any library kernels.

use mim_core::cells::LAYER_NORM_EPS;
use mim_core::{ParamStore, Tensor};

/// A `[C, H, W]` array of f64.
#[derive(Clone, Debug)]
pub struct Arr {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Arr {
    pub fn zeros(c: usize, h: usize, w: usize) -> Arr {
        Arr { c, h, w, v: vec![0.0; c * h * w] }
    }

    /// Sample `n` of a `[N, C, H, W]` tensor.
    pub fn sample(t: &Tensor, n: usize) -> Arr {
        let s = t.shape();
        let len = s[1] * s[2] * s[3];
        Arr {
            c: s[1],
            h: s[2],
            w: s[3],
            v: t.data()[n * len..][..len].iter().map(|&x| x as f64).collect(),
        }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    fn zip(&self, o: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
        assert_eq!((self.c, self.h, self.w), (o.c, o.h, o.w));
        Arr { v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(), ..*self }
    }

    pub fn add(&self, o: &Arr) -> Arr {
        self.zip(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Arr) -> Arr {
        self.zip(o, |a, b| a - b)
    }

    pub fn mul(&self, o: &Arr) -> Arr {
        self.zip(o, |a, b| a * b)
    }

    pub fn sigmoid(&self) -> Arr {
        Arr { v: self.v.iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect(), ..*self }
    }

    pub fn tanh(&self) -> Arr {
        Arr { v: self.v.iter().map(|&a| a.tanh()).collect(), ..*self }
    }

    /// Channel concatenation.
    pub fn cat(&self, o: &Arr) -> Arr {
        let mut v = self.v.clone();
        v.extend_from_slice(&o.v);
        Arr { c: self.c + o.c, h: self.h, w: self.w, v }
    }

    pub fn max_abs_diff(&self, t: &Tensor, n: usize) -> f64 {
        let other = Arr::sample(t, n);
        self.v.iter().zip(&other.v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Zero-padded, stride-1 cross-correlation, one output at a time.
pub fn conv(x: &Arr, w: &Tensor) -> Arr {
    let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(ci, x.c);
    let pad = (k / 2) as isize;
    let mut out = Arr::zeros(co, x.h, x.w);
    for o in 0..co {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = 0.0;
                for i in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            let wv = w.data()[((o * ci + i) * k + ky) * k + kx] as f64;
                            acc += wv * x.at(i, sy as usize, sx as usize);
                        }
                    }
                }
                out.v[(o * x.h + y) * x.w + xx] = acc;
            }
        }
    }
    out
}

/// Parameter lookup plus the layer-norm switch.
pub struct P<'a> {
    pub store: &'a ParamStore,
    pub layer_norm: bool,
}

impl P<'_> {
    pub fn w(&self, name: &str) -> &Tensor {
        self.store.get(name).unwrap_or_else(|_| panic!("missing {name}"))
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.w(name).data().iter().map(|&x| x as f64).collect()
    }

    /// Adds the bias of gate `prefix`+`gate`, normalizing first when layer
    /// norm is on (statistics over the whole `[C, H, W]` gate tensor).
    pub fn gate(&self, pre: &Arr, prefix: &str, gate: &str) -> Arr {
        let b = self.vec(&format!("{prefix}b_{gate}"));
        let plane = pre.h * pre.w;
        let mut out = pre.clone();
        if self.layer_norm {
            let gain = self.vec(&format!("{prefix}ln_{gate}"));
            let n = pre.v.len() as f64;
            let mean = pre.v.iter().sum::<f64>() / n;
            let var = pre.v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let sd = (var + LAYER_NORM_EPS as f64).sqrt();
            for (i, v) in out.v.iter_mut().enumerate() {
                let c = i / plane;
                *v = (*v - mean) / sd * gain[c] + b[c];
            }
        } else {
            for (i, v) in out.v.iter_mut().enumerate() {
                *v += b[i / plane];
            }
        }
        out
    }

    fn conv(&self, x: &Arr, name: &str) -> Arr {
        conv(x, self.w(name))
    }

    /// `σ(base + W_co*C + W_mo*M + b_o)` then `o ⊙ tanh(W_1x1*[C, M])`.
    fn hidden(&self, base: &Arr, c: &Arr, m: &Arr) -> Arr {
        let pre = base.add(&self.conv(c, "w_co")).add(&self.conv(m, "w_mo"));
        let o = self.gate(&pre, "", "o").sigmoid();
        o.mul(&self.conv(&c.cat(m), "w_fuse").tanh())
    }

    /// `M_t = f' ⊙ M + i' ⊙ g'`.
    fn memory(&self, x: &Arr, m: &Arr) -> Arr {
        let g = self.gate(&self.conv(x, "w_xg_m").add(&self.conv(m, "w_mg")), "", "g_m").tanh();
        let i = self.gate(&self.conv(x, "w_xi_m").add(&self.conv(m, "w_mi")), "", "i_m").sigmoid();
        let f = self.gate(&self.conv(x, "w_xf_m").add(&self.conv(m, "w_mf")), "", "f_m").sigmoid();
        f.mul(m).add(&i.mul(&g))
    }
}

pub struct StLstmOut {
    pub h: Arr,
    pub c: Arr,
    pub m: Arr,
}

pub fn st_lstm(p: &P, x: &Arr, h: &Arr, c: &Arr, m: &Arr) -> StLstmOut {
    let g = p.gate(&p.conv(x, "w_xg").add(&p.conv(h, "w_hg")), "", "g").tanh();
    let i = p.gate(&p.conv(x, "w_xi").add(&p.conv(h, "w_hi")), "", "i").sigmoid();
    let f = p.gate(&p.conv(x, "w_xf").add(&p.conv(h, "w_hf")), "", "f").sigmoid();
    let c_new = f.mul(c).add(&i.mul(&g));
    let m_new = p.memory(x, m);
    let base = p.conv(x, "w_xo").add(&p.conv(h, "w_ho"));
    let h_new = p.hidden(&base, &c_new, &m_new);
    StLstmOut { h: h_new, c: c_new, m: m_new }
}

/// MIM-N: returns `(D, N_t)`.
pub fn mim_n(p: &P, h_t: &Arr, h_tm1: &Arr, n: &Arr) -> (Arr, Arr) {
    let diff = h_t.sub(h_tm1);
    let g = p.gate(&p.conv(&diff, "n.w_xg").add(&p.conv(n, "n.w_ng")), "n.", "g").tanh();
    let i = p.gate(&p.conv(&diff, "n.w_xi").add(&p.conv(n, "n.w_ni")), "n.", "i").sigmoid();
    let f = p.gate(&p.conv(&diff, "n.w_xf").add(&p.conv(n, "n.w_nf")), "n.", "f").sigmoid();
    let n_new = f.mul(n).add(&i.mul(&g));
    let o = p.gate(&p.conv(&diff, "n.w_xo").add(&p.conv(&n_new, "n.w_no")), "n.", "o").sigmoid();
    (o.mul(&n_new.tanh()), n_new)
}

/// MIM-S: returns `(T, S_t)`.
pub fn mim_s(p: &P, d: &Arr, c: &Arr, s: &Arr) -> (Arr, Arr) {
    let g = p.gate(&p.conv(d, "s.w_dg").add(&p.conv(c, "s.w_cg")), "s.", "g").tanh();
    let i = p.gate(&p.conv(d, "s.w_di").add(&p.conv(c, "s.w_ci")), "s.", "i").sigmoid();
    let f = p.gate(&p.conv(d, "s.w_df").add(&p.conv(c, "s.w_cf")), "s.", "f").sigmoid();
    let s_new = f.mul(s).add(&i.mul(&g));
    let pre_o = p.conv(d, "s.w_do").add(&p.conv(c, "s.w_co")).add(&p.conv(&s_new, "s.w_so"));
    let o = p.gate(&pre_o, "s.", "o").sigmoid();
    (o.mul(&s_new.tanh()), s_new)
}

pub struct MimOut {
    pub h: Arr,
    pub c: Arr,
    pub m: Arr,
    pub n: Option<Arr>,
    pub s: Option<Arr>,
}

#[allow(clippy::too_many_arguments)]
pub fn mim_block(
    p: &P,
    h_below_t: &Arr,
    h_below_tm1: &Arr,
    h: &Arr,
    c: &Arr,
    m: &Arr,
    n: Option<&Arr>,
    s: Option<&Arr>,
) -> MimOut {
    let x = h_below_t;
    let g = p.gate(&p.conv(x, "w_xg").add(&p.conv(h, "w_hg")), "", "g").tanh();
    let i = p.gate(&p.conv(x, "w_xi").add(&p.conv(h, "w_hi")), "", "i").sigmoid();
    let (d, n_new) = match n {
        Some(n) => {
            let (d, n_new) = mim_n(p, h_below_t, h_below_tm1, n);
            (d, Some(n_new))
        }
        None => (h_below_t.sub(h_below_tm1), None),
    };
    let (t, s_new) = match s {
        Some(s) => {
            let (t, s_new) = mim_s(p, &d, c, s);
            (t, Some(s_new))
        }
        None => (d, None),
    };
    let c_new = t.add(&i.mul(&g));
    let m_new = p.memory(x, m);
    let base = p.conv(x, "w_xo").add(&p.conv(h, "w_ho"));
    let h_new = p.hidden(&base, &c_new, &m_new);
    MimOut { h: h_new, c: c_new, m: m_new, n: n_new, s: s_new }
}

/// Parameters of layer `layer` (1-based) with the `l{layer}.` prefix removed.
pub fn layer_store(params: &ParamStore, layer: usize) -> ParamStore {
    let prefix = format!("l{layer}.");
    params
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|k| (k.to_owned(), t.clone())))
        .collect()
}

/// Teacher-forced squared error of a full MIM network (ST-LSTM bottom
/// layer, MIM blocks above, 1x1 output projection) on one sequence of
/// `[C, H, W]` frames: every step `t` predicts frame `t + 1`.
pub fn network_loss(params: &ParamStore, layers: usize, hidden: usize, layer_norm: bool, frames: &[Arr]) -> f64 {
    let stores: Vec<ParamStore> = (1..=layers).map(|l| layer_store(params, l)).collect();
    let (h, w) = (frames[0].h, frames[0].w);
    let zero = Arr::zeros(hidden, h, w);
    let mut hs = vec![zero.clone(); layers];
    let mut cs = vec![zero.clone(); layers];
    let mut ns = vec![zero.clone(); layers];
    let mut ss = vec![zero.clone(); layers];
    let mut m = zero;
    let out_w = params.get("out.w").unwrap();
    let mut loss = 0.0;
    for t in 0..frames.len() - 1 {
        let p0 = P { store: &stores[0], layer_norm };
        let st = st_lstm(&p0, &frames[t], &hs[0], &cs[0], &m);
        let mut new_h = vec![st.h];
        let mut new_c = vec![st.c];
        let mut new_n = vec![ns[0].clone()];
        let mut new_s = vec![ss[0].clone()];
        m = st.m;
        for l in 1..layers {
            let p = P { store: &stores[l], layer_norm };
            let o = mim_block(&p, &new_h[l - 1], &hs[l - 1], &hs[l], &cs[l], &m, Some(&ns[l]), Some(&ss[l]));
            new_h.push(o.h);
            new_c.push(o.c);
            new_n.push(o.n.unwrap());
            new_s.push(o.s.unwrap());
            m = o.m;
        }
        let pred = conv(&new_h[layers - 1], out_w);
        loss += pred.sub(&frames[t + 1]).v.iter().map(|d| d * d).sum::<f64>();
        hs = new_h;
        cs = new_c;
        ns = new_n;
        ss = new_s;
    }
    loss
}

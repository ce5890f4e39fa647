//! Layer definitions over the tape: each layer owns parameter names and
//! binds them from the graph's store on use.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{ParameterStore, Tensor};
use crate::{Error, Result};

/// Glorot-uniform limit.
fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `y = x W + b` for `x: [m, din]`, `w: [din, dout]`, `b: [dout]`.
pub fn fc(g: &mut Graph<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph<'_>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Fully-connected layer.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let l = Self::describe(prefix, din, dout);
        store.insert(&l.w, Tensor::uniform(&[din, dout], glorot(din, dout), rng))?;
        store.insert(&l.b, Tensor::zeros(&[dout]))?;
        Ok(l)
    }

    /// Layer with all-zero weights and bias.
    pub fn zeros(store: &mut ParameterStore, prefix: &str, din: usize, dout: usize) -> Result<Self> {
        let l = Self::describe(prefix, din, dout);
        store.insert(&l.w, Tensor::zeros(&[din, dout]))?;
        store.insert(&l.b, Tensor::zeros(&[dout]))?;
        Ok(l)
    }

    /// Names and shapes only; parameters must already exist in the store.
    pub fn describe(prefix: &str, din: usize, dout: usize) -> Self {
        Linear {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            din,
            dout,
        }
    }

    /// Applies to `[m, din]` or `[.., din]` (leading axes flattened).
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.din) {
            return Err(Error::shape("linear", &shape, &[self.din, self.dout]));
        }
        let flat = if shape.len() == 2 {
            x
        } else {
            let rows = shape[..shape.len() - 1].iter().product();
            g.reshape(x, &[rows, self.din])?
        };
        let (w, b) = (g.param(&self.w)?, g.param(&self.b)?);
        let y = fc(g, flat, w, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.dout;
            g.reshape(y, &out)
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![(self.w.clone(), vec![self.din, self.dout]), (self.b.clone(), vec![self.dout])]
    }
}

/// Bound GRU weights for one step.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

fn gate(g: &mut Graph<'_>, x: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u)?;
    let s = g.add(xw, hu)?;
    g.add_bias(s, b)
}

/// One GRU step:
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// h~ = tanh(x W_h + (r ∘ h) U_h + b_h)
/// h' = (1 - z) ∘ h + z ∘ h~
/// ```
pub fn gru_cell(g: &mut Graph<'_>, x: Var, h: Var, p: &GruParams) -> Result<Var> {
    let z = gate(g, x, h, p.w_z, p.u_z, p.b_z)?;
    let z = g.sigmoid(z);
    let r = gate(g, x, h, p.w_r, p.u_r, p.b_r)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, h)?;
    let cand = gate(g, x, rh, p.w_h, p.u_h, p.b_h)?;
    let cand = g.tanh(cand);
    let keep = g.one_minus(z);
    let old = g.mul(keep, h)?;
    let new = g.mul(z, cand)?;
    g.add(old, new)
}

/// Identifies the GRU update convention in checkpoints.
pub const GRU_CONVENTION: &str = "h=(1-z)*h_prev+z*cand";

#[derive(Debug, Clone)]
pub struct GruLayer {
    pub prefix: String,
    pub din: usize,
    pub dh: usize,
}

impl GruLayer {
    const GATES: [&'static str; 3] = ["z", "r", "h"];

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        din: usize,
        dh: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let l = Self::describe(prefix, din, dh);
        for gname in Self::GATES {
            store.insert(format!("{prefix}.w_{gname}"), Tensor::uniform(&[din, dh], glorot(din, dh), rng))?;
            store.insert(format!("{prefix}.u_{gname}"), Tensor::uniform(&[dh, dh], glorot(dh, dh), rng))?;
            store.insert(format!("{prefix}.b_{gname}"), Tensor::zeros(&[dh]))?;
        }
        Ok(l)
    }

    pub fn describe(prefix: &str, din: usize, dh: usize) -> Self {
        GruLayer {
            prefix: prefix.to_string(),
            din,
            dh,
        }
    }

    pub fn bind(&self, g: &mut Graph<'_>) -> Result<GruParams> {
        let p = |g: &mut Graph<'_>, n: &str| g.param(&format!("{}.{n}", self.prefix));
        Ok(GruParams {
            w_z: p(g, "w_z")?,
            w_r: p(g, "w_r")?,
            w_h: p(g, "w_h")?,
            u_z: p(g, "u_z")?,
            u_r: p(g, "u_r")?,
            u_h: p(g, "u_h")?,
            b_z: p(g, "b_z")?,
            b_r: p(g, "b_r")?,
            b_h: p(g, "b_h")?,
        })
    }

    /// Runs over `[n, T, din]` from a zero state; returns `[n, T, dh]`.
    pub fn forward_seq(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.din {
            return Err(Error::shape("gru", &s, &[self.din, self.dh]));
        }
        let p = self.bind(g)?;
        let mut h = g.constant(Tensor::zeros(&[s[0], self.dh]));
        let mut outs = Vec::with_capacity(s[1]);
        for t in 0..s[1] {
            let xt = g.select_step(x, t)?;
            h = gru_cell(g, xt, h, &p)?;
            outs.push(h);
        }
        g.stack_steps(&outs)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for gname in Self::GATES {
            v.push((format!("{}.w_{gname}", self.prefix), vec![self.din, self.dh]));
            v.push((format!("{}.u_{gname}", self.prefix), vec![self.dh, self.dh]));
            v.push((format!("{}.b_{gname}", self.prefix), vec![self.dh]));
        }
        v
    }
}

/// Bound LSTM weights, gates in order input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w: [Var; 4],
    pub u: [Var; 4],
    pub b: [Var; 4],
}

/// One LSTM step:
///
/// ```text
/// i = σ(x W_i + h U_i + b_i)    f = σ(x W_f + h U_f + b_f)
/// g = tanh(x W_g + h U_g + b_g) o = σ(x W_o + h U_o + b_o)
/// c' = f ∘ c + i ∘ g            h' = o ∘ tanh(c')
/// ```
pub fn lstm_cell(g: &mut Graph<'_>, x: Var, h: Var, c: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let mut pre = [x; 4];
    for k in 0..4 {
        pre[k] = gate(g, x, h, p.w[k], p.u[k], p.b[k])?;
    }
    let i = g.sigmoid(pre[0]);
    let f = g.sigmoid(pre[1]);
    let cand = g.tanh(pre[2]);
    let o = g.sigmoid(pre[3]);
    let fc_ = g.mul(f, c)?;
    let ig = g.mul(i, cand)?;
    let c_new = g.add(fc_, ig)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub prefix: String,
    pub din: usize,
    pub dh: usize,
}

impl LstmLayer {
    const GATES: [&'static str; 4] = ["i", "f", "g", "o"];

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        din: usize,
        dh: usize,
        rng: &mut R,
    ) -> Result<Self> {
        for gname in Self::GATES {
            store.insert(format!("{prefix}.w_{gname}"), Tensor::uniform(&[din, dh], glorot(din, dh), rng))?;
            store.insert(format!("{prefix}.u_{gname}"), Tensor::uniform(&[dh, dh], glorot(dh, dh), rng))?;
            // forget-gate bias starts at 1
            let b = if gname == "f" { Tensor::filled(&[dh], 1.0) } else { Tensor::zeros(&[dh]) };
            store.insert(format!("{prefix}.b_{gname}"), b)?;
        }
        Ok(Self::describe(prefix, din, dh))
    }

    pub fn describe(prefix: &str, din: usize, dh: usize) -> Self {
        LstmLayer {
            prefix: prefix.to_string(),
            din,
            dh,
        }
    }

    pub fn bind(&self, g: &mut Graph<'_>) -> Result<LstmParams> {
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for gname in Self::GATES {
            w.push(g.param(&format!("{}.w_{gname}", self.prefix))?);
            u.push(g.param(&format!("{}.u_{gname}", self.prefix))?);
            b.push(g.param(&format!("{}.b_{gname}", self.prefix))?);
        }
        Ok(LstmParams {
            w: [w[0], w[1], w[2], w[3]],
            u: [u[0], u[1], u[2], u[3]],
            b: [b[0], b[1], b[2], b[3]],
        })
    }

    pub fn forward_seq(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.din {
            return Err(Error::shape("lstm", &s, &[self.din, self.dh]));
        }
        let p = self.bind(g)?;
        let mut h = g.constant(Tensor::zeros(&[s[0], self.dh]));
        let mut c = h;
        let mut outs = Vec::with_capacity(s[1]);
        for t in 0..s[1] {
            let xt = g.select_step(x, t)?;
            (h, c) = lstm_cell(g, xt, h, c, &p)?;
            outs.push(h);
        }
        g.stack_steps(&outs)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for gname in Self::GATES {
            v.push((format!("{}.w_{gname}", self.prefix), vec![self.din, self.dh]));
            v.push((format!("{}.u_{gname}", self.prefix), vec![self.dh, self.dh]));
            v.push((format!("{}.b_{gname}", self.prefix), vec![self.dh]));
        }
        v
    }
}

/// Causal dilated convolution layer on `[n, T, cin]`.
#[derive(Debug, Clone)]
pub struct CausalConv1d {
    pub w: String,
    pub b: String,
    pub kernel: usize,
    pub dilation: usize,
    pub cin: usize,
    pub cout: usize,
}

impl CausalConv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let l = Self::describe(prefix, cin, cout, kernel, dilation)?;
        let lim = glorot(kernel * cin, cout);
        store.insert(&l.w, Tensor::uniform(&[kernel, cin, cout], lim, rng))?;
        store.insert(&l.b, Tensor::zeros(&[cout]))?;
        Ok(l)
    }

    pub fn describe(prefix: &str, cin: usize, cout: usize, kernel: usize, dilation: usize) -> Result<Self> {
        if kernel == 0 || dilation == 0 {
            return Err(Error::invalid("causal conv needs kernel >= 1 and dilation >= 1"));
        }
        Ok(CausalConv1d {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            kernel,
            dilation,
            cin,
            cout,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(&self.w)?, g.param(&self.b)?);
        g.conv1d_causal(x, w, b, self.dilation)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            (self.w.clone(), vec![self.kernel, self.cin, self.cout]),
            (self.b.clone(), vec![self.cout]),
        ]
    }
}

/// `N_c` causal convolutions sharing dilation `2^(i-1)` for block `i >= 1`,
/// each followed by ReLU, plus a residual path (1×1 projection when the
/// channel count changes).
#[derive(Debug, Clone)]
pub struct TemporalBlock {
    pub convs: Vec<CausalConv1d>,
    pub proj: Option<Linear>,
}

impl TemporalBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        block_index: usize,
        layers: usize,
        kernel: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = Self::describe(prefix, block_index, layers, kernel, cin, cout)?;
        for c in &shape.convs {
            CausalConv1d::new(store, prefix_of(&c.w), c.cin, c.cout, c.kernel, c.dilation, rng)?;
        }
        if let Some(p) = &shape.proj {
            Linear::new(store, prefix_of(&p.w), cin, cout, rng)?;
        }
        Ok(shape)
    }

    pub fn describe(
        prefix: &str,
        block_index: usize,
        layers: usize,
        kernel: usize,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        if block_index == 0 || layers == 0 {
            return Err(Error::invalid("temporal blocks are numbered from 1 and need >= 1 layer"));
        }
        let dilation = 1usize << (block_index - 1);
        let convs = (0..layers)
            .map(|l| {
                let ci = if l == 0 { cin } else { cout };
                CausalConv1d::describe(&format!("{prefix}.conv{l}"), ci, cout, kernel, dilation)
            })
            .collect::<Result<Vec<_>>>()?;
        let proj = (cin != cout).then(|| Linear::describe(&format!("{prefix}.res"), cin, cout));
        Ok(TemporalBlock { convs, proj })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(g, h)?;
            h = g.relu(y);
        }
        let res = match &self.proj {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        g.add(h, res)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v: Vec<_> = self.convs.iter().flat_map(CausalConv1d::param_shapes).collect();
        if let Some(p) = &self.proj {
            v.extend(p.param_shapes());
        }
        v
    }
}

fn prefix_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(p, _)| p)
}

/// Stack of temporal blocks `1..=n_blocks` with fixed channel width.
#[derive(Debug, Clone)]
pub struct Tcn {
    pub blocks: Vec<TemporalBlock>,
}

impl Tcn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        cin: usize,
        channels: &[usize],
        layers: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut c_prev = cin;
        for (i, &c) in channels.iter().enumerate() {
            blocks.push(TemporalBlock::new(store, &format!("{prefix}.block{}", i + 1), i + 1, layers, kernel, c_prev, c, rng)?);
            c_prev = c;
        }
        Ok(Tcn { blocks })
    }

    pub fn describe(prefix: &str, cin: usize, channels: &[usize], layers: usize, kernel: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut c_prev = cin;
        for (i, &c) in channels.iter().enumerate() {
            blocks.push(TemporalBlock::describe(&format!("{prefix}.block{}", i + 1), i + 1, layers, kernel, c_prev, c)?);
            c_prev = c;
        }
        Ok(Tcn { blocks })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.blocks.iter().try_fold(x, |h, b| b.forward(g, h))
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.blocks.iter().flat_map(TemporalBlock::param_shapes).collect()
    }
}

/// Receptive field of `n_blocks` temporal blocks with `n_layers` convolutions
/// each and kernel `k`: `1 + N_c (k - 1) Σ_{i=1..N_b} 2^(i-1)`.
pub fn receptive_field(n_blocks: usize, n_layers: usize, kernel: usize) -> usize {
    let dil_sum: usize = (1..=n_blocks).map(|i| 1usize << (i - 1)).sum();
    1 + n_layers * (kernel - 1) * dil_sum
}

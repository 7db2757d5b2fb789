//! Residual connections that mix information along the time axis of a
//! `[N, T, P, C]` feature map, independently at every position `P`.

use gfk_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::nn::{Builder, GroupNorm, Init, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalKind {
    Conv,
    Ltae,
    Gru,
}

impl TemporalKind {
    pub fn parse(s: &str) -> Option<Option<Self>> {
        match s {
            "none" => Some(None),
            "conv" => Some(Some(Self::Conv)),
            "ltae" => Some(Some(Self::Ltae)),
            "gru" => Some(Some(Self::Gru)),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Conv => "conv",
            Self::Ltae => "ltae",
            Self::Gru => "gru",
        }
    }
}

fn default_heads() -> usize {
    4
}
fn default_kernel() -> usize {
    3
}
fn default_groups() -> usize {
    8
}
fn default_period() -> f64 {
    1000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalConfig {
    pub kind: TemporalKind,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// Positional-encoding width per head; defaults to `C / heads`.
    #[serde(default)]
    pub pe_dim: Option<usize>,
    #[serde(default = "default_period")]
    pub pe_period: f64,
}

impl TemporalConfig {
    pub fn new(kind: TemporalKind) -> Self {
        Self {
            kind,
            heads: default_heads(),
            kernel_size: default_kernel(),
            groups: default_groups(),
            pe_dim: None,
            pe_period: default_period(),
        }
    }

    /// Checks the config against a channel count.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if channels == 0 {
            return Err(config("temporal connection needs at least one channel"));
        }
        match self.kind {
            TemporalKind::Conv => {
                if self.kernel_size % 2 == 0 {
                    return Err(config(format!("temporal kernel_size {} must be odd", self.kernel_size)));
                }
                if self.groups == 0 || channels % self.groups != 0 {
                    return Err(config(format!(
                        "{channels} channels are not divisible into {} groups",
                        self.groups
                    )));
                }
            }
            TemporalKind::Ltae => {
                if self.heads == 0 || channels % self.heads != 0 {
                    return Err(config(format!(
                        "{channels} channels are not divisible by {} heads",
                        self.heads
                    )));
                }
                let d = channels / self.heads;
                if self.pe_dim.is_some_and(|p| p == 0 || p > d) {
                    return Err(config(format!("pe_dim must lie in 1..={d}")));
                }
                if self.pe_period <= 0.0 {
                    return Err(config("pe_period must be positive"));
                }
            }
            TemporalKind::Gru => {
                if channels % 2 != 0 {
                    return Err(config(format!("GRU connection needs an even channel count, got {channels}")));
                }
            }
        }
        Ok(())
    }
}

/// Shape of a temporal input, `[N, T, P, C]`.
fn dims(g: &Graph, x: Var) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [n, t, p, c] => Ok([n, t, p, c]),
        ref s => Err(crate::Error::Input(format!("temporal input must be [N,T,P,C], got {s:?}"))),
    }
}

#[derive(Clone, Debug)]
pub struct ConvConn {
    w: ParamId,
    b: ParamId,
    norm: GroupNorm,
    kernel: usize,
}

impl ConvConn {
    fn new(bld: &mut Builder, cfg: &TemporalConfig, c: usize) -> Self {
        let k = cfg.kernel_size;
        Self {
            w: bld.param("conv.weight", &[k, c, c], Init::Zeros),
            b: bld.param("conv.bias", &[c], Init::Zeros),
            norm: GroupNorm::new(bld, "norm", cfg.groups, c),
            kernel: k,
        }
    }

    /// Pre-activation `conv1d_over_T(x)`, shape `[N, T, P, C]`.
    pub fn conv(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        Ok(g.conv1d(x, w, Some(b), 1, self.kernel / 2)?)
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let [n, t, p, c] = dims(g, x)?;
        let y = self.conv(g, ps, x)?;
        // statistics per (sample, position) so positions stay independent
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[n * p, t, c])?;
        let y = self.norm.forward(g, ps, y)?;
        let y = g.silu(y);
        let y = g.reshape(y, &[n, p, t, c])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        Ok(g.add(x, y)?)
    }
}

#[derive(Clone, Debug)]
pub struct LtaeConn {
    wq: ParamId,
    wk: ParamId,
    mlp: Linear,
    alpha: ParamId,
    heads: usize,
    pe_dim: Option<usize>,
    period: f64,
}

/// Sinusoidal encoding of `pos` in `dim` channels.
pub fn positional_encoding(pos: f64, dim: usize, period: f64) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos / period.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl LtaeConn {
    fn new(bld: &mut Builder, cfg: &TemporalConfig, c: usize) -> Self {
        let h = cfg.heads;
        let d = c / h;
        Self {
            wq: bld.param("query.weight", &[h, d, d], Init::FanIn(d)),
            wk: bld.param("key.weight", &[h, d, d], Init::FanIn(d)),
            mlp: Linear::new(bld, "mlp", c, c, true),
            alpha: bld.param("alpha", &[1], Init::Zeros),
            heads: h,
            pe_dim: cfg.pe_dim,
            period: cfg.pe_period,
        }
    }

    fn encoding(&self, [n, t, p, c]: [usize; 4], dates: &[f64]) -> Result<Tensor> {
        if dates.len() != n * t {
            return Err(crate::Error::Input(format!(
                "expected {} dates for {n} series of length {t}, got {}",
                n * t,
                dates.len()
            )));
        }
        let d = c / self.heads;
        let pd = self.pe_dim.unwrap_or(d);
        let mut data = vec![0.0; n * t * p * c];
        for ni in 0..n {
            let d0 = dates[ni * t];
            for ti in 0..t {
                let pos = dates[ni * t + ti] - d0;
                let pe = positional_encoding(pos, pd, self.period);
                for pi in 0..p {
                    let base = ((ni * t + ti) * p + pi) * c;
                    for h in 0..self.heads {
                        data[base + h * d..base + h * d + pd].copy_from_slice(&pe);
                    }
                }
            }
        }
        Ok(Tensor::new(&[n, t, p, c], data)?)
    }

    /// Returns the output and the attention weights `[heads, N*P, T, T]`
    /// (query step, key step).
    pub fn forward_with_attention(&self, g: &mut Graph, ps: &ParamStore, x: Var, dates: &[f64]) -> Result<(Var, Var)> {
        let dm @ [n, t, p, c] = dims(g, x)?;
        let h = self.heads;
        let d = c / h;
        let pe = g.constant(self.encoding(dm, dates)?);
        let xin = g.add(x, pe)?;
        let xin = g.permute(xin, &[0, 2, 1, 3])?;
        let groups = g.reshape(xin, &[n * p * t, h, d])?;
        let groups = g.permute(groups, &[1, 0, 2])?;
        let wq = g.param(ps, self.wq);
        let wk = g.param(ps, self.wk);
        let q = g.bmm(groups, wq)?;
        let k = g.bmm(groups, wk)?;
        let q = g.reshape(q, &[h * n * p, t, d])?;
        let k = g.reshape(k, &[h * n * p, t, d])?;
        let v = g.reshape(groups, &[h * n * p, t, d])?;
        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.bmm(q, kt)?;
        let scores = g.mul_scalar(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let o = g.bmm(attn, v)?;
        let o = g.reshape(o, &[h, n * p * t, d])?;
        let o = g.permute(o, &[1, 0, 2])?;
        let o = g.reshape(o, &[n, p, t, c])?;
        let o = self.mlp.forward(g, ps, o)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let alpha = g.param(ps, self.alpha);
        let o = g.scale_by(o, alpha)?;
        let out = g.add(x, o)?;
        let attn = g.reshape(attn, &[h, n * p, t, t])?;
        Ok((out, attn))
    }

    pub fn alpha(&self) -> ParamId {
        self.alpha
    }
}

#[derive(Clone, Debug)]
struct GruDir {
    wi: ParamId,
    bi: ParamId,
    wh: ParamId,
    bh: ParamId,
}

impl GruDir {
    fn new(bld: &mut Builder, name: &str, h: usize) -> Self {
        bld.scoped(name, |b| Self {
            wi: b.param("weight_ih", &[h, 3 * h], Init::FanIn(h)),
            bi: b.param("bias_ih", &[3 * h], Init::FanIn(h)),
            wh: b.param("weight_hh", &[h, 3 * h], Init::FanIn(h)),
            bh: b.param("bias_hh", &[3 * h], Init::FanIn(h)),
        })
    }

    /// Runs over `xs[T, M, H]` in the given step order; returns hidden states
    /// indexed by time step (not by visiting order).
    fn run(&self, g: &mut Graph, ps: &ParamStore, xs: Var, reverse: bool) -> Result<Vec<Var>> {
        let [t, m, h] = match *g.shape(xs) {
            [t, m, h] => [t, m, h],
            ref s => return Err(crate::Error::Input(format!("bad GRU input {s:?}"))),
        };
        let wi = g.param(ps, self.wi);
        let bi = g.param(ps, self.bi);
        let wh = g.param(ps, self.wh);
        let bh = g.param(ps, self.bh);
        let gi_all = g.linear(xs, wi, Some(bi))?;
        let mut hidden = g.constant(Tensor::zeros(&[m, h]));
        let mut states = vec![hidden; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let gi = g.slice(gi_all, 0, step, 1)?;
            let gi = g.reshape(gi, &[m, 3 * h])?;
            let gh = g.linear(hidden, wh, Some(bh))?;
            let ir = g.slice(gi, 1, 0, h)?;
            let iz = g.slice(gi, 1, h, h)?;
            let inn = g.slice(gi, 1, 2 * h, h)?;
            let hr = g.slice(gh, 1, 0, h)?;
            let hz = g.slice(gh, 1, h, h)?;
            let hn = g.slice(gh, 1, 2 * h, h)?;
            let r = g.add(ir, hr)?;
            let r = g.sigmoid(r);
            let z = g.add(iz, hz)?;
            let z = g.sigmoid(z);
            let rn = g.mul(r, hn)?;
            let nn = g.add(inn, rn)?;
            let nn = g.tanh(nn);
            // h' = n + z * (h - n)
            let diff = g.sub(hidden, nn)?;
            let zd = g.mul(z, diff)?;
            hidden = g.add(nn, zd)?;
            states[step] = hidden;
        }
        Ok(states)
    }
}

#[derive(Clone, Debug)]
pub struct GruConn {
    mlp_in: Linear,
    fwd: GruDir,
    bwd: GruDir,
    mlp_out: Linear,
}

impl GruConn {
    fn new(bld: &mut Builder, c: usize) -> Self {
        let h = c / 2;
        Self {
            mlp_in: Linear::new(bld, "mlp_in", c, h, true),
            fwd: GruDir::new(bld, "gru_fwd", h),
            bwd: GruDir::new(bld, "gru_bwd", h),
            mlp_out: Linear::zeros(bld, "mlp_out", 2 * h, c),
        }
    }

    /// Hidden states of both directions, each `[T, N*P, C/2]`.
    pub fn directions(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let [n, t, p, _] = dims(g, x)?;
        let hsz = self.mlp_in.fan_out;
        let hx = self.mlp_in.forward(g, ps, x)?;
        let hx = g.permute(hx, &[1, 0, 2, 3])?;
        let hx = g.reshape(hx, &[t, n * p, hsz])?;
        let stack = |g: &mut Graph, states: Vec<Var>| -> Result<Var> {
            let rows: Vec<Var> = states
                .into_iter()
                .map(|s| g.reshape(s, &[1, n * p, hsz]))
                .collect::<std::result::Result<_, _>>()?;
            Ok(g.concat(&rows, 0)?)
        };
        let f = self.fwd.run(g, ps, hx, false)?;
        let b = self.bwd.run(g, ps, hx, true)?;
        Ok((stack(g, f)?, stack(g, b)?))
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let [n, t, p, c] = dims(g, x)?;
        let (f, b) = self.directions(g, ps, x)?;
        let both = g.concat(&[f, b], 2)?;
        let y = self.mlp_out.forward(g, ps, both)?;
        let y = g.reshape(y, &[t, n, p, c])?;
        let y = g.permute(y, &[1, 0, 2, 3])?;
        Ok(g.add(x, y)?)
    }
}

#[derive(Clone, Debug)]
pub enum TemporalBlock {
    Conv(ConvConn),
    Ltae(LtaeConn),
    Gru(GruConn),
}

impl TemporalBlock {
    pub fn new(bld: &mut Builder, name: &str, cfg: &TemporalConfig, channels: usize) -> Result<Self> {
        cfg.validate(channels)?;
        Ok(bld.scoped(name, |b| match cfg.kind {
            TemporalKind::Conv => Self::Conv(ConvConn::new(b, cfg, channels)),
            TemporalKind::Ltae => Self::Ltae(LtaeConn::new(b, cfg, channels)),
            TemporalKind::Gru => Self::Gru(GruConn::new(b, channels)),
        }))
    }

    /// `x` is `[N, T, P, C]`; `dates` holds `N*T` acquisition days (row-major by series).
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, dates: &[f64]) -> Result<Var> {
        match self {
            Self::Conv(m) => m.forward(g, ps, x),
            Self::Ltae(m) => Ok(m.forward_with_attention(g, ps, x, dates)?.0),
            Self::Gru(m) => m.forward(g, ps, x),
        }
    }
}

/// Multiply-accumulates of one connection forward pass on `[N, T, P, C]`.
pub fn temporal_macs(cfg: &TemporalConfig, n: usize, t: usize, p: usize, c: usize) -> u64 {
    let rows = (n * t * p) as u64;
    let c64 = c as u64;
    match cfg.kind {
        TemporalKind::Conv => rows * cfg.kernel_size as u64 * c64 * c64,
        TemporalKind::Ltae => {
            let h = cfg.heads as u64;
            let d = c64 / h;
            let series = (n * p) as u64 * h;
            let t64 = t as u64;
            // q/k projections, scores, weighted values, output mlp
            2 * rows * h * d * d + 2 * series * t64 * t64 * d + rows * c64 * c64
        }
        TemporalKind::Gru => {
            let hh = c64 / 2;
            // mlp_in, input and hidden gates of both directions, mlp_out
            rows * c64 * hh + 2 * (2 * rows * hh * 3 * hh) + rows * 2 * hh * c64
        }
    }
}

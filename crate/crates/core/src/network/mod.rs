//! Hierarchical windowed-attention encoder with a light convolutional decoder.
//!
//! Frames of a series share every spatial layer; the temporal connections
//! are the only place where frames exchange information. Internally feature
//! maps are `[N*T, H, W, C]`, which is the same memory as `[N, T, H*W, C]`.

mod accounting;
mod config;

pub use accounting::{added_temporal_params, flops_estimate, param_count};
pub use config::ModelConfig;

use gfk_autodiff::{Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, GroupNorm, LayerNorm, Linear};
use crate::temporal::TemporalBlock;

pub(crate) fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Debug)]
struct SwinBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    window: usize,
    shift: usize,
}

impl SwinBlock {
    fn new(b: &mut Builder, cfg: &ModelConfig, c: usize, stage: usize, index: usize) -> Self {
        let window = cfg.window_at(stage);
        let shift = if index % 2 == 1 && window < cfg.resolution(stage) { window / 2 } else { 0 };
        let hidden = cfg.mlp_hidden(c);
        Self {
            norm1: LayerNorm::new(b, "norm1", c),
            qkv: Linear::new(b, "attn.qkv", c, 3 * c, true),
            proj: Linear::new(b, "attn.proj", c, c, true),
            norm2: LayerNorm::new(b, "norm2", c),
            fc1: Linear::new(b, "mlp.fc1", c, hidden, true),
            fc2: Linear::new(b, "mlp.fc2", hidden, c, true),
            heads: cfg.heads_at(c),
            window,
            shift,
        }
    }

    fn attention(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let [b, h, w, c] = dims4(g, x)?;
        let ws = self.window;
        let (nh, nw) = (h / ws, w / ws);
        let heads = self.heads;
        let hd = c / heads;
        let s = self.shift as isize;
        let mut x = x;
        if s > 0 {
            x = g.roll(x, 1, -s)?;
            x = g.roll(x, 2, -s)?;
        }
        let x = g.reshape(x, &[b, nh, ws, nw, ws, c])?;
        let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
        let bw = b * nh * nw;
        let tokens = ws * ws;
        let x = g.reshape(x, &[bw, tokens, c])?;
        let qkv = self.qkv.forward(g, ps, x)?;
        let qkv = g.reshape(qkv, &[bw, tokens, 3, heads, hd])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3, bw * heads, tokens, hd])?;
        let part = |g: &mut Graph, i: usize| -> Result<Var> {
            let v = g.slice(qkv, 0, i, 1)?;
            Ok(g.reshape(v, &[bw * heads, tokens, hd])?)
        };
        let q = part(g, 0)?;
        let k = part(g, 1)?;
        let v = part(g, 2)?;
        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.bmm(q, kt)?;
        let scores = g.mul_scalar(scores, 1.0 / (hd as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let o = g.bmm(attn, v)?;
        let o = g.reshape(o, &[bw, heads, tokens, hd])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[bw, tokens, c])?;
        let o = self.proj.forward(g, ps, o)?;
        let o = g.reshape(o, &[b, nh, nw, ws, ws, c])?;
        let o = g.permute(o, &[0, 1, 3, 2, 4, 5])?;
        let mut o = g.reshape(o, &[b, h, w, c])?;
        if s > 0 {
            o = g.roll(o, 1, s)?;
            o = g.roll(o, 2, s)?;
        }
        Ok(o)
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, ps, x)?;
        let a = self.attention(g, ps, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, ps, x)?;
        let h = self.fc1.forward(g, ps, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, ps, h)?;
        Ok(g.add(x, h)?)
    }
}

#[derive(Clone, Debug)]
struct PatchMerge {
    norm: LayerNorm,
    reduce: Linear,
}

impl PatchMerge {
    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let [b, h, w, c] = dims4(g, x)?;
        let x = g.reshape(x, &[b, h / 2, 2, w / 2, 2, c])?;
        let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
        let x = g.reshape(x, &[b, h / 2, w / 2, 4 * c])?;
        let x = self.norm.forward(g, ps, x)?;
        self.reduce.forward(g, ps, x)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &mut Builder, cfg: &ModelConfig, cin: usize, cout: usize) -> Self {
        Self {
            norm1: GroupNorm::new(b, "norm1", gcd(cin, cfg.norm_groups), cin),
            conv1: Conv2d::new(b, "conv1", cin, cout, 3, 1, 1),
            norm2: GroupNorm::new(b, "norm2", gcd(cout, cfg.norm_groups), cout),
            conv2: Conv2d::new(b, "conv2", cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| Conv2d::new(b, "skip", cin, cout, 1, 1, 0)),
        }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, ps, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, ps, h)?;
        let h = self.norm2.forward(g, ps, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, ps, h)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(g, ps, x)?,
            None => x,
        };
        Ok(g.add(s, h)?)
    }
}

#[derive(Clone, Debug)]
struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    fn new(b: &mut Builder, c: usize) -> Self {
        Self {
            conv: Conv2d::new(b, "conv", c, c, 3, 1, 1),
        }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let x = g.upsample2x(x)?;
        self.conv.forward(g, ps, x)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    merge: Option<PatchMerge>,
    blocks: Vec<SwinBlock>,
    temporal: Vec<TemporalBlock>,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Option<Upsample>,
    res: ResBlock,
    temporal: Option<TemporalBlock>,
}

#[derive(Clone, Debug)]
struct Layers {
    embed: Conv2d,
    embed_norm: LayerNorm,
    stages: Vec<Stage>,
    /// Coarsest level first.
    decoder: Vec<DecoderLevel>,
    head_up: Vec<Upsample>,
    head_norm: GroupNorm,
    head: Conv2d,
}

impl Layers {
    fn build(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let enc = cfg.encoder_channels();
        let dec = cfg.decoder_channels();
        let l = cfg.stages();
        let embed = Conv2d::new(b, "patch_embed.proj", cfg.in_channels, enc[0], cfg.patch_size, cfg.patch_size, 0);
        let embed_norm = LayerNorm::new(b, "patch_embed.norm", enc[0]);
        let mut stages = Vec::with_capacity(l);
        for s in 0..l {
            let stage = b.scoped(format!("encoder.{s}"), |b| -> Result<Stage> {
                let c = enc[s];
                let merge = (s > 0).then(|| PatchMerge {
                    norm: LayerNorm::new(b, "merge.norm", 4 * enc[s - 1]),
                    reduce: Linear::new(b, "merge.reduce", 4 * enc[s - 1], c, false),
                });
                let mut blocks = Vec::new();
                let mut temporal = Vec::new();
                for i in 0..cfg.depths[s] {
                    blocks.push(b.scoped(format!("block.{i}"), |b| SwinBlock::new(b, cfg, c, s, i)));
                    if let (Some(t), true) = (&cfg.temporal, cfg.has_temporal_at(s)) {
                        temporal.push(TemporalBlock::new(b, &format!("temporal.{i}"), t, c)?);
                    }
                }
                Ok(Stage {
                    merge,
                    blocks,
                    temporal,
                })
            })?;
            stages.push(stage);
        }
        let mut decoder = Vec::with_capacity(l);
        for s in (0..l).rev() {
            let level = b.scoped(format!("decoder.{s}"), |b| -> Result<DecoderLevel> {
                let (up, cin) = if s == l - 1 {
                    (None, enc[s])
                } else {
                    let up = b.scoped("up", |b| Upsample::new(b, dec[s + 1]));
                    (Some(up), dec[s + 1] + enc[s])
                };
                let res = b.scoped("res", |b| ResBlock::new(b, cfg, cin, dec[s]));
                let temporal = match &cfg.temporal {
                    Some(t) if cfg.decoder_temporal() && cfg.has_temporal_at(s) => {
                        Some(TemporalBlock::new(b, "temporal", t, dec[s])?)
                    }
                    _ => None,
                };
                Ok(DecoderLevel { up, res, temporal })
            })?;
            decoder.push(level);
        }
        let ups = cfg.patch_size.trailing_zeros() as usize;
        let head_up = (0..ups)
            .map(|i| b.scoped(format!("head.up.{i}"), |b| Upsample::new(b, dec[0])))
            .collect();
        let head_norm = GroupNorm::new(b, "head.norm", gcd(dec[0], cfg.norm_groups), dec[0]);
        let head = Conv2d::new(b, "head.conv", dec[0], cfg.num_classes, 3, 1, 1);
        Ok(Self {
            embed,
            embed_norm,
            stages,
            decoder,
            head_up,
            head_norm,
            head,
        })
    }
}

fn dims4(g: &Graph, x: Var) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::Input(format!("expected a rank-4 feature map, got {s:?}"))),
    }
}

/// Applies a temporal connection to `[N*T, H, W, C]` features.
fn temporal_apply(
    g: &mut Graph,
    ps: &ParamStore,
    block: &TemporalBlock,
    x: Var,
    n: usize,
    t: usize,
    dates: &[f64],
) -> Result<Var> {
    let [bt, h, w, c] = dims4(g, x)?;
    debug_assert_eq!(bt, n * t);
    let y = g.reshape(x, &[n, t, h * w, c])?;
    let y = block.forward(g, ps, y, dates)?;
    Ok(g.reshape(y, &[bt, h, w, c])?)
}

/// Model parameters with their architecture.
#[derive(Clone, Debug)]
pub struct Network {
    cfg: ModelConfig,
    layers: Layers,
    pub params: ParamStore,
}

impl Network {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(cfg.seed);
        let layers = Layers::build(&mut b, cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            params: b.finish(),
        })
    }

    pub(crate) fn count_params(cfg: &ModelConfig) -> Result<usize> {
        cfg.validate()?;
        let mut b = Builder::counting();
        Layers::build(&mut b, cfg)?;
        Ok(b.count())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Replaces parameter values with those of a loaded checkpoint.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Input(format!(
                "checkpoint holds {} tensors, model has {}",
                store.len(),
                self.params.len()
            )));
        }
        self.params.load_values_from(store).map_err(Error::Input)
    }

    /// `images` is `[N, T, C_in, S, S]` with `S == context`; `dates` has
    /// `N*T` entries. Returns logits `[N, T, classes, S, S]`.
    pub fn forward(&self, g: &mut Graph, images: Var, dates: &[f64]) -> Result<Var> {
        self.forward_with(g, &self.params, images, dates)
    }

    /// [`Network::forward`] with parameter values taken from `ps`, which must
    /// have this network's layout.
    pub fn forward_with(&self, g: &mut Graph, ps: &ParamStore, images: Var, dates: &[f64]) -> Result<Var> {
        let cfg = &self.cfg;
        if ps.len() != self.params.len() {
            return Err(Error::Input(format!("store holds {} tensors, model has {}", ps.len(), self.params.len())));
        }
        let [n, t, cin, hh, ww] = match *g.shape(images) {
            [n, t, c, h, w] => [n, t, c, h, w],
            ref s => return Err(Error::Input(format!("expected images [N,T,C,H,W], got {s:?}"))),
        };
        if hh != ww || hh != cfg.context || cin != cfg.in_channels {
            return Err(Error::Input(format!(
                "expected {}x{} input with {} channel(s), got {hh}x{ww} with {cin}",
                cfg.context, cfg.context, cfg.in_channels
            )));
        }
        if t == 0 || (cfg.temporal.is_none() && t != 1) {
            return Err(Error::Input(format!("series length {t} is not supported by this model")));
        }
        if dates.len() != n * t {
            return Err(Error::Input(format!("expected {} dates, got {}", n * t, dates.len())));
        }
        let bt = n * t;
        let x = if cin == 1 {
            g.reshape(images, &[bt, hh, ww, 1])?
        } else {
            let x = g.reshape(images, &[bt, cin, hh, ww])?;
            g.permute(x, &[0, 2, 3, 1])?
        };
        let x = self.layers.embed.forward(g, ps, x)?;
        let mut x = self.layers.embed_norm.forward(g, ps, x)?;
        let mut skips = Vec::with_capacity(cfg.stages());
        for stage in &self.layers.stages {
            if let Some(m) = &stage.merge {
                x = m.forward(g, ps, x)?;
            }
            for (i, blk) in stage.blocks.iter().enumerate() {
                x = blk.forward(g, ps, x)?;
                if let Some(tb) = stage.temporal.get(i) {
                    x = temporal_apply(g, ps, tb, x, n, t, dates)?;
                }
            }
            skips.push(x);
        }
        let mut y = *skips.last().unwrap();
        for (k, level) in self.layers.decoder.iter().enumerate() {
            let s = cfg.stages() - 1 - k;
            if let Some(up) = &level.up {
                let u = up.forward(g, ps, y)?;
                y = g.concat(&[u, skips[s]], 3)?;
            }
            y = level.res.forward(g, ps, y)?;
            if let Some(tb) = &level.temporal {
                y = temporal_apply(g, ps, tb, y, n, t, dates)?;
            }
        }
        for up in &self.layers.head_up {
            y = up.forward(g, ps, y)?;
        }
        let y = self.layers.head_norm.forward(g, ps, y)?;
        let y = g.silu(y);
        let y = self.layers.head.forward(g, ps, y)?;
        let k = cfg.num_classes;
        let y = g.reshape(y, &[n, t, hh, ww, k])?;
        Ok(g.permute(y, &[0, 1, 4, 2, 3])?)
    }

    /// Gradient-free forward returning the logits tensor.
    pub fn predict(&self, images: &Tensor, dates: &[f64]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, x, dates)?;
        Ok(g.value(y).clone())
    }
}

/// Centered spatial crop of `[N, T, K, H, W]` logits to `eval_crop`.
pub fn crop_for_eval(logits: &Tensor, eval_crop: usize) -> Result<Tensor> {
    let s = logits.shape();
    let [n, t, k, h, w] = match *s {
        [n, t, k, h, w] => [n, t, k, h, w],
        _ => return Err(Error::Input(format!("expected logits [N,T,K,H,W], got {s:?}"))),
    };
    let off = crop_offset(h, eval_crop)?;
    if crop_offset(w, eval_crop)? != off {
        return Err(Error::Input("crop needs square logits".into()));
    }
    let src = logits.data();
    let mut out = Vec::with_capacity(n * t * k * eval_crop * eval_crop);
    for plane in 0..n * t * k {
        for y in off..off + eval_crop {
            let row = (plane * h + y) * w;
            out.extend_from_slice(&src[row + off..row + off + eval_crop]);
        }
    }
    Ok(Tensor::new(&[n, t, k, eval_crop, eval_crop], out)?)
}

/// First retained row/column of a centered `crop` out of `side`.
pub fn crop_offset(side: usize, crop: usize) -> Result<usize> {
    if crop > side || (side - crop) % 2 != 0 {
        return Err(Error::Input(format!("cannot center a {crop} crop in {side}")));
    }
    Ok((side - crop) / 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_rows() {
        assert_eq!(crop_offset(512, 256).unwrap(), 128);
        assert_eq!(crop_offset(128, 64).unwrap(), 32);
        assert!(crop_offset(128, 63).is_err());
        let t = Tensor::from_fn(&[1, 1, 1, 8, 8], |i| i as f64);
        let c = crop_for_eval(&t, 4).unwrap();
        assert_eq!(c.data()[0], 18.0);
        assert_eq!(crop_for_eval(&t, 8).unwrap().data(), t.data());
    }
}

//! Parameter construction and the basic learned layers.

use gfk_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

/// Registers parameters either into a [`ParamStore`] or, in counting mode,
/// only tallies their sizes.
pub struct Builder {
    store: Option<ParamStore>,
    count: usize,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: Some(ParamStore::new()),
            count: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn counting() -> Self {
        Self {
            store: None,
            ..Self::new(0)
        }
    }

    pub fn scoped<R>(&mut self, name: impl AsRef<str>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.as_ref().to_owned());
        let r = f(self);
        self.prefix.pop();
        r
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        self.count += n;
        let Some(store) = &mut self.store else {
            return ParamId::from_index(0);
        };
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        store.add(full, Tensor::new(shape, data).expect("shape/data agree"))
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// The populated store; empty in counting mode.
    pub fn finish(self) -> ParamStore {
        self.store.unwrap_or_default()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        b.scoped(name, |b| Self {
            w: b.param("weight", &[fan_in, fan_out], Init::FanIn(fan_in)),
            b: bias.then(|| b.param("bias", &[fan_out], Init::FanIn(fan_in))),
            fan_in,
            fan_out,
        })
    }

    pub fn zeros(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        b.scoped(name, |b| Self {
            w: b.param("weight", &[fan_in, fan_out], Init::Zeros),
            b: Some(b.param("bias", &[fan_out], Init::Zeros)),
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = self.b.map(|b| g.param(ps, b));
        Ok(g.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        b.scoped(name, |b| Self {
            gamma: b.param("weight", &[channels], Init::Ones),
            beta: b.param("bias", &[channels], Init::Zeros),
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let gm = g.param(ps, self.gamma);
        let bt = g.param(ps, self.beta);
        Ok(g.layer_norm(x, Some(gm), Some(bt), 1e-5)?)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    gamma: ParamId,
    beta: ParamId,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, name: &str, groups: usize, channels: usize) -> Self {
        b.scoped(name, |b| Self {
            groups,
            gamma: b.param("weight", &[channels], Init::Ones),
            beta: b.param("bias", &[channels], Init::Zeros),
        })
    }

    /// `x` is `[N, ..., C]`; statistics are per leading index.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let gm = g.param(ps, self.gamma);
        let bt = g.param(ps, self.beta);
        Ok(g.group_norm(x, self.groups, Some(gm), Some(bt), 1e-5)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let fan_in = kernel * kernel * cin;
        b.scoped(name, |b| Self {
            w: b.param("weight", &[kernel, kernel, cin, cout], Init::FanIn(fan_in)),
            b: b.param("bias", &[cout], Init::FanIn(fan_in)),
            stride,
            pad,
            kernel,
            cin,
            cout,
        })
    }

    /// `x` is `[B, H, W, Cin]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        Ok(g.conv2d(x, w, Some(b), self.stride, self.pad)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_matches_allocation() {
        let build = |b: &mut Builder| {
            Linear::new(b, "fc", 5, 7, true);
            b.scoped("blk", |b| Conv2d::new(b, "conv", 3, 4, 3, 1, 1));
            LayerNorm::new(b, "ln", 7);
        };
        let mut real = Builder::new(3);
        build(&mut real);
        let mut count = Builder::counting();
        build(&mut count);
        assert_eq!(real.count(), count.count());
        let store = real.finish();
        assert_eq!(store.num_scalars(), count.count());
        assert!(store.find("blk.conv.weight").is_some());
    }
}

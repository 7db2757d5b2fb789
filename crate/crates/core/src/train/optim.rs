//! Plain SGD with optional momentum and a reduce-on-plateau schedule.

use gfk_autodiff::ParamStore;
use serde::{Deserialize, Serialize};

/// Summed gradients, one slot per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct Grads(pub Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn zeros(n: usize) -> Self {
        Self(vec![None; n])
    }

    pub fn add(&mut self, idx: usize, g: &[f64]) {
        match &mut self.0[idx] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.0.iter().enumerate() {
            if let Some(g) = g {
                self.add(i, g);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.0.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `theta -= lr * v` with `v = momentum * v + grad`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        if self.velocity.len() != grads.0.len() {
            self.velocity = vec![None; grads.0.len()];
        }
        for (id, g) in params.ids().zip(&grads.0) {
            let Some(g) = g else { continue };
            if !params.is_trainable(id) {
                continue;
            }
            let upd: &[f64] = if self.momentum > 0.0 {
                let v = self.velocity[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = self.momentum * *vi + gi;
                }
                v
            } else {
                g
            };
            let lr = self.lr;
            for (p, u) in params.get_mut(id).data_mut().iter_mut().zip(upd) {
                *p -= lr * u;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    /// Epochs without improvement that trigger a reduction.
    pub patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.66,
            patience: 10,
        }
    }
}

/// Monitors a metric where lower is better.
#[derive(Clone, Debug)]
pub struct ReduceOnPlateau {
    initial_lr: f64,
    cfg: PlateauConfig,
    best: f64,
    bad_epochs: usize,
    reductions: i32,
}

impl ReduceOnPlateau {
    pub fn new(initial_lr: f64, cfg: PlateauConfig) -> Self {
        Self {
            initial_lr,
            cfg,
            best: f64::INFINITY,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.initial_lr * self.cfg.factor.powi(self.reductions)
    }

    pub fn reductions(&self) -> i32 {
        self.reductions
    }

    /// Records one epoch's metric and returns the learning rate for the next.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg.patience {
                self.reductions += 1;
                self.bad_epochs = 0;
            }
        }
        self.lr()
    }
}

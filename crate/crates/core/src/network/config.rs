use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::temporal::{TemporalConfig, TemporalKind};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub depths: Vec<usize>,
    pub patch_size: usize,
    pub window_size: usize,
    pub head_dim: usize,
    pub mlp_ratio: f64,
    pub in_channels: usize,
    pub num_classes: usize,
    pub temporal: Option<TemporalConfig>,
    pub temporal_stages: Vec<usize>,
    /// Also place connections after decoder ResBlocks; defaults to true for Conv only.
    pub temporal_in_decoder: Option<bool>,
    /// Decoder width is encoder width divided by this, rounded to `channel_align`.
    pub decoder_divisor: usize,
    pub channel_align: usize,
    pub norm_groups: usize,
    pub context: usize,
    pub eval_crop: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-size setup: 512 px context, 96 base channels.
    pub fn full() -> Self {
        Self {
            base_channels: 96,
            channel_mult: vec![1, 2, 4, 8],
            depths: vec![2, 2, 6, 2],
            patch_size: 4,
            window_size: 8,
            head_dim: 32,
            mlp_ratio: 4.0,
            in_channels: 1,
            num_classes: 4,
            temporal: None,
            temporal_stages: vec![1, 2, 3],
            temporal_in_decoder: None,
            decoder_divisor: 3,
            channel_align: 8,
            norm_groups: 8,
            context: 512,
            eval_crop: 256,
            frames: 1,
            seed: 0,
        }
    }

    /// Laptop-size setup: 128 px context, 16 base channels.
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            depths: vec![1, 1, 2, 1],
            window_size: 4,
            head_dim: 8,
            mlp_ratio: 2.0,
            context: 128,
            eval_crop: 64,
            ..Self::full()
        }
    }

    /// Two-stage toy network on 16 px inputs, for tests.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            channel_mult: vec![1, 2],
            depths: vec![1, 2],
            patch_size: 2,
            window_size: 2,
            head_dim: 4,
            mlp_ratio: 2.0,
            temporal_stages: vec![0, 1],
            channel_align: 4,
            norm_groups: 4,
            context: 16,
            eval_crop: 8,
            ..Self::full()
        }
    }

    pub fn with_temporal(mut self, kind: Option<TemporalKind>, frames: usize) -> Self {
        self.temporal = kind.map(TemporalConfig::new);
        self.frames = frames;
        self
    }

    pub fn stages(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn encoder_channels(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn decoder_channels(&self) -> Vec<usize> {
        let a = self.channel_align.max(1);
        self.encoder_channels()
            .iter()
            .map(|&c| {
                let target = c as f64 / self.decoder_divisor.max(1) as f64;
                (((target / a as f64).round() as usize) * a).max(a)
            })
            .collect()
    }

    /// Side length of the feature map at `stage`.
    pub fn resolution(&self, stage: usize) -> usize {
        self.context / self.patch_size / (1 << stage)
    }

    pub fn window_at(&self, stage: usize) -> usize {
        self.window_size.min(self.resolution(stage))
    }

    pub fn heads_at(&self, channels: usize) -> usize {
        (channels / self.head_dim.max(1)).max(1)
    }

    pub fn mlp_hidden(&self, channels: usize) -> usize {
        ((channels as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn decoder_temporal(&self) -> bool {
        match &self.temporal {
            None => false,
            Some(t) => self.temporal_in_decoder.unwrap_or(t.kind == TemporalKind::Conv),
        }
    }

    pub fn has_temporal_at(&self, stage: usize) -> bool {
        self.temporal.is_some() && self.temporal_stages.contains(&stage)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.stages();
        if l == 0 || self.base_channels == 0 || self.channel_mult.contains(&0) {
            return Err(config("channel_mult must be a non-empty list of positive ints"));
        }
        if self.depths.len() != l {
            return Err(config(format!("{} depths for {l} stages", self.depths.len())));
        }
        if !self.patch_size.is_power_of_two() {
            return Err(config("patch_size must be a power of two"));
        }
        let tile = self.patch_size << (l - 1);
        if self.context == 0 || self.context % tile != 0 {
            return Err(config(format!("context {} is not divisible by {tile}", self.context)));
        }
        if self.eval_crop == 0 || self.eval_crop > self.context || self.context % 2 != 0 || self.eval_crop % 2 != 0 {
            return Err(config(format!(
                "eval_crop {} and context {} must be even with eval_crop <= context",
                self.eval_crop, self.context
            )));
        }
        if self.num_classes < 2 || self.in_channels == 0 || self.window_size == 0 || self.mlp_ratio <= 0.0 {
            return Err(config("num_classes, in_channels, window_size and mlp_ratio must be positive"));
        }
        if self.frames == 0 {
            return Err(config("frames must be at least 1"));
        }
        if self.temporal.is_none() && self.frames != 1 {
            return Err(config("a model without temporal connections takes single frames"));
        }
        for (s, &c) in self.encoder_channels().iter().enumerate() {
            let ws = self.window_at(s);
            if self.resolution(s) % ws != 0 {
                return Err(config(format!("stage {s}: window {ws} does not tile {}", self.resolution(s))));
            }
            if c % self.heads_at(c) != 0 {
                return Err(config(format!("stage {s}: {c} channels not divisible into heads")));
            }
        }
        for &s in &self.temporal_stages {
            if s >= l {
                return Err(config(format!("temporal stage {s} out of range")));
            }
        }
        if let Some(t) = &self.temporal {
            let enc = self.encoder_channels();
            let dec = self.decoder_channels();
            for &s in &self.temporal_stages {
                t.validate(enc[s])?;
                if self.decoder_temporal() {
                    t.validate(dec[s])?;
                }
            }
        }
        if self.norm_groups == 0 {
            return Err(config("norm_groups must be positive"));
        }
        Ok(())
    }
}

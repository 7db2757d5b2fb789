//! Closed-form parameter and multiply-accumulate accounting.

use super::{ModelConfig, Network};
use crate::error::Result;
use crate::temporal::temporal_macs;

/// Number of learnable scalars.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Network::count_params(cfg)
}

/// Parameters added by the temporal connections.
pub fn added_temporal_params(cfg: &ModelConfig) -> Result<usize> {
    let mut mono = cfg.clone();
    mono.temporal = None;
    mono.frames = 1;
    Ok(param_count(cfg)? - param_count(&mono)?)
}

fn conv_macs(side: usize, k: usize, cin: usize, cout: usize) -> u64 {
    (side * side * k * k * cin * cout) as u64
}

/// Multiply-accumulates of one forward pass over a `cfg.frames` series,
/// divided by the series length.
pub fn flops_estimate(cfg: &ModelConfig) -> Result<f64> {
    cfg.validate()?;
    let t = cfg.frames;
    let enc = cfg.encoder_channels();
    let dec = cfg.decoder_channels();
    let l = cfg.stages();
    // everything except temporal connections is per frame
    let mut spatial = conv_macs(cfg.resolution(0), cfg.patch_size, cfg.in_channels, enc[0]);
    let mut temporal = 0u64;
    for s in 0..l {
        let r = cfg.resolution(s);
        let tokens = (r * r) as u64;
        let c = enc[s] as u64;
        if s > 0 {
            spatial += tokens * 4 * enc[s - 1] as u64 * c;
        }
        let ws = cfg.window_at(s) as u64;
        let m = cfg.mlp_hidden(enc[s]) as u64;
        for _ in 0..cfg.depths[s] {
            // qkv, q·k, attn·v, proj, mlp
            spatial += tokens * c * 3 * c + 2 * tokens * ws * ws * c + tokens * c * c + 2 * tokens * c * m;
            if let (Some(tc), true) = (&cfg.temporal, cfg.has_temporal_at(s)) {
                temporal += temporal_macs(tc, 1, t, r * r, enc[s]);
            }
        }
    }
    for s in (0..l).rev() {
        let r = cfg.resolution(s);
        let cin = if s == l - 1 {
            enc[s]
        } else {
            spatial += conv_macs(r, 3, dec[s + 1], dec[s + 1]);
            dec[s + 1] + enc[s]
        };
        spatial += conv_macs(r, 3, cin, dec[s]) + conv_macs(r, 3, dec[s], dec[s]);
        if cin != dec[s] {
            spatial += conv_macs(r, 1, cin, dec[s]);
        }
        if let (Some(tc), true) = (&cfg.temporal, cfg.decoder_temporal() && cfg.has_temporal_at(s)) {
            temporal += temporal_macs(tc, 1, t, r * r, dec[s]);
        }
    }
    let mut r = cfg.resolution(0);
    for _ in 0..cfg.patch_size.trailing_zeros() {
        r *= 2;
        spatial += conv_macs(r, 3, dec[0], dec[0]);
    }
    spatial += conv_macs(cfg.context, 3, dec[0], cfg.num_classes);
    Ok(spatial as f64 + temporal as f64 / t as f64)
}

//! Label-smoothed cross-entropy plus soft Dice over `[N, T, K, H, W]` logits.

use gfk_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::zones::ZoneMask;

/// Target distribution of one pixel: `1 - eps + eps/k` on the true class.
pub fn smoothed_targets(class: usize, num_classes: usize, eps: f64) -> Vec<f64> {
    let mut t = vec![eps / num_classes as f64; num_classes];
    t[class] += 1.0 - eps;
    t
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
}

/// One-hot targets laid out `[K, N*T*H*W]`, plus per-class pixel counts.
fn one_hot(targets: &[ZoneMask], k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let m: usize = targets.iter().map(|t| t.classes.len()).sum();
    let mut oh = vec![0.0; k * m];
    let mut counts = vec![0.0; k];
    let mut off = 0;
    for t in targets {
        for (i, &c) in t.classes.iter().enumerate() {
            let c = c as usize;
            if c >= k {
                return Err(Error::Input(format!("label {c} outside {k} classes")));
            }
            oh[c * m + off + i] = 1.0;
            counts[c] += 1.0;
        }
        off += t.classes.len();
    }
    Ok((oh, counts))
}

/// `logits` is `[N, T, K, H, W]`; `targets` holds the `N*T` masks in order.
pub fn segmentation_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[ZoneMask],
    label_smoothing: f64,
    dice_smooth: f64,
) -> Result<LossTerms> {
    let [n, t, k, h, w] = match *g.shape(logits) {
        [n, t, k, h, w] => [n, t, k, h, w],
        ref s => return Err(Error::Input(format!("expected logits [N,T,K,H,W], got {s:?}"))),
    };
    if targets.len() != n * t || targets.iter().any(|m| m.width != w || m.height != h) {
        return Err(Error::Input(format!(
            "{} target masks do not match logits of {n}x{t} frames at {w}x{h}",
            targets.len()
        )));
    }
    let (oh, counts) = one_hot(targets, k)?;
    let m = n * t * h * w;
    // class-major view of the logits: [K, N*T*H*W]
    let x = g.permute(logits, &[2, 0, 1, 3, 4])?;
    let x = g.reshape(x, &[k, m])?;

    let logp = g.log_softmax(x, 0)?;
    let eps = label_smoothing;
    let smooth: Vec<f64> = oh.iter().map(|&v| v * (1.0 - eps) + eps / k as f64).collect();
    let smooth = g.constant(Tensor::new(&[k, m], smooth)?);
    let ce = g.mul(logp, smooth)?;
    let ce = g.sum(ce);
    let ce = g.mul_scalar(ce, -1.0 / m as f64);

    let p = g.softmax(x, 0)?;
    let onehot = g.constant(Tensor::new(&[k, m], oh)?);
    let inter = g.mul(p, onehot)?;
    let inter = g.sum_axis(inter, 1)?;
    let num = g.mul_scalar(inter, 2.0);
    let num = g.add_scalar(num, dice_smooth);
    let psum = g.sum_axis(p, 1)?;
    let tsum: Vec<f64> = counts.iter().map(|c| c + dice_smooth).collect();
    let tsum = g.constant(Tensor::new(&[k], tsum)?);
    let den = g.add(psum, tsum)?;
    let ratio = g.div(num, den)?;
    let ratio = g.mean(ratio);
    let dice = g.mul_scalar(ratio, -1.0);
    let dice = g.add_scalar(dice, 1.0);

    let total = g.add(ce, dice)?;
    Ok(LossTerms { total, ce, dice })
}

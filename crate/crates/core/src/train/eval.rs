//! Series prediction and the scores used for checkpoint selection.

use gfk_autodiff::Tensor;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::front::extract_front;
use crate::metrics::{mde, ConfusionCounts, EvalItem, FrontDistance};
use crate::network::{crop_for_eval, crop_offset, Network};
use crate::synth::SitsSample;
use crate::zones::ZoneMask;

/// Frames fed to a mono-temporal model in one graph.
const MONO_CHUNK: usize = 8;

/// Network input `[1, T, 1, H, W]` in [0, 1] and the acquisition days.
pub fn series_input(s: &SitsSample) -> Result<(Tensor, Vec<f64>)> {
    let (w, h) = (s.width(), s.height());
    let mut data = Vec::with_capacity(s.len() * w * h);
    for f in &s.frames {
        data.extend(f.image.iter().map(|&v| v as f64 / 255.0));
    }
    let x = Tensor::new(&[1, s.len(), 1, h, w], data)?;
    Ok((x, s.frames.iter().map(|f| f.day as f64).collect()))
}

/// Logits `[L, K, H, W]` for every frame of a series. Multi-temporal models
/// see the whole series at once; mono-temporal ones one frame at a time.
pub fn series_logits(net: &Network, s: &SitsSample) -> Result<Tensor> {
    let (x, dates) = series_input(s)?;
    let (l, h, w) = (s.len(), s.height(), s.width());
    let k = net.config().num_classes;
    if net.config().temporal.is_some() {
        let y = net.predict(&x, &dates)?;
        return Ok(y.reshape(&[l, k, h, w])?);
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(l * k * plane);
    for start in (0..l).step_by(MONO_CHUNK) {
        let n = MONO_CHUNK.min(l - start);
        let xs = Tensor::new(&[n, 1, 1, h, w], x.data()[start * plane..(start + n) * plane].to_vec())?;
        let y = net.predict(&xs, &dates[start..start + n])?;
        out.extend_from_slice(y.data());
    }
    Ok(Tensor::new(&[l, k, h, w], out)?)
}

pub fn crop_mask(m: &ZoneMask, crop: usize) -> Result<ZoneMask> {
    let ox = crop_offset(m.width, crop)?;
    let oy = crop_offset(m.height, crop)?;
    let mut classes = Vec::with_capacity(crop * crop);
    for y in oy..oy + crop {
        classes.extend_from_slice(&m.classes[y * m.width + ox..y * m.width + ox + crop]);
    }
    ZoneMask::new(crop, crop, classes, m.resolution_m_per_px)
}

/// Arg-max masks of the centred `crop` of `[L, K, H, W]` logits.
pub fn predicted_masks(logits: &Tensor, crop: usize, resolution_m_per_px: f64) -> Result<Vec<ZoneMask>> {
    let [l, k, h, w] = match *logits.shape() {
        [l, k, h, w] => [l, k, h, w],
        ref s => return Err(Error::Input(format!("expected logits [L,K,H,W], got {s:?}"))),
    };
    let c = crop_for_eval(&logits.reshape(&[1, l, k, h, w])?, crop)?;
    let plane = crop * crop;
    let d = c.data();
    (0..l)
        .map(|t| {
            let classes = (0..plane)
                .map(|i| {
                    let mut best = 0;
                    for j in 1..k {
                        if d[(t * k + j) * plane + i] > d[(t * k + best) * plane + i] {
                            best = j;
                        }
                    }
                    best as u8
                })
                .collect();
            ZoneMask::new(crop, crop, classes, resolution_m_per_px)
        })
        .collect()
}

/// Evaluation items for one series, ground truth cropped like the predictions.
pub fn eval_items(s: &SitsSample, preds: &[ZoneMask], crop: usize) -> Result<Vec<EvalItem>> {
    if preds.len() != s.len() {
        return Err(Error::Input(format!("{} predictions for {} frames", preds.len(), s.len())));
    }
    let rock = crop_mask(&s.static_rock(), crop)?;
    s.frames
        .iter()
        .zip(preds)
        .map(|(f, p)| {
            let gt = crop_mask(&f.mask, crop)?;
            let gt_fronts = extract_front(&gt, None)?;
            let ma_fronts = extract_front(&gt, Some(&rock))?;
            Ok(EvalItem {
                gt,
                pred: p.clone(),
                gt_fronts,
                rock_mask: Some(rock.clone()),
                ma_fronts: Some(ma_fronts),
            })
        })
        .collect()
}

/// Predicts every series and builds its evaluation items.
pub fn evaluate_network(net: &Network, set: &[SitsSample]) -> Result<Vec<EvalItem>> {
    let crop = net.config().eval_crop;
    let per: Vec<Vec<EvalItem>> = set
        .iter()
        .map(|s| {
            let logits = series_logits(net, s)?;
            let preds = predicted_masks(&logits, crop, s.resolution_m_per_px)?;
            eval_items(s, &preds, crop)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    /// Mean distance with missing fronts counted as the image diagonal.
    pub mde_m: f64,
    pub miou: f64,
}

/// Checkpoint-selection score: unlike the report, images without a predicted
/// front are not dropped but charged the image diagonal.
pub fn selection_score(items: &[EvalItem]) -> Result<Selection> {
    if items.is_empty() {
        return Err(Error::Input("empty validation set".into()));
    }
    let per: Vec<(ConfusionCounts, f64)> = items
        .par_iter()
        .map(|it| -> Result<_> {
            let counts = ConfusionCounts::from_masks(&it.gt, &it.pred)?;
            let pred = extract_front(&it.pred, None)?;
            let res = it.gt.resolution_m_per_px;
            let diag = (it.gt.width as f64).hypot(it.gt.height as f64) * res;
            let d = match mde(&it.gt_fronts, &pred) {
                FrontDistance::Meters(m) => m,
                _ if it.gt_fronts.is_empty() && pred.is_empty() => 0.0,
                _ => diag,
            };
            Ok((counts, d))
        })
        .collect::<Result<_>>()?;
    let mut counts = ConfusionCounts::default();
    let mut total = 0.0;
    for (c, d) in &per {
        counts.merge(c);
        total += d;
    }
    Ok(Selection {
        mde_m: total / per.len() as f64,
        miou: counts.mean_iou(&crate::metrics::ALL_CLASSES),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_masks_of_crop() {
        // 1 frame, 2 classes, 4x4; class 1 wins on the right half
        let mut v = vec![0.0; 32];
        for y in 0..4 {
            for x in 2..4 {
                v[16 + y * 4 + x] = 1.0;
            }
        }
        let t = Tensor::new(&[1, 2, 4, 4], v).unwrap();
        let m = predicted_masks(&t, 2, 10.0).unwrap();
        assert_eq!(m[0].classes, vec![0, 1, 0, 1]);
        assert!(predicted_masks(&t, 3, 10.0).is_err());
    }

    #[test]
    fn mask_crop() {
        let m = ZoneMask::from_rows(&["0000", "0120", "0320", "0000"], 1.0).unwrap();
        assert_eq!(crop_mask(&m, 2).unwrap().classes, vec![1, 2, 3, 2]);
    }
}

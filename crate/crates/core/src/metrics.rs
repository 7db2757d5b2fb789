//! Zone IoU, mean distance error between fronts, and the dataset report.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::front::extract_front;
use crate::zones::{FrontSet, Point, ZoneMask, NUM_CLASSES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: [u64; NUM_CLASSES],
    pub fp: [u64; NUM_CLASSES],
    pub fn_: [u64; NUM_CLASSES],
}

impl ConfusionCounts {
    pub fn from_masks(gt: &ZoneMask, pred: &ZoneMask) -> Result<Self> {
        if !gt.same_dims(pred) {
            return Err(Error::Input(format!(
                "ground truth is {}x{}, prediction {}x{}",
                gt.width, gt.height, pred.width, pred.height
            )));
        }
        let mut c = Self::default();
        for (&g, &p) in gt.classes.iter().zip(&pred.classes) {
            let (g, p) = (g as usize, p as usize);
            if g == p {
                c.tp[g] += 1;
            } else {
                c.fn_[g] += 1;
                c.fp[p] += 1;
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Self) {
        for k in 0..NUM_CLASSES {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.fn_[k] += other.fn_[k];
        }
    }

    /// IoU of one class; 1 when the class is absent from both masks.
    pub fn iou(&self, class: usize) -> f64 {
        let denom = self.tp[class] + self.fp[class] + self.fn_[class];
        if denom == 0 {
            1.0
        } else {
            self.tp[class] as f64 / denom as f64
        }
    }

    pub fn mean_iou(&self, classes: &[u8]) -> f64 {
        classes.iter().map(|&c| self.iou(c as usize)).sum::<f64>() / classes.len() as f64
    }
}

pub const ALL_CLASSES: [u8; NUM_CLASSES] = [0, 1, 2, 3];

pub fn miou(gt: &ZoneMask, pred: &ZoneMask, classes: &[u8]) -> Result<f64> {
    if classes.is_empty() || classes.iter().any(|&c| c as usize >= NUM_CLASSES) {
        return Err(Error::Input(format!("invalid class set {classes:?}")));
    }
    Ok(ConfusionCounts::from_masks(gt, pred)?.mean_iou(classes))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrontDistance {
    Meters(f64),
    /// No front in the prediction.
    EmptyPrediction,
    /// A predicted front where the ground truth has none.
    EmptyGroundTruth,
}

fn nearest_sum(from: &[Point], to: &[Point]) -> f64 {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let dx = p[0] as f64 - q[0] as f64;
                    let dy = p[1] as f64 - q[1] as f64;
                    dx * dx + dy * dy
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum()
}

/// Symmetric mean nearest-point distance in pixels between two point sets.
pub fn mean_distance_px(p: &[Point], q: &[Point]) -> f64 {
    let a = nearest_sum(p, q);
    let b = nearest_sum(q, p);
    (a + b) / (p.len() + q.len()) as f64
}

/// Distance between the fronts of one image, points pooled over polylines.
pub fn mde(gt: &FrontSet, pred: &FrontSet) -> FrontDistance {
    let (p, q) = (gt.point_set(), pred.point_set());
    match (p.is_empty(), q.is_empty()) {
        (_, true) => FrontDistance::EmptyPrediction,
        (true, false) => FrontDistance::EmptyGroundTruth,
        _ => FrontDistance::Meters(mean_distance_px(&p, &q) * gt.resolution_m_per_px),
    }
}

/// One evaluated image.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub gt: ZoneMask,
    pub pred: ZoneMask,
    pub gt_fronts: FrontSet,
    /// Static rock overlay and its ground-truth fronts for the rock-masked variant.
    pub rock_mask: Option<ZoneMask>,
    pub ma_fronts: Option<FrontSet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub iou: [f64; NUM_CLASSES],
    pub iou_all: f64,
    pub mde_m: f64,
    pub mde_ma_m: f64,
    pub empty_count: usize,
    pub images: usize,
    pub images_evaluated: usize,
    /// Images whose ground truth has no front but the prediction does.
    pub flagged: usize,
}

pub const CSV_HEADER: &str = "run,mde_m,mde_ma_m,empty_count,iou_all,iou_na,iou_rock,iou_glacier,iou_oim";

impl Report {
    pub fn csv_row(&self, run: &str) -> String {
        format!(
            "{run},{:.6},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.mde_m,
            self.mde_ma_m,
            self.empty_count,
            self.iou_all,
            self.iou[0],
            self.iou[1],
            self.iou[2],
            self.iou[3]
        )
    }
}

struct PerImage {
    counts: ConfusionCounts,
    plain: FrontDistance,
    ma: Option<FrontDistance>,
}

fn mean_of(d: impl Iterator<Item = FrontDistance>) -> f64 {
    let (sum, n) = d.fold((0.0, 0usize), |(s, n), x| match x {
        FrontDistance::Meters(m) => (s + m, n + 1),
        _ => (s, n),
    });
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Pooled IoU, MDE over images with a detected front, and the empty count.
pub fn dataset_report(items: &[EvalItem]) -> Result<Report> {
    if items.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let per: Vec<PerImage> = items
        .par_iter()
        .map(|it| -> Result<PerImage> {
            let counts = ConfusionCounts::from_masks(&it.gt, &it.pred)?;
            let plain = mde(&it.gt_fronts, &extract_front(&it.pred, None)?);
            let ma = match &it.rock_mask {
                Some(rock) => {
                    let gt = it.ma_fronts.as_ref().unwrap_or(&it.gt_fronts);
                    Some(mde(gt, &extract_front(&it.pred, Some(rock))?))
                }
                None => None,
            };
            Ok(PerImage { counts, plain, ma })
        })
        .collect::<Result<_>>()?;
    let mut counts = ConfusionCounts::default();
    for p in &per {
        counts.merge(&p.counts);
    }
    let iou: [f64; NUM_CLASSES] = std::array::from_fn(|c| counts.iou(c));
    let empty_count = per
        .iter()
        .filter(|p| !matches!(p.plain, FrontDistance::Meters(_)))
        .count();
    let flagged = per.iter().filter(|p| p.plain == FrontDistance::EmptyGroundTruth).count();
    if flagged > 0 {
        log::warn!("{flagged} image(s) have a predicted front but none in the ground truth");
    }
    let has_ma = per.iter().any(|p| p.ma.is_some());
    Ok(Report {
        iou,
        iou_all: iou.iter().sum::<f64>() / NUM_CLASSES as f64,
        mde_m: mean_of(per.iter().map(|p| p.plain)),
        mde_ma_m: if has_ma { mean_of(per.iter().filter_map(|p| p.ma)) } else { f64::NAN },
        empty_count,
        images: items.len(),
        images_evaluated: per.iter().filter(|p| matches!(p.plain, FrontDistance::Meters(_))).count(),
        flagged,
    })
}

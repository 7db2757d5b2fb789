//! Training-time augmentation. Geometry is shared by every frame of a series;
//! photometric changes are drawn per frame and touch only the image.

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SitsSample;
use crate::zones::{flip_h, flip_v, rot90, ZoneMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: f64,
    pub rotate: f64,
    /// Random crop resized back to full size.
    pub zoom: f64,
    /// Smallest crop side as a fraction of the image.
    pub zoom_min: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
    pub mixup: f64,
    pub mixup_alpha: f64,
    pub cutmix: f64,
    pub erasure: f64,
    pub noise: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: 0.5,
            rotate: 0.5,
            zoom: 0.3,
            zoom_min: 0.7,
            brightness: 0.2,
            contrast: 0.2,
            gamma: 0.2,
            mixup: 0.1,
            mixup_alpha: 0.2,
            cutmix: 0.1,
            erasure: 0.1,
            noise: 0.2,
            noise_std: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: 0.0,
            rotate: 0.0,
            zoom: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            gamma: 0.0,
            mixup: 0.0,
            cutmix: 0.0,
            erasure: 0.0,
            noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = [
            self.flip,
            self.rotate,
            self.zoom,
            self.brightness,
            self.contrast,
            self.gamma,
            self.mixup,
            self.cutmix,
            self.erasure,
            self.noise,
        ];
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(self.zoom_min > 0.0 && self.zoom_min <= 1.0) || !(self.mixup_alpha > 0.0) || self.noise_std < 0.0 {
            return Err(Error::Config("zoom_min must lie in (0, 1], mixup_alpha > 0, noise_std >= 0".into()));
        }
        Ok(())
    }
}

/// Geometric transform applied to a whole series.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    FlipH,
    FlipV,
    /// Counter-clockwise quarter turns.
    Rot90(u8),
    /// Square crop at `(x, y)` of side `side`, resized back with nearest neighbour.
    Crop { x: usize, y: usize, side: usize },
}

/// Axis-aligned box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

fn resize_crop<T: Copy>(data: &[T], w: usize, x0: usize, y0: usize, side: usize, out_w: usize, out_h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let sy = y0 + y * side / out_h;
        for x in 0..out_w {
            let sx = x0 + x * side / out_w;
            out.push(data[sy * w + sx]);
        }
    }
    out
}

fn transform<T: Copy>(data: &[T], w: usize, h: usize, op: Geometry) -> (Vec<T>, usize, usize) {
    match op {
        Geometry::FlipH => (flip_h(data, w, h), w, h),
        Geometry::FlipV => (flip_v(data, w, h), w, h),
        Geometry::Rot90(k) => {
            let (mut d, mut w, mut h) = (data.to_vec(), w, h);
            for _ in 0..k % 4 {
                d = rot90(&d, w, h);
                std::mem::swap(&mut w, &mut h);
            }
            (d, w, h)
        }
        Geometry::Crop { x, y, side } => (resize_crop(data, w, x, y, side, w, h), w, h),
    }
}

/// Applies one geometric transform to every frame and mask of a series.
pub fn apply_geometry(s: &SitsSample, op: Geometry) -> Result<SitsSample> {
    let (w, h) = (s.width(), s.height());
    let mut res = s.resolution_m_per_px;
    if let Geometry::Crop { x, y, side } = op {
        if side == 0 || x + side > w || y + side > h || w != h {
            return Err(Error::Input(format!("crop {side} at ({x}, {y}) does not fit {w}x{h}")));
        }
        res *= side as f64 / w as f64;
    }
    let frames = s
        .frames
        .iter()
        .map(|f| {
            let (image, _, _) = transform(&f.image, w, h, op);
            let (classes, nw, nh) = transform(&f.mask.classes, w, h, op);
            let mut out = f.clone();
            out.image = image;
            out.mask = ZoneMask {
                width: nw,
                height: nh,
                classes,
                resolution_m_per_px: res,
            };
            out
        })
        .collect();
    Ok(SitsSample {
        glacier_id: s.glacier_id.clone(),
        frames,
        resolution_m_per_px: res,
    })
}

/// Copies images and masks of `donor` inside `rect` into every frame of `base`.
pub fn cutmix(base: &SitsSample, donor: &SitsSample, rect: Rect) -> Result<SitsSample> {
    check_pair(base, donor)?;
    let w = base.width();
    let mut out = base.clone();
    for (f, d) in out.frames.iter_mut().zip(&donor.frames) {
        for y in rect.y..(rect.y + rect.h).min(base.height()) {
            for x in rect.x..(rect.x + rect.w).min(w) {
                let i = y * w + x;
                f.image[i] = d.image[i];
                f.mask.classes[i] = d.mask.classes[i];
            }
        }
    }
    Ok(out)
}

/// Frame-wise blend `lambda * base + (1 - lambda) * donor`; labels stay those of `base`.
pub fn mixup(base: &SitsSample, donor: &SitsSample, lambda: f64) -> Result<SitsSample> {
    check_pair(base, donor)?;
    let mut out = base.clone();
    for (f, d) in out.frames.iter_mut().zip(&donor.frames) {
        for (a, &b) in f.image.iter_mut().zip(&d.image) {
            *a = quantize((lambda * *a as f64 + (1.0 - lambda) * b as f64) / 255.0);
        }
    }
    Ok(out)
}

fn check_pair(a: &SitsSample, b: &SitsSample) -> Result<()> {
    if a.len() != b.len() || a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Input("blended series need equal length and size".into()));
    }
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn random_rect(rng: &mut impl Rng, w: usize, h: usize, area: f64, aspect: f64) -> Rect {
    let rw = ((area * aspect).sqrt() * w as f64).round().clamp(1.0, w as f64) as usize;
    let rh = ((area / aspect).sqrt() * h as f64).round().clamp(1.0, h as f64) as usize;
    Rect {
        x: rng.random_range(0..=w - rw),
        y: rng.random_range(0..=h - rh),
        w: rw,
        h: rh,
    }
}

fn photometric(img: &mut [u8], cfg: &AugmentConfig, rng: &mut impl Rng, w: usize, h: usize) {
    let mut v: Vec<f64> = img.iter().map(|&p| p as f64 / 255.0).collect();
    let mut touched = false;
    if rng.random::<f64>() < cfg.brightness {
        let b = rng.random_range(0.8..1.2);
        v.iter_mut().for_each(|x| *x *= b);
        touched = true;
    }
    if rng.random::<f64>() < cfg.contrast {
        let c = rng.random_range(0.8..1.25);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x = (*x - m) * c + m);
        touched = true;
    }
    if rng.random::<f64>() < cfg.gamma {
        let gm = rng.random_range(0.8..1.25);
        v.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0).powf(gm));
        touched = true;
    }
    if rng.random::<f64>() < cfg.erasure {
        let area = rng.random_range(0.02..0.2);
        let aspect = rng.random_range(0.5..2.0);
        let r = random_rect(rng, w, h, area, aspect);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        for y in r.y..r.y + r.h {
            v[y * w + r.x..y * w + r.x + r.w].iter_mut().for_each(|x| *x = m);
        }
        touched = true;
    }
    if rng.random::<f64>() < cfg.noise && cfg.noise_std > 0.0 {
        let n = Normal::new(0.0, cfg.noise_std).expect("finite std");
        v.iter_mut().for_each(|x| *x += n.sample(rng));
        touched = true;
    }
    if touched {
        for (p, x) in img.iter_mut().zip(v) {
            *p = quantize(x);
        }
    }
}

/// Full augmentation chain. `donor` feeds mixup and cutmix; without it they are skipped.
pub fn augment(
    series: &SitsSample,
    donor: Option<&SitsSample>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<SitsSample> {
    let mut s = series.clone();
    let (w, h) = (s.width(), s.height());
    if rng.random::<f64>() < cfg.flip {
        let op = if rng.random::<bool>() { Geometry::FlipH } else { Geometry::FlipV };
        s = apply_geometry(&s, op)?;
    }
    if rng.random::<f64>() < cfg.rotate && w == h {
        let k = rng.random_range(1..=3u8);
        s = apply_geometry(&s, Geometry::Rot90(k))?;
    }
    if rng.random::<f64>() < cfg.zoom && w == h {
        let side = ((rng.random_range(cfg.zoom_min..=1.0) * w as f64).round() as usize).clamp(1, w);
        let x = rng.random_range(0..=w - side);
        let y = rng.random_range(0..=h - side);
        s = apply_geometry(&s, Geometry::Crop { x, y, side })?;
    }
    if let Some(d) = donor {
        if rng.random::<f64>() < cfg.mixup {
            let l = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha)
                .map_err(|e| Error::Config(e.to_string()))?
                .sample(rng);
            s = mixup(&s, d, l.max(1.0 - l))?;
        }
        if rng.random::<f64>() < cfg.cutmix {
            let area = rng.random_range(0.1..0.5);
            let r = random_rect(rng, w, h, area, 1.0);
            s = cutmix(&s, d, r)?;
        }
    }
    for f in &mut s.frames {
        photometric(&mut f.image, cfg, rng, w, h);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SceneParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64) -> SitsSample {
        generate(&SceneParams { size: 48, ..SceneParams::new(seed) }, 3).unwrap()
    }

    #[test]
    fn disabled_chain_is_identity() {
        let s = sample(1);
        let d = sample(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            assert_eq!(augment(&s, Some(&d), &AugmentConfig::none(), &mut rng).unwrap(), s);
        }
    }

    #[test]
    fn cutmix_box() {
        let (a, b) = (sample(3), sample(4));
        let r = Rect { x: 5, y: 7, w: 20, h: 11 };
        let m = cutmix(&a, &b, r).unwrap();
        for (t, f) in m.frames.iter().enumerate() {
            for i in 0..f.image.len() {
                let (x, y) = (i % 48, i / 48);
                let src = if r.contains(x, y) { &b.frames[t] } else { &a.frames[t] };
                assert_eq!(f.mask.classes[i], src.mask.classes[i]);
                assert_eq!(f.image[i], src.image[i]);
            }
        }
    }

    #[test]
    fn crop_scales_resolution() {
        let s = sample(5);
        let c = apply_geometry(&s, Geometry::Crop { x: 6, y: 6, side: 24 }).unwrap();
        assert_eq!(c.resolution_m_per_px, s.resolution_m_per_px / 2.0);
        assert_eq!(c.frames[0].mask.resolution_m_per_px, c.resolution_m_per_px);
        assert_eq!(c.frames[0].mask.get(0, 0), s.frames[0].mask.get(6, 6));
        assert_eq!(c.frames[0].mask.get(47, 47), s.frames[0].mask.get(29, 29));
        assert!(apply_geometry(&s, Geometry::Crop { x: 30, y: 0, side: 24 }).is_err());
    }

    #[test]
    fn four_turns_are_identity() {
        let s = sample(6);
        let r = apply_geometry(&apply_geometry(&s, Geometry::Rot90(3)).unwrap(), Geometry::Rot90(1)).unwrap();
        assert_eq!(r, s);
    }
}

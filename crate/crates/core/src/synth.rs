//! Procedural SAR-like glacier time series.
//!
//! Scene layout, top to bottom: a no-data band, then a fjord whose rock walls
//! enclose a glacier tongue that ends at a moving calving front above open
//! water. Ice mélange and snow only change appearance, never the labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zones::{ZoneMask, GLACIER, NA, OIM, ROCK};

/// One acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Row-major grayscale intensities.
    pub image: Vec<u8>,
    pub mask: ZoneMask,
    /// Days since 2000-01-01.
    pub day: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SitsSample {
    pub glacier_id: String,
    pub frames: Vec<Frame>,
    pub resolution_m_per_px: f64,
}

impl SitsSample {
    pub fn width(&self) -> usize {
        self.frames[0].mask.width
    }

    pub fn height(&self) -> usize {
        self.frames[0].mask.height
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Pixels that are rock in every frame.
    pub fn static_rock(&self) -> ZoneMask {
        let m = &self.frames[0].mask;
        let classes = (0..m.classes.len())
            .map(|i| {
                if self.frames.iter().all(|f| f.mask.classes[i] == ROCK) {
                    ROCK
                } else {
                    NA
                }
            })
            .collect();
        ZoneMask {
            classes,
            ..m.clone()
        }
    }

    pub fn window(&self, start: usize, len: usize) -> SitsSample {
        SitsSample {
            glacier_id: self.glacier_id.clone(),
            frames: self.frames[start..start + len].to_vec(),
            resolution_m_per_px: self.resolution_m_per_px,
        }
    }
}

fn default_means() -> [f64; 4] {
    [0.0, 0.36, 0.62, 0.14]
}
fn default_texture() -> [f64; 4] {
    [0.0, 0.12, 0.10, 0.03]
}

/// Everything that determines one series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub size: usize,
    pub resolution_m_per_px: f64,
    /// Front retreat per frame in meters (negative advances).
    pub retreat_m_per_frame: f64,
    pub calving_prob: f64,
    pub calving_m: f64,
    pub melange_prob: f64,
    /// 0 leaves open water untouched, 1 makes mélange look exactly like glacier.
    pub melange_intensity: f64,
    /// Seaward extent of mélange from the front.
    pub melange_extent_m: f64,
    pub snow_prob: f64,
    pub snow_intensity: f64,
    pub speckle_looks: f64,
    /// Acquisition days; generated with 6-30 day gaps when empty.
    #[serde(default)]
    pub dates: Vec<i64>,
    /// Mean intensity per class (NA, rock, glacier, OIM).
    #[serde(default = "default_means")]
    pub class_means: [f64; 4],
    #[serde(default = "default_texture")]
    pub texture: [f64; 4],
    /// Lateral phase drift of the front wiggle per frame (radians).
    #[serde(default)]
    pub wiggle_drift: f64,
    /// Up to this many rock outcrops inside the glacier.
    #[serde(default)]
    pub nunataks: usize,
    pub seed: u64,
}

impl SceneParams {
    pub fn new(seed: u64) -> Self {
        Self {
            size: 128,
            resolution_m_per_px: 50.0,
            retreat_m_per_frame: 50.0,
            calving_prob: 0.1,
            calving_m: 200.0,
            melange_prob: 0.3,
            melange_intensity: 0.9,
            melange_extent_m: 1000.0,
            snow_prob: 0.3,
            snow_intensity: 0.9,
            speckle_looks: 4.0,
            dates: Vec::new(),
            class_means: default_means(),
            texture: default_texture(),
            wiggle_drift: 0.15,
            nunataks: 3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.calving_prob,
            self.melange_prob,
            self.melange_intensity,
            self.snow_prob,
            self.snow_intensity,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("probabilities and intensities must lie in [0, 1]".into()));
        }
        if !(self.speckle_looks > 0.0) {
            return Err(Error::Config("speckle looks must be positive".into()));
        }
        if self.size < 32 || !(self.resolution_m_per_px > 0.0) {
            return Err(Error::Config("scene needs size >= 32 and a positive resolution".into()));
        }
        if self.calving_m < 0.0 || self.melange_extent_m < 0.0 {
            return Err(Error::Config("calving and mélange extents must be non-negative".into()));
        }
        if self.dates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("dates must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Distribution of scenes for a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub resolution_m_per_px: f64,
    /// Retreat rate drawn uniformly from this range (m/frame).
    pub retreat_m_per_frame: [f64; 2],
    pub calving_prob: f64,
    pub calving_m: f64,
    pub melange_prob: f64,
    pub melange_intensity: f64,
    pub melange_extent_m: [f64; 2],
    pub snow_prob: f64,
    pub snow_intensity: f64,
    pub speckle_looks: f64,
    pub nunataks: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 128,
            resolution_m_per_px: 50.0,
            retreat_m_per_frame: [-60.0, 120.0],
            calving_prob: 0.1,
            calving_m: 200.0,
            melange_prob: 0.3,
            melange_intensity: 0.9,
            melange_extent_m: [600.0, 1500.0],
            snow_prob: 0.3,
            snow_intensity: 0.9,
            speckle_looks: 4.0,
            nunataks: 3,
        }
    }
}

impl SynthConfig {
    /// Strong seasonal confounders.
    pub fn heavy() -> Self {
        Self {
            melange_prob: 0.45,
            melange_intensity: 1.0,
            snow_prob: 0.45,
            snow_intensity: 1.0,
            speckle_looks: 3.0,
            ..Self::default()
        }
    }

    pub fn scene(&self, seed: u64) -> SceneParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce_9e5);
        let [r0, r1] = self.retreat_m_per_frame;
        let [m0, m1] = self.melange_extent_m;
        SceneParams {
            size: self.size,
            resolution_m_per_px: self.resolution_m_per_px,
            retreat_m_per_frame: if r1 > r0 { rng.random_range(r0..r1) } else { r0 },
            calving_prob: self.calving_prob,
            calving_m: self.calving_m,
            melange_prob: self.melange_prob,
            melange_intensity: self.melange_intensity,
            melange_extent_m: if m1 > m0 { rng.random_range(m0..m1) } else { m0 },
            snow_prob: self.snow_prob,
            snow_intensity: self.snow_intensity,
            speckle_looks: self.speckle_looks,
            nunataks: self.nunataks,
            seed,
            ..SceneParams::new(seed)
        }
    }
}

/// Multiplies every pixel by a unit-mean gamma variate with shape `looks`.
pub fn speckle(image: &mut [f64], looks: f64, rng: &mut impl Rng) {
    let g = Gamma::new(looks, 1.0 / looks).expect("positive looks");
    for v in image {
        *v *= g.sample(rng);
    }
}

/// Smooth noise in [-1, 1] from bilinearly interpolated lattice values.
fn value_noise(rng: &mut impl Rng, w: usize, h: usize, cx: usize, cy: usize) -> Vec<f64> {
    let gw = w / cx + 2;
    let gh = h / cy + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let fy = y as f64 / cy as f64;
        let (iy, ty) = (fy as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cx as f64;
            let (ix, tx) = (fx as usize, fx.fract());
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn octaves(rng: &mut impl Rng, w: usize, h: usize, cells: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for &(cx, cy, weight) in cells {
        for (o, n) in out.iter_mut().zip(value_noise(rng, w, h, cx, cy)) {
            *o += weight * n;
        }
    }
    out
}

/// Static layout of one scene.
struct Geometry {
    size: usize,
    na_rows: f64,
    wall: [f64; 2],
    wall_wiggle: [(f64, f64, f64); 2],
    knots: Vec<(f64, f64)>,
    wiggle: (f64, f64, f64),
    /// Vertical front offset per frame (pixels, positive is seaward).
    offsets: Vec<f64>,
    /// Rock outcrops in the glacier: center and half axes in pixels.
    nunataks: Vec<[f64; 4]>,
}

impl Geometry {
    fn sample(p: &SceneParams, t: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        rng.set_stream(1);
        let s = p.size as f64;
        let na_rows = rng.random_range(0.16..0.26) * s;
        let wall = [rng.random_range(0.3..0.38) * s, rng.random_range(0.3..0.38) * s];
        let mut ww = || {
            (
                rng.random_range(1.0..3.0),
                rng.random_range(0.15..0.4) * s,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        };
        let wall_wiggle = [ww(), ww()];
        let nk = 5;
        let knots = (0..nk)
            .map(|k| (k as f64 / (nk - 1) as f64 * s, rng.random_range(-0.06..0.06) * s))
            .collect();
        let wiggle = (
            rng.random_range(1.0..3.5),
            rng.random_range(0.15..0.35) * s,
            rng.random_range(0.0..std::f64::consts::TAU),
        );
        let rate_px = p.retreat_m_per_frame / p.resolution_m_per_px;
        let calve_px = p.calving_m / p.resolution_m_per_px;
        let mut offsets = Vec::with_capacity(t);
        let mut d = 0.0;
        for i in 0..t {
            let event = rng.random::<f64>() < p.calving_prob;
            let size = rng.random_range(0.5..1.5);
            if i > 0 {
                d -= rate_px;
                if event {
                    d -= calve_px * size;
                }
            }
            offsets.push(d);
        }
        // place the trajectory inside the allowed band
        let (lo, hi) = (0.45 * s, 0.68 * s);
        let dmin = offsets.iter().cloned().fold(f64::INFINITY, f64::min);
        let dmax = offsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let base = if dmax - dmin <= hi - lo {
            rng.random_range(lo - dmin..=hi - dmax)
        } else {
            (lo + hi) / 2.0 - (dmin + dmax) / 2.0
        };
        for o in &mut offsets {
            *o += base;
        }
        let mut g = Self {
            size: p.size,
            na_rows,
            wall,
            wall_wiggle,
            knots,
            wiggle,
            offsets,
            nunataks: Vec::new(),
        };
        let mut top = f64::INFINITY;
        for ti in 0..t {
            let (fmin, fmax) = (0..p.size).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
                let f = g.front(ti, x as f64 + 0.5, p.wiggle_drift);
                (a.min(f), b.max(f))
            });
            if fmin < g.na_rows + 4.0 || fmax > s - 4.0 {
                return Err(Error::Input(format!(
                    "front leaves the image at frame {ti} (rows {fmin:.1}..{fmax:.1})"
                )));
            }
            top = top.min(fmin);
        }
        // outcrops sit between the NA band and the highest front, clear of both,
        // preferably in the central half of the scene
        for _ in 0..rng.random_range(p.nunataks.min(1)..=p.nunataks) {
            let rx = rng.random_range(0.05..0.09) * s;
            let ry = rng.random_range(0.03..0.05) * s;
            let (u, v): (f64, f64) = (rng.random(), rng.random());
            let y1 = top - ry - 2.5;
            let y0 = g.na_rows.max(0.25 * s) + ry + 1.5;
            let y0 = if y1 > y0 { y0 } else { g.na_rows + ry + 1.5 };
            if y1 <= y0 {
                continue;
            }
            let cy = y0 + u * (y1 - y0);
            let (x0, x1) = (g.wall_at(0, cy) + rx + 2.0, s - g.wall_at(1, cy) - rx - 2.0);
            let (c0, c1) = (x0.max(0.25 * s + rx), x1.min(0.75 * s - rx));
            let (x0, x1) = if c1 > c0 { (c0, c1) } else { (x0, x1) };
            if x1 <= x0 {
                continue;
            }
            g.nunataks.push([x0 + v * (x1 - x0), cy, rx, ry]);
        }
        Ok(g)
    }

    fn wall_at(&self, side: usize, y: f64) -> f64 {
        let (a, period, phase) = self.wall_wiggle[side];
        let rel = y / self.size as f64;
        self.wall[side] * (1.0 - 0.45 * rel * rel) + a * (std::f64::consts::TAU * y / period + phase).sin()
    }

    fn front(&self, t: usize, x: f64, drift: f64) -> f64 {
        let mut pw = self.knots.last().unwrap().1;
        for k in self.knots.windows(2) {
            if x <= k[1].0 {
                let u = (x - k[0].0) / (k[1].0 - k[0].0);
                pw = k[0].1 * (1.0 - u) + k[1].1 * u;
                break;
            }
        }
        let (a, period, phase) = self.wiggle;
        self.offsets[t] + pw + a * (std::f64::consts::TAU * x / period + phase + drift * t as f64).sin()
    }

    fn classify(&self, t: usize, x: usize, y: usize, drift: f64) -> u8 {
        let (xc, yc) = (x as f64 + 0.5, y as f64 + 0.5);
        if yc < self.na_rows {
            NA
        } else if xc < self.wall_at(0, yc) || xc > self.size as f64 - self.wall_at(1, yc) {
            ROCK
        } else if self.nunataks.iter().any(|&[cx, cy, rx, ry]| ((xc - cx) / rx).powi(2) + ((yc - cy) / ry).powi(2) <= 1.0) {
            ROCK
        } else if yc < self.front(t, xc, drift) {
            GLACIER
        } else {
            OIM
        }
    }
}

/// Vertical front offset of each frame in pixels.
pub fn front_rows(p: &SceneParams, t: usize) -> Result<Vec<f64>> {
    let g = Geometry::sample(p, t)?;
    Ok(g.offsets)
}

fn schedule(p: &SceneParams, t: usize) -> Result<Vec<i64>> {
    if !p.dates.is_empty() {
        if p.dates.len() < t {
            return Err(Error::Config(format!("{} dates for {t} frames", p.dates.len())));
        }
        return Ok(p.dates[..t].to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(2);
    // 2014-01-01 .. 2019-12-31
    let mut day = rng.random_range(5114..7300);
    Ok((0..t)
        .map(|i| {
            if i > 0 {
                day += rng.random_range(6..=30);
            }
            day
        })
        .collect())
}

/// Renders a series of `t` frames.
pub fn generate(p: &SceneParams, t: usize) -> Result<SitsSample> {
    p.validate()?;
    if t == 0 {
        return Err(Error::Config("series length must be at least 1".into()));
    }
    let geo = Geometry::sample(p, t)?;
    let dates = schedule(p, t)?;
    let n = p.size;
    let mut look = ChaCha8Rng::seed_from_u64(p.seed);
    look.set_stream(3);
    let mut noise = ChaCha8Rng::seed_from_u64(p.seed);
    noise.set_stream(4);
    // persistent surface texture of rock and glacier
    let rock_tex = octaves(&mut look, n, n, &[(16, 16, 0.6), (6, 6, 0.3), (3, 3, 0.1)]);
    let ice_tex = octaves(&mut look, n, n, &[(6, 24, 0.6), (3, 10, 0.3), (2, 4, 0.1)]);
    let extent_px = p.melange_extent_m / p.resolution_m_per_px;
    let means = p.class_means;
    let tex = p.texture;
    let mut frames = Vec::with_capacity(t);
    for ti in 0..t {
        let water_tex = octaves(&mut look, n, n, &[(12, 12, 0.7), (4, 4, 0.3)]);
        let melange_draw: f64 = look.random();
        let snow_draw: f64 = look.random();
        let melange = melange_draw < p.melange_prob;
        let snow = snow_draw < p.snow_prob;
        let classes: Vec<u8> = (0..n * n).map(|i| geo.classify(ti, i % n, i / n, p.wiggle_drift)).collect();
        let mut img = vec![0.0; n * n];
        for (cls, ids) in [ROCK, GLACIER, OIM].iter().map(|&c| (c, c as usize)) {
            let field: &[f64] = match cls {
                ROCK => &rock_tex,
                GLACIER => &ice_tex,
                _ => &water_tex,
            };
            // region-wise zero-mean texture keeps the class mean exact
            let members: Vec<usize> = (0..n * n).filter(|&i| classes[i] == cls).collect();
            if members.is_empty() {
                continue;
            }
            let fm = members.iter().map(|&i| field[i]).sum::<f64>() / members.len() as f64;
            for &i in &members {
                img[i] = means[ids] + tex[ids] * (field[i] - fm);
            }
        }
        let ice_mean = means[GLACIER as usize];
        let ice_amp = tex[GLACIER as usize];
        if snow {
            let s = p.snow_intensity;
            for i in 0..n * n {
                if classes[i] == ROCK {
                    // snow-covered rock takes on glacier texture and brightness
                    let j = (i / n) * n + (i % n + n / 2) % n;
                    let snowy = ice_mean + ice_amp * ice_tex[j];
                    img[i] = (1.0 - s) * img[i] + s * snowy;
                }
            }
        }
        if melange {
            let s = p.melange_intensity;
            for i in 0..n * n {
                if classes[i] != OIM {
                    continue;
                }
                let (x, y) = (i % n, i / n);
                let depth = y as f64 + 0.5 - geo.front(ti, x as f64 + 0.5, p.wiggle_drift);
                if depth < extent_px {
                    // icebergs: glacier-like texture, shifted so it is not a copy
                    let j = ((y + n / 2) % n) * n + x;
                    let m = ice_mean + ice_amp * ice_tex[j];
                    img[i] = (1.0 - s) * img[i] + s * m;
                }
            }
        }
        speckle(&mut img, p.speckle_looks, &mut noise);
        let image = img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        frames.push(Frame {
            image,
            mask: ZoneMask::new(n, n, classes, p.resolution_m_per_px)?,
            day: dates[ti],
        });
    }
    Ok(SitsSample {
        glacier_id: format!("synthetic-{:016x}", p.seed),
        frames,
        resolution_m_per_px: p.resolution_m_per_px,
    })
}

//! Zone masks and calving-front polylines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NA: u8 = 0;
pub const ROCK: u8 = 1;
pub const GLACIER: u8 = 2;
pub const OIM: u8 = 3;
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["na", "rock", "glacier", "oim"];

/// Per-pixel class labels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoneMask {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<u8>,
    pub resolution_m_per_px: f64,
}

impl ZoneMask {
    pub fn new(width: usize, height: usize, classes: Vec<u8>, resolution_m_per_px: f64) -> Result<Self> {
        if width == 0 || height == 0 || classes.len() != width * height {
            return Err(Error::Input(format!(
                "mask of {width}x{height} needs {} labels, got {}",
                width * height,
                classes.len()
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::Input(format!("label {bad} outside 0..=3")));
        }
        if !(resolution_m_per_px > 0.0 && resolution_m_per_px.is_finite()) {
            return Err(Error::Input(format!("resolution {resolution_m_per_px} must be positive")));
        }
        Ok(Self {
            width,
            height,
            classes,
            resolution_m_per_px,
        })
    }

    pub fn filled(width: usize, height: usize, class: u8, resolution_m_per_px: f64) -> Self {
        Self::new(width, height, vec![class; width * height], resolution_m_per_px).expect("valid fill")
    }

    /// Parses rows of digits, e.g. `["0123", "2233"]`.
    pub fn from_rows(rows: &[&str], resolution_m_per_px: f64) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut classes = Vec::with_capacity(width * height);
        for r in rows {
            if r.len() != width {
                return Err(Error::Input("ragged mask rows".into()));
            }
            for ch in r.bytes() {
                classes.push(ch.wrapping_sub(b'0'));
            }
        }
        Self::new(width, height, classes, resolution_m_per_px)
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.classes[y * self.width + x] = class;
    }

    pub fn same_dims(&self, other: &ZoneMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn flip_h(&self) -> Self {
        Self {
            classes: flip_h(&self.classes, self.width, self.height),
            ..self.clone()
        }
    }

    pub fn flip_v(&self) -> Self {
        Self {
            classes: flip_v(&self.classes, self.width, self.height),
            ..self.clone()
        }
    }

    pub fn rot90(&self) -> Self {
        Self {
            width: self.height,
            height: self.width,
            classes: rot90(&self.classes, self.width, self.height),
            resolution_m_per_px: self.resolution_m_per_px,
        }
    }
}

pub fn flip_h<T: Copy>(data: &[T], w: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..h {
        out.extend(data[y * w..(y + 1) * w].iter().rev());
    }
    out
}

pub fn flip_v<T: Copy>(data: &[T], w: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for y in (0..h).rev() {
        out.extend_from_slice(&data[y * w..(y + 1) * w]);
    }
    out
}

/// Counter-clockwise quarter turn; the output is `h` wide and `w` high.
/// Source pixel `(x, y)` lands at `(y, w - 1 - x)`.
pub fn rot90<T: Copy>(data: &[T], w: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for ny in 0..w {
        for nx in 0..h {
            out.push(data[nx * w + (w - 1 - ny)]);
        }
    }
    out
}

pub type Point = [usize; 2];

/// Calving-front polylines in pixel coordinates (`[x, y]`, origin top-left).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontSet {
    pub resolution_m_per_px: f64,
    #[serde(rename = "fronts")]
    pub polylines: Vec<Vec<Point>>,
}

impl FrontSet {
    pub fn empty(resolution_m_per_px: f64) -> Self {
        Self {
            resolution_m_per_px,
            polylines: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.polylines.iter().all(Vec::is_empty)
    }

    pub fn num_points(&self) -> usize {
        self.polylines.iter().map(Vec::len).sum()
    }

    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.polylines.iter().flatten().copied()
    }

    /// Sorted, deduplicated points of all polylines.
    pub fn point_set(&self) -> Vec<Point> {
        let mut p: Vec<Point> = self.points().collect();
        p.sort_unstable();
        p.dedup();
        p
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: FrontSet = serde_json::from_str(s)?;
        f.check()?;
        Ok(f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("front sets serialize")
    }

    /// Checks the structural invariants.
    pub fn check(&self) -> Result<()> {
        if !(self.resolution_m_per_px > 0.0 && self.resolution_m_per_px.is_finite()) {
            return Err(Error::Input("front resolution must be positive".into()));
        }
        for line in &self.polylines {
            if line.len() < 2 {
                return Err(Error::Input("polyline with fewer than two points".into()));
            }
            for w in line.windows(2) {
                let dx = w[0][0].abs_diff(w[1][0]);
                let dy = w[0][1].abs_diff(w[1][1]);
                if dx > 1 || dy > 1 || (dx == 0 && dy == 0) {
                    return Err(Error::Input(format!("points {:?} and {:?} are not neighbours", w[0], w[1])));
                }
            }
        }
        Ok(())
    }

    /// Geodesic length of one polyline in meters.
    pub fn length_m(&self, line: &[Point]) -> f64 {
        polyline_length_px(line) * self.resolution_m_per_px
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            resolution_m_per_px: self.resolution_m_per_px,
            polylines: self.polylines.iter().map(|l| l.iter().map(|&p| f(p)).collect()).collect(),
        }
    }
}

/// Sum of step lengths, diagonal steps counting `sqrt(2)`.
pub fn polyline_length_px(line: &[Point]) -> f64 {
    line.windows(2)
        .map(|w| {
            let diag = w[0][0] != w[1][0] && w[0][1] != w[1][1];
            if diag {
                std::f64::consts::SQRT_2
            } else {
                1.0
            }
        })
        .sum()
}

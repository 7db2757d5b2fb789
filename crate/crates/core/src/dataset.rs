//! On-disk series layout: one directory per series with `frame_####.pgm`,
//! `mask_####.pgm` and a `manifest.json`.

use std::fs;
use std::io::Cursor;
use std::path::{Component, Path, PathBuf};

use chrono::{Days, NaiveDate};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Frame, SitsSample};
use crate::zones::{ZoneMask, NUM_CLASSES};

/// Gray levels used when rendering masks for inspection.
pub const PALETTE: [u8; NUM_CLASSES] = [0, 85, 170, 255];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub date: String,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub glacier_id: String,
    pub resolution_m_per_px: f64,
    pub frames: Vec<ManifestFrame>,
}

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid epoch")
}

pub fn day_to_date(day: i64) -> Result<String> {
    let d = u64::try_from(day)
        .ok()
        .and_then(|d| epoch().checked_add_days(Days::new(d)))
        .ok_or_else(|| Error::Data(format!("day {day} outside the supported range")))?;
    Ok(d.format("%Y-%m-%d").to_string())
}

pub fn date_to_day(s: &str) -> Result<i64> {
    let d = NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| Error::Data(format!("bad date {s:?}: {e}")))?;
    Ok((d - epoch()).num_days())
}

/// Encodes 8-bit grayscale as binary PGM (P5).
pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(data, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Data(format!("PGM encode: {e}")))?;
    Ok(out)
}

/// Decodes an 8-bit grayscale PGM into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if !bytes.starts_with(b"P5") && !bytes.starts_with(b"P2") {
        return Err(Error::Data("not a PGM file".into()));
    }
    let img = image::load(Cursor::new(bytes), ImageFormat::Pnm).map_err(|e| Error::Data(format!("PGM decode: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color() != image::ColorType::L8 {
        return Err(Error::Data(format!("expected 8-bit grayscale, got {:?}", img.color())));
    }
    Ok((w, h, img.into_luma8().into_raw()))
}

/// Mask pixels as labels: raw `0..=3`, or the inspection palette.
pub fn labels_from_gray(gray: &[u8]) -> Result<Vec<u8>> {
    if gray.iter().all(|&v| (v as usize) < NUM_CLASSES) {
        return Ok(gray.to_vec());
    }
    gray.iter()
        .map(|&v| {
            PALETTE
                .iter()
                .position(|&p| p == v)
                .map(|c| c as u8)
                .ok_or_else(|| Error::Data(format!("mask value {v} is neither a label nor a palette level")))
        })
        .collect()
}

pub fn mask_to_palette(mask: &ZoneMask) -> Vec<u8> {
    mask.classes.iter().map(|&c| PALETTE[c as usize]).collect()
}

pub fn read_mask(path: &Path, resolution_m_per_px: f64) -> Result<ZoneMask> {
    let (w, h, gray) = decode_pgm(&fs::read(path)?)?;
    ZoneMask::new(w, h, labels_from_gray(&gray)?, resolution_m_per_px)
}

pub fn write_mask(path: &Path, mask: &ZoneMask, palette: bool) -> Result<()> {
    let data = if palette { mask_to_palette(mask) } else { mask.classes.clone() };
    fs::write(path, encode_pgm(mask.width, mask.height, &data)?)?;
    Ok(())
}

/// Parses and checks a manifest.
pub fn parse_manifest(s: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(s)?;
    if m.frames.is_empty() {
        return Err(Error::Data("manifest lists no frames".into()));
    }
    if !(m.resolution_m_per_px > 0.0 && m.resolution_m_per_px.is_finite()) {
        return Err(Error::Data("resolution_m_per_px must be positive".into()));
    }
    let mut prev = None;
    for f in &m.frames {
        let d = date_to_day(&f.date)?;
        if prev.is_some_and(|p| d <= p) {
            return Err(Error::Data(format!("dates are not increasing at {}", f.date)));
        }
        prev = Some(d);
        for p in [&f.image, &f.mask] {
            let path = Path::new(p);
            let plain = path.components().all(|c| matches!(c, Component::Normal(_)));
            if p.is_empty() || !plain {
                return Err(Error::Data(format!("frame path {p:?} must be relative to the series directory")));
            }
        }
    }
    Ok(m)
}

pub fn write_series(dir: &Path, s: &SitsSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut frames = Vec::with_capacity(s.len());
    for (i, f) in s.frames.iter().enumerate() {
        let image = format!("frame_{i:04}.pgm");
        let mask = format!("mask_{i:04}.pgm");
        fs::write(dir.join(&image), encode_pgm(f.mask.width, f.mask.height, &f.image)?)?;
        write_mask(&dir.join(&mask), &f.mask, false)?;
        frames.push(ManifestFrame {
            date: day_to_date(f.day)?,
            image,
            mask,
        });
    }
    let m = Manifest {
        glacier_id: s.glacier_id.clone(),
        resolution_m_per_px: s.resolution_m_per_px,
        frames,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

pub fn read_series(dir: &Path) -> Result<SitsSample> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join("manifest.json").display())))?;
    let m = parse_manifest(&text)?;
    let mut frames = Vec::with_capacity(m.frames.len());
    for f in &m.frames {
        let (w, h, image) = decode_pgm(&fs::read(dir.join(&f.image))?)?;
        let mask = read_mask(&dir.join(&f.mask), m.resolution_m_per_px)?;
        if (mask.width, mask.height) != (w, h) {
            return Err(Error::Data(format!("{}: mask and image sizes differ", f.mask)));
        }
        if let Some(first) = frames.first() {
            let first: &Frame = first;
            if !first.mask.same_dims(&mask) {
                return Err(Error::Data("frames of a series must share one grid".into()));
            }
        }
        frames.push(Frame {
            image,
            mask,
            day: date_to_day(&f.date)?,
        });
    }
    Ok(SitsSample {
        glacier_id: m.glacier_id,
        frames,
        resolution_m_per_px: m.resolution_m_per_px,
    })
}

/// Series directories below `root` (those holding a manifest), sorted by name.
pub fn series_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::Data(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn read_dataset(root: &Path) -> Result<Vec<SitsSample>> {
    let dirs = series_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::Data(format!("no series found in {}", root.display())));
    }
    dirs.iter().map(|d| read_series(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip() {
        let data: Vec<u8> = (0..12).map(|i| i * 20).collect();
        let bytes = encode_pgm(4, 3, &data).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(decode_pgm(&bytes).unwrap(), (4, 3, data));
        assert!(decode_pgm(b"P5\n4 3\n255\n\x01").is_err());
        assert!(decode_pgm(b"GIF89a").is_err());
    }

    #[test]
    fn dates() {
        assert_eq!(day_to_date(0).unwrap(), "2000-01-01");
        assert_eq!(date_to_day("2000-03-01").unwrap(), 60);
        assert!(date_to_day("2000-13-01").is_err());
        assert!(day_to_date(-1).is_err());
    }

    #[test]
    fn palette_and_raw_labels() {
        assert_eq!(labels_from_gray(&[0, 3, 1]).unwrap(), vec![0, 3, 1]);
        assert_eq!(labels_from_gray(&[0, 255, 85, 170]).unwrap(), vec![0, 3, 1, 2]);
        assert!(labels_from_gray(&[0, 7]).is_err());
    }

    #[test]
    fn manifest_checks() {
        let ok = r#"{"glacier_id":"g","resolution_m_per_px":50,"frames":[
            {"date":"2010-01-01","image":"a.pgm","mask":"b.pgm"},
            {"date":"2010-01-09","image":"c.pgm","mask":"d.pgm"}]}"#;
        assert_eq!(parse_manifest(ok).unwrap().frames.len(), 2);
        let back = ok.replace("2010-01-09", "2009-12-01");
        assert!(parse_manifest(&back).is_err());
        let escape = ok.replace("c.pgm", "../c.pgm");
        assert!(parse_manifest(&escape).is_err());
        assert!(parse_manifest(r#"{"glacier_id":"g","resolution_m_per_px":50,"frames":[]}"#).is_err());
    }
}

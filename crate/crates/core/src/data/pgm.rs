//! Binary 8-bit PGM (`P5`) image/mask interchange and the on-disk site layout
//! `<root>/<site>/{images,masks}/<id>.pgm` plus `<root>/<site>/site.json`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{SiteConfig, SiteSample};
use crate::error::{Error, Result};
use crate::losses::Source;
use crate::tensor::{Shape, Tensor};

/// Raw decoded `P5` raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse { offset, msg: msg.into() }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        let v = s.parse().map_err(|_| parse_err(start, format!("{what} out of range")))?;
        Ok((v, start))
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    match bytes.first() {
        Some(b'P') => {}
        _ => return Err(parse_err(0, "missing PGM magic")),
    }
    match bytes.get(1) {
        Some(b'5') => {}
        _ => return Err(parse_err(1, "only binary PGM (P5) is supported")),
    }
    let mut h = Header { bytes, pos: 2 };
    if !h.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(parse_err(2, "expected whitespace after magic"));
    }
    let (width, wat) = h.number("width")?;
    let (height, hat) = h.number("height")?;
    let (maxval, mat) = h.number("maxval")?;
    if width == 0 {
        return Err(parse_err(wat, "zero width"));
    }
    if height == 0 {
        return Err(parse_err(hat, "zero height"));
    }
    if maxval != 255 {
        return Err(parse_err(mat, format!("maxval {maxval} is not 255")));
    }
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(h.pos, "expected a single whitespace byte before raster"));
    }
    let start = h.pos + 1;
    let need = width * height;
    let have = bytes.len().saturating_sub(start);
    if have < need {
        return Err(parse_err(bytes.len(), format!("raster truncated: {have} of {need} bytes")));
    }
    if have > need {
        return Err(parse_err(start + need, "trailing bytes after raster"));
    }
    Ok(Pgm { width, height, pixels: bytes[start..].to_vec() })
}

pub fn write_pgm(img: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

fn read_pgm(path: &Path) -> Result<Pgm> {
    parse_pgm(&fs::read(path)?)
}

/// Image scaled by 1/255; mask thresholded at 128.
pub fn load_pgm_pair(image_path: impl AsRef<Path>, mask_path: impl AsRef<Path>, source: Source, id: u64) -> Result<SiteSample> {
    let img = read_pgm(image_path.as_ref())?;
    let msk = read_pgm(mask_path.as_ref())?;
    if (img.width, img.height) != (msk.width, msk.height) {
        return Err(Error::Validation(format!(
            "image is {}×{} but mask is {}×{}",
            img.width, img.height, msk.width, msk.height
        )));
    }
    let shape = Shape::new(1, img.height, img.width, 1);
    let sample = SiteSample {
        image: Tensor::from_vec(shape, img.pixels.iter().map(|&p| p as f32 / 255.0).collect())?,
        mask: Tensor::from_vec(shape, msk.pixels.iter().map(|&p| if p >= 128 { 1.0 } else { 0.0 }).collect())?,
        source,
        id,
    };
    sample.validate()?;
    Ok(sample)
}

fn to_pgm(t: &Tensor<f32>, scale: impl Fn(f32) -> u8) -> Pgm {
    let s = t.shape();
    Pgm { width: s.w, height: s.h, pixels: t.data().iter().map(|&v| scale(v)).collect() }
}

/// Writes `images/<id>.pgm` and `masks/<id>.pgm` under `dir`.
pub fn save_pgm(sample: &SiteSample, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let (idir, mdir) = (dir.join("images"), dir.join("masks"));
    fs::create_dir_all(&idir)?;
    fs::create_dir_all(&mdir)?;
    let ip = idir.join(format!("{}.pgm", sample.id));
    let mp = mdir.join(format!("{}.pgm", sample.id));
    fs::write(&ip, write_pgm(&to_pgm(&sample.image, |v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)))?;
    fs::write(&mp, write_pgm(&to_pgm(&sample.mask, |v| if v >= 0.5 { 255 } else { 0 })))?;
    Ok((ip, mp))
}

pub fn save_site(root: impl AsRef<Path>, config: &SiteConfig, samples: &[SiteSample]) -> Result<PathBuf> {
    let dir = root.as_ref().join(&config.name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("site.json"), serde_json::to_vec_pretty(config)?)?;
    for s in samples {
        save_pgm(s, &dir)?;
    }
    Ok(dir)
}

/// Loads every `<id>.pgm` pair of a site, ordered by id.
pub fn load_site(root: impl AsRef<Path>, name: &str, source: Source) -> Result<(SiteConfig, Vec<SiteSample>)> {
    let dir = root.as_ref().join(name);
    let config: SiteConfig = serde_json::from_slice(&fs::read(dir.join("site.json"))?)?;
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir.join("images"))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()) {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    let samples = ids
        .into_iter()
        .map(|id| {
            load_pgm_pair(
                dir.join("images").join(format!("{id}.pgm")),
                dir.join("masks").join(format!("{id}.pgm")),
                source,
                id,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((config, samples))
}

//! Synthetic multi-site segmentation data.
//!
//! A site draws 1–3 random ellipses as foreground and renders them as a
//! two-level intensity image with Gaussian speckle and an optional box blur.
//! Two sites with different intensity levels, speckle and blur give a
//! controllable distribution shift between a base and a novel source.

mod augment;
mod pgm;
mod split;

pub use augment::{augment, hflip, rot_left, rot_right, vflip};
pub use pgm::{load_pgm_pair, load_site, parse_pgm, save_pgm, save_site, write_pgm, Pgm};
pub use split::{split_dataset, Split, DEFAULT_SPLIT};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Source;
use crate::rng::derived_rng;
use crate::tensor::{Shape, Tensor};

/// Noise levels of the robustness sweep.
pub const NOISE_SWEEP_SIGMAS: [f64; 4] = [0.05, 0.10, 0.15, 0.20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub name: String,
    pub fg_intensity_mean: f64,
    pub bg_intensity_mean: f64,
    pub texture_sigma: f64,
    pub blur_radius: usize,
    /// Inclusive range of ellipse count per image.
    pub n_shapes: (usize, usize),
    pub image_size: (usize, usize),
}

impl SiteConfig {
    /// Default base site.
    pub fn base() -> Self {
        SiteConfig {
            name: "base".into(),
            fg_intensity_mean: 0.75,
            bg_intensity_mean: 0.35,
            texture_sigma: 0.05,
            blur_radius: 0,
            n_shapes: (1, 3),
            image_size: (64, 64),
        }
    }

    /// Default novel site, shifted in contrast, speckle and sharpness.
    pub fn novel_shifted() -> Self {
        SiteConfig {
            name: "novel".into(),
            fg_intensity_mean: 0.55,
            bg_intensity_mean: 0.30,
            texture_sigma: 0.12,
            blur_radius: 1,
            n_shapes: (1, 3),
            image_size: (64, 64),
        }
    }

    pub fn with_size(mut self, h: usize, w: usize) -> Self {
        self.image_size = (h, w);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.fg_intensity_mean) || !in_unit(self.bg_intensity_mean) {
            return Err(Error::config(format!("site {}: intensity means must lie in [0, 1]", self.name)));
        }
        if (self.fg_intensity_mean - self.bg_intensity_mean).abs() <= 0.0 {
            return Err(Error::config(format!("site {}: foreground and background means coincide", self.name)));
        }
        if !(self.texture_sigma >= 0.0) {
            return Err(Error::config(format!("site {}: texture_sigma must be non-negative", self.name)));
        }
        let (lo, hi) = self.n_shapes;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!("site {}: shape count range {lo}..={hi} is invalid", self.name)));
        }
        let (h, w) = self.image_size;
        if h < 4 || w < 4 {
            return Err(Error::config(format!("site {}: image size {h}×{w} is too small", self.name)));
        }
        Ok(())
    }
}

/// One image/mask pair. Both tensors are `(1, h, w, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub source: Source,
    pub id: u64,
}

impl SiteSample {
    /// Requires at least one foreground and one background pixel.
    pub fn validate(&self) -> Result<()> {
        let fg = self.mask.data().iter().filter(|&&v| v == 1.0).count();
        let total = self.mask.data().len();
        if fg + self.mask.data().iter().filter(|&&v| v == 0.0).count() != total {
            return Err(Error::Validation(format!("sample {}: mask is not binary", self.id)));
        }
        if fg == 0 || fg == total {
            return Err(Error::Validation(format!(
                "sample {}: mask must contain both foreground and background",
                self.id
            )));
        }
        if self.image.shape() != self.mask.shape() {
            return Err(Error::Validation(format!("sample {}: image and mask shapes differ", self.id)));
        }
        Ok(())
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.h, s.w)
    }
}

fn ellipse_mask(h: usize, w: usize, rng: &mut impl Rng, count: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; h * w];
    let (hf, wf) = (h as f64, w as f64);
    let short = hf.min(wf);
    for _ in 0..count {
        let cy = rng.gen_range(0.15 * hf..0.85 * hf);
        let cx = rng.gen_range(0.15 * wf..0.85 * wf);
        let ry = rng.gen_range(0.08 * short..0.25 * short);
        let rx = rng.gen_range(0.08 * short..0.25 * short);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (s, c) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    m[y * w + x] = 1.0;
                }
            }
        }
    }
    m
}

fn box_blur(img: &[f32], h: usize, w: usize, r: usize) -> Vec<f32> {
    if r == 0 {
        return img.to_vec();
    }
    let r = r as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0f64;
            let mut cnt = 0usize;
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    acc += img[yy as usize * w + xx as usize] as f64;
                    cnt += 1;
                }
            }
            out[y as usize * w + x as usize] = (acc / cnt as f64) as f32;
        }
    }
    out
}

/// Renders `n` samples. Sample `i` draws from its own stream keyed by
/// `(seed, i)`, so output is deterministic and independent of `n`.
pub fn generate_site(config: &SiteConfig, n: usize, seed: u64, source: Source) -> Result<Vec<SiteSample>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::config("cannot generate an empty site"));
    }
    let (h, w) = config.image_size;
    let shape = Shape::new(1, h, w, 1);
    let speckle = Normal::new(0.0, config.texture_sigma).map_err(|e| Error::config(e.to_string()))?;
    (0..n as u64)
        .map(|id| {
            let mut r = derived_rng(seed, id);
            let mask = loop {
                let count = r.gen_range(config.n_shapes.0..=config.n_shapes.1);
                let m = ellipse_mask(h, w, &mut r, count);
                let fg = m.iter().filter(|&&v| v == 1.0).count();
                if fg > 0 && fg < h * w {
                    break m;
                }
            };
            let (fg, bg) = (config.fg_intensity_mean, config.bg_intensity_mean);
            let mut img: Vec<f32> = mask
                .iter()
                .map(|&m| {
                    let base = bg + (fg - bg) * m as f64;
                    let noise = if config.texture_sigma > 0.0 { speckle.sample(&mut r) } else { 0.0 };
                    (base + noise) as f32
                })
                .collect();
            img = box_blur(&img, h, w, config.blur_radius);
            for v in &mut img {
                *v = v.clamp(0.0, 1.0);
            }
            Ok(SiteSample {
                image: Tensor::from_vec(shape, img)?,
                mask: Tensor::from_vec(shape, mask)?,
                source,
                id,
            })
        })
        .collect()
}

/// `clip(I + ε, 0, 1)` with `ε ~ N(0, σ²)` i.i.d. per pixel.
pub fn add_gaussian_noise(image: &Tensor<f32>, sigma: f64, seed: u64) -> Result<Tensor<f32>> {
    if !(sigma >= 0.0) {
        return Err(Error::config(format!("noise sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut r = derived_rng(seed, 0x6e6f697365);
    Ok(image.map(|v| (v as f64 + normal.sample(&mut r)).clamp(0.0, 1.0) as f32))
}

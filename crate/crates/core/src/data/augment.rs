use super::SiteSample;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn remap(t: &Tensor<f32>, out: Shape, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<f32> {
    Tensor::from_fn(out, |n, y, x, c| {
        let (sy, sx) = src(y, x);
        t.at(n, sy, sx, c)
    })
}

pub fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    remap(t, s, |y, x| (y, s.w - 1 - x))
}

pub fn vflip(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    remap(t, s, |y, x| (s.h - 1 - y, x))
}

/// Rotation by +90° (counter-clockwise).
pub fn rot_left(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let out = Shape::new(s.n, s.w, s.h, s.c);
    remap(t, out, |y, x| (x, s.w - 1 - y))
}

/// Rotation by −90° (clockwise).
pub fn rot_right(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let out = Shape::new(s.n, s.w, s.h, s.c);
    remap(t, out, |y, x| (s.h - 1 - x, y))
}

/// `[original, hflip, vflip, rot+90, rot−90]`, each applied to image and mask alike.
pub fn augment(sample: &SiteSample) -> Result<Vec<SiteSample>> {
    let (h, w) = sample.size();
    if h != w {
        return Err(Error::contract(format!("rotation augmentation needs a square image, got {h}×{w}")));
    }
    let ops: [fn(&Tensor<f32>) -> Tensor<f32>; 4] = [hflip, vflip, rot_left, rot_right];
    let mut out = vec![sample.clone()];
    out.extend(ops.iter().map(|op| SiteSample { image: op(&sample.image), mask: op(&sample.mask), ..sample.clone() }));
    Ok(out)
}

//! A small U-Net whose every level is exposed as a feature tap.
//!
//! Encoder level `l` (1-based) runs two 3×3 conv+ReLU blocks at
//! `base_channels·2^(l−1)` channels and resolution `1/2^(l−1)`; the
//! bottleneck sits at `1/2^depth`. Each decoder level upsamples
//! (nearest, then a learned 1×1 conv), concatenates the mirrored encoder
//! tap and runs two more conv+ReLU blocks. A 1×1 head with sigmoid gives
//! the foreground probability.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng;
use crate::tensor::{Real, Shape, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FDSEGCKP";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// Extra 1×1 sigmoid heads on every decoder tap (deep-supervision baseline).
    pub aux_heads: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { depth: 2, base_channels: 8, in_channels: 1, kernel: 3, aux_heads: false }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels must be at least 1"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be at least 1"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// Input height/width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::config(format!("input {h}×{w} is not divisible by 2^depth = {m}")));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn tap_names(&self) -> Vec<TapName> {
        let mut v: Vec<TapName> = (1..=self.depth).map(TapName::Enc).collect();
        v.push(TapName::Bottleneck);
        v.extend((1..=self.depth).map(TapName::Dec));
        v
    }

    /// `2^level` relative to the input for each tap, in tap order.
    pub fn tap_factors(&self) -> Vec<usize> {
        self.tap_names().iter().map(|t| t.downsample_factor(self.depth)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TapName {
    Enc(usize),
    Bottleneck,
    Dec(usize),
}

impl TapName {
    pub fn downsample_factor(self, depth: usize) -> usize {
        match self {
            TapName::Enc(l) => 1 << (l - 1),
            TapName::Bottleneck => 1 << depth,
            TapName::Dec(l) => 1 << (depth - l),
        }
    }
}

impl fmt::Display for TapName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapName::Enc(l) => write!(f, "enc_{l}"),
            TapName::Bottleneck => write!(f, "bottleneck"),
            TapName::Dec(l) => write!(f, "dec_{l}"),
        }
    }
}

/// One exposed activation.
#[derive(Debug, Clone, Copy)]
pub struct FeatureTap {
    pub name: TapName,
    pub activation: Var,
    pub downsample_factor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    kernel: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<[Conv; 2]>,
    bottleneck: [Conv; 2],
    // (up 1×1, conv a, conv b)
    dec: Vec<[Conv; 3]>,
    head: Conv,
    aux: Vec<Conv>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    params: Vec<Param>,
    layout: Layout,
}

/// Forward outputs. `aux_predictions` is non-empty only with `aux_heads`.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub prediction: Var,
    pub taps: Vec<FeatureTap>,
    pub aux_predictions: Vec<Var>,
    /// Tape handles of every parameter, in declaration order.
    pub params: Vec<Var>,
}

struct Builder<'a, R: Rng> {
    params: Vec<Param>,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    /// Kernels feeding a ReLU use `±sqrt(6 / fan_in)`, linear ones
    /// `±sqrt(6 / (fan_in + fan_out))`.
    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, relu: bool) -> Conv {
        let fan_in = (k * k * cin) as f32;
        let fan_out = (k * k * cout) as f32;
        let s = if relu { (6.0 / fan_in).sqrt() } else { (6.0 / (fan_in + fan_out)).sqrt() };
        let shape = Shape::new(k, k, cin, cout);
        let data: Vec<f32> = (0..shape.numel()).map(|_| self.rng.gen_range(-s..=s)).collect();
        self.params.push(Param { name: format!("{name}.kernel"), value: Tensor::from_vec(shape, data).unwrap() });
        self.params.push(Param { name: format!("{name}.bias"), value: Tensor::zeros(Shape::new(1, 1, 1, cout)) });
        Conv { kernel: self.params.len() - 2, bias: self.params.len() - 1 }
    }
}

impl UNet {
    /// Uniform fan-based kernels, biases zero.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let mut b = Builder { params: Vec::new(), rng: &mut r };
        let k = config.kernel;
        let mut enc = Vec::new();
        let mut cin = config.in_channels;
        for l in 1..=config.depth {
            let c = config.channels_at(l - 1);
            enc.push([b.conv(&format!("enc_{l}.conv1"), k, cin, c, true), b.conv(&format!("enc_{l}.conv2"), k, c, c, true)]);
            cin = c;
        }
        let cb = config.channels_at(config.depth);
        let bottleneck = [b.conv("bottleneck.conv1", k, cin, cb, true), b.conv("bottleneck.conv2", k, cb, cb, true)];
        let mut dec = Vec::new();
        let mut cprev = cb;
        for l in 1..=config.depth {
            let c = config.channels_at(config.depth - l);
            dec.push([
                b.conv(&format!("dec_{l}.up"), 1, cprev, c, false),
                b.conv(&format!("dec_{l}.conv1"), k, 2 * c, c, true),
                b.conv(&format!("dec_{l}.conv2"), k, c, c, true),
            ]);
            cprev = c;
        }
        let head = b.conv("head", 1, cprev, 1, false);
        let aux = if config.aux_heads {
            (1..=config.depth).map(|l| b.conv(&format!("aux_{l}"), 1, config.channels_at(config.depth - l), 1, false)).collect()
        } else {
            Vec::new()
        };
        let params = b.params;
        Ok(UNet { config, params, layout: Layout { enc, bottleneck, dec, head, aux } })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.shape().numel()).sum()
    }

    /// Zeroes the output head so every prediction is exactly sigmoid(0).
    pub fn zero_head(&mut self) {
        for i in [self.layout.head.kernel, self.layout.head.bias] {
            self.params[i].value.data_mut().fill(0.0);
        }
    }

    /// Records the forward pass on `tape`. Runs in the tape's precision.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, images: Var) -> Result<ForwardOutput> {
        let s = tape.shape(images);
        self.config.check_input_size(s.h, s.w)?;
        if s.c != self.config.in_channels {
            return Err(Error::Dim { op: "unet", axis: "channels", expected: self.config.in_channels, got: s.c });
        }
        let pv: Vec<Var> = self.params.iter().map(|p| tape.param(p.value.cast::<T>())).collect();
        self.forward_with(tape, images, pv)
    }

    /// Forward pass against caller-supplied parameter handles (one per entry
    /// of [`UNet::params`], same shapes), e.g. to differentiate with respect
    /// to a single weight tensor.
    pub fn forward_with<T: Real>(&self, tape: &mut Tape<T>, images: Var, pv: Vec<Var>) -> Result<ForwardOutput> {
        let s = tape.shape(images);
        self.config.check_input_size(s.h, s.w)?;
        if pv.len() != self.params.len() {
            return Err(Error::contract(format!("{} parameter handles for {} parameters", pv.len(), self.params.len())));
        }
        for (v, p) in pv.iter().zip(&self.params) {
            if tape.shape(*v) != p.value.shape() {
                return Err(Error::contract(format!("parameter {} has shape {}, got {}", p.name, p.value.shape(), tape.shape(*v))));
            }
        }
        let conv = |tape: &mut Tape<T>, x: Var, c: Conv| tape.conv2d(x, pv[c.kernel], pv[c.bias]);
        let block = |tape: &mut Tape<T>, x: Var, convs: &[Conv]| -> Result<Var> {
            let mut h = x;
            for &c in convs {
                let y = conv(tape, h, c)?;
                h = tape.relu(y);
            }
            Ok(h)
        };

        let depth = self.config.depth;
        let mut taps = Vec::with_capacity(2 * depth + 1);
        let mut skips = Vec::with_capacity(depth);
        let mut h = images;
        for (l, convs) in self.layout.enc.iter().enumerate() {
            if l > 0 {
                h = tape.max_pool2d(h, 2)?;
            }
            h = block(tape, h, convs)?;
            let name = TapName::Enc(l + 1);
            taps.push(FeatureTap { name, activation: h, downsample_factor: name.downsample_factor(depth) });
            skips.push(h);
        }
        h = tape.max_pool2d(h, 2)?;
        h = block(tape, h, &self.layout.bottleneck)?;
        taps.push(FeatureTap {
            name: TapName::Bottleneck,
            activation: h,
            downsample_factor: TapName::Bottleneck.downsample_factor(depth),
        });
        let mut aux_predictions = Vec::new();
        for (l, convs) in self.layout.dec.iter().enumerate() {
            let up = tape.upsample_nearest(h, 2)?;
            let up = conv(tape, up, convs[0])?;
            let skip = skips[depth - 1 - l];
            let cat = tape.concat_channels(up, skip)?;
            h = block(tape, cat, &convs[1..])?;
            let name = TapName::Dec(l + 1);
            taps.push(FeatureTap { name, activation: h, downsample_factor: name.downsample_factor(depth) });
            if let Some(&a) = self.layout.aux.get(l) {
                let logits = conv(tape, h, a)?;
                aux_predictions.push(tape.sigmoid(logits));
            }
        }
        let logits = conv(tape, h, self.layout.head)?;
        let prediction = tape.sigmoid(logits);
        Ok(ForwardOutput { prediction, taps, aux_predictions, params: pv })
    }

    /// Forward without keeping the graph; returns the prediction tensor.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out.prediction).clone())
    }

    // ---- checkpoint I/O ---------------------------------------------------

    /// Binary checkpoint: magic, length-prefixed config JSON, then per tensor a
    /// length-prefixed `{name, shape}` JSON header followed by little-endian f32 data.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            let header = serde_json::to_vec(&TensorHeader { name: p.name.clone(), shape: p.value.shape().dims() })?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse { offset: 0, msg: "bad checkpoint magic".into() });
        }
        let len = cur.u64()? as usize;
        let at = cur.pos;
        let config: UNetConfig = serde_json::from_slice(cur.take(len)?)
            .map_err(|e| Error::Parse { offset: at, msg: format!("config JSON: {e}") })?;
        let mut model = UNet::init(config, 0)?;
        let count = cur.u64()? as usize;
        if count != model.params.len() {
            return Err(Error::Parse { offset: cur.pos - 8, msg: format!("expected {} tensors, found {count}", model.params.len()) });
        }
        for p in &mut model.params {
            let len = cur.u64()? as usize;
            let at = cur.pos;
            let header: TensorHeader = serde_json::from_slice(cur.take(len)?)
                .map_err(|e| Error::Parse { offset: at, msg: format!("tensor header JSON: {e}") })?;
            if header.name != p.name || header.shape != p.value.shape().dims() {
                return Err(Error::Parse {
                    offset: at,
                    msg: format!("tensor {:?} {:?} does not match expected {:?} {}", header.name, header.shape, p.name, p.value.shape()),
                });
            }
            let raw = cur.take(4 * p.value.shape().numel())?;
            for (dst, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Parse { offset: cur.pos, msg: "trailing bytes after last tensor".into() });
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: [usize; 4],
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse { offset: self.pos, msg: format!("unexpected end of checkpoint (wanted {n} bytes)") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_depth_is_rejected() {
        let cfg = UNetConfig { depth: 0, ..Default::default() };
        assert!(matches!(UNet::init(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn tap_factors_for_depth_two() {
        let cfg = UNetConfig::default();
        assert_eq!(cfg.tap_factors(), vec![1, 2, 4, 2, 1]);
        let names: Vec<String> = cfg.tap_names().iter().map(|t| t.to_string()).collect();
        assert_eq!(names, ["enc_1", "enc_2", "bottleneck", "dec_1", "dec_2"]);
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let cfg = UNetConfig::default();
        assert!(cfg.check_input_size(64, 64).is_ok());
        assert!(matches!(cfg.check_input_size(30, 32), Err(Error::Config(_))));
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let m = UNet::init(UNetConfig { depth: 1, base_channels: 2, ..Default::default() }, 1).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(UNet::read_checkpoint(&buf[..]), Err(Error::Parse { .. })));
        assert!(matches!(UNet::read_checkpoint(&b"NOTACKPT"[..]), Err(Error::Parse { offset: 0, .. })));
    }
}

//! Synthetic classification data and the on-disk dataset format.
//!
//! Classes get visually distinctive procedural patterns (oriented bars,
//! crosses, checkerboards, blobs) with per-sample position/phase jitter and
//! additive Gaussian noise. Generation is a pure function of the arguments:
//! the same seed yields a byte-identical dataset.
//!
//! File format ("LVDS"): magic, version, counts and shape as little-endian
//! integers, raw image bytes, then one u16 label per image.

use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"LVDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub seed: u64,
    /// Row-major (h, w, c) byte grids.
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Image i as a float tensor in [-1, 1].
    pub fn image_tensor<T: Real>(&self, i: usize) -> Tensor<T> {
        let data: Vec<T> = self.images[i]
            .iter()
            .map(|&b| T::from_f64((b as f64 / 255.0 - 0.5) / 0.5))
            .collect();
        Tensor::new(vec![self.height, self.width, self.channels], data).expect("image shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for img in &self.images {
            out.extend_from_slice(img);
        }
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n = r.u32()? as usize;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let seed = r.u64()?;
        let pixel_count = height
            .checked_mul(width)
            .and_then(|x| x.checked_mul(channels))
            .ok_or_else(|| Error::Format("image shape overflows".into()))?;
        let mut images = Vec::with_capacity(n);
        for _ in 0..n {
            images.push(r.take(pixel_count)?.to_vec());
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let b = r.take(2)?;
            let l = u16::from_le_bytes([b[0], b[1]]);
            if (l as usize) >= classes {
                return Err(Error::Format(format!("label {l} out of range for {classes} classes")));
            }
            labels.push(l);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Dataset { height, width, channels, classes, seed, images, labels })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Deterministic class-distinctive dataset. Labels cycle `i % classes`, so
/// when `classes` divides `n` every class gets exactly `n / classes`
/// samples.
pub fn gen_synthetic(
    classes: usize,
    n: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if classes > u16::MAX as usize {
        return Err(Error::Config("at most 65535 classes".into()));
    }
    if n < classes {
        return Err(Error::Config(format!("n = {n} < classes = {classes}")));
    }
    if size < 4 {
        return Err(Error::Config("size must be at least 4".into()));
    }
    if channels == 0 {
        return Err(Error::Config("channels must be positive".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class as u16);
        let canvas = render_class(class, size, &mut rng);
        let mut img = Vec::with_capacity(size * size * channels);
        for &v in &canvas {
            let noisy = v + rng.normal() * 0.08;
            let byte = (noisy.clamp(0.0, 1.0) * 255.0).round() as u8;
            for _ in 0..channels {
                img.push(byte);
            }
        }
        images.push(img);
    }
    Ok(Dataset { height: size, width: size, channels, classes, seed, images, labels })
}

/// Additive Gaussian corruption. `sigma` is expressed on the [0, 1] pixel
/// scale; normalized tensors span [-1, 1], hence the factor 2.
pub fn corrupt<T: Real>(image: &Tensor<T>, sigma: f64, rng: &mut SplitMix64) -> Tensor<T> {
    let data: Vec<T> = image
        .data()
        .iter()
        .map(|&v| T::from_f64(v.to_f64() + 2.0 * sigma * rng.normal()))
        .collect();
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}

/// One jittered pattern instance on a [0, 1] canvas.
fn render_class(class: usize, size: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let kind = class % 4;
    let variant = class / 4;
    let s = size as f64;
    let mut canvas = vec![0.0; size * size];
    match kind {
        0 => {
            // Oriented bars; orientation steps with the variant.
            let theta = std::f64::consts::PI / 4.0 * ((variant % 4) as f64);
            let period = (s / (4.0 + variant as f64)).max(2.0);
            let phase = rng.range_f64(0.0, period);
            for y in 0..size {
                for x in 0..size {
                    let t = x as f64 * theta.cos() + y as f64 * theta.sin();
                    let on = ((t + phase) / period).rem_euclid(1.0) < 0.5;
                    canvas[y * size + x] = if on { 0.9 } else { 0.1 };
                }
            }
        }
        1 => {
            // Cross: one horizontal and one vertical band.
            let half = (s / 8.0).max(1.0);
            let cx = s / 2.0 + rng.range_f64(-s / 8.0, s / 8.0);
            let cy = s / 2.0 + rng.range_f64(-s / 8.0, s / 8.0);
            for y in 0..size {
                for x in 0..size {
                    let on = (x as f64 - cx).abs() < half || (y as f64 - cy).abs() < half;
                    canvas[y * size + x] = if on { 0.9 } else { 0.1 };
                }
            }
        }
        2 => {
            // Checkerboard with a jittered phase.
            let cell = (size / (3 + variant)).max(2);
            let ox = rng.below(cell);
            let oy = rng.below(cell);
            for y in 0..size {
                for x in 0..size {
                    let parity = ((x + ox) / cell + (y + oy) / cell) % 2;
                    canvas[y * size + x] = if parity == 0 { 0.9 } else { 0.1 };
                }
            }
        }
        _ => {
            // Soft blob.
            let sigma = s / 5.0;
            let cx = s / 2.0 + rng.range_f64(-s / 6.0, s / 6.0);
            let cy = s / 2.0 + rng.range_f64(-s / 6.0, s / 6.0);
            for y in 0..size {
                for x in 0..size {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    canvas[y * size + x] = 0.1 + 0.8 * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    canvas
}

//! 8-bit RGB images, file I/O, cropping, resizing and normalization.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Row-major interleaved RGB samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!("image must be non-empty, got {height}×{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::InvalidShape(format!(
                "{height}×{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(ImageBuffer { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        ImageBuffer { height, width, data }
    }

    /// Builds an image from a per-pixel function.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        ImageBuffer { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Bilinear sample at real coordinates, clamped to the border.
    pub(crate) fn sample(&self, y: f64, x: f64) -> [f64; 3] {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let v = |yy: usize, xx: usize| self.data[(yy * self.width + xx) * 3 + c] as f64;
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    /// Raw layout: `u32` height, `u32` width (little-endian), RGB bytes.
    pub fn encode_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_raw(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("raw image shorter than its header".into()));
        }
        let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        Self::new(h, w, bytes[8..].to_vec())
    }

    /// Reads PNG, JPEG or raw (`.raw`) files; the format follows the extension.
    pub fn load(path: &Path) -> Result<Self> {
        let is_raw = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("raw"));
        if is_raw {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            return Self::decode_raw(&bytes).map_err(|e| Error::Image {
                path: path.to_owned(),
                message: e.to_string(),
            });
        }
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(h as usize, w as usize, rgb.into_raw())
    }

    /// Writes PNG, or raw when the extension is `.raw`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let is_raw = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("raw"));
        if is_raw {
            return std::fs::write(path, self.encode_raw()).map_err(|e| Error::io(path, e));
        }
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Image {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }
}

/// Centered square of side `min(H, W)`, offsets `⌊(L − s)/2⌋`.
pub fn center_square_crop(img: &ImageBuffer) -> ImageBuffer {
    let s = img.height.min(img.width);
    let (oy, ox) = ((img.height - s) / 2, (img.width - s) / 2);
    if oy == 0 && ox == 0 {
        return img.clone();
    }
    let mut data = Vec::with_capacity(s * s * 3);
    for y in oy..oy + s {
        let start = (y * img.width + ox) * 3;
        data.extend_from_slice(&img.data[start..start + s * 3]);
    }
    ImageBuffer {
        height: s,
        width: s,
        data,
    }
}

pub(crate) fn round_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Bilinear resize with half-pixel centers.
pub fn resize(img: &ImageBuffer, height: usize, width: usize) -> ImageBuffer {
    if img.height == height && img.width == width {
        return img.clone();
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    ImageBuffer::from_fn(height, width, |y, x| {
        let v = img.sample((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5);
        [round_u8(v[0]), round_u8(v[1]), round_u8(v[2])]
    })
}

/// Crop to the centered square, then resize to `side × side`.
pub fn preprocess(img: &ImageBuffer, side: usize) -> ImageBuffer {
    resize(&center_square_crop(img), side, side)
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [Real; 3],
    pub std: [Real; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Streaming accumulator for [`NormStats`].
#[derive(Clone, Debug, Default)]
pub struct NormAccumulator {
    sum: [f64; 3],
    sum_sq: [f64; 3],
    count: u64,
}

/// Standard deviations below this are treated as 1 to keep constant
/// inputs finite.
const MIN_STD: f64 = 1e-6;

impl NormAccumulator {
    pub fn add(&mut self, img: &ImageBuffer) {
        for px in img.data.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
        }
        self.count += (img.height * img.width) as u64;
    }

    pub fn finish(&self) -> NormStats {
        if self.count == 0 {
            return NormStats::default();
        }
        let n = self.count as f64;
        let mut s = NormStats::default();
        for c in 0..3 {
            let m = self.sum[c] / n;
            let var = (self.sum_sq[c] / n - m * m).max(0.0);
            let sd = var.sqrt();
            s.mean[c] = m as Real;
            s.std[c] = if sd < MIN_STD { 1.0 } else { sd as Real };
        }
        s
    }
}

impl NormStats {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a ImageBuffer>) -> Self {
        let mut acc = NormAccumulator::default();
        for img in images {
            acc.add(img);
        }
        acc.finish()
    }

    /// Checkpoint tensors `norm.mean` and `norm.std`.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        vec![
            ("norm.mean".into(), Tensor::from_vec(self.mean.to_vec())),
            ("norm.std".into(), Tensor::from_vec(self.std.to_vec())),
        ]
    }

    pub fn from_named<'a>(mut get: impl FnMut(&str) -> Option<&'a Tensor>) -> Option<Self> {
        let mean = get("norm.mean")?.data().try_into().ok()?;
        let std = get("norm.std")?.data().try_into().ok()?;
        Some(NormStats { mean, std })
    }

    /// `mean=r,g,b` and `std=r,g,b` lines.
    pub fn to_text(&self) -> String {
        let j = |v: &[Real; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        format!("mean={}\nstd={}\n", j(&self.mean), j(&self.std))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = NormStats::default();
        let mut seen = (false, false);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let bad = || Error::Format(format!("bad normalization line `{line}`"));
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            let vals: Vec<Real> = v
                .split(',')
                .map(|x| x.trim().parse::<Real>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            let arr: [Real; 3] = vals.try_into().map_err(|_| bad())?;
            match k.trim() {
                "mean" => (s.mean, seen.0) = (arr, true),
                "std" => (s.std, seen.1) = (arr, true),
                _ => return Err(bad()),
            }
        }
        if seen != (true, true) {
            return Err(Error::Format("normalization file needs mean and std".into()));
        }
        Ok(s)
    }

    /// Channel-major `3 × H × W` normalized samples.
    pub fn to_chw(&self, img: &ImageBuffer) -> Vec<Real> {
        let plane = img.height * img.width;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = (px[c] as Real / 255.0 - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// Stacks equally sized images into an `N × 3 × H × W` tensor.
pub fn normalize(batch: &[ImageBuffer], stats: &NormStats) -> Result<Tensor> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidShape("cannot normalize an empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(batch.len() * 3 * h * w);
    for img in batch {
        if (img.height, img.width) != (h, w) {
            return Err(Error::InvalidShape(format!(
                "batch mixes {h}×{w} and {}×{} images",
                img.height, img.width
            )));
        }
        data.extend(stats.to_chw(img));
    }
    Tensor::new(&[batch.len(), 3, h, w], data)
}

//! Planar floating-point images and binary NetPBM (P5/P6) IO.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// An image with values in `[0, 1]`, stored channel-planar (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("image dimensions must be at least 1, got {height}x{width}"));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid!("images have 1 or 3 channels, got {channels}"));
        }
        if data.len() != height * width * channels {
            return Err(invalid!("{height}x{width}x{channels} image needs {} values, got {}", height * width * channels, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image construction".into()));
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Self { height, width, channels, data })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Mean over channels; single-channel images are returned as is.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| (0..self.channels).map(|c| self.data[c * n + i]).sum::<f32>() / self.channels as f32)
            .collect();
        Image { height: self.height, width: self.width, channels: 1, data }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut data = self.data.clone();
        data.chunks_mut(self.width).for_each(|row| row.reverse());
        Image { data, ..*self }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Multiplies every value by `c`, clamping into range.
    pub fn scaled(&self, c: f32) -> Result<Image> {
        Image::new(self.height, self.width, self.channels, self.data.iter().map(|v| v * c).collect())
    }

    /// Stacks same-sized images into an `N x C x H x W` tensor.
    pub fn batch(images: &[Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| invalid!("empty image batch"))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if (img.height, img.width, img.channels) != (h, w, c) {
                return Err(invalid!("batch mixes {h}x{w}x{c} with {}x{}x{}", img.height, img.width, img.channels));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::new(&[images.len(), c, h, w], data)
    }

    /// Encodes as binary PGM (1 channel) or PPM (3 channels), maxval 255.
    pub fn to_netpbm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        let n = self.height * self.width;
        out.reserve(n * self.channels);
        for i in 0..n {
            for c in 0..self.channels {
                out.push((self.data[c * n + i] * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_netpbm(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::Format(format!("unsupported NetPBM magic {other:?}"))),
        };
        let width = parse_header_int(bytes, &mut pos)?;
        let height = parse_header_int(bytes, &mut pos)?;
        let maxval = parse_header_int(bytes, &mut pos)?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Format(format!("maxval {maxval} out of range")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let bps = if maxval < 256 { 1 } else { 2 };
        let n = width * height;
        let raster = bytes.get(pos..pos + n * channels * bps).ok_or_else(|| Error::Format("truncated raster".into()))?;
        let mut data = vec![0.0f32; n * channels];
        for i in 0..n {
            for c in 0..channels {
                let j = (i * channels + c) * bps;
                let v = if bps == 1 { raster[j] as usize } else { (raster[j] as usize) << 8 | raster[j + 1] as usize };
                data[c * n + i] = v as f32 / maxval as f32;
            }
        }
        Image::new(height, width, channels, data)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Image::from_netpbm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_netpbm())?;
        Ok(())
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("truncated header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    tok.parse().map_err(|_| Error::Format(format!("bad header field {tok:?}")))
}

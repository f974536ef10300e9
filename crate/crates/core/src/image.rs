//! RGB images in PPM format, interpolation baselines and GP-mixture upsampling.
//!
//! Pixel `(row, col)` of a `w × h` image sits at the covariate
//! `((col + 0.5) / w, (row + 0.5) / h)` in the unit square, so a source
//! image and its upsampled version share one coordinate system.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::circuit::build;
use crate::config::RunConfig;
use crate::data::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::inference::predict;
use crate::model::write_atomic;
use crate::training::train;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Image> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image must not be empty".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Image {
        Image {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Image {
        let mut data = Vec::with_capacity(width * height * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Image { width, height, data }
    }
}

/// Clamps to `[0, 255]` and rounds half up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 255.0) + 0.5).floor().min(255.0) as u8
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Tokens<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn word(&mut self) -> Option<&str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() && self.bytes[self.pos] != b'#' {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok().filter(|w| !w.is_empty())
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.word()
            .and_then(|w| w.parse().ok())
            .ok_or_else(|| Error::Format(format!("PPM header: missing or invalid {what}")))
    }
}

/// Parses a binary (P6) or ASCII (P3) PPM with at most 8 bits per channel.
pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    let mut t = Tokens { bytes, pos: 0 };
    let binary = match t.word() {
        Some("P6") => true,
        Some("P3") => false,
        other => return Err(Error::Format(format!("PPM header: unsupported magic {other:?}"))),
    };
    let width = t.number("width")?;
    let height = t.number("height")?;
    let maxval = t.number("maximum value")?;
    if width == 0 || height == 0 {
        return Err(Error::Format("PPM header: zero image size".into()));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::Format(format!("PPM header: maximum value {maxval} is not in 1..=255")));
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Error::Format("PPM header: image too large".into()))?;
    let raw: Vec<usize> = if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = t.pos + 1;
        let end = start + n;
        if end > bytes.len() {
            return Err(Error::Format(format!("PPM raster: expected {n} bytes, found {}", bytes.len().saturating_sub(start))));
        }
        bytes[start..end].iter().map(|&b| b as usize).collect()
    } else {
        (0..n)
            .map(|i| t.number(&format!("sample {i}")))
            .collect::<Result<_>>()?
    };
    if let Some(v) = raw.iter().find(|&&v| v > maxval) {
        return Err(Error::Format(format!("PPM raster: sample {v} exceeds maximum {maxval}")));
    }
    let data = if maxval == 255 {
        raw.into_iter().map(|v| v as u8).collect()
    } else {
        raw.into_iter().map(|v| quantize(v as f64 * 255.0 / maxval as f64)).collect()
    };
    Image::new(width, height, data)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes)
}

/// Binary (P6) encoding.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// ASCII (P3) encoding, one pixel per line.
pub fn encode_ppm_ascii(img: &Image) -> Vec<u8> {
    let mut out = format!("P3\n{} {}\n255\n", img.width, img.height);
    for px in img.data.chunks(3) {
        out.push_str(&format!("{} {} {}\n", px[0], px[1], px[2]));
    }
    out.into_bytes()
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write_atomic(path.as_ref(), &encode_ppm(img))
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 2 || factor == 4 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("upsampling factor must be 2 or 4, got {factor}")))
    }
}

/// Averages non-overlapping `factor × factor` blocks; dimensions must be divisible by `factor`.
pub fn downsample_box(img: &Image, factor: usize) -> Result<Image> {
    check_factor(factor)?;
    if !img.width.is_multiple_of(factor) || !img.height.is_multiple_of(factor) {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is not divisible by {factor}",
            img.width, img.height
        )));
    }
    let area = (factor * factor) as f64;
    Ok(Image::from_fn(img.width / factor, img.height / factor, |r, c| {
        let mut acc = [0.0; 3];
        for dr in 0..factor {
            for dc in 0..factor {
                let p = img.pixel(r * factor + dr, c * factor + dc);
                for k in 0..3 {
                    acc[k] += p[k] as f64;
                }
            }
        }
        acc.map(|v| quantize(v / area))
    }))
}

/// Replicates every source pixel into a `factor × factor` block.
pub fn upsample_nearest(img: &Image, factor: usize) -> Result<Image> {
    check_factor(factor)?;
    Ok(Image::from_fn(img.width * factor, img.height * factor, |r, c| {
        img.pixel(r / factor, c / factor)
    }))
}

/// Bilinear interpolation between source pixel centres, clamped at the borders.
pub fn upsample_bilinear(img: &Image, factor: usize) -> Result<Image> {
    check_factor(factor)?;
    let coord = |t: usize, n: usize| {
        let s = ((t as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n.saturating_sub(2));
        (i, (i + 1).min(n - 1), s - i as f64)
    };
    Ok(Image::from_fn(img.width * factor, img.height * factor, |r, c| {
        let (r0, r1, fr) = coord(r, img.height);
        let (c0, c1, fc) = coord(c, img.width);
        let [a, b, cc, d] = [img.pixel(r0, c0), img.pixel(r0, c1), img.pixel(r1, c0), img.pixel(r1, c1)];
        std::array::from_fn(|k| {
            let top = a[k] as f64 * (1.0 - fc) + b[k] as f64 * fc;
            let bottom = cc[k] as f64 * (1.0 - fc) + d[k] as f64 * fc;
            quantize(top * (1.0 - fr) + bottom * fr)
        })
    }))
}

/// Structure and training settings for upsampling: two-way splits and at most 256 pixels per expert.
pub fn upsample_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.structure.leaf_threshold = 256;
    cfg.pipeline.n_outputs = 3;
    cfg
}

fn pixel_coords(width: usize, height: usize) -> DMatrix<f64> {
    DMatrix::from_fn(width * height, 2, |i, j| {
        let (r, c) = (i / width, i % width);
        if j == 0 {
            (c as f64 + 0.5) / width as f64
        } else {
            (r as f64 + 0.5) / height as f64
        }
    })
}

/// Fits a mixture of GP experts to the pixels of `img` (coordinates in the unit square,
/// standardised RGB targets) and renders its posterior mean on the finer grid.
pub fn upsample_momogp(img: &Image, factor: usize, cfg: &RunConfig) -> Result<Image> {
    check_factor(factor)?;
    cfg.structure.validate()?;
    cfg.train.validate()?;
    let x = pixel_coords(img.width, img.height);
    let y = DMatrix::from_fn(img.width * img.height, 3, |i, k| img.data[3 * i + k] as f64);
    let raw = Dataset::new(x, y)?;
    let stats = Standardization::fit(&raw);
    let data = Dataset::new(raw.x.clone(), stats.transform_y(&raw.y))?;
    let mut circuit = build(&data, &cfg.structure)?;
    let report = train(&mut circuit, &cfg.train)?;
    log::info!(
        "upsampling with {} experts, total mll {:.3}",
        circuit.leaf_ids().len(),
        report.final_total_mll
    );

    let (w, h) = (img.width * factor, img.height * factor);
    let grid = pixel_coords(w, h);
    let means = (0..w * h)
        .into_par_iter()
        .map(|i| predict(&circuit, &[grid[(i, 0)], grid[(i, 1)]]).map(|m| m.mean))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(w * h * 3);
    for m in means {
        for k in 0..3 {
            data.push(quantize(m[k] * stats.y_std[k] + stats.y_mean[k]));
        }
    }
    Image::new(w, h, data)
}

/// Per-channel RMSE in pixel units, averaged over the three channels.
pub fn image_rmse(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::InvalidArgument(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let n = (a.width * a.height) as f64;
    let mut sq = [0.0; 3];
    for (pa, pb) in a.data.chunks(3).zip(b.data.chunks(3)) {
        for k in 0..3 {
            sq[k] += (pa[k] as f64 - pb[k] as f64).powi(2);
        }
    }
    Ok(sq.iter().map(|s| (s / n).sqrt()).sum::<f64>() / 3.0)
}

/// A smooth colour gradient with a bright rectangle and a dark disc drawn over it.
pub fn synthetic_image(size: usize) -> Image {
    let s = size as f64;
    Image::from_fn(size, size, |r, c| {
        let u = (c as f64 + 0.5) / s;
        let v = (r as f64 + 0.5) / s;
        if (0.15..0.45).contains(&u) && (0.55..0.85).contains(&v) {
            return [235, 200, 60];
        }
        if (u - 0.68).powi(2) + (v - 0.32).powi(2) < 0.17f64.powi(2) {
            return [40, 30, 110];
        }
        [
            quantize(40.0 + 180.0 * u),
            quantize(60.0 + 150.0 * v),
            quantize(128.0 + 90.0 * (std::f64::consts::TAU * (u + v) / 2.0).sin()),
        ]
    })
}

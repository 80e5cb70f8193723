//! Dense planar images and PNG interchange.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("png decode failed: {0}")]
    Decode(String),
    #[error("png encode failed: {0}")]
    Encode(String),
    #[error("unsupported png layout: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Channel-planar image: `data[(c * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(RasterError::DimensionMismatch("empty raster".into()));
        }
        if data.len() != height * width * channels {
            return Err(RasterError::DimensionMismatch(format!(
                "{} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        Raster {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_size(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Channel mean `(R + G + B) / 3` for 3-channel rasters, identity for 1.
    pub fn gray(&self) -> Vec<f32> {
        let n = self.plane_len();
        match self.channels {
            1 => self.data.clone(),
            _ => (0..n)
                .map(|i| (self.data[i] + self.data[n + i] + self.data[2 * n + i]) / 3.0)
                .collect(),
        }
    }

    pub fn mean_abs_diff(&self, other: &Raster) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        s / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    /// Bilinear resize with half-pixel centers (edges clamped).
    pub fn resize(&self, height: usize, width: usize) -> Raster {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Raster::zeros(height, width, self.channels);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..height {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let wy = (fy - y0 as f64) as f32;
                for x in 0..width {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let wx = (fx - x0 as f64) as f32;
                    let a = src[y0 * self.width + x0] * (1.0 - wx) + src[y0 * self.width + x1] * wx;
                    let b = src[y1 * self.width + x0] * (1.0 - wx) + src[y1 * self.width + x1] * wx;
                    dst[y * width + x] = a * (1.0 - wy) + b * wy;
                }
            }
        }
        out
    }

    pub fn read_png(path: &Path) -> Result<Raster, RasterError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode_png(&bytes)
    }

    /// Decodes 8-bit gray, gray-alpha, RGB or RGBA into `[0, 1]` floats.
    pub fn decode_png(bytes: &[u8]) -> Result<Raster, RasterError> {
        let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| RasterError::Decode(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| RasterError::Decode("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| RasterError::Decode(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(RasterError::Unsupported(format!("{other:?}"))),
        };
        if info.bit_depth != png::BitDepth::Eight {
            return Err(RasterError::Unsupported(format!("{:?}", info.bit_depth)));
        }
        let mut out = Raster::zeros(h, w, channels);
        for y in 0..h {
            let row = &buf[y * info.line_size..];
            for x in 0..w {
                for c in 0..channels {
                    out.set(c, y, x, row[x * channels + c] as f32 / 255.0);
                }
            }
        }
        Ok(out)
    }

    /// Encodes 1, 3 or 4 channels as 8-bit gray, RGB or RGBA.
    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => return Err(RasterError::Unsupported(format!("{c} channels"))),
        };
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, self.width as u32, self.height as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| RasterError::Encode(e.to_string()))?;
            let (h, w, ch) = (self.height, self.width, self.channels);
            let mut px = vec![0u8; h * w * ch];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..ch {
                        px[(y * w + x) * ch + c] = quantize(self.get(c, y, x));
                    }
                }
            }
            writer
                .write_image_data(&px)
                .map_err(|e| RasterError::Encode(e.to_string()))?;
        }
        Ok(bytes)
    }

    pub fn write_png(&self, path: &Path) -> Result<(), RasterError> {
        let bytes = self.encode_png()?;
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Foreground color plus its alpha mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundLayer {
    pub color: Raster,
    pub mask: Raster,
}

impl ForegroundLayer {
    pub fn new(color: Raster, mask: Raster) -> Result<Self, RasterError> {
        if color.channels != 3 || mask.channels != 1 {
            return Err(RasterError::DimensionMismatch(format!(
                "foreground needs 3 color + 1 mask channels, got {} + {}",
                color.channels, mask.channels
            )));
        }
        if !color.same_size(&mask) {
            return Err(RasterError::DimensionMismatch(format!(
                "color {}x{} vs mask {}x{}",
                color.height, color.width, mask.height, mask.width
            )));
        }
        Ok(ForegroundLayer { color, mask })
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    /// Splits an RGBA raster into color and alpha.
    pub fn from_rgba(rgba: &Raster) -> Result<Self, RasterError> {
        if rgba.channels != 4 {
            return Err(RasterError::DimensionMismatch(format!(
                "expected RGBA, got {} channels",
                rgba.channels
            )));
        }
        let n = rgba.plane_len();
        let color = Raster::new(rgba.height, rgba.width, 3, rgba.data[..3 * n].to_vec())?;
        let mask = Raster::new(rgba.height, rgba.width, 1, rgba.data[3 * n..].to_vec())?;
        Self::new(color, mask)
    }

    pub fn to_rgba(&self) -> Raster {
        let mut data = self.color.data.clone();
        data.extend_from_slice(&self.mask.data);
        Raster::new(self.height(), self.width(), 4, data).expect("consistent layer")
    }

    pub fn resize(&self, height: usize, width: usize) -> ForegroundLayer {
        ForegroundLayer {
            color: self.color.resize(height, width),
            mask: self.mask.resize(height, width),
        }
    }
}

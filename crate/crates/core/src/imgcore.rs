//! Raster images, PNG I/O, grayscale conversion, binarization and resizing.

use std::io::Cursor;

use crate::error::{Error, Result};

/// ITU-R BT.601 luma weights for (R, G, B).
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Default binarization threshold; gray values strictly below it are ink.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Channel semantics of a [`RasterImage`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ColorSpace {
    Gray,
    Rgb,
    /// RGB plus a skeleton plane.
    Rgbs,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Gray => 1,
            ColorSpace::Rgb => 3,
            ColorSpace::Rgbs => 4,
        }
    }

    pub fn from_channels(channels: usize) -> Result<Self> {
        match channels {
            1 => Ok(ColorSpace::Gray),
            3 => Ok(ColorSpace::Rgb),
            4 => Ok(ColorSpace::Rgbs),
            other => Err(Error::UnsupportedChannels(other)),
        }
    }
}

/// Row-major, channel-interleaved image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    space: ColorSpace,
    data: Vec<f64>,
}

impl RasterImage {
    /// Builds an image, validating length and value range.
    pub fn new(width: usize, height: usize, space: ColorSpace, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidSize { width, height });
        }
        let expected = width * height * space.channels();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "image data has {} values, {}x{}x{} needs {}",
                data.len(),
                width,
                height,
                space.channels(),
                expected
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::MalformedImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            space,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, space: ColorSpace, value: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            space,
            vec![value; width * height * space.channels()],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.space.channels()
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels() + c]
    }

    /// Copies one channel into a planar buffer.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        let ch = self.channels();
        self.data.iter().skip(c).step_by(ch).copied().collect()
    }

    fn expect_channels(&self, expected: usize) -> Result<()> {
        if self.channels() != expected {
            return Err(Error::ChannelMismatch {
                expected,
                actual: self.channels(),
            });
        }
        Ok(())
    }
}

/// `{0,1}` grid where 1 marks ink.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryGrid {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryGrid {
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "grid has {} bits, {}x{} needs {}",
                bits.len(),
                width,
                height,
                width * height
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::MalformedImage("grid bits must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.bits[y * self.width + x]
    }

    /// Reads with zero padding outside the grid.
    #[inline]
    pub fn get_padded(&self, x: isize, y: isize) -> u8 {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            0
        } else {
            self.bits[y as usize * self.width + x as usize]
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, bit: bool) {
        self.bits[y * self.width + x] = bit as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// True when every ink pixel of `self` is also ink in `other`.
    pub fn is_subset_of(&self, other: &BinaryGrid) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }

    /// Renders ink as black on white, single channel.
    pub fn to_image(&self) -> RasterImage {
        let data = self
            .bits
            .iter()
            .map(|&b| if b == 1 { 0.0 } else { 1.0 })
            .collect();
        RasterImage {
            width: self.width,
            height: self.height,
            space: ColorSpace::Gray,
            data,
        }
    }
}

/// Decodes an 8-bit gray/RGB(A) PNG into an RGB image.
///
/// Gray is replicated to three channels and alpha is composited over white.
pub fn decode_png(bytes: &[u8]) -> Result<RasterImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::MalformedImage(e.to_string()))?;
    let depth = reader.info().bit_depth;
    if depth == png::BitDepth::Sixteen {
        return Err(Error::UnsupportedDepth(16));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::MalformedImage("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::MalformedImage(e.to_string()))?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedDepth(frame.bit_depth as u8));
    }
    let (width, height) = (frame.width as usize, frame.height as usize);
    let stride = frame.line_size;
    let src_channels = frame.color_type.samples();
    let mut data = Vec::with_capacity(width * height * 3);
    for row in buf.chunks(stride).take(height) {
        for px in row[..width * src_channels].chunks_exact(src_channels) {
            let (rgb, alpha) = match frame.color_type {
                png::ColorType::Grayscale => ([px[0]; 3], 255),
                png::ColorType::GrayscaleAlpha => ([px[0]; 3], px[1]),
                png::ColorType::Rgb => ([px[0], px[1], px[2]], 255),
                png::ColorType::Rgba => ([px[0], px[1], px[2]], px[3]),
                png::ColorType::Indexed => {
                    return Err(Error::MalformedImage("palette was not expanded".into()))
                }
            };
            for c in rgb {
                data.push(composite_over_white(c, alpha));
            }
        }
    }
    RasterImage::new(width, height, ColorSpace::Rgb, data)
}

fn composite_over_white(c: u8, alpha: u8) -> f64 {
    if alpha == 255 {
        return c as f64 / 255.0;
    }
    let a = alpha as f64 / 255.0;
    (a * (c as f64 / 255.0) + (1.0 - a)).clamp(0.0, 1.0)
}

/// Encodes a gray or RGB image as 8-bit PNG, storing `round(v * 255)`.
pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>> {
    let color = match img.space {
        ColorSpace::Gray => png::ColorType::Grayscale,
        ColorSpace::Rgb => png::ColorType::Rgb,
        ColorSpace::Rgbs => return Err(Error::UnsupportedChannels(4)),
    };
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::MalformedImage(e.to_string()))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::MalformedImage(e.to_string()))?;
        writer
            .finish()
            .map_err(|e| Error::MalformedImage(e.to_string()))?;
    }
    Ok(out)
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_png(path: &std::path::Path) -> Result<RasterImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_png(&bytes).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_png(path: &std::path::Path, img: &RasterImage) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

/// BT.601 luminance of an RGB image.
pub fn to_gray(img: &RasterImage) -> Result<RasterImage> {
    img.expect_channels(3)?;
    let data = img.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect();
    Ok(RasterImage {
        width: img.width,
        height: img.height,
        space: ColorSpace::Gray,
        data,
    })
}

/// BT.601 luma written relative to green so that equal channels map exactly to themselves.
#[inline]
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    let [wr, _, wb] = LUMA_WEIGHTS;
    (g + wr * (r - g) + wb * (b - g)).clamp(0.0, 1.0)
}

/// Marks pixels strictly darker than `threshold` as ink.
pub fn binarize(img: &RasterImage, threshold: f64) -> Result<BinaryGrid> {
    img.expect_channels(1)?;
    check_threshold(threshold)?;
    let bits = img.data.iter().map(|&v| (v < threshold) as u8).collect();
    Ok(BinaryGrid {
        width: img.width,
        height: img.height,
        bits,
    })
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidThreshold(threshold))
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize(img: &RasterImage, width: usize, height: usize) -> Result<RasterImage> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidSize { width, height });
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let ch = img.channels();
    let xs = sample_positions(img.width, width);
    let ys = sample_positions(img.height, height);
    let mut data = Vec::with_capacity(width * height * ch);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..ch {
                let a = img.get(x0, y0, c);
                let b = img.get(x1, y0, c);
                let d = img.get(x0, y1, c);
                let e = img.get(x1, y1, c);
                // Lerp form keeps constant regions exactly constant.
                let top = a + fx * (b - a);
                let bottom = d + fx * (e - d);
                data.push((top + fy * (bottom - top)).clamp(0.0, 1.0));
            }
        }
    }
    Ok(RasterImage {
        width,
        height,
        space: img.space,
        data,
    })
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

//! Image containers and basic pixel plumbing.
//!
//! [`Image`] stores interleaved rows of 32-bit samples (height x width x channels,
//! nominally in [0,1] after PNG load). Numeric kernels do not work on it directly;
//! they go through [`Plane`], a single channel widened to f64. Values that leave
//! [0,1] during processing are kept as-is and only clipped when a PNG is written.

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved H x W x C image, 32-bit samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::EmptyInput);
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} samples for {}x{}x{}, got {}",
                height * width * channels,
                height,
                width,
                channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// One channel widened to f64.
    pub fn plane(&self, c: usize) -> Plane {
        let mut data = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                data.push(self.get(y, x, c) as f64);
            }
        }
        Plane {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn planes(&self) -> Vec<Plane> {
        (0..self.channels).map(|c| self.plane(c)).collect()
    }

    /// Reassemble an interleaved image from per-channel planes. Values are
    /// narrowed to f32 without clipping.
    pub fn from_planes(planes: &[Plane]) -> Result<Image> {
        let first = planes.first().ok_or(Error::EmptyInput)?;
        let (h, w) = (first.height, first.width);
        for p in planes {
            if p.height != h || p.width != w {
                return Err(Error::ShapeMismatch(
                    "planes must share dimensions".to_string(),
                ));
            }
        }
        let mut out = Image::zeros(h, w, planes.len());
        for (c, p) in planes.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    out.set(y, x, c, p.get(y, x) as f32);
                }
            }
        }
        Ok(out)
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyInput);
        }
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::ShapeMismatch(format!(
                "crop {}x{}+{}+{} exceeds image {}x{}",
                height, width, y0, x0, self.height, self.width
            )));
        }
        let mut out = Image::zeros(height, width, self.channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y0 + y, x0 + x, c));
                }
            }
        }
        Ok(out)
    }

    /// Load an 8-bit grayscale or RGB PNG; samples map to value/255.
    /// Other layouts (alpha, 16-bit) are converted to the nearest of the two.
    pub fn read_png(path: &Path) -> Result<Image> {
        use image::DynamicImage;
        let dynimg = image::open(path)?;
        let (gray, rgb) = match dynimg {
            DynamicImage::ImageLuma8(g) => (Some(g), None),
            DynamicImage::ImageRgb8(c) => (None, Some(c)),
            other => {
                if other.color().channel_count() <= 2 {
                    (Some(other.to_luma8()), None)
                } else {
                    (None, Some(other.to_rgb8()))
                }
            }
        };
        if let Some(g) = gray {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Image::new(h, w, 1, data)
        } else {
            let c = rgb.expect("either gray or rgb is set");
            let (w, h) = (c.width() as usize, c.height() as usize);
            let data = c.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Image::new(h, w, 3, data)
        }
    }

    /// Write as 8-bit PNG. Values are clipped to [0,1] and rounded to 0..=255.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let quantize = |v: f32| -> u8 { (v.clamp(0.0, 1.0) * 255.0).round() as u8 };
        match self.channels {
            1 => {
                let mut buf = image::GrayImage::new(self.width as u32, self.height as u32);
                for (x, y, px) in buf.enumerate_pixels_mut() {
                    px.0 = [quantize(self.get(y as usize, x as usize, 0))];
                }
                buf.save(path)?;
            }
            3 => {
                let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
                for (x, y, px) in buf.enumerate_pixels_mut() {
                    for c in 0..3 {
                        px.0[c] = quantize(self.get(y as usize, x as usize, c));
                    }
                }
                buf.save(path)?;
            }
            other => return Err(Error::BadChannelCount { got: other }),
        }
        Ok(())
    }
}

/// A single channel in f64, row-major. All numeric kernels operate on planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyInput);
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} samples for {}x{}, got {}",
                height * width,
                height,
                width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, y: usize) -> &mut [f64] {
        &mut self.data[y * self.width..(y + 1) * self.width]
    }
}

/// Difference of two images of identical shape; samples may be negative.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Residual {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::EmptyInput);
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(
                "residual data length does not match dimensions".to_string(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> Plane {
        let mut data = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                data.push(self.get(y, x, c) as f64);
            }
        }
        Plane {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Elementwise y - yhat.
pub fn residual(y: &Image, yhat: &Image) -> Result<Residual> {
    if !y.same_shape(yhat) {
        return Err(Error::ShapeMismatch(format!(
            "residual of {}x{}x{} against {}x{}x{}",
            y.height(),
            y.width(),
            y.channels(),
            yhat.height(),
            yhat.width(),
            yhat.channels()
        )));
    }
    let data = y
        .data()
        .iter()
        .zip(yhat.data())
        .map(|(a, b)| a - b)
        .collect();
    Residual::new(y.height(), y.width(), y.channels(), data)
}

/// All size x size windows at stride offsets, row-major over window positions.
pub fn extract_patches(img: &Image, size: usize, stride: usize) -> Result<Vec<Image>> {
    if stride == 0 {
        return Err(Error::ZeroStride);
    }
    if size == 0 || size > img.height() || size > img.width() {
        return Err(Error::PatchTooLarge {
            size,
            height: img.height(),
            width: img.width(),
        });
    }
    let mut out = Vec::new();
    let mut y0 = 0;
    while y0 + size <= img.height() {
        let mut x0 = 0;
        while x0 + size <= img.width() {
            out.push(img.crop(y0, x0, size, size)?);
            x0 += stride;
        }
        y0 += stride;
    }
    Ok(out)
}

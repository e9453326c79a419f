//! 8-bit RGB images, PNG I/O, padding and pixel mappings.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Interleaved 8-bit RGB pixels in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("empty image {width}×{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{} bytes for a {width}×{height} RGB image",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RgbImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Replicates the last column and row until both sides are multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> RgbImage {
        let w = self.width.div_ceil(multiple) * multiple;
        let h = self.height.div_ceil(multiple) * multiple;
        if (w, h) == (self.width, self.height) {
            return self.clone();
        }
        RgbImage::from_fn(w, h, |x, y| self.pixel(x.min(self.width - 1), y.min(self.height - 1)))
    }

    /// The `width × height` region whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<RgbImage> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Image(format!(
                "crop {width}×{height}+{x0}+{y0} outside {}×{}",
                self.width, self.height
            )));
        }
        Ok(RgbImage::from_fn(width, height, |x, y| self.pixel(x0 + x, y0 + y)))
    }

    /// `[1, H, W, 3]` tensor with `x = p / 127.5 - 1`.
    pub fn to_signed<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&p| T::from_f64(f64::from(p) / 127.5 - 1.0))
            .collect();
        Tensor::from_vec(Shape::hwc(self.height, self.width, 3), data).expect("pixel count")
    }

    /// Inverse of [`RgbImage::to_signed`] with rounding and clamping. Takes
    /// the first batch item.
    pub fn from_signed<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
        let [_, h, w, c] = t.shape().0;
        if c != 3 {
            return Err(Error::Image(format!("expected 3 channels, got {c}")));
        }
        let data = t.data()[..h * w * 3]
            .iter()
            .map(|v| ((v.to_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::new(w, h, data)
    }

    /// `[1, H, W, 3]` tensor in `[0, 1]`, the domain of the quality metrics.
    pub fn to_unit(&self) -> Tensor<f64> {
        let data = self.data.iter().map(|&p| f64::from(p) / 255.0).collect();
        Tensor::from_vec(Shape::hwc(self.height, self.width, 3), data).expect("pixel count")
    }

    pub fn decode_png(reader: impl Read) -> Result<RgbImage> {
        let mut decoder = png::Decoder::new(reader);
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let px = &buf[..info.buffer_size()];
        let data = match info.color_type {
            png::ColorType::Rgb => px.to_vec(),
            png::ColorType::Rgba => px.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => px.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            png::ColorType::Indexed => {
                return Err(Error::Image("palette images were not expanded".into()));
            }
        };
        RgbImage::new(w, h, data)
    }

    pub fn encode_png(&self, writer: impl Write) -> Result<()> {
        let mut enc = png::Encoder::new(writer, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        w.write_image_data(&self.data)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<RgbImage> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        Self::decode_png(std::io::BufReader::new(file))
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        self.encode_png(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

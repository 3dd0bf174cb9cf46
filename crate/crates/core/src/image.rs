//! Floating-point image tensors and conversion to and from encoded files.

use std::path::Path;

use image::{ImageFormat, RgbImage};
use ndarray::{s, Array3, ArrayView3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("unsupported image format (only PNG and JPEG are accepted)")]
    UnsupportedFormat,
    #[error("could not decode image: {0}")]
    Decode(String),
    #[error("could not encode image: {0}")]
    Encode(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("expected a 3-channel image, got {0} channels")]
    Channels(usize),
}

/// Channels × height × width image, values in `[0, 1]` before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(pub Array3<f32>);

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Self {
        ImageTensor(data)
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor(Array3::zeros((channels, height, width)))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        ImageTensor(Array3::from_elem((channels, height, width), value))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.0.view()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.0
    }

    /// Copy of the `size_h × size_w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> ImageTensor {
        ImageTensor(
            self.0
                .slice(s![.., top..top + size_h, left..left + size_w])
                .to_owned(),
        )
    }

    /// Left-right mirror.
    pub fn flip_horizontal(&self) -> ImageTensor {
        ImageTensor(self.0.slice(s![.., .., ..;-1]).to_owned())
    }

    pub fn mean(&self) -> f32 {
        self.0.mean().unwrap_or(0.0)
    }

    pub fn clamp01(&mut self) {
        self.0.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    /// Quantize to 8-bit RGB; values are clamped to `[0, 1]`.
    pub fn to_rgb8(&self) -> Result<RgbImage, ImageError> {
        if self.channels() != 3 {
            return Err(ImageError::Channels(self.channels()));
        }
        let (h, w) = (self.height(), self.width());
        let mut img = RgbImage::new(w as u32, h as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = self.0[[c, y as usize, x as usize]].clamp(0.0, 1.0);
                px.0[c] = (v * 255.0).round() as u8;
            }
        }
        Ok(img)
    }

    pub fn from_rgb8(img: &RgbImage) -> ImageTensor {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((3, h, w));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
            }
        }
        ImageTensor(data)
    }

    /// Round every value to the nearest multiple of 1/255 so the tensor survives
    /// an 8-bit PNG round trip unchanged.
    pub fn quantize_u8(&mut self) {
        self.0
            .mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let img = self.to_rgb8()?;
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Decode PNG or JPEG bytes into a 3-channel tensor. Alpha is dropped and
/// grayscale inputs are expanded to three channels.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor, ImageError> {
    let format = image::guess_format(bytes).map_err(|_| ImageError::UnsupportedFormat)?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(ImageError::UnsupportedFormat);
    }
    let dynamic = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| ImageError::Decode(e.to_string()))?;
    Ok(ImageTensor::from_rgb8(&dynamic.to_rgb8()))
}

pub fn load_image(path: &Path) -> Result<ImageTensor, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_image(&bytes)
}

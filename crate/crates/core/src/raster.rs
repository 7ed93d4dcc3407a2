//! Planar float images, rectangles and binary masks.

use std::path::Path;

use ::image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer rectangle in pixel units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub const fn new(left: usize, top: usize, width: usize, height: usize) -> Rect {
        Rect { left, top, width, height }
    }

    /// Rectangle anchored at the origin.
    pub const fn origin(width: usize, height: usize) -> Rect {
        Rect::new(0, 0, width, height)
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains_point(&self, x: usize, y: usize) -> bool {
        x >= self.left && x < self.right() && y >= self.top && y < self.bottom()
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.left >= self.left
            && other.top >= self.top
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// Whether the rectangle is non-empty and inside a `width x height` frame.
    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.area() > 0 && self.right() <= width && self.bottom() <= height
    }

    pub fn translated(&self, dx: isize, dy: isize) -> Option<Rect> {
        let left = self.left.checked_add_signed(dx)?;
        let top = self.top.checked_add_signed(dy)?;
        Some(Rect { left, top, ..*self })
    }
}

/// `round(v)` with halves rounded up.
pub fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor().max(0.0) as usize
}

/// Dimension after scaling, never below one pixel.
pub fn scaled_dim(dim: usize, scale: f64) -> usize {
    round_half_up(dim as f64 * scale).max(1)
}

/// Float image stored channel-major (`[channels, height, width]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<ImageTensor> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dataset(format!("image dimensions must be positive, got {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Dataset(format!(
                "image data has {} values, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        Ok(ImageTensor { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> ImageTensor {
        ImageTensor::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> ImageTensor {
        assert!(channels > 0 && height > 0 && width > 0);
        ImageTensor { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> ImageTensor {
        let mut img = ImageTensor::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    img.set(c, y, x, f(c, y, x));
                }
            }
        }
        img
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_valid_range(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn bounds(&self) -> Rect {
        Rect::origin(self.width, self.height)
    }

    /// Bilinear resampling with pixel-centre alignment and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> ImageTensor {
        assert!(height > 0 && width > 0);
        if (height, width) == self.dims() {
            return self.clone();
        }
        let ys = bilinear_taps(self.height, height);
        let xs = bilinear_taps(self.width, width);
        let mut out = ImageTensor::zeros(self.channels, height, width);
        for c in 0..self.channels {
            let src = self.plane(c);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * self.width + x0] * (1.0 - fx) + src[y0 * self.width + x1] * fx;
                    let bottom = src[y1 * self.width + x0] * (1.0 - fx) + src[y1 * self.width + x1] * fx;
                    out.set(c, oy, ox, top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        out
    }

    pub fn crop(&self, rect: Rect) -> Result<ImageTensor> {
        if !rect.fits_in(self.width, self.height) {
            return Err(Error::Inference(format!(
                "crop rectangle {rect:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(self.channels * rect.area());
        for c in 0..self.channels {
            let plane = self.plane(c);
            for y in rect.top..rect.bottom() {
                data.extend_from_slice(&plane[y * self.width + rect.left..y * self.width + rect.right()]);
            }
        }
        Ok(ImageTensor { channels: self.channels, height: rect.height, width: rect.width, data })
    }

    /// Zero-pads to `canvas x canvas` with the content anchored top-left.
    pub fn pad_to(&self, canvas: usize) -> Result<ImageTensor> {
        if self.height > canvas || self.width > canvas {
            return Err(Error::Dataset(format!(
                "canvas overflow: {}x{} image does not fit a {canvas}x{canvas} canvas",
                self.width, self.height
            )));
        }
        let mut out = ImageTensor::zeros(self.channels, canvas, canvas);
        self.paste_into(&mut out, 0, 0);
        Ok(out)
    }

    fn paste_into(&self, dst: &mut ImageTensor, left: usize, top: usize) {
        for c in 0..self.channels {
            for y in 0..self.height {
                let row = &self.plane(c)[y * self.width..(y + 1) * self.width];
                let start = (c * dst.height + top + y) * dst.width + left;
                dst.data[start..start + self.width].copy_from_slice(row);
            }
        }
    }

    pub fn concat_channels(&self, other: &ImageTensor) -> Result<ImageTensor> {
        if self.dims() != other.dims() {
            return Err(Error::Mask(format!(
                "cannot stack {}x{} with {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(ImageTensor { channels: self.channels + other.channels, height: self.height, width: self.width, data })
    }

    pub fn select_channels(&self, start: usize, count: usize) -> ImageTensor {
        let n = self.height * self.width;
        let data = self.data[start * n..(start + count) * n].to_vec();
        ImageTensor { channels: count, height: self.height, width: self.width, data }
    }

    /// Mean over channels, shape `[height * width]`.
    pub fn luma(&self) -> Vec<f64> {
        let n = self.height * self.width;
        (0..n).map(|i| (0..self.channels).map(|c| self.data[c * n + i]).sum::<f64>() / self.channels as f64).collect()
    }

    pub fn transpose(&self) -> ImageTensor {
        ImageTensor::from_fn(self.channels, self.width, self.height, |c, y, x| self.get(c, x, y))
    }

    /// `[channels, height, width]` tensor without gradient.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels, self.height, self.width], self.data.clone())
    }

    /// Accepts `[C, H, W]` or a single-sample `[1, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<ImageTensor> {
        let shape = match *t.shape() {
            [c, h, w] | [1, c, h, w] => (c, h, w),
            ref s => return Err(Error::Inference(format!("tensor of shape {s:?} is not an image"))),
        };
        ImageTensor::new(shape.0, shape.1, shape.2, t.to_vec())
    }

    /// Reads an image file as RGB in `[0, 1]`.
    pub fn load(path: &Path) -> Result<ImageTensor> {
        let rgb = ::image::open(path).map_err(Error::image("dataset_pipeline", path))?.to_rgb8();
        Ok(ImageTensor::from_rgb8(&rgb))
    }

    pub fn from_rgb8(rgb: &RgbImage) -> ImageTensor {
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        ImageTensor::from_fn(3, h, w, |c, y, x| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    }

    /// 8-bit RGB; single-channel images are replicated.
    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c: usize| {
                let c = c.min(self.channels - 1);
                (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([px(0), px(1), px(2)])
        })
    }

    /// Writes PNG or JPEG depending on the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(Error::image("retarget_inference", path))
    }
}

/// For each output index: source rows `(i0, i1)` and the weight of `i1`.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Source index for nearest-neighbour resampling.
fn nearest_index(o: usize, src: usize, dst: usize) -> usize {
    (((o as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
}

/// Row-major boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<BinaryMask> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Mask(format!("mask data does not match {width}x{height}")));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> BinaryMask {
        BinaryMask { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> BinaryMask {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        BinaryMask { height, width, data }
    }

    /// Foreground inside `rect`, background elsewhere.
    pub fn from_rect(height: usize, width: usize, rect: Rect) -> BinaryMask {
        BinaryMask::from_fn(height, width, |y, x| rect.contains_point(x, y))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Smallest rectangle holding every foreground pixel.
    pub fn tight_bbox(&self) -> Option<Rect> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let ys: Vec<usize> = (0..height).map(|o| nearest_index(o, self.height, height)).collect();
        let xs: Vec<usize> = (0..width).map(|o| nearest_index(o, self.width, width)).collect();
        BinaryMask::from_fn(height, width, |y, x| self.get(ys[y], xs[x]))
    }

    /// Clears every pixel outside `rect`.
    pub fn clip_to(&self, rect: Rect) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.get(y, x) && rect.contains_point(x, y))
    }

    pub fn crop(&self, rect: Rect) -> BinaryMask {
        BinaryMask::from_fn(rect.height, rect.width, |y, x| self.get(rect.top + y, rect.left + x))
    }

    /// Reads a grayscale mask; pixels at or above half intensity are foreground.
    pub fn load(path: &Path) -> Result<BinaryMask> {
        let gray = ::image::open(path).map_err(Error::image("dataset_pipeline", path))?.to_luma8();
        Ok(BinaryMask::from_gray(&gray))
    }

    pub fn from_gray(gray: &GrayImage) -> BinaryMask {
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        BinaryMask::from_fn(h, w, |y, x| gray.get_pixel(x as u32, y as u32)[0] >= 128)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(Error::image("dataset_pipeline", path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.4999), 2);
        assert_eq!(scaled_dim(300, 0.5), 150);
        assert_eq!(scaled_dim(3, 0.1), 1);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let img = ImageTensor::from_fn(3, 5, 7, |c, y, x| (c + y * 7 + x) as f64 / 40.0);
        assert_eq!(img.resize_bilinear(5, 7), img);
        let flat = ImageTensor::filled(1, 6, 6, 0.25).resize_bilinear(4, 9);
        assert!(flat.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn bilinear_halving_averages_pairs() {
        let img = ImageTensor::from_fn(1, 1, 4, |_, _, x| x as f64);
        let half = img.resize_bilinear(1, 2);
        assert_eq!(half.data(), &[0.5, 2.5]);
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let img = ImageTensor::from_fn(3, 5, 7, |c, y, x| (c * 35 + y * 7 + x) as f64 / 105.0);
        let padded = img.pad_to(8).unwrap();
        assert_eq!(padded.crop(Rect::origin(7, 5)).unwrap(), img);
        assert_eq!(padded.get(0, 7, 7), 0.0);
        assert!(img.pad_to(6).is_err());
    }

    #[test]
    fn mask_bbox_and_nearest_resize() {
        let mut m = BinaryMask::empty(6, 8);
        m.set(2, 3, true);
        m.set(4, 5, true);
        assert_eq!(m.tight_bbox(), Some(Rect::new(3, 2, 3, 3)));
        assert_eq!(BinaryMask::empty(3, 3).tight_bbox(), None);
        let up = m.resize_nearest(12, 16);
        assert_eq!(up.count(), 8);
        let r = Rect::new(1, 1, 2, 2);
        assert_eq!(BinaryMask::from_rect(4, 4, r).tight_bbox(), Some(r));
    }
}

//! Conditioning masks: the segmented object composited on a white canvas of
//! the requested output size, zero-padded to the training canvas.

use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ImageTensor, Rect};

/// Background value inside the requested output area.
pub const WHITE: f64 = 1.0;

/// Requested output size and where the object should land on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RetargetSpec {
    pub target_w: usize,
    pub target_h: usize,
    pub object_rect: Rect,
}

impl RetargetSpec {
    pub fn new(target_w: usize, target_h: usize, object_rect: Rect) -> RetargetSpec {
        RetargetSpec { target_w, target_h, object_rect }
    }

    pub fn validate(&self, canvas: usize) -> Result<()> {
        if self.target_w == 0 || self.target_h == 0 || self.target_w > canvas || self.target_h > canvas {
            return Err(Error::Mask(format!(
                "target {}x{} must lie within [1, {canvas}] on both axes",
                self.target_w, self.target_h
            )));
        }
        if !self.object_rect.fits_in(self.target_w, self.target_h) {
            return Err(Error::Mask(format!(
                "object rectangle {:?} lies outside the {}x{} target",
                self.object_rect, self.target_w, self.target_h
            )));
        }
        Ok(())
    }

    /// Output area on the padded canvas.
    pub fn valid(&self) -> Rect {
        Rect::origin(self.target_w, self.target_h)
    }
}

/// Object pixels cut to their tight bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedObject {
    /// RGB inside `bbox`; pixels outside the alpha are kept but never composited.
    pub rgb: ImageTensor,
    pub alpha: BinaryMask,
    /// Tight box in source-image coordinates.
    pub bbox: Rect,
}

pub fn extract_object(image: &ImageTensor, seg: &BinaryMask) -> Result<ExtractedObject> {
    if image.dims() != seg.dims() {
        return Err(Error::Mask(format!(
            "segmentation {}x{} is not aligned with image {}x{}",
            seg.width(),
            seg.height(),
            image.width(),
            image.height()
        )));
    }
    if image.channels() != 3 {
        return Err(Error::Mask(format!("expected an RGB image, got {} channels", image.channels())));
    }
    let bbox = seg.tight_bbox().ok_or_else(|| Error::Mask("empty segmentation".into()))?;
    Ok(ExtractedObject { rgb: image.crop(bbox)?, alpha: seg.crop(bbox), bbox })
}

/// Three-channel conditioning mask on the padded canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskImage {
    pub data: ImageTensor,
    pub valid: Rect,
    /// Object pixels on the target area (`target_h x target_w`).
    pub object: BinaryMask,
}

impl MaskImage {
    pub fn canvas(&self) -> usize {
        self.data.height()
    }
}

/// Composites `obj` into `spec.object_rect` on a white target area and pads
/// the result to `canvas x canvas`.
///
/// RGB is resampled bilinearly and the alpha by nearest neighbour, so the
/// composite uses a hard edge and never blends object and background.
pub fn build_target_mask(obj: &ExtractedObject, spec: &RetargetSpec, canvas: usize) -> Result<MaskImage> {
    spec.validate(canvas)?;
    let rect = spec.object_rect;
    let rgb = obj.rgb.resize_bilinear(rect.height, rect.width);
    let alpha = obj.alpha.resize_nearest(rect.height, rect.width);

    let mut data = ImageTensor::zeros(3, canvas, canvas);
    let mut object = BinaryMask::empty(spec.target_h, spec.target_w);
    for y in 0..spec.target_h {
        for x in 0..spec.target_w {
            let inside = rect.contains_point(x, y) && alpha.get(y - rect.top, x - rect.left);
            object.set(y, x, inside);
            for c in 0..3 {
                let v = if inside { rgb.get(c, y - rect.top, x - rect.left) } else { WHITE };
                data.set(c, y, x, v);
            }
        }
    }
    Ok(MaskImage { data, valid: spec.valid(), object })
}

/// Stacks the padded input image (channels 0-2) and the mask (channels 3-5).
pub fn assemble_model_input(input: &ImageTensor, mask: &MaskImage) -> Result<ImageTensor> {
    if input.channels() != 3 || input.height() != input.width() {
        return Err(Error::Mask(format!(
            "model input must be a square 3-channel canvas, got {}x{}x{}",
            input.channels(),
            input.height(),
            input.width()
        )));
    }
    if input.dims() != mask.data.dims() {
        return Err(Error::Mask(format!(
            "size mismatch: input canvas {} vs mask canvas {}",
            input.height(),
            mask.canvas()
        )));
    }
    input.concat_channels(&mask.data)
}

/// Random translation of the object placement used as a training
/// augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftJitter {
    pub probability: f64,
    /// Largest shift per axis as a fraction of the canvas.
    pub max_fraction: f64,
}

impl ShiftJitter {
    pub const DISABLED: ShiftJitter = ShiftJitter { probability: 0.0, max_fraction: 0.1 };

    /// Possibly shifts `rect`, keeping it inside the `target_w x target_h` area.
    pub fn apply(&self, rect: Rect, target_w: usize, target_h: usize, canvas: usize, rng: &mut impl Rng) -> Rect {
        if self.probability <= 0.0 || !rng.random_bool(self.probability.min(1.0)) {
            return rect;
        }
        let max = (self.max_fraction * canvas as f64).floor() as isize;
        let mut shift = |start: usize, len: usize, limit: usize| {
            let lo = (-max).max(-(start as isize));
            let hi = max.min(limit as isize - (start + len) as isize);
            if lo >= hi {
                start
            } else {
                (start as i64 + rng.random_range(lo as i64..=hi as i64)) as usize
            }
        };
        let left = shift(rect.left, rect.width, target_w);
        let top = shift(rect.top, rect.height, target_h);
        Rect { left, top, ..rect }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(3, h, w, |c, y, x| ((c * 31 + y * 7 + x * 3) % 97) as f64 / 97.0)
    }

    #[test]
    fn full_segmentation_extracts_whole_image() {
        let img = gradient_image(6, 9);
        let obj = extract_object(&img, &BinaryMask::from_fn(6, 9, |_, _| true)).unwrap();
        assert_eq!(obj.bbox, Rect::origin(9, 6));
        assert_eq!(obj.rgb, img);
    }

    #[test]
    fn single_pixel_segmentation() {
        let img = gradient_image(30, 40);
        let mut seg = BinaryMask::empty(30, 40);
        seg.set(10, 20, true);
        let obj = extract_object(&img, &seg).unwrap();
        assert_eq!(obj.bbox, Rect::new(20, 10, 1, 1));
        assert_eq!(obj.rgb.get(1, 0, 0), img.get(1, 10, 20));
    }

    #[test]
    fn checkerboard_alpha_carries_source_rgb() {
        let img = gradient_image(8, 8);
        let seg = BinaryMask::from_fn(8, 8, |y, x| (x + y) % 2 == 0);
        let obj = extract_object(&img, &seg).unwrap();
        for y in 0..obj.alpha.height() {
            for x in 0..obj.alpha.width() {
                if obj.alpha.get(y, x) {
                    for c in 0..3 {
                        assert_eq!(obj.rgb.get(c, y, x), img.get(c, y + obj.bbox.top, x + obj.bbox.left));
                    }
                }
            }
        }
    }

    #[test]
    fn empty_segmentation_is_rejected() {
        let err = extract_object(&gradient_image(4, 4), &BinaryMask::empty(4, 4)).unwrap_err();
        assert!(err.to_string().contains("empty segmentation"));
    }

    #[test]
    fn identity_placement_reproduces_object_on_white() {
        let img = gradient_image(20, 30);
        let seg = BinaryMask::from_fn(20, 30, |y, x| (5..12).contains(&y) && (8..20).contains(&x) && x != 10);
        let obj = extract_object(&img, &seg).unwrap();
        let mask = build_target_mask(&obj, &RetargetSpec::new(30, 20, obj.bbox), 32).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    let expected = if y >= 20 || x >= 30 {
                        0.0
                    } else if seg.get(y, x) {
                        img.get(c, y, x)
                    } else {
                        WHITE
                    };
                    assert_eq!(mask.data.get(c, y, x), expected);
                }
            }
        }
    }

    #[test]
    fn padding_outside_target_is_zero() {
        let img = gradient_image(16, 16);
        let obj = extract_object(&img, &BinaryMask::from_rect(16, 16, Rect::new(4, 4, 6, 6))).unwrap();
        let spec = RetargetSpec::new(384, 256, Rect::new(100, 50, 60, 40));
        let mask = build_target_mask(&obj, &spec, 512).unwrap();
        for c in 0..3 {
            for y in 0..512 {
                for x in 0..512 {
                    if y >= 256 || x >= 384 {
                        assert_eq!(mask.data.get(c, y, x), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn object_rect_outside_target_is_an_error() {
        let img = gradient_image(8, 8);
        let obj = extract_object(&img, &BinaryMask::from_rect(8, 8, Rect::new(1, 1, 3, 3))).unwrap();
        assert!(build_target_mask(&obj, &RetargetSpec::new(20, 20, Rect::new(15, 0, 10, 5)), 32).is_err());
        assert!(build_target_mask(&obj, &RetargetSpec::new(40, 20, Rect::new(0, 0, 5, 5)), 32).is_err());
    }

    #[test]
    fn assemble_orders_channels() {
        let img = gradient_image(8, 8);
        let obj = extract_object(&img, &BinaryMask::from_rect(8, 8, Rect::new(2, 2, 3, 3))).unwrap();
        let mask = build_target_mask(&obj, &RetargetSpec::new(8, 6, obj.bbox), 8).unwrap();
        let six = assemble_model_input(&img, &mask).unwrap();
        assert_eq!(six.select_channels(0, 3), img);
        assert_eq!(six.select_channels(3, 3), mask.data);

        let zeros = ImageTensor::zeros(3, 8, 8);
        let zero_mask = MaskImage { data: zeros.clone(), valid: Rect::origin(8, 8), object: BinaryMask::empty(8, 8) };
        assert!(assemble_model_input(&zeros, &zero_mask).unwrap().data().iter().all(|&v| v == 0.0));

        // swapping the halves swaps the channel blocks
        let swapped = MaskImage { data: img.clone(), ..mask.clone() };
        let other = assemble_model_input(&mask.data, &swapped).unwrap();
        assert_ne!(other, six);
        assert_eq!(other.select_channels(0, 3), six.select_channels(3, 3));

        assert!(assemble_model_input(&gradient_image(4, 4), &mask).is_err());
    }

    #[test]
    fn jitter_stays_in_bounds_and_can_be_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rect = Rect::new(10, 10, 20, 20);
        assert_eq!(ShiftJitter::DISABLED.apply(rect, 64, 64, 64, &mut rng), rect);
        let always = ShiftJitter { probability: 1.0, max_fraction: 0.1 };
        let mut moved = false;
        for _ in 0..200 {
            let r = always.apply(rect, 64, 48, 64, &mut rng);
            assert!(r.fits_in(64, 48));
            assert!(r.left.abs_diff(10) <= 6 && r.top.abs_diff(10) <= 6);
            moved |= r != rect;
        }
        assert!(moved);
    }
}

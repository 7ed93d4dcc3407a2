//! Retargeting with a trained generator: annotate, build the conditioning
//! mask for the requested geometry, run the generator on the padded canvas
//! and crop the requested area.

use std::path::Path;

use crate::dataset::{fit_to_canvas, scale_rect, AnnotationProvider, ObjectAnnotation};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::mask::{assemble_model_input, build_target_mask, extract_object, RetargetSpec};
use crate::raster::{BinaryMask, ImageTensor, Rect};

/// Where the object annotation of an inference input comes from.
pub enum AnnotationSource<'a> {
    /// Explicit box; the whole box is treated as the object.
    Bbox(Rect),
    /// Explicit segmentation mask aligned with the image.
    Mask(BinaryMask),
    /// A registered provider (detector or segmenter plug-in).
    Provider(&'a dyn AnnotationProvider),
}

/// Obtains the object annotation of `image`.
pub fn annotate(image: &ImageTensor, image_path: &Path, source: AnnotationSource<'_>) -> Result<ObjectAnnotation> {
    let (h, w) = image.dims();
    let no_object = || {
        Error::Inference(format!(
            "no object found in {}; pass --bbox LEFT,TOP,WIDTH,HEIGHT or --mask-file to annotate it manually",
            image_path.display()
        ))
    };
    match source {
        AnnotationSource::Bbox(bbox) => ObjectAnnotation::from_bbox(h, w, bbox)
            .map_err(|e| Error::Inference(format!("bad --bbox {bbox:?}: {e}"))),
        AnnotationSource::Mask(seg) => {
            if seg.dims() != (h, w) {
                return Err(Error::Inference(format!(
                    "mask is {}x{} but the image is {w}x{h}",
                    seg.width(),
                    seg.height()
                )));
            }
            ObjectAnnotation::from_segmentation(seg).map_err(|_| no_object())
        }
        AnnotationSource::Provider(p) => p.annotate(image_path, image)?.ok_or_else(no_object),
    }
}

/// Spec for a target size with the object box scaled by the same factors as
/// the image.
pub fn proportional_spec(dims: (usize, usize), bbox: Rect, target_w: usize, target_h: usize) -> Result<RetargetSpec> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::Inference(format!("target {target_w}x{target_h} must be at least 1x1")));
    }
    Ok(RetargetSpec::new(target_w, target_h, scale_rect(bbox, dims, (target_h, target_w))))
}

/// Copies the `valid` area out of a padded canvas.
pub fn crop_valid(padded: &ImageTensor, valid: Rect) -> Result<ImageTensor> {
    if valid.left != 0 || valid.top != 0 {
        return Err(Error::Inference(format!("valid region {valid:?} is not anchored at the origin")));
    }
    if valid.area() == 0 || !valid.fits_in(padded.width(), padded.height()) {
        return Err(Error::Inference(format!(
            "valid region {valid:?} outside the {}x{} canvas",
            padded.width(),
            padded.height()
        )));
    }
    padded.crop(valid)
}

/// Inputs the generator sees for one request, before cropping.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    /// `[6, canvas, canvas]` model input.
    pub model_input: ImageTensor,
    /// `[3, canvas, canvas]` conditioning mask.
    pub mask: ImageTensor,
    pub spec: RetargetSpec,
}

/// Builds the model input. Images larger than the canvas are downscaled
/// first, with the annotation following.
pub fn prepare_input(
    image: &ImageTensor,
    ann: &ObjectAnnotation,
    spec: &RetargetSpec,
    canvas: usize,
) -> Result<PreparedInput> {
    if spec.target_w > canvas || spec.target_h > canvas {
        return Err(Error::Inference(format!(
            "target {}x{} exceeds the {canvas}x{canvas} canvas the model was trained on",
            spec.target_w, spec.target_h
        )));
    }
    spec.validate(canvas).map_err(|e| Error::Inference(e.to_string()))?;
    if image.channels() != 3 {
        return Err(Error::Inference(format!("expected an RGB image, got {} channels", image.channels())));
    }
    let (image, ann) = fit_to_canvas(image, ann, canvas)?;
    let obj = extract_object(&image, &ann.seg)?;
    let mask = build_target_mask(&obj, spec, canvas)?;
    let model_input = assemble_model_input(&image.pad_to(canvas)?, &mask)?;
    Ok(PreparedInput { model_input, mask: mask.data, spec: *spec })
}

/// Retargets `image` to `spec` with `generator` on a `canvas` square.
///
/// The input image keeps its own size; only the mask carries the target
/// geometry.
pub fn retarget(
    image: &ImageTensor,
    ann: &ObjectAnnotation,
    spec: &RetargetSpec,
    generator: &Generator,
    canvas: usize,
) -> Result<ImageTensor> {
    let prepared = prepare_input(image, ann, spec, canvas)?;
    let padded = generator.generate(&prepared.model_input)?;
    crop_valid(&padded, spec.valid())
}

//! Supervised pair synthesis: originals serve as ground truth, and inputs are
//! built by resizing and cropping them while keeping the object intact.
//!
//! On-disk layout read by the `files` provider:
//!
//! ```text
//! <root>/images/**.{jpg,jpeg,png}
//! <root>/bounding_boxes.txt        <id> <left> <top> <width> <height>
//! <root>/segmentations/**.png      same relative stem as the image
//! <root>/images.txt                optional: <id> <relative image path>
//! ```
//!
//! Without `images.txt` an image's id is its path under `images/` without
//! the extension. The CUB-200-2011 release fits this layout as shipped.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::{assemble_model_input, build_target_mask, extract_object, RetargetSpec, ShiftJitter};
use crate::raster::{scaled_dim, BinaryMask, ImageTensor, Rect};

pub const DEFAULT_CANVAS: usize = 512;

/// Bounding box and segmentation of the single salient object in an image.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAnnotation {
    pub bbox: Rect,
    pub seg: BinaryMask,
}

impl ObjectAnnotation {
    /// Clips `bbox` to the mask bounds and the mask to `bbox`.
    pub fn new(bbox: Rect, seg: BinaryMask) -> Result<ObjectAnnotation> {
        let (h, w) = seg.dims();
        let right = bbox.right().min(w);
        let bottom = bbox.bottom().min(h);
        if bbox.left >= right || bbox.top >= bottom {
            return Err(Error::Dataset(format!("bounding box {bbox:?} lies outside the {w}x{h} image")));
        }
        let bbox = Rect::new(bbox.left, bbox.top, right - bbox.left, bottom - bbox.top);
        let seg = seg.clip_to(bbox);
        if seg.count() == 0 {
            return Err(Error::Dataset("segmentation has no foreground inside the bounding box".into()));
        }
        Ok(ObjectAnnotation { bbox, seg })
    }

    /// Annotation whose segmentation is the whole box.
    pub fn from_bbox(height: usize, width: usize, bbox: Rect) -> Result<ObjectAnnotation> {
        ObjectAnnotation::new(bbox, BinaryMask::from_rect(height, width, bbox))
    }

    /// Annotation whose box is the tight box of the segmentation.
    pub fn from_segmentation(seg: BinaryMask) -> Result<ObjectAnnotation> {
        let bbox = seg.tight_bbox().ok_or_else(|| Error::Dataset("empty segmentation".into()))?;
        ObjectAnnotation::new(bbox, seg)
    }
}

/// Source of object annotations for an image.
pub trait AnnotationProvider: Send + Sync {
    fn id(&self) -> &str;

    /// `Ok(None)` when no object is found.
    fn annotate(&self, image_path: &Path, image: &ImageTensor) -> Result<Option<ObjectAnnotation>>;
}

/// Runs an external detector/segmenter as `<program> [args..] <image> <mask.png>`.
///
/// The program writes a grayscale mask of the image's size; a non-zero exit
/// status, a missing file or an all-background mask mean "no object".
pub struct CommandProvider {
    id: String,
    program: PathBuf,
    args: Vec<String>,
}

impl CommandProvider {
    pub fn new(id: impl Into<String>, program: impl Into<PathBuf>, args: Vec<String>) -> CommandProvider {
        CommandProvider { id: id.into(), program: program.into(), args }
    }
}

impl AnnotationProvider for CommandProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn annotate(&self, image_path: &Path, image: &ImageTensor) -> Result<Option<ObjectAnnotation>> {
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let out = std::env::temp_dir().join(format!(
            "retarget-mask-{}-{}.png",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(image_path)
            .arg(&out)
            .status()
            .map_err(Error::io("dataset_pipeline", &self.program))?;
        if !status.success() || !out.exists() {
            return Ok(None);
        }
        let seg = BinaryMask::load(&out);
        let _ = fs::remove_file(&out);
        let seg = seg?;
        if seg.dims() != image.dims() {
            return Err(Error::Dataset(format!(
                "provider {} returned a {}x{} mask for a {}x{} image",
                self.id,
                seg.width(),
                seg.height(),
                image.width(),
                image.height()
            )));
        }
        Ok(ObjectAnnotation::from_segmentation(seg).ok())
    }
}

/// Registered annotation plug-ins; `files` is built in and always present.
#[derive(Default, Clone)]
pub struct ProviderRegistry {
    plugins: BTreeMap<String, Arc<dyn AnnotationProvider>>,
}

impl ProviderRegistry {
    pub const FILES: &'static str = "files";

    pub fn new() -> ProviderRegistry {
        ProviderRegistry::default()
    }

    pub fn register(&mut self, provider: Arc<dyn AnnotationProvider>) {
        self.plugins.insert(provider.id().to_string(), provider);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn AnnotationProvider>> {
        self.plugins.get(id).cloned().ok_or_else(|| {
            let mut known = vec![Self::FILES.to_string()];
            known.extend(self.plugins.keys().cloned());
            Error::Dataset(format!("annotation provider '{id}' is not registered (available: {})", known.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnnotationSource {
    /// Dataset-shipped box (in source pixels) and segmentation file.
    Files { bbox: Rect, segmentation: PathBuf },
    /// Resolved through the index's plug-in provider.
    Plugin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub annotation: AnnotationSource,
}

/// Immutable list of usable samples.
#[derive(Clone)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
    pub canvas: usize,
    /// Entries dropped for missing or degenerate annotations.
    pub skipped: usize,
    plugin: Option<Arc<dyn AnnotationProvider>>,
}

impl std::fmt::Debug for DatasetIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DatasetIndex")
            .field("entries", &self.entries.len())
            .field("canvas", &self.canvas)
            .field("skipped", &self.skipped)
            .finish()
    }
}

fn image_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(Error::io("dataset_pipeline", dir))? {
        let path = entry.map_err(Error::io("dataset_pipeline", dir))?.path();
        if path.is_dir() {
            image_files(&path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
        {
            out.push(path);
        }
    }
    Ok(())
}

fn relative_stem(path: &Path, base: &Path) -> String {
    let rel = path.strip_prefix(base).unwrap_or(path).with_extension("");
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

fn parse_bbox(fields: &[&str]) -> Option<Rect> {
    let v: Vec<f64> = fields.iter().map(|f| f.parse().ok()).collect::<Option<_>>()?;
    let [l, t, w, h] = v[..] else { return None };
    if !(l >= 0.0 && t >= 0.0 && w > 0.0 && h > 0.0) {
        return None;
    }
    let (left, top) = (l.floor() as usize, t.floor() as usize);
    let (right, bottom) = ((l + w).ceil() as usize, (t + h).ceil() as usize);
    Some(Rect::new(left, top, right - left, bottom - top))
}

fn read_bboxes(root: &Path) -> Result<HashMap<String, Rect>> {
    let read = |name: &str| -> Result<Option<String>> {
        let p = root.join(name);
        if p.exists() {
            fs::read_to_string(&p).map(Some).map_err(Error::io("dataset_pipeline", p))
        } else {
            Ok(None)
        }
    };
    let aliases: HashMap<String, String> = read("images.txt")?
        .map(|text| {
            text.lines()
                .filter_map(|l| {
                    let mut it = l.split_whitespace();
                    let id = it.next()?;
                    let rel = Path::new(it.next()?).with_extension("");
                    Some((id.to_string(), rel.to_string_lossy().replace('\\', "/")))
                })
                .collect()
        })
        .unwrap_or_default();
    let text = read("bounding_boxes.txt")?
        .ok_or_else(|| Error::Dataset(format!("{} has no bounding_boxes.txt", root.display())))?;
    let mut out = HashMap::new();
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, rest @ ..] = fields.as_slice() else { continue };
        if let Some(bbox) = parse_bbox(rest) {
            let key = aliases.get(*id).cloned().unwrap_or_else(|| id.to_string());
            out.insert(key, bbox);
        }
    }
    Ok(out)
}

/// Validates one `files` entry without keeping the decoded mask.
fn files_entry_is_usable(image_path: &Path, bbox: Rect, seg_path: &Path) -> bool {
    let Ok((w, h)) = ::image::image_dimensions(image_path) else { return false };
    let Ok(seg) = BinaryMask::load(seg_path) else { return false };
    seg.dims() == (h as usize, w as usize) && ObjectAnnotation::new(bbox, seg).is_ok()
}

/// Indexes `root` using annotation provider `provider`.
pub fn load_dataset(root: &Path, provider: &str, registry: &ProviderRegistry) -> Result<DatasetIndex> {
    load_dataset_with_canvas(root, provider, registry, DEFAULT_CANVAS)
}

pub fn load_dataset_with_canvas(
    root: &Path,
    provider: &str,
    registry: &ProviderRegistry,
    canvas: usize,
) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} is not a readable directory", root.display())));
    }
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::Dataset(format!("{} has no images/ directory", root.display())));
    }
    let plugin = if provider == ProviderRegistry::FILES { None } else { Some(registry.get(provider)?) };
    let mut paths = Vec::new();
    image_files(&images_dir, &mut paths)?;
    paths.sort();

    let bboxes = if plugin.is_none() { read_bboxes(root)? } else { HashMap::new() };
    let mut entries = Vec::new();
    let mut skipped = 0;
    for path in paths {
        let id = relative_stem(&path, &images_dir);
        let annotation = match &plugin {
            None => {
                let seg_path = root.join("segmentations").join(format!("{id}.png"));
                match bboxes.get(&id) {
                    Some(&bbox) if files_entry_is_usable(&path, bbox, &seg_path) => {
                        AnnotationSource::Files { bbox, segmentation: seg_path }
                    }
                    _ => {
                        skipped += 1;
                        continue;
                    }
                }
            }
            Some(p) => {
                let img = ImageTensor::load(&path)?;
                if p.annotate(&path, &img)?.is_none() {
                    skipped += 1;
                    continue;
                }
                AnnotationSource::Plugin
            }
        };
        entries.push(DatasetEntry { id, image_path: path, annotation });
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable samples under {} ({skipped} skipped)",
            root.display()
        )));
    }
    Ok(DatasetIndex { entries, canvas, skipped, plugin })
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decodes sample `i`, pre-scaled so that it fits the canvas.
    pub fn load_sample(&self, i: usize) -> Result<(ImageTensor, ObjectAnnotation)> {
        let entry = &self.entries[i];
        let image = ImageTensor::load(&entry.image_path)?;
        let ann = match &entry.annotation {
            AnnotationSource::Files { bbox, segmentation } => {
                ObjectAnnotation::new(*bbox, BinaryMask::load(segmentation)?)?
            }
            AnnotationSource::Plugin => {
                let p = self.plugin.as_ref().expect("plugin entries carry a provider");
                p.annotate(&entry.image_path, &image)?.ok_or_else(|| {
                    Error::Dataset(format!("provider {} found no object in {}", p.id(), entry.image_path.display()))
                })?
            }
        };
        fit_to_canvas(&image, &ann, self.canvas)
    }
}

/// Scales a rectangle from a `w x h` frame to `nw x nh`, rounding outwards.
pub fn scale_rect(rect: Rect, (h, w): (usize, usize), (nh, nw): (usize, usize)) -> Rect {
    let fx = nw as f64 / w as f64;
    let fy = nh as f64 / h as f64;
    let left = ((rect.left as f64 * fx).floor() as usize).min(nw - 1);
    let top = ((rect.top as f64 * fy).floor() as usize).min(nh - 1);
    let right = ((rect.right() as f64 * fx).ceil() as usize).clamp(left + 1, nw);
    let bottom = ((rect.bottom() as f64 * fy).ceil() as usize).clamp(top + 1, nh);
    Rect::new(left, top, right - left, bottom - top)
}

/// Aspect-preserving downscale so that neither side exceeds `canvas`.
pub fn fit_to_canvas(
    image: &ImageTensor,
    ann: &ObjectAnnotation,
    canvas: usize,
) -> Result<(ImageTensor, ObjectAnnotation)> {
    let (h, w) = image.dims();
    if h <= canvas && w <= canvas {
        return Ok((image.clone(), ann.clone()));
    }
    let s = canvas as f64 / h.max(w) as f64;
    let (nh, nw) = (scaled_dim(h, s).min(canvas), scaled_dim(w, s).min(canvas));
    let bbox = scale_rect(ann.bbox, (h, w), (nh, nw));
    let seg = ann.seg.resize_nearest(nh, nw);
    // very thin objects can vanish under nearest-neighbour downscaling
    let seg = if seg.clip_to(bbox).count() == 0 { BinaryMask::from_rect(nh, nw, bbox) } else { seg };
    Ok((image.resize_bilinear(nh, nw), ObjectAnnotation::new(bbox, seg)?))
}

/// Sampling ranges for the resize-and-crop distortion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugConfig {
    pub min_scale: f64,
    pub max_scale: f64,
    /// Smallest crop area relative to the resized image.
    pub min_crop_area: f64,
    pub jitter: ShiftJitter,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig { min_scale: 0.5, max_scale: 1.0, min_crop_area: 0.6, jitter: ShiftJitter::DISABLED }
    }
}

/// Parameters of one resize-and-crop distortion.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugParams {
    pub scale_x: f64,
    pub scale_y: f64,
    /// Window in resized-image coordinates.
    pub crop_window: Rect,
    pub rng_seed: u64,
    /// Translation of the object placement in the conditioning mask.
    pub object_shift: (isize, isize),
}

impl AugParams {
    /// No resize, full crop, no shift.
    pub fn identity((h, w): (usize, usize)) -> AugParams {
        AugParams { scale_x: 1.0, scale_y: 1.0, crop_window: Rect::origin(w, h), rng_seed: 0, object_shift: (0, 0) }
    }

    /// `(height, width)` after resizing an image of `dims`.
    pub fn resized_dims(&self, (h, w): (usize, usize)) -> (usize, usize) {
        (scaled_dim(h, self.scale_y), scaled_dim(w, self.scale_x))
    }

    /// Object box after resizing.
    pub fn scaled_bbox(&self, dims: (usize, usize), bbox: Rect) -> Rect {
        scale_rect(bbox, dims, self.resized_dims(dims))
    }

    pub fn is_valid_for(&self, dims: (usize, usize), bbox: Rect) -> bool {
        let (rh, rw) = self.resized_dims(dims);
        self.crop_window.fits_in(rw, rh) && self.crop_window.contains(&self.scaled_bbox(dims, bbox))
    }
}

/// Samples a distortion for an image of `dims` (`(height, width)`).
pub fn sample_aug_params(seed: u64, dims: (usize, usize), bbox: Rect) -> AugParams {
    sample_aug_params_with(seed, dims, bbox, &AugConfig::default(), DEFAULT_CANVAS)
}

pub fn sample_aug_params_with(
    seed: u64,
    dims: (usize, usize),
    bbox: Rect,
    cfg: &AugConfig,
    canvas: usize,
) -> AugParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale_x = rng.random_range(cfg.min_scale..=cfg.max_scale);
    let scale_y = rng.random_range(cfg.min_scale..=cfg.max_scale);
    let mut params = AugParams { scale_x, scale_y, crop_window: Rect::default(), rng_seed: seed, object_shift: (0, 0) };
    let (rh, rw) = params.resized_dims(dims);
    let sb = params.scaled_bbox(dims, bbox);
    let min_area = cfg.min_crop_area * (rw * rh) as f64;

    // Rejection sampling over (x0, x1, y0, y1) is uniform over valid windows.
    params.crop_window = (0..100)
        .find_map(|_| {
            let x0 = rng.random_range(0..=sb.left);
            let x1 = rng.random_range(sb.right()..=rw);
            let y0 = rng.random_range(0..=sb.top);
            let y1 = rng.random_range(sb.bottom()..=rh);
            let window = Rect::new(x0, y0, x1 - x0, y1 - y0);
            (window.area() as f64 >= min_area).then_some(window)
        })
        .unwrap_or(Rect::origin(rw, rh));

    let (h, w) = dims;
    let placed = cfg.jitter.apply(bbox, w, h, canvas, &mut rng);
    params.object_shift = (placed.left as isize - bbox.left as isize, placed.top as isize - bbox.top as isize);
    params
}

/// One supervised example on the padded canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    /// Distorted image (channels 0-2) and conditioning mask (channels 3-5).
    pub model_input: ImageTensor,
    pub ground_truth: ImageTensor,
    pub input_valid: Rect,
    pub gt_valid: Rect,
    /// Object placement encoded in the mask.
    pub object_rect: Rect,
}

/// Builds the (input, mask, ground truth) triple for one original.
///
/// The ground truth is the original itself; the mask requests the original
/// size with the object at its original place (plus any sampled shift).
pub fn synthesize_pair(
    original: &ImageTensor,
    ann: &ObjectAnnotation,
    params: &AugParams,
    canvas: usize,
) -> Result<PairedSample> {
    if original.channels() != 3 {
        return Err(Error::Dataset(format!("expected an RGB original, got {} channels", original.channels())));
    }
    let dims = original.dims();
    let (h, w) = dims;
    if h > canvas || w > canvas {
        return Err(Error::Dataset(format!("canvas overflow: {w}x{h} original on a {canvas} canvas")));
    }
    if ann.seg.dims() != dims {
        return Err(Error::Dataset("annotation is not aligned with the original".into()));
    }
    let (rh, rw) = params.resized_dims(dims);
    if !params.crop_window.fits_in(rw, rh) {
        return Err(Error::Dataset(format!(
            "crop window {:?} outside the {rw}x{rh} resized image",
            params.crop_window
        )));
    }
    let ground_truth = original.pad_to(canvas)?;
    let cropped = original.resize_bilinear(rh, rw).crop(params.crop_window)?;
    let input = cropped.pad_to(canvas)?;

    let obj = extract_object(original, &ann.seg)?;
    let (dx, dy) = params.object_shift;
    let object_rect = obj
        .bbox
        .translated(dx, dy)
        .filter(|r| r.fits_in(w, h))
        .ok_or_else(|| Error::Dataset(format!("object shift {:?} leaves the image", params.object_shift)))?;
    let mask = build_target_mask(&obj, &RetargetSpec::new(w, h, object_rect), canvas)?;
    Ok(PairedSample {
        model_input: assemble_model_input(&input, &mask)?,
        ground_truth,
        input_valid: Rect::origin(params.crop_window.width, params.crop_window.height),
        gt_valid: Rect::origin(w, h),
        object_rect,
    })
}

/// Deterministic 64-bit mix of several words (SplitMix64 finalizer chain).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(state << 6).wrapping_add(state >> 2);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

/// Seed for the distortion of `sample` in `epoch`.
pub fn sample_seed(seed: u64, epoch: u64, sample: u64) -> u64 {
    mix_seed(&[seed, epoch, sample])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(h: usize, w: usize) -> (ImageTensor, ObjectAnnotation) {
        let img = ImageTensor::from_fn(3, h, w, |c, y, x| ((c * 13 + y * 5 + x * 3) % 50) as f64 / 50.0);
        let bbox = Rect::new(w / 4, h / 4, w / 3, h / 3);
        let seg = BinaryMask::from_fn(h, w, |y, x| bbox.contains_point(x, y) && (x + y) % 3 != 0);
        (img, ObjectAnnotation::new(bbox, seg).unwrap())
    }

    #[test]
    fn sampling_is_deterministic() {
        let bbox = Rect::new(30, 40, 50, 60);
        assert_eq!(sample_aug_params(17, (200, 300), bbox), sample_aug_params(17, (200, 300), bbox));
        assert_ne!(sample_aug_params(17, (200, 300), bbox), sample_aug_params(18, (200, 300), bbox));
    }

    #[test]
    fn whole_image_object_forces_full_crop() {
        for seed in 0..50 {
            let p = sample_aug_params(seed, (120, 80), Rect::origin(80, 120));
            let (rh, rw) = p.resized_dims((120, 80));
            assert_eq!(p.crop_window, Rect::origin(rw, rh));
        }
    }

    #[test]
    fn crop_windows_keep_the_object_and_area_floor() {
        let dims = (200, 300);
        let bbox = Rect::new(125, 75, 50, 50);
        for seed in 0..1000 {
            let p = sample_aug_params(seed, dims, bbox);
            assert!(p.is_valid_for(dims, bbox), "seed {seed}: {p:?}");
            assert!((0.5..=1.0).contains(&p.scale_x) && (0.5..=1.0).contains(&p.scale_y));
            let (rh, rw) = p.resized_dims(dims);
            let full = p.crop_window == Rect::origin(rw, rh);
            assert!(full || p.crop_window.area() as f64 >= 0.6 * (rw * rh) as f64);
        }
    }

    #[test]
    fn identity_params_copy_the_original() {
        let (img, ann) = scene(30, 40);
        let pair = synthesize_pair(&img, &ann, &AugParams::identity(img.dims()), 48).unwrap();
        assert_eq!(pair.model_input.select_channels(0, 3), pair.ground_truth);
        assert_eq!(pair.ground_truth.crop(pair.gt_valid).unwrap(), img);
    }

    #[test]
    fn half_width_resize_gives_150_by_400() {
        let (img, ann) = scene(400, 300);
        let params = AugParams { scale_x: 0.5, scale_y: 1.0, crop_window: Rect::origin(150, 400), ..AugParams::identity((400, 300)) };
        let pair = synthesize_pair(&img, &ann, &params, 512).unwrap();
        assert_eq!(pair.input_valid, Rect::origin(150, 400));
    }

    #[test]
    fn padding_is_exactly_zero() {
        let (img, ann) = scene(37, 29);
        for seed in 0..10 {
            let params = sample_aug_params(seed, img.dims(), ann.bbox);
            let pair = synthesize_pair(&img, &ann, &params, 64).unwrap();
            for c in 0..6 {
                for y in 0..64 {
                    for x in 0..64 {
                        let region = if c < 3 { pair.input_valid } else { pair.gt_valid };
                        if !region.contains_point(x, y) {
                            assert_eq!(pair.model_input.get(c, y, x), 0.0);
                        }
                        if c < 3 && !pair.gt_valid.contains_point(x, y) {
                            assert_eq!(pair.ground_truth.get(c, y, x), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_original_is_rejected() {
        let (img, ann) = scene(70, 40);
        let err = synthesize_pair(&img, &ann, &AugParams::identity(img.dims()), 64).unwrap_err();
        assert!(err.to_string().contains("canvas overflow"));
    }

    #[test]
    fn prescale_fits_canvas_and_keeps_object() {
        let (img, ann) = scene(300, 700);
        let (small, sann) = fit_to_canvas(&img, &ann, 256).unwrap();
        assert_eq!(small.dims(), (110, 256));
        assert!(sann.bbox.fits_in(256, 110));
        assert!(sann.seg.count() > 0);
    }

    #[test]
    fn annotation_clips_segmentation_to_box() {
        let seg = BinaryMask::from_fn(10, 10, |_, _| true);
        let ann = ObjectAnnotation::new(Rect::new(2, 3, 4, 20), seg).unwrap();
        assert_eq!(ann.bbox, Rect::new(2, 3, 4, 7));
        assert_eq!(ann.seg.count(), 28);
        assert!(ObjectAnnotation::new(Rect::new(1, 1, 2, 2), BinaryMask::empty(5, 5)).is_err());
    }

    #[test]
    fn seeds_are_spread() {
        let a = sample_seed(1, 0, 0);
        assert_ne!(a, sample_seed(1, 0, 1));
        assert_ne!(a, sample_seed(1, 1, 0));
        assert_eq!(a, sample_seed(1, 0, 0));
    }
}

//! Output quality: PSNR/SSIM against ground truth, pluggable no-reference
//! scorers and side-by-side comparison grids.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::raster::{ImageTensor, Rect};

/// PSNR written to logs for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if (a.channels(), a.dims()) != (b.channels(), b.dims()) {
        return Err(Error::Evaluation(format!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)`; infinite for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Normalized Gaussian taps.
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size).map(|i| (-(i as f64 - mid).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian filter over windows fully inside the image.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5), data
/// range 1. Images smaller than the window use a window of their smaller side.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = a.dims();
    let taps = gaussian_window(11.min(h).min(w), 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..a.channels() {
        let (x, y) = (a.plane(c), b.plane(c));
        let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
        let mx = filter_valid(x, h, w, &taps);
        let my = filter_valid(y, h, w, &taps);
        let mxx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &taps);
        let myy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &taps);
        let mxy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &taps);
        let map: f64 = (0..mx.len())
            .map(|i| {
                let (vx, vy, cov) = (mxx[i] - mx[i] * mx[i], myy[i] - my[i] * my[i], mxy[i] - mx[i] * my[i]);
                ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2))
            })
            .sum();
        total += map / mx.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FullReference {
    /// Infinite for identical images; see [`PSNR_CAP`].
    pub psnr: f64,
    pub ssim: f64,
}

impl FullReference {
    pub fn capped_psnr(&self) -> f64 {
        self.psnr.min(PSNR_CAP)
    }
}

pub fn full_reference(a: &ImageTensor, b: &ImageTensor) -> Result<FullReference> {
    Ok(FullReference { psnr: psnr(a, b)?, ssim: ssim(a, b)? })
}

/// No-reference image quality scorer.
pub trait NoReferenceScorer: Send + Sync {
    fn id(&self) -> &str;
    fn version(&self) -> &str;
    fn score(&self, image: &ImageTensor) -> Result<f64>;
}

/// Variance of the 4-neighbour Laplacian of the luma.
#[derive(Clone, Copy, Debug, Default)]
pub struct SharpnessScorer;

impl NoReferenceScorer for SharpnessScorer {
    fn id(&self) -> &str {
        "sharpness"
    }

    fn version(&self) -> &str {
        "1"
    }

    fn score(&self, image: &ImageTensor) -> Result<f64> {
        if image.channels() != 3 {
            return Err(Error::Evaluation(format!("scorer expects RGB, got {} channels", image.channels())));
        }
        let (h, w) = image.dims();
        if h < 3 || w < 3 {
            return Ok(0.0);
        }
        let l = image.luma();
        let lap: Vec<f64> = (1..h - 1)
            .flat_map(|y| (1..w - 1).map(move |x| (y, x)))
            .map(|(y, x)| l[(y - 1) * w + x] + l[(y + 1) * w + x] + l[y * w + x - 1] + l[y * w + x + 1] - 4.0 * l[y * w + x])
            .collect();
        let mean = lap.iter().sum::<f64>() / lap.len() as f64;
        Ok(lap.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / lap.len() as f64)
    }
}

/// External scorer run as `<program> [args..] <image.png>`; the first
/// token on stdout is the score.
pub struct CommandScorer {
    id: String,
    version: String,
    program: PathBuf,
    args: Vec<String>,
}

impl CommandScorer {
    pub fn new(id: impl Into<String>, version: impl Into<String>, program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        CommandScorer { id: id.into(), version: version.into(), program: program.into(), args }
    }
}

impl NoReferenceScorer for CommandScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn version(&self) -> &str {
        &self.version
    }

    fn score(&self, image: &ImageTensor) -> Result<f64> {
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let tmp = std::env::temp_dir().join(format!(
            "retarget-score-{}-{}.png",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        image.save(&tmp)?;
        let output = Command::new(&self.program).args(&self.args).arg(&tmp).output();
        let _ = std::fs::remove_file(&tmp);
        let output = output.map_err(Error::io("evaluation", &self.program))?;
        if !output.status.success() {
            return Err(Error::Evaluation(format!("scorer {} exited with {}", self.id, output.status)));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        stdout
            .split_whitespace()
            .next()
            .and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| Error::Evaluation(format!("scorer {} printed no number: {:?}", self.id, stdout.trim())))
    }
}

/// A score with the identity of the scorer that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub scorer_id: String,
    pub scorer_version: String,
}

impl Score {
    /// `id@version`.
    pub fn scorer(&self) -> String {
        format!("{}@{}", self.scorer_id, self.scorer_version)
    }
}

/// Registered scorers; `sharpness` is always present.
#[derive(Clone)]
pub struct ScorerRegistry {
    scorers: BTreeMap<String, Arc<dyn NoReferenceScorer>>,
}

impl Default for ScorerRegistry {
    fn default() -> Self {
        let mut r = ScorerRegistry { scorers: BTreeMap::new() };
        r.register(Arc::new(SharpnessScorer));
        r
    }
}

impl ScorerRegistry {
    pub fn new() -> ScorerRegistry {
        ScorerRegistry::default()
    }

    pub fn register(&mut self, scorer: Arc<dyn NoReferenceScorer>) {
        self.scorers.insert(scorer.id().to_string(), scorer);
    }

    pub fn ids(&self) -> Vec<String> {
        self.scorers.keys().cloned().collect()
    }

    pub fn score_no_reference(&self, image: &ImageTensor, scorer: &str) -> Result<Score> {
        let s = self.scorers.get(scorer).ok_or_else(|| {
            Error::Evaluation(format!("scorer '{scorer}' is not registered (available: {})", self.ids().join(", ")))
        })?;
        Ok(Score { value: s.score(image)?, scorer_id: s.id().to_string(), scorer_version: s.version().to_string() })
    }
}

/// Centroid `(x, y)` of the pixels whose luma is at least `threshold`.
pub fn bright_centroid(image: &ImageTensor, threshold: f64) -> Option<(f64, f64)> {
    let luma = image.luma();
    let w = image.width();
    centroid_where(image, |y, x| luma[y * w + x] >= threshold)
}

/// Centroid `(x, y)` of the pixels at which `select(y, x)` holds.
pub fn centroid_where(image: &ImageTensor, select: impl Fn(usize, usize) -> bool) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..image.height() {
        for x in 0..image.width() {
            if select(y, x) {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// One line of the `evaluate` results table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub method: String,
    pub target_w: usize,
    pub target_h: usize,
    pub full_reference: Option<FullReference>,
    pub score: Score,
}

impl EvalRow {
    pub const TSV_HEADER: &'static str = "image\tmethod\ttarget\tpsnr\tssim\tnr_score\tscorer_id";

    pub fn tsv(&self) -> String {
        let (p, s) = match self.full_reference {
            Some(fr) => (format!("{:.4}", fr.capped_psnr()), format!("{:.6}", fr.ssim)),
            None => ("NA".into(), "NA".into()),
        };
        format!(
            "{}\t{}\t{}x{}\t{p}\t{s}\t{:.6}\t{}",
            self.image,
            self.method,
            self.target_w,
            self.target_h,
            self.score.value,
            self.score.scorer()
        )
    }
}

/// Scores `output` and, when a ground truth is given, compares against it.
pub fn evaluate_output(
    image: &str,
    method: &str,
    output: &ImageTensor,
    ground_truth: Option<&ImageTensor>,
    scorers: &ScorerRegistry,
    scorer: &str,
) -> Result<EvalRow> {
    let full_reference = ground_truth.map(|gt| full_reference(output, gt)).transpose()?;
    Ok(EvalRow {
        image: image.to_string(),
        method: method.to_string(),
        target_w: output.width(),
        target_h: output.height(),
        full_reference,
        score: scorers.score_no_reference(output, scorer)?,
    })
}

/// One panel of a comparison grid.
#[derive(Clone, Debug)]
pub struct GridEntry {
    pub label: String,
    pub image: ImageTensor,
    pub score: Option<f64>,
}

impl GridEntry {
    pub fn new(label: impl Into<String>, image: ImageTensor) -> GridEntry {
        GridEntry { label: label.into(), image, score: None }
    }

    pub fn with_score(mut self, score: f64) -> GridEntry {
        self.score = Some(score);
        self
    }

    fn lines(&self) -> Vec<String> {
        let mut lines = vec![self.label.clone()];
        if let Some(s) = self.score {
            lines.push(format!("{s:.3}"));
        }
        lines
    }
}

/// Neutral grid background.
pub const GRID_BACKGROUND: f64 = 0.5;
const GRID_PAD: usize = 8;
const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
const LINE_GAP: usize = 3;

fn text_width(text: &str) -> usize {
    let n = text.chars().count();
    if n == 0 {
        0
    } else {
        n * (GLYPH_W + 1) - 1
    }
}

/// Panel positions of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridLayout {
    pub width: usize,
    pub height: usize,
    /// Where each image is drawn, un-resized.
    pub panels: Vec<Rect>,
    /// Top of the text block.
    pub text_top: usize,
}

pub fn grid_layout(entries: &[GridEntry]) -> Result<GridLayout> {
    if entries.is_empty() {
        return Err(Error::Evaluation("comparison grid needs at least one entry".into()));
    }
    let max_h = entries.iter().map(|e| e.image.height()).max().unwrap_or(0);
    let max_lines = entries.iter().map(|e| e.lines().len()).max().unwrap_or(1);
    let text_top = GRID_PAD + max_h + GRID_PAD;
    let height = text_top + max_lines * (GLYPH_H + LINE_GAP) + GRID_PAD;
    let mut x = GRID_PAD;
    let mut panels = Vec::with_capacity(entries.len());
    for e in entries {
        let col = e.lines().iter().map(|l| text_width(l)).max().unwrap_or(0).max(e.image.width());
        panels.push(Rect::new(x, GRID_PAD, e.image.width(), e.image.height()));
        x += col + GRID_PAD;
    }
    Ok(GridLayout { width: x, height, panels, text_top })
}

/// Draws the grid: one column per entry, text beneath each image.
pub fn render_grid(entries: &[GridEntry]) -> Result<ImageTensor> {
    let layout = grid_layout(entries)?;
    let mut out = ImageTensor::filled(3, layout.height, layout.width, GRID_BACKGROUND);
    for (e, panel) in entries.iter().zip(&layout.panels) {
        let img = &e.image;
        for c in 0..3 {
            let src = c.min(img.channels() - 1);
            for y in 0..img.height() {
                for x in 0..img.width() {
                    out.set(c, panel.top + y, panel.left + x, img.get(src, y, x));
                }
            }
        }
        for (i, line) in e.lines().iter().enumerate() {
            draw_text(&mut out, line, panel.left, layout.text_top + i * (GLYPH_H + LINE_GAP));
        }
    }
    Ok(out)
}

/// Renders the grid and writes it as PNG.
pub fn comparison_grid(entries: &[GridEntry], out_path: &Path) -> Result<()> {
    render_grid(entries)?.save(out_path)
}

fn draw_text(out: &mut ImageTensor, text: &str, left: usize, top: usize) {
    for (i, ch) in text.chars().enumerate() {
        let rows = glyph(ch);
        let x0 = left + i * (GLYPH_W + 1);
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - dx)) != 0 && x0 + dx < out.width() && top + dy < out.height() {
                    for c in 0..3 {
                        out.set(c, top + dy, x0 + dx, 0.0);
                    }
                }
            }
        }
    }
}

/// 5x7 bitmap rows, most significant of the low five bits on the left.
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        ' ' => [0; 7],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ',' => [0, 0, 0, 0, 0x0C, 0x04, 0x08],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04],
    }
}

//! Seam carving with backward (gradient magnitude) energy.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::raster::ImageTensor;

/// Row-major `[H, W]` energy values.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl EnergyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<EnergyMap> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Seam(format!("energy map {height}x{width} with {} values", values.len())));
        }
        Ok(EnergyMap { height, width, values })
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Vertical seam: one column per row, adjacent rows at most one column apart.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeamPath {
    pub columns: Vec<usize>,
}

impl SeamPath {
    pub fn is_connected(&self) -> bool {
        self.columns.windows(2).all(|p| p[0].abs_diff(p[1]) <= 1)
    }

    pub fn cost(&self, energy: &EnergyMap) -> f64 {
        self.columns.iter().enumerate().map(|(y, &x)| energy.get(y, x)).sum()
    }
}

/// `|dI/dx| + |dI/dy|` summed over channels; central differences inside,
/// one-sided differences on the border.
pub fn energy_map(image: &ImageTensor) -> Result<EnergyMap> {
    let (h, w) = image.dims();
    if h < 2 || w < 2 {
        return Err(Error::Seam(format!("energy needs at least 2x2 pixels, got {w}x{h}")));
    }
    let diff = |plane: &[f64], i: usize, n: usize, stride: usize, at: usize| -> f64 {
        if at == 0 {
            plane[i + stride] - plane[i]
        } else if at == n - 1 {
            plane[i] - plane[i - stride]
        } else {
            (plane[i + stride] - plane[i - stride]) / 2.0
        }
    };
    let mut values = vec![0.0; h * w];
    for c in 0..image.channels() {
        let plane = image.plane(c);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                values[i] += diff(plane, i, w, 1, x).abs() + diff(plane, i, h, w, y).abs();
            }
        }
    }
    EnergyMap::new(h, w, values)
}

/// Minimum-energy vertical seam and its cost.
///
/// Ties go to the smallest column, both in the last row and at every
/// backtracking step.
pub fn min_seam(energy: &EnergyMap) -> (SeamPath, f64) {
    let (h, w) = (energy.height, energy.width);
    let mut m = energy.values.clone();
    for y in 1..h {
        for x in 0..w {
            let lo = x.saturating_sub(1);
            let hi = (x + 1).min(w - 1);
            let best = (lo..=hi).map(|k| m[(y - 1) * w + k]).fold(f64::INFINITY, f64::min);
            m[y * w + x] += best;
        }
    }
    let argmin = |row: usize, lo: usize, hi: usize| {
        (lo..=hi).fold(lo, |best, k| if m[row * w + k] < m[row * w + best] { k } else { best })
    };
    let mut columns = vec![0; h];
    columns[h - 1] = argmin(h - 1, 0, w - 1);
    let cost = m[(h - 1) * w + columns[h - 1]];
    for y in (0..h - 1).rev() {
        let x = columns[y + 1];
        columns[y] = argmin(y, x.saturating_sub(1), (x + 1).min(w - 1));
    }
    (SeamPath { columns }, cost)
}

/// Deletes one pixel per row.
pub fn remove_seam(image: &ImageTensor, seam: &SeamPath) -> Result<ImageTensor> {
    let (h, w) = image.dims();
    if seam.columns.len() != h || seam.columns.iter().any(|&x| x >= w) || w < 2 {
        return Err(Error::Seam(format!("seam does not fit a {w}x{h} image")));
    }
    Ok(ImageTensor::from_fn(image.channels(), h, w - 1, |c, y, x| {
        let skip = (x >= seam.columns[y]) as usize;
        image.get(c, y, x + skip)
    }))
}

/// Which axis is resized first when both change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AxisOrder {
    #[default]
    WidthFirst,
    HeightFirst,
}

impl fmt::Display for AxisOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AxisOrder::WidthFirst => "width-first",
            AxisOrder::HeightFirst => "height-first",
        })
    }
}

impl FromStr for AxisOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<AxisOrder> {
        match s {
            "width-first" => Ok(AxisOrder::WidthFirst),
            "height-first" => Ok(AxisOrder::HeightFirst),
            _ => Err(Error::Seam(format!("unknown axis order '{s}' (width-first or height-first)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeamResult {
    pub image: ImageTensor,
    /// Summed cost of every removed seam, each on the energy it was found in.
    pub removed_energy: f64,
    pub seams_removed: usize,
    pub seams_inserted: usize,
}

/// Resizes `image` to `target_w x target_h`, width pass first.
pub fn seam_retarget(image: &ImageTensor, target_w: usize, target_h: usize) -> Result<ImageTensor> {
    Ok(seam_retarget_with(image, target_w, target_h, AxisOrder::WidthFirst)?.image)
}

pub fn seam_retarget_with(image: &ImageTensor, target_w: usize, target_h: usize, order: AxisOrder) -> Result<SeamResult> {
    let (h, w) = image.dims();
    if target_w < 2 || target_h < 2 {
        return Err(Error::Seam(format!("target {target_w}x{target_h} must be at least 2x2")));
    }
    if h < 2 || w < 2 {
        return Err(Error::Seam(format!("source {w}x{h} must be at least 2x2")));
    }
    let mut result =
        SeamResult { image: image.clone(), removed_energy: 0.0, seams_removed: 0, seams_inserted: 0 };
    let passes = match order {
        AxisOrder::WidthFirst => [false, true],
        AxisOrder::HeightFirst => [true, false],
    };
    for vertical_pass in passes {
        let (img, target) = if vertical_pass {
            (result.image.transpose(), target_h)
        } else {
            (result.image.clone(), target_w)
        };
        let mut pass = resize_width(&img, target)?;
        if vertical_pass {
            pass.image = pass.image.transpose();
        }
        result = SeamResult {
            image: pass.image,
            removed_energy: result.removed_energy + pass.removed_energy,
            seams_removed: result.seams_removed + pass.seams_removed,
            seams_inserted: result.seams_inserted + pass.seams_inserted,
        };
    }
    Ok(result)
}

fn resize_width(image: &ImageTensor, target: usize) -> Result<SeamResult> {
    let w = image.width();
    let mut result = SeamResult { image: image.clone(), removed_energy: 0.0, seams_removed: 0, seams_inserted: 0 };
    if target < w {
        for _ in 0..w - target {
            let (seam, cost) = min_seam(&energy_map(&result.image)?);
            result.image = remove_seam(&result.image, &seam)?;
            result.removed_energy += cost;
            result.seams_removed += 1;
        }
    }
    while result.image.width() < target {
        let cur = result.image.width();
        // never duplicate more than half the columns in one round
        let k = (target - cur).min((cur / 2).max(1));
        let seams = lowest_seams(&result.image, k)?;
        result.image = insert_seams(&result.image, &seams);
        result.seams_inserted += k;
    }
    Ok(result)
}

/// The first `k` seams of iterative removal, in original column coordinates.
/// They never share a pixel.
pub fn lowest_seams(image: &ImageTensor, k: usize) -> Result<Vec<SeamPath>> {
    let (h, w) = image.dims();
    if k >= w {
        return Err(Error::Seam(format!("cannot pick {k} disjoint seams in width {w}")));
    }
    let mut index: Vec<Vec<usize>> = (0..h).map(|_| (0..w).collect()).collect();
    let mut work = image.clone();
    let mut seams = Vec::with_capacity(k);
    for _ in 0..k {
        let (seam, _) = min_seam(&energy_map(&work)?);
        let original = seam.columns.iter().enumerate().map(|(y, &x)| index[y].remove(x)).collect();
        seams.push(SeamPath { columns: original });
        work = remove_seam(&work, &seam)?;
    }
    Ok(seams)
}

/// Duplicates each seam; the new pixel is the mean of the seam pixel and its
/// right neighbour (left neighbour on the last column).
pub fn insert_seams(image: &ImageTensor, seams: &[SeamPath]) -> ImageTensor {
    let (h, w) = image.dims();
    let nw = w + seams.len();
    let mut out = ImageTensor::zeros(image.channels(), h, nw);
    for y in 0..h {
        let mut dup = vec![false; w];
        for s in seams {
            dup[s.columns[y]] = true;
        }
        let mut nx = 0;
        for x in 0..w {
            let nb = if x + 1 < w { x + 1 } else { x.saturating_sub(1) };
            for c in 0..image.channels() {
                out.set(c, y, nx, image.get(c, y, x));
                if dup[x] {
                    out.set(c, y, nx + 1, (image.get(c, y, x) + image.get(c, y, nb)) / 2.0);
                }
            }
            nx += 1 + dup[x] as usize;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(3, h, w, data).unwrap()
    }

    fn scalar_energy(img: &ImageTensor, y: usize, x: usize) -> f64 {
        let (h, w) = img.dims();
        let mut e = 0.0;
        for c in 0..3 {
            let p = |yy: usize, xx: usize| img.get(c, yy, xx);
            let dx = match x {
                0 => p(y, 1) - p(y, 0),
                _ if x == w - 1 => p(y, x) - p(y, x - 1),
                _ => 0.5 * (p(y, x + 1) - p(y, x - 1)),
            };
            let dy = match y {
                0 => p(1, x) - p(0, x),
                _ if y == h - 1 => p(y, x) - p(y - 1, x),
                _ => 0.5 * (p(y + 1, x) - p(y - 1, x)),
            };
            e += dx.abs() + dy.abs();
        }
        e
    }

    /// Minimum over every connected vertical seam.
    fn brute_force(e: &EnergyMap) -> (f64, usize) {
        fn walk(e: &EnergyMap, y: usize, x: usize, acc: f64, best: &mut f64, count: &mut usize) {
            let acc = acc + e.get(y, x);
            if y + 1 == e.height {
                *count += 1;
                *best = best.min(acc);
                return;
            }
            for nx in x.saturating_sub(1)..=(x + 1).min(e.width - 1) {
                walk(e, y + 1, nx, acc, best, count);
            }
        }
        let (mut best, mut count) = (f64::INFINITY, 0);
        for x in 0..e.width {
            walk(e, 0, x, 0.0, &mut best, &mut count);
        }
        (best, count)
    }

    #[test]
    fn constant_image_has_zero_energy() {
        let e = energy_map(&ImageTensor::filled(3, 4, 5, 0.3)).unwrap();
        assert!(e.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_edge_energy_stays_near_the_edge() {
        let k = 4;
        let img = ImageTensor::from_fn(3, 6, 9, |_, _, x| if x >= k { 1.0 } else { 0.0 });
        let e = energy_map(&img).unwrap();
        for y in 0..6 {
            for x in 0..9 {
                let near = (k - 1..=k + 1).contains(&x);
                assert!(near || e.get(y, x) == 0.0, "energy at ({y},{x})");
            }
            assert!(e.get(y, k - 1) > 0.0 && e.get(y, k) > 0.0);
        }
    }

    #[test]
    fn energy_matches_scalar_reference() {
        let img = random_image(1, 5, 5);
        let e = energy_map(&img).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert!((e.get(y, x) - scalar_energy(&img, y, x)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn diagonal_example() {
        let e = EnergyMap::new(3, 3, vec![1.0, 9.0, 9.0, 9.0, 1.0, 9.0, 9.0, 9.0, 1.0]).unwrap();
        let (seam, cost) = min_seam(&e);
        assert_eq!(seam.columns, vec![0, 1, 2]);
        assert_eq!(cost, 3.0);
        assert_eq!(brute_force(&e), (3.0, 17));
    }

    #[test]
    fn uniform_energy_takes_the_leftmost_seam() {
        let e = EnergyMap::new(3, 3, vec![2.5; 9]).unwrap();
        let (seam, cost) = min_seam(&e);
        assert_eq!(seam.columns, vec![0, 0, 0]);
        assert_eq!(cost, 7.5);
    }

    proptest! {
        #[test]
        fn dp_matches_exhaustive_search(h in 1usize..=6, w in 2usize..=6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = EnergyMap::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap();
            let (seam, cost) = min_seam(&e);
            prop_assert!(seam.is_connected());
            prop_assert!((seam.cost(&e) - cost).abs() < 1e-12);
            prop_assert!((cost - brute_force(&e).0).abs() < 1e-12);
        }

        #[test]
        fn removal_deletes_exactly_the_seam(h in 2usize..=6, w in 4usize..=7, k in 1usize..=2, seed in any::<u64>()) {
            let img = random_image(seed, h, w);
            let out = seam_retarget_with(&img, w - k, h, AxisOrder::WidthFirst).unwrap();
            prop_assert_eq!(out.image.dims(), (h, w - k));
            prop_assert_eq!(out.seams_removed, k);
            // each output row is a subsequence of the input row with k pixels dropped
            for y in 0..h {
                let row = |im: &ImageTensor| (0..im.width()).map(|x| im.get(0, y, x)).collect::<Vec<_>>();
                let (src, dst) = (row(&img), row(&out.image));
                let mut it = src.iter();
                prop_assert!(dst.iter().all(|v| it.any(|s| s == v)));
            }
        }
    }

    #[test]
    fn identity_target_is_a_no_op() {
        let img = random_image(2, 6, 7);
        let out = seam_retarget_with(&img, 7, 6, AxisOrder::WidthFirst).unwrap();
        assert_eq!(out.image, img);
        assert_eq!(out.removed_energy, 0.0);
    }

    #[test]
    fn single_removal_drops_one_pixel_per_row() {
        let img = random_image(3, 5, 6);
        let (seam, _) = min_seam(&energy_map(&img).unwrap());
        let out = seam_retarget(&img, 5, 5).unwrap();
        assert_eq!(out.dims(), (5, 5));
        for y in 0..5 {
            for x in 0..5 {
                let src = if x < seam.columns[y] { x } else { x + 1 };
                for c in 0..3 {
                    assert_eq!(out.get(c, y, x), img.get(c, y, src));
                }
            }
        }
    }

    #[test]
    fn removed_energy_matches_greedy_oracle() {
        let img = random_image(4, 6, 6);
        let mut oracle = img.clone();
        let mut total = 0.0;
        for _ in 0..3 {
            let (h, w) = oracle.dims();
            let e = EnergyMap::new(h, w, (0..h * w).map(|i| scalar_energy(&oracle, i / w, i % w)).collect()).unwrap();
            let best = brute_force(&e).0;
            let (seam, cost) = min_seam(&e);
            assert!((cost - best).abs() < 1e-12);
            total += best;
            oracle = remove_seam(&oracle, &seam).unwrap();
        }
        let out = seam_retarget_with(&img, 3, 6, AxisOrder::WidthFirst).unwrap();
        assert!((out.removed_energy - total).abs() < 1e-9);
        assert_eq!(out.image, oracle);
    }

    #[test]
    fn enlargement_and_height_pass() {
        let img = random_image(5, 6, 8);
        let out = seam_retarget(&img, 19, 4).unwrap();
        assert_eq!(out.dims(), (4, 19));
        let seams = lowest_seams(&img, 3).unwrap();
        for y in 0..6 {
            let mut cols: Vec<usize> = seams.iter().map(|s| s.columns[y]).collect();
            cols.sort();
            cols.dedup();
            assert_eq!(cols.len(), 3, "seams overlap in row {y}");
        }
        let wide = insert_seams(&img, &seams);
        assert_eq!(wide.dims(), (6, 11));
    }

    #[test]
    fn axis_order_is_configurable() {
        let img = random_image(6, 7, 7);
        let a = seam_retarget_with(&img, 5, 5, AxisOrder::WidthFirst).unwrap();
        let b = seam_retarget_with(&img, 5, 5, AxisOrder::HeightFirst).unwrap();
        assert_eq!(a.image.dims(), b.image.dims());
        assert_eq!("height-first".parse::<AxisOrder>().unwrap(), AxisOrder::HeightFirst);
        assert!(seam_retarget(&img, 1, 5).is_err());
    }
}

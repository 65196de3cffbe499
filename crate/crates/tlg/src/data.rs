//! Episodes, pseudo-mask normalization, synthetic datasets, and disk IO.
//!
//! A dataset is immutable once built and safe to share across threads.
//! Episode sampling is a pure function of `(categories, shot, seed, index)`,
//! so replaying an evaluation only needs those four values.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use ndarray::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TlgError};

/// One 1-way K-shot task: K support image/pseudo-mask pairs plus one query.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support_images: Vec<Array3<f64>>,
    pub support_pseudo_masks: Vec<Array2<f64>>,
    pub query_image: Array3<f64>,
    pub query_pseudo_mask: Array2<f64>,
    /// Exact ground-truth query mask when the dataset has one (synthetic data
    /// does); falls back to the binarized pseudo-mask for disk datasets.
    pub query_gt_mask: Array2<u8>,
    pub category_id: usize,
    pub fold_id: usize,
    pub shot_count: usize,
    /// Replay identity within a run: (fold_id, seed, index).
    pub index: u64,
    /// Exemplar ids, for diagnostics and frozen-feature caching.
    pub support_ids: Vec<String>,
    pub query_id: String,
}

impl Episode {
    pub fn image_size(&self) -> usize {
        self.query_image.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.query_image.shape()[1], self.query_image.shape()[2]);
        if self.support_images.len() != self.shot_count
            || self.support_pseudo_masks.len() != self.shot_count
        {
            return Err(TlgError::DataValidation(format!(
                "episode shot_count {} does not match support list length {}",
                self.shot_count,
                self.support_images.len()
            )));
        }
        for img in self.support_images.iter().chain(std::iter::once(&self.query_image)) {
            if img.shape() != [3, h, w] {
                return Err(TlgError::DataValidation(
                    "all episode images must share one spatial size".into(),
                ));
            }
        }
        for m in self.support_pseudo_masks.iter().chain(std::iter::once(&self.query_pseudo_mask)) {
            if m.shape() != [h, w] {
                return Err(TlgError::DataValidation("mask spatial size mismatch".into()));
            }
            if m.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(TlgError::DataValidation("pseudo-mask values must lie in [0,1]".into()));
            }
        }
        Ok(())
    }
}

/// Disjoint base/novel category partition for one fold.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub train_categories: BTreeSet<usize>,
    pub test_categories: BTreeSet<usize>,
    pub fold_id: usize,
}

impl FoldSplit {
    /// Round-robin split: category `c` is held out in fold `c % n_folds`.
    pub fn round_robin(n_categories: usize, n_folds: usize, fold_id: usize) -> Result<Self> {
        if fold_id >= n_folds {
            return Err(TlgError::Config(format!("fold_id {fold_id} out of range 0..{n_folds}")));
        }
        let test: BTreeSet<usize> = (0..n_categories).filter(|c| c % n_folds == fold_id).collect();
        let train: BTreeSet<usize> = (0..n_categories).filter(|c| !test.contains(c)).collect();
        Self::new(train, test, fold_id)
    }

    pub fn new(train: BTreeSet<usize>, test: BTreeSet<usize>, fold_id: usize) -> Result<Self> {
        if !train.is_disjoint(&test) {
            return Err(TlgError::Config("fold train/test categories overlap".into()));
        }
        Ok(FoldSplit { train_categories: train, test_categories: test, fold_id })
    }

    /// Validate that the split covers exactly the dataset's categories.
    pub fn check_covers(&self, n_categories: usize) -> Result<()> {
        let union: BTreeSet<usize> =
            self.train_categories.union(&self.test_categories).cloned().collect();
        let all: BTreeSet<usize> = (0..n_categories).collect();
        if union != all {
            return Err(TlgError::Config(format!(
                "fold {} does not cover all {} categories",
                self.fold_id, n_categories
            )));
        }
        Ok(())
    }
}

/// Normalize a raw activation map to a [0,1] pseudo-mask: relu then divide by
/// the max. An all-non-positive input maps to zeros rather than dividing by 0.
pub fn normalize_cam(raw: &Array2<f64>) -> Result<Array2<f64>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(TlgError::DataValidation("activation map contains non-finite values".into()));
    }
    let relu = raw.mapv(|v| v.max(0.0));
    let max = relu.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        Ok(relu.mapv(|v| v / max))
    } else {
        Ok(Array2::zeros(raw.raw_dim()))
    }
}

/// Box blur with the given radius; border windows divide by the in-bounds
/// cell count so constants survive.
pub fn box_blur(m: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (h, w) = m.dim();
    let r = radius as i64;
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            let mut n = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        s += m[[yy as usize, xx as usize]];
                        n += 1.0;
                    }
                }
            }
            out[[y, x]] = s / n;
        }
    }
    out
}

/// One labeled exemplar: image, exact mask (if known), soft pseudo-mask.
#[derive(Debug, Clone)]
pub struct Exemplar {
    pub id: String,
    pub image: Array3<f64>,
    pub gt_mask: Array2<u8>,
    pub pseudo_mask: Array2<f64>,
    pub category_id: usize,
}

/// Immutable exemplar collection with per-category indices.
#[derive(Debug)]
pub struct Dataset {
    pub exemplars: Vec<Exemplar>,
    pub category_names: Vec<String>,
    pub image_size: usize,
    by_category: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(exemplars: Vec<Exemplar>, category_names: Vec<String>, image_size: usize) -> Result<Self> {
        let mut by_category = vec![Vec::new(); category_names.len()];
        for (i, e) in exemplars.iter().enumerate() {
            if e.category_id >= category_names.len() {
                return Err(TlgError::DataValidation(format!(
                    "exemplar {} has category {} outside 0..{}",
                    e.id,
                    e.category_id,
                    category_names.len()
                )));
            }
            by_category[e.category_id].push(i);
        }
        Ok(Dataset { exemplars, category_names, image_size, by_category })
    }

    pub fn n_categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn exemplars_of(&self, category: usize) -> &[usize] {
        &self.by_category[category]
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }
}

/// Deterministic episode sampler over a fixed category set.
pub struct EpisodeSampler {
    dataset: Arc<Dataset>,
    categories: Vec<usize>,
    shot: usize,
    fold_id: usize,
}

impl EpisodeSampler {
    /// Fails early if any listed category cannot supply K support images plus
    /// one query.
    pub fn new(
        dataset: Arc<Dataset>,
        categories: &BTreeSet<usize>,
        shot: usize,
        fold_id: usize,
    ) -> Result<Self> {
        if categories.is_empty() {
            return Err(TlgError::Sampling("empty category set".into()));
        }
        for &c in categories {
            let have = dataset.exemplars_of(c).len();
            if have < shot + 1 {
                return Err(TlgError::Sampling(format!(
                    "category {} ({}) has {} exemplars but {}-shot episodes need {}",
                    c,
                    dataset.category_names.get(c).map(String::as_str).unwrap_or("?"),
                    have,
                    shot,
                    shot + 1
                )));
            }
        }
        Ok(EpisodeSampler {
            dataset,
            categories: categories.iter().cloned().collect(),
            shot,
            fold_id,
        })
    }

    /// Sample episode `index` of the stream identified by `seed`; the triple
    /// (fold_id, seed, index) fully determines the result.
    pub fn sample(&self, seed: u64, index: u64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (self.fold_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03),
        );
        let category = self.categories[rng.gen_range(0..self.categories.len())];
        let pool = self.dataset.exemplars_of(category);
        let mut picks: Vec<usize> = pool.to_vec();
        picks.shuffle(&mut rng);
        picks.truncate(self.shot + 1);
        let support: Vec<&Exemplar> =
            picks[..self.shot].iter().map(|&i| &self.dataset.exemplars[i]).collect();
        let query = &self.dataset.exemplars[picks[self.shot]];
        Episode {
            support_images: support.iter().map(|e| e.image.clone()).collect(),
            support_pseudo_masks: support.iter().map(|e| e.pseudo_mask.clone()).collect(),
            query_image: query.image.clone(),
            query_pseudo_mask: query.pseudo_mask.clone(),
            query_gt_mask: query.gt_mask.clone(),
            category_id: category,
            fold_id: self.fold_id,
            shot_count: self.shot,
            index,
            support_ids: support.iter().map(|e| e.id.clone()).collect(),
            query_id: query.id.clone(),
        }
    }
}

// ---- synthetic dataset ----

/// Parametric shape families available to the synthetic generator, one per
/// category, in declaration order.
pub const SHAPE_NAMES: [&str; 6] = ["disk", "bar", "ring", "cross", "triangle", "diamond"];

struct Pose {
    cx: f64,
    cy: f64,
    scale: f64,
    angle: f64,
}

fn shape_mask(kind: usize, size: usize, pose: &Pose) -> Array2<u8> {
    let mut m = Array2::<u8>::zeros((size, size));
    let (sin, cos) = pose.angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            // rotate into the shape's local frame, normalized by scale
            let dx = x as f64 - pose.cx;
            let dy = y as f64 - pose.cy;
            let u = (dx * cos + dy * sin) / pose.scale;
            let v = (-dx * sin + dy * cos) / pose.scale;
            let inside = match kind {
                0 => u * u + v * v <= 1.0,                                   // disk
                1 => u.abs() <= 1.0 && v.abs() <= 0.35,                      // bar
                2 => {
                    let r2 = u * u + v * v;
                    (0.45..=1.0).contains(&r2.sqrt())                        // ring
                }
                3 => (u.abs() <= 1.0 && v.abs() <= 0.3) || (v.abs() <= 1.0 && u.abs() <= 0.3), // cross
                4 => v >= -0.8 && v <= 1.0 && u.abs() <= (1.0 - v) * 0.55,   // triangle
                _ => u.abs() + v.abs() <= 1.0,                               // diamond
            };
            if inside {
                m[[y, x]] = 1;
            }
        }
    }
    m
}

fn category_color(category: usize) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (ch, slot) in c.iter_mut().enumerate() {
        let phase = 2.0 * std::f64::consts::PI * (category as f64 / 6.0 + ch as f64 / 3.0);
        *slot = 0.5 + 0.5 * phase.cos();
    }
    c
}

/// Low-resolution noise grid bilinearly upsampled to a smooth background field.
fn smooth_noise(size: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = 5usize;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.gen_range(0.0..amplitude)).collect();
    let mut out = Array2::<f64>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 / (size - 1) as f64 * (g - 1) as f64;
            let fx = x as f64 / (size - 1) as f64 * (g - 1) as f64;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
            let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
            out[[y, x]] = (1.0 - wy) * (1.0 - wx) * grid[y0 * g + x0]
                + (1.0 - wy) * wx * grid[y0 * g + x1]
                + wy * (1.0 - wx) * grid[y1 * g + x0]
                + wy * wx * grid[y1 * g + x1];
        }
    }
    out
}

fn random_pose(size: usize, scale_lo: f64, scale_hi: f64, rng: &mut ChaCha8Rng) -> Pose {
    Pose {
        cx: rng.gen_range(0.28..0.72) * size as f64,
        cy: rng.gen_range(0.28..0.72) * size as f64,
        scale: rng.gen_range(scale_lo..scale_hi) * size as f64,
        angle: rng.gen_range(0.0..std::f64::consts::PI),
    }
}

fn paint_shape(image: &mut Array3<f64>, mask: &Array2<u8>, color: [f64; 3], intensity: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = mask.dim();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 1 {
                for ch in 0..3 {
                    let v = intensity * (0.6 + 0.4 * color[ch]) + rng.gen_range(-0.03..0.03);
                    image[[ch, y, x]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Knobs for the synthetic generator; all exposed through the config file.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_categories: usize,
    pub exemplars_per_category: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Paint 0..=max_distractors shapes of other categories into the background.
    pub max_distractors: usize,
}

impl SyntheticSpec {
    pub fn new(n_categories: usize, exemplars_per_category: usize, image_size: usize, seed: u64) -> Self {
        SyntheticSpec { n_categories, exemplars_per_category, image_size, seed, max_distractors: 2 }
    }
}

/// Generate a desk-scale dataset: each category is a distinct parametric shape
/// over a smooth noisy background, ground-truth masks exact, pseudo-masks
/// produced by blurring + renormalizing the ground truth.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.image_size < 32 {
        return Err(TlgError::Config(format!(
            "synthetic image_size {} below the minimum of 32",
            spec.image_size
        )));
    }
    if spec.n_categories == 0 || spec.n_categories > SHAPE_NAMES.len() {
        return Err(TlgError::Config(format!(
            "n_categories {} outside 1..={} available shape generators",
            spec.n_categories,
            SHAPE_NAMES.len()
        )));
    }
    let size = spec.image_size;
    let mut exemplars = Vec::with_capacity(spec.n_categories * spec.exemplars_per_category);
    for category in 0..spec.n_categories {
        for ex in 0..spec.exemplars_per_category {
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed ^ (category as u64) << 32 ^ (ex as u64).wrapping_mul(0x2545_F491_4F6C_DD1D),
            );
            // rejection-sample the pose until the foreground fraction lands
            // inside [0.05, 0.6]
            let (gt, pose_ok) = {
                let mut found = None;
                for _ in 0..100 {
                    let pose = random_pose(size, 0.14, 0.30, &mut rng);
                    let m = shape_mask(category, size, &pose);
                    let frac = m.iter().map(|&v| v as usize).sum::<usize>() as f64
                        / (size * size) as f64;
                    if (0.05..=0.6).contains(&frac) {
                        found = Some(m);
                        break;
                    }
                }
                match found {
                    Some(m) => (m, true),
                    None => (Array2::zeros((size, size)), false),
                }
            };
            if !pose_ok {
                return Err(TlgError::Runtime(format!(
                    "could not place shape for category {category} within the foreground budget"
                )));
            }

            let bg = smooth_noise(size, 0.35, &mut rng);
            let mut image = Array3::<f64>::zeros((3, size, size));
            for ch in 0..3 {
                let tint = rng.gen_range(0.85..1.0);
                for y in 0..size {
                    for x in 0..size {
                        image[[ch, y, x]] =
                            (bg[[y, x]] * tint + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
                    }
                }
            }

            if spec.n_categories > 1 && spec.max_distractors > 0 {
                let n_distractors = rng.gen_range(0..=spec.max_distractors);
                for _ in 0..n_distractors {
                    let mut other = rng.gen_range(0..spec.n_categories);
                    if other == category {
                        other = (other + 1) % spec.n_categories;
                    }
                    let pose = random_pose(size, 0.07, 0.13, &mut rng);
                    let m = shape_mask(other, size, &pose);
                    let intensity = rng.gen_range(0.55..0.75);
                    paint_shape(&mut image, &m, category_color(other), intensity, &mut rng);
                }
            }

            let intensity = rng.gen_range(0.7..1.0);
            paint_shape(&mut image, &gt, category_color(category), intensity, &mut rng);

            let gt_f = gt.mapv(|v| v as f64);
            let pseudo = normalize_cam(&box_blur(&gt_f, 2))?;
            exemplars.push(Exemplar {
                id: format!("{:06}", category * spec.exemplars_per_category + ex),
                image,
                gt_mask: gt,
                pseudo_mask: pseudo,
                category_id: category,
            });
        }
    }
    let names = SHAPE_NAMES[..spec.n_categories].iter().map(|s| s.to_string()).collect();
    Dataset::new(exemplars, names, size)
}

// ---- disk layout ----
//
// root/images/<id>.png   8-bit RGB
// root/masks/<id>.png    8-bit grayscale, 0-255 rescaled to [0,1] on load
// root/categories.csv    id, category_name, category_id
// root/folds.toml        optional: `folds = [[...], ...]` test categories per fold

#[derive(Debug, serde::Deserialize, serde::Serialize)]
struct FoldFile {
    folds: Vec<Vec<usize>>,
}

/// Persist a dataset in the documented directory layout.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    let mut wtr = csv::Writer::from_path(root.join("categories.csv"))
        .map_err(|e| TlgError::Io(std::io::Error::other(e)))?;
    wtr.write_record(["id", "category_name", "category_id"])
        .map_err(|e| TlgError::Io(std::io::Error::other(e)))?;
    for e in &dataset.exemplars {
        let (h, w) = (e.image.shape()[1], e.image.shape()[2]);
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (e.image[[0, y, x]] * 255.0).round() as u8,
                    (e.image[[1, y, x]] * 255.0).round() as u8,
                    (e.image[[2, y, x]] * 255.0).round() as u8,
                ];
                rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        rgb.save(images.join(format!("{}.png", e.id)))?;
        let mut gray = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                gray.put_pixel(
                    x as u32,
                    y as u32,
                    image::Luma([(e.pseudo_mask[[y, x]] * 255.0).round() as u8]),
                );
            }
        }
        gray.save(masks.join(format!("{}.png", e.id)))?;
        wtr.write_record([
            e.id.as_str(),
            &dataset.category_names[e.category_id],
            &e.category_id.to_string(),
        ])
        .map_err(|e| TlgError::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;
    Ok(())
}

struct CatalogRow {
    id: String,
    category_name: String,
    category_id: usize,
}

fn read_catalog(root: &Path) -> Result<Vec<CatalogRow>> {
    let path = root.join("categories.csv");
    let mut rdr = csv::Reader::from_path(&path)
        .map_err(|e| TlgError::DataValidation(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| TlgError::DataValidation(format!("bad catalog row: {e}")))?;
        if rec.len() != 3 {
            return Err(TlgError::DataValidation(format!(
                "categories.csv rows need 3 fields, got {}",
                rec.len()
            )));
        }
        rows.push(CatalogRow {
            id: rec[0].to_string(),
            category_name: rec[1].to_string(),
            category_id: rec[2]
                .parse()
                .map_err(|_| TlgError::DataValidation(format!("bad category id {}", &rec[2])))?,
        });
    }
    Ok(rows)
}

/// Load the pseudo-masks of a dataset directory, keyed by image id. Every id
/// listed in `categories.csv` must have a mask file; values are validated to
/// [0,1].
pub fn load_precomputed_masks(root: &Path) -> Result<std::collections::BTreeMap<String, Array2<f64>>> {
    let rows = read_catalog(root)?;
    let mut missing = Vec::new();
    let mut out = std::collections::BTreeMap::new();
    for row in &rows {
        let path = root.join("masks").join(format!("{}.png", row.id));
        if !path.exists() {
            missing.push(row.id.clone());
            continue;
        }
        let img = image::open(&path)?.into_luma8();
        let (w, h) = img.dimensions();
        let mut m = Array2::<f64>::zeros((h as usize, w as usize));
        for y in 0..h {
            for x in 0..w {
                m[[y as usize, x as usize]] = img.get_pixel(x, y).0[0] as f64 / 255.0;
            }
        }
        if m.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(TlgError::DataValidation(format!(
                "mask {} has values outside [0,1]",
                row.id
            )));
        }
        out.insert(row.id.clone(), m);
    }
    if !missing.is_empty() {
        return Err(TlgError::DataValidation(format!(
            "missing masks for listed images: {}",
            missing.join(", ")
        )));
    }
    Ok(out)
}

/// Load a dataset saved with [`save_dataset`]. Ground truth is recovered by
/// binarizing the pseudo-mask at 0.5 since the layout ships no separate exact
/// masks.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let rows = read_catalog(root)?;
    let masks = load_precomputed_masks(root)?;
    let mut exemplars = Vec::with_capacity(rows.len());
    let mut names: Vec<String> = Vec::new();
    let mut size = 0usize;
    for row in rows {
        let path = root.join("images").join(format!("{}.png", row.id));
        let img = image::open(&path)?.into_rgb8();
        let (w, h) = img.dimensions();
        size = h as usize;
        let mut arr = Array3::<f64>::zeros((3, h as usize, w as usize));
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x, y).0;
                for ch in 0..3 {
                    arr[[ch, y as usize, x as usize]] = px[ch] as f64 / 255.0;
                }
            }
        }
        let pseudo = masks[&row.id].clone();
        let gt = pseudo.mapv(|v| u8::from(v >= 0.5));
        if row.category_id >= names.len() {
            names.resize(row.category_id + 1, String::new());
        }
        names[row.category_id] = row.category_name.clone();
        exemplars.push(Exemplar {
            id: row.id,
            image: arr,
            gt_mask: gt,
            pseudo_mask: pseudo,
            category_id: row.category_id,
        });
    }
    Dataset::new(exemplars, names, size)
}

/// Read fold definitions from `root/folds.toml` when present, otherwise build
/// round-robin folds.
pub fn load_folds(root: &Path, n_categories: usize, n_folds: usize) -> Result<Vec<FoldSplit>> {
    let path = root.join("folds.toml");
    if path.exists() {
        let text = std::fs::read_to_string(&path)?;
        let file: FoldFile = toml::from_str(&text)
            .map_err(|e| TlgError::Config(format!("bad folds.toml: {e}")))?;
        let all: BTreeSet<usize> = (0..n_categories).collect();
        file.folds
            .iter()
            .enumerate()
            .map(|(fold_id, test)| {
                let test: BTreeSet<usize> = test.iter().cloned().collect();
                let train: BTreeSet<usize> = all.difference(&test).cloned().collect();
                let split = FoldSplit::new(train, test, fold_id)?;
                split.check_covers(n_categories)?;
                Ok(split)
            })
            .collect()
    } else {
        (0..n_folds).map(|f| FoldSplit::round_robin(n_categories, n_folds, f)).collect()
    }
}

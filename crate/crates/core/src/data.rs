//! Label maps, palettes, self-supervised training triples and on-disk
//! datasets.
//!
//! Dataset layout:
//!
//! ```text
//! <root>/palette.json
//! <root>/<split>/labels/<name>.png   8-bit grayscale label ids
//! <root>/<split>/images/<name>.png   RGB, inpainting mode only
//! ```
//!
//! Samples are always visited in lexicographic file-name order.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_mask, BoxCorners, EditBox, Mask};
use crate::tensor::Tensor;

/// Seed used for deterministic test-time box selection.
pub const TEST_SEED: u64 = 679;
/// Minimum box-area / image-area ratio for sampled edit boxes.
pub const DEFAULT_SIZE_THRESHOLD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
    pub editable: bool,
}

/// Category ids, names and display colors, as stored in `palette.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorPalette {
    pub categories: Vec<Category>,
    pub size_threshold: f64,
}

impl ColorPalette {
    /// Sorts categories by id and checks ids and colors are unique.
    pub fn new(mut categories: Vec<Category>, size_threshold: f64) -> Result<Self> {
        categories.sort_by_key(|c| c.id);
        if categories.is_empty() {
            return Err(Error::Config("palette has no categories".into()));
        }
        for (i, a) in categories.iter().enumerate() {
            for b in &categories[i + 1..] {
                if a.id == b.id {
                    return Err(Error::Config(format!("duplicate category id {}", a.id)));
                }
                if a.color == b.color {
                    return Err(Error::Config(format!(
                        "categories {} and {} share color {:?}",
                        a.id, b.id, a.color
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&size_threshold) {
            return Err(Error::Config(format!("size_threshold {size_threshold} not in [0, 1)")));
        }
        Ok(Self {
            categories,
            size_threshold,
        })
    }

    /// The palette used by the bundled synthetic shapes data.
    pub fn synthetic() -> Self {
        let cat = |id, name: &str, color, editable| Category {
            id,
            name: name.to_string(),
            color,
            editable,
        };
        Self::new(
            vec![
                cat(0, "background", [30, 30, 30], false),
                cat(1, "ground", [128, 64, 128], false),
                cat(2, "car", [0, 0, 220], true),
                cat(3, "tree", [40, 200, 40], true),
                cat(4, "person", [220, 20, 60], true),
                cat(5, "sign", [250, 220, 0], true),
            ],
            DEFAULT_SIZE_THRESHOLD,
        )
        .expect("valid built-in palette")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: ColorPalette = serde_json::from_slice(&fs::read(path)?)?;
        Self::new(raw.categories, raw.size_threshold)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Channel index of a label in one-hot encodings.
    pub fn index_of(&self, id: u8) -> Option<usize> {
        self.categories.binary_search_by_key(&id, |c| c.id).ok()
    }

    pub fn category(&self, id: u8) -> Option<&Category> {
        self.index_of(id).map(|i| &self.categories[i])
    }

    pub fn color(&self, id: u8) -> Result<[u8; 3]> {
        self.category(id).map(|c| c.color).ok_or(Error::UnknownLabel(id))
    }

    pub fn is_editable(&self, id: u8) -> bool {
        self.category(id).is_some_and(|c| c.editable)
    }

    pub fn editable_ids(&self) -> Vec<u8> {
        self.categories.iter().filter(|c| c.editable).map(|c| c.id).collect()
    }

    pub fn validate_target(&self, id: u8) -> Result<()> {
        match self.category(id) {
            None => Err(Error::UnknownLabel(id)),
            Some(c) if !c.editable => Err(Error::NotEditable(id)),
            Some(_) => Ok(()),
        }
    }
}

/// Single-channel map of category ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("{} labels for {height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.data[row * self.width + col] = label;
    }

    pub fn validate(&self, palette: &ColorPalette) -> Result<()> {
        match self.data.iter().find(|&&l| palette.index_of(l).is_none()) {
            Some(&l) => Err(Error::UnknownLabel(l)),
            None => Ok(()),
        }
    }

    pub fn distinct_labels(&self) -> BTreeSet<u8> {
        self.data.iter().copied().collect()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, &self.data, image::ExtendedColorType::L8)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_luma8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!("{} bytes for {height}x{width} RGB", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-major tensor scaled to `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(3, self.height, self.width, |c, r, col| {
            self.data[(r * self.width + col) * 3 + c] as f64 / 127.5 - 1.0
        })
    }

    /// Inverse of [`RgbImage::to_tensor`], rounding and saturating.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.channels() != 3 {
            return Err(Error::shape(format!("{} channels, expected 3", t.channels())));
        }
        let (h, w) = (t.height(), t.width());
        let mut data = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for col in 0..w {
                for c in 0..3 {
                    data.push(((t.at(c, r, col) + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Self::new(h, w, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, &self.data, image::ExtendedColorType::Rgb8)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

fn encode_png(width: usize, height: usize, data: &[u8], color: image::ExtendedColorType) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(data, width as u32, height as u32, color)?;
    Ok(out)
}

/// Renders labels through the palette.
pub fn color_encode(labels: &LabelMap, palette: &ColorPalette) -> Result<RgbImage> {
    let mut data = Vec::with_capacity(labels.data.len() * 3);
    for &l in &labels.data {
        data.extend_from_slice(&palette.color(l)?);
    }
    RgbImage::new(labels.height, labels.width, data)
}

fn nearest_label(rgb: [f64; 3], palette: &ColorPalette) -> u8 {
    let mut best = palette.categories[0].id;
    let mut best_d = f64::INFINITY;
    // Categories are sorted by id, so a strict comparison keeps the smallest
    // id on ties.
    for cat in &palette.categories {
        let d: f64 = (0..3).map(|i| (rgb[i] - cat.color[i] as f64).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = cat.id;
        }
    }
    best
}

/// Nearest palette color per pixel (Euclidean RGB), ties to the smaller id.
pub fn color_decode(image: &RgbImage, palette: &ColorPalette) -> LabelMap {
    let data = image
        .data
        .chunks_exact(3)
        .map(|p| nearest_label([p[0] as f64, p[1] as f64, p[2] as f64], palette))
        .collect();
    LabelMap {
        height: image.height,
        width: image.width,
        data,
    }
}

/// [`color_decode`] for a network-space color map in `[-1, 1]`.
pub fn color_decode_tensor(image: &Tensor, palette: &ColorPalette) -> LabelMap {
    let (h, w) = (image.height(), image.width());
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let rgb = [0, 1, 2].map(|ch| (image.at(ch, r, c) + 1.0) * 127.5);
            data.push(nearest_label(rgb, palette));
        }
    }
    LabelMap { height: h, width: w, data }
}

/// One channel per palette category, 1.0 where the pixel has that label.
pub fn one_hot(labels: &LabelMap, palette: &ColorPalette) -> Result<Tensor> {
    let mut t = Tensor::zeros(palette.len(), labels.height, labels.width);
    for r in 0..labels.height {
        for c in 0..labels.width {
            let l = labels.get(r, c);
            let idx = palette.index_of(l).ok_or(Error::UnknownLabel(l))?;
            *t.at_mut(idx, r, c) = 1.0;
        }
    }
    Ok(t)
}

/// Copy of `complete` with the box interior overwritten by the target label.
/// Everything outside the box is kept, so the model sees the whole map.
pub fn build_incomplete(complete: &LabelMap, edit: &EditBox) -> Result<LabelMap> {
    let b = edit.corners;
    b.validate(complete.height, complete.width)?;
    let mut out = complete.clone();
    for r in b.top..=b.bottom {
        for c in b.left..=b.right {
            out.set(r, c, edit.target_label);
        }
    }
    Ok(out)
}

/// A 4-connected region of one label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub label: u8,
    pub bounds: BoxCorners,
    pub pixels: usize,
}

/// 4-connected components of every label, in raster order of their first
/// pixel.
pub fn components(labels: &LabelMap) -> Vec<Component> {
    let (h, w) = (labels.height, labels.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        let label = labels.data[start];
        seen[start] = true;
        queue.push_back(start);
        let (r0, c0) = (start / w, start % w);
        let mut bounds = BoxCorners::new(r0, c0, r0, c0);
        let mut pixels = 0;
        while let Some(i) = queue.pop_front() {
            pixels += 1;
            let (r, c) = (i / w, i % w);
            bounds = BoxCorners::new(bounds.top.min(r), bounds.left.min(c), bounds.bottom.max(r), bounds.right.max(c));
            let mut visit = |j: usize| {
                if !seen[j] && labels.data[j] == label {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        out.push(Component { label, bounds, pixels });
    }
    out
}

/// Which split of a dataset to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Sampling parameters for one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: Split,
    pub editable: Vec<u8>,
    pub size_threshold: f64,
    pub height: usize,
    pub width: usize,
    pub test_seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.size_threshold) {
            return Err(Error::Config(format!("size_threshold {} not in [0, 1)", self.size_threshold)));
        }
        Ok(())
    }
}

/// Picks an editable object instance whose bounding box covers at least
/// `size_threshold` of the image, uniformly among qualifying instances.
/// Returns `None` when nothing qualifies (such images are skipped).
pub fn sample_box<R: Rng + ?Sized>(complete: &LabelMap, spec: &DatasetSpec, rng: &mut R) -> Option<EditBox> {
    let total = (complete.height * complete.width) as f64;
    let candidates: Vec<Component> = components(complete)
        .into_iter()
        .filter(|c| spec.editable.contains(&c.label))
        .filter(|c| c.bounds.area() as f64 / total >= spec.size_threshold)
        .collect();
    candidates.choose(rng).map(|c| EditBox::new(c.bounds, c.label))
}

/// A self-supervised example: the map with its box filled by the target
/// label, and the colour maps the losses compare against.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriple {
    pub name: String,
    pub complete: LabelMap,
    pub incomplete: LabelMap,
    pub edit: EditBox,
    /// Color rendering of `complete`, in `[-1, 1]`.
    pub ground_truth_color: Tensor,
    /// Color rendering of `incomplete`, in `[-1, 1]`.
    pub context_color: Tensor,
    pub mask: Mask,
}

impl TrainingTriple {
    pub fn new(name: impl Into<String>, complete: &LabelMap, edit: EditBox, palette: &ColorPalette) -> Result<Self> {
        let incomplete = build_incomplete(complete, &edit)?;
        Ok(Self {
            name: name.into(),
            complete: complete.clone(),
            ground_truth_color: color_encode(complete, palette)?.to_tensor(),
            context_color: color_encode(&incomplete, palette)?.to_tensor(),
            mask: make_mask(&edit.corners, complete.height, complete.width)?,
            incomplete,
            edit,
        })
    }
}

/// One sample of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub labels: LabelMap,
    pub image: Option<RgbImage>,
}

/// A loaded split, sorted by file name.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub palette: ColorPalette,
    pub records: Vec<Record>,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let palette = ColorPalette::load(&root.join("palette.json"))?;
        let dir = root.join(split.dir_name());
        let label_dir = dir.join("labels");
        let image_dir = dir.join("images");
        let mut names: Vec<String> = fs::read_dir(&label_dir)
            .map_err(|e| Error::Dataset(format!("{}: {e}", label_dir.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".png"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::Empty("dataset split has no label images"));
        }
        let mut records = Vec::with_capacity(names.len());
        for name in names {
            let labels = LabelMap::load_png(&label_dir.join(&name))?;
            labels.validate(&palette)?;
            let image_path = image_dir.join(&name);
            let image = if image_path.exists() {
                Some(RgbImage::load_png(&image_path)?)
            } else {
                None
            };
            records.push(Record {
                name: name.trim_end_matches(".png").to_string(),
                labels,
                image,
            });
        }
        let (height, width) = (records[0].labels.height(), records[0].labels.width());
        if records.iter().any(|r| r.labels.height() != height || r.labels.width() != width) {
            return Err(Error::Dataset("label maps differ in size".into()));
        }
        Ok(Self {
            palette,
            records,
            height,
            width,
        })
    }

    pub fn from_records(palette: ColorPalette, records: Vec<Record>) -> Result<Self> {
        let first = records.first().ok_or(Error::Empty("dataset has no records"))?;
        let (height, width) = (first.labels.height(), first.labels.width());
        Ok(Self {
            palette,
            records,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn spec(&self, root: PathBuf, split: Split) -> DatasetSpec {
        DatasetSpec {
            root,
            split,
            editable: self.palette.editable_ids(),
            size_threshold: self.palette.size_threshold,
            height: self.height,
            width: self.width,
            test_seed: TEST_SEED,
        }
    }

    pub fn has_images(&self) -> bool {
        self.records.iter().all(|r| r.image.is_some())
    }

    /// Writes the split under `root`, and the palette next to it.
    pub fn save(&self, root: &Path, split: Split) -> Result<()> {
        let dir = root.join(split.dir_name());
        fs::create_dir_all(dir.join("labels"))?;
        self.palette.save(&root.join("palette.json"))?;
        for rec in &self.records {
            rec.labels.save_png(&dir.join("labels").join(format!("{}.png", rec.name)))?;
            if let Some(img) = &rec.image {
                fs::create_dir_all(dir.join("images"))?;
                img.save_png(&dir.join("images").join(format!("{}.png", rec.name)))?;
            }
        }
        Ok(())
    }
}

/// Deterministic test-time boxes: one RNG seeded with `spec.test_seed`,
/// consumed in record order. Records without a qualifying box are skipped.
pub fn test_masking(dataset: &Dataset, spec: &DatasetSpec) -> Result<Vec<TrainingTriple>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset has no records"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.test_seed);
    let mut out = Vec::new();
    for rec in &dataset.records {
        if let Some(edit) = sample_box(&rec.labels, spec, &mut rng) {
            out.push(TrainingTriple::new(rec.name.clone(), &rec.labels, edit, &dataset.palette)?);
        }
    }
    Ok(out)
}

fn place_object<R: Rng + ?Sized>(rng: &mut R, label: u8, height: usize, width: usize) -> (BoxCorners, u8) {
    // Sizes are scaled from a 32×32 reference so every object clears the
    // default area threshold.
    let sh = |v: usize| (v * height).div_ceil(32).max(1);
    let sw = |v: usize| (v * width).div_ceil(32).max(1);
    let (bh, bw) = match label {
        2 => (rng.random_range(sh(5)..=sh(8)), rng.random_range(sw(8)..=sw(13))),
        3 => {
            let d = rng.random_range(sh(6)..=sh(11));
            (d, (d * width / height.max(1)).clamp(1, width))
        }
        4 => (rng.random_range(sh(8)..=sh(13)), rng.random_range(sw(3)..=sw(5))),
        _ => {
            let s = rng.random_range(sh(5)..=sh(7));
            (s, (s * width / height.max(1)).clamp(1, width))
        }
    };
    let bh = bh.min(height);
    let bw = bw.min(width);
    let top = rng.random_range(0..=height - bh);
    let left = rng.random_range(0..=width - bw);
    (BoxCorners::new(top, left, top + bh - 1, left + bw - 1), label)
}

fn draw_object(map: &mut LabelMap, corners: &BoxCorners, label: u8) {
    let ellipse = label == 3 || label == 5;
    let cy = (corners.top + corners.bottom) as f64 / 2.0;
    let cx = (corners.left + corners.right) as f64 / 2.0;
    let ry = corners.height() as f64 / 2.0;
    let rx = corners.width() as f64 / 2.0;
    for r in corners.top..=corners.bottom {
        for c in corners.left..=corners.right {
            let inside = if ellipse {
                let dy = (r as f64 - cy) / ry;
                let dx = (c as f64 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            } else {
                true
            };
            if inside {
                map.set(r, c, label);
            }
        }
    }
}

fn separated(a: &BoxCorners, b: &BoxCorners) -> bool {
    a.bottom + 1 < b.top || b.bottom + 1 < a.top || a.right + 1 < b.left || b.right + 1 < a.left
}

/// Synthetic scenes over [`ColorPalette::synthetic`]: a ground band plus 2–5
/// non-touching objects. Cars and persons are rectangles of characteristic
/// aspect ratio, trees and signs are ellipses.
pub fn synthesize_shapes<R: Rng + ?Sized>(n: usize, height: usize, width: usize, rng: &mut R) -> Vec<LabelMap> {
    assert!(height >= 8 && width >= 8, "synthetic maps need at least 8x8 pixels");
    (0..n)
        .map(|_| {
            let mut map = LabelMap::filled(height, width, 0);
            let ground = rng.random_range(height / 8..=height / 4);
            for r in height - ground..height {
                for c in 0..width {
                    map.set(r, c, 1);
                }
            }
            let wanted = rng.random_range(2..=5);
            let mut placed: Vec<BoxCorners> = Vec::new();
            for _ in 0..200 {
                if placed.len() == wanted {
                    break;
                }
                let label = rng.random_range(2..=5u8);
                let (corners, label) = place_object(rng, label, height, width);
                if placed.iter().all(|p| separated(p, &corners)) {
                    draw_object(&mut map, &corners, label);
                    placed.push(corners);
                }
            }
            map
        })
        .collect()
}

/// A textured RGB rendering of a label map, used as the "natural image" for
/// inpainting. Each category gets its palette color modulated by a smooth
/// gradient and per-pixel noise.
pub fn render_natural<R: Rng + ?Sized>(labels: &LabelMap, palette: &ColorPalette, rng: &mut R) -> Result<RgbImage> {
    let (h, w) = (labels.height(), labels.width());
    let gy: f64 = rng.random_range(-40.0..40.0);
    let gx: f64 = rng.random_range(-40.0..40.0);
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let base = palette.color(labels.get(r, c))?;
            let shade = gy * (r as f64 / h as f64 - 0.5) + gx * (c as f64 / w as f64 - 0.5);
            for ch in base {
                let noise: f64 = rng.random_range(-12.0..12.0);
                data.push((ch as f64 + shade + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(h, w, data)
}

/// Generates the bundled train/test synthetic dataset in memory.
pub fn synthetic_dataset(n: usize, height: usize, width: usize, seed: u64, with_images: bool) -> Dataset {
    let palette = ColorPalette::synthetic();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maps = synthesize_shapes(n, height, width, &mut rng);
    let records = maps
        .into_iter()
        .enumerate()
        .map(|(i, labels)| {
            let image = with_images.then(|| render_natural(&labels, &palette, &mut rng).expect("palette covers labels"));
            Record {
                name: format!("{i:05}"),
                labels,
                image,
            }
        })
        .collect();
    Dataset::from_records(palette, records).expect("n >= 1")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(threshold: f64, editable: Vec<u8>) -> DatasetSpec {
        DatasetSpec {
            root: PathBuf::new(),
            split: Split::Test,
            editable,
            size_threshold: threshold,
            height: 100,
            width: 100,
            test_seed: TEST_SEED,
        }
    }

    #[test]
    fn encode_uniform_and_by_hand() {
        let p = ColorPalette::synthetic();
        let uniform = color_encode(&LabelMap::filled(3, 3, 2), &p).unwrap();
        assert!(uniform.data().chunks(3).all(|px| px == [0, 0, 220]));

        let m = LabelMap::new(2, 2, vec![0, 3, 3, 0]).unwrap();
        let img = color_encode(&m, &p).unwrap();
        assert_eq!(img.pixel(0, 0), [30, 30, 30]);
        assert_eq!(img.pixel(0, 1), [40, 200, 40]);
        assert_eq!(img.pixel(1, 0), [40, 200, 40]);
        assert_eq!(img.pixel(1, 1), [30, 30, 30]);
        assert!(matches!(
            color_encode(&LabelMap::filled(1, 1, 9), &p),
            Err(Error::UnknownLabel(9))
        ));
    }

    #[test]
    fn decode_tie_goes_to_smaller_id() {
        let p = ColorPalette::new(
            vec![
                Category { id: 4, name: "b".into(), color: [100, 0, 0], editable: true },
                Category { id: 1, name: "a".into(), color: [0, 0, 0], editable: true },
            ],
            0.02,
        )
        .unwrap();
        let img = RgbImage::new(1, 1, vec![50, 0, 0]).unwrap();
        assert_eq!(color_decode(&img, &p).get(0, 0), 1);
    }

    #[test]
    fn decode_perturbed_colors() {
        let p = ColorPalette::synthetic();
        for cat in &p.categories {
            for delta in [-3i16, 3] {
                let px = cat.color.map(|v| (v as i16 + delta).clamp(0, 255) as u8);
                let img = RgbImage::new(1, 1, px.to_vec()).unwrap();
                assert_eq!(color_decode(&img, &p).get(0, 0), cat.id);
            }
        }
    }

    #[test]
    fn decode_tensor_matches_byte_decode() {
        let p = ColorPalette::synthetic();
        let maps = synthesize_shapes(3, 16, 16, &mut ChaCha8Rng::seed_from_u64(2));
        for m in maps {
            let t = color_encode(&m, &p).unwrap().to_tensor();
            assert_eq!(color_decode_tensor(&t, &p), m);
        }
    }

    #[test]
    fn incomplete_examples() {
        let m = LabelMap::new(4, 4, (0..16).map(|i| (i % 3) as u8).collect()).unwrap();
        let e = EditBox::new(BoxCorners::new(1, 1, 2, 2), 7);
        let inc = build_incomplete(&m, &e).unwrap();
        let changed: usize = m.data().iter().zip(inc.data()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 4);
        assert_eq!(inc.data().iter().filter(|&&l| l == 7).count(), 4);

        let full = build_incomplete(&m, &EditBox::new(BoxCorners::new(0, 0, 3, 3), 5)).unwrap();
        assert!(full.data().iter().all(|&l| l == 5));

        let one = build_incomplete(&m, &EditBox::new(BoxCorners::new(0, 0, 0, 0), 0)).unwrap();
        assert_eq!(one, m);
        assert!(build_incomplete(&m, &EditBox::new(BoxCorners::new(0, 0, 4, 0), 0)).is_err());
    }

    fn square_map(side: usize) -> LabelMap {
        let mut m = LabelMap::filled(100, 100, 0);
        for r in 10..10 + side {
            for c in 20..20 + side {
                m.set(r, c, 2);
            }
        }
        m
    }

    #[test]
    fn sample_box_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = spec(0.02, vec![2, 3]);
        assert_eq!(sample_box(&LabelMap::filled(100, 100, 0), &s, &mut rng), None);
        assert_eq!(sample_box(&square_map(10), &s, &mut rng), None);
        let got = sample_box(&square_map(20), &s, &mut rng).unwrap();
        assert_eq!(got.corners, BoxCorners::new(10, 20, 29, 39));
        assert_eq!(got.target_label, 2);
    }

    #[test]
    fn synthetic_maps_all_have_a_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let maps = synthesize_shapes(50, 32, 32, &mut rng);
        let p = ColorPalette::synthetic();
        let mut s = spec(0.02, p.editable_ids());
        s.height = 32;
        s.width = 32;
        for m in &maps {
            assert!(m.distinct_labels().len() >= 2);
            assert!(sample_box(m, &s, &mut rng).is_some());
        }
        let again = synthesize_shapes(50, 32, 32, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(maps, again);
    }

    #[test]
    fn components_split_by_label_and_connectivity() {
        let m = LabelMap::new(3, 4, vec![1, 1, 0, 1, 0, 0, 0, 1, 2, 2, 0, 1]).unwrap();
        let comps = components(&m);
        let ones: Vec<_> = comps.iter().filter(|c| c.label == 1).collect();
        assert_eq!(ones.len(), 2);
        assert_eq!(ones[1].bounds, BoxCorners::new(0, 3, 2, 3));
        assert_eq!(comps.iter().map(|c| c.pixels).sum::<usize>(), 12);
    }

    #[test]
    fn png_round_trip() {
        let m = synthesize_shapes(1, 16, 20, &mut ChaCha8Rng::seed_from_u64(5)).remove(0);
        let bytes = m.to_png_bytes().unwrap();
        assert_eq!(LabelMap::from_png_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn triple_context_matches_incomplete_outside_mask() {
        let p = ColorPalette::synthetic();
        let ds = synthetic_dataset(4, 32, 32, 3, false);
        let s = ds.spec(PathBuf::new(), Split::Test);
        for t in test_masking(&ds, &s).unwrap() {
            let decoded = color_decode_tensor(&t.context_color, &p);
            for r in 0..32 {
                for c in 0..32 {
                    if !t.mask.get(r, c) {
                        assert_eq!(decoded.get(r, c), t.incomplete.get(r, c));
                        assert_eq!(t.incomplete.get(r, c), t.complete.get(r, c));
                    } else {
                        assert_eq!(t.incomplete.get(r, c), t.edit.target_label);
                    }
                }
            }
        }
    }
}

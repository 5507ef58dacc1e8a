//! Image and mask I/O, dataset splits, and synthetic test-image generation.
//!
//! Images are stored channel-first as `(C, H, W)` arrays of `f64` intensities
//! normalized to `[0, 1]`. Label masks are `(H, W)` arrays of small integer
//! labels; binary masks use label 1 for foreground.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// An intensity image with values in `[0, 1]`, stored as `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Wraps a `(C, H, W)` array, validating the type invariants.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(Error::validation(format!(
                "image must have 1 or 3 channels, got {c}"
            )));
        }
        if h < 2 || w < 2 {
            return Err(Error::validation(format!(
                "image must be at least 2x2, got {h}x{w}"
            )));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::validation(
                "image intensities must lie in [0, 1]".to_string(),
            ));
        }
        Ok(Image { data })
    }

    pub fn from_gray(gray: Array2<f64>) -> Result<Self> {
        let (h, w) = gray.dim();
        Image::new(gray.into_shape_with_order((1, h, w)).expect("reshape"))
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// Grayscale view: the single channel, or Rec.601 luma for RGB.
    pub fn luma(&self) -> Array2<f64> {
        let (c, h, w) = self.data.dim();
        if c == 1 {
            return self.data.index_axis(ndarray::Axis(0), 0).to_owned();
        }
        let mut out = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                out[[i, j]] = 0.299 * self.data[[0, i, j]]
                    + 0.587 * self.data[[1, i, j]]
                    + 0.114 * self.data[[2, i, j]];
            }
        }
        out
    }
}

/// A per-pixel labeling with labels in `{0, .., n_regions-1}`.
///
/// For binary masks (`n_regions == 2`) label 1 is foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    labels: Array2<u8>,
    n_regions: usize,
}

impl LabelMask {
    pub fn new(labels: Array2<u8>, n_regions: usize) -> Result<Self> {
        if n_regions < 2 {
            return Err(Error::validation("a mask needs at least 2 regions"));
        }
        if n_regions > u8::MAX as usize {
            return Err(Error::validation("too many regions"));
        }
        if labels.iter().any(|&l| l as usize >= n_regions) {
            return Err(Error::validation(format!(
                "mask labels must be < {n_regions}"
            )));
        }
        Ok(LabelMask { labels, n_regions })
    }

    /// Binary mask from a boolean foreground indicator.
    pub fn from_bool(fg: &Array2<bool>) -> Self {
        LabelMask {
            labels: fg.map(|&b| if b { 1u8 } else { 0u8 }),
            n_regions: 2,
        }
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    pub fn is_binary(&self) -> bool {
        self.n_regions == 2
    }

    /// Foreground indicator as 0/1 reals (binary masks only).
    pub fn fg_field(&self) -> Array2<f64> {
        self.labels.map(|&l| if l == 1 { 1.0 } else { 0.0 })
    }

    /// Number of pixels carrying `label`.
    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Loads a PNG/JPEG raster and normalizes 8-bit values into `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::io(format!("cannot read {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::validation("zero-sized image"));
    }
    match img {
        DynamicImage::ImageLuma8(g) => {
            let mut data = Array3::zeros((1, h, w));
            for (x, y, p) in g.enumerate_pixels() {
                data[[0, y as usize, x as usize]] = p.0[0] as f64 / 255.0;
            }
            Image::new(data)
        }
        other => {
            let rgb = other.to_rgb8();
            let mut data = Array3::zeros((3, h, w));
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
                }
            }
            Image::new(data)
        }
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels.txt");
    PathBuf::from(s)
}

/// Gray level used to encode `label` out of `n` regions.
fn label_gray(label: u8, n: usize) -> u8 {
    ((label as usize * 255) / (n - 1)) as u8
}

/// Writes a mask as a single-channel PNG.
///
/// Binary masks use the 0/255 convention. Masks with more regions scale the
/// labels to distinct gray levels and record the mapping in a sidecar
/// `<path>.labels.txt` file (one `gray label` pair per line).
pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = mask.labels.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            img.put_pixel(
                j as u32,
                i as u32,
                image::Luma([label_gray(mask.labels[[i, j]], mask.n_regions)]),
            );
        }
    }
    img.save(path)
        .map_err(|e| Error::io(format!("cannot write {}: {e}", path.display())))?;
    if mask.n_regions > 2 {
        let mut lines = String::new();
        for label in 0..mask.n_regions {
            lines.push_str(&format!("{} {}\n", label_gray(label as u8, mask.n_regions), label));
        }
        fs::write(sidecar_path(path), lines)
            .map_err(|e| Error::io(format!("cannot write sidecar: {e}")))?;
    }
    Ok(())
}

/// Loads a mask saved by [`save_mask`].
///
/// If a sidecar label map exists it is honored; otherwise pixels are
/// thresholded at 128 into a binary mask.
pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::io(format!("cannot read {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let text = fs::read_to_string(&sidecar)?;
        let mut map = std::collections::HashMap::new();
        let mut n_regions = 0usize;
        for line in text.lines() {
            let mut it = line.split_whitespace();
            let (Some(g), Some(l)) = (it.next(), it.next()) else {
                continue;
            };
            let g: u8 = g
                .parse()
                .map_err(|_| Error::io("bad sidecar gray value"))?;
            let l: u8 = l.parse().map_err(|_| Error::io("bad sidecar label"))?;
            map.insert(g, l);
            n_regions = n_regions.max(l as usize + 1);
        }
        let mut labels = Array2::zeros((h, w));
        for (x, y, p) in img.enumerate_pixels() {
            let Some(&l) = map.get(&p.0[0]) else {
                return Err(Error::validation(format!(
                    "gray value {} not in sidecar label map",
                    p.0[0]
                )));
            };
            labels[[y as usize, x as usize]] = l;
        }
        LabelMask::new(labels, n_regions.max(2))
    } else {
        let mut labels = Array2::zeros((h, w));
        for (x, y, p) in img.enumerate_pixels() {
            labels[[y as usize, x as usize]] = if p.0[0] >= 128 { 1u8 } else { 0u8 };
        }
        LabelMask::new(labels, 2)
    }
}

/// Writes an intensity image as an 8-bit PNG (values scaled by 255, rounded).
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = img.data.dim();
    let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    if c == 1 {
        let mut out = GrayImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                out.put_pixel(j as u32, i as u32, image::Luma([to_u8(img.data[[0, i, j]])]));
            }
        }
        out.save(path)?;
    } else {
        let mut out = RgbImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                let px = [
                    to_u8(img.data[[0, i, j]]),
                    to_u8(img.data[[1, i, j]]),
                    to_u8(img.data[[2, i, j]]),
                ];
                out.put_pixel(j as u32, i as u32, image::Rgb(px));
            }
        }
        out.save(path)?;
    }
    Ok(())
}

/// Families of generated test images with known ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Bright disk (0.8) on a dark background (0.2); mask is the disk.
    TwoGaussianDisk,
    /// Three horizontal bands with intensities 0.2 / 0.5 / 0.8, labels 0..2.
    ThreeRegionStripes,
    /// Disk of vertical sinusoidal stripes over horizontally striped
    /// background: identical intensity histograms, distinct orientation.
    TextureOverlap,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_gaussian_disk" => Ok(SyntheticKind::TwoGaussianDisk),
            "three_region_stripes" => Ok(SyntheticKind::ThreeRegionStripes),
            "texture_overlap" => Ok(SyntheticKind::TextureOverlap),
            other => Err(Error::validation(format!("unknown synthetic kind: {other}"))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SyntheticKind::TwoGaussianDisk => "two_gaussian_disk",
            SyntheticKind::ThreeRegionStripes => "three_region_stripes",
            SyntheticKind::TextureOverlap => "texture_overlap",
        };
        f.write_str(s)
    }
}

/// Generates a synthetic image and its ground-truth mask.
///
/// `noise_sigma` is additive Gaussian noise in 0-255 intensity units; it is
/// divided by 255, added to the clean image, and the result is clipped back
/// to `[0, 1]`. Generation is deterministic per seed.
pub fn make_synthetic(
    kind: SyntheticKind,
    n: usize,
    m: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Image, LabelMask)> {
    if n < 2 || m < 2 {
        return Err(Error::validation("synthetic images must be at least 2x2"));
    }
    if noise_sigma < 0.0 {
        return Err(Error::validation("noise_sigma must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (clean, mask) = match kind {
        SyntheticKind::TwoGaussianDisk => {
            let (img, fg) = disk_image(n, m, 0.5, 0.5, 0.25, 0.8, 0.2);
            (img, LabelMask::from_bool(&fg))
        }
        SyntheticKind::ThreeRegionStripes => {
            let mut img = Array2::zeros((n, m));
            let mut labels = Array2::zeros((n, m));
            let levels = [0.2, 0.5, 0.8];
            for i in 0..n {
                let band = (i * 3 / n).min(2);
                for j in 0..m {
                    img[[i, j]] = levels[band];
                    labels[[i, j]] = band as u8;
                }
            }
            (img, LabelMask::new(labels, 3)?)
        }
        SyntheticKind::TextureOverlap => {
            let phase_fg: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase_bg: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = std::f64::consts::TAU / 4.0;
            let mut img = Array2::zeros((n, m));
            let mut fg = Array2::from_elem((n, m), false);
            let (ci, cj) = (n as f64 / 2.0, m as f64 / 2.0);
            let r = 0.3 * n.min(m) as f64;
            for i in 0..n {
                for j in 0..m {
                    let inside = (i as f64 + 0.5 - ci).powi(2) + (j as f64 + 0.5 - cj).powi(2)
                        <= r * r;
                    fg[[i, j]] = inside;
                    let v = if inside {
                        0.5 + 0.3 * (freq * j as f64 + phase_fg).sin()
                    } else {
                        0.5 + 0.3 * (freq * i as f64 + phase_bg).sin()
                    };
                    img[[i, j]] = v;
                }
            }
            (img, LabelMask::from_bool(&fg))
        }
    };
    let noisy = add_noise(&clean, noise_sigma / 255.0, &mut rng);
    Ok((Image::from_gray(noisy)?, mask))
}

fn disk_image(
    n: usize,
    m: usize,
    center_i: f64,
    center_j: f64,
    radius_frac: f64,
    fg_level: f64,
    bg_level: f64,
) -> (Array2<f64>, Array2<bool>) {
    let mut img = Array2::from_elem((n, m), bg_level);
    let mut fg = Array2::from_elem((n, m), false);
    let (ci, cj) = (center_i * n as f64, center_j * m as f64);
    let r = radius_frac * n.min(m) as f64;
    for i in 0..n {
        for j in 0..m {
            if (i as f64 + 0.5 - ci).powi(2) + (j as f64 + 0.5 - cj).powi(2) <= r * r {
                img[[i, j]] = fg_level;
                fg[[i, j]] = true;
            }
        }
    }
    (img, fg)
}

fn add_noise(clean: &Array2<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    if sigma == 0.0 {
        return clean.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    clean.map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
}

/// Identifier lists for the train/validation/test portions of a dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Checks that the three lists are pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::validation(format!(
                    "identifier {id} appears in more than one split"
                )));
            }
        }
        Ok(())
    }
}

fn read_id_file(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Reads `train.txt` / `val.txt` / `test.txt` from a dataset root.
///
/// Missing validation/test files yield empty lists; a missing train file is
/// an error.
pub fn read_splits(root: impl AsRef<Path>) -> Result<DatasetSplit> {
    let root = root.as_ref();
    let train_path = root.join("train.txt");
    if !train_path.exists() {
        return Err(Error::validation(format!(
            "no train.txt in {}",
            root.display()
        )));
    }
    let split = DatasetSplit {
        train: read_id_file(&train_path)?,
        validation: read_id_file(&root.join("val.txt"))?,
        test: read_id_file(&root.join("test.txt"))?,
    };
    split.validate()?;
    Ok(split)
}

/// Resolves `root/images/<stem>.<ext>` for the common raster extensions.
pub fn find_image_path(root: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let base = root.as_ref().join("images");
    for ext in ["png", "jpg", "jpeg"] {
        let p = base.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::io(format!(
        "no image named {stem} under {}",
        base.display()
    )))
}

/// Resolves `root/masks/<stem>.png` if present.
pub fn find_mask_path(root: impl AsRef<Path>, stem: &str) -> Option<PathBuf> {
    let p = root.as_ref().join("masks").join(format!("{stem}.png"));
    p.exists().then_some(p)
}

/// Center-crops to a square and bilinearly rescales to `side`x`side`.
pub fn center_crop_resize(img: &Image, side: usize) -> Result<Image> {
    let (c, h, w) = img.data.dim();
    let s = h.min(w);
    let (oi, oj) = ((h - s) / 2, (w - s) / 2);
    let mut out = Array3::zeros((c, side, side));
    let scale = s as f64 / side as f64;
    for ch in 0..c {
        for i in 0..side {
            for j in 0..side {
                // map output pixel center into the cropped square
                let y = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
                let x = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(s - 1), (x0 + 1).min(s - 1));
                let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                let v00 = img.data[[ch, oi + y0, oj + x0]];
                let v01 = img.data[[ch, oi + y0, oj + x1]];
                let v10 = img.data[[ch, oi + y1, oj + x0]];
                let v11 = img.data[[ch, oi + y1, oj + x1]];
                out[[ch, i, j]] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
    Image::new(out)
}

/// Center-crops and rescales a mask with nearest-neighbor sampling.
pub fn center_crop_resize_mask(mask: &LabelMask, side: usize) -> Result<LabelMask> {
    let (h, w) = mask.labels.dim();
    let s = h.min(w);
    let (oi, oj) = ((h - s) / 2, (w - s) / 2);
    let mut out = Array2::zeros((side, side));
    let scale = s as f64 / side as f64;
    for i in 0..side {
        for j in 0..side {
            let y = (((i as f64 + 0.5) * scale - 0.5).round().max(0.0) as usize).min(s - 1);
            let x = (((j as f64 + 0.5) * scale - 0.5).round().max(0.0) as usize).min(s - 1);
            out[[i, j]] = mask.labels[[oi + y, oj + x]];
        }
    }
    LabelMask::new(out, mask.n_regions)
}

/// A bright disk with randomized radius, position, contrast, and mild
/// noise: the per-image sample behind [`write_disk_dataset`].
pub fn synthetic_disk_variant(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<(Image, LabelMask)> {
    let radius = rng.gen_range(0.15..0.33);
    let ci = rng.gen_range(0.35..0.65);
    let cj = rng.gen_range(0.35..0.65);
    let bg = rng.gen_range(0.05..0.30);
    let fg = rng.gen_range(0.65..0.95);
    let sigma = rng.gen_range(0.0..8.0) / 255.0;
    let (clean, fg_mask) = disk_image(n, m, ci, cj, radius, fg, bg);
    let noisy = add_noise(&clean, sigma, rng);
    Ok((Image::from_gray(noisy)?, LabelMask::from_bool(&fg_mask)))
}

/// Writes a synthetic dataset of bright disks with varied radius, position,
/// and contrast under the standard `root/{images,masks}` layout, plus split
/// files. Returns the split. Deterministic per seed.
pub fn write_disk_dataset(
    root: impl AsRef<Path>,
    count: usize,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let root = root.as_ref();
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(count);
    for k in 0..count {
        let (img, mask) = synthetic_disk_variant(n, m, &mut rng)?;
        let id = format!("disk_{k:04}");
        save_image(&img, root.join("images").join(format!("{id}.png")))?;
        save_mask(&mask, root.join("masks").join(format!("{id}.png")))?;
        ids.push(id);
    }
    // 80/10/10 split in generation order
    let n_train = (count * 8) / 10;
    let n_val = (count - n_train) / 2;
    let split = DatasetSplit {
        train: ids[..n_train].to_vec(),
        validation: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    fs::write(root.join("train.txt"), split.train.join("\n") + "\n")?;
    fs::write(root.join("val.txt"), split.validation.join("\n") + "\n")?;
    fs::write(root.join("test.txt"), split.test.join("\n") + "\n")?;
    Ok(split)
}

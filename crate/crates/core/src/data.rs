//! Datasets: directory ingestion, the resolution pyramid, seeded batching and
//! a parameterized synthetic generator with ground-truth factor labels.

use std::fs;
use std::io::Cursor as IoCursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, RgbImage};
use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::block_mean;
use crate::model::ImageBatch;
use crate::tensor::Tensor;

pub const BASE_RESOLUTION: usize = 4;
const CHANNELS: usize = 3;

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Synthetic,
    Directory,
}

/// Train/test split fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: f64,
    pub test: f64,
}

impl Split {
    pub fn validate(&self) -> Result<()> {
        let ok = self.train >= 0.0 && self.test >= 0.0 && self.train + self.test > 0.0;
        if !ok || !(self.train + self.test).is_finite() {
            return Err(Error::config("data.split", "fractions must be non-negative and not both zero"));
        }
        Ok(())
    }

    /// `(train, test)` counts for `n` items; the train count is rounded, the rest is test.
    pub fn counts(&self, n: usize) -> (usize, usize) {
        let total = self.train + self.test;
        let train = ((self.train / total) * n as f64).round() as usize;
        let train = train.min(n);
        (train, n - train)
    }
}

/// A closed interval `[lo, hi]` a synthetic factor is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn check(&self, key: &str, min: f64, max: f64) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi || self.lo < min || self.hi > max {
            return Err(Error::config(
                format!("data.synthetic.{key}"),
                format!("range [{}, {}] must be ordered and within [{min}, {max}]", self.lo, self.hi),
            ));
        }
        Ok(())
    }
}

/// Factor ranges of the blob generator. Positions and radius are fractions of
/// the image side, hue is in turns, background is a gray level in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub blob_x: Range,
    pub blob_y: Range,
    pub hue: Range,
    pub radius: Range,
    pub background: Range,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 3000,
            blob_x: Range::new(0.3, 0.7),
            blob_y: Range::new(0.3, 0.7),
            hue: Range::new(0.0, 1.0),
            radius: Range::new(0.12, 0.25),
            background: Range::new(-0.8, 0.8),
        }
    }
}

pub const SYNTHETIC_FACTORS: [&str; 5] = ["blob_x", "blob_y", "hue", "radius", "background"];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("data.synthetic.count", "must be > 0"));
        }
        self.blob_x.check("blob_x", 0.0, 1.0)?;
        self.blob_y.check("blob_y", 0.0, 1.0)?;
        self.hue.check("hue", 0.0, 1.0)?;
        self.radius.check("radius", 0.0, 1.0)?;
        self.background.check("background", -1.0, 1.0)
    }
}

/// Full description of a dataset to load or generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: Source,
    /// Image directory, used when `source` is `directory`.
    pub path: String,
    pub split: Split,
    pub synthetic: SyntheticSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            path: String::new(),
            split: Split { train: 0.9, test: 0.1 },
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        match self.source {
            Source::Synthetic => self.synthetic.validate(),
            Source::Directory if self.path.is_empty() => {
                Err(Error::config("data.path", "a dataset directory is required"))
            }
            Source::Directory => Ok(()),
        }
    }
}

/// Named per-image scalar labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorTable {
    pub names: Vec<String>,
    /// One row per image, in dataset index order.
    pub rows: Vec<Vec<f64>>,
}

impl FactorTable {
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Data(format!("unknown factor `{name}`")))?;
        Ok(self.rows.iter().map(|r| r[j]).collect())
    }
}

/// Which partition of a dataset to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
        }
    }
}

/// Images held as a resolution pyramid, level 0 = 4x4.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `pyramid[level]` holds every image at `4 << level`, flattened `C x H x W`.
    pyramid: Vec<Vec<f64>>,
    len: usize,
    factors: Option<FactorTable>,
    train: Vec<usize>,
    test: Vec<usize>,
    seed: u64,
}

fn native_level(resolution: usize) -> Result<usize> {
    if resolution < BASE_RESOLUTION || !resolution.is_power_of_two() {
        return Err(Error::Data(format!("resolution {resolution} is not a power of two >= 4")));
    }
    Ok((resolution / BASE_RESOLUTION).trailing_zeros() as usize)
}

impl Dataset {
    /// Builds a dataset from `len` images at `resolution`, flattened `C x H x W`.
    pub fn from_images(
        images: Vec<f64>,
        len: usize,
        resolution: usize,
        factors: Option<FactorTable>,
        split: Split,
        seed: u64,
    ) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        let top = native_level(resolution)?;
        if images.len() != len * CHANNELS * resolution * resolution {
            return Err(Error::Shape("image buffer does not match count and resolution".into()));
        }
        if images.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Data("image values must lie in [-1, 1]".into()));
        }
        if let Some(f) = &factors {
            if f.rows.len() != len {
                return Err(Error::Data("factor table length differs from image count".into()));
            }
        }
        let mut pyramid = vec![images];
        let mut r = resolution;
        for _ in 0..top {
            let next = block_mean(pyramid.last().unwrap(), len * CHANNELS, r, r);
            pyramid.push(next);
            r /= 2;
        }
        pyramid.reverse();

        split.validate()?;
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (n_train, _) = split.counts(len);
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok(Self {
            pyramid,
            len,
            factors,
            train,
            test,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_level(&self) -> usize {
        self.pyramid.len() - 1
    }

    pub fn resolution(&self, level: usize) -> usize {
        BASE_RESOLUTION << level
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn factors(&self) -> Option<&FactorTable> {
        self.factors.as_ref()
    }

    pub fn indices(&self, partition: Partition) -> &[usize] {
        match partition {
            Partition::Train => &self.train,
            Partition::Test => &self.test,
        }
    }

    pub fn image(&self, index: usize, level: usize) -> Result<&[f64]> {
        let plane = self
            .pyramid
            .get(level)
            .ok_or_else(|| Error::Data(format!("level {level} above native resolution")))?;
        let n = CHANNELS * self.resolution(level).pow(2);
        plane
            .get(index * n..(index + 1) * n)
            .ok_or_else(|| Error::Data(format!("image index {index} out of range")))
    }

    /// Gathers the given images at `level`.
    pub fn gather(&self, indices: &[usize], level: usize) -> Result<ImageBatch> {
        let r = self.resolution(level);
        let mut data = Vec::with_capacity(indices.len() * CHANNELS * r * r);
        for &i in indices {
            data.extend_from_slice(self.image(i, level)?);
        }
        ImageBatch::new(Tensor::new(&[indices.len(), CHANNELS, r, r], data)?)
    }

    /// Per-epoch ordering of a partition: a seeded shuffle keyed on `(seed, epoch)`.
    pub fn epoch_order(&self, partition: Partition, epoch: u64) -> Vec<usize> {
        let mut order = self.indices(partition).to_vec();
        order.shuffle(&mut epoch_rng(self.seed, epoch));
        order
    }

    /// Next `batch_size` images in epoch order; wraps into the next epoch.
    pub fn batch_at_resolution(
        &self,
        partition: Partition,
        level: usize,
        batch_size: usize,
        cursor: BatchCursor,
    ) -> Result<(ImageBatch, BatchCursor)> {
        let pool = self.indices(partition).len();
        if batch_size == 0 || batch_size > pool {
            return Err(Error::Data(format!(
                "batch size {batch_size} exceeds the {} partition ({pool} images)",
                partition.as_str()
            )));
        }
        if level > self.max_level() {
            return Err(Error::Data(format!("level {level} above native resolution")));
        }
        let (picked, next) = self.next_indices(partition, batch_size, cursor);
        Ok((self.gather(&picked, level)?, next))
    }

    /// Dataset indices of the next `count` samples in epoch order, and the advanced cursor.
    pub fn next_indices(&self, partition: Partition, count: usize, cursor: BatchCursor) -> (Vec<usize>, BatchCursor) {
        let pool = self.indices(partition).len();
        let mut cur = cursor;
        let mut order = self.epoch_order(partition, cur.epoch);
        let mut picked = Vec::with_capacity(count);
        while picked.len() < count && pool > 0 {
            if cur.position >= pool {
                cur = BatchCursor {
                    epoch: cur.epoch + 1,
                    position: 0,
                };
                order = self.epoch_order(partition, cur.epoch);
            }
            picked.push(order[cur.position]);
            cur.position += 1;
        }
        (picked, cur)
    }

    /// Indices of `partition` whose factor satisfies `pred`.
    pub fn select(&self, partition: Partition, factor: &str, pred: impl Fn(f64) -> bool) -> Result<Vec<usize>> {
        let col = self.factor_column(factor)?;
        Ok(self
            .indices(partition)
            .iter()
            .copied()
            .filter(|&i| pred(col[i]))
            .collect())
    }

    /// Splits a partition at the factor's median rank: `(upper half, lower half)`.
    pub fn split_at_median(&self, partition: Partition, factor: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        let col = self.factor_column(factor)?;
        let mut idx = self.indices(partition).to_vec();
        idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
        let lower = idx[..idx.len() / 2].to_vec();
        let upper = idx[idx.len() / 2..].to_vec();
        Ok((upper, lower))
    }

    fn factor_column(&self, factor: &str) -> Result<Vec<f64>> {
        self.factors
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no factor labels".into()))?
            .column(factor)
    }

    /// Writes `<root>/<split>/<index>.png` and `factors.csv` at native resolution.
    pub fn export(&self, root: &Path) -> Result<()> {
        let top = self.max_level();
        for partition in [Partition::Train, Partition::Test] {
            let dir = root.join(partition.as_str());
            fs::create_dir_all(&dir)?;
            for &i in self.indices(partition) {
                let png = encode_png(self.image(i, top)?, self.resolution(top))?;
                fs::write(dir.join(format!("{i}.png")), png)?;
            }
        }
        let mut csv = String::from("index");
        let names = self.factors.as_ref().map(|f| f.names.clone()).unwrap_or_default();
        for n in &names {
            csv.push(',');
            csv.push_str(n);
        }
        csv.push_str(",split\n");
        for i in 0..self.len {
            csv.push_str(&i.to_string());
            if let Some(f) = &self.factors {
                for v in &f.rows[i] {
                    csv.push_str(&format!(",{v}"));
                }
            }
            let split = if self.train.binary_search(&i).is_ok() { "train" } else { "test" };
            csv.push_str(&format!(",{split}\n"));
        }
        fs::write(root.join("factors.csv"), csv)?;
        Ok(())
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    rng
}

/// Position of a batch consumer within the epoch sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCursor {
    pub epoch: u64,
    pub position: usize,
}

/// Loads or generates the dataset described by `spec` at `resolution`.
pub fn ingest(spec: &DatasetSpec, resolution: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    match spec.source {
        Source::Synthetic => generate_synthetic(&spec.synthetic, resolution, spec.split, seed),
        Source::Directory => ingest_directory(Path::new(&spec.path), resolution, spec.split, seed),
    }
}

/// HSV hue (turns) at full saturation and value, as RGB in `[0, 1]`.
pub fn hue_to_rgb(hue: f64) -> [f64; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let f = |n: f64| {
        let k = (n + h) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Anti-aliased disc coverage of each pixel: `clamp(r - d + 1/2, 0, 1)` in pixel units.
fn disc_coverage(resolution: usize, cx: f64, cy: f64, radius: f64) -> Vec<f64> {
    let r = resolution as f64;
    let (cx, cy, rad) = (cx * r, cy * r, radius * r);
    let mut cov = vec![0.0; resolution * resolution];
    if rad <= 0.0 {
        return cov;
    }
    for i in 0..resolution {
        for j in 0..resolution {
            let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            cov[i * resolution + j] = (rad - d + 0.5).clamp(0.0, 1.0);
        }
    }
    cov
}

/// Renders one blob image, `C x H x W` in `[-1, 1]`.
pub fn render_blob(resolution: usize, factors: &[f64; 5]) -> Vec<f64> {
    let [bx, by, hue, radius, background] = *factors;
    let cov = disc_coverage(resolution, bx, by, radius);
    let rgb = hue_to_rgb(hue).map(|c| 2.0 * c - 1.0);
    let mut out = Vec::with_capacity(CHANNELS * cov.len());
    for c in rgb {
        out.extend(cov.iter().map(|&a| (1.0 - a) * background + a * c));
    }
    out
}

/// Recovers the background factor of a rendered image: the median over all
/// channels of the one-pixel border, which the blob never fully covers.
pub fn estimate_background(chw: &[f64], resolution: usize) -> f64 {
    let r = resolution;
    let mut border = Vec::new();
    for plane in chw.chunks(r * r) {
        for i in 0..r {
            for j in 0..r {
                if i == 0 || j == 0 || i + 1 == r || j + 1 == r {
                    border.push(plane[i * r + j]);
                }
            }
        }
    }
    border.sort_by(f64::total_cmp);
    let n = border.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        border[n / 2]
    } else {
        0.5 * (border[n / 2 - 1] + border[n / 2])
    }
}

/// Draws `spec.count` factor tuples and renders them at `resolution`.
pub fn generate_synthetic(spec: &SyntheticSpec, resolution: usize, split: Split, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    native_level(resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(spec.count);
    let mut images = Vec::with_capacity(spec.count * CHANNELS * resolution * resolution);
    for _ in 0..spec.count {
        let f = [
            spec.blob_x.sample(&mut rng),
            spec.blob_y.sample(&mut rng),
            spec.hue.sample(&mut rng),
            spec.radius.sample(&mut rng),
            spec.background.sample(&mut rng),
        ];
        images.extend(render_blob(resolution, &f));
        rows.push(f.to_vec());
    }
    let factors = FactorTable {
        names: SYNTHETIC_FACTORS.iter().map(|s| s.to_string()).collect(),
        rows,
    };
    Dataset::from_images(images, spec.count, resolution, Some(factors), split, seed)
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort_by(|a, b| natural_key(a).cmp(&natural_key(b)));
    Ok(files)
}

fn natural_key(p: &Path) -> (u64, String) {
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    (stem.parse().unwrap_or(u64::MAX), p.to_string_lossy().into_owned())
}

/// Reads every PNG/JPEG in `dir` (non-recursive) at `resolution`.
///
/// Undecodable files are skipped with a warning. Returns the decoded images
/// in file order with their file stems.
pub fn read_image_dir(dir: &Path, resolution: usize) -> Result<(Vec<String>, ImageBatch)> {
    let mut names = Vec::new();
    let mut data = Vec::new();
    for path in sorted_images(dir)? {
        match fs::read(&path).map_err(Error::from).and_then(|b| decode_image(&b, resolution)) {
            Ok(img) => {
                names.push(path.file_stem().unwrap_or_default().to_string_lossy().into_owned());
                data.extend(img);
            }
            Err(e) => warn!("skipping {}: {e}", path.display()),
        }
    }
    if names.is_empty() {
        return Err(Error::Data(format!("no decodable images in {}", dir.display())));
    }
    let n = names.len();
    Ok((names, ImageBatch::new(Tensor::new(&[n, CHANNELS, resolution, resolution], data)?)?))
}

/// Ingests `<root>/*.png` or the `<root>/train`, `<root>/test` layout.
///
/// With subdirectories the on-disk split is kept; otherwise `split` is applied.
/// A `factors.csv` next to the images supplies labels when its rows cover every image.
fn ingest_directory(root: &Path, resolution: usize, split: Split, seed: u64) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::config("data.path", format!("{} is not a directory", root.display())));
    }
    let (train_dir, test_dir) = (root.join("train"), root.join("test"));
    let mut groups = Vec::new();
    if train_dir.is_dir() {
        groups.push(read_image_dir(&train_dir, resolution)?);
        if test_dir.is_dir() {
            groups.push(read_image_dir(&test_dir, resolution)?);
        }
    } else {
        groups.push(read_image_dir(root, resolution)?);
    }
    let n_train = groups[0].0.len();
    let names: Vec<String> = groups.iter().flat_map(|g| g.0.clone()).collect();
    let batches: Vec<ImageBatch> = groups.into_iter().map(|g| g.1).collect();
    let all = ImageBatch::concat(&batches)?;
    let len = all.len();
    let factors = read_factor_csv(&root.join("factors.csv"), &names);
    let mut ds = Dataset::from_images(all.values.into_data(), len, resolution, factors, split, seed)?;
    if batches.len() == 2 {
        ds.train = (0..n_train).collect();
        ds.test = (n_train..len).collect();
    }
    Ok(ds)
}

fn read_factor_csv(path: &Path, names: &[String]) -> Option<FactorTable> {
    let text = fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let cols: Vec<usize> = (1..header.len()).filter(|&j| header[j] != "split").collect();
    let mut by_name = std::collections::HashMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        let row: Option<Vec<f64>> = cols.iter().map(|&j| cells.get(j)?.trim().parse().ok()).collect();
        by_name.insert(cells[0].trim().to_string(), row?);
    }
    let rows: Option<Vec<Vec<f64>>> = names.iter().map(|n| by_name.get(n).cloned()).collect();
    if rows.is_none() {
        warn!("{} does not label every image; ignoring it", path.display());
    }
    Some(FactorTable {
        names: cols.iter().map(|&j| header[j].to_string()).collect(),
        rows: rows?,
    })
}

/// Decodes PNG/JPEG bytes to `C x H x W` in `[-1, 1]` at `resolution`.
///
/// Square power-of-two images larger than `resolution` are block-averaged;
/// anything else is resampled with a warning.
pub fn decode_image(bytes: &[u8], resolution: usize) -> Result<Vec<f64>> {
    let format = image::guess_format(bytes)?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(Error::Data(format!("unsupported image format {format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format)?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let exact = w == h && w >= resolution && w.is_power_of_two() && resolution.is_power_of_two();
    let img = if exact {
        img
    } else {
        warn!("resampling {w}x{h} image to {resolution}x{resolution}");
        image::imageops::resize(
            &img,
            resolution as u32,
            resolution as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    let side = img.width() as usize;
    let mut chw = vec![0.0; CHANNELS * side * side];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..CHANNELS {
            chw[c * side * side + y as usize * side + x as usize] = p[c] as f64 / 127.5 - 1.0;
        }
    }
    let mut s = side;
    while s > resolution {
        chw = block_mean(&chw, CHANNELS, s, s);
        s /= 2;
    }
    Ok(chw)
}

/// Maps `[-1, 1]` to `[0, 255]` with clamping.
pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Encodes one `C x H x W` image as PNG.
pub fn encode_png(chw: &[f64], resolution: usize) -> Result<Vec<u8>> {
    let plane = resolution * resolution;
    if chw.len() != CHANNELS * plane {
        return Err(Error::Shape("PNG export expects a 3-channel square image".into()));
    }
    let img = RgbImage::from_fn(resolution as u32, resolution as u32, |x, y| {
        let k = y as usize * resolution + x as usize;
        image::Rgb([to_u8(chw[k]), to_u8(chw[plane + k]), to_u8(chw[2 * plane + k])])
    });
    let mut buf = IoCursor::new(Vec::new());
    DynamicImage::ImageRgb8(img).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Tiles a batch into one `rows x cols` PNG.
pub fn encode_grid_png(batch: &ImageBatch, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != batch.len() {
        return Err(Error::Shape(format!("{} images do not fill a {rows}x{cols} grid", batch.len())));
    }
    let r = batch.resolution();
    let plane = r * r;
    let img = RgbImage::from_fn((cols * r) as u32, (rows * r) as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let cell = batch.image((y / r) * cols + x / r);
        let k = (y % r) * r + x % r;
        image::Rgb([to_u8(cell[k]), to_u8(cell[plane + k]), to_u8(cell[2 * plane + k])])
    });
    let mut buf = IoCursor::new(Vec::new());
    DynamicImage::ImageRgb8(img).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

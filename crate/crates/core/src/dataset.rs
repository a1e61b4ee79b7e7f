//! Labeled image sets: manifest ingestion, preprocessing, stratified
//! splitting and a seeded synthetic generator with planted identity and
//! pathology factors.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{read_gray, write_pgm, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EyeSide {
    Left,
    Right,
    Unknown,
}

impl EyeSide {
    pub fn as_str(self) -> &'static str {
        match self {
            EyeSide::Left => "left",
            EyeSide::Right => "right",
            EyeSide::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" => Some(EyeSide::Left),
            "right" | "r" => Some(EyeSide::Right),
            "unknown" | "" => Some(EyeSide::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: GrayImage,
    pub identity: u32,
    /// 1 when the pathology is present.
    pub pathology: u8,
    pub eye_side: EyeSide,
    /// (row, col) in pixel units.
    pub iris_center: Option<(f32, f32)>,
}

impl ImageSample {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.is_empty() {
            return Err(Error::invalid(format!("sample {} has no pixels", self.id)));
        }
        if !self.pixels.in_unit_range() {
            return Err(Error::invalid(format!(
                "sample {} has pixels outside [0, 1]",
                self.id
            )));
        }
        if self.pathology > 1 {
            return Err(Error::invalid(format!(
                "sample {} has pathology label {}",
                self.id, self.pathology
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct identity labels in ascending order.
    pub fn identities(&self) -> Vec<u32> {
        self.samples
            .iter()
            .map(|s| s.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn n_identities(&self) -> usize {
        self.identities().len()
    }

    /// Sample counts indexed by pathology label.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for s in &self.samples {
            counts[s.pathology as usize] += 1;
        }
        counts
    }

    /// Pathology label of each identity (the label of its first sample).
    pub fn identity_pathology(&self) -> BTreeMap<u32, u8> {
        let mut map = BTreeMap::new();
        for s in &self.samples {
            map.entry(s.identity).or_insert(s.pathology);
        }
        map
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

// ---------------------------------------------------------------- manifest

pub const MANIFEST_HEADER: [&str; 7] = [
    "id",
    "path",
    "identity",
    "pathology",
    "eye_side",
    "iris_row",
    "iris_col",
];

/// Loads a CSV manifest (`id,path,identity,pathology,eye_side,iris_row,iris_col`);
/// image paths are resolved relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| load_err(path, 0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| load_err(path, 0, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let required = ["id", "path", "identity", "pathology", "eye_side"];
    let mut idx = BTreeMap::new();
    for name in required {
        let i = col(name).ok_or_else(|| load_err(path, 0, format!("missing column `{name}`")))?;
        idx.insert(name, i);
    }
    let iris_row = col("iris_row");
    let iris_col = col("iris_col");

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| load_err(path, row, e.to_string()))?;
        let field = |name: &str| record.get(idx[name]).map(str::trim).unwrap_or("");
        let opt = |c: Option<usize>| c.and_then(|c| record.get(c)).map(str::trim).unwrap_or("");

        let id = field("id").to_string();
        if id.is_empty() {
            return Err(load_err(path, row, "empty sample id"));
        }
        if !seen.insert(id.clone()) {
            return Err(load_err(path, row, format!("duplicate sample id `{id}`")));
        }
        let identity: u32 = field("identity")
            .parse()
            .map_err(|_| load_err(path, row, format!("bad identity `{}`", field("identity"))))?;
        let pathology: u8 = match field("pathology") {
            "0" => 0,
            "1" => 1,
            other => return Err(load_err(path, row, format!("bad pathology `{other}`"))),
        };
        let eye_side = EyeSide::parse(field("eye_side"))
            .ok_or_else(|| load_err(path, row, format!("bad eye_side `{}`", field("eye_side"))))?;
        let iris_center = match (opt(iris_row), opt(iris_col)) {
            ("", "") => None,
            (r, c) => {
                let r: f32 = r
                    .parse()
                    .map_err(|_| load_err(path, row, format!("bad iris_row `{r}`")))?;
                let c: f32 = c
                    .parse()
                    .map_err(|_| load_err(path, row, format!("bad iris_col `{c}`")))?;
                Some((r, c))
            }
        };
        let image_path = base.join(field("path"));
        if !image_path.exists() {
            return Err(load_err(
                path,
                row,
                format!("image file {} does not exist", image_path.display()),
            ));
        }
        let pixels = read_gray(&image_path).map_err(|e| load_err(path, row, e.to_string()))?;
        samples.push(ImageSample {
            id,
            pixels,
            identity,
            pathology,
            eye_side,
            iris_center,
        });
    }
    Dataset::new(samples)
}

fn load_err(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

/// File-system safe stem for a sample id.
pub(crate) fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `dir/manifest.csv` plus one PGM per sample under `dir/images/`.
pub fn save_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_io(&manifest, e))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_io(&manifest, e))?;
    for s in dataset.samples() {
        let rel = format!("images/{}.pgm", file_stem(&s.id));
        write_pgm(&dir.join(&rel), &s.pixels)?;
        let (ir, ic) = match s.iris_center {
            Some((r, c)) => (r.to_string(), c.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            s.id.as_str(),
            rel.as_str(),
            &s.identity.to_string(),
            &s.pathology.to_string(),
            s.eye_side.as_str(),
            &ir,
            &ic,
        ])
        .map_err(|e| csv_io(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Writes a manifest that references images already on disk under `image_dir`
/// (relative to `path`'s directory), without rewriting any image.
pub fn save_subset_manifest(dataset: &Dataset, path: &Path, image_dir: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_io(path, e))?;
    for s in dataset.samples() {
        let rel = format!("{image_dir}/{}.pgm", file_stem(&s.id));
        let (ir, ic) = match s.iris_center {
            Some((r, c)) => (r.to_string(), c.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            s.id.as_str(),
            rel.as_str(),
            &s.identity.to_string(),
            &s.pathology.to_string(),
            s.eye_side.as_str(),
            &ir,
            &ic,
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

// ------------------------------------------------------------ preprocessing

/// Pixel rectangle kept by the crop step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessOptions {
    #[serde(default)]
    pub crop_rect: Option<CropRect>,
    #[serde(default = "yes")]
    pub flip_right_eye: bool,
    #[serde(default = "yes")]
    pub center_iris: bool,
    #[serde(default = "default_resolution")]
    pub target_resolution: usize,
}

fn yes() -> bool {
    true
}

fn default_resolution() -> usize {
    64
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            crop_rect: None,
            flip_right_eye: true,
            center_iris: true,
            target_resolution: 64,
        }
    }
}

/// Crop, then right-eye flip, then iris centering, then bilinear resize.
pub fn preprocess(sample: &ImageSample, opts: &PreprocessOptions) -> Result<ImageSample> {
    if sample.pixels.is_empty() {
        return Err(Error::invalid(format!("sample {} has no pixels", sample.id)));
    }
    if opts.target_resolution == 0 {
        return Err(Error::invalid("target_resolution must be > 0"));
    }
    let mut img = sample.pixels.clone();
    let mut center = sample.iris_center;

    if let Some(rect) = opts.crop_rect {
        if rect.height == 0
            || rect.width == 0
            || rect.top + rect.height > img.height()
            || rect.left + rect.width > img.width()
        {
            return Err(Error::invalid(format!(
                "crop {:?} outside {}x{} image {}",
                rect,
                img.height(),
                img.width(),
                sample.id
            )));
        }
        img = GrayImage::from_fn(rect.height, rect.width, |r, c| {
            img.get(r + rect.top, c + rect.left)
        });
        center = center.map(|(r, c)| (r - rect.top as f32, c - rect.left as f32));
    }

    if opts.flip_right_eye && sample.eye_side == EyeSide::Right {
        img = img.flip_horizontal();
        let w = img.width() as f32;
        center = center.map(|(r, c)| (r, w - 1.0 - c));
    }

    if opts.center_iris {
        let (cr, cc) = match center {
            Some(c) => c,
            None => dark_centroid(&img),
        };
        let dy = ((img.height() as f32 - 1.0) / 2.0 - cr).round() as isize;
        let dx = ((img.width() as f32 - 1.0) / 2.0 - cc).round() as isize;
        if dy != 0 || dx != 0 {
            img = GrayImage::from_fn(img.height(), img.width(), |r, c| {
                img.get_clamped(r as isize - dy, c as isize - dx)
            });
        }
        center = Some((cr + dy as f32, cc + dx as f32));
    }

    let res = opts.target_resolution;
    if img.height() != res || img.width() != res {
        let sy = img.height() as f32 / res as f32;
        let sx = img.width() as f32 / res as f32;
        img = resize_bilinear(&img, res, res);
        center = center.map(|(r, c)| ((r + 0.5) / sy - 0.5, (c + 0.5) / sx - 0.5));
    }
    img.clamp_unit();

    Ok(ImageSample {
        id: sample.id.clone(),
        pixels: img,
        identity: sample.identity,
        pathology: sample.pathology,
        eye_side: sample.eye_side,
        iris_center: center,
    })
}

/// Intensity-weighted centroid of the inverted image (dark regions dominate).
pub fn dark_centroid(img: &GrayImage) -> (f32, f32) {
    let (mut sw, mut sr, mut sc) = (0.0f64, 0.0f64, 0.0f64);
    for r in 0..img.height() {
        for c in 0..img.width() {
            let w = (1.0 - img.get(r, c)) as f64;
            sw += w;
            sr += w * r as f64;
            sc += w * c as f64;
        }
    }
    if sw <= 0.0 {
        return (
            (img.height() as f32 - 1.0) / 2.0,
            (img.width() as f32 - 1.0) / 2.0,
        );
    }
    ((sr / sw) as f32, (sc / sw) as f32)
}

/// Half-pixel-centered bilinear resampling with edge clamping.
pub fn resize_bilinear(img: &GrayImage, height: usize, width: usize) -> GrayImage {
    let sy = img.height() as f32 / height as f32;
    let sx = img.width() as f32 / width as f32;
    let max_r = img.height() as f32 - 1.0;
    let max_c = img.width() as f32 - 1.0;
    GrayImage::from_fn(height, width, |r, c| {
        let y = ((r as f32 + 0.5) * sy - 0.5).clamp(0.0, max_r);
        let x = ((c as f32 + 0.5) * sx - 0.5).clamp(0.0, max_c);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(img.height() - 1), (x0 + 1).min(img.width() - 1));
        let (fy, fx) = (y - y0 as f32, x - x0 as f32);
        let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
        let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

// --------------------------------------------------------------- splitting

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.65,
            val: 0.15,
            test: 0.20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Seeded split stratified by (identity, pathology). Within each stratum the
/// val and test counts are `round(n * ratio)`; strata with fewer than three
/// images go entirely to train so every identity is represented there.
pub fn split(dataset: &Dataset, ratios: SplitRatios, seed: u64) -> Result<Split> {
    let SplitRatios { train, val, test } = ratios;
    if !(train > 0.0 && val > 0.0 && test > 0.0) {
        return Err(Error::invalid("split ratios must be positive"));
    }
    if ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios sum to {}, expected 1",
            train + val + test
        )));
    }
    let mut strata: BTreeMap<(u32, u8), Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        strata.entry((s.identity, s.pathology)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0u8; dataset.len()];
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let n = members.len();
        if n < 3 {
            continue;
        }
        let n_val = (n as f64 * val).round() as usize;
        let n_test = (n as f64 * test).round() as usize;
        let n_test = n_test.min(n - 1);
        let n_val = n_val.min(n - 1 - n_test);
        for &i in &members[..n_val] {
            assignment[i] = 1;
        }
        for &i in &members[n_val..n_val + n_test] {
            assignment[i] = 2;
        }
    }
    let pick = |part: u8| {
        Dataset::new(
            dataset
                .samples()
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == part)
                .map(|(s, _)| s.clone())
                .collect(),
        )
    };
    Ok(Split {
        train: pick(0)?,
        val: pick(1)?,
        test: pick(2)?,
    })
}

// ------------------------------------------------------------- synthesis

/// Relative rectangle `[top, left, bottom, right]` in `[0, 1]` image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelativeRect {
    pub top: f32,
    pub left: f32,
    pub bottom: f32,
    pub right: f32,
}

impl RelativeRect {
    pub fn contains(&self, row: usize, col: usize, resolution: usize) -> bool {
        let y = (row as f32 + 0.5) / resolution as f32;
        let x = (col as f32 + 0.5) / resolution as f32;
        y >= self.top && y < self.bottom && x >= self.left && x < self.right
    }

    /// Pixel mask of the rectangle at `resolution`.
    pub fn mask(&self, resolution: usize) -> Vec<bool> {
        (0..resolution * resolution)
            .map(|i| self.contains(i / resolution, i % resolution, resolution))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    pub pathology_fraction: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f32,
    #[serde(default = "default_lesion")]
    pub lesion_region: RelativeRect,
}

fn default_noise() -> f32 {
    0.04
}

fn default_lesion() -> RelativeRect {
    RelativeRect {
        top: 0.12,
        left: 0.28,
        bottom: 0.42,
        right: 0.72,
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_identities: 20,
            images_per_identity: 20,
            resolution: 64,
            pathology_fraction: 0.3,
            noise_std: default_noise(),
            lesion_region: default_lesion(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::invalid("n_identities must be >= 2"));
        }
        if self.images_per_identity < 1 {
            return Err(Error::invalid("images_per_identity must be >= 1"));
        }
        if self.resolution < 8 {
            return Err(Error::invalid("resolution must be >= 8"));
        }
        if !(0.0..=1.0).contains(&self.pathology_fraction) {
            return Err(Error::invalid("pathology_fraction must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be >= 0"));
        }
        let r = &self.lesion_region;
        if !(0.0 <= r.top && r.top < r.bottom && r.bottom <= 1.0 && 0.0 <= r.left && r.left < r.right && r.right <= 1.0) {
            return Err(Error::invalid("lesion_region must be a non-empty rectangle inside [0, 1]"));
        }
        Ok(())
    }
}

/// Per-identity appearance parameters of the synthetic iris.
#[derive(Debug, Clone, Copy)]
struct IrisSignature {
    iris_radius: f32,
    pupil_radius: f32,
    base: f32,
    spokes: f32,
    spoke_phase: f32,
    spoke_amp: f32,
    ring_freq: f32,
    ring_amp: f32,
    sclera: f32,
}

impl IrisSignature {
    fn draw(rng: &mut ChaCha8Rng, resolution: usize) -> Self {
        let r = resolution as f32;
        Self {
            iris_radius: r * rng.random_range(0.30..0.38),
            pupil_radius: r * rng.random_range(0.08..0.12),
            base: rng.random_range(0.18..0.38),
            spokes: rng.random_range(3..=9) as f32,
            spoke_phase: rng.random_range(0.0..std::f32::consts::TAU),
            spoke_amp: rng.random_range(0.08..0.16),
            ring_freq: rng.random_range(0.25..0.7) * 64.0 / r,
            ring_amp: rng.random_range(0.03..0.08),
            sclera: rng.random_range(0.65..0.85),
        }
    }

    fn render(&self, resolution: usize, lesion: Option<&RelativeRect>) -> GrayImage {
        let c = (resolution as f32 - 1.0) / 2.0;
        GrayImage::from_fn(resolution, resolution, |row, col| {
            let dy = row as f32 - c;
            let dx = col as f32 - c;
            let rad = (dy * dy + dx * dx).sqrt();
            if rad <= self.pupil_radius {
                return 0.04;
            }
            if rad > self.iris_radius {
                return self.sclera;
            }
            let theta = dx.atan2(-dy);
            let mut v = self.base
                + self.spoke_amp * (self.spokes * theta + self.spoke_phase).cos()
                + self.ring_amp * (self.ring_freq * rad).cos();
            if let Some(rect) = lesion {
                let band = rad >= 0.5 * self.iris_radius && rad <= 0.92 * self.iris_radius;
                if band && dy < 0.0 && rect.contains(row, col, resolution) {
                    v = 0.88;
                }
            }
            v.clamp(0.0, 1.0)
        })
    }
}

/// Seeded synthetic dataset: `n_identities * images_per_identity` samples
/// of radially textured irises. The first `round(pathology_fraction * n)`
/// identities of a seeded permutation carry a bright upper-iris arc.
pub fn synthesize(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signatures: Vec<IrisSignature> = (0..spec.n_identities)
        .map(|_| IrisSignature::draw(&mut rng, spec.resolution))
        .collect();
    let mut order: Vec<usize> = (0..spec.n_identities).collect();
    order.shuffle(&mut rng);
    let n_path = (spec.pathology_fraction * spec.n_identities as f64).round() as usize;
    let mut pathological = vec![false; spec.n_identities];
    for &i in &order[..n_path] {
        pathological[i] = true;
    }
    let noise = Normal::new(0.0f32, spec.noise_std.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let center = (spec.resolution as f32 - 1.0) / 2.0;

    let mut samples = Vec::with_capacity(spec.n_identities * spec.images_per_identity);
    for (identity, sig) in signatures.iter().enumerate() {
        let lesion = pathological[identity].then_some(&spec.lesion_region);
        let clean = sig.render(spec.resolution, lesion);
        for k in 0..spec.images_per_identity {
            let mut pixels = clean.clone();
            if spec.noise_std > 0.0 {
                for v in pixels.data_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            pixels.clamp_unit();
            samples.push(ImageSample {
                id: format!("id{identity:03}_img{k:03}"),
                pixels,
                identity: identity as u32,
                pathology: pathological[identity] as u8,
                eye_side: EyeSide::Left,
                iris_center: Some((center, center)),
            });
        }
    }
    Dataset::new(samples)
}

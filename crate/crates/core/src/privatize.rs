//! Whole-image privatization: Gaussian blurring and K-Same-Select, plus the
//! provenance-carrying output type shared with the generative methods.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{csv_io, file_stem, Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::imaging::{read_gray, write_pgm, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Blur,
    Ksame,
    Pprlvgan,
    PprlvganAvg,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Blur => "blur",
            Method::Ksame => "ksame",
            Method::Pprlvgan => "pprlvgan",
            Method::PprlvganAvg => "pprlvgan_avg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blur" => Some(Method::Blur),
            "ksame" => Some(Method::Ksame),
            "pprlvgan" => Some(Method::Pprlvgan),
            "pprlvgan_avg" => Some(Method::PprlvganAvg),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A privatized image with the provenance needed for leakage checks.
///
/// `source_identities` holds the identities of every sample in `source_ids`
/// and, for generative methods, the identities the generator was
/// conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatizedImage {
    pub pixels: GrayImage,
    pub method: Method,
    pub params: BTreeMap<String, String>,
    pub source_ids: Vec<String>,
    pub source_identities: Vec<u32>,
    pub replacement_identity: Option<u32>,
    pub original_sample_id: String,
    pub original_identity: u32,
    pub original_pathology: u8,
    pub seed: u64,
}

impl PrivatizedImage {
    pub fn params_string(&self) -> String {
        self.params
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Checks that provenance is present and self-consistent against the
    /// dataset the sources came from.
    pub fn check_provenance(&self, sources: &Dataset) -> Result<()> {
        if self.source_ids.is_empty() || self.source_identities.is_empty() {
            return Err(Error::Provenance(format!(
                "{} carries no sources",
                self.original_sample_id
            )));
        }
        for id in &self.source_ids {
            let s = sources
                .get(id)
                .ok_or_else(|| Error::Provenance(format!("unknown source sample `{id}`")))?;
            if !self.source_identities.contains(&s.identity) {
                return Err(Error::Provenance(format!(
                    "source `{id}` identity {} missing from source identities",
                    s.identity
                )));
            }
        }
        Ok(())
    }
}

// -------------------------------------------------------------------- blur

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma {
    Fixed(f64),
    Auto(AutoSigma),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoSigma {
    Auto,
}

impl Sigma {
    pub const AUTO: Sigma = Sigma::Auto(AutoSigma::Auto);

    /// `auto` resolves to `0.3 * ((size - 1) * 0.5 - 1) + 0.8`.
    pub fn resolve(self, kernel_size: usize) -> f64 {
        match self {
            Sigma::Fixed(s) => s,
            Sigma::Auto(_) => 0.3 * ((kernel_size as f64 - 1.0) * 0.5 - 1.0) + 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurConfig {
    pub kernel_size: usize,
    pub sigma: Sigma,
}

impl BlurConfig {
    pub fn auto(kernel_size: usize) -> Self {
        Self {
            kernel_size,
            sigma: Sigma::AUTO,
        }
    }
}

fn gaussian_1d(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::invalid(format!(
            "kernel size must be odd and positive, got {size}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Normalized `size`×`size` Gaussian kernel (outer product of the 1D taps).
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<Vec<f64>>> {
    let k = gaussian_1d(size, sigma)?;
    Ok(k.iter().map(|a| k.iter().map(|b| a * b).collect()).collect())
}

/// Separable Gaussian filtering with replicate padding.
pub fn blur_image(img: &GrayImage, cfg: &BlurConfig) -> Result<GrayImage> {
    let size = cfg.kernel_size;
    if size > 2 * img.height().min(img.width()) {
        return Err(Error::invalid(format!(
            "kernel size {size} exceeds twice the image dimension {}x{}",
            img.height(),
            img.width()
        )));
    }
    let taps = gaussian_1d(size, cfg.sigma.resolve(size))?;
    let half = (size / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut rows = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            rows[r * w + c] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * img.get_clamped(r as isize, c as isize + i as isize - half) as f64)
                .sum();
        }
    }
    let mut out = GrayImage::filled(h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            let v: f64 = taps
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let rr = (r as isize + i as isize - half).clamp(0, h as isize - 1) as usize;
                    t * rows[rr * w + c]
                })
                .sum();
            out.set(r, c, (v as f32).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

pub fn blur(sample: &ImageSample, cfg: &BlurConfig) -> Result<PrivatizedImage> {
    let pixels = blur_image(&sample.pixels, cfg)?;
    let mut params = BTreeMap::new();
    params.insert("kernel".into(), cfg.kernel_size.to_string());
    params.insert("sigma".into(), format!("{:.4}", cfg.sigma.resolve(cfg.kernel_size)));
    Ok(PrivatizedImage {
        pixels,
        method: Method::Blur,
        params,
        source_ids: vec![sample.id.clone()],
        source_identities: vec![sample.identity],
        replacement_identity: None,
        original_sample_id: sample.id.clone(),
        original_identity: sample.identity,
        original_pathology: sample.pathology,
        seed: 0,
    })
}

pub fn blur_set(dataset: &Dataset, cfg: &BlurConfig) -> Result<Vec<PrivatizedImage>> {
    dataset.samples().iter().map(|s| blur(s, cfg)).collect()
}

// ------------------------------------------------------------ K-Same-Select

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    PixelL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestIdentity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KSameConfig {
    pub k: usize,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl KSameConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            distance: Distance::PixelL2,
            tie_break: TieBreak::LowestIdentity,
        }
    }
}

/// K-Same-Select: within each pathology class, identities are grouped into
/// clusters of `k` (leftovers join the last cluster) and every sample is
/// replaced by the mean of one representative image per cluster identity.
///
/// Cluster growth: a seeded random unassigned image anchors the cluster; the
/// `k - 1` unassigned identities whose nearest image is closest to the anchor
/// join it (ties to the lowest identity label). The representative of an
/// identity is its image nearest the centroid of all the cluster's images.
pub fn k_same_select(
    dataset: &Dataset,
    cfg: &KSameConfig,
    seed: u64,
) -> Result<Vec<PrivatizedImage>> {
    let k = cfg.k;
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let samples = dataset.samples();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outputs: Vec<Option<PrivatizedImage>> = vec![None; samples.len()];

    for label in [0u8, 1] {
        let class: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].pathology == label)
            .collect();
        if class.is_empty() {
            continue;
        }
        let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in &class {
            by_identity.entry(samples[i].identity).or_default().push(i);
        }
        if by_identity.len() < k {
            return Err(Error::invalid(format!(
                "pathology class {label} has {} identities, fewer than k = {k}",
                by_identity.len()
            )));
        }

        let mut unassigned: BTreeSet<u32> = by_identity.keys().copied().collect();
        let mut clusters: Vec<Vec<u32>> = Vec::new();
        while unassigned.len() >= k {
            let candidates: Vec<usize> = class
                .iter()
                .copied()
                .filter(|&i| unassigned.contains(&samples[i].identity))
                .collect();
            let anchor = candidates[rng.random_range(0..candidates.len())];
            let anchor_id = samples[anchor].identity;
            let mut ranked: Vec<(f64, u32)> = unassigned
                .iter()
                .filter(|&&id| id != anchor_id)
                .map(|&id| {
                    let d = by_identity[&id]
                        .iter()
                        .map(|&j| samples[anchor].pixels.squared_distance(&samples[j].pixels))
                        .fold(f64::INFINITY, f64::min);
                    (d, id)
                })
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut cluster = vec![anchor_id];
            cluster.extend(ranked.iter().take(k - 1).map(|&(_, id)| id));
            for id in &cluster {
                unassigned.remove(id);
            }
            cluster.sort_unstable();
            clusters.push(cluster);
        }
        if !unassigned.is_empty() {
            let last = clusters.last_mut().expect("at least one cluster since |class| >= k");
            last.extend(unassigned.iter().copied());
            last.sort_unstable();
        }

        for cluster in &clusters {
            let members: Vec<usize> = cluster
                .iter()
                .flat_map(|id| by_identity[id].iter().copied())
                .collect();
            let member_imgs: Vec<&GrayImage> = members.iter().map(|&i| &samples[i].pixels).collect();
            let centroid = GrayImage::mean_of(&member_imgs)?;
            let representatives: Vec<usize> = cluster
                .iter()
                .map(|id| {
                    let mut best = by_identity[id][0];
                    let mut best_d = f64::INFINITY;
                    for &j in &by_identity[id] {
                        let d = samples[j].pixels.squared_distance(&centroid);
                        if d < best_d {
                            best_d = d;
                            best = j;
                        }
                    }
                    best
                })
                .collect();
            let rep_imgs: Vec<&GrayImage> =
                representatives.iter().map(|&i| &samples[i].pixels).collect();
            let mut averaged = GrayImage::mean_of(&rep_imgs)?;
            averaged.clamp_unit();
            let source_ids: Vec<String> =
                representatives.iter().map(|&i| samples[i].id.clone()).collect();
            let mut params = BTreeMap::new();
            params.insert("k".into(), k.to_string());
            params.insert("cluster_size".into(), cluster.len().to_string());
            for &i in &members {
                outputs[i] = Some(PrivatizedImage {
                    pixels: averaged.clone(),
                    method: Method::Ksame,
                    params: params.clone(),
                    source_ids: source_ids.clone(),
                    source_identities: cluster.clone(),
                    replacement_identity: None,
                    original_sample_id: samples[i].id.clone(),
                    original_identity: samples[i].identity,
                    original_pathology: samples[i].pathology,
                    seed,
                });
            }
        }
    }
    Ok(outputs
        .into_iter()
        .map(|o| o.expect("every sample belongs to a class cluster"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KAnonymityReport {
    pub k: usize,
    pub pass: bool,
    /// Original sample ids of violating outputs.
    pub violating: Vec<String>,
}

/// Passes iff every output mixes at least `k` distinct identities and, for
/// K-Same outputs, the original identity is one of them.
pub fn verify_k_anonymity(outputs: &[PrivatizedImage], k: usize) -> Result<KAnonymityReport> {
    let mut violating = Vec::new();
    for o in outputs {
        if o.source_ids.is_empty() || o.source_identities.is_empty() {
            return Err(Error::Provenance(format!(
                "output for {} has no source provenance",
                o.original_sample_id
            )));
        }
        let distinct: BTreeSet<u32> = o.source_identities.iter().copied().collect();
        let mut ok = distinct.len() >= k;
        if o.method == Method::Ksame && !distinct.contains(&o.original_identity) {
            ok = false;
        }
        if !ok {
            violating.push(o.original_sample_id.clone());
        }
    }
    Ok(KAnonymityReport {
        k,
        pass: violating.is_empty(),
        violating,
    })
}

// ------------------------------------------------------------------ export

pub const PRIVATIZED_HEADER: [&str; 7] = [
    "id",
    "path",
    "method",
    "params",
    "original_id",
    "replacement_identity",
    "source_ids",
];

/// Writes `dir/manifest.csv` and one PGM per output under `dir/images/`.
/// Conditioning identities that are not implied by `source_ids` travel in
/// the `identities` parameter.
pub fn save_privatized(outputs: &[PrivatizedImage], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_io(&manifest, e))?;
    w.write_record(PRIVATIZED_HEADER).map_err(|e| csv_io(&manifest, e))?;
    for o in outputs {
        let rel = format!("images/{}.pgm", file_stem(&o.original_sample_id));
        write_pgm(&dir.join(&rel), &o.pixels)?;
        let mut params = o.params.clone();
        params.insert("seed".into(), o.seed.to_string());
        params.insert(
            "identities".into(),
            o.source_identities
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join("|"),
        );
        let params = params
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            o.original_sample_id.as_str(),
            rel.as_str(),
            o.method.as_str(),
            params.as_str(),
            o.original_sample_id.as_str(),
            &o.replacement_identity.map(|r| r.to_string()).unwrap_or_default(),
            &o.source_ids.join(";"),
        ])
        .map_err(|e| csv_io(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))
}

/// Reads a privatized set written by [`save_privatized`]; original labels
/// are looked up in `originals`.
pub fn load_privatized(dir: &Path, originals: &Dataset) -> Result<Vec<PrivatizedImage>> {
    let manifest = dir.join("manifest.csv");
    if !manifest.exists() {
        return Err(Error::MissingArtifact(manifest));
    }
    let mut r = csv::Reader::from_path(&manifest).map_err(|e| csv_io(&manifest, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let err = |m: String| Error::Load {
            path: manifest.clone(),
            row,
            message: m,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != PRIVATIZED_HEADER.len() {
            return Err(err(format!("expected {} columns", PRIVATIZED_HEADER.len())));
        }
        let method = Method::parse(&rec[2]).ok_or_else(|| err(format!("bad method `{}`", &rec[2])))?;
        let mut params: BTreeMap<String, String> = BTreeMap::new();
        for kv in rec[3].split(';').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| err(format!("bad params entry `{kv}`")))?;
            params.insert(k.to_string(), v.to_string());
        }
        let seed = params
            .remove("seed")
            .map(|s| s.parse::<u64>())
            .transpose()
            .map_err(|_| err("bad seed".into()))?
            .unwrap_or(0);
        let identities = params.remove("identities").unwrap_or_default();
        let source_identities = identities
            .split('|')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| err("bad identities list".into()))?;
        let original = originals
            .get(&rec[4])
            .ok_or_else(|| err(format!("unknown original sample `{}`", &rec[4])))?;
        let replacement_identity = match rec[5].trim() {
            "" => None,
            s => Some(s.parse().map_err(|_| err(format!("bad replacement `{s}`")))?),
        };
        let pixels = read_gray(&dir.join(&rec[1])).map_err(|e| err(e.to_string()))?;
        out.push(PrivatizedImage {
            pixels,
            method,
            params,
            source_ids: rec[6].split(';').filter(|s| !s.is_empty()).map(String::from).collect(),
            source_identities,
            replacement_identity,
            original_sample_id: original.id.clone(),
            original_identity: original.identity,
            original_pathology: original.pathology,
            seed,
        });
    }
    Ok(out)
}

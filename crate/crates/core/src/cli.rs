//! Command-line orchestration: run configuration, artifact layout and the
//! individual pipeline stages.
//!
//! A run is described by a TOML file. Every section is optional and every
//! unknown key is rejected:
//!
//! ```toml
//! out_dir = "runs"          # overridden by --out-dir / PRIVCASE_OUT_DIR
//! seed = 42                 # overridden by --seed / PRIVCASE_SEED
//!
//! [dataset]                 # exactly one of `manifest` or `synth`
//! manifest = "data/manifest.csv"
//! [dataset.preprocess]      # applied by `ingest` only
//! target_resolution = 64
//!
//! [split]
//! train = 0.65
//! val = 0.15
//! test = 0.20
//! seed = 7                  # defaults to the run seed
//!
//! [blur]
//! kernel_sizes = [3, 9, 15, 21]
//! sigma = "auto"            # or a number
//!
//! [ksame]
//! k_values = [3, 6, 9, 12]
//!
//! [pprlvgan]
//! policies = ["random", "same_pathology", "different_pathology"]
//! averaging_n = 6
//! averaged_policies = ["random", "same_pathology"]
//! [pprlvgan.train]          # TrainingHyperparams, seed comes from the run seed
//! epochs = 40
//!
//! [classifier]              # ClassifierConfig
//! epochs = 15
//!
//! [saliency]
//! count = 20
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    load_manifest, preprocess, save_manifest, save_subset_manifest, split, synthesize, Dataset, PreprocessOptions,
    SplitRatios, SynthSpec,
};
use crate::evaluate::{
    build_report, deep_taylor, evaluate_original, evaluate_privatized, load_classifier, parse_report, save_classifier,
    save_relevance, train_classifier, ClassifierConfig, ClassifierState, EvaluationRow, Target,
};
use crate::pprlvgan::{
    averaged_privatize_set, load_gan, privatize_set, save_gan, train_gan, ReplacementPolicy, TrainingHyperparams,
};
use crate::privatize::{blur_set, k_same_select, load_privatized, save_privatized, BlurConfig, KSameConfig, Sigma};
use crate::rng::derive_seed;
use crate::{Error, Result};

// ------------------------------------------------------------------ config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub blur: BlurSweep,
    #[serde(default)]
    pub ksame: KSameSweep,
    #[serde(default)]
    pub pprlvgan: GanSweep,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub saliency: SaliencyConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seed() -> u64 {
    42
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: default_out_dir(),
            seed: default_seed(),
            dataset: DatasetSource::default(),
            split: SplitConfig::default(),
            blur: BlurSweep::default(),
            ksame: KSameSweep::default(),
            pprlvgan: GanSweep::default(),
            classifier: ClassifierConfig::default(),
            saliency: SaliencyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub preprocess: Option<PreprocessOptions>,
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self {
            manifest: None,
            synth: Some(SynthSpec::default()),
            preprocess: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_train")]
    pub train: f64,
    #[serde(default = "default_val")]
    pub val: f64,
    #[serde(default = "default_test")]
    pub test: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_train() -> f64 {
    SplitRatios::default().train
}

fn default_val() -> f64 {
    SplitRatios::default().val
}

fn default_test() -> f64 {
    SplitRatios::default().test
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: default_train(),
            val: default_val(),
            test: default_test(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurSweep {
    #[serde(default = "default_kernels")]
    pub kernel_sizes: Vec<usize>,
    #[serde(default = "default_sigma")]
    pub sigma: Sigma,
}

fn default_kernels() -> Vec<usize> {
    vec![3, 9, 15, 21]
}

fn default_sigma() -> Sigma {
    Sigma::AUTO
}

impl Default for BlurSweep {
    fn default() -> Self {
        Self {
            kernel_sizes: default_kernels(),
            sigma: default_sigma(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KSameSweep {
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
}

fn default_k_values() -> Vec<usize> {
    vec![3, 6, 9, 12]
}

impl Default for KSameSweep {
    fn default() -> Self {
        Self {
            k_values: default_k_values(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanSweep {
    #[serde(default = "default_policies")]
    pub policies: Vec<ReplacementPolicy>,
    #[serde(default = "default_averaging_n")]
    pub averaging_n: usize,
    #[serde(default = "default_averaged_policies")]
    pub averaged_policies: Vec<ReplacementPolicy>,
    /// The seed is not configurable here; it is derived from the run seed.
    #[serde(default)]
    pub train: TrainingHyperparams,
}

fn default_policies() -> Vec<ReplacementPolicy> {
    vec![
        ReplacementPolicy::Random,
        ReplacementPolicy::SamePathology,
        ReplacementPolicy::DifferentPathology,
    ]
}

fn default_averaging_n() -> usize {
    6
}

fn default_averaged_policies() -> Vec<ReplacementPolicy> {
    vec![ReplacementPolicy::Random, ReplacementPolicy::SamePathology]
}

impl Default for GanSweep {
    fn default() -> Self {
        Self {
            policies: default_policies(),
            averaging_n: default_averaging_n(),
            averaged_policies: default_averaged_policies(),
            train: TrainingHyperparams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyConfig {
    #[serde(default = "default_saliency_count")]
    pub count: usize,
}

fn default_saliency_count() -> usize {
    20
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            count: default_saliency_count(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: &str| Err(Error::Config(m.to_string()));
        match (&self.dataset.manifest, &self.dataset.synth) {
            (Some(_), Some(_)) => return cfg_err("dataset: set exactly one of `manifest` or `synth`, not both"),
            (None, None) => return cfg_err("dataset: one of `manifest` or `synth` is required"),
            _ => {}
        }
        if let Some(s) = &self.dataset.synth {
            s.validate().map_err(|e| Error::Config(format!("dataset.synth: {e}")))?;
        }
        if self.blur.kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0) {
            return cfg_err("blur.kernel_sizes: every size must be odd and positive");
        }
        if self.ksame.k_values.contains(&0) {
            return cfg_err("ksame.k_values: every k must be >= 1");
        }
        if self.pprlvgan.averaging_n == 0 {
            return cfg_err("pprlvgan.averaging_n must be >= 1");
        }
        self.pprlvgan
            .train
            .validate()
            .map_err(|e| Error::Config(format!("pprlvgan.train: {e}")))?;
        if self.classifier.epochs == 0 || self.classifier.batch_size == 0 || self.classifier.base_channels == 0 {
            return cfg_err("classifier: epochs, batch_size and base_channels must be >= 1");
        }
        Ok(())
    }

    /// SHA-256 prefix over the canonical TOML of everything except `out_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let text = toml::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..6])
    }

    fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.split.train,
            val: self.split.val,
            test: self.split.test,
        }
    }

    fn gan_hyperparams(&self) -> TrainingHyperparams {
        TrainingHyperparams {
            seed: derive_seed(self.seed, SEED_GAN),
            ..self.pprlvgan.train.clone()
        }
    }
}

const SEED_IDENTITY_CLF: u64 = 101;
const SEED_TASK_CLF: u64 = 102;
const SEED_GAN: u64 = 103;
const SEED_KSAME: u64 = 200;
const SEED_GAN_SET: u64 = 300;
const SEED_GAN_AVG: u64 = 400;

// ---------------------------------------------------------------- layout

/// Artifact paths for one config under its output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub hash: String,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.out_dir.clone(),
            hash: cfg.hash(),
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join(format!("dataset-{}", self.hash))
    }

    pub fn split_manifest(&self, part: &str) -> PathBuf {
        self.dataset_dir().join(format!("{part}.csv"))
    }

    pub fn classifier(&self, target: Target) -> PathBuf {
        self.root.join(format!("classifier-{}-{}.psck", target.as_str(), self.hash))
    }

    pub fn gan(&self) -> PathBuf {
        self.root.join(format!("gan-{}.psck", self.hash))
    }

    pub fn gan_history(&self) -> PathBuf {
        self.root.join(format!("gan-history-{}.csv", self.hash))
    }

    pub fn privatized(&self, set: &str) -> PathBuf {
        self.root.join(format!("privatized-{}", self.hash)).join(set)
    }

    pub fn evaluation(&self) -> PathBuf {
        self.root.join(format!("evaluation-{}.csv", self.hash))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join(format!("report-{}.csv", self.hash))
    }

    pub fn saliency_dir(&self) -> PathBuf {
        self.root.join(format!("saliency-{}", self.hash))
    }
}

// ------------------------------------------------------------ experiments

#[derive(Debug, Clone, PartialEq)]
pub enum SetKind {
    Blur(usize),
    KSame(usize),
    Gan(ReplacementPolicy),
    GanAveraged(ReplacementPolicy, usize),
}

/// One privatized test set and its report labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub kind: SetKind,
    pub group: &'static str,
    pub label: String,
    /// Directory name under the privatized artifact root.
    pub set_name: String,
}

fn gan_label(p: &ReplacementPolicy) -> String {
    match p {
        ReplacementPolicy::Random => "Privatized set w/ random identities".into(),
        ReplacementPolicy::SamePathology => "Privatized set w/ identities w/ the same pathologies".into(),
        ReplacementPolicy::DifferentPathology => "Privatized set w/ identities w/ different pathologies".into(),
        ReplacementPolicy::Fixed(id) => format!("Privatized set w/ identity {id}"),
        ReplacementPolicy::Original => "Privatized set w/ the original identities".into(),
    }
}

fn averaged_label(p: &ReplacementPolicy) -> String {
    match p {
        ReplacementPolicy::Random => "Averaged privatized set using images from random identities".into(),
        ReplacementPolicy::SamePathology => "Averaged privatized set using images sharing the same pathology".into(),
        ReplacementPolicy::DifferentPathology => {
            "Averaged privatized set using images with different pathologies".into()
        }
        other => format!("Averaged privatized set using policy {}", other.name()),
    }
}

/// Privatized sets in report order: identity replacement, blurring, K-Same.
pub fn experiments(cfg: &RunConfig) -> Vec<Experiment> {
    let mut out = Vec::new();
    for p in &cfg.pprlvgan.policies {
        out.push(Experiment {
            kind: SetKind::Gan(*p),
            group: "PPRL-VGAN",
            label: gan_label(p),
            set_name: format!("pprlvgan-{}", p.name()),
        });
    }
    let n = cfg.pprlvgan.averaging_n;
    for p in &cfg.pprlvgan.averaged_policies {
        out.push(Experiment {
            kind: SetKind::GanAveraged(*p, n),
            group: "PPRL-VGAN",
            label: averaged_label(p),
            set_name: format!("pprlvgan-avg{n}-{}", p.name()),
        });
    }
    for &k in &cfg.blur.kernel_sizes {
        out.push(Experiment {
            kind: SetKind::Blur(k),
            group: "Blurring",
            label: format!("Privatized set with kernel size {k}"),
            set_name: format!("blur-{k}"),
        });
    }
    for &k in &cfg.ksame.k_values {
        out.push(Experiment {
            kind: SetKind::KSame(k),
            group: "K-Same-Select",
            label: format!("Privatized set with {k} identities"),
            set_name: format!("ksame-{k}"),
        });
    }
    out
}

fn needs_gan(cfg: &RunConfig) -> bool {
    !cfg.pprlvgan.policies.is_empty() || !cfg.pprlvgan.averaged_policies.is_empty()
}

// --------------------------------------------------------------- stages

fn log(msg: impl AsRef<str>) {
    eprintln!("privcase: {}", msg.as_ref());
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn write_dataset(cfg: &RunConfig, layout: &Layout, data: &Dataset) -> Result<PathBuf> {
    let dir = layout.dataset_dir();
    let seed = cfg.split.seed.unwrap_or(cfg.seed);
    let parts = split(data, cfg.split_ratios(), seed)?;
    let manifest = save_manifest(data, &dir)?;
    save_subset_manifest(&parts.train, &layout.split_manifest("train"), "images")?;
    save_subset_manifest(&parts.val, &layout.split_manifest("val"), "images")?;
    save_subset_manifest(&parts.test, &layout.split_manifest("test"), "images")?;
    log(format!(
        "dataset: {} images, {} identities, split {}/{}/{} -> {}",
        data.len(),
        data.n_identities(),
        parts.train.len(),
        parts.val.len(),
        parts.test.len(),
        dir.display()
    ));
    Ok(manifest)
}

pub fn cmd_synth(cfg: &RunConfig, layout: &Layout) -> Result<PathBuf> {
    let spec = cfg
        .dataset
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("`synth` needs a [dataset.synth] section".into()))?;
    let data = synthesize(spec, cfg.seed)?;
    write_dataset(cfg, layout, &data)
}

pub fn cmd_ingest(cfg: &RunConfig, layout: &Layout) -> Result<PathBuf> {
    let path = cfg
        .dataset
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("`ingest` needs `dataset.manifest`".into()))?;
    let raw = load_manifest(path)?;
    let opts = cfg.dataset.preprocess.unwrap_or_default();
    let samples = raw
        .samples()
        .iter()
        .map(|s| preprocess(s, &opts))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(cfg, layout, &Dataset::new(samples)?)
}

/// Materializes the dataset from whichever source the config names.
pub fn cmd_dataset(cfg: &RunConfig, layout: &Layout) -> Result<PathBuf> {
    if cfg.dataset.manifest.is_some() {
        cmd_ingest(cfg, layout)
    } else {
        cmd_synth(cfg, layout)
    }
}

pub fn load_splits(layout: &Layout) -> Result<Splits> {
    Ok(Splits {
        train: load_manifest(&layout.split_manifest("train"))?,
        val: load_manifest(&layout.split_manifest("val"))?,
        test: load_manifest(&layout.split_manifest("test"))?,
    })
}

pub fn cmd_train_classifier(cfg: &RunConfig, layout: &Layout, targets: &[Target]) -> Result<()> {
    let s = load_splits(layout)?;
    for &t in targets {
        let seed = derive_seed(
            cfg.seed,
            match t {
                Target::Identity => SEED_IDENTITY_CLF,
                Target::Pathology => SEED_TASK_CLF,
            },
        );
        let model = train_classifier(&s.train, &s.val, t, &cfg.classifier, seed)?;
        let path = layout.classifier(t);
        save_classifier(&path, &model)?;
        let imgs: Vec<_> = s.val.samples().iter().map(|x| &x.pixels).collect();
        let labels: Vec<u32> = s
            .val
            .samples()
            .iter()
            .map(|x| match t {
                Target::Identity => x.identity,
                Target::Pathology => x.pathology as u32,
            })
            .collect();
        let acc = crate::evaluate::accuracy(&model, &imgs, &labels)?;
        log(format!("{} classifier: val accuracy {acc:.4} -> {}", t.as_str(), path.display()));
    }
    Ok(())
}

pub fn cmd_train_gan(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let s = load_splits(layout)?;
    let hp = cfg.gan_hyperparams();
    let trained = train_gan(&s.train, &s.val, &hp)?;
    save_gan(&layout.gan(), &trained.generator, &trained.discriminator, hp.seed)?;
    let mut w = csv::Writer::from_path(layout.gan_history()).map_err(|e| csv_err(&layout.gan_history(), e))?;
    w.write_record([
        "epoch",
        "d_objective",
        "g_loss",
        "val_real_fake_accuracy",
        "val_identity_accuracy",
    ])
    .map_err(|e| csv_err(&layout.gan_history(), e))?;
    for h in &trained.history {
        w.write_record([
            h.epoch.to_string(),
            format!("{:.6}", h.d_objective),
            format!("{:.6}", h.g_loss),
            format!("{:.4}", h.val_real_fake_accuracy),
            format!("{:.4}", h.val_identity_accuracy),
        ])
        .map_err(|e| csv_err(&layout.gan_history(), e))?;
    }
    w.flush().map_err(|e| Error::io(layout.gan_history(), e))?;
    if let Some(last) = trained.history.last() {
        log(format!(
            "gan: {} epochs, val identity accuracy {:.4} -> {}",
            last.epoch,
            last.val_identity_accuracy,
            layout.gan().display()
        ));
    }
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodFilter {
    All,
    Blur,
    Ksame,
    Pprlvgan,
}

impl MethodFilter {
    fn admits(self, kind: &SetKind) -> bool {
        matches!(
            (self, kind),
            (MethodFilter::All, _)
                | (MethodFilter::Blur, SetKind::Blur(_))
                | (MethodFilter::Ksame, SetKind::KSame(_))
                | (MethodFilter::Pprlvgan, SetKind::Gan(_) | SetKind::GanAveraged(..))
        )
    }
}

pub fn cmd_privatize(cfg: &RunConfig, layout: &Layout, filter: MethodFilter) -> Result<()> {
    let s = load_splits(layout)?;
    let wanted: Vec<Experiment> = experiments(cfg).into_iter().filter(|e| filter.admits(&e.kind)).collect();
    let generator = if wanted
        .iter()
        .any(|e| matches!(e.kind, SetKind::Gan(_) | SetKind::GanAveraged(..)))
    {
        let path = layout.gan();
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        Some(load_gan(&path)?.0)
    } else {
        None
    };
    let mut gan_i = 0u64;
    let mut avg_i = 0u64;
    for e in &wanted {
        let out = match &e.kind {
            SetKind::Blur(k) => blur_set(
                &s.test,
                &BlurConfig {
                    kernel_size: *k,
                    sigma: cfg.blur.sigma,
                },
            )?,
            SetKind::KSame(k) => k_same_select(&s.test, &KSameConfig::new(*k), derive_seed(cfg.seed, SEED_KSAME + *k as u64))?,
            SetKind::Gan(p) => {
                gan_i += 1;
                let g = generator.as_ref().expect("loaded above");
                privatize_set(g, &s.test, &s.train, p, derive_seed(cfg.seed, SEED_GAN_SET + gan_i))?
            }
            SetKind::GanAveraged(p, n) => {
                avg_i += 1;
                let g = generator.as_ref().expect("loaded above");
                averaged_privatize_set(g, &s.test, &s.train, *n, p, derive_seed(cfg.seed, SEED_GAN_AVG + avg_i))?
            }
        };
        let dir = layout.privatized(&e.set_name);
        save_privatized(&out, &dir)?;
        log(format!("privatized {} ({} images) -> {}", e.set_name, out.len(), dir.display()));
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<ClassifierState> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    load_classifier(path)
}

pub fn cmd_evaluate(cfg: &RunConfig, layout: &Layout) -> Result<Vec<EvaluationRow>> {
    let identity = load_model(&layout.classifier(Target::Identity))?;
    let task = load_model(&layout.classifier(Target::Pathology))?;
    let s = load_splits(layout)?;
    let mut rows = vec![evaluate_original(&identity, &task, "Baseline", "Original test set", &s.test)?];
    for e in experiments(cfg) {
        let items = load_privatized(&layout.privatized(&e.set_name), &s.test)?;
        rows.push(evaluate_privatized(&identity, &task, e.group, &e.label, &items)?);
    }
    let report = build_report(rows);
    write_file(&layout.evaluation(), report.csv.as_bytes())?;
    log(format!("evaluation: {} rows -> {}", report.rows.len(), layout.evaluation().display()));
    Ok(report.rows)
}

/// Renders the evaluation rows as the final report. Without an evaluation
/// the report is header-only.
pub fn cmd_report(layout: &Layout) -> Result<String> {
    let rows = match fs::read_to_string(layout.evaluation()) {
        Ok(text) => parse_report(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(layout.evaluation(), e)),
    };
    let report = build_report(rows);
    write_file(&layout.report(), report.csv.as_bytes())?;
    Ok(report.csv)
}

pub fn cmd_saliency(cfg: &RunConfig, layout: &Layout) -> Result<PathBuf> {
    let task = load_model(&layout.classifier(Target::Pathology))?;
    let s = load_splits(layout)?;
    let dir = layout.saliency_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let lesion = cfg.dataset.synth.as_ref().map(|spec| spec.lesion_region);
    let summary = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary).map_err(|e| csv_err(&summary, e))?;
    w.write_record([
        "id",
        "pathology",
        "predicted",
        "output_score",
        "relevance_total",
        "lesion_mean",
        "outside_mean",
    ])
    .map_err(|e| csv_err(&summary, e))?;
    for sample in s.test.samples().iter().take(cfg.saliency.count) {
        let map = deep_taylor(&task, &sample.pixels, None)?;
        let stem: String = sample
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        save_relevance(&map, &dir.join(format!("{stem}.pgm")))?;
        let (inside, outside) = match lesion {
            Some(r) if map.values.height() == map.values.width() => {
                let (a, b) = map.region_means(&r.mask(map.values.height()));
                (format!("{a:.6e}"), format!("{b:.6e}"))
            }
            _ => (String::new(), String::new()),
        };
        w.write_record([
            sample.id.clone(),
            sample.pathology.to_string(),
            map.predicted_class.to_string(),
            format!("{:.6}", map.output_score),
            format!("{:.6e}", map.total()),
            inside,
            outside,
        ])
        .map_err(|e| csv_err(&summary, e))?;
    }
    w.flush().map_err(|e| Error::io(&summary, e))?;
    log(format!("saliency maps -> {}", dir.display()));
    Ok(dir)
}

/// Fails when a K-Same-Select `k` exceeds the identities of some pathology
/// class in the test split, before anything is trained.
pub fn check_ksame_feasible(cfg: &RunConfig, test: &Dataset) -> Result<()> {
    let mut per_class = [0usize; 2];
    for p in test.identity_pathology().values() {
        per_class[*p as usize] += 1;
    }
    for &k in &cfg.ksame.k_values {
        for (label, &n) in per_class.iter().enumerate() {
            if n > 0 && n < k {
                return Err(Error::Config(format!(
                    "ksame.k_values: k = {k} exceeds the {n} identities of pathology class {label} in the test split"
                )));
            }
        }
    }
    Ok(())
}

/// Runs every stage in order and returns the report CSV.
pub fn cmd_pipeline(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    cmd_dataset(cfg, layout)?;
    check_ksame_feasible(cfg, &load_manifest(&layout.split_manifest("test"))?)?;
    cmd_train_classifier(cfg, layout, &[Target::Identity, Target::Pathology])?;
    if needs_gan(cfg) {
        cmd_train_gan(cfg, layout)?;
    }
    cmd_privatize(cfg, layout, MethodFilter::All)?;
    cmd_evaluate(cfg, layout)?;
    cmd_saliency(cfg, layout)?;
    cmd_report(layout)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ------------------------------------------------------------------ CLI

const ENV_HELP: &str = "\
Environment:
  PRIVCASE_OUT_DIR  output directory, overrides `out_dir` in the config
  PRIVCASE_SEED     global seed, overrides `seed` in the config

Exit codes:
  0 success, 2 configuration error, 3 missing artifact,
  4 numerical failure, 1 any other error";

#[derive(Debug, Parser)]
#[command(
    name = "privcase",
    version,
    about = "Privatize image case explanations and measure the privacy / evidence trade-off",
    after_help = ENV_HELP
)]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "PRIVCASE_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "PRIVCASE_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Identity,
    Pathology,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its splits.
    Synth,
    /// Load and preprocess a manifest dataset and split it.
    Ingest,
    /// Train the identity-replacement generator.
    TrainGan,
    /// Train the evaluation classifiers.
    TrainClassifier {
        #[arg(long, value_enum, default_value = "both")]
        target: TargetArg,
    },
    /// Write the privatized test sets.
    Privatize {
        #[arg(long, value_enum, default_value = "all")]
        method: MethodFilter,
    },
    /// Score every privatized set with the evaluation classifiers.
    Evaluate,
    /// Deep Taylor relevance maps for test images.
    Saliency,
    /// Write the report CSV and print it.
    Report,
    /// Run all stages end to end.
    Pipeline,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

/// Resolves the effective config from the file and flag / env overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let layout = Layout::new(&cfg);
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &layout).map(drop),
        Command::Ingest => cmd_ingest(&cfg, &layout).map(drop),
        Command::TrainGan => cmd_train_gan(&cfg, &layout),
        Command::TrainClassifier { target } => {
            let targets: &[Target] = match target {
                TargetArg::Identity => &[Target::Identity],
                TargetArg::Pathology => &[Target::Pathology],
                TargetArg::Both => &[Target::Identity, Target::Pathology],
            };
            cmd_train_classifier(&cfg, &layout, targets)
        }
        Command::Privatize { method } => cmd_privatize(&cfg, &layout, *method),
        Command::Evaluate => cmd_evaluate(&cfg, &layout).map(drop),
        Command::Saliency => cmd_saliency(&cfg, &layout).map(drop),
        Command::Report => cmd_report(&layout).map(|csv| print!("{csv}")),
        Command::Pipeline => cmd_pipeline(&cfg, &layout).map(|csv| print!("{csv}")),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("privcase: error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests;

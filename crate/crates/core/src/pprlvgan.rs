//! Identity replacement with a conditional VAE generator trained against a
//! discriminator with three heads: real/fake (D¹), identity (D²) and
//! pathology (D³).
//!
//! The generator encodes an image to `(mu, logvar)`, samples
//! `z = mu + exp(logvar / 2) * eps` and decodes `z` concatenated with a
//! one-hot replacement identity `c`. The discriminator maximizes
//!
//! ```text
//! λ1D [log D¹(I) + log(1 - D¹(G(I,c)))] + λ2D log D²_id(I) + λ3D log D³_y(I)
//! ```
//!
//! and the generator minimizes
//!
//! ```text
//! λ1G log(1 - D¹(G)) + λ2G log(1 - D²_c(G)) + λ3G log(1 - D³_y(G)) + λ4G KL
//! ```
//!
//! with every log argument clamped to `[eps, 1 - eps]`.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ImageSample};
use crate::diffcore::checkpoint;
use crate::diffcore::{
    backward_with, forward, step, BackwardOptions, ForwardTrace, NetworkSpec, OptimizerConfig,
    OptimizerState, ParameterSet, Scalar, Tensor,
};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::privatize::{Method, PrivatizedImage};
use crate::rng::{derive_seed, stream_rng};

pub const GEN_PREFIX: &str = "gen.";
pub const DISC_PREFIX: &str = "disc.";

/// Pathology head width.
const N_TASKS: usize = 2;

/// Layer sizes for a given resolution. Encoder and discriminator trunk are
/// three stride-2 convolutions (`b`, `2b`, `4b` channels); the decoder mirrors
/// them with nearest upsampling followed by 3×3 convolutions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanArchitecture {
    pub resolution: usize,
    pub base_channels: usize,
    pub latent_dim: usize,
    pub n_identities: usize,
}

impl GanArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || self.resolution % 8 != 0 {
            return Err(Error::invalid(format!(
                "resolution must be a positive multiple of 8, got {}",
                self.resolution
            )));
        }
        if self.base_channels == 0 || self.latent_dim == 0 || self.n_identities == 0 {
            return Err(Error::invalid(
                "base_channels, latent_dim and n_identities must be >= 1",
            ));
        }
        Ok(())
    }

    fn bottleneck_side(&self) -> usize {
        self.resolution / 8
    }

    fn features(&self) -> usize {
        4 * self.base_channels * self.bottleneck_side().pow(2)
    }

    fn down_stack(&self, prefix: &str) -> NetworkSpec {
        let b = self.base_channels;
        NetworkSpec::new(vec![1, self.resolution, self.resolution])
            .conv2d(&format!("{prefix}conv1"), 1, b, 4, 2, 1, true)
            .relu()
            .conv2d(&format!("{prefix}conv2"), b, 2 * b, 4, 2, 1, true)
            .relu()
            .conv2d(&format!("{prefix}conv3"), 2 * b, 4 * b, 4, 2, 1, true)
            .relu()
            .flatten()
    }

    /// Image → `[mu | logvar]`.
    pub fn encoder_spec(&self) -> NetworkSpec {
        self.down_stack("gen.enc.")
            .dense("gen.enc.fc", self.features(), 2 * self.latent_dim, true)
    }

    /// `z` (with `c` concatenated) → image in `[0, 1]`.
    pub fn decoder_spec(&self) -> NetworkSpec {
        let b = self.base_channels;
        let s = self.bottleneck_side();
        NetworkSpec::new(vec![self.latent_dim])
            .concat_condition(self.n_identities)
            .dense("gen.dec.fc", self.latent_dim + self.n_identities, self.features(), true)
            .relu()
            .reshape(vec![4 * b, s, s])
            .upsample2x()
            .conv2d("gen.dec.conv1", 4 * b, 2 * b, 3, 1, 1, true)
            .relu()
            .upsample2x()
            .conv2d("gen.dec.conv2", 2 * b, b, 3, 1, 1, true)
            .relu()
            .upsample2x()
            .conv2d("gen.dec.conv3", b, 1, 3, 1, 1, true)
            .sigmoid()
    }

    pub fn trunk_spec(&self) -> NetworkSpec {
        self.down_stack("disc.")
    }

    fn head_spec(&self, name: &str, outputs: usize) -> NetworkSpec {
        let spec = NetworkSpec::new(vec![self.features()]).dense(name, self.features(), outputs, true);
        if outputs == 1 {
            spec.sigmoid()
        } else {
            spec.softmax()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorState<T = f32> {
    pub arch: GanArchitecture,
    /// Training identities; position is the one-hot index of `c`.
    pub identities: Vec<u32>,
    pub encoder: NetworkSpec,
    pub decoder: NetworkSpec,
    pub params: ParameterSet<T>,
}

impl<T: Scalar> GeneratorState<T> {
    pub fn init(arch: GanArchitecture, identities: Vec<u32>, seed: u64) -> Result<Self> {
        let mut params = arch.encoder_spec().init_params(derive_seed(seed, 1))?;
        params.merge(arch.decoder_spec().init_params(derive_seed(seed, 2))?)?;
        Self::from_params(arch, identities, params)
    }

    pub fn from_params(arch: GanArchitecture, identities: Vec<u32>, params: ParameterSet<T>) -> Result<Self> {
        arch.validate()?;
        if identities.len() != arch.n_identities {
            return Err(Error::invalid(format!(
                "{} identity labels for a {}-way condition",
                identities.len(),
                arch.n_identities
            )));
        }
        let encoder = arch.encoder_spec();
        let decoder = arch.decoder_spec();
        encoder.check_params(&params.subset("gen.enc."))?;
        decoder.check_params(&params.subset("gen.dec."))?;
        if params.len() != params.subset(GEN_PREFIX).len() {
            return Err(Error::invalid("generator parameters must all start with `gen.`"));
        }
        Ok(Self {
            arch,
            identities,
            encoder,
            decoder,
            params,
        })
    }

    pub fn identity_index(&self, label: u32) -> Option<usize> {
        self.identities.iter().position(|&l| l == label)
    }

    pub fn cast<U: Scalar>(&self) -> GeneratorState<U> {
        GeneratorState {
            arch: self.arch.clone(),
            identities: self.identities.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            params: self.params.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorState<T = f32> {
    pub arch: GanArchitecture,
    pub trunk: NetworkSpec,
    pub real_fake: NetworkSpec,
    pub identity: NetworkSpec,
    pub task: NetworkSpec,
    pub params: ParameterSet<T>,
}

impl<T: Scalar> DiscriminatorState<T> {
    pub fn init(arch: GanArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = arch.trunk_spec().init_params(derive_seed(seed, 3))?;
        params.merge(arch.head_spec("disc.real_fake", 1).init_params(derive_seed(seed, 4))?)?;
        params.merge(
            arch.head_spec("disc.identity", arch.n_identities)
                .init_params(derive_seed(seed, 5))?,
        )?;
        params.merge(arch.head_spec("disc.task", N_TASKS).init_params(derive_seed(seed, 6))?)?;
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: GanArchitecture, params: ParameterSet<T>) -> Result<Self> {
        arch.validate()?;
        let trunk = arch.trunk_spec();
        let real_fake = arch.head_spec("disc.real_fake", 1);
        let identity = arch.head_spec("disc.identity", arch.n_identities);
        let task = arch.head_spec("disc.task", N_TASKS);
        let declared = [&trunk, &real_fake, &identity, &task]
            .iter()
            .map(|s| s.parameter_shapes().len())
            .sum::<usize>();
        for spec in [&trunk, &real_fake, &identity, &task] {
            for (name, shape) in spec.parameter_shapes() {
                let t = params
                    .get(&name)
                    .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape(name, format!("expected {shape:?}, got {:?}", t.shape())));
                }
            }
        }
        if params.len() != declared {
            return Err(Error::invalid(format!(
                "discriminator holds {} tensors, architecture declares {declared}",
                params.len()
            )));
        }
        Ok(Self {
            arch,
            trunk,
            real_fake,
            identity,
            task,
            params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> DiscriminatorState<U> {
        DiscriminatorState {
            arch: self.arch.clone(),
            trunk: self.trunk.clone(),
            real_fake: self.real_fake.clone(),
            identity: self.identity.clone(),
            task: self.task.clone(),
            params: self.params.cast(),
        }
    }
}

// ------------------------------------------------------------ latent codes

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
    pub z: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityCode {
    pub identity_label: u32,
    pub index: usize,
    pub width: usize,
}

impl IdentityCode {
    /// Code for `label` in the label space `identities`.
    pub fn new(label: u32, identities: &[u32]) -> Result<Self> {
        let index = identities
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::invalid(format!("identity {label} is not a training identity")))?;
        Ok(Self {
            identity_label: label,
            index,
            width: identities.len(),
        })
    }

    pub fn one_hot(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.width];
        v[self.index] = 1.0;
        v
    }
}

fn image_tensor<T: Scalar>(images: &[&GrayImage], resolution: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * resolution * resolution);
    for img in images {
        if img.height() != resolution || img.width() != resolution {
            return Err(Error::shape(
                "input",
                format!(
                    "image is {}x{}, generator expects {resolution}x{resolution}",
                    img.height(),
                    img.width()
                ),
            ));
        }
        data.extend(img.data().iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(vec![images.len(), 1, resolution, resolution], data)
}

fn one_hot_tensor<T: Scalar>(indices: &[usize], width: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(vec![indices.len(), width]);
    for (i, &c) in indices.iter().enumerate() {
        t.data_mut()[i * width + c] = T::one();
    }
    t
}

/// Standard-normal noise for one latent draw.
pub fn latent_noise(latent_dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = stream_rng(seed, 0);
    (0..latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn encode(g: &GeneratorState, image: &GrayImage) -> Result<LatentCode> {
    let x: Tensor = image_tensor(&[image], g.arch.resolution)?;
    let out = forward(&g.encoder, &g.params, &x, None)?.into_output();
    let l = g.arch.latent_dim;
    Ok(LatentCode {
        mu: out.data()[..l].to_vec(),
        logvar: out.data()[l..].to_vec(),
        z: None,
    })
}

/// Reparameterized draw with caller-supplied noise (`eps = 0` gives `z = mu`).
pub fn sample_latent_with_noise(code: &LatentCode, eps: &[f32]) -> Result<LatentCode> {
    if eps.len() != code.mu.len() || code.logvar.len() != code.mu.len() {
        return Err(Error::invalid("noise, mu and logvar lengths differ"));
    }
    let z = code
        .mu
        .iter()
        .zip(&code.logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(LatentCode {
        z: Some(z),
        ..code.clone()
    })
}

pub fn sample_latent(code: &LatentCode, seed: u64) -> LatentCode {
    let eps = latent_noise(code.mu.len(), seed);
    sample_latent_with_noise(code, &eps).expect("noise sized from mu")
}

pub fn decode(g: &GeneratorState, z: &[f32], c: &IdentityCode) -> Result<GrayImage> {
    if c.width != g.arch.n_identities {
        return Err(Error::invalid("identity code width does not match the generator"));
    }
    let zt = Tensor::new(vec![1, z.len()], z.to_vec())?;
    let ct = one_hot_tensor::<f32>(&[c.index], c.width);
    let out = forward(&g.decoder, &g.params, &zt, Some(&ct))?.into_output();
    if !out.all_finite() {
        return Err(Error::Numerical("generator produced non-finite pixels".into()));
    }
    let r = g.arch.resolution;
    GrayImage::new(r, r, out.into_data())
}

pub fn generate(g: &GeneratorState, image: &GrayImage, c: &IdentityCode, seed: u64) -> Result<GrayImage> {
    let code = sample_latent(&encode(g, image)?, seed);
    decode(g, code.z.as_deref().expect("sampled"), c)
}

/// Batched [`generate`]: item `i` uses `codes[i]` and noise from `seeds[i]`.
pub fn generate_batch(
    g: &GeneratorState,
    images: &[&GrayImage],
    codes: &[IdentityCode],
    seeds: &[u64],
) -> Result<Vec<GrayImage>> {
    if images.len() != codes.len() || images.len() != seeds.len() {
        return Err(Error::invalid("images, codes and seeds must have equal length"));
    }
    let l = g.arch.latent_dim;
    let r = g.arch.resolution;
    let mut out = Vec::with_capacity(images.len());
    for start in (0..images.len()).step_by(32) {
        let end = (start + 32).min(images.len());
        let x: Tensor = image_tensor(&images[start..end], r)?;
        let noise: Vec<f32> = seeds[start..end].iter().flat_map(|&s| latent_noise(l, s)).collect();
        let noise = Tensor::new(vec![end - start, l], noise)?;
        let idx: Vec<usize> = codes[start..end].iter().map(|c| c.index).collect();
        let batch = GanBatch {
            images: x,
            identities: vec![0; end - start],
            tasks: vec![0; end - start],
            replacements: idx,
            noise,
        };
        let pass = generator_pass(g, &batch)?;
        if !pass.fake().all_finite() {
            return Err(Error::Numerical("generator produced non-finite pixels".into()));
        }
        for item in pass.dec.output().data().chunks(r * r) {
            out.push(GrayImage::new(r, r, item.to_vec())?);
        }
    }
    Ok(out)
}

/// `KL(N(mu, diag e^logvar) ‖ N(0, I))` in closed form.
pub fn kl_divergence(code: &LatentCode) -> Result<f64> {
    let mu: Vec<f64> = code.mu.iter().map(|&v| v as f64).collect();
    let lv: Vec<f64> = code.logvar.iter().map(|&v| v as f64).collect();
    kl_with_grad(&mu, &lv).map(|(kl, _, _)| kl)
}

/// KL value and its gradients with respect to `mu` and `logvar`.
pub fn kl_with_grad<T: Scalar>(mu: &[T], logvar: &[T]) -> Result<(f64, Vec<T>, Vec<T>)> {
    if mu.len() != logvar.len() {
        return Err(Error::invalid("mu and logvar lengths differ"));
    }
    if mu.iter().chain(logvar).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite latent code".into()));
    }
    let half = T::lit(0.5);
    let mut kl = 0.0;
    let mut dmu = Vec::with_capacity(mu.len());
    let mut dlv = Vec::with_capacity(mu.len());
    for (&m, &lv) in mu.iter().zip(logvar) {
        let e = lv.exp();
        kl += -0.5 * (1.0 + lv.as_f64() - m.as_f64() * m.as_f64() - e.as_f64());
        dmu.push(m);
        dlv.push(half * (e - T::one()));
    }
    Ok((kl, dmu, dlv))
}

// ------------------------------------------------------------- objectives

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingHyperparams {
    /// `λ1G..λ4G`: realism, identity, pathology, KL.
    pub lambda_g: [f64; 4],
    /// `λ1D..λ3D`: realism, identity, pathology.
    pub lambda_d: [f64; 3],
    pub latent_dim: usize,
    pub base_channels: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub gen_optimizer: OptimizerConfig,
    pub disc_optimizer: OptimizerConfig,
    pub log_clamp_eps: f64,
    /// Use `-log p` in place of `log(1 - p)` in the generator terms. This
    /// departs from the saturating objective above and exists for stability.
    pub non_saturating: bool,
    /// Not part of the serialized form; callers derive it from a run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        Self {
            lambda_g: [0.5, 0.5, 0.5, 0.002],
            lambda_d: [1.0, 1.0, 1.0],
            latent_dim: 32,
            base_channels: 8,
            batch_size: 16,
            epochs: 40,
            gen_optimizer: OptimizerConfig::adam(2e-4, 0.5, 0.999),
            disc_optimizer: OptimizerConfig::adam(2e-4, 0.5, 0.999),
            log_clamp_eps: 1e-7,
            non_saturating: false,
            seed: 0,
        }
    }
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_g.iter().chain(&self.lambda_d).any(|l| !(*l >= 0.0)) {
            return Err(Error::invalid("all loss weights must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.log_clamp_eps > 0.0 && self.log_clamp_eps < 0.5) {
            return Err(Error::invalid("log_clamp_eps must lie in (0, 0.5)"));
        }
        self.gen_optimizer.validate()?;
        self.disc_optimizer.validate()
    }
}

/// One training batch. `identities` and `replacements` index the
/// generator's label space; `noise` is the reparameterization noise.
#[derive(Debug, Clone)]
pub struct GanBatch<T = f32> {
    pub images: Tensor<T>,
    pub identities: Vec<usize>,
    pub tasks: Vec<usize>,
    pub replacements: Vec<usize>,
    pub noise: Tensor<T>,
}

impl<T: Scalar> GanBatch<T> {
    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, arch: &GanArchitecture) -> Result<()> {
        let n = self.len();
        if n == 0 || self.images.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if self.identities.len() != n || self.tasks.len() != n || self.replacements.len() != n {
            return Err(Error::invalid("batch label vectors must match the image count"));
        }
        if self.noise.shape() != [n, arch.latent_dim] {
            return Err(Error::shape("noise", format!("expected [{n}, {}]", arch.latent_dim)));
        }
        if self
            .identities
            .iter()
            .chain(&self.replacements)
            .any(|&i| i >= arch.n_identities)
            || self.tasks.iter().any(|&t| t >= N_TASKS)
        {
            return Err(Error::invalid("batch label out of range"));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> GanBatch<U> {
        GanBatch {
            images: self.images.cast(),
            identities: self.identities.clone(),
            tasks: self.tasks.clone(),
            replacements: self.replacements.clone(),
            noise: self.noise.cast(),
        }
    }
}

/// Loss value, its gradient for the updated network and a signature of the
/// non-smooth branches taken (for gradient checking).
#[derive(Debug, Clone)]
pub struct LossOutput<T = f32> {
    pub value: f64,
    pub grads: ParameterSet<T>,
    pub signature: u64,
}

/// Generator activations kept for the generator update.
#[derive(Debug, Clone)]
pub struct GeneratorPass<T = f32> {
    enc: ForwardTrace<T>,
    dec: ForwardTrace<T>,
    mu: Vec<T>,
    logvar: Vec<T>,
}

impl<T: Scalar> GeneratorPass<T> {
    pub fn fake(&self) -> &Tensor<T> {
        self.dec.output()
    }
}

pub fn generator_pass<T: Scalar>(g: &GeneratorState<T>, batch: &GanBatch<T>) -> Result<GeneratorPass<T>> {
    batch.check(&g.arch)?;
    let n = batch.len();
    let l = g.arch.latent_dim;
    let enc = forward(&g.encoder, &g.params, &batch.images, None)?;
    let mut mu = Vec::with_capacity(n * l);
    let mut logvar = Vec::with_capacity(n * l);
    for row in enc.output().data().chunks(2 * l) {
        mu.extend_from_slice(&row[..l]);
        logvar.extend_from_slice(&row[l..]);
    }
    let half = T::lit(0.5);
    let z: Vec<T> = (0..n * l)
        .map(|i| mu[i] + (half * logvar[i]).exp() * batch.noise.data()[i])
        .collect();
    let z = Tensor::new(vec![n, l], z)?;
    let cond = one_hot_tensor(&batch.replacements, g.arch.n_identities);
    let dec = forward(&g.decoder, &g.params, &z, Some(&cond))?;
    Ok(GeneratorPass { enc, dec, mu, logvar })
}

struct DiscPass<T> {
    trunk: ForwardTrace<T>,
    real_fake: ForwardTrace<T>,
    identity: ForwardTrace<T>,
    task: ForwardTrace<T>,
}

fn disc_pass<T: Scalar>(d: &DiscriminatorState<T>, x: &Tensor<T>) -> Result<DiscPass<T>> {
    let trunk = forward(&d.trunk, &d.params, x, None)?;
    let h = trunk.output();
    Ok(DiscPass {
        real_fake: forward(&d.real_fake, &d.params, h, None)?,
        identity: forward(&d.identity, &d.params, h, None)?,
        task: forward(&d.task, &d.params, h, None)?,
        trunk,
    })
}

/// Backpropagates head-output gradients through heads and trunk.
fn disc_backward<T: Scalar>(
    d: &DiscriminatorState<T>,
    pass: &DiscPass<T>,
    heads: [&Tensor<T>; 3],
    param_grads: bool,
    input_grad: bool,
) -> Result<(ParameterSet<T>, Option<Tensor<T>>)> {
    let head_opts = BackwardOptions {
        param_grads,
        input_grad: true,
    };
    let mut params = ParameterSet::new();
    let mut dh: Option<Tensor<T>> = None;
    for ((spec, trace), g) in [
        (&d.real_fake, &pass.real_fake),
        (&d.identity, &pass.identity),
        (&d.task, &pass.task),
    ]
    .into_iter()
    .zip(heads)
    {
        let gr = backward_with(spec, &d.params, trace, g, head_opts)?;
        params.accumulate(gr.params)?;
        let gi = gr.input.expect("requested");
        match dh.as_mut() {
            Some(acc) => acc.add_assign(&gi)?,
            None => dh = Some(gi),
        }
    }
    let gr = backward_with(
        &d.trunk,
        &d.params,
        &pass.trunk,
        &dh.expect("three heads"),
        BackwardOptions {
            param_grads,
            input_grad,
        },
    )?;
    params.accumulate(gr.params)?;
    Ok((params, gr.input))
}

/// Clamped log and its derivative; records whether the clamp was active.
fn clamped_log<T: Scalar>(p: T, eps: f64, flags: &mut Vec<bool>) -> (f64, T) {
    let pf = p.as_f64();
    let clamped = !(pf >= eps && pf <= 1.0 - eps);
    flags.push(clamped);
    if clamped {
        let c = if pf.is_nan() { eps } else { pf.clamp(eps, 1.0 - eps) };
        (c.ln(), T::zero())
    } else {
        (pf.ln(), T::one() / p)
    }
}

fn signature(traces: &[(&NetworkSpec, &ForwardTrace<impl Scalar>)], flags: &[bool]) -> u64 {
    let mut h = DefaultHasher::new();
    for (spec, trace) in traces {
        trace.kink_signature(spec).hash(&mut h);
    }
    flags.hash(&mut h);
    h.finish()
}

/// Eq. 1 objective (to maximize) on real images and the given fakes, with
/// its gradient for the discriminator parameters.
pub fn discriminator_objective<T: Scalar>(
    d: &DiscriminatorState<T>,
    batch: &GanBatch<T>,
    fake: &Tensor<T>,
    hp: &TrainingHyperparams,
) -> Result<LossOutput<T>> {
    batch.check(&d.arch)?;
    let n = batch.len();
    let nf = T::lit(n as f64);
    let [l1, l2, l3] = hp.lambda_d;
    let eps = hp.log_clamp_eps;
    let real = disc_pass(d, &batch.images)?;
    let fakes = disc_pass(d, fake)?;
    let n_id = d.arch.n_identities;

    let mut flags = Vec::new();
    let mut value = 0.0;
    let mut g_rf_real = Tensor::zeros(vec![n, 1]);
    let mut g_id_real = Tensor::zeros(vec![n, n_id]);
    let mut g_task_real = Tensor::zeros(vec![n, N_TASKS]);
    let mut g_rf_fake = Tensor::zeros(vec![n, 1]);
    for i in 0..n {
        let (v, dv) = clamped_log(real.real_fake.output().data()[i], eps, &mut flags);
        value += l1 * v;
        g_rf_real.data_mut()[i] = T::lit(l1) * dv / nf;

        let (v, dv) = clamped_log(T::one() - fakes.real_fake.output().data()[i], eps, &mut flags);
        value += l1 * v;
        g_rf_fake.data_mut()[i] = -T::lit(l1) * dv / nf;

        let y = batch.identities[i];
        let (v, dv) = clamped_log(real.identity.output().data()[i * n_id + y], eps, &mut flags);
        value += l2 * v;
        g_id_real.data_mut()[i * n_id + y] = T::lit(l2) * dv / nf;

        let t = batch.tasks[i];
        let (v, dv) = clamped_log(real.task.output().data()[i * N_TASKS + t], eps, &mut flags);
        value += l3 * v;
        g_task_real.data_mut()[i * N_TASKS + t] = T::lit(l3) * dv / nf;
    }
    value /= n as f64;

    let (mut grads, _) = disc_backward(d, &real, [&g_rf_real, &g_id_real, &g_task_real], true, false)?;
    let zero_id = Tensor::zeros(vec![n, n_id]);
    let zero_task = Tensor::zeros(vec![n, N_TASKS]);
    let (fake_grads, _) = disc_backward(d, &fakes, [&g_rf_fake, &zero_id, &zero_task], true, false)?;
    grads.accumulate(fake_grads)?;
    let sig = signature(&[(&d.trunk, &real.trunk), (&d.trunk, &fakes.trunk)], &flags);
    Ok(LossOutput {
        value,
        grads,
        signature: sig,
    })
}

/// Eq. 1 with fakes produced by the (frozen) generator.
pub fn discriminator_loss<T: Scalar>(
    d: &DiscriminatorState<T>,
    g: &GeneratorState<T>,
    batch: &GanBatch<T>,
    hp: &TrainingHyperparams,
) -> Result<LossOutput<T>> {
    let pass = generator_pass(g, batch)?;
    discriminator_objective(d, batch, pass.fake(), hp)
}

/// Eq. 2 loss (to minimize) for an existing generator pass, with its
/// gradient for the generator parameters; the discriminator is frozen.
pub fn generator_objective<T: Scalar>(
    d: &DiscriminatorState<T>,
    g: &GeneratorState<T>,
    batch: &GanBatch<T>,
    pass: &GeneratorPass<T>,
    hp: &TrainingHyperparams,
) -> Result<LossOutput<T>> {
    batch.check(&g.arch)?;
    let n = batch.len();
    let nf = T::lit(n as f64);
    let l = g.arch.latent_dim;
    let n_id = g.arch.n_identities;
    let [l1, l2, l3, l4] = hp.lambda_g;
    let eps = hp.log_clamp_eps;
    let fp = disc_pass(d, pass.fake())?;

    let mut flags = Vec::new();
    let mut value = 0.0;
    let mut g_rf = Tensor::zeros(vec![n, 1]);
    let mut g_id = Tensor::zeros(vec![n, n_id]);
    let mut g_task = Tensor::zeros(vec![n, N_TASKS]);
    // term(p) is log(1 - p) or, non-saturating, -log p
    let term = |p: T, lambda: f64, flags: &mut Vec<bool>| -> (f64, T) {
        if hp.non_saturating {
            let (v, dv) = clamped_log(p, eps, flags);
            (-lambda * v, -T::lit(lambda) * dv / nf)
        } else {
            let (v, dv) = clamped_log(T::one() - p, eps, flags);
            (lambda * v, -T::lit(lambda) * dv / nf)
        }
    };
    for i in 0..n {
        let (v, dv) = term(fp.real_fake.output().data()[i], l1, &mut flags);
        value += v;
        g_rf.data_mut()[i] = dv;

        let c = batch.replacements[i];
        let (v, dv) = term(fp.identity.output().data()[i * n_id + c], l2, &mut flags);
        value += v;
        g_id.data_mut()[i * n_id + c] = dv;

        let t = batch.tasks[i];
        let (v, dv) = term(fp.task.output().data()[i * N_TASKS + t], l3, &mut flags);
        value += v;
        g_task.data_mut()[i * N_TASKS + t] = dv;
    }

    let (kl, dmu_kl, dlv_kl) = kl_with_grad(&pass.mu, &pass.logvar)?;
    value += l4 * kl;
    value /= n as f64;

    let (_, dx) = disc_backward(d, &fp, [&g_rf, &g_id, &g_task], false, true)?;
    let dec = backward_with(
        &g.decoder,
        &g.params,
        &pass.dec,
        &dx.expect("requested"),
        BackwardOptions::default(),
    )?;
    let dz = dec.input.expect("requested");
    let scale = T::lit(l4) / nf;
    let half = T::lit(0.5);
    let mut denc = Tensor::zeros(vec![n, 2 * l]);
    for i in 0..n {
        for k in 0..l {
            let j = i * l + k;
            let dzj = dz.data()[j];
            let sd = (half * pass.logvar[j]).exp();
            denc.data_mut()[i * 2 * l + k] = dzj + scale * dmu_kl[j];
            denc.data_mut()[i * 2 * l + l + k] =
                dzj * batch.noise.data()[j] * half * sd + scale * dlv_kl[j];
        }
    }
    let enc = backward_with(
        &g.encoder,
        &g.params,
        &pass.enc,
        &denc,
        BackwardOptions {
            param_grads: true,
            input_grad: false,
        },
    )?;
    let mut grads = dec.params;
    grads.merge(enc.params)?;
    let sig = signature(
        &[
            (&g.encoder, &pass.enc),
            (&g.decoder, &pass.dec),
            (&d.trunk, &fp.trunk),
        ],
        &flags,
    );
    Ok(LossOutput {
        value,
        grads,
        signature: sig,
    })
}

pub fn generator_loss<T: Scalar>(
    d: &DiscriminatorState<T>,
    g: &GeneratorState<T>,
    batch: &GanBatch<T>,
    hp: &TrainingHyperparams,
) -> Result<LossOutput<T>> {
    let pass = generator_pass(g, batch)?;
    generator_objective(d, g, batch, &pass, hp)
}

// --------------------------------------------------------------- training

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean Eq. 1 objective over the epoch's batches.
    pub d_objective: f64,
    /// Mean Eq. 2 loss over the epoch's batches.
    pub g_loss: f64,
    /// D¹ accuracy on validation images (real) and their generated
    /// counterparts (fake).
    pub val_real_fake_accuracy: f64,
    /// D² accuracy on real validation images.
    pub val_identity_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedGan {
    pub generator: GeneratorState,
    pub discriminator: DiscriminatorState,
    pub history: Vec<EpochStats>,
}

const SHUFFLE_STREAM: u64 = 10;
const VAL_STREAM: u64 = 1_000_000;

fn make_batch(
    samples: &[&ImageSample],
    identities: &[u32],
    arch: &GanArchitecture,
    rng: &mut impl Rng,
) -> Result<GanBatch> {
    let imgs: Vec<&GrayImage> = samples.iter().map(|s| &s.pixels).collect();
    let images = image_tensor(&imgs, arch.resolution)?;
    let ids = samples
        .iter()
        .map(|s| {
            identities
                .iter()
                .position(|&l| l == s.identity)
                .ok_or_else(|| Error::invalid(format!("identity {} not in training set", s.identity)))
        })
        .collect::<Result<Vec<_>>>()?;
    let tasks = samples.iter().map(|s| s.pathology as usize).collect();
    let replacements = (0..samples.len()).map(|_| rng.random_range(0..arch.n_identities)).collect();
    let noise: Vec<f32> = (0..samples.len() * arch.latent_dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(GanBatch {
        images,
        identities: ids,
        tasks,
        replacements,
        noise: Tensor::new(vec![samples.len(), arch.latent_dim], noise)?,
    })
}

fn validation_stats(
    g: &GeneratorState,
    d: &DiscriminatorState,
    val: &Dataset,
    seed: u64,
) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut rng = stream_rng(seed, 0);
    let (mut rf_correct, mut id_correct) = (0usize, 0usize);
    let refs: Vec<&ImageSample> = val.samples().iter().collect();
    for chunk in refs.chunks(32) {
        let batch = make_batch(chunk, &g.identities, &g.arch, &mut rng)?;
        let fake = generator_pass(g, &batch)?;
        let real = disc_pass(d, &batch.images)?;
        let fakes = disc_pass(d, fake.fake())?;
        let n_id = g.arch.n_identities;
        for i in 0..batch.len() {
            rf_correct += (real.real_fake.output().data()[i] > 0.5) as usize;
            rf_correct += (fakes.real_fake.output().data()[i] < 0.5) as usize;
            let probs = &real.identity.output().data()[i * n_id..(i + 1) * n_id];
            id_correct += (argmax(probs) == batch.identities[i]) as usize;
        }
    }
    Ok((
        rf_correct as f64 / (2 * val.len()) as f64,
        id_correct as f64 / val.len() as f64,
    ))
}

/// Lowest index wins ties.
pub(crate) fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Alternating training: one discriminator ascent step then one generator
/// descent step per batch. Replacement codes are drawn uniformly over the
/// training identities for every sample of every batch.
pub fn train_gan(train: &Dataset, val: &Dataset, hp: &TrainingHyperparams) -> Result<TrainedGan> {
    hp.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let identities = train.identities();
    for id in val.identities() {
        if !identities.contains(&id) {
            return Err(Error::invalid(format!(
                "validation identity {id} does not appear in the training set"
            )));
        }
    }
    let resolution = train.samples()[0].pixels.height();
    let arch = GanArchitecture {
        resolution,
        base_channels: hp.base_channels,
        latent_dim: hp.latent_dim,
        n_identities: identities.len(),
    };
    let mut g = GeneratorState::init(arch.clone(), identities.clone(), hp.seed)?;
    let mut d = DiscriminatorState::init(arch.clone(), hp.seed)?;
    let mut g_opt = OptimizerState::new();
    let mut d_opt = OptimizerState::new();
    let mut rng = stream_rng(hp.seed, SHUFFLE_STREAM);
    let mut history = Vec::with_capacity(hp.epochs);
    let mut bad_streak = 0;

    for epoch in 0..hp.epochs {
        let mut order: Vec<&ImageSample> = train.samples().iter().collect();
        order.shuffle(&mut rng);
        let (mut d_sum, mut g_sum, mut counted) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let batch = make_batch(chunk, &identities, &arch, &mut rng)?;
            let pass = generator_pass(&g, &batch)?;
            let mut dl = discriminator_objective(&d, &batch, pass.fake(), hp)?;
            let d_ok = dl.value.is_finite() && dl.grads.all_finite();
            if d_ok {
                dl.grads.scale(-1.0);
                step(&mut d.params, &dl.grads, &hp.disc_optimizer, &mut d_opt)?;
            }
            let gl = generator_objective(&d, &g, &batch, &pass, hp)?;
            let g_ok = gl.value.is_finite() && gl.grads.all_finite();
            if g_ok {
                step(&mut g.params, &gl.grads, &hp.gen_optimizer, &mut g_opt)?;
            }
            if d_ok && g_ok {
                bad_streak = 0;
                d_sum += dl.value;
                g_sum += gl.value;
                counted += 1;
            } else {
                bad_streak += 1;
                if bad_streak >= 3 {
                    return Err(Error::Numerical(format!(
                        "non-finite GAN loss in 3 consecutive batches (epoch {}, batch {}; \
                         discriminator {}, generator {})",
                        epoch + 1,
                        b + 1,
                        dl.value,
                        gl.value
                    )));
                }
            }
        }
        let (rf, id) = validation_stats(&g, &d, val, derive_seed(hp.seed, VAL_STREAM + epoch as u64))?;
        let mean = |s: f64| if counted > 0 { s / counted as f64 } else { f64::NAN };
        history.push(EpochStats {
            epoch: epoch + 1,
            d_objective: mean(d_sum),
            g_loss: mean(g_sum),
            val_real_fake_accuracy: rf,
            val_identity_accuracy: id,
        });
    }
    Ok(TrainedGan {
        generator: g,
        discriminator: d,
        history,
    })
}

// ------------------------------------------------------ privatization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementPolicy {
    Random,
    SamePathology,
    DifferentPathology,
    Fixed(u32),
    Original,
}

impl ReplacementPolicy {
    pub fn name(&self) -> String {
        match self {
            ReplacementPolicy::Random => "random".into(),
            ReplacementPolicy::SamePathology => "same_pathology".into(),
            ReplacementPolicy::DifferentPathology => "different_pathology".into(),
            ReplacementPolicy::Fixed(id) => format!("fixed_{id}"),
            ReplacementPolicy::Original => "original".into(),
        }
    }

    /// Candidate identities for `sample`, ascending.
    pub fn pool(&self, sample: &ImageSample, train: &Dataset) -> Result<Vec<u32>> {
        let pathology = train.identity_pathology();
        let pool: Vec<u32> = match self {
            ReplacementPolicy::Random => pathology
                .keys()
                .copied()
                .filter(|&id| id != sample.identity)
                .collect(),
            ReplacementPolicy::SamePathology => pathology
                .iter()
                .filter(|&(&id, &p)| id != sample.identity && p == sample.pathology)
                .map(|(&id, _)| id)
                .collect(),
            ReplacementPolicy::DifferentPathology => pathology
                .iter()
                .filter(|&(_, &p)| p != sample.pathology)
                .map(|(&id, _)| id)
                .collect(),
            ReplacementPolicy::Fixed(id) => {
                if !pathology.contains_key(id) {
                    return Err(Error::invalid(format!("fixed identity {id} is not a training identity")));
                }
                vec![*id]
            }
            ReplacementPolicy::Original => vec![sample.identity],
        };
        if pool.is_empty() {
            return Err(Error::invalid(format!(
                "no replacement candidates for {} under policy {}",
                sample.id,
                self.name()
            )));
        }
        Ok(pool)
    }
}

pub fn choose_replacement(
    policy: &ReplacementPolicy,
    sample: &ImageSample,
    train: &Dataset,
    seed: u64,
) -> Result<IdentityCode> {
    let pool = policy.pool(sample, train)?;
    let label = pool[stream_rng(seed, 0).random_range(0..pool.len())];
    IdentityCode::new(label, &train.identities())
}

const CHOICE_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

fn check_label_space(g: &GeneratorState, train: &Dataset) -> Result<()> {
    if g.identities != train.identities() {
        return Err(Error::invalid(
            "generator identity labels differ from the training set's",
        ));
    }
    Ok(())
}

/// Replaces every identity in `dataset` via [`generate`].
pub fn privatize_set(
    g: &GeneratorState,
    dataset: &Dataset,
    train: &Dataset,
    policy: &ReplacementPolicy,
    seed: u64,
) -> Result<Vec<PrivatizedImage>> {
    check_label_space(g, train)?;
    let mut codes = Vec::with_capacity(dataset.len());
    let mut seeds = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples().iter().enumerate() {
        let item_seed = derive_seed(seed, i as u64);
        codes.push(choose_replacement(policy, s, train, derive_seed(item_seed, CHOICE_STREAM))?);
        seeds.push(derive_seed(item_seed, NOISE_STREAM));
    }
    let imgs: Vec<&GrayImage> = dataset.samples().iter().map(|s| &s.pixels).collect();
    let generated = generate_batch(g, &imgs, &codes, &seeds)?;
    Ok(dataset
        .samples()
        .iter()
        .zip(generated)
        .zip(codes.iter().zip(&seeds))
        .map(|((s, pixels), (c, &sd))| {
            let mut params = BTreeMap::new();
            params.insert("policy".into(), policy.name());
            let mut source_identities = vec![s.identity, c.identity_label];
            source_identities.sort_unstable();
            source_identities.dedup();
            PrivatizedImage {
                pixels,
                method: Method::Pprlvgan,
                params,
                source_ids: vec![s.id.clone()],
                source_identities,
                replacement_identity: Some(c.identity_label),
                original_sample_id: s.id.clone(),
                original_identity: s.identity,
                original_pathology: s.pathology,
                seed: sd,
            }
        })
        .collect())
}

/// Mean of `n` generations of `sample`: one conditioned on its own identity
/// (noise from `seed` itself) and `n - 1` on distinct policy identities. The
/// first drawn identity is recorded as the replacement.
pub fn averaged_privatize(
    g: &GeneratorState,
    sample: &ImageSample,
    train: &Dataset,
    n: usize,
    policy: &ReplacementPolicy,
    seed: u64,
) -> Result<PrivatizedImage> {
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    check_label_space(g, train)?;
    let mut drawn = Vec::new();
    if n > 1 {
        let mut pool = policy.pool(sample, train)?;
        pool.retain(|&id| id != sample.identity);
        if pool.len() < n - 1 {
            return Err(Error::invalid(format!(
                "policy {} offers {} identities for {}, averaging needs {}",
                policy.name(),
                pool.len(),
                sample.id,
                n - 1
            )));
        }
        pool.shuffle(&mut stream_rng(seed, 2));
        drawn = pool[..n - 1].to_vec();
    }
    let mut terms = Vec::with_capacity(n);
    terms.push(generate(g, &sample.pixels, &IdentityCode::new(sample.identity, &g.identities)?, seed)?);
    for (j, &id) in drawn.iter().enumerate() {
        let code = IdentityCode::new(id, &g.identities)?;
        terms.push(generate(g, &sample.pixels, &code, derive_seed(seed, 3 + j as u64))?);
    }
    let refs: Vec<&GrayImage> = terms.iter().collect();
    let pixels = GrayImage::mean_of(&refs)?;
    let mut source_identities = drawn.clone();
    source_identities.push(sample.identity);
    source_identities.sort_unstable();
    let mut params = BTreeMap::new();
    params.insert("policy".into(), policy.name());
    params.insert("n".into(), n.to_string());
    Ok(PrivatizedImage {
        pixels,
        method: Method::PprlvganAvg,
        params,
        source_ids: vec![sample.id.clone()],
        source_identities,
        replacement_identity: drawn.first().copied(),
        original_sample_id: sample.id.clone(),
        original_identity: sample.identity,
        original_pathology: sample.pathology,
        seed,
    })
}

pub fn averaged_privatize_set(
    g: &GeneratorState,
    dataset: &Dataset,
    train: &Dataset,
    n: usize,
    policy: &ReplacementPolicy,
    seed: u64,
) -> Result<Vec<PrivatizedImage>> {
    dataset
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| averaged_privatize(g, s, train, n, policy, derive_seed(seed, i as u64)))
        .collect()
}

// ------------------------------------------------------------ checkpoints

pub fn metadata_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes both networks to one checkpoint plus a `.meta` sidecar.
pub fn save_gan(path: &Path, g: &GeneratorState, d: &DiscriminatorState, seed: u64) -> Result<()> {
    let mut all = g.params.clone();
    all.merge(d.params.clone())?;
    checkpoint::save(path, &all)?;
    let mut meta = BTreeMap::new();
    meta.insert("n_identities".to_string(), g.arch.n_identities.to_string());
    meta.insert("latent_dim".to_string(), g.arch.latent_dim.to_string());
    meta.insert("resolution".to_string(), g.arch.resolution.to_string());
    meta.insert("base_channels".to_string(), g.arch.base_channels.to_string());
    meta.insert("seed".to_string(), seed.to_string());
    meta.insert(
        "identities".to_string(),
        g.identities.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
    );
    checkpoint::save_metadata(&metadata_path(path), &meta)
}

pub fn load_gan(path: &Path) -> Result<(GeneratorState, DiscriminatorState)> {
    let all = checkpoint::load(path)?;
    let meta = checkpoint::load_metadata(&metadata_path(path))?;
    let field = |k: &str| -> Result<usize> {
        meta.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not an integer")))
    };
    let arch = GanArchitecture {
        resolution: field("resolution")?,
        base_channels: field("base_channels")?,
        latent_dim: field("latent_dim")?,
        n_identities: field("n_identities")?,
    };
    let identities = meta
        .get("identities")
        .ok_or_else(|| Error::Checkpoint("metadata lacks `identities`".into()))?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Checkpoint("bad identity list".into()))?;
    let g = GeneratorState::from_params(arch.clone(), identities, all.subset(GEN_PREFIX))?;
    let d = DiscriminatorState::from_params(arch, all.subset(DISC_PREFIX))?;
    Ok((g, d))
}

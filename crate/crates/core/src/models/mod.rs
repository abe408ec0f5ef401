//! The four generative architectures, their losses, training loops and
//! sampling.
//!
//! A [`ModelParams`] owns two parameter groups, each with its own Adam
//! state: encoder and decoder for the VAE family, generator and critic for
//! the style-based GAN. Layer layouts are a pure function of architecture,
//! image size and hyperparameters, so checkpoints only store tensors.

mod features;
pub mod gradsuite;
mod layers;
pub mod losses;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};
use crate::Scalar;

pub use features::{FeatureExtractor, DEFAULT_FEATURE_SEED};
pub use layers::adain;
pub use losses::LatentCode;
pub use train::{train, StepRecord, TrainConfig, TrainingLog};

use layers::{Critic, Decoder, Encoder, ParamBuilder, StyleGenerator};

/// Image sides the layer plans are laid out for.
pub const SUPPORTED_SIZES: [usize; 2] = [16, 32];
/// Rows pushed through a network at once when sampling or reconstructing.
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    VanillaVae,
    DfcVae,
    IntroVae,
    StyleGan,
}

impl Architecture {
    pub const ALL: [Architecture; 4] =
        [Architecture::VanillaVae, Architecture::DfcVae, Architecture::IntroVae, Architecture::StyleGan];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::VanillaVae => "vanilla_vae",
            Architecture::DfcVae => "dfc_vae",
            Architecture::IntroVae => "intro_vae",
            Architecture::StyleGan => "style_gan",
        }
    }

    pub fn is_vae(self) -> bool {
        !matches!(self, Architecture::StyleGan)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// Accepts both `vanilla_vae` and `vanilla-vae` spellings.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == norm)
            .ok_or_else(|| Error::InvalidInput(format!("unknown architecture {s:?}")))
    }
}

/// Hyperparameters of one model. Defaults are desk-scale; see
/// [`Hyperparams::for_architecture`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Latent size for the VAEs, style size for the GAN.
    pub latent_dim: usize,
    /// Base channel count of every convolutional stack.
    pub width: usize,
    /// Weight on the pixel mean squared error in the vanilla VAE loss.
    pub lambda_pix: f64,
    /// Weight on the perceptual loss of the feature-consistent VAE.
    pub perceptual_weight: f64,
    pub feature_seed: u64,
    /// Hinge margin of the introspective VAE.
    pub m: f64,
    /// Weight on KL terms of the introspective VAE.
    pub alpha: f64,
    /// Weight on reconstruction terms of the introspective VAE.
    pub beta: f64,
    /// Also hinge the KL of reconstructions in the introspective encoder
    /// loss, as in the original introspective VAE.
    pub hinge_reconstructions: bool,
    pub lr: f64,
    /// Symmetric weight clip applied to the critic after every update.
    pub critic_clip: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
}

/// Pixel-error weight on the mean squared error, tuned for 16×16 images.
/// Much lower values let the posterior collapse onto the prior within a
/// few thousand steps; much higher ones leave the prior poorly covered.
pub const DEFAULT_LAMBDA_PIX: f64 = 160.0;

impl Hyperparams {
    pub fn for_architecture(arch: Architecture) -> Self {
        let base = Self {
            latent_dim: 8,
            width: 16,
            lambda_pix: DEFAULT_LAMBDA_PIX,
            perceptual_weight: 1e-2,
            feature_seed: DEFAULT_FEATURE_SEED,
            m: 1.0,
            alpha: 0.25,
            beta: 0.5,
            hinge_reconstructions: false,
            lr: 1e-4,
            critic_clip: Some(0.05),
            steps: 2000,
            batch_size: 64,
        };
        match arch {
            Architecture::VanillaVae | Architecture::DfcVae => base,
            Architecture::IntroVae => Self { latent_dim: 16, lr: 2e-4, steps: 3000, batch_size: 8, ..base },
            Architecture::StyleGan => Self { latent_dim: 32, steps: 3000, batch_size: 8, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_pix", self.lambda_pix),
            ("perceptual_weight", self.perceptual_weight),
            ("m", self.m),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lr", self.lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(c) = self.critic_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidInput(format!("critic_clip must be positive, got {c}")));
            }
        }
        if self.latent_dim == 0 || self.width < 2 || self.batch_size == 0 {
            return Err(Error::InvalidInput("latent_dim, width and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Named tensors trained together, with their optimizer state.
#[derive(Clone, Debug)]
pub struct ParamGroup<T> {
    pub name: String,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    pub adam: AdamState<T>,
}

impl<T: Scalar> ParamGroup<T> {
    fn new(name: &str, names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        let adam = AdamState::new(&tensors, AdamConfig::default());
        Self { name: name.into(), names, tensors, adam }
    }

    /// Loads every tensor into `g` as a leaf.
    pub fn leaves(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf_as(t, requires_grad)).collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Debug)]
enum Nets {
    Vae { enc: Encoder, dec: Decoder },
    Style { gen: StyleGenerator, critic: Critic },
}

/// Parameters, layout and optimizer state of one model.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    architecture: Architecture,
    image_size: usize,
    seed: u64,
    hyper: Hyperparams,
    groups: Vec<ParamGroup<T>>,
    nets: Nets,
    psi: Option<FeatureExtractor<T>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    image_size: usize,
    seed: u64,
    hyperparams: Hyperparams,
}

/// Builds a freshly initialized model with default hyperparameters.
pub fn build_model<T: Scalar>(arch: Architecture, image_size: usize, seed: u64) -> Result<ModelParams<T>> {
    ModelParams::build(arch, image_size, seed, Hyperparams::for_architecture(arch))
}

impl<T: Scalar> ModelParams<T> {
    pub fn build(arch: Architecture, image_size: usize, seed: u64, hyper: Hyperparams) -> Result<Self> {
        if !SUPPORTED_SIZES.contains(&image_size) {
            return Err(Error::InvalidInput(format!(
                "image size {image_size} unsupported; expected one of {SUPPORTED_SIZES:?}"
            )));
        }
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (first, second, nets) = if arch.is_vae() {
            let mut eb = ParamBuilder::new(&mut rng);
            let enc = Encoder::build(&mut eb, image_size, hyper.width, hyper.latent_dim);
            let first = ParamGroup::new("encoder", eb.names, eb.tensors);
            let mut db = ParamBuilder::new(&mut rng);
            let dec = Decoder::build(&mut db, image_size, hyper.width, hyper.latent_dim);
            let second = ParamGroup::new("decoder", db.names, db.tensors);
            (first, second, Nets::Vae { enc, dec })
        } else {
            let mut gb = ParamBuilder::new(&mut rng);
            let gen = StyleGenerator::build(&mut gb, image_size, hyper.width, hyper.latent_dim);
            let first = ParamGroup::new("generator", gb.names, gb.tensors);
            let mut cb = ParamBuilder::new(&mut rng);
            let critic = Critic::build(&mut cb, image_size, hyper.width);
            let second = ParamGroup::new("critic", cb.names, cb.tensors);
            (first, second, Nets::Style { gen, critic })
        };
        let psi = (arch == Architecture::DfcVae).then(|| FeatureExtractor::new(hyper.feature_seed));
        Ok(Self { architecture: arch, image_size, seed, hyper, groups: vec![first, second], nets, psi })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup<T>] {
        &mut self.groups
    }

    pub fn feature_extractor(&self) -> Option<&FeatureExtractor<T>> {
        self.psi.as_ref()
    }

    pub fn num_parameters(&self) -> usize {
        self.groups.iter().map(ParamGroup::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().all(ParamGroup::is_finite)
    }

    /// Index of the group that maps latents to images.
    pub fn generative_group(&self) -> usize {
        if self.architecture.is_vae() { 1 } else { 0 }
    }

    /// Latent (or style) vector length expected by the generative path.
    pub fn latent_dim(&self) -> usize {
        self.hyper.latent_dim
    }

    /// Encodes `[N,1,H,W]` with encoder variables `p`.
    pub fn encode(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<LatentCode> {
        match &self.nets {
            Nets::Vae { enc, .. } => {
                let (mu, logvar) = enc.forward(g, p, x)?;
                Ok(LatentCode { mu, logvar })
            }
            Nets::Style { .. } => Err(Error::Unsupported("the style-based GAN has no encoder".into())),
        }
    }

    /// Decodes `[N×d]` latents with decoder variables `p`.
    pub fn decode(&self, g: &mut Graph<T>, p: &[Var], z: Var) -> Result<Var> {
        match &self.nets {
            Nets::Vae { dec, .. } => dec.forward(g, p, z),
            Nets::Style { .. } => Err(Error::Unsupported("use generate for the style-based GAN".into())),
        }
    }

    /// Runs the style generator with variables `p`.
    pub fn generate(&self, g: &mut Graph<T>, p: &[Var], z: Var, noise: &[Var; 3]) -> Result<Var> {
        match &self.nets {
            Nets::Style { gen, .. } => gen.forward(g, p, z, noise),
            Nets::Vae { .. } => Err(Error::Unsupported("only the style-based GAN has a style generator".into())),
        }
    }

    /// Mapping network of the style generator.
    pub fn style_map(&self, g: &mut Graph<T>, p: &[Var], z: Var) -> Result<Var> {
        match &self.nets {
            Nets::Style { gen, .. } => gen.style_map(g, p, z),
            Nets::Vae { .. } => Err(Error::Unsupported("only the style-based GAN has a mapping network".into())),
        }
    }

    /// Scores `[N,1,H,W]` with critic variables `p`.
    pub fn critic(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        match &self.nets {
            Nets::Style { critic, .. } => critic.forward(g, p, x),
            Nets::Vae { .. } => Err(Error::Unsupported("VAE models have no critic".into())),
        }
    }

    /// Shapes of the per-layer noise maps for a generator batch of `n`.
    pub fn noise_shapes(&self, n: usize) -> Result<[Vec<usize>; 3]> {
        match &self.nets {
            Nets::Style { gen, .. } => Ok(gen.noise_shapes(n)),
            Nets::Vae { .. } => Err(Error::Unsupported("VAE models take no noise maps".into())),
        }
    }

    /// Draws `n` images from the unit-Gaussian prior.
    pub fn sample(&self, n: usize, seed: u64) -> Result<ImageSet<T>> {
        if n == 0 {
            return Err(Error::InvalidInput("sample count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = self.image_size;
        let mut pixels = Vec::with_capacity(n * size * size);
        let mut done = 0;
        while done < n {
            let b = EVAL_CHUNK.min(n - done);
            let mut g = Graph::new();
            let p = self.groups[self.generative_group()].leaves(&mut g, false);
            let z = g.constant(&[b, self.latent_dim()], gaussian(b * self.latent_dim(), &mut rng))?;
            let img = match &self.nets {
                Nets::Vae { dec, .. } => dec.forward(&mut g, &p, z)?,
                Nets::Style { gen, .. } => {
                    let noise = self.noise_vars(&mut g, gen.noise_shapes(b), &mut rng)?;
                    gen.forward(&mut g, &p, z, &noise)?
                }
            };
            pixels.extend_from_slice(g.value(img));
            done += b;
        }
        ImageSet::new(size, size, pixels)
    }

    fn noise_vars(&self, g: &mut Graph<T>, shapes: [Vec<usize>; 3], rng: &mut ChaCha8Rng) -> Result<[Var; 3]> {
        let mut out = Vec::with_capacity(3);
        for s in shapes {
            let n = s.iter().product();
            out.push(g.constant(&s, gaussian(n, rng))?);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Encodes and decodes every image. With `deterministic` the latent
    /// mean is decoded; otherwise a seeded draw from the posterior.
    pub fn reconstruct(&self, x: &ImageSet<T>, seed: u64, deterministic: bool) -> Result<ImageSet<T>> {
        let Nets::Vae { enc, dec } = &self.nets else {
            return Err(Error::Unsupported("the style-based GAN does not reconstruct images".into()));
        };
        self.check_images(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = self.image_size;
        let d = self.latent_dim();
        let mut pixels = Vec::with_capacity(x.pixels().len());
        for start in (0..x.len()).step_by(EVAL_CHUNK) {
            let b = EVAL_CHUNK.min(x.len() - start);
            let mut g = Graph::new();
            let pe = self.groups[0].leaves(&mut g, false);
            let pd = self.groups[1].leaves(&mut g, false);
            let chunk = x.pixels()[start * size * size..(start + b) * size * size].to_vec();
            let xv = g.constant(&[b, 1, size, size], chunk)?;
            let (mu, logvar) = enc.forward(&mut g, &pe, xv)?;
            let z = if deterministic {
                mu
            } else {
                let eps = g.constant(&[b, d], gaussian(b * d, &mut rng))?;
                losses::reparameterize(&mut g, LatentCode { mu, logvar }, eps)?
            };
            let out = dec.forward(&mut g, &pd, z)?;
            pixels.extend_from_slice(g.value(out));
        }
        ImageSet::new(size, size, pixels)
    }

    pub(crate) fn check_images(&self, x: &ImageSet<T>) -> Result<()> {
        if x.height() != self.image_size || x.width() != self.image_size {
            return Err(Error::Shape(format!(
                "model expects {0}×{0} images, got {1}×{2}",
                self.image_size,
                x.height(),
                x.width()
            )));
        }
        if x.is_empty() {
            return Err(Error::InvalidInput("empty image set".into()));
        }
        Ok(())
    }

    /// Writes a checkpoint manifest at `path` with the values beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            architecture: self.architecture,
            image_size: self.image_size,
            seed: self.seed,
            hyperparams: self.hyper.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(header)?);
        for grp in &self.groups {
            for (name, t) in grp.names.iter().zip(&grp.tensors) {
                ck.push_tensor(format!("{}/{name}", grp.name), t)?;
            }
            ck.push_adam(&grp.name, &grp.tensors, &grp.adam)?;
        }
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let h: Header = serde_json::from_value(ck.header().clone())?;
        let mut model = Self::build(h.architecture, h.image_size, h.seed, h.hyperparams)?;
        for grp in &mut model.groups {
            for (name, t) in grp.names.iter().zip(grp.tensors.iter_mut()) {
                let stored: Tensor<T> = ck.get(&format!("{}/{name}", grp.name))?;
                if stored.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "{}/{name}: stored shape {:?}, layout expects {:?}",
                        grp.name,
                        stored.shape(),
                        t.shape()
                    )));
                }
                *t = stored;
            }
            grp.adam = ck.get_adam(&grp.name, &grp.tensors)?;
        }
        if !model.is_finite() {
            return Err(Error::Format("checkpoint holds non-finite parameters".into()));
        }
        Ok(model)
    }
}

pub(crate) fn gaussian<T: Scalar>(n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v)
        })
        .collect()
}

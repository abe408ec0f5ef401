use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses;
use super::{gaussian, Architecture, ModelParams, ParamGroup};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::tensor::{adam_step, Graph, Var};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Loss terms recorded after one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

impl TrainingLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn series(&self, key: &str) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.losses.get(key).copied()).collect()
    }

    /// Means of the first and last `window` values of `key`.
    pub fn smoothed_ends(&self, key: &str, window: usize) -> Option<(f64, f64)> {
        let s = self.series(key);
        if s.is_empty() || window == 0 {
            return None;
        }
        let w = window.min(s.len());
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Some((mean(&s[..w]), mean(&s[s.len() - w..])))
    }
}

struct Batcher<'a, T> {
    data: &'a ImageSet<T>,
    batch: usize,
}

impl<T: Scalar> Batcher<'_, T> {
    /// Uniform draw with replacement, as a constant `[B,1,H,W]` input.
    fn draw(&self, g: &mut Graph<T>, rng: &mut ChaCha8Rng) -> Result<Var> {
        let (h, w) = (self.data.height(), self.data.width());
        let mut px = Vec::with_capacity(self.batch * h * w);
        for _ in 0..self.batch {
            let i = rng.random_range(0..self.data.len());
            px.extend_from_slice(self.data.image(i));
        }
        g.constant(&[self.batch, 1, h, w], px)
    }
}

fn apply_update<T: Scalar>(group: &mut ParamGroup<T>, g: &Graph<T>, vars: &[Var], lr: f64) -> Result<()> {
    for (v, t) in vars.iter().zip(group.tensors.iter_mut()) {
        t.zero_grad();
        g.accumulate_into(*v, t)?;
    }
    adam_step(&mut group.tensors, &mut group.adam, lr)?;
    for t in &mut group.tensors {
        t.zero_grad();
    }
    Ok(())
}

fn check_finite(step: usize, losses: &BTreeMap<String, f64>) -> Result<()> {
    if let Some((k, v)) = losses.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Diverged { step, detail: format!("{k} = {v}") });
    }
    Ok(())
}

/// Runs `cfg.steps` optimization steps of the model's training loop and
/// returns the per-step losses. `on_step` sees every record as it is made.
///
/// VAE and feature-consistent VAE minimize their loss jointly over encoder
/// and decoder. The introspective VAE alternates an encoder update and a
/// decoder update within each step; the style-based GAN alternates a
/// critic update and a generator update.
pub fn train<T: Scalar>(
    model: &mut ModelParams<T>,
    data: &ImageSet<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainingLog> {
    if cfg.steps == 0 {
        return Err(Error::InvalidInput("steps must be at least 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    model.check_images(data)?;
    data.validate_unit_range()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batcher = Batcher { data, batch: cfg.batch_size };
    let mut log = TrainingLog { records: Vec::with_capacity(cfg.steps) };
    for step in 0..cfg.steps {
        let losses = match model.architecture() {
            Architecture::VanillaVae | Architecture::DfcVae => vae_step(model, &batcher, &mut rng)?,
            Architecture::IntroVae => intro_step(model, &batcher, &mut rng)?,
            Architecture::StyleGan => style_step(model, &batcher, &mut rng)?,
        };
        check_finite(step, &losses)?;
        let rec = StepRecord { step, losses };
        on_step(&rec);
        log.records.push(rec);
    }
    if !model.is_finite() {
        return Err(Error::Diverged { step: cfg.steps - 1, detail: "non-finite parameters".into() });
    }
    Ok(log)
}

fn vae_step<T: Scalar>(
    model: &mut ModelParams<T>,
    batcher: &Batcher<'_, T>,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    let hp = model.hyperparams().clone();
    let mut g = Graph::new();
    let x = batcher.draw(&mut g, rng)?;
    let pe = model.groups()[0].leaves(&mut g, true);
    let pd = model.groups()[1].leaves(&mut g, true);
    let code = model.encode(&mut g, &pe, x)?;
    let b = batcher.batch;
    let eps = g.constant(&[b, hp.latent_dim], gaussian(b * hp.latent_dim, rng))?;
    let z = losses::reparameterize(&mut g, code, eps)?;
    let x_rec = model.decode(&mut g, &pd, z)?;
    let kl = losses::kl_gaussian(&mut g, code)?;
    let mse = losses::mse(&mut g, x, x_rec)?;
    let mut out = BTreeMap::new();
    let loss = match model.feature_extractor() {
        Some(psi) => {
            let perc = losses::perceptual_loss(&mut g, x, x_rec, psi)?;
            out.insert("perceptual".into(), g.item(perc).as_f64());
            let w = g.scale(perc, T::of(hp.perceptual_weight));
            g.add(kl, w)?
        }
        None => {
            let w = g.scale(mse, T::of(hp.lambda_pix));
            g.add(kl, w)?
        }
    };
    out.insert("loss".into(), g.item(loss).as_f64());
    out.insert("kl".into(), g.item(kl).as_f64());
    out.insert("mse".into(), g.item(mse).as_f64());
    if !g.item(loss).is_finite() {
        return Ok(out);
    }
    g.backward(loss)?;
    let [enc, dec] = model.groups_mut() else { unreachable!("two groups") };
    apply_update(enc, &g, &pe, hp.lr)?;
    apply_update(dec, &g, &pd, hp.lr)?;
    Ok(out)
}

fn intro_step<T: Scalar>(
    model: &mut ModelParams<T>,
    batcher: &Batcher<'_, T>,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    let hp = model.hyperparams().clone();
    let (b, d) = (batcher.batch, hp.latent_dim);
    let mut out = BTreeMap::new();

    // Encoder update; decoder outputs enter as functions of frozen weights.
    let mut g = Graph::new();
    let x = batcher.draw(&mut g, rng)?;
    let x_data = g.value(x).to_vec();
    // Shared by both halves of the step.
    let eps_draw: Vec<T> = gaussian(b * d, rng);
    let prior_draw: Vec<T> = gaussian(b * d, rng);
    let pe = model.groups()[0].leaves(&mut g, true);
    let pd = model.groups()[1].leaves(&mut g, false);
    let code_real = model.encode(&mut g, &pe, x)?;
    let eps = g.constant(&[b, d], eps_draw.clone())?;
    let z = losses::reparameterize(&mut g, code_real, eps)?;
    // The reconstruction is an encoder function here, so the rec term
    // trains the encoder too.
    let x_rec = model.decode(&mut g, &pd, z)?;
    let zp = g.constant(&[b, d], prior_draw.clone())?;
    let x_gen = model.decode(&mut g, &pd, zp)?;
    let code_gen = model.encode(&mut g, &pe, x_gen)?;
    let mut loss_e = losses::introvae_encoder_loss(&mut g, x, x_rec, code_real, code_gen, hp.m, hp.alpha, hp.beta)?;
    if hp.hinge_reconstructions {
        // Detach the reconstruction so only the encoder sees this term.
        let shape = g.shape(x_rec).to_vec();
        let xr_const = g.constant(&shape, g.value(x_rec).to_vec())?;
        let code_rec = model.encode(&mut g, &pe, xr_const)?;
        let kl_rec = losses::kl_per_sample(&mut g, code_rec)?;
        let hinge = losses::kl_hinge(&mut g, kl_rec, hp.m);
        let hinge = g.scale(hinge, T::of(hp.alpha));
        loss_e = g.add(loss_e, hinge)?;
    }
    let kl_gen_e = {
        let rows = losses::kl_per_sample(&mut g, code_gen)?;
        g.value(rows).iter().map(|v| v.as_f64()).sum::<f64>() / b as f64
    };
    out.insert("loss_e".into(), g.item(loss_e).as_f64());
    out.insert("kl_fake".into(), kl_gen_e);
    if !g.item(loss_e).is_finite() {
        return Ok(out);
    }
    g.backward(loss_e)?;
    apply_update(&mut model.groups_mut()[0], &g, &pe, hp.lr)?;

    // Generator update through the refreshed, frozen encoder.
    let mut g = Graph::new();
    let x = g.constant(&[b, 1, model.image_size(), model.image_size()], x_data)?;
    let pe = model.groups()[0].leaves(&mut g, false);
    let pd = model.groups()[1].leaves(&mut g, true);
    let code_real = model.encode(&mut g, &pe, x)?;
    let eps = g.constant(&[b, d], eps_draw)?;
    let z = losses::reparameterize(&mut g, code_real, eps)?;
    let x_rec = model.decode(&mut g, &pd, z)?;
    let zp = g.constant(&[b, d], prior_draw)?;
    let x_gen = model.decode(&mut g, &pd, zp)?;
    let code_gen = model.encode(&mut g, &pe, x_gen)?;
    let mut loss_g = losses::introvae_generator_loss(&mut g, x, x_rec, code_gen, hp.alpha, hp.beta)?;
    if hp.hinge_reconstructions {
        let code_rec = model.encode(&mut g, &pe, x_rec)?;
        let kl_rec = losses::kl_gaussian(&mut g, code_rec)?;
        let kl_rec = g.scale(kl_rec, T::of(hp.alpha));
        loss_g = g.add(loss_g, kl_rec)?;
    }
    let kl_real = losses::kl_gaussian(&mut g, code_real)?;
    let mse = losses::mse(&mut g, x, x_rec)?;
    out.insert("loss_g".into(), g.item(loss_g).as_f64());
    out.insert("kl_real".into(), g.item(kl_real).as_f64());
    out.insert("mse".into(), g.item(mse).as_f64());
    if !g.item(loss_g).is_finite() {
        return Ok(out);
    }
    g.backward(loss_g)?;
    apply_update(&mut model.groups_mut()[1], &g, &pd, hp.lr)?;
    Ok(out)
}

fn style_step<T: Scalar>(
    model: &mut ModelParams<T>,
    batcher: &Batcher<'_, T>,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    let hp = model.hyperparams().clone();
    let (b, d) = (batcher.batch, hp.latent_dim);
    let mut out = BTreeMap::new();

    // Critic update on real images and frozen-generator fakes.
    let mut g = Graph::new();
    let x = batcher.draw(&mut g, rng)?;
    let pg = model.groups()[0].leaves(&mut g, false);
    let pc = model.groups()[1].leaves(&mut g, true);
    let fake = generate_batch(model, &mut g, &pg, b, d, rng)?;
    let d_real = model.critic(&mut g, &pc, x)?;
    let d_fake = model.critic(&mut g, &pc, fake)?;
    let (loss_d, _) = losses::wgan_losses(&mut g, d_real, d_fake)?;
    out.insert("loss_d".into(), g.item(loss_d).as_f64());
    if !g.item(loss_d).is_finite() {
        return Ok(out);
    }
    g.backward(loss_d)?;
    let critic = &mut model.groups_mut()[1];
    apply_update(critic, &g, &pc, hp.lr)?;
    if let Some(c) = hp.critic_clip {
        let c = T::of(c);
        for t in &mut critic.tensors {
            t.map_inplace(|v| v.max(-c).min(c));
        }
    }

    // Generator update against the frozen critic.
    let mut g = Graph::new();
    let pg = model.groups()[0].leaves(&mut g, true);
    let pc = model.groups()[1].leaves(&mut g, false);
    let fake = generate_batch(model, &mut g, &pg, b, d, rng)?;
    let d_fake = model.critic(&mut g, &pc, fake)?;
    let loss_g = g.mean(d_fake);
    out.insert("loss_g".into(), g.item(loss_g).as_f64());
    if !g.item(loss_g).is_finite() {
        return Ok(out);
    }
    g.backward(loss_g)?;
    apply_update(&mut model.groups_mut()[0], &g, &pg, hp.lr)?;
    Ok(out)
}

fn generate_batch<T: Scalar>(
    model: &ModelParams<T>,
    g: &mut Graph<T>,
    pg: &[Var],
    b: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let z = g.constant(&[b, d], gaussian(b * d, rng))?;
    let shapes = model.noise_shapes(b)?;
    let mut noise = Vec::with_capacity(3);
    for s in shapes {
        let n = s.iter().product();
        noise.push(g.constant(&s, gaussian(n, rng))?);
    }
    model.generate(g, pg, z, &[noise[0], noise[1], noise[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom_generate;
    use crate::models::build_model;

    #[test]
    fn zero_steps_is_rejected() {
        let mut m = build_model::<f64>(Architecture::VanillaVae, 16, 0).unwrap();
        let data = phantom_generate::<f64>(4, 16, 0).unwrap();
        let cfg = TrainConfig { steps: 0, batch_size: 2, seed: 0 };
        assert!(matches!(train(&mut m, &data, &cfg, |_| {}), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn every_architecture_takes_steps_deterministically() {
        let data = phantom_generate::<f64>(8, 16, 1).unwrap();
        for a in Architecture::ALL {
            let run = || {
                let mut m = build_model::<f64>(a, 16, 2).unwrap();
                let cfg = TrainConfig { steps: 3, batch_size: 4, seed: 5 };
                let log = train(&mut m, &data, &cfg, |_| {}).unwrap();
                (log, m.groups()[0].tensors.clone(), m.groups()[1].tensors.clone())
            };
            let (l1, a1, b1) = run();
            let (l2, a2, b2) = run();
            assert_eq!(l1, l2, "{a}");
            assert_eq!((a1, b1), (a2, b2), "{a}");
            assert_eq!(l1.records.len(), 3);
        }
    }

    #[test]
    fn critic_weights_stay_clipped() {
        let data = phantom_generate::<f64>(8, 16, 1).unwrap();
        let mut m = build_model::<f64>(Architecture::StyleGan, 16, 2).unwrap();
        let cfg = TrainConfig { steps: 2, batch_size: 4, seed: 5 };
        train(&mut m, &data, &cfg, |_| {}).unwrap();
        for t in &m.groups()[1].tensors {
            assert!(t.data().iter().all(|v| v.abs() <= 0.05));
        }
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let mut m = build_model::<f64>(Architecture::VanillaVae, 16, 0).unwrap();
        let data = phantom_generate::<f64>(4, 32, 0).unwrap();
        let cfg = TrainConfig { steps: 1, batch_size: 2, seed: 0 };
        assert!(train(&mut m, &data, &cfg, |_| {}).is_err());
    }
}

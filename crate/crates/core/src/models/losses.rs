//! Loss terms as graph operations. Latent codes are `[N×d]` pairs of
//! means and log-variances; every batched loss is averaged over the batch.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Var};
use crate::Scalar;

use super::features::FeatureExtractor;

/// Encoder output for a batch: rows of `μ` and `log σ²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentCode {
    pub mu: Var,
    pub logvar: Var,
}

fn check_code<T: Scalar>(g: &Graph<T>, c: LatentCode) -> Result<(usize, usize)> {
    let s = g.shape(c.mu);
    if s.len() != 2 || g.shape(c.logvar) != s {
        return Err(shape_err(format!(
            "latent code shapes {:?} / {:?}",
            g.shape(c.mu),
            g.shape(c.logvar)
        )));
    }
    Ok((s[0], s[1]))
}

/// Per-row `½·Σ(μ² + σ² − log σ² − 1)`, shape `[N]`.
pub fn kl_per_sample<T: Scalar>(g: &mut Graph<T>, c: LatentCode) -> Result<Var> {
    let (_, d) = check_code(g, c)?;
    let mu2 = g.square(c.mu);
    let var = g.exp(c.logvar);
    let s = g.add(mu2, var)?;
    let s = g.sub(s, c.logvar)?;
    let rows = g.sum_rows(s)?;
    let rows = g.add_scalar(rows, -T::of(d as f64));
    Ok(g.scale(rows, T::of(0.5)))
}

/// KL divergence of `N(μ, σ²)` from the unit Gaussian, averaged over rows.
pub fn kl_gaussian<T: Scalar>(g: &mut Graph<T>, c: LatentCode) -> Result<Var> {
    let rows = kl_per_sample(g, c)?;
    Ok(g.mean(rows))
}

/// Closed-form KL for a single code, outside any graph.
pub fn kl_gaussian_value(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// `z = μ + ε ⊙ exp(½·log σ²)`; `eps` is treated as a constant.
pub fn reparameterize<T: Scalar>(g: &mut Graph<T>, c: LatentCode, eps: Var) -> Result<Var> {
    check_code(g, c)?;
    if g.shape(eps) != g.shape(c.mu) {
        return Err(shape_err(format!("noise {:?} for code {:?}", g.shape(eps), g.shape(c.mu))));
    }
    let half = g.scale(c.logvar, T::of(0.5));
    let sigma = g.exp(half);
    let noise = g.mul(eps, sigma)?;
    g.add(c.mu, noise)
}

/// Mean squared error over every element.
pub fn mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// `KL + λ·MSE(x, x_rec)`
pub fn vae_loss<T: Scalar>(g: &mut Graph<T>, x: Var, x_rec: Var, c: LatentCode, lambda_pix: f64) -> Result<Var> {
    let kl = kl_gaussian(g, c)?;
    let rec = mse(g, x, x_rec)?;
    let rec = g.scale(rec, T::of(lambda_pix));
    g.add(kl, rec)
}

/// Feature-space reconstruction loss: for each tap, half the mean squared
/// difference of the activations (`1/(2·C·H·W)` per image), averaged over
/// the batch and summed over taps.
pub fn perceptual_loss<T: Scalar>(g: &mut Graph<T>, x: Var, x_rec: Var, psi: &FeatureExtractor<T>) -> Result<Var> {
    if g.shape(x) != g.shape(x_rec) {
        return Err(shape_err(format!("{:?} vs {:?}", g.shape(x), g.shape(x_rec))));
    }
    let fx = psi.features(g, x)?;
    let fr = psi.features(g, x_rec)?;
    let mut total: Option<Var> = None;
    for (a, b) in fx.into_iter().zip(fr) {
        let term = mse(g, a, b)?;
        let term = g.scale(term, T::of(0.5));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has taps"))
}

/// `mean(max(0, m − kl))` over rows of `kl`.
pub fn kl_hinge<T: Scalar>(g: &mut Graph<T>, kl_rows: Var, m: f64) -> Var {
    let neg = g.scale(kl_rows, -T::one());
    let margin = g.add_scalar(neg, T::of(m));
    let active = g.relu(margin);
    g.mean(active)
}

/// Encoder objective of the introspective VAE:
/// `α·KL(E(x)) + α·[m − KL(E(x_gen))]⁺ + β·MSE(x, x_rec)`.
/// The hinge is applied per generated image.
#[allow(clippy::too_many_arguments)]
pub fn introvae_encoder_loss<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    x_rec: Var,
    code_real: LatentCode,
    code_gen: LatentCode,
    m: f64,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    if !(m > 0.0) {
        return Err(Error::InvalidInput(format!("margin m must be positive, got {m}")));
    }
    let kl_real = kl_gaussian(g, code_real)?;
    let kl_gen = kl_per_sample(g, code_gen)?;
    let hinge = kl_hinge(g, kl_gen, m);
    let rec = mse(g, x, x_rec)?;
    let kl_terms = g.add(kl_real, hinge)?;
    let kl_terms = g.scale(kl_terms, T::of(alpha));
    let rec = g.scale(rec, T::of(beta));
    g.add(kl_terms, rec)
}

/// Generator objective of the introspective VAE:
/// `α·KL(E(G(z))) + β·MSE(x, x_rec)`.
pub fn introvae_generator_loss<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    x_rec: Var,
    code_gen: LatentCode,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let kl = kl_gaussian(g, code_gen)?;
    let kl = g.scale(kl, T::of(alpha));
    let rec = mse(g, x, x_rec)?;
    let rec = g.scale(rec, T::of(beta));
    g.add(kl, rec)
}

/// `mean(log d_real) + mean(log(1 − d_fake))` for discriminator outputs
/// strictly inside (0, 1).
pub fn gan_minmax_value<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    for v in [d_real, d_fake] {
        if let Some(p) = g.value(v).iter().find(|p| !(**p > T::zero() && **p < T::one())) {
            return Err(Error::Domain(format!("discriminator output {p} outside (0, 1)")));
        }
    }
    let lr = g.ln(d_real)?;
    let real = g.mean(lr);
    let neg = g.scale(d_fake, -T::one());
    let comp = g.add_scalar(neg, T::one());
    let lf = g.ln(comp)?;
    let fake = g.mean(lf);
    g.add(real, fake)
}

/// Critic and generator losses with the sign convention
/// `loss_D = mean(d_real) − mean(d_fake)`, `loss_G = mean(d_fake)`, both
/// minimized.
pub fn wgan_losses<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    let real = g.mean(d_real);
    let fake = g.mean(d_fake);
    let loss_d = g.sub(real, fake)?;
    Ok((loss_d, fake))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(g: &mut Graph<f64>, mu: &[f64], lv: &[f64]) -> LatentCode {
        let d = mu.len();
        LatentCode {
            mu: g.variable(&[1, d], mu.to_vec()).unwrap(),
            logvar: g.variable(&[1, d], lv.to_vec()).unwrap(),
        }
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let c = code(&mut g, &[0.0, 0.0], &[0.0, 0.0]);
        let kl = kl_gaussian(&mut g, c).unwrap();
        assert_eq!(g.item(kl), 0.0);
        let c = code(&mut g, &[1.0], &[0.0]);
        let kl = kl_gaussian(&mut g, c).unwrap();
        assert!((g.item(kl) - 0.5).abs() < 1e-15);
        let c = code(&mut g, &[0.0], &[4f64.ln()]);
        let kl = kl_gaussian(&mut g, c).unwrap();
        assert!((g.item(kl) - 0.5 * (4.0 - 4f64.ln() - 1.0)).abs() < 1e-12);
        assert!((g.item(kl) - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn reparameterize_examples() {
        let mut g = Graph::new();
        let c = code(&mut g, &[1.0, -2.0], &[0.3, 0.0]);
        let zero = g.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        let z = reparameterize(&mut g, c, zero).unwrap();
        assert_eq!(g.value(z), &[1.0, -2.0]);
        let c = code(&mut g, &[1.0, -2.0], &[0.0, 0.0]);
        let e = g.constant(&[1, 2], vec![0.5, 0.25]).unwrap();
        let z = reparameterize(&mut g, c, e).unwrap();
        assert_eq!(g.value(z), &[1.5, -1.75]);
    }

    #[test]
    fn vae_loss_examples() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let r = g.constant(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let c = code(&mut g, &[0.0], &[0.0]);
        let l = vae_loss(&mut g, x, r, c, 1.0).unwrap();
        assert_eq!(g.item(l), 1.0);
        let l = vae_loss(&mut g, x, x, c, 1.0).unwrap();
        assert_eq!(g.item(l), 0.0);
        let bad = g.constant(&[1, 1, 1, 4], vec![0.0; 4]).unwrap();
        assert!(vae_loss(&mut g, x, bad, c, 1.0).is_err());
    }

    #[test]
    fn gan_examples() {
        let mut g = Graph::new();
        let half = g.constant(&[2], vec![0.5, 0.5]).unwrap();
        let v = gan_minmax_value(&mut g, half, half).unwrap();
        assert!((g.item(v) - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let one = g.constant(&[1], vec![1.0]).unwrap();
        assert!(matches!(gan_minmax_value(&mut g, half, one), Err(Error::Domain(_))));

        let a = g.constant(&[1], vec![1.0]).unwrap();
        let b = g.constant(&[1], vec![3.0]).unwrap();
        let (ld, lg) = wgan_losses(&mut g, a, b).unwrap();
        assert_eq!(g.item(ld), -2.0);
        assert_eq!(g.item(lg), 3.0);
        let (ld2, _) = wgan_losses(&mut g, b, a).unwrap();
        assert_eq!(g.item(ld2), 2.0);
    }

    #[test]
    fn hinge_boundary_is_zero() {
        let mut g = Graph::<f64>::new();
        let k = g.variable(&[3], vec![1.0, 2.0, 0.5]).unwrap();
        let h = kl_hinge(&mut g, k, 1.0);
        // only the third row (0.5 < 1) is active
        assert!((g.item(h) - 0.5f64 / 3.0).abs() < 1e-15);
        let k = g.variable(&[1], vec![1.0]).unwrap();
        let h = kl_hinge(&mut g, k, 1.0);
        assert_eq!(g.item(h), 0.0);
    }
}

use genforge::models::losses::{
    introvae_encoder_loss, introvae_generator_loss, kl_gaussian, kl_gaussian_value, kl_hinge, kl_per_sample,
    reparameterize, vae_loss, wgan_losses, LatentCode,
};
use genforge::tensor::Graph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `log q(x) − log p(x)` for `q = N(μ, σ²)`, `p = N(0, 1)`.
fn log_ratio(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * var.ln() - (x - mu).powi(2) / (2.0 * var) + 0.5 * x * x
}

fn density(x: f64, mu: f64, var: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Composite Simpson integral of `q·log(q/p)` over μ ± 12σ.
fn kl_by_quadrature(mu: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    let (a, b) = (mu - 12.0 * sd, mu + 12.0 * sd);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| density(x, mu, var) * log_ratio(x, mu, var);
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

fn kl_by_monte_carlo(mu: f64, var: f64, draws: usize, rng: &mut ChaCha8Rng) -> f64 {
    let sd = var.sqrt();
    let mut acc = 0.0;
    for _ in 0..draws {
        let e: f64 = StandardNormal.sample(rng);
        acc += log_ratio(mu + sd * e, mu, var);
    }
    acc / draws as f64
}

fn graph_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    let mut g = Graph::new();
    let d = mu.len();
    let c = LatentCode {
        mu: g.constant(&[1, d], mu.to_vec()).unwrap(),
        logvar: g.constant(&[1, d], logvar.to_vec()).unwrap(),
    };
    let kl = kl_gaussian(&mut g, c).unwrap();
    g.item(kl)
}

#[test]
fn kl_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let mu = rng.random_range(-3.0..3.0);
        let var: f64 = rng.random_range(0.05..5.0);
        let oracle = kl_by_quadrature(mu, var);
        let got = graph_kl(&[mu], &[var.ln()]);
        assert!((got - oracle).abs() < 1e-6, "mu={mu} var={var}: {got} vs {oracle}");
        assert!((kl_gaussian_value(&[mu], &[var.ln()]) - oracle).abs() < 1e-6);
    }
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let mu = rng.random_range(-1.5..1.5);
        let var: f64 = rng.random_range(0.2..2.5);
        let mc = kl_by_monte_carlo(mu, var, 1_000_000, &mut rng);
        let got = graph_kl(&[mu], &[var.ln()]);
        assert!((got - mc).abs() < 1e-2, "mu={mu} var={var}: {got} vs {mc}");
    }
}

#[test]
fn kl_sums_over_dimensions_and_averages_over_rows() {
    let mu = [0.3, -1.2, 0.0];
    let lv = [0.1, -0.5, 0.7];
    let per_dim: f64 = mu.iter().zip(&lv).map(|(m, l)| kl_by_quadrature(*m, f64::exp(*l))).sum();
    assert!((graph_kl(&mu, &lv) - per_dim).abs() < 1e-6);

    let mut g = Graph::new();
    let c = LatentCode {
        mu: g.constant(&[2, 1], vec![1.0, 0.0]).unwrap(),
        logvar: g.constant(&[2, 1], vec![0.0, 0.0]).unwrap(),
    };
    let rows = kl_per_sample(&mut g, c).unwrap();
    assert_eq!(g.value(rows), &[0.5, 0.0]);
    let mean = kl_gaussian(&mut g, c).unwrap();
    assert_eq!(g.item(mean), 0.25);
}

#[test]
fn reparameterize_moments_converge() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 200_000;
    let (mu, logvar) = (0.7, -0.4f64);
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut g = Graph::new();
    let c = LatentCode {
        mu: g.constant(&[n, 1], vec![mu; n]).unwrap(),
        logvar: g.constant(&[n, 1], vec![logvar; n]).unwrap(),
    };
    let e = g.constant(&[n, 1], eps).unwrap();
    let z = reparameterize(&mut g, c, e).unwrap();
    let zs = g.value(z);
    let mean = zs.iter().sum::<f64>() / n as f64;
    let var = zs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = logvar.exp().sqrt();
    // four standard errors of each estimator
    assert!((mean - mu).abs() < 4.0 * sd / (n as f64).sqrt());
    assert!((var - logvar.exp()).abs() < 4.0 * logvar.exp() * (2.0 / n as f64).sqrt());
}

#[test]
fn inactive_hinge_has_zero_gradient() {
    let mut g = Graph::new();
    let mu = g.variable(&[3, 2], vec![2.0, -1.5, 1.8, 2.2, -2.5, 1.0]).unwrap();
    let logvar = g.variable(&[3, 2], vec![0.2, -0.1, 0.3, 0.0, 0.1, -0.2]).unwrap();
    let code = LatentCode { mu, logvar };
    let rows = kl_per_sample(&mut g, code).unwrap();
    let m = 1.0;
    assert!(g.value(rows).iter().all(|k| *k > m + 1e-3));
    let h = kl_hinge(&mut g, rows, m);
    assert_eq!(g.item(h), 0.0);
    g.backward(h).unwrap();
    assert!(g.grad(mu).unwrap().iter().all(|v| *v == 0.0));
    assert!(g.grad(logvar).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn wgan_generator_gradient_is_negated_critic_fake_gradient() {
    let mut g = Graph::new();
    let real = g.variable(&[4, 1], vec![0.3, -0.2, 1.1, 0.0]).unwrap();
    let fake = g.variable(&[4, 1], vec![-0.7, 0.4, 0.9, 2.0]).unwrap();
    let (ld, _) = wgan_losses(&mut g, real, fake).unwrap();
    g.backward(ld).unwrap();
    let d_fake = g.grad(fake).unwrap().to_vec();

    let mut g = Graph::new();
    let real = g.variable(&[4, 1], vec![0.3, -0.2, 1.1, 0.0]).unwrap();
    let fake = g.variable(&[4, 1], vec![-0.7, 0.4, 0.9, 2.0]).unwrap();
    let (_, lg) = wgan_losses(&mut g, real, fake).unwrap();
    g.backward(lg).unwrap();
    for (a, b) in g.grad(fake).unwrap().iter().zip(&d_fake) {
        assert_eq!(*a, -*b);
    }
}

fn permute(v: &[f64], perm: &[usize], ppi: usize) -> Vec<f64> {
    v.chunks(ppi).flat_map(|img| perm.iter().map(|&p| img[p])).collect()
}

fn perm_strategy(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_prior(
        mu in prop::collection::vec(-4.0f64..4.0, 1..6),
        lv in prop::collection::vec(-4.0f64..4.0, 6),
    ) {
        let lv = &lv[..mu.len()];
        let k = graph_kl(&mu, lv);
        prop_assert!(k >= 0.0);
        let at_prior = mu.iter().chain(lv).all(|v| *v == 0.0);
        prop_assert_eq!(k == 0.0, at_prior);
        prop_assert_eq!(graph_kl(&vec![0.0; mu.len()], &vec![0.0; mu.len()]), 0.0);
    }

    #[test]
    fn pixel_losses_ignore_common_pixel_permutations(
        x in prop::collection::vec(0.0f64..1.0, 2 * 9),
        r in prop::collection::vec(0.0f64..1.0, 2 * 9),
        code in prop::collection::vec(-1.0f64..1.0, 8),
        perm in perm_strategy(9),
    ) {
        let eval = |xs: &[f64], rs: &[f64]| {
            let mut g = Graph::new();
            let xv = g.constant(&[2, 1, 3, 3], xs.to_vec()).unwrap();
            let rv = g.constant(&[2, 1, 3, 3], rs.to_vec()).unwrap();
            let real = LatentCode { mu: g.constant(&[2, 1], code[0..2].to_vec()).unwrap(), logvar: g.constant(&[2, 1], code[2..4].to_vec()).unwrap() };
            let fake = LatentCode { mu: g.constant(&[2, 1], code[4..6].to_vec()).unwrap(), logvar: g.constant(&[2, 1], code[6..8].to_vec()).unwrap() };
            let a = vae_loss(&mut g, xv, rv, real, 409.6).unwrap();
            let b = introvae_encoder_loss(&mut g, xv, rv, real, fake, 1.0, 0.25, 0.5).unwrap();
            let c = introvae_generator_loss(&mut g, xv, rv, fake, 0.25, 0.5).unwrap();
            [g.item(a), g.item(b), g.item(c)]
        };
        let base = eval(&x, &r);
        let moved = eval(&permute(&x, &perm, 9), &permute(&r, &perm, 9));
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

//! Finite-difference checks of every differentiable primitive and every
//! loss. Shared by the `gradcheck` command and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::losses::{self, LatentCode};
use super::{adain, Architecture, FeatureExtractor, Hyperparams, ModelParams};
use crate::error::Result;
use crate::tensor::{grad_check_many, Graph, PlaneKind, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Inputs to piecewise-linear operations keep at least this distance from
/// their kinks.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Reduces `y` to a scalar through a fixed random weighting, so every
/// output element contributes with a distinct coefficient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let n = g.value(y).len();
    let w = g.constant(&shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn code(vars: &[Var]) -> LatentCode {
    LatentCode { mu: vars[0], logvar: vars[1] }
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut v: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),* $(,)?], $f:expr) => {
            v.push(Case { name: $name, inputs: vec![$($input),*], f: Box::new($f) })
        };
    }

    // Primitives.
    case!("matmul", [uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[3, 2], -1.0, 1.0)], |g, x| {
        let y = g.matmul(x[0], x[1])?;
        project(g, y, 1)
    });
    case!("add_bias", [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)], |g, x| {
        let y = g.add_bias(x[0], x[1])?;
        let y = g.square(y);
        project(g, y, 2)
    });
    case!("add_channel_bias", [uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)], |g, x| {
        let y = g.add_channel_bias(x[0], x[1])?;
        let y = g.square(y);
        project(g, y, 3)
    });
    case!("add_sub_mul", [uniform(r, &[5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)], |g, x| {
        let a = g.add(x[0], x[1])?;
        let s = g.sub(x[0], x[1])?;
        let m = g.mul(a, s)?;
        let m = g.mul(m, x[1])?;
        project(g, m, 4)
    });
    case!("scale_add_scalar", [uniform(r, &[4], -1.0, 1.0)], |g, x| {
        let y = g.scale(x[0], -1.7);
        let y = g.add_scalar(y, 0.3);
        let y = g.square(y);
        project(g, y, 5)
    });
    case!("mul_scalar_var", [uniform(r, &[6], -1.0, 1.0), uniform(r, &[1], 0.2, 1.0)], |g, x| {
        let y = g.mul_scalar_var(x[0], x[1])?;
        project(g, y, 6)
    });
    case!("exp", [uniform(r, &[5], -1.0, 1.0)], |g, x| {
        let y = g.exp(x[0]);
        project(g, y, 7)
    });
    case!("ln", [uniform(r, &[5], 0.3, 2.0)], |g, x| {
        let y = g.ln(x[0])?;
        project(g, y, 8)
    });
    case!("square", [uniform(r, &[5], -1.0, 1.0)], |g, x| {
        let y = g.square(x[0]);
        project(g, y, 9)
    });
    case!("sigmoid", [uniform(r, &[5], -3.0, 3.0)], |g, x| {
        let y = g.sigmoid(x[0]);
        project(g, y, 10)
    });
    case!("leaky_relu", [away_from_zero(r, &[8], KINK_MARGIN.max(0.05), 1.0)], |g, x| {
        let y = g.leaky_relu(x[0], 0.2);
        let y = g.square(y);
        project(g, y, 11)
    });
    case!("relu", [away_from_zero(r, &[8], 0.05, 1.0)], |g, x| {
        let y = g.relu(x[0]);
        let y = g.square(y);
        project(g, y, 12)
    });
    case!("sum_mean", [uniform(r, &[3, 4], -1.0, 1.0)], |g, x| {
        let sq = g.square(x[0]);
        let s = g.sum(sq);
        let m = g.mean(x[0]);
        let m = g.square(m);
        g.add(s, m)
    });
    case!("sum_rows", [uniform(r, &[3, 4], -1.0, 1.0)], |g, x| {
        let y = g.sum_rows(x[0])?;
        let y = g.square(y);
        project(g, y, 13)
    });
    case!("reshape_broadcast", [uniform(r, &[2, 3], -1.0, 1.0)], |g, x| {
        let y = g.reshape(x[0], &[3, 2])?;
        let y = g.broadcast_batch(y, 3)?;
        let y = g.square(y);
        project(g, y, 14)
    });
    case!("conv2d", [uniform(r, &[2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0)], |g, x| {
        let y = g.conv2d(x[0], x[1], 1)?;
        project(g, y, 15)
    });
    case!("conv2d_batched_stride2", [uniform(r, &[2, 2, 6, 6], -1.0, 1.0), uniform(r, &[3, 2, 4, 4], -1.0, 1.0)], |g, x| {
        let y = g.conv2d(x[0], x[1], 2)?;
        let y = g.square(y);
        project(g, y, 16)
    });
    case!("upsample_nn", [uniform(r, &[2, 2, 3, 3], -1.0, 1.0)], |g, x| {
        let y = g.upsample_nn(x[0], 2)?;
        let y = g.square(y);
        project(g, y, 17)
    });
    for (name, kind, lo) in [
        ("plane_add", PlaneKind::Add, -1.0),
        ("plane_sub", PlaneKind::Sub, -1.0),
        ("plane_mul", PlaneKind::Mul, -1.0),
        ("plane_div", PlaneKind::Div, 0.5),
    ] {
        case!(name, [uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[2, 3], lo, 1.5)], move |g, x| {
            let y = g.plane_op(x[0], x[1], kind)?;
            let y = g.square(y);
            project(g, y, 18)
        });
    }
    case!("channel_stats", [uniform(r, &[3, 3, 4], -1.0, 1.0)], |g, x| {
        let (mu, sigma) = g.channel_stats(x[0], 1e-5)?;
        let a = project(g, mu, 19)?;
        let b = project(g, sigma, 20)?;
        g.add(a, b)
    });

    // Conv → leaky ReLU → sum, with inputs resampled until every
    // pre-activation clears the kink margin.
    let (cx, ck) = loop {
        let cx = uniform(r, &[1, 6, 6], -1.0, 1.0);
        let ck = uniform(r, &[2, 1, 3, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let (xv, kv) = (g.leaf(&cx), g.leaf(&ck));
        let y = g.conv2d(xv, kv, 1).expect("valid conv");
        if g.value(y).iter().all(|v| v.abs() > KINK_MARGIN) {
            break (cx, ck);
        }
    };
    case!("conv2d_leaky_relu_sum", [cx, ck], |g, x| {
        let y = g.conv2d(x[0], x[1], 1)?;
        let y = g.leaky_relu(y, 0.2);
        Ok(g.sum(y))
    });

    // Losses.
    case!("kl_gaussian", [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |g, x| {
        losses::kl_gaussian(g, code(x))
    });
    let eps = uniform(r, &[2, 3], -1.0, 1.0);
    case!("reparameterize", [uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], move |g, x| {
        let e = g.leaf_as(&eps, false);
        let z = losses::reparameterize(g, code(x), e)?;
        project(g, z, 21)
    });
    case!(
        "vae_loss",
        [
            uniform(r, &[2, 3], -1.0, 1.0),
            uniform(r, &[2, 3], -1.0, 1.0),
            uniform(r, &[2, 1, 3, 3], 0.0, 1.0),
            uniform(r, &[2, 1, 3, 3], 0.0, 1.0),
        ],
        |g, x| losses::vae_loss(g, x[2], x[3], code(x), 2.5)
    );
    let psi = std::rc::Rc::new(FeatureExtractor::<f64>::new(7));
    {
        let psi = psi.clone();
        case!("perceptual_loss", [uniform(r, &[1, 1, 8, 8], 0.0, 1.0), uniform(r, &[1, 1, 8, 8], 0.0, 1.0)], move |g, x| {
            losses::perceptual_loss(g, x[0], x[1], &psi)
        });
    }

    // Introspective encoder loss with the hinge active (KL of the generated
    // code well below m) and inactive (well above m).
    for (name, m) in [("introvae_encoder_hinge_active", 50.0), ("introvae_encoder_hinge_inactive", 0.05)] {
        let real = [uniform(r, &[2, 3], -0.5, 0.5), uniform(r, &[2, 3], -0.5, 0.5)];
        let gen = [uniform(r, &[2, 3], 0.5, 1.5), uniform(r, &[2, 3], 0.5, 1.0)];
        let imgs = [uniform(r, &[2, 1, 3, 3], 0.0, 1.0), uniform(r, &[2, 1, 3, 3], 0.0, 1.0)];
        case!(
            name,
            [real[0].clone(), real[1].clone(), gen[0].clone(), gen[1].clone(), imgs[0].clone(), imgs[1].clone()],
            move |g, x| {
                losses::introvae_encoder_loss(g, x[4], x[5], code(&x[0..2]), code(&x[2..4]), m, 0.25, 0.5)
            }
        );
    }
    case!(
        "introvae_generator_loss",
        [
            uniform(r, &[2, 3], -1.0, 1.0),
            uniform(r, &[2, 3], -1.0, 1.0),
            uniform(r, &[2, 1, 3, 3], 0.0, 1.0),
            uniform(r, &[2, 1, 3, 3], 0.0, 1.0),
        ],
        |g, x| losses::introvae_generator_loss(g, x[2], x[3], code(x), 0.25, 0.5)
    );
    case!(
        "adain",
        [uniform(r, &[3, 3, 3], -1.0, 1.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -1.0, 1.0)],
        |g, x| {
            let y = adain(g, x[0], x[1], x[2])?;
            project(g, y, 22)
        }
    );

    // Mapping network → AdaIN → sum, through a small style generator.
    let hp = Hyperparams { latent_dim: 4, width: 4, ..Hyperparams::for_architecture(Architecture::StyleGan) };
    let small = std::rc::Rc::new(ModelParams::<f64>::build(Architecture::StyleGan, 16, seed, hp).expect("valid model"));
    let map_params: Vec<Tensor<f64>> = small.groups()[0].tensors[..4].to_vec();
    let mut inputs = vec![uniform(r, &[1, 4], -1.0, 1.0), uniform(r, &[1, 4, 3, 3], -1.0, 1.0)];
    inputs.extend(map_params);
    v.push(Case {
        name: "style_map_adain_sum",
        inputs,
        f: Box::new(move |g, x| {
            let w = small.style_map(g, &x[2..6], x[0])?;
            let ys = g.add_scalar(w, 1.0);
            let yb = g.scale(w, 0.5);
            let y = adain(g, x[1], ys, yb)?;
            project(g, y, 23)
        }),
    });
    case!("gan_minmax_value", [uniform(r, &[4], 0.1, 0.9), uniform(r, &[4], 0.1, 0.9)], |g, x| {
        losses::gan_minmax_value(g, x[0], x[1])
    });
    case!("wgan_critic_loss", [uniform(r, &[4, 1], -2.0, 2.0), uniform(r, &[4, 1], -2.0, 2.0)], |g, x| {
        let (d, _) = losses::wgan_losses(g, x[0], x[1])?;
        // keep the gradient from being constant in the inputs
        let d2 = g.square(d);
        g.add(d, d2)
    });
    case!("wgan_generator_loss", [uniform(r, &[4, 1], -2.0, 2.0), uniform(r, &[4, 1], -2.0, 2.0)], |g, x| {
        let (_, l) = losses::wgan_losses(g, x[0], x[1])?;
        let l2 = g.square(l);
        g.add(l, l2)
    });
    v
}

/// Names of every check, in run order.
pub fn check_names() -> Vec<&'static str> {
    cases(0).into_iter().map(|c| c.name).collect()
}

/// Runs every check with central step `h` and reports the largest relative
/// error of each.
pub fn run(seed: u64, h: f64, tolerance: f64) -> Result<Vec<CheckResult>> {
    cases(seed)
        .into_iter()
        .map(|c| {
            let err = grad_check_many(|g, vs| (c.f)(g, vs), &c.inputs, h)?;
            Ok(CheckResult { name: c.name.to_string(), max_relative_error: err, passed: err < tolerance })
        })
        .collect()
}

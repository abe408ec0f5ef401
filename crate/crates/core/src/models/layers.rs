//! Parameterized building blocks. A layer holds indices into the flat
//! parameter list of its group; `forward` takes the graph variables that
//! the group's tensors were loaded as.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, PlaneKind, Tensor, Var, DEFAULT_LEAKY_SLOPE, DEFAULT_STD_EPS};
use crate::Scalar;

/// Collects named parameters for one group. Weights are He-initialized
/// unless built through the `_lecun` variants.
pub(crate) struct ParamBuilder<'r, T, R> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    rng: &'r mut R,
}

impl<'r, T: Scalar, R: Rng> ParamBuilder<'r, T, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), rng }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, stride: usize) -> Conv {
        let w = Tensor::he_normal(&[c_out, c_in, k, k], c_in * k * k, self.rng);
        self.conv_from(name, w, stride)
    }

    pub fn conv_lecun(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, stride: usize) -> Conv {
        let w = Tensor::lecun_normal(&[c_out, c_in, k, k], c_in * k * k, self.rng);
        self.conv_from(name, w, stride)
    }

    fn conv_from(&mut self, name: &str, w: Tensor<T>, stride: usize) -> Conv {
        let c_out = w.shape()[0];
        let w = self.push(format!("{name}.weight"), w);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv { w, b, stride }
    }

    pub fn linear(&mut self, name: &str, n_in: usize, n_out: usize) -> Linear {
        self.linear_with_bias(name, n_in, n_out, T::zero())
    }

    pub fn linear_lecun(&mut self, name: &str, n_in: usize, n_out: usize) -> Linear {
        let w = Tensor::lecun_normal(&[n_in, n_out], n_in, self.rng);
        self.linear_from(name, w, T::zero())
    }

    pub fn linear_with_bias(&mut self, name: &str, n_in: usize, n_out: usize, bias: T) -> Linear {
        let w = Tensor::he_normal(&[n_in, n_out], n_in, self.rng);
        self.linear_from(name, w, bias)
    }

    fn linear_from(&mut self, name: &str, w: Tensor<T>, bias: T) -> Linear {
        let n_out = w.shape()[1];
        let w = self.push(format!("{name}.weight"), w);
        let b = self.push(format!("{name}.bias"), Tensor::filled(&[n_out], bias));
        Linear { w, b }
    }

    pub fn tensor(&mut self, name: &str, t: Tensor<T>) -> usize {
        self.push(name.to_string(), t)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    stride: usize,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.w], self.stride)?;
        g.add_channel_bias(y, p[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    /// `[N×in] → [N×out]`
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_bias(y, p[self.b])
    }
}

pub(crate) fn lrelu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, T::of(DEFAULT_LEAKY_SLOPE))
}

/// Per-sample, per-channel standardization of a feature map; stands in for
/// batch normalization.
pub(crate) fn channel_norm<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (mu, sigma) = g.channel_stats(x, T::of(DEFAULT_STD_EPS))?;
    let centered = g.plane_op(x, mu, PlaneKind::Sub)?;
    g.plane_op(centered, sigma, PlaneKind::Div)
}

/// Adaptive instance normalization: `ys·(x − μ(x))/σ(x) + yb` per plane.
/// `ys` and `yb` have the shape of `x` without its two spatial axes.
pub fn adain<T: Scalar>(g: &mut Graph<T>, x: Var, ys: Var, yb: Var) -> Result<Var> {
    let normed = channel_norm(g, x)?;
    let scaled = g.plane_op(normed, ys, PlaneKind::Mul)?;
    g.plane_op(scaled, yb, PlaneKind::Add)
}

/// Number of stride-2 4×4 convolutions applied while the map is larger
/// than 4 pixels, with the resulting side length.
pub(crate) fn downsampling_plan(size: usize) -> (usize, usize) {
    let (mut s, mut n) = (size, 0);
    while s > 4 {
        s = (s - 4) / 2 + 1;
        n += 1;
    }
    (n, s)
}

/// Stack of 4×4 stride-2 convolutions, optionally normalized, each
/// followed by a leaky rectifier, then flattened.
#[derive(Clone, Debug)]
pub(crate) struct ConvStack {
    convs: Vec<Conv>,
    normalize: bool,
    pub flat: usize,
}

impl ConvStack {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        prefix: &str,
        size: usize,
        width: usize,
        normalize: bool,
    ) -> Self {
        let (n, side) = downsampling_plan(size);
        let mut convs = Vec::with_capacity(n);
        let mut c_in = 1;
        let mut c_out = width;
        for i in 0..n {
            convs.push(b.conv(&format!("{prefix}.conv{i}"), c_out, c_in, 4, 2));
            c_in = c_out;
            c_out = 2 * width;
        }
        Self { convs, normalize, flat: c_in * side * side }
    }

    /// `[N,1,H,W] → [N, flat]`
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, p, h)?;
            if self.normalize {
                h = channel_norm(g, h)?;
            }
            h = lrelu(g, h);
        }
        g.reshape(h, &[n, self.flat])
    }
}

/// Variational encoder: conv stack then two linear heads for `(μ, log σ²)`.
#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    stack: ConvStack,
    mu: Linear,
    logvar: Linear,
}

impl Encoder {
    pub fn build<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, size: usize, width: usize, latent: usize) -> Self {
        let stack = ConvStack::build(b, "enc", size, width, true);
        let mu = b.linear("enc.mu", stack.flat, latent);
        let logvar = b.linear("enc.logvar", stack.flat, latent);
        Self { stack, mu, logvar }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let h = self.stack.forward(g, p, x)?;
        Ok((self.mu.forward(g, p, h)?, self.logvar.forward(g, p, h)?))
    }
}

/// Side length of the first decoder feature map for an output of `size`.
pub(crate) fn decoder_base(size: usize) -> usize {
    size / 4 + 4
}

/// Decoder: linear projection to a `C×b×b` map, then four valid 3×3
/// convolutions with two nearest-neighbour ×2 upsamplings, ending in a
/// sigmoid.
#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    fc: Linear,
    convs: [Conv; 4],
    channels: usize,
    base: usize,
}

impl Decoder {
    pub fn build<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, size: usize, width: usize, latent: usize) -> Self {
        let base = decoder_base(size);
        let c = width;
        let fc = b.linear_lecun("dec.fc", latent, c * base * base);
        let convs = [
            b.conv("dec.conv0", c, c, 3, 1),
            b.conv("dec.conv1", c, c, 3, 1),
            b.conv("dec.conv2", c / 2, c, 3, 1),
            b.conv_lecun("dec.conv3", 1, c / 2, 3, 1),
        ];
        Self { fc, convs, channels: c, base }
    }

    /// `[N×d] → [N,1,H,W]`
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], z: Var) -> Result<Var> {
        let n = g.shape(z)[0];
        let h = self.fc.forward(g, p, z)?;
        let h = g.reshape(h, &[n, self.channels, self.base, self.base])?;
        let mut h = lrelu(g, h);
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            if i < 3 {
                h = lrelu(g, h);
            }
            if i < 2 {
                h = g.upsample_nn(h, 2)?;
            }
        }
        Ok(g.sigmoid(h))
    }
}

/// Style-based generator: mapping network, learned constant input, and
/// per-layer noise plus AdaIN ahead of each hidden convolution.
#[derive(Clone, Debug)]
pub(crate) struct StyleGenerator {
    map1: Linear,
    map2: Linear,
    constant: usize,
    noise_scales: [usize; 3],
    styles: [Linear; 3],
    shifts: [Linear; 3],
    convs: [Conv; 4],
    channels: usize,
    base: usize,
}

impl StyleGenerator {
    pub fn build<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, size: usize, width: usize, style_dim: usize) -> Self {
        let base = decoder_base(size);
        let c = width;
        let map1 = b.linear("map.fc0", style_dim, style_dim);
        let map2 = b.linear("map.fc1", style_dim, style_dim);
        let constant = b.tensor("gen.const", Tensor::filled(&[c, base, base], T::one()));
        let noise_scales = [0, 1, 2].map(|i| b.tensor(&format!("gen.noise{i}.scale"), Tensor::zeros(&[1])));
        // Scale and bias for each AdaIN site come from one linear map of w;
        // the scale half starts at 1 so the first layers pass signal.
        let styles = [0, 1, 2].map(|i| b.linear_with_bias(&format!("gen.style{i}.scale"), style_dim, c, T::one()));
        let shifts = [0, 1, 2].map(|i| b.linear(&format!("gen.style{i}.bias"), style_dim, c));
        let convs = [
            b.conv("gen.conv0", c, c, 3, 1),
            b.conv("gen.conv1", c, c, 3, 1),
            b.conv("gen.conv2", c / 2, c, 3, 1),
            b.conv("gen.conv3", 1, c / 2, 3, 1),
        ];
        Self { map1, map2, constant, noise_scales, styles, shifts, convs, channels: c, base }
    }

    /// Shapes of the noise planes consumed by [`StyleGenerator::forward`]
    /// for a batch of `n`.
    pub fn noise_shapes(&self, n: usize) -> [Vec<usize>; 3] {
        let c = self.channels;
        let s0 = self.base;
        let s1 = 2 * (s0 - 2);
        let s2 = 2 * (s1 - 2);
        [vec![n, c, s0, s0], vec![n, c, s1, s1], vec![n, c, s2, s2]]
    }

    /// Mapping network `z → w`.
    pub fn style_map<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], z: Var) -> Result<Var> {
        let h = self.map1.forward(g, p, z)?;
        let h = lrelu(g, h);
        self.map2.forward(g, p, h)
    }

    /// `z [N×d]` and three noise maps → `[N,1,H,W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], z: Var, noise: &[Var; 3]) -> Result<Var> {
        let n = g.shape(z)[0];
        let w = self.style_map(g, p, z)?;
        let mut h = g.broadcast_batch(p[self.constant], n)?;
        for (i, conv) in self.convs.iter().enumerate() {
            if i < 3 {
                let nz = g.mul_scalar_var(noise[i], p[self.noise_scales[i]])?;
                h = g.add(h, nz)?;
                let ys = self.styles[i].forward(g, p, w)?;
                let yb = self.shifts[i].forward(g, p, w)?;
                h = adain(g, h, ys, yb)?;
            }
            h = conv.forward(g, p, h)?;
            if i < 3 {
                h = lrelu(g, h);
            }
            if i < 2 {
                h = g.upsample_nn(h, 2)?;
            }
        }
        Ok(g.sigmoid(h))
    }
}

/// Wasserstein critic: unnormalized conv stack and a linear score.
#[derive(Clone, Debug)]
pub(crate) struct Critic {
    stack: ConvStack,
    out: Linear,
}

impl Critic {
    pub fn build<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, size: usize, width: usize) -> Self {
        let stack = ConvStack::build(b, "critic", size, width, false);
        let out = b.linear("critic.out", stack.flat, 1);
        Self { stack, out }
    }

    /// `[N,1,H,W] → [N×1]` scores.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.stack.forward(g, p, x)?;
        self.out.forward(g, p, h)
    }
}

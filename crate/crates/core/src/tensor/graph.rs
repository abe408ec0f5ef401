use super::kernels::{
    batch_major_to_channel_major, channel_major_to_batch_major, col2im, conv_output_len, im2col,
    upsample, upsample_backward, ConvGeom,
};
use super::{numel, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::{gemm, MatRef};
use crate::Scalar;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise operation between a feature map and one value per plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaneKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    ChannelBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Reshape(Var),
    BroadcastBatch(Var, usize),
    Conv2d { x: Var, k: Var, stride: usize },
    Upsample(Var, usize),
    Plane(Var, Var, PlaneKind),
    ChannelMean(Var),
    ChannelStd(Var, T),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<T>>,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node list is always topologically sorted.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
}

/// Splits a feature-map shape into (planes, plane size). Accepts `[C,H,W]`
/// and `[N,C,H,W]`.
fn plane_layout(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 3 && shape.len() != 4 {
        return Err(shape_err(format!("expected a [C,H,W] or [N,C,H,W] map, got {shape:?}")));
    }
    let r = shape.len();
    Ok((numel(&shape[..r - 2]), shape[r - 2] * shape[r - 1]))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `tensor` as a leaf; it takes part in differentiation
    /// when the tensor has `requires_grad` set.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, tensor.requires_grad())
    }

    /// Records a leaf with an explicit gradient flag regardless of the
    /// tensor's own setting.
    pub fn leaf_as(&mut self, tensor: &Tensor<T>, requires_grad: bool) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, requires_grad)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if data.len() != numel(shape) {
            return Err(shape_err(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// A differentiable input.
    pub fn variable(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if data.len() != numel(shape) {
            return Err(shape_err(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// First element of a node's value; meant for scalar results.
    pub fn item(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Adds the gradient recorded for leaf `v` into `tensor`'s accumulator.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        if let Some(g) = self.grad(v) {
            tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, op, rg))
    }

    // ----------------------------------------------------------------------
    // Operations

    /// `[n×k]·[k×m] → [n×m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} · {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        gemm(MatRef::new(self.value(a), n, k), MatRef::new(self.value(b), k, m), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`m` bias to every row of an `[n×m]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(shape_err(format!("add_bias {sx:?} + {sb:?}")));
        }
        let m = sx[1];
        let bias = self.value(b);
        let value = self.value(x).iter().enumerate().map(|(i, &v)| v + bias[i % m]).collect();
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(shape, value, Op::AddBias(x, b), rg))
    }

    /// Adds one bias value per channel to a `[C,H,W]` or `[N,C,H,W]` map.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (_, plane) = plane_layout(&sx)?;
        let c = sx[sx.len() - 3];
        if self.shape(b) != [c] {
            return Err(shape_err(format!("channel bias {:?} for map {sx:?}", self.shape(b))));
        }
        let bias = self.value(b);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[(i / plane) % c])
            .collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(sx, value, Op::ChannelBias(x, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(a), |v| v + c)
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err(format!("scalar multiplier of shape {:?}", self.shape(s))));
        }
        let c = self.value(s)[0];
        let value = self.value(a).iter().map(|&v| v * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(shape, value, Op::MulScalarVar(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), T::exp)
    }

    /// Natural logarithm; every input element must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain(format!("logarithm of {v}")));
        }
        Ok(self.unary(a, Op::Ln(a), T::ln))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |v| T::one() / (T::one() + (-v).exp()))
    }

    /// `x` for `x ≥ 0`, `slope·x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), move |v| if v >= T::zero() { v } else { v * slope })
    }

    /// `max(0, x)`
    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s: T = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s / n], Op::Mean(a), rg)
    }

    /// Row sums of an `[n×m]` matrix, giving `[n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(shape_err(format!("sum_rows expects a matrix, got {sa:?}")));
        }
        let (n, m) = (sa[0], sa[1]);
        let value = self.value(a).chunks(m).map(|r| r.iter().copied().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(vec![n], value, Op::SumRows(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(shape_err(format!("reshape {:?} to {shape:?}", self.shape(a))));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    /// Repeats `a` `n` times along a new leading axis.
    pub fn broadcast_batch(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(shape_err("broadcast to an empty batch"));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(a));
        let value = self.value(a).repeat(n);
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::BroadcastBatch(a, n), rg))
    }

    /// Valid cross-correlation of `x` (`[C,H,W]` or `[N,C,H,W]`) with
    /// kernels `k` (`[C_out,C_in,kh,kw]`).
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (g, out_shape) = self.conv_geom(x, k, stride)?;
        let co = self.shape(k)[0];
        let cols = im2col(self.value(x), &g);
        let mut tmp = vec![T::zero(); co * g.columns()];
        gemm(
            MatRef::new(self.value(k), co, g.patch_len()),
            MatRef::new(&cols, g.patch_len(), g.columns()),
            &mut tmp,
            false,
        );
        let value = channel_major_to_batch_major(&tmp, g.batch, co, g.out_h * g.out_w);
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(out_shape, value, Op::Conv2d { x, k, stride }, rg))
    }

    fn conv_geom(&self, x: Var, k: Var, stride: usize) -> Result<(ConvGeom, Vec<usize>)> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        let batched = match sx.len() {
            4 => true,
            3 => false,
            _ => return Err(shape_err(format!("conv2d input {sx:?}"))),
        };
        if sk.len() != 4 {
            return Err(shape_err(format!("conv2d kernel {sk:?}")));
        }
        let (batch, rest) = if batched { (sx[0], &sx[1..]) } else { (1, sx) };
        let (c, h, w) = (rest[0], rest[1], rest[2]);
        if sk[1] != c {
            return Err(shape_err(format!("conv2d kernel {sk:?} for {c} input channels")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d stride must be positive"));
        }
        let (kh, kw) = (sk[2], sk[3]);
        let (out_h, out_w) = match (conv_output_len(h, kh, stride), conv_output_len(w, kw, stride)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape_err(format!("conv2d kernel {kh}x{kw} larger than input {h}x{w}"))),
        };
        let mut out_shape = if batched { vec![batch] } else { vec![] };
        out_shape.extend_from_slice(&[sk[0], out_h, out_w]);
        let g = ConvGeom { batch, channels: c, height: h, width: w, kh, kw, stride, out_h, out_w };
        Ok((g, out_shape))
    }

    /// Nearest-neighbour upsampling of the two trailing axes.
    pub fn upsample_nn(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(shape_err("upsampling factor must be positive"));
        }
        let sx = self.shape(x).to_vec();
        let (planes, _) = plane_layout(&sx)?;
        let r = sx.len();
        let (h, w) = (sx[r - 2], sx[r - 1]);
        let value = upsample(self.value(x), planes, h, w, factor);
        let mut shape = sx;
        shape[r - 2] *= factor;
        shape[r - 1] *= factor;
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Upsample(x, factor), rg))
    }

    /// Combines every H×W plane of `x` with the matching entry of `c`, whose
    /// shape is `x`'s shape without the two trailing axes.
    pub fn plane_op(&mut self, x: Var, c: Var, kind: PlaneKind) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (planes, plane) = plane_layout(&sx)?;
        if self.shape(c) != &sx[..sx.len() - 2] {
            return Err(shape_err(format!("per-plane values {:?} for map {sx:?}", self.shape(c))));
        }
        let cv = self.value(c);
        if kind == PlaneKind::Div && cv.iter().any(|v| *v == T::zero()) {
            return Err(Error::Domain("division by a zero plane value".into()));
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(xv.len());
        for p in 0..planes {
            let s = cv[p];
            let src = &xv[p * plane..(p + 1) * plane];
            match kind {
                PlaneKind::Add => value.extend(src.iter().map(|&v| v + s)),
                PlaneKind::Sub => value.extend(src.iter().map(|&v| v - s)),
                PlaneKind::Mul => value.extend(src.iter().map(|&v| v * s)),
                PlaneKind::Div => value.extend(src.iter().map(|&v| v / s)),
            }
        }
        let rg = self.rg(x) || self.rg(c);
        Ok(self.push(sx, value, Op::Plane(x, c, kind), rg))
    }

    /// Mean of every H×W plane.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (_, plane) = plane_layout(&sx)?;
        let n = T::of(plane as f64);
        let value = self.value(x).chunks(plane).map(|p| p.iter().copied().sum::<T>() / n).collect();
        let rg = self.rg(x);
        Ok(self.push(sx[..sx.len() - 2].to_vec(), value, Op::ChannelMean(x), rg))
    }

    /// Population standard deviation of every H×W plane, clamped below at
    /// `eps`. Clamped entries pass no gradient.
    pub fn channel_std(&mut self, x: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (_, plane) = plane_layout(&sx)?;
        let value = self.value(x).chunks(plane).map(|p| plane_std(p).max(eps)).collect();
        let rg = self.rg(x);
        Ok(self.push(sx[..sx.len() - 2].to_vec(), value, Op::ChannelStd(x, eps), rg))
    }

    /// Per-plane `(mean, clamped std)`.
    pub fn channel_stats(&mut self, x: Var, eps: T) -> Result<(Var, Var)> {
        Ok((self.channel_mean(x)?, self.channel_std(x, eps)?))
    }

    // ----------------------------------------------------------------------
    // Differentiation

    /// Back-propagates from the scalar `loss`, adding `∂loss/∂leaf` into the
    /// gradient of every differentiable leaf it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if let Op::Leaf = op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (input, contribution) in self.local_grads(i, &op, &g) {
                match &mut grads[input.0] {
                    Some(acc) => add_into(acc, &contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each differentiable input.
    fn local_grads(&self, i: usize, op: &Op<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let out = &self.nodes[i];
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
                let m = self.shape(b)[1];
                if self.rg(a) {
                    let mut da = vec![T::zero(); n * k];
                    gemm(MatRef::new(g, n, m), MatRef::t(self.value(b), k, m), &mut da, false);
                    res.push((a, da));
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); k * m];
                    gemm(MatRef::t(self.value(a), n, k), MatRef::new(g, n, m), &mut db, false);
                    res.push((b, db));
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(x) {
                    res.push((x, g.to_vec()));
                }
                if self.rg(b) {
                    let m = self.shape(b)[0];
                    let mut db = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        add_into(&mut db, row);
                    }
                    res.push((b, db));
                }
            }
            Op::ChannelBias(x, b) => {
                if self.rg(x) {
                    res.push((x, g.to_vec()));
                }
                if self.rg(b) {
                    let (_, plane) = plane_layout(&out.shape).expect("checked at creation");
                    let c = self.shape(b)[0];
                    let mut db = vec![T::zero(); c];
                    for (p, chunk) in g.chunks(plane).enumerate() {
                        db[p % c] += chunk.iter().copied().sum::<T>();
                    }
                    res.push((b, db));
                }
            }
            Op::Add(a, b) => {
                if self.rg(a) {
                    res.push((a, g.to_vec()));
                }
                if self.rg(b) {
                    res.push((b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    res.push((a, g.to_vec()));
                }
                if self.rg(b) {
                    res.push((b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    res.push((a, g.iter().zip(self.value(b)).map(|(&d, &y)| d * y).collect()));
                }
                if self.rg(b) {
                    res.push((b, g.iter().zip(self.value(a)).map(|(&d, &x)| d * x).collect()));
                }
            }
            Op::Scale(a, c) => res.push((a, g.iter().map(|&d| d * c).collect())),
            Op::AddScalar(a) => res.push((a, g.to_vec())),
            Op::MulScalarVar(a, s) => {
                let c = self.value(s)[0];
                if self.rg(a) {
                    res.push((a, g.iter().map(|&d| d * c).collect()));
                }
                if self.rg(s) {
                    let ds = g.iter().zip(self.value(a)).map(|(&d, &x)| d * x).sum();
                    res.push((s, vec![ds; 1]));
                }
            }
            Op::Exp(a) => res.push((a, g.iter().zip(&out.value).map(|(&d, &y)| d * y).collect())),
            Op::Ln(a) => res.push((a, g.iter().zip(self.value(a)).map(|(&d, &x)| d / x).collect())),
            Op::Square(a) => {
                let two = T::of(2.0);
                res.push((a, g.iter().zip(self.value(a)).map(|(&d, &x)| two * d * x).collect()))
            }
            Op::Sigmoid(a) => res.push((
                a,
                g.iter().zip(&out.value).map(|(&d, &y)| d * y * (T::one() - y)).collect(),
            )),
            Op::LeakyRelu(a, slope) => res.push((
                a,
                g.iter()
                    .zip(self.value(a))
                    .map(|(&d, &x)| if x >= T::zero() { d } else { d * slope })
                    .collect(),
            )),
            Op::Sum(a) => res.push((a, vec![g[0]; self.value(a).len()])),
            Op::Mean(a) => {
                let n = self.value(a).len();
                res.push((a, vec![g[0] / T::of(n as f64); n]))
            }
            Op::SumRows(a) => {
                let m = self.shape(a)[1];
                res.push((a, g.iter().flat_map(|&d| std::iter::repeat_n(d, m)).collect()))
            }
            Op::Reshape(a) => res.push((a, g.to_vec())),
            Op::BroadcastBatch(a, n) => {
                let len = self.value(a).len();
                let mut da = vec![T::zero(); len];
                for r in 0..n {
                    add_into(&mut da, &g[r * len..(r + 1) * len]);
                }
                res.push((a, da));
            }
            Op::Conv2d { x, k, stride } => {
                let (geom, _) = self.conv_geom(x, k, stride).expect("checked at creation");
                let co = self.shape(k)[0];
                let gt = batch_major_to_channel_major(g, geom.batch, co, geom.out_h * geom.out_w);
                if self.rg(k) {
                    let cols = im2col(self.value(x), &geom);
                    let mut dk = vec![T::zero(); co * geom.patch_len()];
                    gemm(
                        MatRef::new(&gt, co, geom.columns()),
                        MatRef::t(&cols, geom.patch_len(), geom.columns()),
                        &mut dk,
                        false,
                    );
                    res.push((k, dk));
                }
                if self.rg(x) {
                    let mut dcols = vec![T::zero(); geom.patch_len() * geom.columns()];
                    gemm(
                        MatRef::t(self.value(k), co, geom.patch_len()),
                        MatRef::new(&gt, co, geom.columns()),
                        &mut dcols,
                        false,
                    );
                    let mut dx = vec![T::zero(); self.value(x).len()];
                    col2im(&dcols, &geom, &mut dx);
                    res.push((x, dx));
                }
            }
            Op::Upsample(x, factor) => {
                let sx = self.shape(x);
                let (planes, _) = plane_layout(sx).expect("checked at creation");
                let r = sx.len();
                res.push((x, upsample_backward(g, planes, sx[r - 2], sx[r - 1], factor)));
            }
            Op::Plane(x, c, kind) => {
                let (planes, plane) = plane_layout(self.shape(x)).expect("checked at creation");
                let (xv, cv) = (self.value(x), self.value(c));
                if self.rg(x) {
                    let mut dx = Vec::with_capacity(xv.len());
                    for p in 0..planes {
                        let gp = &g[p * plane..(p + 1) * plane];
                        match kind {
                            PlaneKind::Add | PlaneKind::Sub => dx.extend_from_slice(gp),
                            PlaneKind::Mul => dx.extend(gp.iter().map(|&d| d * cv[p])),
                            PlaneKind::Div => dx.extend(gp.iter().map(|&d| d / cv[p])),
                        }
                    }
                    res.push((x, dx));
                }
                if self.rg(c) {
                    let mut dc = vec![T::zero(); planes];
                    for p in 0..planes {
                        let gp = &g[p * plane..(p + 1) * plane];
                        let xp = &xv[p * plane..(p + 1) * plane];
                        dc[p] = match kind {
                            PlaneKind::Add => gp.iter().copied().sum(),
                            PlaneKind::Sub => -gp.iter().copied().sum::<T>(),
                            PlaneKind::Mul => gp.iter().zip(xp).map(|(&d, &v)| d * v).sum(),
                            PlaneKind::Div => {
                                let s2 = cv[p] * cv[p];
                                -gp.iter().zip(xp).map(|(&d, &v)| d * v).sum::<T>() / s2
                            }
                        };
                    }
                    res.push((c, dc));
                }
            }
            Op::ChannelMean(x) => {
                let (_, plane) = plane_layout(self.shape(x)).expect("checked at creation");
                let n = T::of(plane as f64);
                res.push((x, g.iter().flat_map(|&d| std::iter::repeat_n(d / n, plane)).collect()));
            }
            Op::ChannelStd(x, eps) => {
                let (_, plane) = plane_layout(self.shape(x)).expect("checked at creation");
                let n = T::of(plane as f64);
                let mut dx = Vec::with_capacity(self.value(x).len());
                for (p, xp) in self.value(x).chunks(plane).enumerate() {
                    let sigma = out.value[p];
                    let raw = plane_std(xp);
                    if raw < eps || sigma == T::zero() {
                        dx.extend(std::iter::repeat_n(T::zero(), plane));
                        continue;
                    }
                    let mu = xp.iter().copied().sum::<T>() / n;
                    let f = g[p] / (n * sigma);
                    dx.extend(xp.iter().map(|&v| f * (v - mu)));
                }
                res.push((x, dx));
            }
        }
        res
    }
}

fn plane_std<T: Scalar>(p: &[T]) -> T {
    let n = T::of(p.len() as f64);
    let mu = p.iter().copied().sum::<T>() / n;
    (p.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 7.0]);

        let id = g.constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let bm: Vec<f64> = (0..6).map(f64::from).collect();
        let b3 = g.constant(&[3, 2], bm.clone()).unwrap();
        let r = g.matmul(id, b3).unwrap();
        assert_eq!(g.value(r), &bm[..]);
        assert!(matches!(g.matmul(a, b3), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 3, 3], vec![1.0; 9]).unwrap();
        let k = g.constant(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = g.conv2d(x, k, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2]);
        assert_eq!(g.value(y), &[4.0; 4]);

        let x6 = g.constant(&[1, 6, 6], vec![0.5; 36]).unwrap();
        let y6 = g.conv2d(x6, k, 2).unwrap();
        assert_eq!(g.shape(y6), &[1, 3, 3]);

        let data: Vec<f64> = (0..18).map(f64::from).collect();
        let x2 = g.constant(&[2, 3, 3], data.clone()).unwrap();
        let ident = g.constant(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y2 = g.conv2d(x2, ident, 1).unwrap();
        assert_eq!(g.value(y2), &data[..]);

        let big = g.constant(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let small = g.constant(&[1, 2, 2], vec![1.0; 4]).unwrap();
        assert!(matches!(g.conv2d(small, big, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn batched_conv_matches_per_sample() {
        let mut g = Graph::new();
        let xs: Vec<f64> = (0..2 * 2 * 5 * 5).map(|v| (v as f64 * 0.3).sin()).collect();
        let ks: Vec<f64> = (0..3 * 2 * 3 * 3).map(|v| (v as f64 * 0.7).cos()).collect();
        let k = g.constant(&[3, 2, 3, 3], ks).unwrap();
        let xb = g.constant(&[2, 2, 5, 5], xs.clone()).unwrap();
        let yb = g.conv2d(xb, k, 2).unwrap();
        let mut joined = Vec::new();
        for n in 0..2 {
            let xn = g.constant(&[2, 5, 5], xs[n * 50..(n + 1) * 50].to_vec()).unwrap();
            let yn = g.conv2d(xn, k, 2).unwrap();
            joined.extend_from_slice(g.value(yn));
        }
        assert_eq!(g.shape(yb), &[2, 3, 2, 2]);
        for (a, b) in g.value(yb).iter().zip(&joined) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_examples() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let same = g.upsample_nn(x, 1).unwrap();
        assert_eq!(g.value(same), g.value(x));
        let y = g.upsample_nn(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4]);
        assert_eq!(
            g.value(y),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn leaky_relu_examples() {
        let mut g = Graph::new();
        let x = g.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn channel_stats_examples() {
        let mut g = Graph::new();
        let x = g.constant(&[2, 1, 2], vec![0.0, 2.0, 3.0, 3.0]).unwrap();
        let (mu, sigma) = g.channel_stats(x, 1e-5).unwrap();
        assert_eq!(g.value(mu), &[1.0, 3.0]);
        assert_eq!(g.value(sigma), &[1.0, 1e-5]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], vec![1.0, -2.0]).with_requires_grad(true));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), Some(&[1.0, 1.0][..]));

        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], vec![1.0, -2.0]).with_requires_grad(true));
        let sq = g.square(x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), Some(&[2.0, -4.0][..]));
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), Some(&[4.0, -8.0][..]));
        g.zero_grad();
        assert_eq!(g.grad(x), None);
        assert!(matches!(g.backward(sq), Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_reach_tensor_accumulators() {
        let mut w = t(&[2], vec![3.0, 4.0]).with_requires_grad(true);
        for _ in 0..2 {
            let mut g = Graph::new();
            let v = g.leaf(&w);
            let loss = g.sum(v);
            g.backward(loss).unwrap();
            g.accumulate_into(v, &mut w).unwrap();
        }
        assert_eq!(w.grad(), Some(&[2.0, 2.0][..]));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(&[2], vec![1.0, 2.0]).unwrap();
        let x = g.variable(&[2], vec![0.5, 0.5]).unwrap();
        let p = g.mul(c, x).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(c), None);
        assert_eq!(g.grad(x), Some(&[1.0, 2.0][..]));
    }

    #[test]
    fn ln_and_div_domain_errors() {
        let mut g = Graph::new();
        let x = g.constant(&[2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(g.ln(x), Err(Error::Domain(_))));
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::Scalar;

use super::layers::lrelu;

pub const DEFAULT_FEATURE_SEED: u64 = 0x5eed_f00d;
const CHANNELS: [usize; 4] = [1, 8, 16, 16];

/// Fixed, randomly initialized convolutional network whose leaky-ReLU
/// activations define the perceptual loss. Weights never change after
/// construction.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    kernels: Vec<Tensor<T>>,
    seed: u64,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = CHANNELS
            .windows(2)
            .map(|w| Tensor::he_normal(&[w[1], w[0], 3, 3], w[0] * 9, &mut rng))
            .collect();
        Self { kernels, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Indices of the layers whose outputs are compared.
    pub fn tap_layers(&self) -> &'static [usize] {
        &[0, 1, 2]
    }

    pub fn kernels(&self) -> &[Tensor<T>] {
        &self.kernels
    }

    /// Smallest image side the network accepts.
    pub fn min_size(&self) -> usize {
        2 * self.kernels.len() + 1
    }

    /// Activations at every tap for `[N,1,H,W]` or `[1,H,W]` input.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x);
        let side = s[s.len().saturating_sub(2)..].iter().copied().min().unwrap_or(0);
        if side < self.min_size() {
            return Err(shape_err(format!("feature network needs at least {0}×{0} input, got {s:?}", self.min_size())));
        }
        let mut out = Vec::with_capacity(self.kernels.len());
        let mut h = x;
        for k in &self.kernels {
            let kv = g.leaf_as(k, false);
            h = g.conv2d(h, kv, 1)?;
            h = lrelu(g, h);
            out.push(h);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let a = FeatureExtractor::<f64>::new(3);
        let b = FeatureExtractor::<f64>::new(3);
        let c = FeatureExtractor::<f64>::new(4);
        assert_eq!(a.kernels(), b.kernels());
        assert_ne!(a.kernels(), c.kernels());
        assert_eq!(a.tap_layers().len(), 3);
    }

    #[test]
    fn rejects_tiny_inputs() {
        let psi = FeatureExtractor::<f64>::new(0);
        let mut g = Graph::new();
        let x = g.constant(&[1, 1, 6, 6], vec![0.0; 36]).unwrap();
        assert!(psi.features(&mut g, x).is_err());
        let x = g.constant(&[1, 1, 8, 8], vec![0.0; 64]).unwrap();
        assert_eq!(psi.features(&mut g, x).unwrap().len(), 3);
    }
}

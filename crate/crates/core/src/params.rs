//! Named tensor bundles. Gradients and optimizer moments reuse the parameter
//! types themselves, so every bundle exposes its tensors in a fixed order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::Tensor;

pub trait ParamSet: Clone {
    /// Tensors with stable names, in a fixed order.
    fn tensors(&self) -> Vec<(String, &Tensor)>;

    /// Same order as [`ParamSet::tensors`].
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn add_assign(&mut self, other: &Self) {
        let theirs = other.tensors();
        for ((_, mine), (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_assign(t);
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.scale(factor);
        }
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Name of the first tensor holding a non-finite entry.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(name, _)| name)
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor)>,
) -> Vec<(String, &'a mut Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Inverted dropout. Masks hold `0` or `1 / (1 - rate)`.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn mask(&mut self, len: usize) -> Vec<f64> {
        if self.rate <= 0.0 {
            return vec![1.0; len];
        }
        let keep = 1.0 / (1.0 - self.rate);
        (0..len)
            .map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect()
    }
}

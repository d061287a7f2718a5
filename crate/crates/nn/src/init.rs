//! Parameter initialisers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform { fan_in: usize, fan_out: usize },
}

impl Init {
    pub fn sample(self, len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match self {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::GlorotUniform { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt() as f32;
                (0..len).map(|_| rng.random_range(-limit..limit)).collect()
            }
        }
    }
}

/// Keras-style fan computation for a kernel whose last two axes are `(in, out)`.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        _ => {
            let receptive: usize = shape[..shape.len() - 2].iter().product();
            let fan_in = shape[shape.len() - 2] * receptive;
            let fan_out = shape[shape.len() - 1] * receptive;
            (fan_in, fan_out)
        }
    }
}

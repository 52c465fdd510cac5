//! Keyed random streams.
//!
//! Every random draw in the crate comes from an [`RngStream`] identified by a
//! base seed plus an `(epoch, batch, purpose)` key, so a draw never depends on
//! how many draws happened before it elsewhere. That keeps training runs
//! reproducible when optional components (augmentation, subsampling) are
//! switched on or off.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Lower/upper clamp for the uniform draw behind a Gumbel sample.
pub const GUMBEL_U_CLAMP: f64 = 1e-12;

/// What a stream is used for. The payload disambiguates streams that share an
/// epoch and batch, e.g. one stream per example in a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    Init(u32),
    Shuffle,
    Gumbel(u32),
    Subsample(u32),
    Noise(u32),
    Generate(u32),
    Check(u32),
}

impl Purpose {
    fn code(self) -> u64 {
        let (tag, payload) = match self {
            Purpose::Init(p) => (1u64, p),
            Purpose::Shuffle => (2, 0),
            Purpose::Gumbel(p) => (3, p),
            Purpose::Subsample(p) => (4, p),
            Purpose::Noise(p) => (5, p),
            Purpose::Generate(p) => (6, p),
            Purpose::Check(p) => (7, p),
        };
        (tag << 32) | u64::from(payload)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub epoch: u64,
    pub batch: u64,
    pub purpose: Purpose,
}

impl StreamKey {
    pub fn new(epoch: u64, batch: u64, purpose: Purpose) -> Self {
        StreamKey { epoch, batch, purpose }
    }

    /// Key for one-off draws outside the training loop.
    pub fn once(purpose: Purpose) -> Self {
        StreamKey::new(u64::MAX, u64::MAX, purpose)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct RngStream {
    pub seed: u64,
    pub key: StreamKey,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        let mixed = splitmix(splitmix(splitmix(key.epoch) ^ key.batch.rotate_left(17)) ^ key.purpose.code());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(mixed);
        RngStream { seed, key, rng }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        Normal::new(0.0, std).expect("finite std").sample(&mut self.rng)
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal(std)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches element count")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// One Gumbel(0, 1) draw.
    pub fn gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.uniform())
    }
}

/// `-ln(-ln u)` with `u` clamped into `[1e-12, 1 - 1e-12]`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_U_CLAMP, 1.0 - GUMBEL_U_CLAMP);
    -(-u.ln()).ln()
}

/// i.i.d. Gumbel(0, 1) tensor.
pub fn gumbel_sample(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gumbel()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches element count")
}

//! Deterministic stand-in for a frozen vision encoder.
//!
//! Each image id seeds a splitmix64 stream from `fnv1a64(seed_le ++ id)`.
//! Values take the top 24 bits of each draw, mapped exactly onto `[-1, 1)`
//! as `f32`, so output is bit-identical on every platform. A row that comes
//! out all zero is drawn again.

use namecap_core::{fnv1a64, FeatureBlock};

pub const ROWS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PseudoEncoder {
    pub seed: u64,
    pub dim: usize,
}

struct SplitMix64(u64);

impl SplitMix64 {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn unit(&mut self) -> f32 {
        let bits = (self.next() >> 40) as i32;
        (bits - (1 << 23)) as f32 / (1 << 23) as f32
    }
}

impl PseudoEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    /// `32 x dim` features for `image_id`.
    pub fn encode(&self, image_id: &str) -> anyhow::Result<FeatureBlock> {
        anyhow::ensure!(!image_id.is_empty(), "image id must be nonempty");
        anyhow::ensure!(self.dim > 0, "encoder dim must be positive");
        let mut key = self.seed.to_le_bytes().to_vec();
        key.extend_from_slice(image_id.as_bytes());
        let mut rng = SplitMix64(fnv1a64(&key));
        let mut flat = Vec::with_capacity(ROWS * self.dim);
        for _ in 0..ROWS {
            loop {
                let row: Vec<f32> = (0..self.dim).map(|_| rng.unit()).collect();
                if row.iter().any(|&v| v != 0.0) {
                    flat.extend(row);
                    break;
                }
            }
        }
        Ok(FeatureBlock::from_flat(self.dim, flat)?)
    }
}

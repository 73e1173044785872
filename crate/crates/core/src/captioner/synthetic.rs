//! Reproducible toy corpus: a memory of random object keys and captions
//! whose visual features sit near the key of the object they mention.

use crate::error::Result;
use crate::memory::{MemoryRecord, Source, VisualNameMemory};
use crate::nn::Init;
use crate::vecmath::{Embedding, FeatureBlock};

use super::pipeline::VISUAL_ROWS;

pub const OBJECTS: [&str; 20] = [
    "cat",
    "dog",
    "zebra",
    "kite",
    "red bus",
    "umbrella",
    "horse",
    "pizza",
    "laptop",
    "train",
    "clock",
    "sheep",
    "boat",
    "bench",
    "giraffe",
    "banana",
    "vase",
    "oven",
    "teddy bear",
    "skateboard",
];
const VERBS: [&str; 4] = ["sitting", "standing", "lying", "waiting"];
const PLACES: [&str; 4] = ["on the grass", "in the street", "near a table", "under the sky"];
const FEATURE_NOISE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub id: String,
    pub features: FeatureBlock,
    pub caption: String,
    /// Index into [`OBJECTS`] of the pictured object.
    pub object: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub memory: VisualNameMemory,
    pub pairs: Vec<SyntheticPair>,
}

impl SyntheticCorpus {
    /// `n` caption pairs over `dim`-wide features. Pair `i` pictures object
    /// `i mod 20`.
    pub fn generate(n: usize, dim: usize, seed: u64) -> Result<Self> {
        let init = Init { seed };
        let records = OBJECTS
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let key = init.normal(&format!("key:{i}"), 1, dim, 1.0);
                let key = Embedding::new(key.iter().map(|&v| v as f32).collect())?;
                Ok(MemoryRecord::from_key(*name, key, Source::Synthetic))
            })
            .collect::<Result<Vec<_>>>()?;
        let memory = VisualNameMemory::build(&records, dim)?;
        let pairs = (0..n)
            .map(|i| {
                let object = i % OBJECTS.len();
                let key = memory.key(object);
                let noise = init.normal(&format!("feat:{i}"), VISUAL_ROWS, dim, FEATURE_NOISE);
                let flat = (0..VISUAL_ROWS * dim)
                    .map(|j| key[j % dim] + noise[[j / dim, j % dim]] as f32)
                    .collect();
                Ok(SyntheticPair {
                    id: format!("toy{i}"),
                    features: FeatureBlock::from_flat(dim, flat)?,
                    caption: format!(
                        "a {} {} {}",
                        OBJECTS[object],
                        VERBS[i % VERBS.len()],
                        PLACES[(i / PLACES.len() + i) % PLACES.len()]
                    ),
                    object,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { memory, pairs })
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.caption.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_a_seed() {
        let a = SyntheticCorpus::generate(5, 8, 3).unwrap();
        let b = SyntheticCorpus::generate(5, 8, 3).unwrap();
        assert_eq!(a.memory.checksum(), b.memory.checksum());
        for (x, y) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.caption, y.caption);
        }
        let c = SyntheticCorpus::generate(5, 8, 4).unwrap();
        assert_ne!(a.memory.checksum(), c.memory.checksum());
    }

    #[test]
    fn captions_are_distinct_for_twenty_pairs() {
        let c = SyntheticCorpus::generate(20, 16, 0).unwrap();
        let mut caps: Vec<_> = c.captions().collect();
        caps.sort();
        caps.dedup();
        assert_eq!(caps.len(), 20);
        assert_eq!(c.pairs[4].caption, "a red bus sitting in the street");
    }
}

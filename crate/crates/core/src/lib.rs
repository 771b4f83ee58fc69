//! Cytology foundation-model pipeline: tiling and relevance filtering, iBOT
//! pretraining of a small ViT, frozen feature extraction, ABMIL classification
//! and the repeated-split evaluation protocol.

pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod container;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod extract;
pub mod mil;
pub mod optim;
pub mod preprocess;
pub mod ssl;
pub mod synth;
pub mod viz;

pub use error::{Error, Result};

/// Mixes a base seed with a path of integers (splitmix64 steps), giving
/// independent streams for every (stage, step, item) combination.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

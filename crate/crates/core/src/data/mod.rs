//! Synthetic class-structured data, the vector augmentation ladder and
//! positive-pair batches.

mod augment;
mod world;

pub use self::augment::{augment, augment_in_place, build_pair_batch, AugmentLevel, AugmentPolicy, PairBatch};
pub use self::world::{make_world, EpisodePool, Pools, Split, SyntheticWorld, WorldParams};

//! Reconstruction engine: optimizer groups, stage schedule, validation
//! split, divergence rollback, snapshots.

pub mod adam;
mod run;
mod snapshot;

pub use adam::{AdamParams, AdamState};
pub use run::{
    split_validation, Engine, EngineConfig, EngineDgpConfig, IterRecord, ObjectParams,
    ProbeParams, ReconState, Stage,
};
pub use snapshot::{
    load_dgp_checkpoint, restore_snapshot, save_dgp_checkpoint, save_snapshot,
    snapshot_to_container,
};

/// Deterministic per-purpose RNG seeds: splitmix-style mixing of the run
/// seed, a stream tag, and an index (iteration, epoch). Keyed streams make
/// mid-run restores bitwise-equal to uninterrupted runs.
pub(crate) fn stream_seed(seed: u64, tag: u64, idx: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ idx.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const TAG_SPLIT: u64 = 1;
pub(crate) const TAG_SHUFFLE: u64 = 2;
pub(crate) const TAG_OBJECT_NOISE: u64 = 3;
pub(crate) const TAG_PROBE_NOISE: u64 = 4;
pub(crate) const TAG_PRETRAIN_OBJECT: u64 = 5;
pub(crate) const TAG_PRETRAIN_PROBE: u64 = 6;
pub(crate) const TAG_UNET_INIT: u64 = 7;

//! Synthetic bi-temporal optical/SAR scenes with exact directional change labels.
//!
//! Epoch 1 is always rendered as the optical image and epoch 2 as the
//! four-channel SAR image, so a label's direction (added vs disappeared)
//! is unambiguous.

mod changes;
mod dataset;
mod landcover;
mod render;

pub use changes::{apply_changes, label_from_covers, random_change_spec, ChangeEvent, ChangeSpec, Direction, Geometry};
pub use dataset::{
    build_dataset, dequantize, encode_png, generate_sample, load_sample, load_split, quantize, sample_dir, split_sizes, write_label_png, write_png,
    DatasetConfig, GeneratedSample, Manifest, ManifestEntry, Sample, Split, MANIFEST_FILE,
};
pub use landcover::{synth_landcover, synth_scene, ChangeLabelMap, Cover, Grid, LandCoverMap, PlacedObject, SceneConfig};
pub use render::{render_optical, render_sar, OpticalConfig, SarConfig, OPTICAL_SIGNATURES, SAR_BACKSCATTER};

/// Number of directional change classes including background.
pub const NUM_CHANGE_CLASSES: usize = 7;

/// Short codes of the change classes, indexed by label value.
pub const CHANGE_CLASS_NAMES: [&str; NUM_CHANGE_CLASSES] = ["BG", "AB", "AR", "AW", "DB", "DR", "DW"];

/// SplitMix64 step; derives independent sub-seeds from a parent seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

//! Directory-driven datasets, image decoding, preprocessing, augmentation
//! and deterministic batching.

mod dataset;
mod image;
mod manifest;
pub mod synth;

pub use self::image::{
    apply_augment, augment, center_crop, decode_image, hflip, load_image, preprocess,
    resize_bilinear, rotate, to_tensor, AugmentConfig, AugmentParams, RawImage,
};
pub use dataset::{Batch, Batches, Dataset};
pub use manifest::{
    scan_directory, split_sizes, DatasetManifest, Entry, Split, SplitRatios, IMAGE_EXTENSIONS,
};

/// Combines several integers into one well-mixed seed (splitmix64 finalizer
/// applied over the sequence).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

#[cfg(test)]
mod tests;

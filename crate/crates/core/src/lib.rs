//! Volumetric neuroimaging classification and explanation toolkit.
//!
//! The crate trains convolutional classifiers on whole-brain volumes
//! (2D models that read axial slices as channels, and their 3D
//! counterparts), searches architectures with grammatical evolution, fits a
//! linear SVM baseline, and explains predictions with Grad-CAM and guided
//! backpropagation. Synthetic phantoms with known discriminative blobs serve
//! as ground truth.

pub mod augment;
pub mod explain;
pub mod ggp;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod report;
pub mod tensor;
pub mod volio;

/// Deterministic child seed of `base` for the path `parts` (splitmix64
/// finalizer chained over the parts).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
